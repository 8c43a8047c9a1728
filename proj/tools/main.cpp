#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "spkdef/attacks.hpp"
#include "spkdef/dataset.hpp"
#include "spkdef/error.hpp"
#include "spkdef/harness.hpp"
#include "spkdef/model.hpp"

using namespace spkdef;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::filesystem::path manifest_from(const std::string& config, const std::string& manifest) {
    if (!manifest.empty()) return manifest;
    if (config.empty()) throw ConfigError("need --manifest or --config with dataset.manifest");
    json j = read_json(config);
    if (!j.contains("dataset") || !j["dataset"].contains("manifest"))
        throw ConfigError("config: missing key 'dataset.manifest'");
    std::filesystem::path p = j["dataset"]["manifest"].get<std::string>();
    return p.is_absolute() ? p : std::filesystem::path(config).parent_path() / p;
}

TrainConfig training_from(const std::string& config) {
    TrainConfig t;
    if (config.empty()) return t;
    json j = read_json(config);
    if (!j.contains("training")) return t;
    const auto& s = j["training"];
    t.epochs = s.value("epochs", t.epochs);
    t.batch_size = s.value("batch_size", t.batch_size);
    t.learning_rate = s.value("learning_rate", t.learning_rate);
    if (s.contains("adversarial")) {
        const auto& a = s["adversarial"];
        AdversarialConfig adv;
        adv.epsilon = a.value("epsilon", adv.epsilon);
        adv.alpha = a.value("alpha", adv.alpha);
        adv.steps = a.value("steps", adv.steps);
        adv.eot_r = a.value("eot_r", adv.eot_r);
        if (a.contains("chain"))
            for (const auto& tj : a["chain"]) adv.chain.push_back(transform_from_json(tj));
        t.adversarial = adv;
    }
    return t;
}

void log_epoch(std::size_t e, double loss, double acc) {
    std::cerr << "epoch " << e + 1 << "  loss " << loss << "  train acc " << acc << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Speaker-recognition adversarial evaluation toolkit"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, manifest;
    std::uint64_t seed = 0;
    bool seed_given = false;

    auto* gen = app.add_subcommand("gen-data", "Synthesize a speaker corpus");
    std::size_t speakers = 10, voices = 20;
    double duration = 1.0;
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--seed", seed, "Corpus seed");
    gen->add_option("--speakers", speakers, "Number of speakers");
    gen->add_option("--voices", voices, "Voices per speaker");
    gen->add_option("--duration", duration, "Seconds per voice");

    auto* train_cmd = app.add_subcommand("train", "Standard training");
    auto* adv_cmd = app.add_subcommand("advtrain", "Adversarial training (fine-tunes --checkpoint when given)");
    std::size_t epochs = 0;
    for (auto* c : {train_cmd, adv_cmd}) {
        c->add_option("--config", config, "JSON config with dataset and training sections");
        c->add_option("--manifest", manifest, "Dataset manifest (overrides the config)");
        c->add_option("--out", out, "Checkpoint to write")->required();
        c->add_option("--seed", seed, "Training seed");
        c->add_option("--epochs", epochs, "Override the epoch count");
    }
    adv_cmd->add_option("--checkpoint", checkpoint, "Initial model");

    auto* eval_cmd = app.add_subcommand("eval", "Run the defense x attack matrix");
    eval_cmd->add_option("--config", config, "Experiment config")->required();
    eval_cmd->add_option("--out", out, "Output directory (overrides output.dir)");
    eval_cmd->add_option("--seed", seed, "Global seed (overrides seeds.global)");
    eval_cmd->add_option("--checkpoint", checkpoint, "Model (overrides model.checkpoint)");

    auto* atk = app.add_subcommand("attack", "Attack a single WAV against the undefended model");
    std::string wav, kind = "PGD";
    std::size_t label = 0;
    atk->add_option("--checkpoint", checkpoint, "Model")->required();
    atk->add_option("--wav", wav, "Input voice")->required();
    atk->add_option("--label", label, "True speaker")->required();
    atk->add_option("--attack", kind, "FGSM, PGD, CWInf, CW2, NES, PSO or SSA");
    atk->add_option("--config", config, "JSON attack parameters");
    atk->add_option("--out", out, "Adversarial WAV to write")->required();
    atk->add_option("--seed", seed, "Attack seed");

    auto* rep = app.add_subcommand("report", "Render a JSON report");
    std::string input, format = "text";
    rep->add_option("--in", input, "report.json")->required();
    rep->add_option("--format", format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
    rep->add_option("--out", out, "Output file (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);
    {
        auto* sub = app.get_subcommands().front();
        seed_given = sub != rep && sub->count("--seed") > 0;
    }

    try {
        if (*gen) {
            auto m = gen_synthetic_dataset(speakers, voices, duration, seed, out);
            std::cout << "wrote " << m.voices.size() << " voices to " << out << '\n';
        } else if (*train_cmd || *adv_cmd) {
            Corpus corpus = load_corpus(manifest_from(config, manifest));
            TrainConfig tc = training_from(config);
            tc.seed = seed;
            if (epochs) tc.epochs = epochs;
            tc.on_epoch = log_epoch;
            SpeakerModel m;
            if (!checkpoint.empty()) {
                m = SpeakerModel::load(checkpoint);
            } else {
                ModelConfig mc;
                mc.n_speakers = corpus.n_speakers;
                m = SpeakerModel(mc, seed);
            }
            if (*adv_cmd) {
                if (!tc.adversarial) tc.adversarial = AdversarialConfig{};
                adv_train(m, corpus.train, tc);
            } else {
                train(m, corpus.train, tc);
            }
            m.save(out);
            std::cout << "test accuracy " << accuracy(m, corpus.test) << '\n';
        } else if (*eval_cmd) {
            ExperimentConfig cfg = load_experiment_config(config);
            if (!out.empty()) cfg.output_dir = out;
            if (seed_given) cfg.seed = seed;
            if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
            ExperimentReport r = run_experiment(cfg);
            emit_reports(r, cfg);
            std::cout << report_to_text(r);
        } else if (*atk) {
            SpeakerModel m = SpeakerModel::load(checkpoint);
            Waveform x = read_wav(wav);
            json j = config.empty() ? json::object() : read_json(config);
            if (!j.contains("kind")) j["kind"] = kind;
            AttackConfig cfg = attack_from_json(j);
            cfg.seed = seed;
            SpeakerWhiteBox wb(m);
            ScoreFn scores = [&m](std::span<const double> v) {
                return forward_logits(m, Waveform(std::vector<double>(v.begin(), v.end())));
            };
            AttackResult r;
            switch (cfg.kind) {
                case AttackKind::FGSM: r = fgsm(wb, x, label, cfg); break;
                case AttackKind::PGD: r = pgd(wb, x, label, cfg); break;
                case AttackKind::CWInf: r = cw_inf(wb, x, label, cfg); break;
                case AttackKind::CW2: r = cw_l2(wb, x, label, cfg); break;
                case AttackKind::NES: r = nes_attack(scores, x, label, cfg); break;
                case AttackKind::PSO: r = pso_attack(scores, x, label, cfg); break;
                case AttackKind::SSA:
                    r = ssa_attack([&](std::span<const double> v) { return argmax(scores(v)); }, x, label, cfg);
                    break;
            }
            write_wav(r.adversarial, out);
            json res = {{"success", r.success},
                        {"predicted", classify(m, r.adversarial)},
                        {"snr_db", std::isinf(r.distortion.snr_db) ? json("inf") : json(r.distortion.snr_db)},
                        {"l2", r.distortion.l2},
                        {"linf", r.distortion.linf},
                        {"queries", r.queries}};
            std::cout << res.dump(2) << '\n';
        } else if (*rep) {
            ExperimentReport r = report_from_json(read_json(input));
            const ReportFormat f =
                format == "csv" ? ReportFormat::Csv : (format == "json" ? ReportFormat::Json : ReportFormat::Text);
            if (out.empty()) {
                if (f == ReportFormat::Csv) std::cout << report_to_csv(r);
                else if (f == ReportFormat::Json) std::cout << report_to_json(r).dump(2) << '\n';
                else std::cout << report_to_text(r);
            } else {
                emit_report(r, f, out);
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
