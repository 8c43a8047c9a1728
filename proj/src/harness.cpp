#include "spkdef/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

#include "spkdef/error.hpp"
#include "spkdef/feco.hpp"
#include "spkdef/features.hpp"
#include "spkdef/transforms.hpp"

namespace spkdef {

using nlohmann::json;

namespace {

constexpr double kPcmSlack = 1.0 / 32768.0;

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

json num_to_json(double v) {
    if (std::isfinite(v)) return v;
    return fmt(v);
}

double num_from_json(const json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw ConfigError("expected a number, got " + j.dump());
}

json opt_to_json(const std::optional<double>& v) { return v ? num_to_json(*v) : json(nullptr); }

std::optional<double> opt_from_json(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return num_from_json(j.at(key));
}

ClusterMethod cluster_method_from_json(const json& j) {
    if (j.is_number()) return static_cast<ClusterMethod>(j.get<int>());
    const auto s = j.get<std::string>();
    if (s == "kmeans") return ClusterMethod::KMeans;
    if (s == "warped-kmeans" || s == "warped") return ClusterMethod::Warped;
    throw ConfigError("unknown cluster method '" + s + "'");
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
    return out;
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = {{"checkpoint", c.checkpoint.generic_string()}};
    j["dataset"] = {{"manifest", c.manifest.generic_string()}, {"max_test_voices", c.max_test_voices}};
    j["defenses"] = json::array();
    for (const auto& d : c.defenses) {
        json chain = json::array();
        for (const auto& t : d.chain) chain.push_back(transform_to_json(t));
        j["defenses"].push_back({{"name", d.name}, {"chain", chain}});
    }
    j["attacks"] = json::array();
    for (const auto& a : c.attacks) {
        json e = a.config ? attack_to_json(*a.config) : json{{"kind", "None"}};
        e["name"] = a.name;
        if (a.replicate) e["replicate"] = to_string(*a.replicate);
        j["attacks"].push_back(e);
    }
    j["adaptive"] = {{"enabled", c.adaptive}, {"eot_r", c.eot_r}};
    j["seeds"] = {{"global", c.seed}};
    j["output"] = {{"dir", c.output_dir.generic_string()},
                   {"csv", c.csv_name},
                   {"json", c.json_name},
                   {"text", c.text_name},
                   {"save_adversarial", c.save_adversarial}};
    return j;
}

std::optional<std::size_t> feco_position(const std::vector<TransformSpec>& chain) {
    for (std::size_t i = 0; i < chain.size(); ++i)
        if (is_feature_level(chain[i])) return i;
    return std::nullopt;
}

}  // namespace

// ---- config --------------------------------------------------------------------

json transform_to_json(const TransformSpec& t) {
    json j;
    j["kind"] = to_string(t.kind);
    j["name"] = t.name;
    json p = json::object();
    for (const auto& [k, v] : t.params) p[k] = v;
    if (t.kind == TransformKind::FeCo) {
        p["cl_m"] = to_string(static_cast<ClusterMethod>(static_cast<int>(t.param("cl_m"))));
        p["stage"] = to_string(static_cast<FeatureStage>(static_cast<int>(t.param("stage"))));
    }
    j["params"] = p;
    if (!t.command.empty()) j["command"] = t.command;
    return j;
}

TransformSpec transform_from_json(const json& j) {
    if (!j.contains("kind")) throw ConfigError("transform: missing key 'kind'");
    TransformSpec t;
    try {
        t = TransformSpec::defaults(transform_kind_from_string(j.at("kind").get<std::string>()));
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    read_if(j, "name", t.name);
    read_if(j, "command", t.command);
    if (j.contains("params")) {
        for (const auto& [k, v] : j.at("params").items()) {
            if (t.kind == TransformKind::FeCo && k == "cl_m") {
                t.params[k] = static_cast<double>(cluster_method_from_json(v));
            } else if (t.kind == TransformKind::FeCo && k == "stage" && v.is_string()) {
                t.params[k] = static_cast<double>(feature_stage_from_string(v.get<std::string>()));
            } else {
                t.params[k] = num_from_json(v);
            }
        }
    }
    t.validate();
    return t;
}

json attack_to_json(const AttackConfig& a) {
    return {{"kind", to_string(a.kind)},
            {"epsilon", a.epsilon},
            {"alpha", a.alpha},
            {"steps", a.steps},
            {"kappa", a.kappa},
            {"c_init", a.c_init},
            {"binary_search_steps", a.binary_search_steps},
            {"max_iters", a.max_iters},
            {"cw_learning_rate", a.cw_learning_rate},
            {"nes_m", a.nes_m},
            {"nes_sigma", a.nes_sigma},
            {"pso",
             {{"epoch_max", a.pso.epoch_max},
              {"iter_max", a.pso.iter_max},
              {"n_particles", a.pso.n_particles},
              {"w_start", a.pso.w_start},
              {"w_end", a.pso.w_end},
              {"c1", a.pso.c1},
              {"c2", a.pso.c2}}},
            {"ssa", {{"max_factor", a.ssa.max_factor}, {"max_iters", a.ssa.max_iters}, {"window", a.ssa.window}}},
            {"seed", a.seed}};
}

AttackConfig attack_from_json(const json& j) {
    if (!j.contains("kind")) throw ConfigError("attack: missing key 'kind'");
    AttackConfig a;
    try {
        a.kind = attack_kind_from_string(j.at("kind").get<std::string>());
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    read_if(j, "epsilon", a.epsilon);
    read_if(j, "alpha", a.alpha);
    read_if(j, "steps", a.steps);
    read_if(j, "kappa", a.kappa);
    read_if(j, "c_init", a.c_init);
    read_if(j, "binary_search_steps", a.binary_search_steps);
    read_if(j, "max_iters", a.max_iters);
    read_if(j, "cw_learning_rate", a.cw_learning_rate);
    read_if(j, "nes_m", a.nes_m);
    read_if(j, "nes_sigma", a.nes_sigma);
    read_if(j, "seed", a.seed);
    if (j.contains("pso")) {
        const auto& p = j.at("pso");
        read_if(p, "epoch_max", a.pso.epoch_max);
        read_if(p, "iter_max", a.pso.iter_max);
        read_if(p, "n_particles", a.pso.n_particles);
        read_if(p, "w_start", a.pso.w_start);
        read_if(p, "w_end", a.pso.w_end);
        read_if(p, "c1", a.pso.c1);
        read_if(p, "c2", a.pso.c2);
    }
    if (j.contains("ssa")) {
        const auto& s = j.at("ssa");
        read_if(s, "max_factor", a.ssa.max_factor);
        read_if(s, "max_iters", a.ssa.max_iters);
        read_if(s, "window", a.ssa.window);
    }
    a.validate();
    return a;
}

ExperimentConfig parse_experiment_config(const json& j, const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    try {
        if (!j.contains("model") || !j.at("model").contains("checkpoint"))
            throw ConfigError("config: missing key 'model.checkpoint'");
        if (!j.contains("dataset") || !j.at("dataset").contains("manifest"))
            throw ConfigError("config: missing key 'dataset.manifest'");
        c.checkpoint = resolve(j.at("model").at("checkpoint").get<std::string>(), base_dir);
        c.manifest = resolve(j.at("dataset").at("manifest").get<std::string>(), base_dir);
        read_if(j.at("dataset"), "max_test_voices", c.max_test_voices);
        if (j.contains("defenses")) {
            for (const auto& d : j.at("defenses")) {
                DefenseEntry e;
                read_if(d, "name", e.name);
                if (d.contains("chain"))
                    for (const auto& t : d.at("chain")) e.chain.push_back(transform_from_json(t));
                c.defenses.push_back(std::move(e));
            }
        }
        if (c.defenses.empty()) c.defenses.push_back({});
        if (j.contains("attacks")) {
            for (const auto& a : j.at("attacks")) {
                AttackEntry e;
                const std::string kind = a.value("kind", "None");
                e.name = a.value("name", kind);
                if (kind != "None") e.config = attack_from_json(a);
                if (a.contains("replicate")) {
                    const auto m = a.at("replicate").get<std::string>();
                    if (m != "F" && m != "W") throw ConfigError("attack: replicate must be \"F\" or \"W\"");
                    e.replicate = m == "F" ? ReplicateMode::F : ReplicateMode::W;
                }
                c.attacks.push_back(std::move(e));
            }
        }
        if (c.attacks.empty()) c.attacks.push_back({});
        if (j.contains("adaptive")) {
            read_if(j.at("adaptive"), "enabled", c.adaptive);
            read_if(j.at("adaptive"), "eot_r", c.eot_r);
        }
        if (c.eot_r == 0) throw ConfigError("config: adaptive.eot_r must be at least 1");
        if (j.contains("seeds")) read_if(j.at("seeds"), "global", c.seed);
        if (j.contains("output")) {
            const auto& o = j.at("output");
            if (o.contains("dir")) c.output_dir = o.at("dir").get<std::string>();
            read_if(o, "csv", c.csv_name);
            read_if(o, "json", c.json_name);
            read_if(o, "text", c.text_name);
            read_if(o, "save_adversarial", c.save_adversarial);
        }
        c.output_dir = resolve(c.output_dir, base_dir);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_experiment_config(j, path.parent_path());
}

// ---- metrics -------------------------------------------------------------------

double compute_r1(double a_b, double a_a) {
    if (a_b < 0.0 || a_b > 1.0 || a_a < 0.0 || a_a > 1.0) throw ParameterError("compute_r1: accuracies lie in [0, 1]");
    const double s = a_b + a_a;
    return s > 0.0 ? 2.0 * a_b * a_a / s : 0.0;
}

std::uint64_t cell_seed(std::uint64_t global, const std::string& defense, const std::string& attack,
                        std::size_t voice) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](unsigned char b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(global >> (8 * i)));
    for (char c : defense) mix(static_cast<unsigned char>(c));
    mix(0);
    for (char c : attack) mix(static_cast<unsigned char>(c));
    mix(0);
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(static_cast<std::uint64_t>(voice) >> (8 * i)));
    return h;
}

// ---- runner --------------------------------------------------------------------

namespace {

AttackResult run_attack(const SpeakerModel& model, const std::vector<TransformSpec>& chain, const AttackEntry& entry,
                        const AttackConfig& acfg, const Waveform& x, std::size_t y, bool adaptive, std::size_t eot_r,
                        bool* replicated) {
    *replicated = false;
    if (entry.replicate && feco_position(chain)) {
        *replicated = true;
        return replicate_attack(model, chain, x, y, acfg, *entry.replicate, eot_r).attack;
    }
    const bool randomized = chain_randomized(chain);
    const std::size_t r = randomized ? eot_r : 1;
    std::unique_ptr<WhiteBoxModel> wb;
    if (adaptive) wb = std::make_unique<DefendedModelView>(model, chain, r);
    else wb = std::make_unique<SpeakerWhiteBox>(model);

    const std::uint64_t bb_seed = derive_seed(acfg.seed, 0xb1ac);
    ScoreFn scores = adaptive ? adaptive_blackbox(model, chain, bb_seed)
                              : ScoreFn([&model](std::span<const double> v) {
                                    return forward_logits(model, Waveform(std::vector<double>(v.begin(), v.end())));
                                });
    switch (acfg.kind) {
        case AttackKind::FGSM: return fgsm(*wb, x, y, acfg);
        case AttackKind::PGD: return pgd(*wb, x, y, acfg);
        case AttackKind::CWInf: return cw_inf(*wb, x, y, acfg);
        case AttackKind::CW2: return cw_l2(*wb, x, y, acfg);
        case AttackKind::NES: return nes_attack(scores, x, y, acfg);
        case AttackKind::PSO: return pso_attack(scores, x, y, acfg);
        case AttackKind::SSA:
            return ssa_attack([&scores](std::span<const double> v) { return argmax(scores(v)); }, x, y, acfg);
    }
    throw ContractError("unknown attack kind");
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

std::string now_utc() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const SpeakerModel& model, const Corpus& corpus,
                                std::vector<CellDetail>* details) {
    std::vector<const LabeledVoice*> test;
    for (const auto& v : corpus.test) test.push_back(&v);
    if (cfg.max_test_voices > 0 && test.size() > cfg.max_test_voices) {
        // Round-robin over speakers keeps the subset balanced.
        std::vector<std::vector<const LabeledVoice*>> by(corpus.n_speakers);
        for (const auto* v : test) by.at(v->label).push_back(v);
        std::vector<const LabeledVoice*> pick;
        for (std::size_t round = 0; pick.size() < cfg.max_test_voices; ++round)
            for (auto& b : by)
                if (round < b.size() && pick.size() < cfg.max_test_voices) pick.push_back(b[round]);
        test = std::move(pick);
    }
    if (test.empty()) throw ConfigError("dataset: the test split is empty");

    ExperimentReport rep;
    rep.metadata.seed = cfg.seed;
    rep.metadata.adaptive = cfg.adaptive;
    rep.metadata.eot_r = cfg.eot_r;
    rep.metadata.test_voices = test.size();
    rep.metadata.configs = config_to_json(cfg).dump();
    rep.metadata.timestamp = now_utc();
    const double n = static_cast<double>(test.size());

    for (const auto& def : cfg.defenses) {
        std::size_t benign_ok = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const std::uint64_t s = cell_seed(cfg.seed, def.name, "benign", i);
            benign_ok += classify(model, test[i]->audio, def.chain, s) == test[i]->label ? 1 : 0;
        }
        const double a_b = static_cast<double>(benign_ok) / n;

        for (const auto& att : cfg.attacks) {
            ReportRow row;
            row.defense = def.name;
            row.attack = att.name;
            row.a_b = a_b;
            CellDetail cell{def.name, att.name, {}};
            if (att.config) {
                std::vector<double> snr, l2, queries, ce, margin;
                std::size_t adv_ok = 0;
                for (std::size_t i = 0; i < test.size(); ++i) {
                    const Waveform& x = test[i]->audio;
                    const std::size_t y = test[i]->label;
                    const std::uint64_t s = cell_seed(cfg.seed, def.name, att.name, i);
                    AttackConfig acfg = *att.config;
                    acfg.seed = derive_seed(s, att.config->seed);
                    bool replicated = false;
                    AttackResult r = run_attack(model, def.chain, att, acfg, x, y, cfg.adaptive, cfg.eot_r, &replicated);

                    std::vector<double> logits;
                    if (replicated) {
                        // The replicate result already holds the defended evaluation.
                        ce.push_back(r.final_loss_ce);
                        margin.push_back(r.final_loss_margin);
                        logits = {};
                    } else {
                        logits = forward_logits(model, r.adversarial, def.chain, derive_seed(s, 0xde7e));
                        ce.push_back(cross_entropy_value(logits, y));
                        margin.push_back(margin_value(logits, y));
                    }
                    const bool correct = replicated ? !r.success : argmax(logits) == y;
                    adv_ok += correct ? 1 : 0;
                    snr.push_back(r.distortion.snr_db);
                    l2.push_back(r.distortion.l2);
                    queries.push_back(static_cast<double>(r.queries));

                    ExampleOutcome ex;
                    ex.voice = i;
                    ex.label = y;
                    ex.correct_after = correct;
                    const bool same_len = r.adversarial.size() == x.size();
                    ex.linf = same_len ? r.distortion.linf : std::numeric_limits<double>::quiet_NaN();
                    if (acfg.budgeted() && same_len) {
                        ++rep.metadata.budgeted_runs;
                        const double excess = ex.linf - acfg.epsilon;
                        rep.metadata.max_budget_excess = rep.metadata.budgeted_runs == 1
                                                             ? excess
                                                             : std::max(rep.metadata.max_budget_excess, excess);
                        if (ex.linf > acfg.epsilon + kPcmSlack + 1e-12) ++rep.metadata.budget_violations;
                    }
                    if (cfg.save_adversarial) {
                        auto dir = cfg.output_dir / "adversarial";
                        std::filesystem::create_directories(dir);
                        auto p = dir / (sanitize(def.name) + "__" + sanitize(att.name) + "__" + std::to_string(i) +
                                        ".wav");
                        write_wav(r.adversarial, p);
                        ex.wav_path = p.string();
                    }
                    cell.examples.push_back(std::move(ex));
                }
                const double a_a = static_cast<double>(adv_ok) / n;
                row.a_a = a_a;
                row.r1 = compute_r1(a_b, a_a);
                row.mean_snr = mean_of(snr);
                row.mean_l2 = mean_of(l2);
                row.mean_queries = mean_of(queries);
                row.mean_loss_ce = mean_of(ce);
                row.mean_loss_margin = mean_of(margin);
            }
            rep.rows.push_back(std::move(row));
            if (details) details->push_back(std::move(cell));
        }
    }
    return rep;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::vector<CellDetail>* details) {
    if (cfg.checkpoint.empty()) throw ConfigError("config: missing key 'model.checkpoint'");
    if (cfg.manifest.empty()) throw ConfigError("config: missing key 'dataset.manifest'");
    if (!std::filesystem::exists(cfg.checkpoint))
        throw ConfigError("config key 'model.checkpoint': no such file " + cfg.checkpoint.string());
    if (!std::filesystem::exists(cfg.manifest))
        throw ConfigError("config key 'dataset.manifest': no such file " + cfg.manifest.string());
    SpeakerModel model = SpeakerModel::load(cfg.checkpoint);
    Corpus corpus = load_corpus(cfg.manifest);
    return run_experiment(cfg, model, corpus, details);
}

// ---- reports -------------------------------------------------------------------

std::string report_to_csv(const ExperimentReport& r) {
    std::ostringstream out;
    out << kCsvHeader << '\n';
    auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
    for (const auto& row : r.rows) {
        out << row.defense << ',' << row.attack << ',' << fmt(row.a_b) << ',' << opt(row.a_a) << ',' << opt(row.r1)
            << ',' << opt(row.mean_snr) << ',' << opt(row.mean_l2) << ',' << opt(row.mean_queries) << ','
            << opt(row.mean_loss_ce) << ',' << opt(row.mean_loss_margin) << '\n';
    }
    return out.str();
}

json report_to_json(const ExperimentReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"defense", row.defense},
                        {"attack", row.attack},
                        {"A_b", num_to_json(row.a_b)},
                        {"A_a", opt_to_json(row.a_a)},
                        {"R1", opt_to_json(row.r1)},
                        {"mean_snr", opt_to_json(row.mean_snr)},
                        {"mean_l2", opt_to_json(row.mean_l2)},
                        {"mean_queries", opt_to_json(row.mean_queries)},
                        {"mean_loss_ce", opt_to_json(row.mean_loss_ce)},
                        {"mean_loss_margin", opt_to_json(row.mean_loss_margin)}});
    }
    const auto& m = r.metadata;
    return {{"rows", rows},
            {"metadata",
             {{"seed", m.seed},
              {"adaptive", m.adaptive},
              {"eot_r", m.eot_r},
              {"test_voices", m.test_voices},
              {"configs", m.configs},
              {"timestamp", m.timestamp},
              {"budgeted_runs", m.budgeted_runs},
              {"budget_violations", m.budget_violations},
              {"max_budget_excess", num_to_json(m.max_budget_excess)},
              {"r1_note", m.r1_note}}}};
}

ExperimentReport report_from_json(const json& j) {
    ExperimentReport r;
    try {
        for (const auto& row : j.at("rows")) {
            ReportRow x;
            x.defense = row.at("defense").get<std::string>();
            x.attack = row.at("attack").get<std::string>();
            x.a_b = num_from_json(row.at("A_b"));
            x.a_a = opt_from_json(row, "A_a");
            x.r1 = opt_from_json(row, "R1");
            x.mean_snr = opt_from_json(row, "mean_snr");
            x.mean_l2 = opt_from_json(row, "mean_l2");
            x.mean_queries = opt_from_json(row, "mean_queries");
            x.mean_loss_ce = opt_from_json(row, "mean_loss_ce");
            x.mean_loss_margin = opt_from_json(row, "mean_loss_margin");
            r.rows.push_back(std::move(x));
        }
        const auto& m = j.at("metadata");
        r.metadata.seed = m.at("seed").get<std::uint64_t>();
        r.metadata.adaptive = m.at("adaptive").get<bool>();
        r.metadata.eot_r = m.at("eot_r").get<std::size_t>();
        r.metadata.test_voices = m.at("test_voices").get<std::size_t>();
        r.metadata.configs = m.at("configs").get<std::string>();
        r.metadata.timestamp = m.at("timestamp").get<std::string>();
        r.metadata.budgeted_runs = m.at("budgeted_runs").get<std::size_t>();
        r.metadata.budget_violations = m.at("budget_violations").get<std::size_t>();
        r.metadata.max_budget_excess = num_from_json(m.at("max_budget_excess"));
        r.metadata.r1_note = m.at("r1_note").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("report json: ") + e.what());
    }
    return r;
}

std::string report_to_text(const ExperimentReport& r) {
    const std::vector<std::string> head = {"defense", "attack", "A_b", "A_a", "R1", "SNR", "L2", "queries", "L_CE", "L_M"};
    std::vector<std::vector<std::string>> cells;
    auto pct = [](const std::optional<double>& v) {
        if (!v) return std::string("-");
        std::ostringstream o;
        o << std::fixed << std::setprecision(1) << 100.0 * *v << '%';
        return o.str();
    };
    auto num = [](const std::optional<double>& v, int prec) {
        if (!v) return std::string("-");
        if (std::isinf(*v)) return fmt(*v);
        std::ostringstream o;
        o << std::fixed << std::setprecision(prec) << *v;
        return o.str();
    };
    for (const auto& row : r.rows) {
        cells.push_back({row.defense, row.attack, pct(row.a_b), pct(row.a_a), pct(row.r1), num(row.mean_snr, 2),
                         num(row.mean_l2, 4), num(row.mean_queries, 0), num(row.mean_loss_ce, 3),
                         num(row.mean_loss_margin, 3)});
    }
    std::vector<std::size_t> width(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) {
        width[c] = head[c].size();
        for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& v) {
        for (std::size_t c = 0; c < v.size(); ++c) {
            if (c) out << "  ";
            if (c < 2) out << std::left << std::setw(static_cast<int>(width[c])) << v[c];
            else out << std::right << std::setw(static_cast<int>(width[c])) << v[c];
        }
        out << '\n';
    };
    line(head);
    std::size_t total = 0;
    for (auto w : width) total += w;
    out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& row : cells) line(row);
    out << "\nseed " << r.metadata.seed << ", " << r.metadata.test_voices << " test voices, "
        << (r.metadata.adaptive ? "adaptive" : "non-adaptive") << ", EOT R=" << r.metadata.eot_r << '\n';
    out << r.metadata.r1_note << '\n';
    return out.str();
}

void emit_report(const ExperimentReport& r, ReportFormat format, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report " + path.string());
    switch (format) {
        case ReportFormat::Csv: out << report_to_csv(r); break;
        case ReportFormat::Json: out << report_to_json(r).dump(2) << '\n'; break;
        case ReportFormat::Text: out << report_to_text(r); break;
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void emit_reports(const ExperimentReport& r, const ExperimentConfig& cfg) {
    if (!cfg.csv_name.empty()) emit_report(r, ReportFormat::Csv, cfg.output_dir / cfg.csv_name);
    if (!cfg.json_name.empty()) emit_report(r, ReportFormat::Json, cfg.output_dir / cfg.json_name);
    if (!cfg.text_name.empty()) emit_report(r, ReportFormat::Text, cfg.output_dir / cfg.text_name);
}

}  // namespace spkdef
