#include <doctest.h>

#include <fstream>
#include <sstream>

#include "fixture.hpp"
#include "helpers.hpp"
#include "spkdef/error.hpp"
#include "spkdef/harness.hpp"

using namespace spkdef;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<double> mean_logmel(const Waveform& w) {
    FeatureMatrix f = extract_features(w, FeatureStage::Original);
    std::vector<double> m(f.cols, 0.0);
    for (std::size_t r = 0; r < f.rows; ++r)
        for (std::size_t c = 0; c < f.cols; ++c) m[c] += f.at(r, c) / static_cast<double>(f.rows);
    return m;
}

ExperimentConfig small_config(const std::filesystem::path& out) {
    nlohmann::json j = {
        {"model", {{"checkpoint", "unused.ckpt"}}},
        {"dataset", {{"manifest", "unused.json"}, {"max_test_voices", 4}}},
        {"defenses",
         {{{"name", "None"}, {"chain", nlohmann::json::array()}},
          {{"name", "MS"}, {"chain", {{{"kind", "MS"}, {"params", {{"k", 5}}}}}}},
          {{"name", "AT"}, {"chain", {{{"kind", "AT"}}}}}}},
        {"attacks",
         {{{"name", "None"}, {"kind", "None"}},
          {{"name", "FGSM"}, {"kind", "FGSM"}, {"epsilon", 0.004}},
          {{"name", "PGD-5"}, {"kind", "PGD"}, {"epsilon", 0.004}, {"steps", 5}}}},
        {"seeds", {{"global", 3}}},
        {"output", {{"dir", out.string()}, {"save_adversarial", true}}}};
    return parse_experiment_config(j);
}

}  // namespace

TEST_CASE("R1 is the harmonic mean") {
    CHECK(compute_r1(0.9, 0.9) == doctest::Approx(0.9));
    CHECK(compute_r1(1.0, 0.0) == 0.0);
    CHECK(compute_r1(0.0, 0.0) == 0.0);
    CHECK(compute_r1(0.998, 0.0433) == doctest::Approx(0.0830).epsilon(5e-4));
    CHECK_THROWS_AS(compute_r1(1.2, 0.5), ParameterError);
    CHECK_THROWS_AS(compute_r1(0.5, -0.1), ParameterError);
}

TEST_CASE("synthetic dataset generation") {
    auto dir = testutil::temp_dir("gen");
    DatasetManifest m = gen_synthetic_dataset(10, 20, 1.0, 5, dir);
    REQUIRE(m.voices.size() == 200);
    REQUIRE(m.speakers.size() == 10);
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "wav")) files += e.path().extension() == ".wav";
    CHECK(files == 200);
    std::vector<std::vector<std::vector<double>>> means(10);
    for (const auto& v : m.voices) {
        Waveform w = read_wav(dir / v.wav_path);
        CHECK(w.size() == 16000);
        CHECK(w.sample_rate() == 16000);
        if (means[v.speaker_id].size() < 4) means[v.speaker_id].push_back(mean_logmel(w));
    }
    double within = 0.0, between = 0.0;
    std::size_t nw = 0, nb = 0;
    for (std::size_t a = 0; a < 10; ++a)
        for (std::size_t b = a; b < 10; ++b)
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t k = 0; k < 4; ++k) {
                    if (a == b && k <= i) continue;
                    const double c = cosine_similarity(means[a][i], means[b][k]);
                    if (a == b) within += c, ++nw;
                    else between += c, ++nb;
                }
    CHECK(within / nw > between / nb);
    CHECK(load_manifest(dir / "manifest.json") == m);

    auto d1 = testutil::temp_dir("gen1"), d2 = testutil::temp_dir("gen2");
    gen_synthetic_dataset(2, 3, 0.25, 9, d1);
    gen_synthetic_dataset(2, 3, 0.25, 9, d2);
    for (const auto& e : std::filesystem::directory_iterator(d1 / "wav"))
        CHECK(slurp(e.path()) == slurp(d2 / "wav" / e.path().filename()));
    CHECK_THROWS_AS(gen_synthetic_dataset(1, 3, 0.25, 9, d1), ParameterError);
}

TEST_CASE("config parsing") {
    nlohmann::json ok = {{"model", {{"checkpoint", "m.ckpt"}}}, {"dataset", {{"manifest", "d/manifest.json"}}}};
    ExperimentConfig c = parse_experiment_config(ok, "/base");
    CHECK(c.checkpoint == std::filesystem::path("/base/m.ckpt"));
    CHECK(c.manifest == std::filesystem::path("/base/d/manifest.json"));
    CHECK(c.eot_r == 50);

    nlohmann::json no_model = {{"dataset", {{"manifest", "x"}}}};
    try {
        parse_experiment_config(no_model);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("model.checkpoint") != std::string::npos);
    }
    nlohmann::json no_data = {{"model", {{"checkpoint", "x"}}}};
    try {
        parse_experiment_config(no_data);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("dataset.manifest") != std::string::npos);
    }
    nlohmann::json bad = ok;
    bad["attacks"] = {{{"kind", "NES"}, {"nes_m", 3}}};
    CHECK_THROWS_AS(parse_experiment_config(bad), ConfigError);
    bad["attacks"] = {{{"kind", "Nope"}}};
    CHECK_THROWS_AS(parse_experiment_config(bad), ConfigError);

    ExperimentConfig missing = parse_experiment_config(ok, testutil::temp_dir("missing"));
    CHECK_THROWS_AS(run_experiment(missing), ConfigError);

    TransformSpec feco = TransformSpec::defaults(TransformKind::FeCo);
    feco.params["cl_m"] = 1;
    feco.params["stage"] = 2;
    CHECK(transform_from_json(transform_to_json(feco)) == feco);
    AttackConfig a;
    a.kind = AttackKind::CW2;
    a.kappa = 2.0;
    AttackConfig back = attack_from_json(attack_to_json(a));
    CHECK(back.kind == a.kind);
    CHECK(back.kappa == a.kappa);
}

TEST_CASE("report serialization") {
    ExperimentReport r;
    r.rows.push_back({"None", "None", 0.95, std::nullopt, std::nullopt, {}, {}, {}, {}, {}});
    ReportRow full{"MS", "PGD", 0.9, 0.25, compute_r1(0.9, 0.25), std::numeric_limits<double>::infinity(), 0.1, 10.0,
                   2.5, -0.3};
    r.rows.push_back(full);
    r.metadata.seed = 4;
    r.metadata.timestamp = "2026-01-01T00:00:00Z";
    const std::string csv = report_to_csv(r);
    CHECK(csv.substr(0, csv.find('\n')) == kCsvHeader);
    CHECK(csv.find("None,None,0.95,,,") != std::string::npos);
    CHECK(csv.find(",inf,") != std::string::npos);
    CHECK(csv.find("2026") == std::string::npos);
    CHECK(report_from_json(report_to_json(r)) == r);
    CHECK(report_to_json(r)["rows"][1]["mean_snr"] == "inf");
    std::string text = report_to_text(r);
    CHECK(text.find("MS") != std::string::npos);

    auto dir = testutil::temp_dir("emit");
    emit_report(r, ReportFormat::Json, dir / "r.json");
    std::ifstream in(dir / "r.json");
    CHECK(report_from_json(nlohmann::json::parse(in)) == r);
    emit_report(r, ReportFormat::Csv, dir / "r.csv");
    CHECK(slurp(dir / "r.csv") == csv);
}

TEST_CASE("evaluation matrix") {
    const auto& d = fixture::small_desk();
    auto out = testutil::temp_dir("matrix");
    ExperimentConfig cfg = small_config(out);
    std::vector<CellDetail> details;
    ExperimentReport rep = run_experiment(cfg, d.model, d.corpus, &details);
    REQUIRE(rep.rows.size() == cfg.defenses.size() * cfg.attacks.size());
    CHECK(rep.metadata.test_voices == 4);
    CHECK(rep.metadata.budget_violations == 0);
    CHECK(rep.metadata.budgeted_runs == 4 * 3 * 2);
    for (const auto& row : rep.rows) {
        CHECK(row.a_b >= 0.0);
        CHECK(row.a_b <= 1.0);
        if (row.attack == "None") {
            CHECK_FALSE(row.a_a.has_value());
            continue;
        }
        REQUIRE(row.a_a.has_value());
        CHECK(std::abs(*row.r1 - compute_r1(row.a_b, *row.a_a)) <= 1e-9);
    }
    // Every saved adversarial voice re-evaluates to its recorded outcome.
    std::size_t checked = 0;
    for (const auto& cell : details) {
        if (cell.defense == "AT") continue;  // randomized; evaluation seed is internal
        const auto chain = cell.defense == "MS" ? cfg.defenses[1].chain : cfg.defenses[0].chain;
        for (const auto& ex : cell.examples) {
            if (ex.wav_path.empty()) continue;
            Waveform w = read_wav(ex.wav_path);
            CHECK((classify(d.model, w, chain) == ex.label) == ex.correct_after);
            ++checked;
        }
    }
    CHECK(checked == 2 * 2 * 4);

    ExperimentReport again = run_experiment(cfg, d.model, d.corpus);
    CHECK(report_to_csv(again) == report_to_csv(rep));
    ExperimentConfig other = cfg;
    other.seed = 4;
    other.save_adversarial = false;
    CHECK(report_to_csv(run_experiment(other, d.model, d.corpus)) != report_to_csv(rep));

    emit_reports(rep, cfg);
    CHECK(std::filesystem::exists(out / "report.csv"));
    CHECK(std::filesystem::exists(out / "report.json"));
    CHECK(std::filesystem::exists(out / "report.txt"));
}

TEST_CASE("adaptive PGD is at least as strong against median smoothing") {
    const auto& d = fixture::small_desk();
    nlohmann::json j = {{"model", {{"checkpoint", "x"}}},
                        {"dataset", {{"manifest", "x"}, {"max_test_voices", 8}}},
                        {"defenses", {{{"name", "MS"}, {"chain", {{{"kind", "MS"}}}}}}},
                        {"attacks", {{{"name", "PGD-10"}, {"kind", "PGD"}, {"epsilon", 0.004}, {"steps", 10}}}}};
    ExperimentConfig na = parse_experiment_config(j);
    j["adaptive"] = {{"enabled", true}, {"eot_r", 1}};
    ExperimentConfig ad = parse_experiment_config(j);
    const double a_na = *run_experiment(na, d.model, d.corpus).rows[0].a_a;
    const double a_ad = *run_experiment(ad, d.model, d.corpus).rows[0].a_a;
    MESSAGE("MS PGD-10 A_a non-adaptive " << a_na << " adaptive " << a_ad);
    CHECK(a_ad <= a_na);
}

TEST_CASE("cell seeds separate cells") {
    CHECK(cell_seed(0, "MS", "PGD", 1) == cell_seed(0, "MS", "PGD", 1));
    CHECK(cell_seed(0, "MS", "PGD", 1) != cell_seed(0, "MS", "PGD", 2));
    CHECK(cell_seed(0, "MS", "PGD", 1) != cell_seed(1, "MS", "PGD", 1));
    CHECK(cell_seed(0, "MSP", "GD", 1) != cell_seed(0, "MS", "PGD", 1));
}
