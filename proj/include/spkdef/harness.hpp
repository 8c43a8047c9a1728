#pragma once

// Experiment runner: the defense x attack evaluation matrix over a synthetic
// corpus, its metrics, and report emission.
//
// Config (JSON):
//   {
//     "model":    {"checkpoint": "model.ckpt"},
//     "dataset":  {"manifest": "data/manifest.json", "max_test_voices": 0},
//     "defenses": [{"name": "MS", "chain": [{"kind": "MS", "params": {"k": 7}}]}, ...],
//     "attacks":  [{"name": "PGD-10", "kind": "PGD", "epsilon": 0.02, "steps": 10}, ...],
//     "adaptive": {"enabled": false, "eot_r": 50},
//     "seeds":    {"global": 0},
//     "output":   {"dir": "results", "csv": "report.csv", "json": "report.json", "text": "report.txt",
//                  "save_adversarial": false}
//   }
// An empty defense chain is the undefended model; an attack whose kind is
// "None" only measures benign accuracy. Attacks may carry "replicate": "F"
// or "W" to run the Replicate construction against FeCo defenses.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spkdef/adaptive.hpp"
#include "spkdef/attacks.hpp"
#include "spkdef/dataset.hpp"
#include "spkdef/dsp.hpp"
#include "spkdef/model.hpp"

#include <json.hpp>

namespace spkdef {

struct DefenseEntry {
    std::string name = "None";
    std::vector<TransformSpec> chain;
    bool operator==(const DefenseEntry&) const = default;
};

struct AttackEntry {
    std::string name = "None";
    std::optional<AttackConfig> config;  // empty: benign only
    std::optional<ReplicateMode> replicate;
};

struct ExperimentConfig {
    std::filesystem::path checkpoint;
    std::filesystem::path manifest;
    std::size_t max_test_voices = 0;  // 0: the whole test split
    std::vector<DefenseEntry> defenses;
    std::vector<AttackEntry> attacks;
    bool adaptive = false;
    std::size_t eot_r = 50;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "results";
    std::string csv_name = "report.csv";
    std::string json_name = "report.json";
    std::string text_name = "report.txt";
    bool save_adversarial = false;
};

nlohmann::json transform_to_json(const TransformSpec& t);
TransformSpec transform_from_json(const nlohmann::json& j);
nlohmann::json attack_to_json(const AttackConfig& a);
AttackConfig attack_from_json(const nlohmann::json& j);

// Relative paths in the config resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

double compute_r1(double a_b, double a_a);

struct ReportRow {
    std::string defense, attack;
    double a_b = 0.0;
    std::optional<double> a_a;  // empty for attack = None
    std::optional<double> r1;
    std::optional<double> mean_snr, mean_l2, mean_queries, mean_loss_ce, mean_loss_margin;
    bool operator==(const ReportRow&) const = default;
};

struct ReportMetadata {
    std::uint64_t seed = 0;
    bool adaptive = false;
    std::size_t eot_r = 0;
    std::size_t test_voices = 0;
    std::string configs;    // the parsed config, serialized
    std::string timestamp;  // JSON/text reports only
    std::size_t budgeted_runs = 0;
    std::size_t budget_violations = 0;
    double max_budget_excess = 0.0;  // max over budgeted runs of linf - epsilon
    std::string r1_note = "R1 averages over the configured attack list";
    bool operator==(const ReportMetadata&) const = default;
};

struct ExperimentReport {
    std::vector<ReportRow> rows;
    ReportMetadata metadata;
    bool operator==(const ExperimentReport&) const = default;
};

// Per-example outcome, exposed for the checks that need more than the
// aggregate row.
struct ExampleOutcome {
    std::size_t voice = 0;
    std::size_t label = 0;
    bool correct_after = false;
    double linf = 0.0;
    std::string wav_path;  // when adversarial examples are saved
};

struct CellDetail {
    std::string defense, attack;
    std::vector<ExampleOutcome> examples;
};

ExperimentReport run_experiment(const ExperimentConfig& cfg, const SpeakerModel& model, const Corpus& corpus,
                                std::vector<CellDetail>* details = nullptr);
// Loads the checkpoint and manifest named by the config; ConfigError names
// the missing key or file.
ExperimentReport run_experiment(const ExperimentConfig& cfg, std::vector<CellDetail>* details = nullptr);

// Seed of one (defense, attack, voice) cell.
std::uint64_t cell_seed(std::uint64_t global, const std::string& defense, const std::string& attack,
                        std::size_t voice);

enum class ReportFormat { Csv, Json, Text };

inline constexpr const char* kCsvHeader =
    "defense,attack,A_b,A_a,R1,mean_snr,mean_l2,mean_queries,mean_loss_ce,mean_loss_margin";

std::string report_to_csv(const ExperimentReport& r);
nlohmann::json report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);
std::string report_to_text(const ExperimentReport& r);
void emit_report(const ExperimentReport& r, ReportFormat format, const std::filesystem::path& path);
// Writes every configured format into cfg.output_dir.
void emit_reports(const ExperimentReport& r, const ExperimentConfig& cfg);

}  // namespace spkdef
