#pragma once

// 1-D CNN speaker classifier over 32-band log-mel frames:
//   conv1d(32->48, k5) relu maxpool2 conv1d(48->64, k5) relu
//   temporal mean-pool, dense 64 (embedding), relu, dense n_speakers.
// Convolutions use "same" padding so short (e.g. compressed) inputs still fit.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/dsp.hpp"
#include "spkdef/features.hpp"
#include "spkdef/grad.hpp"
#include "spkdef/transforms.hpp"

namespace spkdef {

struct ModelConfig {
    std::size_t num_mels = 32;
    std::size_t conv1 = 48;
    std::size_t conv2 = 64;
    std::size_t kernel = 5;
    std::size_t embedding = 64;
    std::size_t n_speakers = 10;

    bool operator==(const ModelConfig&) const = default;
};

class SpeakerModel {
public:
    SpeakerModel() = default;
    SpeakerModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::size_t n_speakers() const { return cfg_.n_speakers; }

    // Trainable tensors in a fixed order: w1 b1 w2 b2 w3 b3 w4 b4.
    grad::NamedTensors& params() { return params_; }
    const grad::NamedTensors& params() const { return params_; }
    const grad::Tensor& param(const std::string& name) const;

    // Fixed per-band input standardization, estimated from training data.
    void set_input_normalization(std::vector<double> mean, std::vector<double> stddev);
    const std::vector<double>& input_mean() const { return mean_; }
    const std::vector<double>& input_std() const { return std_; }

    void save(const std::filesystem::path& path) const;
    static SpeakerModel load(const std::filesystem::path& path);

    bool operator==(const SpeakerModel&) const = default;

private:
    ModelConfig cfg_;
    grad::NamedTensors params_;
    std::vector<double> mean_, std_;
};

// Model parameters placed on a graph.
struct BoundModel {
    const SpeakerModel* model = nullptr;
    std::vector<grad::Var> params;  // same order as SpeakerModel::params()
};

BoundModel bind(const SpeakerModel& m, grad::Graph& g, bool trainable);

struct NetworkOutput {
    grad::Var logits;     // [n_speakers]
    grad::Var embedding;  // [embedding]
};

// logmel: [N x num_mels].
NetworkOutput network_forward(const BoundModel& bm, grad::Var logmel);

// Waveform -> transforms -> features (FeCo at its stage) -> network.
// `policies` defaults to natural_policy() of each transform. FeCo clusters
// the frames at its stage and averages the corresponding log-mel rows that
// the network reads.
NetworkOutput pipeline_forward(const BoundModel& bm, grad::Var waveform, const std::vector<TransformSpec>& chain,
                               std::uint64_t seed, const std::vector<GradPolicy>& policies = {},
                               const FeatureConfig& fcfg = {});

std::vector<double> forward_logits(const SpeakerModel& m, const Waveform& w,
                                   const std::vector<TransformSpec>& chain = {}, std::uint64_t seed = 0);
std::vector<double> forward_logits_features(const SpeakerModel& m, const FeatureMatrix& logmel);
std::vector<double> embedding(const SpeakerModel& m, const Waveform& w, const std::vector<TransformSpec>& chain = {},
                              std::uint64_t seed = 0);

grad::Var cross_entropy_loss(grad::Var logits, std::size_t label);
// logits[label] - max_{j != label} logits[j]; <= 0 iff misclassified or tied.
grad::Var margin_loss(grad::Var logits, std::size_t label);
double cross_entropy_value(std::span<const double> logits, std::size_t label);
double margin_value(std::span<const double> logits, std::size_t label);
std::vector<double> softmax(std::span<const double> logits);
std::size_t argmax(std::span<const double> v);

enum class LossKind { CrossEntropy, Margin };

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;    // d loss / d waveform
    std::vector<double> logits;  // of the first draw
};

// Loss and waveform gradient through the defended pipeline. Randomized chains
// average eot_r draws (sub-seeds derive_seed(seed, r)), summed in draw order;
// deterministic chains are evaluated once.
LossGrad waveform_loss_grad(const SpeakerModel& m, std::span<const double> x, std::size_t label, LossKind kind,
                            const std::vector<TransformSpec>& chain, std::uint64_t seed, std::size_t eot_r = 1,
                            const std::vector<GradPolicy>& policies = {}, int sample_rate = kSampleRate);

struct LabeledVoice {
    Waveform audio;
    std::size_t label = 0;
};

struct AdversarialConfig {
    std::size_t steps = 10;
    double epsilon = 0.002;
    double alpha = 0.0;  // 0 selects epsilon / 5
    std::size_t eot_r = 10;
    std::vector<TransformSpec> chain;  // transformation layers trained through
};

struct TrainConfig {
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::optional<AdversarialConfig> adversarial;
    std::function<void(std::size_t epoch, double loss, double accuracy)> on_epoch;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
};

// Adam on mean cross-entropy. A model without input normalization gets it
// estimated from the training set first.
TrainReport train(SpeakerModel& m, const std::vector<LabeledVoice>& data, const TrainConfig& cfg);

// Like train(), but each example is replaced by its PGD counterpart against
// the current parameters before the step. Starts from m's parameters.
TrainReport adv_train(SpeakerModel& m, const std::vector<LabeledVoice>& data, const TrainConfig& cfg);

// One inner-maximization run: random start in the ball, `steps` signed
// ascent steps on cross-entropy, projection after each step. `on_iterate`
// sees every iterate.
std::vector<double> pgd_inner(const SpeakerModel& m, std::span<const double> x, std::size_t label,
                              const AdversarialConfig& adv, std::uint64_t seed,
                              const std::function<void(std::span<const double>)>& on_iterate = {});

std::size_t classify(const SpeakerModel& m, const Waveform& w, const std::vector<TransformSpec>& chain = {},
                     std::uint64_t seed = 0);
double accuracy(const SpeakerModel& m, const std::vector<LabeledVoice>& data,
                const std::vector<TransformSpec>& chain = {}, std::uint64_t seed = 0);

struct Enrollment {
    std::vector<std::vector<double>> embeddings;  // one per speaker
};

Enrollment enroll(const SpeakerModel& m, const std::vector<std::vector<Waveform>>& voices_per_speaker);
double cosine_similarity(std::span<const double> a, std::span<const double> b);
std::size_t csi_classify_embedding(const Enrollment& e, std::span<const double> emb);
std::size_t csi_classify(const SpeakerModel& m, const Enrollment& e, const Waveform& w,
                         const std::vector<TransformSpec>& chain = {}, std::uint64_t seed = 0);

}  // namespace spkdef
