#include "spkdef/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "spkdef/error.hpp"
#include "spkdef/feco.hpp"

namespace spkdef {

namespace {

grad::Tensor uniform_tensor(grad::Shape shape, double bound, std::mt19937_64& rng) {
    grad::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.data) v = u(rng);
    return t;
}

constexpr const char* kParamNames[] = {"w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"};

}  // namespace

SpeakerModel::SpeakerModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.n_speakers < 1 || cfg.num_mels < 1 || cfg.kernel % 2 == 0) {
        throw ParameterError("SpeakerModel: need n_speakers >= 1, num_mels >= 1 and an odd kernel");
    }
    std::mt19937_64 rng(seed);
    auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
    params_.emplace_back("w1", uniform_tensor({cfg.conv1, cfg.num_mels, cfg.kernel}, he(cfg.num_mels * cfg.kernel), rng));
    params_.emplace_back("b1", grad::Tensor({cfg.conv1}));
    params_.emplace_back("w2", uniform_tensor({cfg.conv2, cfg.conv1, cfg.kernel}, he(cfg.conv1 * cfg.kernel), rng));
    params_.emplace_back("b2", grad::Tensor({cfg.conv2}));
    params_.emplace_back("w3", uniform_tensor({cfg.embedding, cfg.conv2}, he(cfg.conv2), rng));
    params_.emplace_back("b3", grad::Tensor({cfg.embedding}));
    params_.emplace_back("w4", uniform_tensor({cfg.n_speakers, cfg.embedding},
                                              std::sqrt(6.0 / static_cast<double>(cfg.embedding + cfg.n_speakers)), rng));
    params_.emplace_back("b4", grad::Tensor({cfg.n_speakers}));
}

const grad::Tensor& SpeakerModel::param(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw ContractError("SpeakerModel: no parameter '" + name + "'");
}

void SpeakerModel::set_input_normalization(std::vector<double> mean, std::vector<double> stddev) {
    if (mean.size() != cfg_.num_mels || stddev.size() != cfg_.num_mels) {
        throw ShapeError("set_input_normalization: expected " + std::to_string(cfg_.num_mels) + " bands");
    }
    for (double s : stddev)
        if (!(s > 0.0)) throw ParameterError("set_input_normalization: standard deviations must be positive");
    mean_ = std::move(mean);
    std_ = std::move(stddev);
}

void SpeakerModel::save(const std::filesystem::path& path) const {
    grad::NamedTensors all = params_;
    all.emplace_back("config", grad::Tensor({6}, {static_cast<double>(cfg_.num_mels), static_cast<double>(cfg_.conv1),
                                                  static_cast<double>(cfg_.conv2), static_cast<double>(cfg_.kernel),
                                                  static_cast<double>(cfg_.embedding),
                                                  static_cast<double>(cfg_.n_speakers)}));
    if (!mean_.empty()) {
        all.emplace_back("input_mean", grad::Tensor::vector(mean_));
        all.emplace_back("input_std", grad::Tensor::vector(std_));
    }
    grad::save_tensors(path, all);
}

SpeakerModel SpeakerModel::load(const std::filesystem::path& path) {
    auto all = grad::load_tensors(path);
    auto find = [&](const std::string& name) -> const grad::Tensor* {
        for (const auto& [n, t] : all)
            if (n == name) return &t;
        return nullptr;
    };
    const grad::Tensor* c = find("config");
    if (!c || c->numel() != 6) throw FormatError("checkpoint " + path.string() + ": missing model config");
    SpeakerModel m;
    auto sz = [&](std::size_t i) { return static_cast<std::size_t>(c->data[i]); };
    m.cfg_ = ModelConfig{sz(0), sz(1), sz(2), sz(3), sz(4), sz(5)};
    SpeakerModel ref(m.cfg_, 0);
    for (const auto& [name, t] : ref.params_) {
        const grad::Tensor* p = find(name);
        if (!p) throw FormatError("checkpoint " + path.string() + ": missing tensor '" + name + "'");
        if (p->shape != t.shape) throw FormatError("checkpoint " + path.string() + ": wrong shape for '" + name + "'");
        m.params_.emplace_back(name, *p);
    }
    const grad::Tensor* mu = find("input_mean");
    const grad::Tensor* sd = find("input_std");
    if (mu && sd) m.set_input_normalization(mu->data, sd->data);
    return m;
}

BoundModel bind(const SpeakerModel& m, grad::Graph& g, bool trainable) {
    BoundModel bm;
    bm.model = &m;
    for (const auto& [name, t] : m.params()) bm.params.push_back(g.leaf(t, trainable));
    return bm;
}

NetworkOutput network_forward(const BoundModel& bm, grad::Var logmel) {
    const SpeakerModel& m = *bm.model;
    const auto& cfg = m.config();
    if (logmel.shape().size() != 2 || logmel.shape()[1] != cfg.num_mels) {
        throw ShapeError("network_forward: expected [N x " + std::to_string(cfg.num_mels) + "] features, got " +
                         grad::shape_str(logmel.shape()));
    }
    grad::Graph& g = *logmel.graph;
    if (logmel.shape()[0] == 1) logmel = grad::gather_rows(logmel, {0, 0});
    const std::size_t n = logmel.shape()[0];
    grad::Var h = logmel;
    if (!m.input_mean().empty()) {
        grad::Tensor shift({n, cfg.num_mels}), gain({n, cfg.num_mels});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < cfg.num_mels; ++c) {
                shift.at(r, c) = -m.input_mean()[c];
                gain.at(r, c) = 1.0 / m.input_std()[c];
            }
        h = grad::mul(grad::add(h, g.constant(std::move(shift))), g.constant(std::move(gain)));
    }
    const auto& p = bm.params;
    const std::size_t pad = cfg.kernel / 2;
    grad::Var a1 = grad::relu(grad::conv1d(grad::transpose(h), p[0], p[1], 1, pad));
    grad::Var pooled1 = grad::max_pool1d(a1, 2, 2);
    grad::Var a2 = grad::relu(grad::conv1d(pooled1, p[2], p[3], 1, pad));
    grad::Var pooled = grad::mean_axis(a2, 1);
    NetworkOutput out;
    out.embedding = grad::add_bias(grad::matmul(p[4], pooled), p[5]);
    out.logits = grad::add_bias(grad::matmul(p[6], grad::relu(out.embedding)), p[7]);
    return out;
}

NetworkOutput pipeline_forward(const BoundModel& bm, grad::Var waveform, const std::vector<TransformSpec>& chain,
                               std::uint64_t seed, const std::vector<GradPolicy>& policies, const FeatureConfig& fcfg) {
    if (!policies.empty() && policies.size() != chain.size()) {
        throw ContractError("pipeline: policy list does not match the transformation chain");
    }
    grad::Var x = waveform;
    std::optional<std::size_t> feco;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        if (is_feature_level(chain[i])) {
            if (feco) throw ContractError("pipeline: at most one FeCo per chain");
            feco = i;
            continue;
        }
        GradPolicy pol = policies.empty() ? natural_policy(chain[i]) : policies[i];
        x = waveform_transform_layer(x, chain[i], derive_seed(seed, i + 1), pol);
    }
    grad::Graph& g = *waveform.graph;
    if (!feco) return network_forward(bm, build_features(g, x, FeatureStage::Original, fcfg).original);

    const TransformSpec& t = chain[*feco];
    t.validate();
    auto stage = static_cast<FeatureStage>(static_cast<int>(t.param("stage")));
    auto method = static_cast<ClusterMethod>(static_cast<int>(t.param("cl_m")));
    FeatureGraph fg = build_features(g, x, stage, fcfg);
    FeatureMatrix at_stage = FeatureMatrix::from_tensor(fg.stage.value(), stage, fcfg);
    FecoPlan plan = feco_plan(at_stage, t.param("cl_r"), method, derive_seed(seed, *feco + 1));
    for (auto& group : plan.groups)
        for (auto& r : group) r = fg.kept[r];
    if (!policies.empty() && policies[*feco] == GradPolicy::BpdaIdentity) {
        throw ContractError("FeCo changes the frame count; use the FrozenAssignment policy");
    }
    grad::Var compressed = feco_average(fg.original, plan.groups);
    return network_forward(bm, compressed);
}

std::vector<double> forward_logits(const SpeakerModel& m, const Waveform& w, const std::vector<TransformSpec>& chain,
                                   std::uint64_t seed) {
    require_rate(w);
    grad::Graph g;
    BoundModel bm = bind(m, g, false);
    grad::Var x = g.constant(grad::Tensor::vector(w.samples()));
    return pipeline_forward(bm, x, chain, seed).logits.value().data;
}

std::vector<double> forward_logits_features(const SpeakerModel& m, const FeatureMatrix& logmel) {
    grad::Graph g;
    BoundModel bm = bind(m, g, false);
    return network_forward(bm, g.constant(logmel.to_tensor())).logits.value().data;
}

std::vector<double> embedding(const SpeakerModel& m, const Waveform& w, const std::vector<TransformSpec>& chain,
                              std::uint64_t seed) {
    require_rate(w);
    grad::Graph g;
    BoundModel bm = bind(m, g, false);
    grad::Var x = g.constant(grad::Tensor::vector(w.samples()));
    return pipeline_forward(bm, x, chain, seed).embedding.value().data;
}

// ---- losses --------------------------------------------------------------------

namespace {

void check_label(std::size_t classes, std::size_t label) {
    if (label >= classes) {
        throw ContractError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                            " classes");
    }
}

std::size_t best_other(std::span<const double> logits, std::size_t label) {
    std::size_t j = label == 0 ? 1 : 0;
    for (std::size_t i = 0; i < logits.size(); ++i)
        if (i != label && logits[i] > logits[j]) j = i;
    return j;
}

}  // namespace

grad::Var cross_entropy_loss(grad::Var logits, std::size_t label) {
    check_label(logits.numel(), label);
    return grad::softmax_cross_entropy(logits, label);
}

grad::Var margin_loss(grad::Var logits, std::size_t label) {
    check_label(logits.numel(), label);
    if (logits.numel() < 2) throw ContractError("margin_loss: needs at least two classes");
    std::size_t j = best_other(logits.value().data, label);
    return grad::sub(grad::gather(logits, {label}), grad::gather(logits, {j}));
}

std::vector<double> softmax(std::span<const double> logits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
    for (double& v : p) v /= s;
    return p;
}

double cross_entropy_value(std::span<const double> logits, std::size_t label) {
    check_label(logits.size(), label);
    double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    return mx + std::log(s) - logits[label];
}

double margin_value(std::span<const double> logits, std::size_t label) {
    check_label(logits.size(), label);
    if (logits.size() < 2) throw ContractError("margin_value: needs at least two classes");
    return logits[label] - logits[best_other(logits, label)];
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

LossGrad waveform_loss_grad(const SpeakerModel& m, std::span<const double> x, std::size_t label, LossKind kind,
                            const std::vector<TransformSpec>& chain, std::uint64_t seed, std::size_t eot_r,
                            const std::vector<GradPolicy>& policies, int sample_rate) {
    if (sample_rate != kSampleRate) throw ParameterError("waveform_loss_grad: unsupported sample rate");
    const std::size_t draws = chain_randomized(chain) ? std::max<std::size_t>(1, eot_r) : 1;
    LossGrad out;
    out.grad.assign(x.size(), 0.0);
    for (std::size_t r = 0; r < draws; ++r) {
        grad::Graph g;
        BoundModel bm = bind(m, g, false);
        grad::Var xv = g.leaf(grad::Tensor({x.size()}, std::vector<double>(x.begin(), x.end())), true);
        NetworkOutput net = pipeline_forward(bm, xv, chain, r == 0 ? seed : derive_seed(seed, r), policies);
        grad::Var loss = kind == LossKind::CrossEntropy ? cross_entropy_loss(net.logits, label)
                                                        : margin_loss(net.logits, label);
        g.backward(loss);
        auto gr = g.grad(xv);
        for (std::size_t i = 0; i < gr.size(); ++i) out.grad[i] += gr[i];
        out.loss += loss.value().item();
        if (r == 0) out.logits = net.logits.value().data;
    }
    if (draws > 1) {
        const double inv = 1.0 / static_cast<double>(draws);
        out.loss *= inv;
        for (double& v : out.grad) v *= inv;
    }
    return out;
}

// ---- training ------------------------------------------------------------------

namespace {

struct Adam {
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v;

    Adam(const grad::NamedTensors& params, double lr_) : lr(lr_) {
        for (const auto& [n, p] : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }

    void step(grad::NamedTensors& params, const std::vector<std::vector<double>>& grads) {
        ++t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].second.data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = grads[i][j];
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
            }
        }
    }
};

void validate_training(const SpeakerModel& m, const std::vector<LabeledVoice>& data, const TrainConfig& cfg) {
    if (data.empty()) throw ParameterError("train: empty dataset");
    if (cfg.batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
    for (const auto& v : data) check_label(m.n_speakers(), v.label);
}

void fit_normalization(SpeakerModel& m, const std::vector<grad::Tensor>& feats) {
    const std::size_t d = m.config().num_mels;
    std::vector<double> mean(d, 0.0), sq(d, 0.0);
    double count = 0.0;
    for (const auto& f : feats) {
        for (std::size_t r = 0; r < f.shape[0]; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                mean[c] += f.at(r, c);
                sq[c] += f.at(r, c) * f.at(r, c);
            }
        count += static_cast<double>(f.shape[0]);
    }
    std::vector<double> sd(d);
    for (std::size_t c = 0; c < d; ++c) {
        mean[c] /= count;
        sd[c] = std::max(1e-3, std::sqrt(std::max(0.0, sq[c] / count - mean[c] * mean[c])));
    }
    m.set_input_normalization(std::move(mean), std::move(sd));
}

// Shared minibatch loop; `example` builds the loss graph for one voice and
// returns (loss, correct).
template <typename Example>
TrainReport run_epochs(SpeakerModel& m, std::size_t n, const TrainConfig& cfg, Example example) {
    Adam opt(m.params(), cfg.learning_rate);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    TrainReport rep;
    std::vector<std::vector<double>> grads;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            grads.clear();
            for (const auto& [name, p] : m.params()) grads.emplace_back(p.numel(), 0.0);
            for (std::size_t b = start; b < end; ++b) {
                grad::Graph g;
                BoundModel bm = bind(m, g, true);
                auto [loss, logits] = example(g, bm, order[b], epoch);
                g.backward(loss);
                for (std::size_t i = 0; i < bm.params.size(); ++i) {
                    auto gi = g.grad(bm.params[i]);
                    for (std::size_t j = 0; j < gi.size(); ++j) grads[i][j] += gi[j];
                }
                loss_sum += loss.value().item();
                correct += argmax(logits.value().data) == example.label(order[b]) ? 1 : 0;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& gv : grads)
                for (double& v : gv) v *= inv;
            opt.step(m.params(), grads);
        }
        rep.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        rep.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
        if (cfg.on_epoch) cfg.on_epoch(epoch, rep.epoch_loss.back(), rep.epoch_accuracy.back());
    }
    return rep;
}

struct StandardExample {
    const std::vector<LabeledVoice>& data;
    const std::vector<grad::Tensor>& feats;
    std::size_t label(std::size_t i) const { return data[i].label; }
    std::pair<grad::Var, grad::Var> operator()(grad::Graph& g, const BoundModel& bm, std::size_t i, std::size_t) const {
        NetworkOutput out = network_forward(bm, g.constant(feats[i]));
        return {cross_entropy_loss(out.logits, data[i].label), out.logits};
    }
};

struct AdversarialExample {
    const SpeakerModel& model;
    const std::vector<LabeledVoice>& data;
    const AdversarialConfig& adv;
    std::uint64_t seed;
    std::size_t label(std::size_t i) const { return data[i].label; }
    std::pair<grad::Var, grad::Var> operator()(grad::Graph& g, const BoundModel& bm, std::size_t i,
                                               std::size_t epoch) const {
        const std::uint64_t s = derive_seed(derive_seed(seed, epoch + 1), i + 1);
        auto xadv = pgd_inner(model, data[i].audio.samples(), data[i].label, adv, s);
        grad::Var x = g.constant(grad::Tensor::vector(std::move(xadv)));
        NetworkOutput out = pipeline_forward(bm, x, adv.chain, derive_seed(s, 0xadu));
        return {cross_entropy_loss(out.logits, data[i].label), out.logits};
    }
};

std::vector<grad::Tensor> logmel_features(const std::vector<LabeledVoice>& data) {
    std::vector<grad::Tensor> feats;
    feats.reserve(data.size());
    for (const auto& v : data) feats.push_back(extract_features(v.audio, FeatureStage::Original).to_tensor());
    return feats;
}

}  // namespace

TrainReport train(SpeakerModel& m, const std::vector<LabeledVoice>& data, const TrainConfig& cfg) {
    if (cfg.adversarial) return adv_train(m, data, cfg);
    validate_training(m, data, cfg);
    auto feats = logmel_features(data);
    if (m.input_mean().empty()) fit_normalization(m, feats);
    return run_epochs(m, data.size(), cfg, StandardExample{data, feats});
}

TrainReport adv_train(SpeakerModel& m, const std::vector<LabeledVoice>& data, const TrainConfig& cfg) {
    if (!cfg.adversarial) throw ParameterError("adv_train: adversarial settings missing");
    validate_training(m, data, cfg);
    const AdversarialConfig& adv = *cfg.adversarial;
    if (!(adv.epsilon > 0.0)) throw ParameterError("adv_train: epsilon must be positive");
    if (m.input_mean().empty()) fit_normalization(m, logmel_features(data));
    return run_epochs(m, data.size(), cfg, AdversarialExample{m, data, adv, cfg.seed});
}

std::vector<double> pgd_inner(const SpeakerModel& m, std::span<const double> x, std::size_t label,
                              const AdversarialConfig& adv, std::uint64_t seed,
                              const std::function<void(std::span<const double>)>& on_iterate) {
    const double eps = adv.epsilon;
    const double alpha = adv.alpha > 0.0 ? adv.alpha : eps / 5.0;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-eps, eps);
    std::vector<double> xi(x.size());
    auto project = [&](std::size_t i, double v) {
        return std::clamp(std::clamp(v, x[i] - eps, x[i] + eps), -1.0, 1.0);
    };
    for (std::size_t i = 0; i < x.size(); ++i) xi[i] = project(i, x[i] + u(rng));
    if (on_iterate) on_iterate(xi);
    for (std::size_t s = 0; s < adv.steps; ++s) {
        LossGrad lg = waveform_loss_grad(m, xi, label, LossKind::CrossEntropy, adv.chain, derive_seed(seed, s + 1),
                                         adv.eot_r);
        for (std::size_t i = 0; i < xi.size(); ++i) {
            double gsign = lg.grad[i] > 0.0 ? 1.0 : (lg.grad[i] < 0.0 ? -1.0 : 0.0);
            xi[i] = project(i, xi[i] + alpha * gsign);
        }
        if (on_iterate) on_iterate(xi);
    }
    return xi;
}

// ---- evaluation ----------------------------------------------------------------

std::size_t classify(const SpeakerModel& m, const Waveform& w, const std::vector<TransformSpec>& chain,
                     std::uint64_t seed) {
    return argmax(forward_logits(m, w, chain, seed));
}

double accuracy(const SpeakerModel& m, const std::vector<LabeledVoice>& data, const std::vector<TransformSpec>& chain,
                std::uint64_t seed) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        correct += classify(m, data[i].audio, chain, derive_seed(seed, i)) == data[i].label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw ScoringError("cosine similarity of a zero-norm embedding");
    return ab / std::sqrt(aa * bb);
}

Enrollment enroll(const SpeakerModel& m, const std::vector<std::vector<Waveform>>& voices_per_speaker) {
    Enrollment e;
    for (std::size_t s = 0; s < voices_per_speaker.size(); ++s) {
        const auto& voices = voices_per_speaker[s];
        if (voices.empty()) throw ParameterError("enroll: speaker " + std::to_string(s) + " has no voices");
        std::vector<double> mean(m.config().embedding, 0.0);
        for (const auto& v : voices) {
            auto emb = embedding(m, v);
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += emb[i];
        }
        for (double& v : mean) v /= static_cast<double>(voices.size());
        e.embeddings.push_back(std::move(mean));
    }
    return e;
}

std::size_t csi_classify_embedding(const Enrollment& e, std::span<const double> emb) {
    if (e.embeddings.empty()) throw ScoringError("csi_classify: no enrolled speakers");
    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t s = 0; s < e.embeddings.size(); ++s) {
        double c = cosine_similarity(emb, e.embeddings[s]);
        if (c > best_score) {
            best_score = c;
            best = s;
        }
    }
    return best;
}

std::size_t csi_classify(const SpeakerModel& m, const Enrollment& e, const Waveform& w,
                         const std::vector<TransformSpec>& chain, std::uint64_t seed) {
    return csi_classify_embedding(e, embedding(m, w, chain, seed));
}

}  // namespace spkdef
