#pragma once

// Feature compression: cluster the N frames of a feature matrix into
// K = ceil(N * cl_r) groups and replace each group by its mean frame.

#include <cstdint>
#include <vector>

#include "spkdef/audio.hpp"
#include "spkdef/features.hpp"
#include "spkdef/grad.hpp"

namespace spkdef {

enum class ClusterMethod { KMeans = 0, Warped = 1 };

const char* to_string(ClusterMethod m);

struct Clustering {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<std::size_t> assignments;  // 0-based cluster per frame
    std::vector<double> centers;           // k x dim, row-major
    double sse = 0.0;
    std::vector<double> sse_history;       // after every Lloyd iteration / boundary sweep of the kept run

    std::vector<std::vector<std::size_t>> members() const;
};

struct ClusterOptions {
    std::size_t max_iters = 100;
    // Independent seeded runs; the lowest-SSE run is kept.
    std::size_t restarts = 16;
    // For kmeans, single-point moves after Lloyd converges (each move
    // strictly lowers SSE). For warped-kmeans, each boundary is also moved to
    // its best position between its neighbours.
    bool refine = true;
};

Clustering kmeans_cluster(const FeatureMatrix& m, std::size_t k, std::uint64_t seed, const ClusterOptions& opt = {});
Clustering warped_kmeans_cluster(const FeatureMatrix& m, std::size_t k, std::uint64_t seed,
                                 const ClusterOptions& opt = {});
Clustering cluster(const FeatureMatrix& m, std::size_t k, ClusterMethod method, std::uint64_t seed,
                   const ClusterOptions& opt = {});

double clustering_sse(const FeatureMatrix& m, const std::vector<std::size_t>& assignments, std::size_t k);

std::size_t compressed_rows(std::size_t n, double cl_r);

// Frame groups in the order their means appear in the compressed matrix:
// time order of segments for warped-kmeans, order of first member for kmeans.
struct FecoPlan {
    Clustering clustering;
    std::vector<std::vector<std::size_t>> groups;
};

FecoPlan feco_plan(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                   const ClusterOptions& opt = {});
FeatureMatrix apply_feco_plan(const FeatureMatrix& m, const FecoPlan& plan);
FeatureMatrix feco_compress(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                            const ClusterOptions& opt = {});

// Row-averaging map [N x d] -> [groups x d] with the groups held fixed.
class GroupAverageOperator final : public grad::LinearOperator {
public:
    GroupAverageOperator(std::vector<std::vector<std::size_t>> groups, std::size_t rows, std::size_t cols);
    std::size_t input_size() const override { return rows_ * cols_; }
    std::size_t output_size() const override { return groups_.size() * cols_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::vector<std::vector<std::size_t>> groups_;
    std::size_t rows_, cols_;
};

grad::Var feco_average(grad::Var features, const std::vector<std::vector<std::size_t>>& groups);

struct Replication {
    FeatureMatrix matrix;
    std::size_t copies = 0;                 // k = floor(1 / cl_r)
    std::vector<std::size_t> block_sizes;   // per source row, k or k + 1
    std::vector<std::size_t> block_order;   // source row index of each block in the output
};

Replication replicate(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                      const ClusterOptions& opt = {});
FeatureMatrix replicate_features(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                                 const ClusterOptions& opt = {});

struct GriffinLimResult {
    Waveform audio;
    std::vector<double> spectral_convergence;  // one entry per iteration, plus the initial value
};

GriffinLimResult griffin_lim(const FeatureMatrix& logmel, std::size_t iterations = 32, std::uint64_t seed = 0,
                             const FeatureConfig& cfg = {});
Waveform griffin_lim_reconstruct(const FeatureMatrix& logmel, std::size_t iterations = 32, std::uint64_t seed = 0,
                                 const FeatureConfig& cfg = {});

}  // namespace spkdef
