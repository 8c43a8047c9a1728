#include "spkdef/feco.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "spkdef/error.hpp"
#include "spkdef/fft.hpp"

namespace spkdef {

const char* to_string(ClusterMethod m) { return m == ClusterMethod::KMeans ? "kmeans" : "warped-kmeans"; }

std::vector<std::vector<std::size_t>> Clustering::members() const {
    std::vector<std::vector<std::size_t>> out(k);
    for (std::size_t i = 0; i < assignments.size(); ++i) out[assignments[i]].push_back(i);
    return out;
}

namespace {

double sqdist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double e = a[i] - b[i];
        s += e * e;
    }
    return s;
}

void check_k(const FeatureMatrix& m, std::size_t k, const char* who) {
    if (m.rows == 0 || m.cols == 0) throw ShapeError(std::string(who) + ": empty feature matrix");
    if (k < 1 || k > m.rows) {
        throw ParameterError(std::string(who) + ": need 1 <= K <= N, got K=" + std::to_string(k) +
                             ", N=" + std::to_string(m.rows));
    }
}

std::vector<double> compute_centers(const FeatureMatrix& m, const std::vector<std::size_t>& a, std::size_t k) {
    const std::size_t d = m.cols;
    std::vector<double> c(k * d, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        ++count[a[i]];
        for (std::size_t j = 0; j < d; ++j) c[a[i] * d + j] += m.data[i * d + j];
    }
    for (std::size_t q = 0; q < k; ++q)
        if (count[q] > 0)
            for (std::size_t j = 0; j < d; ++j) c[q * d + j] /= static_cast<double>(count[q]);
    return c;
}

double sse_of(const FeatureMatrix& m, const std::vector<std::size_t>& a, const std::vector<double>& c) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += sqdist(m.data.data() + i * m.cols, c.data() + a[i] * m.cols, m.cols);
    return s;
}

Clustering finish(const FeatureMatrix& m, std::size_t k, std::vector<std::size_t> a, std::vector<double> history) {
    Clustering c;
    c.k = k;
    c.dim = m.cols;
    c.assignments = std::move(a);
    c.centers = compute_centers(m, c.assignments, k);
    c.sse = sse_of(m, c.assignments, c.centers);
    c.sse_history = std::move(history);
    return c;
}

std::vector<std::size_t> kmeanspp_seed(const FeatureMatrix& m, std::size_t k, std::mt19937_64& rng) {
    const std::size_t n = m.rows, d = m.cols;
    std::vector<std::size_t> chosen;
    std::vector<bool> taken(n, false);
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    chosen.push_back(first);
    taken[first] = true;
    while (chosen.size() < k) {
        const double* c = m.data.data() + chosen.back() * d;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], sqdist(m.data.data() + i * d, c, d));
            total += dist[i];
        }
        std::size_t pick = n;
        if (total > 0.0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (std::size_t i = 0; i < n; ++i) {
                if (dist[i] <= 0.0) continue;
                pick = i;
                r -= dist[i];
                if (r < 0.0) break;
            }
        } else {
            // Every point coincides with a chosen center: pick any unchosen index.
            std::size_t remaining = n - chosen.size();
            std::size_t r = std::uniform_int_distribution<std::size_t>(0, remaining - 1)(rng);
            for (std::size_t i = 0; i < n; ++i) {
                if (taken[i]) continue;
                if (r-- == 0) {
                    pick = i;
                    break;
                }
            }
        }
        taken[pick] = true;
        chosen.push_back(pick);
    }
    return chosen;
}

// Reassigns the member of the largest cluster farthest from its center to
// every empty cluster.
void repair_empty(const FeatureMatrix& m, std::vector<std::size_t>& a, std::vector<double>& centers, std::size_t k) {
    const std::size_t d = m.cols;
    for (;;) {
        std::vector<std::size_t> count(k, 0);
        for (std::size_t q : a) ++count[q];
        auto empty = std::find(count.begin(), count.end(), 0u);
        if (empty == count.end()) return;
        std::size_t e = static_cast<std::size_t>(empty - count.begin());
        std::size_t largest = static_cast<std::size_t>(std::max_element(count.begin(), count.end()) - count.begin());
        std::size_t far = m.rows;
        double best = -1.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            if (a[i] != largest) continue;
            double dd = sqdist(m.data.data() + i * d, centers.data() + largest * d, d);
            if (dd > best) {
                best = dd;
                far = i;
            }
        }
        a[far] = e;
        centers = compute_centers(m, a, k);
    }
}

Clustering kmeans_once(const FeatureMatrix& m, std::size_t k, std::mt19937_64& rng, const ClusterOptions& opt) {
    const std::size_t n = m.rows, d = m.cols;
    auto seeds = kmeanspp_seed(m, k, rng);
    std::vector<double> centers(k * d);
    for (std::size_t q = 0; q < k; ++q)
        std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(seeds[q] * d), d,
                    centers.begin() + static_cast<std::ptrdiff_t>(q * d));
    std::vector<std::size_t> a(n, k), prev;
    std::vector<double> history;
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        prev = a;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t q = 0; q < k; ++q) {
                double dd = sqdist(m.data.data() + i * d, centers.data() + q * d, d);
                if (dd < best) {
                    best = dd;
                    a[i] = q;
                }
            }
        }
        centers = compute_centers(m, a, k);
        repair_empty(m, a, centers, k);
        history.push_back(sse_of(m, a, centers));
        if (a == prev) break;
    }
    if (opt.refine) {
        std::vector<std::size_t> count(k, 0);
        for (std::size_t q : a) ++count[q];
        bool moved = true;
        for (std::size_t pass = 0; moved && pass < opt.max_iters; ++pass) {
            moved = false;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t from = a[i];
                if (count[from] < 2) continue;
                const double* x = m.data.data() + i * d;
                // Copies of x in the same cluster can also move together; a
                // single-point move cannot separate duplicated frames.
                std::vector<std::size_t> twins;
                for (std::size_t j = 0; j < n; ++j)
                    if (a[j] == from && std::equal(x, x + d, m.data.data() + j * d)) twins.push_back(j);
                const double nf = static_cast<double>(count[from]);
                const double dist_from = sqdist(x, centers.data() + from * d, d);
                double best = 0.0;
                std::size_t to = k, group = 1;
                for (std::size_t w : {std::size_t{1}, twins.size()}) {
                    if (w >= count[from]) continue;
                    const double wd = static_cast<double>(w);
                    const double loss = wd * nf / (nf - wd) * dist_from;
                    for (std::size_t q = 0; q < k; ++q) {
                        if (q == from) continue;
                        const double nq = static_cast<double>(count[q]);
                        const double delta = wd * nq / (nq + wd) * sqdist(x, centers.data() + q * d, d) - loss;
                        if (delta < best - 1e-12) {
                            best = delta;
                            to = q;
                            group = w;
                        }
                    }
                }
                if (to == k) continue;
                std::size_t moved_here = 0;
                for (std::size_t j : twins) {
                    if (moved_here == group) break;
                    if (group == 1 && j != i) continue;
                    a[j] = to;
                    ++moved_here;
                }
                count[from] -= group;
                count[to] += group;
                centers = compute_centers(m, a, k);
                moved = true;
            }
            if (moved) {
                centers = compute_centers(m, a, k);
                history.push_back(sse_of(m, a, centers));
            }
        }
    }
    return finish(m, k, std::move(a), std::move(history));
}

// Contiguous segments described by their end boundaries; segment j is
// [b[j], b[j+1]).
struct Segments {
    const FeatureMatrix& m;
    std::vector<std::size_t> b;
    std::vector<double> prefix;     // (N + 1) x d running row sums
    std::vector<double> prefix_sq;  // running squared norms

    Segments(const FeatureMatrix& mat, std::vector<std::size_t> bounds) : m(mat), b(std::move(bounds)) {
        const std::size_t n = m.rows, d = m.cols;
        prefix.assign((n + 1) * d, 0.0);
        prefix_sq.assign(n + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double v = m.data[i * d + j];
                prefix[(i + 1) * d + j] = prefix[i * d + j] + v;
                sq += v * v;
            }
            prefix_sq[i + 1] = prefix_sq[i] + sq;
        }
    }

    double cost(std::size_t lo, std::size_t hi) const {
        if (hi - lo <= 1) return 0.0;
        const std::size_t d = m.cols;
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = prefix[hi * d + j] - prefix[lo * d + j];
            ss += v * v;
        }
        return std::max(0.0, prefix_sq[hi] - prefix_sq[lo] - ss / static_cast<double>(hi - lo));
    }
};

double segment_sse(const Segments& s, std::size_t k) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += s.cost(s.b[j], s.b[j + 1]);
    return total;
}

// Removes one boundary (merging its two segments) and splits another segment
// at its best cut, when that strictly lowers the SSE. Escapes the local
// optima of pure boundary moves. Applies at most one move.
bool relocate_boundary(Segments& seg, std::size_t k) {
    std::vector<double> split_gain(k, 0.0);
    std::vector<std::size_t> split_at(k, 0);
    for (std::size_t q = 0; q < k; ++q) {
        const std::size_t lo = seg.b[q], hi = seg.b[q + 1];
        const double whole = seg.cost(lo, hi);
        for (std::size_t cut = lo + 1; cut < hi; ++cut) {
            double g = whole - seg.cost(lo, cut) - seg.cost(cut, hi);
            if (g > split_gain[q]) {
                split_gain[q] = g;
                split_at[q] = cut;
            }
        }
    }
    double best = 1e-12;
    std::size_t best_j = 0, best_q = 0;
    for (std::size_t j = 1; j < k; ++j) {
        const double merge = seg.cost(seg.b[j - 1], seg.b[j + 1]) - seg.cost(seg.b[j - 1], seg.b[j]) -
                             seg.cost(seg.b[j], seg.b[j + 1]);
        for (std::size_t q = 0; q < k; ++q) {
            if (q == j - 1 || q == j || split_at[q] == 0) continue;
            if (split_gain[q] - merge > best) {
                best = split_gain[q] - merge;
                best_j = j;
                best_q = q;
            }
        }
    }
    if (best_j == 0) return false;
    std::vector<std::size_t> cuts;
    for (std::size_t j = 1; j < k; ++j)
        if (j != best_j) cuts.push_back(seg.b[j]);
    cuts.push_back(split_at[best_q]);
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t j = 1; j < k; ++j) seg.b[j] = cuts[j - 1];
    return true;
}

// Minimum-SSE segmentation into k contiguous segments by dynamic
// programming over prefix-sum segment costs, O(k N^2).
std::vector<std::size_t> optimal_cuts(const Segments& seg, std::size_t k) {
    const std::size_t n = seg.m.rows;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> cost((k + 1) * (n + 1), inf);
    std::vector<std::size_t> from((k + 1) * (n + 1), 0);
    auto at = [&](std::size_t j, std::size_t i) { return j * (n + 1) + i; };
    cost[at(0, 0)] = 0.0;
    for (std::size_t j = 1; j <= k; ++j)
        for (std::size_t i = j; i <= n - (k - j); ++i)
            for (std::size_t p = j - 1; p < i; ++p) {
                if (cost[at(j - 1, p)] == inf) continue;
                const double c = cost[at(j - 1, p)] + seg.cost(p, i);
                if (c < cost[at(j, i)] - 1e-12) {
                    cost[at(j, i)] = c;
                    from[at(j, i)] = p;
                }
            }
    std::vector<std::size_t> b(k + 1);
    b[k] = n;
    for (std::size_t j = k; j > 0; --j) b[j - 1] = from[at(j, b[j])];
    return b;
}

Clustering warped_once(const FeatureMatrix& m, std::size_t k, std::mt19937_64& rng, const ClusterOptions& opt) {
    const std::size_t n = m.rows;
    Segments seg{m, std::vector<std::size_t>(k + 1)};
    seg.b[0] = 0;
    seg.b[k] = n;
    std::uniform_int_distribution<int> jitter(-1, 1);
    for (std::size_t j = 1; j < k; ++j) {
        auto base = static_cast<long>(std::llround(static_cast<double>(j) * static_cast<double>(n) / static_cast<double>(k)));
        long v = base + jitter(rng);
        long lo = static_cast<long>(seg.b[j - 1]) + 1;
        long hi = static_cast<long>(n - (k - j));
        seg.b[j] = static_cast<std::size_t>(std::clamp(v, lo, hi));
    }
    std::vector<double> history{segment_sse(seg, k)};
    for (std::size_t sweep = 0; sweep < opt.max_iters; ++sweep) {
        bool moved = false;
        for (std::size_t j = 1; j < k; ++j) {
            const std::size_t lo = seg.b[j - 1], hi = seg.b[j + 1];
            auto pair_cost = [&](std::size_t cut) { return seg.cost(lo, cut) + seg.cost(cut, hi); };
            double cur = pair_cost(seg.b[j]);
            if (opt.refine) {
                // Best cut between the neighbouring boundaries.
                std::size_t best_cut = seg.b[j];
                double best = cur;
                for (std::size_t cut = lo + 1; cut < hi; ++cut) {
                    double c = pair_cost(cut);
                    if (c < best - 1e-12) {
                        best = c;
                        best_cut = cut;
                    }
                }
                if (best_cut != seg.b[j]) {
                    seg.b[j] = best_cut;
                    moved = true;
                }
            } else {
                for (;;) {
                    std::size_t cut = seg.b[j];
                    if (cut - lo > 1 && pair_cost(cut - 1) < cur - 1e-12) {
                        seg.b[j] = cut - 1;
                    } else if (hi - cut > 1 && pair_cost(cut + 1) < cur - 1e-12) {
                        seg.b[j] = cut + 1;
                    } else {
                        break;
                    }
                    cur = pair_cost(seg.b[j]);
                    moved = true;
                }
            }
        }
        if (!moved && opt.refine && k > 2) moved = relocate_boundary(seg, k);
        history.push_back(segment_sse(seg, k));
        if (!moved) break;
    }
    std::vector<std::size_t> a(n);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = seg.b[j]; i < seg.b[j + 1]; ++i) a[i] = j;
    return finish(m, k, std::move(a), std::move(history));
}

template <typename Once>
Clustering best_of(const FeatureMatrix& m, std::size_t k, std::uint64_t seed, const ClusterOptions& opt, Once once) {
    std::mt19937_64 rng(seed);
    Clustering best;
    bool have = false;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
        Clustering c = once(m, k, rng, opt);
        if (!have || c.sse < best.sse - 1e-12) {
            best = std::move(c);
            have = true;
        }
    }
    return best;
}

}  // namespace

Clustering kmeans_cluster(const FeatureMatrix& m, std::size_t k, std::uint64_t seed, const ClusterOptions& opt) {
    check_k(m, k, "kmeans");
    return best_of(m, k, seed, opt, kmeans_once);
}

Clustering warped_kmeans_cluster(const FeatureMatrix& m, std::size_t k, std::uint64_t seed,
                                 const ClusterOptions& opt) {
    check_k(m, k, "warped-kmeans");
    Clustering best = best_of(m, k, seed, opt, warped_once);
    if (!opt.refine) return best;
    // Final polish: the exact segmentation, taken only when strictly better.
    Segments seg{m, optimal_cuts(Segments{m, {}}, k)};
    if (segment_sse(seg, k) < best.sse - 1e-12) {
        std::vector<std::size_t> a(m.rows);
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t i = seg.b[j]; i < seg.b[j + 1]; ++i) a[i] = j;
        auto history = best.sse_history;
        history.push_back(segment_sse(seg, k));
        return finish(m, k, std::move(a), std::move(history));
    }
    return best;
}

Clustering cluster(const FeatureMatrix& m, std::size_t k, ClusterMethod method, std::uint64_t seed,
                   const ClusterOptions& opt) {
    return method == ClusterMethod::KMeans ? kmeans_cluster(m, k, seed, opt) : warped_kmeans_cluster(m, k, seed, opt);
}

double clustering_sse(const FeatureMatrix& m, const std::vector<std::size_t>& assignments, std::size_t k) {
    return sse_of(m, assignments, compute_centers(m, assignments, k));
}

std::size_t compressed_rows(std::size_t n, double cl_r) {
    if (!(cl_r > 0.0 && cl_r < 1.0)) throw ParameterError("FeCo: cl_r must lie in (0, 1)");
    // The tolerance keeps exact products such as 10 * 0.2 from rounding up.
    auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * cl_r - 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

FecoPlan feco_plan(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                   const ClusterOptions& opt) {
    FecoPlan plan;
    plan.clustering = cluster(m, compressed_rows(m.rows, cl_r), method, seed, opt);
    plan.groups = plan.clustering.members();
    // Members are listed in ascending frame order, so sorting by the first
    // member gives first-appearance order (and time order for segments).
    std::sort(plan.groups.begin(), plan.groups.end(),
              [](const auto& x, const auto& y) { return x.front() < y.front(); });
    return plan;
}

FeatureMatrix apply_feco_plan(const FeatureMatrix& m, const FecoPlan& plan) {
    GroupAverageOperator op(plan.groups, m.rows, m.cols);
    FeatureMatrix out = m;
    out.rows = plan.groups.size();
    out.data = op(m.data);
    return out;
}

FeatureMatrix feco_compress(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                            const ClusterOptions& opt) {
    return apply_feco_plan(m, feco_plan(m, cl_r, method, seed, opt));
}

GroupAverageOperator::GroupAverageOperator(std::vector<std::vector<std::size_t>> groups, std::size_t rows,
                                           std::size_t cols)
    : groups_(std::move(groups)), rows_(rows), cols_(cols) {
    for (const auto& g : groups_) {
        if (g.empty()) throw ContractError("FeCo: empty frame group");
        for (std::size_t r : g)
            if (r >= rows_) throw ShapeError("FeCo: group member out of range");
    }
}

void GroupAverageOperator::apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t q = 0; q < groups_.size(); ++q) {
        double* yq = y.data() + q * cols_;
        std::fill(yq, yq + cols_, 0.0);
        for (std::size_t r : groups_[q])
            for (std::size_t c = 0; c < cols_; ++c) yq[c] += x[r * cols_ + c];
        double inv = 1.0 / static_cast<double>(groups_[q].size());
        for (std::size_t c = 0; c < cols_; ++c) yq[c] *= inv;
    }
}

void GroupAverageOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t q = 0; q < groups_.size(); ++q) {
        double inv = 1.0 / static_cast<double>(groups_[q].size());
        for (std::size_t r : groups_[q])
            for (std::size_t c = 0; c < cols_; ++c) g_in[r * cols_ + c] += inv * g_out[q * cols_ + c];
    }
}

grad::Var feco_average(grad::Var features, const std::vector<std::vector<std::size_t>>& groups) {
    if (features.shape().size() != 2) throw ShapeError("feco_average: expected [N x d] features");
    const std::size_t n = features.shape()[0], d = features.shape()[1];
    auto op = std::make_shared<GroupAverageOperator>(groups, n, d);
    return grad::linear_map(op, features, {groups.size(), d});
}

// ---- replication ---------------------------------------------------------------

Replication replicate(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                      const ClusterOptions& opt) {
    if (!(cl_r > 0.0 && cl_r < 1.0)) throw ParameterError("replicate: cl_r must lie in (0, 1)");
    if (m.rows == 0) throw ShapeError("replicate: empty feature matrix");
    const std::size_t n = m.rows, d = m.cols;
    Replication rep;
    rep.copies = static_cast<std::size_t>(std::floor(1.0 / cl_r + 1e-9));
    rep.block_sizes.assign(n, rep.copies);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t total = n * rep.copies + i;
        if (compressed_rows(total, cl_r) == n) break;
        ++rep.block_sizes[i];
    }

    FeatureMatrix m1 = m;
    m1.data.clear();
    std::vector<std::size_t> block_of;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < rep.block_sizes[i]; ++c) {
            m1.data.insert(m1.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                           m.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            block_of.push_back(i);
        }
    m1.rows = block_of.size();

    // Cluster labels renumbered in compressed-output order.
    FecoPlan plan = feco_plan(m1, cl_r, method, seed, opt);
    std::vector<std::size_t> label(m1.rows);
    for (std::size_t q = 0; q < plan.groups.size(); ++q)
        for (std::size_t r : plan.groups[q]) label[r] = q;

    std::vector<std::size_t> majority(n);
    for (std::size_t i = 0, row = 0; i < n; ++i) {
        std::vector<std::size_t> votes(plan.groups.size(), 0);
        for (std::size_t c = 0; c < rep.block_sizes[i]; ++c) ++votes[label[row++]];
        majority[i] = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
    rep.block_order.resize(n);
    for (std::size_t i = 0; i < n; ++i) rep.block_order[i] = i;
    std::stable_sort(rep.block_order.begin(), rep.block_order.end(),
                     [&](std::size_t x, std::size_t y) { return majority[x] < majority[y]; });

    rep.matrix = m;
    rep.matrix.data.clear();
    for (std::size_t i : rep.block_order)
        for (std::size_t c = 0; c < rep.block_sizes[i]; ++c)
            rep.matrix.data.insert(rep.matrix.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                   m.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    rep.matrix.rows = m1.rows;
    return rep;
}

FeatureMatrix replicate_features(const FeatureMatrix& m, double cl_r, ClusterMethod method, std::uint64_t seed,
                                 const ClusterOptions& opt) {
    return replicate(m, cl_r, method, seed, opt).matrix;
}

// ---- Griffin-Lim ---------------------------------------------------------------

namespace {

using Spectrogram = std::vector<std::vector<fft::Complex>>;

Spectrogram stft(const std::vector<double>& y, std::size_t frames, const FeatureConfig& cfg,
                 const std::vector<double>& window) {
    Spectrogram s(frames);
    std::vector<double> buf(cfg.frame_len);
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t t = 0; t < cfg.frame_len; ++t) buf[t] = window[t] * y[f * cfg.hop_len + t];
        s[f] = fft::rfft(buf, cfg.fft_size);
    }
    return s;
}

// Least-squares inverse: the signal whose windowed frames are closest to the
// frame-wise inverse DFTs.
std::vector<double> istft(const Spectrogram& s, std::size_t length, const FeatureConfig& cfg,
                          const std::vector<double>& window) {
    std::vector<double> num(length, 0.0), den(length, 0.0);
    for (std::size_t f = 0; f < s.size(); ++f) {
        auto v = fft::irfft(s[f], cfg.fft_size);
        for (std::size_t t = 0; t < cfg.frame_len; ++t) {
            num[f * cfg.hop_len + t] += window[t] * v[t];
            den[f * cfg.hop_len + t] += window[t] * window[t];
        }
    }
    for (std::size_t t = 0; t < length; ++t) num[t] = den[t] > 0.0 ? num[t] / den[t] : 0.0;
    return num;
}

// Spectral distance with the two-sided weighting (interior bins count twice),
// which is the norm the projections are orthogonal in.
double spectral_convergence(const Spectrogram& x, const std::vector<std::vector<double>>& mag) {
    double num = 0.0, den = 0.0;
    for (std::size_t f = 0; f < mag.size(); ++f) {
        const std::size_t bins = mag[f].size();
        for (std::size_t k = 0; k < bins; ++k) {
            double w = (k == 0 || k + 1 == bins) ? 1.0 : 2.0;
            double e = std::abs(x[f][k]) - mag[f][k];
            num += w * e * e;
            den += w * mag[f][k] * mag[f][k];
        }
    }
    return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

}  // namespace

GriffinLimResult griffin_lim(const FeatureMatrix& logmel, std::size_t iterations, std::uint64_t seed,
                             const FeatureConfig& cfg) {
    if (logmel.stage != FeatureStage::Original) throw ContractError("griffin_lim: expects Original-stage log-mel");
    if (logmel.cols != cfg.num_mels) throw ShapeError("griffin_lim: feature width does not match num_mels");
    if (logmel.rows == 0) throw ShapeError("griffin_lim: empty feature matrix");
    const std::size_t n = logmel.rows, bins = cfg.fft_size / 2 + 1;
    const std::size_t length = (n - 1) * cfg.hop_len + cfg.frame_len;

    grad::Tensor mel = mel_filterbank_matrix(cfg.num_mels, cfg.fft_size, logmel.sample_rate);
    Eigen::MatrixXd melm(cfg.num_mels, bins);
    for (std::size_t j = 0; j < cfg.num_mels; ++j)
        for (std::size_t k = 0; k < bins; ++k) melm(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = mel.at(j, k);
    Eigen::MatrixXd pinv = melm.completeOrthogonalDecomposition().pseudoInverse();

    std::vector<std::vector<double>> mag(n, std::vector<double>(bins));
    Eigen::VectorXd melpow(static_cast<Eigen::Index>(cfg.num_mels));
    for (std::size_t f = 0; f < n; ++f) {
        for (std::size_t j = 0; j < cfg.num_mels; ++j)
            melpow(static_cast<Eigen::Index>(j)) = std::max(0.0, std::exp(logmel.at(f, j)) - cfg.log_floor);
        Eigen::VectorXd p = pinv * melpow;
        for (std::size_t k = 0; k < bins; ++k) mag[f][k] = std::sqrt(std::max(0.0, p(static_cast<Eigen::Index>(k))));
    }

    const auto window = hamming_window(cfg.frame_len);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    Spectrogram spec(n, std::vector<fft::Complex>(bins));
    for (std::size_t f = 0; f < n; ++f)
        for (std::size_t k = 0; k < bins; ++k) spec[f][k] = std::polar(mag[f][k], phase(rng));

    GriffinLimResult res{Waveform(std::vector<double>(length, 0.0), logmel.sample_rate), {}};
    std::vector<double> y = istft(spec, length, cfg, window);
    res.spectral_convergence.push_back(spectral_convergence(stft(y, n, cfg, window), mag));
    for (std::size_t it = 0; it < iterations; ++it) {
        Spectrogram cur = stft(y, n, cfg, window);
        for (std::size_t f = 0; f < n; ++f)
            for (std::size_t k = 0; k < bins; ++k) {
                double a = std::abs(cur[f][k]);
                spec[f][k] = a > 0.0 ? cur[f][k] * (mag[f][k] / a) : fft::Complex(mag[f][k], 0.0);
            }
        y = istft(spec, length, cfg, window);
        res.spectral_convergence.push_back(spectral_convergence(stft(y, n, cfg, window), mag));
    }

    // Undo the pre-emphasis the front end applies.
    std::vector<double> x(length);
    for (std::size_t t = 0; t < length; ++t) x[t] = y[t] + (t > 0 ? cfg.preemphasis * x[t - 1] : 0.0);
    res.audio = Waveform(std::move(x), logmel.sample_rate);
    return res;
}

Waveform griffin_lim_reconstruct(const FeatureMatrix& logmel, std::size_t iterations, std::uint64_t seed,
                                 const FeatureConfig& cfg) {
    return griffin_lim(logmel, iterations, seed, cfg).audio;
}

}  // namespace spkdef
