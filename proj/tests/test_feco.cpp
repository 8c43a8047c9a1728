#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "spkdef/dataset.hpp"
#include "spkdef/error.hpp"
#include "spkdef/feco.hpp"

using namespace spkdef;
using oracle::matrix;

namespace {

FeatureMatrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
    return matrix(n, d, testutil::random_vec(n * d, seed, 1.0));
}

void check_centers_are_means(const FeatureMatrix& m, const Clustering& c) {
    auto mem = c.members();
    for (std::size_t j = 0; j < c.k; ++j) {
        REQUIRE_FALSE(mem[j].empty());
        for (std::size_t col = 0; col < m.cols; ++col) {
            double mu = 0.0;
            for (auto i : mem[j]) mu += m.at(i, col);
            mu /= static_cast<double>(mem[j].size());
            CHECK(std::abs(c.centers[j * m.cols + col] - mu) <= 1e-9);
        }
    }
}

}  // namespace

TEST_CASE("kmeans examples") {
    auto m = matrix(4, 1, {0, 1, 10, 11});
    Clustering c = kmeans_cluster(m, 2, 1);
    CHECK(c.assignments[0] == c.assignments[1]);
    CHECK(c.assignments[2] == c.assignments[3]);
    CHECK(c.assignments[0] != c.assignments[2]);
    std::vector<double> centers = c.centers;
    std::sort(centers.begin(), centers.end());
    CHECK(centers == std::vector<double>{0.5, 10.5});
    CHECK(c.sse == doctest::Approx(1.0));

    auto r = random_matrix(9, 2, 3);
    Clustering one = kmeans_cluster(r, 1, 0);
    for (std::size_t col = 0; col < 2; ++col) {
        double mu = 0.0;
        for (std::size_t i = 0; i < 9; ++i) mu += r.at(i, col);
        CHECK(one.centers[col] == doctest::Approx(mu / 9));
    }
    Clustering all = kmeans_cluster(r, 9, 0);
    CHECK(all.sse == doctest::Approx(0.0));
    CHECK_THROWS_AS(kmeans_cluster(r, 10, 0), ParameterError);
    CHECK_THROWS_AS(kmeans_cluster(r, 0, 0), ParameterError);
}

TEST_CASE("warped-kmeans examples") {
    Clustering c = warped_kmeans_cluster(matrix(4, 1, {0, 0, 10, 10}), 2, 0);
    CHECK(c.assignments == std::vector<std::size_t>{0, 0, 1, 1});
    CHECK(c.sse == doctest::Approx(0.0));
    auto r = random_matrix(7, 2, 4);
    Clustering s = warped_kmeans_cluster(r, 7, 0);
    for (std::size_t i = 0; i < 7; ++i) CHECK(s.assignments[i] == i);
    auto alt = matrix(4, 1, {0, 10, 0, 10});
    // The three contiguous splits cost 200/3, 100 and 200/3.
    double best = oracle::brute_force(alt, 2, true).sse;
    CHECK(best == doctest::Approx(200.0 / 3.0));
    CHECK(warped_kmeans_cluster(alt, 2, 0).sse == doctest::Approx(best));
    CHECK(kmeans_cluster(alt, 2, 0).sse == doctest::Approx(0.0));
    CHECK_THROWS_AS(warped_kmeans_cluster(r, 8, 0), ParameterError);
}

TEST_CASE("clustering invariants on random data") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto m = random_matrix(30, 3, s);
        for (auto method : {ClusterMethod::KMeans, ClusterMethod::Warped}) {
            ClusterOptions opt;
            opt.restarts = 1;
            Clustering c = cluster(m, 6, method, s, opt);
            check_centers_are_means(m, c);
            CHECK(c.sse == doctest::Approx(clustering_sse(m, c.assignments, 6)));
            for (std::size_t i = 1; i < c.sse_history.size(); ++i) CHECK(c.sse_history[i] <= c.sse_history[i - 1] + 1e-12);
            if (method == ClusterMethod::Warped) {
                for (std::size_t i = 1; i < 30; ++i) {
                    CHECK(c.assignments[i] >= c.assignments[i - 1]);
                    CHECK(c.assignments[i] - c.assignments[i - 1] <= 1);
                }
            }
        }
    }
}

TEST_CASE("kmeans matches brute force on small grids") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> val(0, 4);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 2 + static_cast<std::size_t>(trial % 5), d = 1 + static_cast<std::size_t>(trial % 2);
        std::vector<double> data(n * d);
        for (auto& v : data) v = val(rng);
        auto m = matrix(n, d, data);
        for (std::size_t k = 1; k <= n; ++k) {
            auto best = oracle::brute_force(m, k, false);
            Clustering c = kmeans_cluster(m, k, static_cast<std::uint64_t>(trial));
            CHECK(c.sse == doctest::Approx(best.sse).epsilon(1e-9).scale(1.0));
        }
    }
}

TEST_CASE("feco_compress examples") {
    auto m = matrix(4, 1, {0, 0, 10, 10});
    FeatureMatrix out = feco_compress(m, 0.5, ClusterMethod::KMeans, 0);
    CHECK(out.rows == 2);
    CHECK(out.data == std::vector<double>{0, 10});
    CHECK(compressed_rows(3, 0.4) == 2);
    CHECK(feco_compress(random_matrix(3, 2, 1), 0.4, ClusterMethod::KMeans, 0).rows == 2);
    auto f = TransformSpec::defaults(TransformKind::FeCo);
    CHECK(f.param("cl_r") == 0.2);
    CHECK_THROWS_AS(compressed_rows(5, 0.0), ParameterError);
    CHECK_THROWS_AS(compressed_rows(5, 1.0), ParameterError);
}

TEST_CASE("feco output size is ceil(N cl_r) over a grid") {
    for (std::size_t n = 2; n <= 40; n += 3)
        for (double r : {0.05, 0.1, 0.2, 0.25, 0.35, 0.5, 0.75, 0.9}) {
            auto m = random_matrix(n, 2, n);
            const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * r - 1e-9));
            CHECK(feco_compress(m, r, ClusterMethod::KMeans, 1).rows == std::max<std::size_t>(1, k));
            CHECK(feco_compress(m, r, ClusterMethod::Warped, 1).rows == std::max<std::size_t>(1, k));
        }
}

TEST_CASE("feco ordering and determinism") {
    auto m = random_matrix(25, 2, 8);
    FecoPlan p = feco_plan(m, 0.3, ClusterMethod::KMeans, 2);
    for (std::size_t i = 1; i < p.groups.size(); ++i) CHECK(p.groups[i].front() > p.groups[i - 1].front());
    FecoPlan w = feco_plan(m, 0.3, ClusterMethod::Warped, 2);
    for (std::size_t i = 1; i < w.groups.size(); ++i) CHECK(w.groups[i].front() > w.groups[i - 1].back());
    CHECK(feco_compress(m, 0.3, ClusterMethod::KMeans, 2).data == feco_compress(m, 0.3, ClusterMethod::KMeans, 2).data);

    // Single restarts from different seeds reach different local optima somewhere.
    ClusterOptions opt;
    opt.restarts = 1;
    opt.refine = false;
    bool differs = false;
    for (std::uint64_t s = 1; s < 20 && !differs; ++s) {
        auto big = random_matrix(60, 3, 100 + s);
        differs = feco_compress(big, 0.2, ClusterMethod::KMeans, 0, opt).data !=
                  feco_compress(big, 0.2, ClusterMethod::KMeans, s, opt).data;
    }
    CHECK(differs);
}

TEST_CASE("frozen-assignment averaging gradient") {
    std::vector<std::vector<std::size_t>> groups = {{0, 3}, {1}, {2, 4, 5}};
    grad::Tensor x({6, 4}, testutil::random_vec(24, 2));
    auto proj = testutil::random_vec(12, 3, 1.0);
    auto f = [&](grad::Graph& g, grad::Var v) {
        return grad::sum(grad::mul(feco_average(v, groups), g.constant(grad::Tensor({3, 4}, proj))));
    };
    auto r = grad::grad_check(f, x, 1e-4, 24, 1);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("replicate examples") {
    auto m = matrix(2, 1, {0, 10});
    Replication rep = replicate(m, 0.2, ClusterMethod::KMeans, 0);
    CHECK(rep.copies == 5);
    CHECK(rep.block_sizes == std::vector<std::size_t>{5, 5});
    REQUIRE(rep.matrix.rows == 10);
    std::size_t zeros = 0;
    for (double v : rep.matrix.data) zeros += v == 0.0 ? 1 : 0;
    CHECK(zeros == 5);
    // blocks are contiguous
    for (std::size_t i = 0; i < 10; ++i) CHECK(rep.matrix.data[i] == rep.matrix.data[(i / 5) * 5]);

    auto one = matrix(1, 3, {1, 2, 3});
    FeatureMatrix r1 = replicate_features(one, 0.5, ClusterMethod::KMeans, 0);
    CHECK(r1.rows == 2);
    CHECK(r1.data == std::vector<double>{1, 2, 3, 1, 2, 3});
}

TEST_CASE("compressing a replication restores the rows") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 3 + rng() % 12;
        const double cl_r = std::vector<double>{0.1, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5}[rng() % 7];
        const auto method = trial % 2 ? ClusterMethod::Warped : ClusterMethod::KMeans;
        auto m = random_matrix(n, 4, rng());
        FeatureMatrix rep = replicate_features(m, cl_r, method, rng());
        FeatureMatrix back = feco_compress(rep, cl_r, method, rng());
        CHECK(back.rows == m.rows);
        INFO("trial " << trial << " n " << n << " cl_r " << cl_r << " method " << to_string(method));
        CHECK(oracle::same_multiset(back, m, 1e-6));
    }
}

TEST_CASE("Griffin-Lim reconstruction") {
    auto sp = make_speakers(2, 3)[0];
    Waveform v = synthesize_voice(sp, 0, 0.5, 3);
    FeatureMatrix m = extract_features(v, FeatureStage::Original);
    GriffinLimResult gl = griffin_lim(m, 32, 1);
    CHECK(gl.audio.size() == (m.rows - 1) * 160 + 400);
    REQUIRE(gl.spectral_convergence.size() == 33);
    for (std::size_t i = 1; i < gl.spectral_convergence.size(); ++i)
        CHECK(gl.spectral_convergence[i] <= gl.spectral_convergence[i - 1] + 1e-9);
    FeatureMatrix back = extract_features(gl.audio, FeatureStage::Original);
    REQUIRE(back.rows == m.rows);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        num += (back.data[i] - m.data[i]) * (back.data[i] - m.data[i]);
        den += m.data[i] * m.data[i];
    }
    CHECK(std::sqrt(num / den) <= 0.3);

    FeatureMatrix silent = extract_features(Waveform(std::vector<double>(4000, 0.0)), FeatureStage::Original);
    Waveform z = griffin_lim_reconstruct(silent, 8, 0);
    double peak = 0.0;
    for (double s : z.samples()) peak = std::max(peak, std::abs(s));
    CHECK(peak <= 1e-3);
    CHECK_THROWS_AS(griffin_lim(extract_features(v, FeatureStage::Delta)), ContractError);
}
