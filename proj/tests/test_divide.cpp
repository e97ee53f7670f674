#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ugs/divide.hpp"
#include "ugs/error.hpp"
#include "ugs/features.hpp"

using namespace ugs;

namespace {

SynthResult three_regions() {
    SynthSpec spec;
    spec.height = 12;
    spec.width = 12;
    spec.seed = 21;
    spec.separation_deg = 80.0;
    spec.regions.push_back({RegionShape::rectangle, 1, 1, 6, 6});
    spec.regions.push_back({RegionShape::rectangle, 1, 7, 6, 11});
    spec.regions.push_back({RegionShape::rectangle, 7, 2, 11, 10});
    return synth_features(spec);
}

double max_residual(const AffinityGraph& g, const Bipartition& b) {
    double worst = 0.0;
    for (int p = 0; p < g.n; ++p) {
        double nv = 0.0;
        for (int q = 0; q < g.n; ++q) {
            nv += g.weight(p, q) / std::sqrt(g.degree[static_cast<std::size_t>(p)] * g.degree[static_cast<std::size_t>(q)]) *
                  b.eigenvector[static_cast<std::size_t>(q)];
        }
        worst = std::max(worst, std::abs(nv - b.eigenvalue * b.eigenvector[static_cast<std::size_t>(p)]));
    }
    return worst;
}

}  // namespace

TEST_CASE("config validation") {
    DivideConfig cfg;
    CHECK_NOTHROW(validate(cfg));
    cfg.tau_sim = 1.0;
    CHECK_THROWS_AS(validate(cfg), InvalidArgument);
    cfg = {};
    cfg.eps_floor = 0.0;
    CHECK_THROWS_AS(validate(cfg), InvalidArgument);
    cfg = {};
    cfg.tau_conf = 1.5;
    CHECK_THROWS_AS(validate(cfg), InvalidArgument);
}

TEST_CASE("affinity is block diagonal on two orthogonal regions") {
    PatchFeatureMap m{1, 4, 2, {1, 0, 1, 0, 0, 1, 0, 1}, true};
    DivideConfig cfg;
    cfg.tau_sim = 0.5;
    const auto g = build_affinity(m, cfg);
    REQUIRE(g.n == 4);
    CHECK(g.weight(0, 1) == 1.0);
    CHECK(g.weight(2, 3) == 1.0);
    CHECK(g.weight(0, 2) == cfg.eps_floor);
    CHECK(g.weight(3, 1) == cfg.eps_floor);
    CHECK(g.weight(2, 2) == 1.0);
    CHECK(g.degree[0] == doctest::Approx(2.0 + 2 * cfg.eps_floor));
    CHECK(!g.degenerate);
}

TEST_CASE("affinity corner cases") {
    PatchFeatureMap one{1, 1, 2, {1, 0}, true};
    const auto g1 = build_affinity(one, {});
    CHECK(g1.n == 1);
    CHECK(g1.weight(0, 0) == 1.0);

    PatchFeatureMap m{1, 3, 2, {1, 0, 0, 1, -1, 0}, true};
    DivideConfig cfg;
    cfg.tau_sim = 0.99;
    const auto g = build_affinity(m, cfg);
    for (int p = 0; p < 3; ++p) {
        for (int q = 0; q < 3; ++q) CHECK(g.weight(p, q) == (p == q ? 1.0 : cfg.eps_floor));
    }

    PatchFeatureMap same{1, 3, 2, {1, 0, 1, 0, 1, 0}, true};
    CHECK(build_affinity(same, {}).degenerate);

    PatchFeatureMap raw{1, 1, 2, {3, 4}, false};
    CHECK_THROWS_AS(build_affinity(raw, {}), InvalidArgument);
}

TEST_CASE("two-block graph is split along the blocks") {
    const int n = 8;
    std::vector<double> w(n * n, 1e-6);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if ((i < 4) == (j < 4)) w[static_cast<std::size_t>(i * n + j)] = 1.0;
        }
    }
    const auto g = graph_from_weights(n, w);
    const auto b = spectral_bipartition(g);
    const std::vector<std::uint8_t> blocks{0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(oracles::same_partition(b.foreground, blocks));
    const auto best = oracles::exhaustive_min_ncut(n, w);
    CHECK(oracles::same_partition(best.side, blocks));
    CHECK(ncut_value(g, b.foreground) == doctest::Approx(oracles::ncut(n, w, b.foreground)));
}

TEST_CASE("symmetric two-node graph") {
    const auto g = graph_from_weights(2, {1.0, 0.5, 0.5, 1.0});
    const auto b = spectral_bipartition(g);
    CHECK(std::abs(b.fiedler[0]) == doctest::Approx(std::abs(b.fiedler[1])));
    CHECK(b.foreground[0] != b.foreground[1]);
}

TEST_CASE("eigenpair residual and deflation orthogonality") {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 30; ++t) {
        const auto bg = oracles::block_graph(rng, 5, 30, 0.2);
        const auto g = graph_from_weights(bg.n, bg.w);
        const auto b = spectral_bipartition(g, {.seed = static_cast<std::uint64_t>(t)});
        CHECK(max_residual(g, b) <= 1e-6);
        double along = 0.0;
        double norm = 0.0;
        for (int p = 0; p < g.n; ++p) {
            const double s = std::sqrt(g.degree[static_cast<std::size_t>(p)]);
            along += s * b.eigenvector[static_cast<std::size_t>(p)];
            norm += s * s;
        }
        CHECK(std::abs(along) / std::sqrt(norm) <= 1e-6);
    }
}

TEST_CASE("spectral split matches exhaustive minimum ncut on block graphs") {
    std::mt19937_64 rng(11);
    int exact = 0;
    const int trials = 60;
    for (int t = 0; t < trials; ++t) {
        const auto bg = oracles::block_graph(rng);
        const auto g = graph_from_weights(bg.n, bg.w);
        const auto b = spectral_bipartition(g);
        const auto best = oracles::exhaustive_min_ncut(bg.n, bg.w);
        exact += oracles::same_partition(b.foreground, best.side);
        CHECK(oracles::ncut(bg.n, bg.w, b.foreground) <= 1.05 * best.value + 1e-12);
    }
    CHECK(exact >= trials - 1);
}

TEST_CASE("foreground holds the largest-magnitude entry") {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 20; ++t) {
        const auto bg = oracles::block_graph(rng);
        const auto b = spectral_bipartition(graph_from_weights(bg.n, bg.w));
        std::size_t arg = 0;
        for (std::size_t i = 1; i < b.eigenvector.size(); ++i) {
            if (std::abs(b.eigenvector[i]) > std::abs(b.eigenvector[arg])) arg = i;
        }
        CHECK(b.foreground[arg] == 1);
    }
}

TEST_CASE("graph_from_weights validates input") {
    CHECK_THROWS_AS(graph_from_weights(2, {1, 0, 0}), DimensionError);
    CHECK_THROWS_AS(graph_from_weights(2, {1, 0.5, 0.4, 1}), InvalidArgument);
    CHECK_THROWS_AS(graph_from_weights(2, {0, 0, 0, 0}), InvalidArgument);
}

TEST_CASE("ncut of an empty side is infinite") {
    const auto g = graph_from_weights(2, {1, 0.5, 0.5, 1});
    CHECK(std::isinf(ncut_value(g, std::vector<std::uint8_t>{0, 0})));
}

TEST_CASE("maskcut recovers three separated regions") {
    const auto s = three_regions();
    DivideConfig cfg;
    cfg.tau_sim = 0.5;
    const auto masks = maskcut(s.map, cfg);
    REQUIRE(masks.size() == 3);
    for (const auto& gt : s.gt_masks) {
        double best = 0.0;
        for (const auto& m : masks) best = std::max(best, iou(m.mask, gt));
        CHECK(best == 1.0);
    }
    for (const auto& m : masks) CHECK(m.confidence == doctest::Approx(1.0));
    CHECK(maskcut(s.map, cfg).size() == masks.size());
    const auto again = maskcut(s.map, cfg);
    for (std::size_t i = 0; i < masks.size(); ++i) CHECK(again[i].mask == masks[i].mask);
}

TEST_CASE("maskcut with one instance returns the first foreground") {
    const auto s = three_regions();
    DivideConfig cfg;
    cfg.tau_sim = 0.5;
    cfg.max_instances = 1;
    const auto masks = maskcut(s.map, cfg);
    REQUIRE(masks.size() == 1);
    CHECK(masks[0].mask == maskcut(s.map, {.tau_sim = 0.5})[0].mask);
}

TEST_CASE("maskcut upsamples by patch size") {
    const auto s = three_regions();
    DivideConfig cfg;
    cfg.tau_sim = 0.5;
    cfg.patch_size = 4;
    const auto masks = maskcut(s.map, cfg);
    REQUIRE(!masks.empty());
    CHECK(masks[0].mask.height() == 48);
    CHECK(masks[0].mask.width() == 48);
}

TEST_CASE("featureless map gives at most one weak mask") {
    PatchFeatureMap m{6, 6, 2, {}, true};
    for (int p = 0; p < 36; ++p) {
        m.data.push_back(1.0f);
        m.data.push_back(0.0f);
    }
    const auto masks = maskcut(m, {});
    CHECK(masks.size() <= 1);
}

TEST_CASE("binarized coherence counts qualifying pairs") {
    PatchFeatureMap m{1, 3, 2, {1, 0, 1, 0, 0, 1}, true};
    BinaryMask all = BinaryMask::full(1, 3);
    CHECK(binarized_coherence(m, all, 0.5) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("filter_confident keeps order and the inclusive threshold") {
    BinaryMask m(2, 2);
    std::vector<ScoredMask> in{{m, 0.9}, {m, 0.29}, {m, 0.31}};
    const auto out = filter_confident(in, 0.3);
    REQUIRE(out.size() == 2);
    CHECK(out[0].confidence == 0.9);
    CHECK(out[1].confidence == 0.31);
    std::vector<ScoredMask> ones{{m, 1.0}, {m, 1.0}};
    CHECK(filter_confident(ones, 0.3).size() == 2);
    std::vector<ScoredMask> zeros{{m, 0.0}, {m, 0.0}};
    CHECK(filter_confident(zeros, 0.3).empty());
    std::vector<ScoredMask> edge{{m, 0.3}};
    CHECK(filter_confident(edge, 0.3).size() == 1);
}
