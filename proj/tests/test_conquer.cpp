#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "ugs/conquer.hpp"
#include "ugs/error.hpp"
#include "ugs/features.hpp"

using namespace ugs;

namespace {

// Instance split into a left and right subregion whose directions meet at `inter` cosine.
SynthResult two_subregions(double inter) {
    SynthSpec spec;
    spec.height = 8;
    spec.width = 10;
    spec.dim = 4;
    spec.seed = 4;
    const float s = static_cast<float>(std::sqrt(1.0 - inter * inter));
    SynthRegion whole{RegionShape::rectangle, 1, 1, 7, 9};
    whole.direction = std::vector<float>{1.0f, 0.0f, 0.0f, 1.0f};
    SynthRegion left{RegionShape::rectangle, 1, 1, 7, 5, 0};
    left.direction = std::vector<float>{1.0f, 0.0f, 0.0f, 0.0f};
    SynthRegion right{RegionShape::rectangle, 1, 5, 7, 9, 0};
    right.direction = std::vector<float>{static_cast<float>(inter), s, 0.0f, 0.0f};
    spec.regions = {whole, left, right};
    spec.background_direction = std::vector<float>{0.0f, 0.0f, 1.0f, 0.0f};
    return synth_features(spec);
}

bool is_partition(const LevelPartition& p, const BinaryMask& region) {
    BinaryMask uni(region.height(), region.width());
    std::size_t total = 0;
    for (const auto& c : p.components) {
        uni |= c;
        total += area(c);
    }
    return uni == region && total == area(region);
}

PatchFeatureMap random_unit_map(std::mt19937_64& rng, int h, int w, int d) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    PatchFeatureMap m{h, w, d, {}, false};
    m.data.resize(static_cast<std::size_t>(h * w * d));
    // Shared bias so cosines spread across the schedule.
    for (int p = 0; p < h * w; ++p) {
        for (int k = 0; k < d; ++k) m.data[static_cast<std::size_t>(p * d + k)] = n(rng) + (k == 0 ? 2.0f : 0.0f);
    }
    normalize(m);
    return m;
}

}  // namespace

TEST_CASE("schedule validation") {
    CHECK(ThresholdSchedule().thetas() == std::vector<double>{0.9, 0.8, 0.7, 0.6, 0.5});
    CHECK_THROWS_AS(ThresholdSchedule(std::vector<double>{}), InvalidArgument);
    CHECK_THROWS_AS(ThresholdSchedule({0.5, 0.7}), InvalidArgument);
    CHECK_THROWS_AS(ThresholdSchedule({0.7, 0.7}), InvalidArgument);
    CHECK_THROWS_AS(ThresholdSchedule({1.0, 0.5}), InvalidArgument);
}

TEST_CASE("threshold above every cosine leaves singletons") {
    std::mt19937_64 rng(1);
    const auto m = random_unit_map(rng, 5, 5, 6);
    const auto region = BinaryMask::full(5, 5);
    const auto p = merge_at_threshold(m, region, 0.99999);
    CHECK(p.components.size() == 25);
    CHECK(is_partition(p, region));
}

TEST_CASE("threshold below every cosine merges a connected region") {
    std::mt19937_64 rng(2);
    const auto m = random_unit_map(rng, 5, 5, 6);
    const auto region = test_util::rect_mask(5, 5, 1, 0, 4, 5);
    const auto p = merge_at_threshold(m, region, -1.0);
    REQUIRE(p.components.size() == 1);
    CHECK(p.components[0] == region);
}

TEST_CASE("two subregions split above their cosine and merge below") {
    const auto s = two_subregions(0.6);
    const auto& inst = s.gt_masks[0];
    const auto hi = merge_at_threshold(s.map, inst, 0.7);
    const auto lo = merge_at_threshold(s.map, inst, 0.5);
    REQUIRE(hi.components.size() == 2);
    CHECK(hi.components[0] == s.gt_masks[1]);
    CHECK(hi.components[1] == s.gt_masks[2]);
    REQUIRE(lo.components.size() == 1);
    CHECK(lo.components[0] == inst);
}

TEST_CASE("monotone coarsening across every schedule pair") {
    std::mt19937_64 rng(3);
    const ThresholdSchedule sched({0.95, 0.9, 0.85, 0.8, 0.7, 0.6, 0.5, 0.3});
    for (int t = 0; t < 20; ++t) {
        const auto m = random_unit_map(rng, 10, 10, 4);
        const auto region = test_util::random_mask(rng, 10, 10, 0.8);
        if (!region.any()) continue;
        std::vector<LevelPartition> levels;
        for (double th : sched.thetas()) {
            levels.push_back(merge_at_threshold(m, region, th));
            CHECK(is_partition(levels.back(), region));
        }
        for (std::size_t i = 0; i < levels.size(); ++i) {
            for (std::size_t j = i + 1; j < levels.size(); ++j) {
                for (const auto& fine : levels[i].components) {
                    int holders = 0;
                    int straddles = 0;
                    for (const auto& coarse : levels[j].components) {
                        const auto inter = intersection_area(fine, coarse);
                        if (inter == area(fine)) ++holders;
                        else if (inter != 0) ++straddles;
                    }
                    CHECK(holders == 1);
                    CHECK(straddles == 0);
                }
            }
        }
    }
}

TEST_CASE("components never cross 4-adjacency gaps") {
    PatchFeatureMap m{3, 3, 2, std::vector<float>(18, 0.0f), false};
    for (int p = 0; p < 9; ++p) m.data[static_cast<std::size_t>(2 * p)] = 1.0f;
    normalize(m);
    BinaryMask diag(3, 3);
    diag.set(0, 0);
    diag.set(1, 1);
    diag.set(2, 2);
    CHECK(merge_at_threshold(m, diag, 0.5).components.size() == 3);
}

TEST_CASE("single-direction instance collapses to itself") {
    SynthSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.seed = 2;
    spec.regions.push_back({RegionShape::rectangle, 2, 2, 7, 7});
    const auto s = synth_features(spec);
    const auto masks = conquer_masks(s.map, s.gt_masks[0]);
    REQUIRE(masks.size() == 1);
    CHECK(masks[0].mask == s.gt_masks[0]);
    CHECK(masks[0].confidence == doctest::Approx(1.0));
    CHECK(masks[0].source == MaskSource::conquer);
}

TEST_CASE("nested instance yields both parts and the whole") {
    const auto s = two_subregions(0.6);
    const auto masks = conquer_masks(s.map, s.gt_masks[0]);
    auto has = [&](const BinaryMask& target) {
        for (const auto& m : masks) {
            if (m.mask == target) return true;
        }
        return false;
    };
    CHECK(has(s.gt_masks[0]));
    CHECK(has(s.gt_masks[1]));
    CHECK(has(s.gt_masks[2]));
    CHECK(masks.size() == 3);
    for (std::size_t i = 0; i < masks.size(); ++i) {
        for (std::size_t j = i + 1; j < masks.size(); ++j) CHECK(!(masks[i].mask == masks[j].mask));
    }
}

TEST_CASE("empty instance and min_patches") {
    const auto s = two_subregions(0.6);
    CHECK(conquer_masks(s.map, BinaryMask(8, 10)).empty());
    BinaryMask one(8, 10);
    one.set(3, 3);
    CHECK(conquer_masks(s.map, one).empty());
    ConquerConfig cfg;
    cfg.min_patches = 1;
    CHECK(conquer_masks(s.map, one, cfg).size() == 1);
}

TEST_CASE("conquer is deterministic") {
    std::mt19937_64 rng(9);
    const auto m = random_unit_map(rng, 12, 12, 5);
    const auto region = BinaryMask::full(12, 12);
    const auto a = conquer_masks(m, region);
    const auto b = conquer_masks(m, region);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].mask == b[i].mask);
        CHECK(a[i].confidence == b[i].confidence);
        CHECK(a[i].confidence >= 0.0);
        CHECK(a[i].confidence <= 1.0);
    }
}
