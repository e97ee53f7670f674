#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <queue>
#include <random>

#include "test_util.hpp"
#include "ugs/error.hpp"
#include "ugs/mask.hpp"

using namespace ugs;
using test_util::random_mask;
using test_util::rect_mask;

namespace {

std::vector<bool> dense(const BinaryMask& m) {
    std::vector<bool> out;
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) out.push_back(m.get(r, c));
    }
    return out;
}

double iou_oracle(const BinaryMask& a, const BinaryMask& b) {
    const auto da = dense(a);
    const auto db = dense(b);
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        inter += da[i] && db[i];
        uni += da[i] || db[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Column-major runs beginning with a background run.
std::vector<std::uint32_t> rle_oracle(const BinaryMask& m) {
    std::vector<std::uint32_t> counts;
    bool current = false;
    std::uint32_t run = 0;
    for (int c = 0; c < m.width(); ++c) {
        for (int r = 0; r < m.height(); ++r) {
            if (m.get(r, c) != current) {
                counts.push_back(run);
                run = 0;
                current = !current;
            }
            ++run;
        }
    }
    counts.push_back(run);
    return counts;
}

std::size_t component_count_oracle(const BinaryMask& m, bool eight) {
    std::vector<int> seen(m.pixel_count(), 0);
    std::size_t count = 0;
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            if (!m.get(r, c) || seen[m.index(r, c)]) continue;
            ++count;
            std::queue<std::pair<int, int>> q;
            q.push({r, c});
            seen[m.index(r, c)] = 1;
            while (!q.empty()) {
                auto [y, x] = q.front();
                q.pop();
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0)) continue;
                        const int ny = y + dy;
                        const int nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= m.height() || nx >= m.width()) continue;
                        if (!m.get(ny, nx) || seen[m.index(ny, nx)]) continue;
                        seen[m.index(ny, nx)] = 1;
                        q.push({ny, nx});
                    }
                }
            }
        }
    }
    return count;
}

std::uint32_t distance_oracle(const BinaryMask& m, int r, int c) {
    if (!m.get(r, c)) return 0;
    // Nearest outside pixel, including the virtual ring just beyond the border.
    int best = std::min({r + 1, c + 1, m.height() - r, m.width() - c});
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (!m.get(y, x)) best = std::min(best, std::abs(y - r) + std::abs(x - c));
        }
    }
    return static_cast<std::uint32_t>(best);
}

}  // namespace

TEST_CASE("constructor rejects empty shapes") {
    CHECK_THROWS_AS(BinaryMask(0, 3), InvalidArgument);
    CHECK_THROWS_AS(BinaryMask(2, -1), InvalidArgument);
}

TEST_CASE("area and set algebra agree with a dense model") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        const int h = 1 + static_cast<int>(rng() % 20);
        const int w = 1 + static_cast<int>(rng() % 20);
        const auto a = random_mask(rng, h, w, 0.4);
        const auto b = random_mask(rng, h, w, 0.5);
        const auto da = dense(a);
        const auto db = dense(b);
        std::size_t na = 0, ni = 0, nu = 0, nd = 0;
        for (std::size_t i = 0; i < da.size(); ++i) {
            na += da[i];
            ni += da[i] && db[i];
            nu += da[i] || db[i];
            nd += da[i] && !db[i];
        }
        CHECK(area(a) == na);
        CHECK(intersection_area(a, b) == ni);
        CHECK(area(a | b) == nu);
        CHECK(area(difference(a, b)) == nd);
        CHECK(area(a.complement()) == da.size() - na);
    }
}

TEST_CASE("iou matches brute force") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 500; ++t) {
        const int h = 1 + static_cast<int>(rng() % 16);
        const int w = 1 + static_cast<int>(rng() % 70);
        const auto a = random_mask(rng, h, w, 0.3);
        const auto b = random_mask(rng, h, w, 0.3);
        CHECK(iou(a, b) == doctest::Approx(iou_oracle(a, b)).epsilon(1e-15));
    }
    BinaryMask e(3, 3);
    CHECK(iou(e, e) == 0.0);
    CHECK_THROWS_AS(iou(BinaryMask(2, 2), BinaryMask(2, 3)), DimensionError);
}

TEST_CASE("containment divides by the part") {
    const auto part = rect_mask(10, 10, 0, 0, 2, 5);
    const auto whole = rect_mask(10, 10, 0, 0, 2, 4);
    CHECK(containment(part, whole) == doctest::Approx(0.8));
    CHECK_THROWS_AS(containment(BinaryMask(10, 10), whole), InvalidArgument);
}

TEST_CASE("rle encode matches oracle and round-trips on 1000+ random masks") {
    std::mt19937_64 rng(3);
    int cases = 0;
    for (int t = 0; t < 1200; ++t) {
        const int h = 1 + static_cast<int>(rng() % 40);
        const int w = 1 + static_cast<int>(rng() % 40);
        const double density = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto m = random_mask(rng, h, w, density);
        const RleMask r = rle_encode(m);
        CHECK(r.height == h);
        CHECK(r.width == w);
        CHECK(r.counts == rle_oracle(m));
        CHECK(rle_decode(r) == m);
        ++cases;
    }
    CHECK(cases >= 1000);
}

TEST_CASE("rle edge cases") {
    const auto full = BinaryMask::full(3, 2);
    CHECK(rle_encode(full).counts == std::vector<std::uint32_t>{0, 6});
    CHECK(rle_encode(BinaryMask(3, 2)).counts == std::vector<std::uint32_t>{6});
    BinaryMask one(2, 2);
    one.set(1, 0);
    CHECK(rle_encode(one).counts == std::vector<std::uint32_t>{1, 1, 2});
    RleMask bad{2, 2, {1, 1}};
    CHECK_THROWS_AS(rle_decode(bad), FormatError);
}

TEST_CASE("connected components match BFS counts") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 200; ++t) {
        const auto m = random_mask(rng, 12, 15, 0.45);
        const auto four = connected_components(m, Connectivity::four);
        const auto eight = connected_components(m, Connectivity::eight);
        CHECK(four.size() == component_count_oracle(m, false));
        CHECK(eight.size() == component_count_oracle(m, true));
        BinaryMask uni(12, 15);
        std::size_t total = 0;
        for (const auto& c : four) {
            uni |= c;
            total += area(c);
        }
        CHECK(uni == m);
        CHECK(total == area(m));
    }
}

TEST_CASE("largest component ties go to scan order") {
    BinaryMask m(3, 7);
    m.fill_rect(0, 0, 1, 2);
    m.fill_rect(2, 4, 3, 6);
    const auto big = largest_component(m);
    CHECK(big.get(0, 0));
    CHECK(area(big) == 2);
    CHECK(!largest_component(BinaryMask(3, 3)).any());
}

TEST_CASE("nms priority and pinned index") {
    const auto a = rect_mask(10, 10, 0, 0, 5, 5);
    const auto a2 = rect_mask(10, 10, 0, 0, 5, 4);
    const auto b = rect_mask(10, 10, 6, 6, 9, 9);
    std::vector<ScoredMask> masks{{a2, 0.5}, {a, 0.9}, {b, 0.7}};
    CHECK(nms(masks, 0.5) == std::vector<std::size_t>{1, 2});
    CHECK(nms(masks, 0.5, 0) == std::vector<std::size_t>{0, 2});
    // Equal confidence: larger area first.
    std::vector<ScoredMask> tie{{a2, 0.5}, {a, 0.5}};
    CHECK(nms(tie, 0.5) == std::vector<std::size_t>{1});
    CHECK_THROWS_AS(nms(masks, 0.0), InvalidArgument);
    CHECK_THROWS_AS(nms(masks, 1.5), InvalidArgument);
}

TEST_CASE("upsample then majority downsample is the identity") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
        const auto m = random_mask(rng, 7, 9, 0.5);
        for (int f : {1, 2, 3}) {
            const auto up = upsample(m, f);
            CHECK(up.height() == 7 * f);
            CHECK(area(up) == area(m) * static_cast<std::size_t>(f * f));
            CHECK(downsample_majority(up, f) == m);
        }
    }
}

TEST_CASE("distance transform matches brute force with the border as background") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 60; ++t) {
        const auto m = random_mask(rng, 9, 11, 0.75);
        const auto d = distance_transform(m);
        for (int r = 0; r < 9; ++r) {
            for (int c = 0; c < 11; ++c) CHECK(d[m.index(r, c)] == distance_oracle(m, r, c));
        }
    }
    const auto sq = rect_mask(5, 5, 0, 0, 5, 5);
    CHECK(distance_transform(sq)[sq.index(2, 2)] == 3);
}
