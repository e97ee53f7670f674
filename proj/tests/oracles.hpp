#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace oracles {

// Symmetric n x n weights: 1 inside each of two blocks, a small random value across.
struct BlockGraph {
    int n = 0;
    std::vector<double> w;
    std::vector<std::uint8_t> block;  // 1 for the second block
};

inline BlockGraph block_graph(std::mt19937_64& rng, int n_min = 4, int n_max = 12, double inter_max = 0.01) {
    std::uniform_int_distribution<int> size(n_min, n_max);
    BlockGraph g;
    g.n = size(rng);
    std::uniform_int_distribution<int> split(1, g.n - 1);
    const int first = split(rng);
    std::vector<int> order(static_cast<std::size_t>(g.n));
    for (int i = 0; i < g.n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    g.block.assign(static_cast<std::size_t>(g.n), 0);
    for (int i = first; i < g.n; ++i) g.block[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    std::uniform_real_distribution<double> inter(1e-6, inter_max);
    g.w.assign(static_cast<std::size_t>(g.n * g.n), 0.0);
    for (int i = 0; i < g.n; ++i) {
        for (int j = i; j < g.n; ++j) {
            const bool same = g.block[static_cast<std::size_t>(i)] == g.block[static_cast<std::size_t>(j)];
            const double v = same ? 1.0 : inter(rng);
            g.w[static_cast<std::size_t>(i * g.n + j)] = v;
            g.w[static_cast<std::size_t>(j * g.n + i)] = v;
        }
    }
    return g;
}

// cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V), straight from the definition.
inline double ncut(int n, const std::vector<double>& w, const std::vector<std::uint8_t>& side) {
    double cut = 0.0, assoc_a = 0.0, assoc_b = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double v = w[static_cast<std::size_t>(i * n + j)];
            if (side[static_cast<std::size_t>(i)]) {
                assoc_a += v;
                if (!side[static_cast<std::size_t>(j)]) cut += v;
            } else {
                assoc_b += v;
            }
        }
    }
    if (assoc_a == 0.0 || assoc_b == 0.0) return std::numeric_limits<double>::infinity();
    return cut / assoc_a + cut / assoc_b;
}

struct BestCut {
    double value = std::numeric_limits<double>::infinity();
    std::vector<std::uint8_t> side;
};

// Minimum over all 2^n bipartitions with both sides nonempty.
inline BestCut exhaustive_min_ncut(int n, const std::vector<double>& w) {
    BestCut best;
    std::vector<std::uint8_t> side(static_cast<std::size_t>(n));
    for (std::uint32_t bits = 1; bits + 1 < (1u << n); ++bits) {
        for (int i = 0; i < n; ++i) side[static_cast<std::size_t>(i)] = (bits >> i) & 1u;
        const double v = ncut(n, w, side);
        if (v < best.value) {
            best.value = v;
            best.side = side;
        }
    }
    return best;
}

// Same partition up to swapping the two labels.
inline bool same_partition(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) return false;
    bool equal = true, flipped = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        equal = equal && (a[i] != 0) == (b[i] != 0);
        flipped = flipped && (a[i] != 0) != (b[i] != 0);
    }
    return equal || flipped;
}

// Relative-area granularity written out directly.
inline double relative_area_score(double a, double a_min, double a_max) {
    if (a_max == a_min) return 1.0;
    return (std::sqrt(a) - std::sqrt(a_min)) / (std::sqrt(a_max) - std::sqrt(a_min)) * 0.9 + 0.1;
}

}  // namespace oracles
