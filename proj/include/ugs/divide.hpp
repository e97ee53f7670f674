#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ugs/features.hpp"
#include "ugs/mask.hpp"

namespace ugs {

// Dense symmetric affinity over patches. weights is n x n row-major.
struct AffinityGraph {
    int n = 0;
    std::vector<double> weights;
    std::vector<double> degree;
    // Set when every pairwise cosine clears tau_sim: the map carries no structure to cut.
    bool degenerate = false;

    double weight(int p, int q) const noexcept {
        return weights[static_cast<std::size_t>(p) * static_cast<std::size_t>(n) +
                       static_cast<std::size_t>(q)];
    }
    void recompute_degree();
};

struct EigenOptions {
    int max_iterations = 10000;
    double tolerance = 1e-8;
    std::uint64_t seed = 0;
};

struct DivideConfig {
    double tau_sim = 0.15;
    double eps_floor = 1e-6;
    int max_instances = 3;
    double tau_conf = 0.3;
    // Pixel size of one patch; masks leave maskcut at pixel resolution.
    int patch_size = 1;
    EigenOptions eigen;
};

void validate(const DivideConfig& cfg);

// w_pq = 1 when cosine >= tau_sim, eps_floor otherwise; w_pp = 1.
AffinityGraph build_affinity(const PatchFeatureMap& map, const DivideConfig& cfg);

// Builds a graph straight from a weight matrix (symmetric, non-negative).
AffinityGraph graph_from_weights(int n, std::vector<double> weights);

struct Bipartition {
    std::vector<std::uint8_t> foreground;  // 1 = foreground side
    // Generalized eigenvector D^{-1/2} v, sign-normalized so its largest-magnitude entry is positive.
    std::vector<double> fiedler;
    // Unit eigenvector v of N = D^{-1/2} W D^{-1/2} and its eigenvalue.
    std::vector<double> eigenvector;
    double eigenvalue = 0.0;
    int iterations = 0;
};

// Second eigenpair of the normalized affinity, deflated against D^{1/2} 1.
// `seed_mask`, when given, restricts which entries may act as the foreground seed.
Bipartition spectral_bipartition(const AffinityGraph& g, const EigenOptions& opts = {},
                                 std::span<const std::uint8_t> seed_mask = {});

// Ncut(A, B) = cut/assoc(A) + cut/assoc(B). Infinite for an empty side.
double ncut_value(const AffinityGraph& g, std::span<const std::uint8_t> side);

// Fraction of unordered patch pairs inside the mask whose cosine clears tau_sim.
double binarized_coherence(const PatchFeatureMap& map, const BinaryMask& patch_mask, double tau_sim);

// Iterative normalized-cut discovery with masking-out. Output masks are at
// pixel resolution (patch_size upsampling).
std::vector<ScoredMask> maskcut(const PatchFeatureMap& map, const DivideConfig& cfg);

std::vector<ScoredMask> filter_confident(std::span<const ScoredMask> masks, double tau_conf);

}  // namespace ugs
