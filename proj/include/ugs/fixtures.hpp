#pragma once

#include <cstdint>
#include <vector>

#include "ugs/features.hpp"
#include "ugs/hierarchy.hpp"

namespace ugs::fixtures {

// Three instances on a 32x32 grid, each with 2-3 nested subregions.
SynthSpec three_instance_spec(std::uint64_t seed = 7, double noise_sigma = 0.0);

// Two or three instances, each peppered with many small parts. Index selects the
// layout; the corpus used for distribution checks is indices 0..19.
SynthSpec many_parts_spec(int index, std::uint64_t seed = 11);

// One chain of 2-4 concentric-ish nested squares; every nesting depth draws its
// direction from a shared palette so depth semantics carry across images.
struct NestedSquares {
    SynthResult synth;
    int levels = 0;
};
NestedSquares nested_squares(int grid, int dim, std::uint64_t seed, double noise_sigma = 0.05);

// Ground-truth label set: one hierarchy per top-level region with every descendant as a
// child, relative-area granularities and confidence 1.
PseudoLabelSet gt_label_set(const SynthResult& synth, const std::string& image_id);

}  // namespace ugs::fixtures
