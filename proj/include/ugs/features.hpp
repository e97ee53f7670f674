#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ugs/mask.hpp"

namespace ugs {

// H x W grid of D-dimensional patch features, patch-major row order with the
// channels of one patch contiguous.
struct PatchFeatureMap {
    int height = 0;
    int width = 0;
    int dim = 0;
    std::vector<float> data;
    bool normalized = false;

    int patch_count() const noexcept { return height * width; }
    int patch_index(int row, int col) const noexcept { return row * width + col; }

    std::span<const float> patch(int index) const {
        return {data.data() + static_cast<std::size_t>(index) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
    std::span<float> patch(int index) {
        return {data.data() + static_cast<std::size_t>(index) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }

    friend bool operator==(const PatchFeatureMap&, const PatchFeatureMap&) = default;
};

// Throws FormatError / NumericalError when the map breaks its invariants
// (size, finiteness, unit norm when flagged normalized).
void validate(const PatchFeatureMap& map);

// L2-normalizes every patch in place and sets the flag. Zero vectors are rejected.
void normalize(PatchFeatureMap& map);

struct ReadOptions {
    bool normalize = true;
};

// File layout (little-endian): "UGF1" | u32 version=1 | u32 H | u32 W | u32 D |
// u32 flags (bit0 normalized) | H*W*D float32.
PatchFeatureMap read_features(const std::filesystem::path& path, ReadOptions options = {});
void write_features(const PatchFeatureMap& map, const std::filesystem::path& path);

// Cosine similarity of two patches, clamped to [-1, 1].
double cosine(const PatchFeatureMap& map, int p, int q);

enum class RegionShape { rectangle, ellipse };

// Bounds are half-open patch coordinates. `parent` indexes an earlier region or is -1.
struct SynthRegion {
    RegionShape shape = RegionShape::rectangle;
    int top = 0;
    int left = 0;
    int bottom = 0;
    int right = 0;
    int parent = -1;
    // When set, the region direction is built at exactly this cosine to its parent's.
    std::optional<double> parent_cosine;
    // Explicit direction (normalized on use); bypasses sampling.
    std::optional<std::vector<float>> direction;
};

struct SynthSpec {
    int height = 16;
    int width = 16;
    int dim = 16;
    std::vector<SynthRegion> regions;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    // Minimum angle between directions of regions in different top-level trees
    // (and the background). Never below 30 degrees.
    double separation_deg = 30.0;
    std::optional<std::vector<float>> background_direction;
};

struct SynthResult {
    PatchFeatureMap map;
    // Patch-resolution masks, one per region, each covering its full bounds
    // (descendants included).
    std::vector<BinaryMask> gt_masks;
    std::vector<int> parents;
    std::vector<std::vector<float>> directions;
    std::vector<float> background_direction;
};

BinaryMask region_mask(const SynthRegion& region, int height, int width);

SynthResult synth_features(const SynthSpec& spec);

}  // namespace ugs
