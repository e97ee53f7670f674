#pragma once

#include <vector>

#include "ugs/features.hpp"
#include "ugs/mask.hpp"

namespace ugs {

// Strictly decreasing cosine thresholds in (0,1).
class ThresholdSchedule {
public:
    ThresholdSchedule();  // 0.9, 0.8, 0.7, 0.6, 0.5
    explicit ThresholdSchedule(std::vector<double> thetas);

    const std::vector<double>& thetas() const noexcept { return thetas_; }

private:
    std::vector<double> thetas_;
};

struct LevelPartition {
    double theta = 0.0;
    std::vector<BinaryMask> components;  // patch resolution, scan order of first patch
};

// Union-find over 4-adjacent patch pairs inside `region` whose cosine clears theta.
LevelPartition merge_at_threshold(const PatchFeatureMap& map, const BinaryMask& region, double theta);

struct ConquerConfig {
    ThresholdSchedule schedule;
    int min_patches = 2;
};

// All levels' components (>= min_patches), exact duplicates collapsed onto their
// highest-theta occurrence. Confidence is the mean cosine over adjacent pairs inside
// the component, clamped to [0,1]. Masks stay at patch resolution.
std::vector<ScoredMask> conquer_masks(const PatchFeatureMap& map, const BinaryMask& instance,
                                      const ConquerConfig& cfg = {});

}  // namespace ugs
