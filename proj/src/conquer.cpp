#include "ugs/conquer.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "ugs/error.hpp"

namespace ugs {

ThresholdSchedule::ThresholdSchedule() : thetas_{0.9, 0.8, 0.7, 0.6, 0.5} {}

ThresholdSchedule::ThresholdSchedule(std::vector<double> thetas) : thetas_(std::move(thetas)) {
    if (thetas_.empty()) throw InvalidArgument("threshold schedule must be nonempty");
    for (std::size_t i = 0; i < thetas_.size(); ++i) {
        if (!(thetas_[i] > 0.0 && thetas_[i] < 1.0)) {
            throw InvalidArgument("threshold " + std::to_string(thetas_[i]) + " is outside (0,1)");
        }
        if (i > 0 && !(thetas_[i] < thetas_[i - 1])) {
            throw InvalidArgument("threshold schedule must be strictly decreasing");
        }
    }
}

namespace {

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent_[b] = a;
        if (rank_[a] == rank_[b]) ++rank_[a];
    }

private:
    std::vector<std::size_t> parent_;
    std::vector<unsigned char> rank_;
};

void require_grid(const PatchFeatureMap& map, const BinaryMask& region) {
    if (region.height() != map.height || region.width() != map.width) {
        throw DimensionError("region mask must be at patch resolution (" + std::to_string(map.height) + "x" +
                             std::to_string(map.width) + ")");
    }
}

}  // namespace

LevelPartition merge_at_threshold(const PatchFeatureMap& map, const BinaryMask& region, double theta) {
    require_grid(map, region);
    LevelPartition level{theta, {}};
    const int h = map.height;
    const int w = map.width;
    DisjointSets sets(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!region.get(r, c)) continue;
            const int p = map.patch_index(r, c);
            if (c + 1 < w && region.get(r, c + 1) && cosine(map, p, p + 1) >= theta) {
                sets.unite(static_cast<std::size_t>(p), static_cast<std::size_t>(p + 1));
            }
            if (r + 1 < h && region.get(r + 1, c) && cosine(map, p, p + w) >= theta) {
                sets.unite(static_cast<std::size_t>(p), static_cast<std::size_t>(p + w));
            }
        }
    }

    // Roots get a component slot the first time they are met in scan order.
    std::vector<int> slot(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), -1);
    for (int p = 0; p < h * w; ++p) {
        if (!region.test(static_cast<std::size_t>(p))) continue;
        const std::size_t root = sets.find(static_cast<std::size_t>(p));
        if (slot[root] < 0) {
            slot[root] = static_cast<int>(level.components.size());
            level.components.emplace_back(h, w);
        }
        level.components[static_cast<std::size_t>(slot[root])].assign(static_cast<std::size_t>(p), true);
    }
    return level;
}

namespace {

double adjacent_pair_confidence(const PatchFeatureMap& map, const BinaryMask& comp) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (int r = 0; r < map.height; ++r) {
        for (int c = 0; c < map.width; ++c) {
            if (!comp.get(r, c)) continue;
            const int p = map.patch_index(r, c);
            if (c + 1 < map.width && comp.get(r, c + 1)) {
                sum += cosine(map, p, p + 1);
                ++pairs;
            }
            if (r + 1 < map.height && comp.get(r + 1, c)) {
                sum += cosine(map, p, p + map.width);
                ++pairs;
            }
        }
    }
    if (pairs == 0) return 0.0;
    return std::clamp(sum / static_cast<double>(pairs), 0.0, 1.0);
}

}  // namespace

std::vector<ScoredMask> conquer_masks(const PatchFeatureMap& map, const BinaryMask& instance,
                                      const ConquerConfig& cfg) {
    require_grid(map, instance);
    std::vector<ScoredMask> out;
    if (!instance.any()) return out;
    const auto min_patches = static_cast<std::size_t>(std::max(cfg.min_patches, 1));
    for (double theta : cfg.schedule.thetas()) {
        LevelPartition level = merge_at_threshold(map, instance, theta);
        for (auto& comp : level.components) {
            if (area(comp) < min_patches) continue;
            const bool seen = std::any_of(out.begin(), out.end(),
                                          [&](const ScoredMask& m) { return m.mask == comp; });
            if (seen) continue;
            const double conf = adjacent_pair_confidence(map, comp);
            out.push_back({std::move(comp), conf, MaskSource::conquer});
        }
    }
    return out;
}

}  // namespace ugs
