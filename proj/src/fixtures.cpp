#include "ugs/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ugs::fixtures {

namespace {

SynthRegion rect(int top, int left, int bottom, int right, int parent = -1,
                 std::optional<double> parent_cosine = std::nullopt) {
    SynthRegion r;
    r.top = top;
    r.left = left;
    r.bottom = bottom;
    r.right = right;
    r.parent = parent;
    r.parent_cosine = parent_cosine;
    return r;
}

int uniform(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Mutually orthogonal unit directions from a fixed seed.
std::vector<std::vector<float>> palette(int count, int dim) {
    std::mt19937_64 rng(0x5eed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < count) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (double& x : v) x = gauss(rng);
        for (const auto& b : basis) {
            double d = 0.0;
            for (int k = 0; k < dim; ++k) d += v[static_cast<std::size_t>(k)] * b[static_cast<std::size_t>(k)];
            for (int k = 0; k < dim; ++k) v[static_cast<std::size_t>(k)] -= d * b[static_cast<std::size_t>(k)];
        }
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-6) continue;
        for (double& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    std::vector<std::vector<float>> out;
    for (const auto& b : basis) out.emplace_back(b.begin(), b.end());
    return out;
}

}  // namespace

SynthSpec three_instance_spec(std::uint64_t seed, double noise_sigma) {
    SynthSpec s;
    s.height = 32;
    s.width = 32;
    s.dim = 32;
    s.seed = seed;
    s.noise_sigma = noise_sigma;
    s.separation_deg = 83.0;

    // Instance 0: rectangle split into two halves.
    s.regions.push_back(rect(2, 2, 14, 16));
    s.regions.push_back(rect(2, 2, 14, 9, 0, 0.8));
    s.regions.push_back(rect(2, 9, 14, 16, 0, 0.8));

    // Instance 1: rectangle with an inner square.
    s.regions.push_back(rect(18, 3, 30, 14));
    s.regions.push_back(rect(21, 6, 27, 11, 3, 0.75));

    // Instance 2: ellipse with two inner rectangles.
    SynthRegion ellipse = rect(3, 18, 29, 31);
    ellipse.shape = RegionShape::ellipse;
    s.regions.push_back(ellipse);
    s.regions.push_back(rect(8, 22, 13, 27, 5, 0.7));
    s.regions.push_back(rect(18, 22, 23, 27, 5, 0.7));
    return s;
}

SynthSpec many_parts_spec(int index, std::uint64_t seed) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(index));
    SynthSpec s;
    s.height = 32;
    s.width = 32;
    s.dim = 32;
    s.seed = seed + static_cast<std::uint64_t>(index);
    s.noise_sigma = 0.02;
    s.separation_deg = 83.0;

    // Instances occupy disjoint horizontal bands.
    const int instances = uniform(rng, 2, 3);
    const int band = s.height / instances;
    for (int i = 0; i < instances; ++i) {
        const int top = i * band + 1;
        const int bottom = (i + 1) * band - 1;
        const int left = uniform(rng, 1, 4);
        const int right = s.width - uniform(rng, 1, 4);
        const int parent = static_cast<int>(s.regions.size());
        s.regions.push_back(rect(top, left, bottom, right));

        // Small parts on a coarse lattice inside the instance, with a one-patch gutter.
        for (int r = top + 1; r + 3 <= bottom - 1; r += 4) {
            for (int c = left + 1; c + 3 <= right - 1; c += 4) {
                if (uniform(rng, 0, 3) == 0) continue;
                const int side = uniform(rng, 2, 3);
                s.regions.push_back(rect(r, c, r + side, c + side, parent, 0.7));
            }
        }
    }
    return s;
}

NestedSquares nested_squares(int grid, int dim, std::uint64_t seed, double noise_sigma) {
    constexpr int kMaxLevels = 4;
    static const auto kPalette = palette(kMaxLevels + 1, 16);
    std::mt19937_64 rng(seed);

    SynthSpec s;
    s.height = grid;
    s.width = grid;
    s.dim = dim;
    s.seed = seed;
    s.noise_sigma = noise_sigma;
    auto direction = [&](int slot) {
        std::vector<float> d(static_cast<std::size_t>(dim), 0.0F);
        const auto& p = kPalette[static_cast<std::size_t>(slot)];
        std::copy_n(p.begin(), std::min<std::size_t>(p.size(), d.size()), d.begin());
        return d;
    };
    s.background_direction = direction(0);

    const int levels = uniform(rng, 2, kMaxLevels);
    int side = uniform(rng, grid * 45 / 100, grid * 85 / 100);
    int top = uniform(rng, 0, grid - side);
    int left = uniform(rng, 0, grid - side);
    int built = 0;
    for (int level = 0; level < levels; ++level) {
        SynthRegion r = rect(top, left, top + side, left + side, level - 1);
        r.direction = direction(level + 1);
        s.regions.push_back(r);
        ++built;
        const int next = static_cast<int>(std::lround(side * std::uniform_real_distribution<double>(0.45, 0.7)(rng)));
        if (next < 2 || next > side - 2) break;
        top = uniform(rng, top + 1, top + side - 1 - next);
        left = uniform(rng, left + 1, left + side - 1 - next);
        side = next;
    }
    return {synth_features(s), built};
}

PseudoLabelSet gt_label_set(const SynthResult& synth, const std::string& image_id) {
    PseudoLabelSet labels;
    labels.image_id = image_id;
    labels.height = synth.map.height;
    labels.width = synth.map.width;
    auto root_of = [&](int r) {
        while (synth.parents[static_cast<std::size_t>(r)] >= 0) r = synth.parents[static_cast<std::size_t>(r)];
        return r;
    };
    const int count = static_cast<int>(synth.gt_masks.size());
    for (int r = 0; r < count; ++r) {
        if (synth.parents[static_cast<std::size_t>(r)] >= 0) continue;
        std::vector<ScoredMask> members{{synth.gt_masks[static_cast<std::size_t>(r)], 1.0, MaskSource::gt}};
        for (int c = 0; c < count; ++c) {
            if (c != r && root_of(c) == r) members.push_back({synth.gt_masks[static_cast<std::size_t>(c)], 1.0, MaskSource::gt});
        }
        const int id = static_cast<int>(labels.hierarchies.size());
        auto scored = assign_granularity(members, id);
        MaskHierarchy h;
        h.instance_id = id;
        h.root = std::move(scored.front());
        h.children.assign(std::make_move_iterator(scored.begin() + 1), std::make_move_iterator(scored.end()));
        labels.hierarchies.push_back(std::move(h));
    }
    return labels;
}

}  // namespace ugs::fixtures
