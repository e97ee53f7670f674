#include "ugs/features.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "ugs/error.hpp"

namespace ugs {

namespace {

constexpr std::array<char, 4> kMagic{'U', 'G', 'F', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 24;
constexpr double kUnitTolerance = 1e-5;

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

void put_u32(std::vector<char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return v;
}

double norm_of(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

}  // namespace

void validate(const PatchFeatureMap& map) {
    if (map.height < 1 || map.width < 1 || map.dim < 1) {
        throw FormatError("feature map dimensions must be positive");
    }
    const std::size_t expected = static_cast<std::size_t>(map.height) *
                                 static_cast<std::size_t>(map.width) *
                                 static_cast<std::size_t>(map.dim);
    if (map.data.size() != expected) {
        throw FormatError("feature payload holds " + std::to_string(map.data.size()) +
                          " values, expected " + std::to_string(expected));
    }
    for (float v : map.data) {
        if (!std::isfinite(v)) throw NumericalError("feature map contains non-finite values");
    }
    if (map.normalized) {
        for (int p = 0; p < map.patch_count(); ++p) {
            const double n = norm_of(map.patch(p));
            if (std::abs(n - 1.0) > kUnitTolerance) {
                throw FormatError("patch " + std::to_string(p) + " is flagged normalized but has norm " +
                                  std::to_string(n));
            }
        }
    }
}

void normalize(PatchFeatureMap& map) {
    for (int p = 0; p < map.patch_count(); ++p) {
        auto v = map.patch(p);
        const double n = norm_of(v);
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw NumericalError("patch " + std::to_string(p) + " cannot be normalized");
        }
        for (float& x : v) x = static_cast<float>(static_cast<double>(x) / n);
    }
    map.normalized = true;
}

PatchFeatureMap read_features(const std::filesystem::path& path, ReadOptions options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open feature file " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < kHeaderBytes) throw FormatError(path.string() + ": truncated header");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw FormatError(path.string() + ": bad magic, expected UGF1");
    }
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
    }
    PatchFeatureMap map;
    map.height = static_cast<int>(get_u32(bytes.data() + 8));
    map.width = static_cast<int>(get_u32(bytes.data() + 12));
    map.dim = static_cast<int>(get_u32(bytes.data() + 16));
    map.normalized = (get_u32(bytes.data() + 20) & 1U) != 0;
    if (map.height < 1 || map.width < 1 || map.dim < 1) {
        throw FormatError(path.string() + ": zero dimension in header");
    }

    const std::size_t count = static_cast<std::size_t>(map.height) *
                              static_cast<std::size_t>(map.width) *
                              static_cast<std::size_t>(map.dim);
    if (bytes.size() != kHeaderBytes + count * 4) {
        throw FormatError(path.string() + ": payload is " + std::to_string(bytes.size() - kHeaderBytes) +
                          " bytes, expected " + std::to_string(count * 4));
    }
    map.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        map.data[i] = std::bit_cast<float>(get_u32(bytes.data() + kHeaderBytes + 4 * i));
    }
    validate(map);
    if (options.normalize && !map.normalized) normalize(map);
    return map;
}

void write_features(const PatchFeatureMap& map, const std::filesystem::path& path) {
    validate(map);
    std::vector<char> buf;
    buf.reserve(kHeaderBytes + map.data.size() * 4);
    buf.insert(buf.end(), kMagic.begin(), kMagic.end());
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<std::uint32_t>(map.height));
    put_u32(buf, static_cast<std::uint32_t>(map.width));
    put_u32(buf, static_cast<std::uint32_t>(map.dim));
    put_u32(buf, map.normalized ? 1U : 0U);
    for (float v : map.data) put_u32(buf, std::bit_cast<std::uint32_t>(v));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

double cosine(const PatchFeatureMap& map, int p, int q) {
    if (p < 0 || q < 0 || p >= map.patch_count() || q >= map.patch_count()) {
        throw InvalidArgument("cosine: patch index out of range");
    }
    const auto a = map.patch(p);
    const auto b = map.patch(q);
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (int i = 0; i < map.dim; ++i) {
        const double x = a[static_cast<std::size_t>(i)];
        const double y = b[static_cast<std::size_t>(i)];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

BinaryMask region_mask(const SynthRegion& region, int height, int width) {
    BinaryMask m(height, width);
    if (region.shape == RegionShape::rectangle) {
        m.fill_rect(region.top, region.left, region.bottom, region.right);
        return m;
    }
    const double cy = 0.5 * (region.top + region.bottom);
    const double cx = 0.5 * (region.left + region.right);
    const double ry = 0.5 * (region.bottom - region.top);
    const double rx = 0.5 * (region.right - region.left);
    if (ry <= 0.0 || rx <= 0.0) return m;
    for (int r = std::max(region.top, 0); r < std::min(region.bottom, height); ++r) {
        for (int c = std::max(region.left, 0); c < std::min(region.right, width); ++c) {
            const double dy = (r + 0.5 - cy) / ry;
            const double dx = (c + 0.5 - cx) / rx;
            if (dy * dy + dx * dx <= 1.0) m.set(r, c);
        }
    }
    return m;
}

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void normalize_in_place(Vec& v) {
    const double n = std::sqrt(dot(v, v));
    for (double& x : v) x /= n;
}

Vec random_unit(std::mt19937_64& rng, int dim) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec v(static_cast<std::size_t>(dim));
    double n = 0.0;
    do {
        for (double& x : v) x = gauss(rng);
        n = std::sqrt(dot(v, v));
    } while (n < 1e-12);
    for (double& x : v) x /= n;
    return v;
}

int top_level(const std::vector<int>& parents, int i) {
    while (parents[static_cast<std::size_t>(i)] >= 0) i = parents[static_cast<std::size_t>(i)];
    return i;
}

}  // namespace

SynthResult synth_features(const SynthSpec& spec) {
    if (spec.height < 1 || spec.width < 1 || spec.dim < 2) {
        throw InvalidArgument("synth: grid must be at least 1x1 with dim >= 2");
    }
    if (!(spec.noise_sigma >= 0.0)) throw InvalidArgument("synth: noise_sigma must be >= 0");

    const std::size_t n_regions = spec.regions.size();
    SynthResult result;
    result.parents.reserve(n_regions);
    for (std::size_t i = 0; i < n_regions; ++i) {
        const auto& reg = spec.regions[i];
        if (reg.parent >= static_cast<int>(i)) {
            throw InvalidArgument("synth: region " + std::to_string(i) + " must follow its parent");
        }
        if (reg.parent_cosine && (reg.parent < 0 || *reg.parent_cosine > std::cos(std::numbers::pi / 6) + 1e-12 ||
                                  *reg.parent_cosine < -1.0)) {
            throw InvalidArgument("synth: parent_cosine needs a parent and must keep 30 degrees separation");
        }
        result.parents.push_back(reg.parent);
        result.gt_masks.push_back(region_mask(reg, spec.height, spec.width));
        if (!result.gt_masks.back().any()) {
            throw InvalidArgument("synth: region " + std::to_string(i) + " covers no patches");
        }
    }

    auto is_ancestor = [&](int anc, int node) {
        for (int p = result.parents[static_cast<std::size_t>(node)]; p >= 0;
             p = result.parents[static_cast<std::size_t>(p)]) {
            if (p == anc) return true;
        }
        return false;
    };

    // Regions must be nested (consistently with the tree) or disjoint.
    for (std::size_t i = 0; i < n_regions; ++i) {
        for (std::size_t j = i + 1; j < n_regions; ++j) {
            const auto& a = result.gt_masks[i];
            const auto& b = result.gt_masks[j];
            const std::size_t inter = intersection_area(a, b);
            if (inter == 0) continue;
            const bool b_in_a = inter == area(b);
            if (!(b_in_a && is_ancestor(static_cast<int>(i), static_cast<int>(j)))) {
                throw InvalidArgument("synth: regions " + std::to_string(i) + " and " + std::to_string(j) +
                                      " overlap without nesting");
            }
        }
        if (result.parents[i] >= 0) {
            const auto& parent = result.gt_masks[static_cast<std::size_t>(result.parents[i])];
            if (intersection_area(result.gt_masks[i], parent) != area(result.gt_masks[i])) {
                throw InvalidArgument("synth: region " + std::to_string(i) + " leaves its parent");
            }
        }
    }

    std::mt19937_64 rng(spec.seed);
    const double related_max_cos = std::cos(std::numbers::pi / 6);
    const double unrelated_max_cos =
        std::cos(std::max(spec.separation_deg, 30.0) * std::numbers::pi / 180.0);

    // Index 0 is the background, region i lives at i + 1.
    std::vector<Vec> dirs;
    std::vector<int> trees;  // top-level region per direction, -1 for background
    auto accept = [&](const Vec& cand, int tree, int skip) {
        for (std::size_t k = 0; k < dirs.size(); ++k) {
            if (static_cast<int>(k) == skip) continue;
            const double limit = (tree >= 0 && trees[k] == tree) ? related_max_cos : unrelated_max_cos;
            if (dot(cand, dirs[k]) > limit + 1e-12) return false;
        }
        return true;
    };
    constexpr int kMaxTries = 200000;

    if (spec.background_direction) {
        Vec v(spec.background_direction->begin(), spec.background_direction->end());
        if (static_cast<int>(v.size()) != spec.dim) throw InvalidArgument("synth: background direction dim");
        normalize_in_place(v);
        dirs.push_back(v);
    } else {
        dirs.push_back(random_unit(rng, spec.dim));
    }
    trees.push_back(-1);

    for (std::size_t i = 0; i < n_regions; ++i) {
        const auto& reg = spec.regions[i];
        const int tree = top_level(result.parents, static_cast<int>(i));
        if (reg.direction) {
            Vec v(reg.direction->begin(), reg.direction->end());
            if (static_cast<int>(v.size()) != spec.dim) throw InvalidArgument("synth: region direction dim");
            normalize_in_place(v);
            dirs.push_back(v);
            trees.push_back(tree);
            continue;
        }
        bool placed = false;
        for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
            Vec cand;
            int skip = -1;
            if (reg.parent_cosine) {
                const Vec& pd = dirs[static_cast<std::size_t>(reg.parent) + 1];
                Vec u = random_unit(rng, spec.dim);
                const double proj = dot(u, pd);
                for (std::size_t k = 0; k < u.size(); ++k) u[k] -= proj * pd[k];
                const double un = std::sqrt(dot(u, u));
                if (un < 1e-9) continue;
                const double c = *reg.parent_cosine;
                const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
                cand.resize(u.size());
                for (std::size_t k = 0; k < u.size(); ++k) cand[k] = c * pd[k] + s * u[k] / un;
                skip = reg.parent + 1;
            } else {
                cand = random_unit(rng, spec.dim);
            }
            if (accept(cand, tree, skip)) {
                dirs.push_back(std::move(cand));
                trees.push_back(tree);
                placed = true;
            }
        }
        if (!placed) {
            throw InvalidArgument("synth: could not place a direction for region " + std::to_string(i) +
                                  " under the separation constraints");
        }
    }

    // Innermost owner per patch: regions later in the list are deeper or disjoint.
    const int n = spec.height * spec.width;
    std::vector<int> owner(static_cast<std::size_t>(n), 0);
    for (std::size_t i = 0; i < n_regions; ++i) {
        const auto& m = result.gt_masks[i];
        for (int p = 0; p < n; ++p) {
            if (m.test(static_cast<std::size_t>(p))) {
                const int cur = owner[static_cast<std::size_t>(p)];
                if (cur == 0 || is_ancestor(cur - 1, static_cast<int>(i))) {
                    owner[static_cast<std::size_t>(p)] = static_cast<int>(i) + 1;
                }
            }
        }
    }

    PatchFeatureMap& map = result.map;
    map.height = spec.height;
    map.width = spec.width;
    map.dim = spec.dim;
    map.data.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(spec.dim));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec v(static_cast<std::size_t>(spec.dim));
    for (int p = 0; p < n; ++p) {
        const Vec& base = dirs[static_cast<std::size_t>(owner[static_cast<std::size_t>(p)])];
        for (std::size_t k = 0; k < v.size(); ++k) {
            v[k] = base[k] + (spec.noise_sigma > 0.0 ? spec.noise_sigma * gauss(rng) : 0.0);
        }
        normalize_in_place(v);
        auto out = map.patch(p);
        for (std::size_t k = 0; k < v.size(); ++k) out[k] = static_cast<float>(v[k]);
    }
    // Renormalize in float so the stored map meets the unit-norm tolerance exactly.
    normalize(map);

    auto to_float = [](const Vec& d) { return std::vector<float>(d.begin(), d.end()); };
    result.background_direction = to_float(dirs[0]);
    for (std::size_t i = 1; i < dirs.size(); ++i) result.directions.push_back(to_float(dirs[i]));
    return result;
}

}  // namespace ugs
