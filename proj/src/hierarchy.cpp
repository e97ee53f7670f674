#include "ugs/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ugs/error.hpp"

namespace ugs {

void validate(const HierarchyConfig& cfg) {
    auto in_unit = [](double v) { return v > 0.0 && v <= 1.0; };
    if (!in_unit(cfg.tau_area) || !in_unit(cfg.tau_overlap) || !in_unit(cfg.nms_iou) ||
        !in_unit(cfg.g_floor) || !in_unit(cfg.g_span)) {
        throw InvalidArgument("hierarchy thresholds must lie in (0,1]");
    }
    if (std::abs(cfg.g_floor + cfg.g_span - 1.0) > 1e-12) {
        throw InvalidArgument("g_floor + g_span must equal 1");
    }
}

const char* to_string(MaskLevel level) {
    switch (level) {
        case MaskLevel::instance: return "instance";
        case MaskLevel::part: return "part";
        case MaskLevel::conquer: return "conquer";
        case MaskLevel::gt: return "gt";
    }
    return "instance";
}

MaskLevel mask_level_from_string(const std::string& s) {
    if (s == "instance") return MaskLevel::instance;
    if (s == "part") return MaskLevel::part;
    if (s == "conquer") return MaskLevel::conquer;
    if (s == "gt") return MaskLevel::gt;
    throw FormatError("unknown mask level '" + s + "'");
}

std::size_t PseudoLabelSet::mask_count() const {
    std::size_t n = 0;
    for (const auto& h : hierarchies) n += 1 + h.children.size();
    return n;
}

InstanceSelection select_instances(std::span<const ScoredMask> high, std::size_t image_area,
                                   const HierarchyConfig& cfg) {
    validate(cfg);
    if (image_area == 0) throw InvalidArgument("select_instances: image area is zero");
    std::vector<std::size_t> areas(high.size());
    std::vector<bool> big(high.size());
    for (std::size_t i = 0; i < high.size(); ++i) {
        areas[i] = area(high[i].mask);
        big[i] = static_cast<double>(areas[i]) / static_cast<double>(image_area) >= cfg.tau_area;
    }
    InstanceSelection sel;
    for (std::size_t i = 0; i < high.size(); ++i) {
        bool dominant = big[i];
        for (std::size_t j = 0; dominant && j < high.size(); ++j) {
            if (j == i) continue;
            if (cfg.dominance == DominanceScope::candidates_only && !big[j]) continue;
            if (iou(high[i].mask, high[j].mask) >= cfg.tau_overlap && areas[i] < areas[j]) dominant = false;
        }
        (dominant ? sel.instances : sel.rest).push_back(high[i]);
    }
    return sel;
}

std::vector<std::vector<ScoredMask>> assign_parts(std::span<const ScoredMask> rest,
                                                  std::span<const ScoredMask> instances,
                                                  const HierarchyConfig& cfg) {
    std::vector<std::vector<ScoredMask>> parts(instances.size());
    for (const auto& m : rest) {
        if (!m.mask.any()) continue;
        double best = -1.0;
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < instances.size(); ++i) {
            const double score = cfg.part_metric == PartMetric::containment
                                     ? containment(m.mask, instances[i].mask)
                                     : iou(m.mask, instances[i].mask);
            if (score > best) {
                best = score;
                best_idx = i;
            }
        }
        if (!instances.empty() && best > cfg.tau_overlap) parts[best_idx].push_back(m);
    }
    return parts;
}

std::vector<ScoredMask> fuse_masks(const ScoredMask& root, std::span<const ScoredMask> parts,
                                   std::span<const ScoredMask> conquer, const HierarchyConfig& cfg) {
    std::vector<ScoredMask> pool;
    pool.reserve(1 + parts.size() + conquer.size());
    pool.push_back(root);
    pool.insert(pool.end(), parts.begin(), parts.end());
    pool.insert(pool.end(), conquer.begin(), conquer.end());
    const auto kept = nms(pool, cfg.nms_iou, std::size_t{0});
    std::vector<ScoredMask> out;
    out.reserve(kept.size());
    for (std::size_t k : kept) out.push_back(pool[k]);
    return out;
}

double granularity_score(double area, double area_min, double area_max, double g_floor, double g_span) {
    const double lo = std::sqrt(area_min);
    const double hi = std::sqrt(area_max);
    if (hi == lo) return g_floor + g_span;
    return (std::sqrt(area) - lo) / (hi - lo) * g_span + g_floor;
}

std::vector<GranularMask> assign_granularity(std::span<const ScoredMask> final_masks, int instance_id,
                                             const HierarchyConfig& cfg) {
    if (final_masks.empty()) throw InvalidArgument("assign_granularity: no masks");
    std::vector<double> areas;
    areas.reserve(final_masks.size());
    for (const auto& m : final_masks) {
        const auto a = area(m.mask);
        if (a == 0) throw InvalidArgument("assign_granularity: zero-area mask");
        areas.push_back(static_cast<double>(a));
    }
    const auto [amin, amax] = std::minmax_element(areas.begin(), areas.end());
    std::vector<GranularMask> out;
    out.reserve(final_masks.size());
    for (std::size_t i = 0; i < final_masks.size(); ++i) {
        const auto& m = final_masks[i];
        MaskLevel level = MaskLevel::instance;
        if (i > 0) {
            switch (m.source) {
                case MaskSource::divide: level = MaskLevel::part; break;
                case MaskSource::conquer: level = MaskLevel::conquer; break;
                case MaskSource::gt: level = MaskLevel::gt; break;
            }
        }
        out.push_back({m.mask, granularity_score(areas[i], *amin, *amax, cfg.g_floor, cfg.g_span),
                       m.confidence, instance_id, level});
    }
    return out;
}

std::vector<ScoredMask> merge_gt(std::span<const ScoredMask> divide_masks, std::span<const BinaryMask> gt) {
    std::vector<ScoredMask> out(divide_masks.begin(), divide_masks.end());
    for (const auto& g : gt) {
        if (!out.empty() && !g.same_shape(out.front().mask)) {
            throw DimensionError("merge_gt: GT mask resolution differs from the divide masks");
        }
        auto same = std::find_if(out.begin(), out.end(), [&](const ScoredMask& m) { return m.mask == g; });
        if (same != out.end()) {
            same->confidence = 1.0;
            same->source = MaskSource::gt;
        } else {
            out.push_back({g, 1.0, MaskSource::gt});
        }
    }
    return out;
}

PseudoLabelResult build_pseudolabels(const PatchFeatureMap& map, const std::string& image_id,
                                     const PipelineConfig& cfg, std::span<const BinaryMask> gt_masks) {
    validate(cfg.hierarchy);
    const int ps = cfg.divide.patch_size;
    PseudoLabelResult result;
    result.labels.image_id = image_id;
    result.labels.height = map.height * ps;
    result.labels.width = map.width * ps;

    for (const auto& g : gt_masks) {
        if (g.height() != result.labels.height || g.width() != result.labels.width) {
            throw DimensionError("build_pseudolabels: GT masks must match the pixel grid");
        }
    }

    const auto divided = maskcut(map, cfg.divide);
    auto high = filter_confident(divided, cfg.divide.tau_conf);
    if (!gt_masks.empty()) high = merge_gt(high, gt_masks);

    const std::size_t image_area = static_cast<std::size_t>(result.labels.height) *
                                   static_cast<std::size_t>(result.labels.width);
    const auto selection = select_instances(high, image_area, cfg.hierarchy);
    const auto parts = assign_parts(selection.rest, selection.instances, cfg.hierarchy);

    for (std::size_t i = 0; i < selection.instances.size(); ++i) {
        const ScoredMask& root = selection.instances[i];
        const BinaryMask patch_instance = downsample_majority(root.mask, ps);

        std::vector<ScoredMask> conquered;
        for (auto& cm : conquer_masks(map, patch_instance, cfg.conquer)) {
            BinaryMask pixel = upsample(cm.mask, ps) & root.mask;
            if (!pixel.any()) continue;
            conquered.push_back({std::move(pixel), cm.confidence, MaskSource::conquer});
        }
        // Parts are clipped to their instance so every child lies inside its root.
        std::vector<ScoredMask> clipped;
        for (const auto& p : parts[i]) {
            BinaryMask inside = p.mask & root.mask;
            if (inside.any()) clipped.push_back({std::move(inside), p.confidence, p.source});
        }

        const auto final_masks = fuse_masks(root, clipped, conquered, cfg.hierarchy);
        auto scored = assign_granularity(final_masks, static_cast<int>(i), cfg.hierarchy);
        MaskHierarchy h;
        h.instance_id = static_cast<int>(i);
        h.root = std::move(scored.front());
        h.children.assign(std::make_move_iterator(scored.begin() + 1), std::make_move_iterator(scored.end()));
        result.labels.hierarchies.push_back(std::move(h));
    }
    result.status = result.labels.hierarchies.empty() ? "empty" : "ok";
    return result;
}

std::optional<GranularMask> query_mask(const PseudoLabelSet& labels, int x, int y, double g,
                                       std::span<const Click> clicks) {
    if (x < 0 || y < 0 || x >= labels.width || y >= labels.height) {
        throw InvalidArgument("query point (" + std::to_string(x) + "," + std::to_string(y) +
                              ") is outside the image");
    }
    if (!(g >= 0.1 && g <= 1.0)) throw InvalidArgument("granularity must lie in [0.1, 1.0]");
    for (const auto& c : clicks) {
        if (c.x < 0 || c.y < 0 || c.x >= labels.width || c.y >= labels.height) {
            throw InvalidArgument("click outside the image");
        }
    }

    struct Candidate {
        const GranularMask* mask;
        std::size_t ordinal;
        std::size_t violations;
        std::size_t area;
    };
    std::vector<Candidate> candidates;
    std::size_t ordinal = 0;
    auto consider = [&](const GranularMask& m) {
        const std::size_t ord = ordinal++;
        if (!m.mask.get(y, x)) return;
        std::size_t violations = 0;
        for (const auto& c : clicks) {
            if (m.mask.get(c.y, c.x) != c.positive) ++violations;
        }
        candidates.push_back({&m, ord, violations, area(m.mask)});
    };
    for (const auto& h : labels.hierarchies) {
        consider(h.root);
        for (const auto& c : h.children) consider(c);
    }
    if (candidates.empty()) return std::nullopt;

    const auto best = std::min_element(candidates.begin(), candidates.end(), [&](const Candidate& a,
                                                                                 const Candidate& b) {
        if (a.violations != b.violations) return a.violations < b.violations;
        const double da = std::abs(g - a.mask->granularity);
        const double db = std::abs(g - b.mask->granularity);
        if (da != db) return da < db;
        if (a.area != b.area) return a.area < b.area;
        if (a.mask->instance_id != b.mask->instance_id) return a.mask->instance_id < b.mask->instance_id;
        return a.ordinal < b.ordinal;
    });
    return *best->mask;
}

std::vector<ScoredMask> aggregate_proposals(const PseudoLabelSet& labels, std::span<const double> g_grid,
                                            double grid_step, double conf_floor, std::size_t max_count) {
    const double window = 0.5 * grid_step + 1e-9;
    std::vector<ScoredMask> out;
    auto consider = [&](const GranularMask& m) {
        const bool near = std::any_of(g_grid.begin(), g_grid.end(),
                                      [&](double g) { return std::abs(m.granularity - g) <= window; });
        if (!near || m.confidence < conf_floor) return;
        auto dup = std::find_if(out.begin(), out.end(), [&](const ScoredMask& s) { return s.mask == m.mask; });
        if (dup != out.end()) {
            dup->confidence = std::max(dup->confidence, m.confidence);
            return;
        }
        out.push_back({m.mask, m.confidence, m.level == MaskLevel::conquer ? MaskSource::conquer : MaskSource::divide});
    };
    for (const auto& h : labels.hierarchies) {
        consider(h.root);
        for (const auto& c : h.children) consider(c);
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const ScoredMask& a, const ScoredMask& b) { return a.confidence > b.confidence; });
    if (out.size() > max_count) out.resize(max_count);
    return out;
}

std::vector<std::string> check_invariants(const PseudoLabelSet& labels, double tau_overlap) {
    std::vector<std::string> problems;
    auto where = [](const MaskHierarchy& h, std::size_t child) {
        return "hierarchy " + std::to_string(h.instance_id) + " child " + std::to_string(child);
    };
    auto check_shape = [&](const GranularMask& m, const std::string& at) {
        if (m.mask.height() != labels.height || m.mask.width() != labels.width) {
            problems.push_back(at + ": mask size differs from image size");
            return false;
        }
        if (!(m.granularity >= 0.1 && m.granularity <= 1.0)) problems.push_back(at + ": granularity out of range");
        if (!std::isfinite(m.confidence)) problems.push_back(at + ": non-finite confidence");
        return true;
    };
    for (const auto& h : labels.hierarchies) {
        const std::string root_at = "hierarchy " + std::to_string(h.instance_id) + " root";
        if (!check_shape(h.root, root_at)) continue;
        if (h.root.granularity != 1.0) problems.push_back(root_at + ": granularity is not 1.0");
        if (!h.root.mask.any()) {
            problems.push_back(root_at + ": empty mask");
            continue;
        }
        const auto root_area = area(h.root.mask);
        for (std::size_t i = 0; i < h.children.size(); ++i) {
            const auto& c = h.children[i];
            if (!check_shape(c, where(h, i))) continue;
            if (!c.mask.any()) {
                problems.push_back(where(h, i) + ": empty mask");
                continue;
            }
            if (containment(c.mask, h.root.mask) < tau_overlap) {
                problems.push_back(where(h, i) + ": containment in root below tau_overlap");
            }
            if (area(c.mask) > root_area) problems.push_back(where(h, i) + ": larger than its root");
        }
        for (std::size_t i = 0; i < h.children.size(); ++i) {
            for (std::size_t j = 0; j < h.children.size(); ++j) {
                const auto& a = h.children[i];
                const auto& b = h.children[j];
                if (a.mask.any() && b.mask.any() && area(a.mask) < area(b.mask) && a.granularity > b.granularity) {
                    problems.push_back(where(h, i) + ": granularity not monotone in area");
                }
            }
        }
    }
    return problems;
}

}  // namespace ugs
