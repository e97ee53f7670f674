#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ugs/conquer.hpp"
#include "ugs/divide.hpp"
#include "ugs/features.hpp"
#include "ugs/mask.hpp"

namespace ugs {

// How a leftover mask is tested against an instance during part assignment.
enum class PartMetric { containment, iou };

// Which masks an instance candidate must dominate (Stage 2, criterion ii).
enum class DominanceScope { all_high, candidates_only };

struct HierarchyConfig {
    double tau_area = 0.02;
    double tau_overlap = 0.8;
    double nms_iou = 0.9;
    double g_floor = 0.1;
    double g_span = 0.9;
    PartMetric part_metric = PartMetric::containment;
    DominanceScope dominance = DominanceScope::all_high;
};

void validate(const HierarchyConfig& cfg);

enum class MaskLevel { instance, part, conquer, gt };

const char* to_string(MaskLevel level);
MaskLevel mask_level_from_string(const std::string& s);

// In memory the mask is kept dense; files and HTTP payloads carry its RLE.
struct GranularMask {
    BinaryMask mask;
    double granularity = 1.0;
    double confidence = 0.0;
    int instance_id = 0;
    MaskLevel level = MaskLevel::instance;
};

struct MaskHierarchy {
    int instance_id = 0;
    GranularMask root;
    std::vector<GranularMask> children;
};

struct PseudoLabelSet {
    std::string image_id;
    int height = 0;
    int width = 0;
    std::vector<MaskHierarchy> hierarchies;

    std::size_t mask_count() const;
};

struct InstanceSelection {
    std::vector<ScoredMask> instances;
    std::vector<ScoredMask> rest;
};

// Stage 2: area-ratio floor plus dominance over heavily overlapping masks.
InstanceSelection select_instances(std::span<const ScoredMask> high, std::size_t image_area,
                                   const HierarchyConfig& cfg);

// Each leftover mask goes to the instance it overlaps most (strictly above tau_overlap)
// or is dropped. Result is indexed like `instances`.
std::vector<std::vector<ScoredMask>> assign_parts(std::span<const ScoredMask> rest,
                                                  std::span<const ScoredMask> instances,
                                                  const HierarchyConfig& cfg);

// NMS over root + parts + conquer masks with the root pinned first. The root is
// element 0 of the result.
std::vector<ScoredMask> fuse_masks(const ScoredMask& root, std::span<const ScoredMask> parts,
                                   std::span<const ScoredMask> conquer, const HierarchyConfig& cfg);

// Relative-area granularity: ((sqrt(A) - sqrt(Amin)) / (sqrt(Amax) - sqrt(Amin))) * span + floor.
double granularity_score(double area, double area_min, double area_max, double g_floor = 0.1,
                         double g_span = 0.9);

// Scores one instance's final masks (element 0 is the root).
std::vector<GranularMask> assign_granularity(std::span<const ScoredMask> final_masks, int instance_id,
                                             const HierarchyConfig& cfg = {});

// GT masks join at confidence 1.0; a GT bit-equal to a divide mask replaces it in place.
std::vector<ScoredMask> merge_gt(std::span<const ScoredMask> divide_masks, std::span<const BinaryMask> gt);

struct PipelineConfig {
    DivideConfig divide;
    ConquerConfig conquer;
    HierarchyConfig hierarchy;
};

struct PseudoLabelResult {
    PseudoLabelSet labels;
    // "ok", or "empty" when no instance survived.
    std::string status;
};

// maskcut -> filter -> (GT fusion) -> instances -> parts -> conquer -> NMS -> granularity.
PseudoLabelResult build_pseudolabels(const PatchFeatureMap& map, const std::string& image_id,
                                     const PipelineConfig& cfg, std::span<const BinaryMask> gt_masks = {});

struct Click {
    int x = 0;
    int y = 0;
    bool positive = true;

    friend bool operator==(const Click&, const Click&) = default;
};

// Nearest-granularity mask containing the point, refined by extra clicks.
std::optional<GranularMask> query_mask(const PseudoLabelSet& labels, int x, int y, double g,
                                       std::span<const Click> clicks = {});

// Masks whose granularity sits within half a grid step of some grid value,
// deduplicated, filtered by confidence and capped at max_count by confidence.
std::vector<ScoredMask> aggregate_proposals(const PseudoLabelSet& labels, std::span<const double> g_grid,
                                            double grid_step, double conf_floor,
                                            std::size_t max_count = 1000);

// Checks the structural invariants of a label set; returns one message per violation.
std::vector<std::string> check_invariants(const PseudoLabelSet& labels, double tau_overlap = 0.8);

}  // namespace ugs
