#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ugs/hierarchy.hpp"
#include "ugs/label_io.hpp"
#include "ugs/mask.hpp"

namespace ugs {

// What a segmenter is told about the image under evaluation. `instance` is the index
// of the GT mask being evaluated; only oracle test doubles look at it.
struct ImageRef {
    std::string image_id;
    int height = 0;
    int width = 0;
    std::filesystem::path features;
    std::size_t instance = 0;
};

// Promptable segmenter. Implementations must be deterministic and safe to call
// concurrently from several threads.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual BinaryMask predict(const ImageRef& image, std::span<const Click> clicks, double g) const = 0;
};

// Returns the GT mask the session is evaluating, regardless of clicks and g.
class OracleSegmenter final : public Segmenter {
public:
    void add(const std::string& image_id, std::vector<BinaryMask> gts);
    BinaryMask predict(const ImageRef& image, std::span<const Click> clicks, double g) const override;

private:
    std::map<std::string, std::vector<BinaryMask>> gts_;
};

// Always predicts nothing.
class EmptySegmenter final : public Segmenter {
public:
    BinaryMask predict(const ImageRef& image, std::span<const Click> clicks, double g) const override;
};

// Answers from stored pseudo-label hierarchies via query_mask.
class HierarchySegmenter final : public Segmenter {
public:
    void add(PseudoLabelSet labels);
    // Loads every label file in `dir` keyed by its image_id.
    static HierarchySegmenter from_dir(const std::filesystem::path& dir);
    BinaryMask predict(const ImageRef& image, std::span<const Click> clicks, double g) const override;

private:
    std::map<std::string, PseudoLabelSet> labels_;
};

// Interior point maximizing the city-block distance to the complement; ties in scan order.
Click initial_click(const BinaryMask& gt);

// Click at the interior of the largest error region (false negatives give positive clicks).
Click next_click(const BinaryMask& pred, const BinaryMask& gt);

struct ClickSession {
    std::vector<Click> clicks;
    std::vector<double> ious;
    int noc = 0;
    bool failed = false;
    double g_used = 0.0;

    double final_iou() const { return ious.empty() ? 0.0 : ious.back(); }
};

ClickSession simulate_session(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt, double g,
                              double iou_target, int max_clicks = 20);

// Session with the fewest clicks over the grid; ties go to higher final IoU, then lower g.
ClickSession sweep_best(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt,
                        std::span<const double> g_grid, double iou_target, int max_clicks = 20);

// Best single-click IoU over the grid.
double one_click_iou(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt,
                     std::span<const double> g_grid);

// Parses "start:stop:step" (inclusive stop) or a comma list. Values are snapped to 1e-10.
std::vector<double> parse_grid(const std::string& text);

// Thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> recall_thresholds();

// Number of GTs matched at one IoU threshold by greedy confidence-ordered matching.
std::size_t greedy_matches(std::span<const ScoredMask> proposals, std::span<const BinaryMask> gts,
                           double threshold, std::size_t max_dets = 1000);

double average_recall(std::span<const ScoredMask> proposals, std::span<const BinaryMask> gts,
                      std::size_t max_dets = 1000);

struct ManifestItem {
    std::string image_id;
    std::filesystem::path features;
    std::filesystem::path gt_labels;
};

struct Manifest {
    std::string name;
    std::vector<ManifestItem> items;
    std::vector<double> targets = {0.8, 0.9};
};

// Paths resolve relative to the manifest's directory. Every missing file is listed in
// the thrown IoError.
Manifest load_manifest(const std::filesystem::path& path, bool check_features = true);

enum class SweepMode { per_instance, per_dataset };

struct BenchmarkConfig {
    std::vector<double> g_grid = parse_grid("0.1:1.0:0.1");
    std::optional<std::vector<double>> targets;
    int max_clicks = 20;
    SweepMode sweep_mode = SweepMode::per_instance;
    int jobs = 1;
};

struct InstanceResult {
    std::string image_id;
    std::size_t instance = 0;
    std::vector<int> noc;  // one per target
    std::vector<bool> failed;
    std::vector<double> g_used;
    double one_click_iou = 0.0;
};

struct BenchmarkReport {
    std::string dataset;
    std::vector<double> targets;
    std::vector<double> mean_noc;
    std::vector<std::size_t> failures;
    double mean_one_click_iou = 0.0;
    std::size_t instances = 0;
    std::vector<InstanceResult> per_instance;
    Json config;

    Json to_json() const;
    std::string to_table() const;
};

BenchmarkReport run_benchmark(const Segmenter& seg, const Manifest& manifest, const BenchmarkConfig& cfg);

struct ArConfig {
    std::vector<double> g_grid = parse_grid("0.1:1.0:0.1");
    double grid_step = 0.1;
    double conf_floor = 0.0;
    std::size_t max_dets = 1000;
};

struct ArReport {
    std::string dataset;
    double ar = 0.0;
    std::vector<double> recall_at;  // one per threshold
    std::size_t images = 0;
    std::size_t gt_count = 0;
    Json config;

    Json to_json() const;
    std::string to_table() const;
};

// Dataset-level AR: per threshold, total matched GT over total GT, then averaged.
// Proposals for image i come from `proposal_labels[i]` through aggregate_proposals.
ArReport run_ar(const Manifest& manifest, std::span<const PseudoLabelSet> proposal_labels, const ArConfig& cfg);

}  // namespace ugs
