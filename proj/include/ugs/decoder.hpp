#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "ugs/eval.hpp"
#include "ugs/features.hpp"
#include "ugs/mask.hpp"

namespace ugs {

struct DecoderShape {
    int d_model = 64;
    int d_fourier = 128;
    int feature_dim = 16;

    int ffn_hidden() const noexcept { return 2 * d_model; }
};

void validate(const DecoderShape& shape);

// phi(g) = [sin(2 pi f_k g)..., cos(2 pi f_k g)...] for the given frequencies.
std::vector<double> fourier_encode(double g, std::span<const double> frequencies);

// Gaussian-error linear unit and its derivative.
double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;

// One named parameter tensor inside the flat blob. Matrices are row-major with
// rows = output size, so a layer computes y = W x + b.
struct ParamBlock {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    bool trainable = true;

    std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Blocks in checkpoint order:
//   fourier.freq, point.basis (fixed); gmlp.{w1,b1,w2,b2,w3,b3}; prompt.point, prompt.mask_token;
//   image.{w,b}; self.{wq,wk,wv,wo}; t2i.{wq,wk,wv,wo}; ffn.{w1,b1,w2,b2}; i2t.{wq,wk,wv,wo};
//   out.{w1,b1,w2,b2,w3,b3}.
std::vector<ParamBlock> param_layout(const DecoderShape& shape);

class DecoderParams {
public:
    DecoderParams() = default;
    // Zero weights; Fourier and point bases are still drawn from `seed`.
    DecoderParams(const DecoderShape& shape, double sigma_f, std::uint64_t seed);
    // Random initialization of every trainable block.
    static DecoderParams init(const DecoderShape& shape, double sigma_f, std::uint64_t seed);

    const DecoderShape& shape() const noexcept { return shape_; }
    const std::vector<ParamBlock>& layout() const noexcept { return layout_; }
    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    const ParamBlock& block(const std::string& name) const;
    std::span<double> view(const std::string& name);
    std::span<const double> view(const std::string& name) const;

private:
    DecoderShape shape_;
    std::vector<ParamBlock> layout_;
    std::vector<double> values_;
};

// E_g = MLP(phi): three linear layers with GELU between them.
std::vector<double> embed_granularity(std::span<const double> phi, const DecoderParams& params);

struct DecodeOutput {
    std::vector<double> logits;  // one per patch
    std::vector<double> weight;  // w, length feature_dim
    // Image tokens after the image-to-token attention, n x d_model row-major.
    std::vector<double> image_tokens;
};

// Point (x, y) in patch coordinates. Throws NumericalError on a non-finite intermediate.
DecodeOutput decode(const PatchFeatureMap& features, int x, int y, double g, const DecoderParams& params);

// Strictly positive logits form the mask.
BinaryMask logits_to_mask(std::span<const double> logits, int height, int width);

struct LossConfig {
    double focal_weight = 20.0;
    double dice_weight = 1.0;
    double alpha = 0.25;
    double gamma = 2.0;
    double smooth = 1.0;
};

struct LossValue {
    double total = 0.0;
    double focal = 0.0;  // pixel mean
    double dice = 0.0;
    std::vector<double> grad;  // d total / d logits
};

LossValue focal_dice_loss(std::span<const double> logits, const BinaryMask& target, const LossConfig& cfg = {});

struct TrainSample {
    const PatchFeatureMap* features = nullptr;
    int x = 0;
    int y = 0;
    double g = 1.0;
    BinaryMask target;
};

// Loss of one sample and its gradient with respect to every parameter (fixed blocks get 0).
double loss_and_gradient(const DecoderParams& params, const TrainSample& sample, const LossConfig& cfg,
                         std::vector<double>& grad);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst_param;
};

// Central differences on `count` randomly chosen parameters that influence the logits.
// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const DecoderParams& params, const TrainSample& sample, double eps = 1e-4,
                           std::size_t count = 200, std::uint64_t seed = 0, const LossConfig& cfg = {},
                           double floor = 1e-7);

struct ToyImage {
    std::string image_id;
    PatchFeatureMap features;
    std::vector<BinaryMask> levels;  // outermost first
    std::vector<double> granularity;
};

struct TrainConfig {
    int epochs = 40;
    int batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    LossConfig loss;
    DecoderShape shape;
    int grid = 32;
    double sigma_f = 10.0;
    int images = 200;
    int train_images = 160;
    std::uint64_t corpus_seed = 1;
    double noise_sigma = 0.05;
    // Fraction of samples drawn at a uniform random g instead of the level's own g.
    double g_jitter = 0.5;
    int jobs = 1;
};

void validate(const TrainConfig& cfg);

// Nested-squares corpus; granularity of each level follows the relative-area score.
std::vector<ToyImage> make_toy_corpus(const TrainConfig& cfg);

struct ToyEval {
    double one_click_iou = 0.0;        // mean over all GT levels at their own g
    double monotone_fraction = 0.0;    // adjacent g pairs with non-decreasing area
    std::size_t masks = 0;
    std::size_t pairs = 0;
};

// Level containing the click whose granularity is nearest g (ties to the smaller level).
const BinaryMask& nearest_level(const ToyImage& image, const Click& click, double g);

ToyEval evaluate_toy(const DecoderParams& params, std::span<const ToyImage> images);

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double val_one_click_iou = 0.0;
    double val_monotone_fraction = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    DecoderParams params;
    std::vector<EpochMetrics> metrics;
    bool diverged = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Adam over fixed-order minibatches. Per-sample gradients are reduced in sample order,
// so results do not depend on cfg.jobs.
TrainResult train_toy(const TrainConfig& cfg, const EpochCallback& on_epoch = {});
TrainResult train_toy(const TrainConfig& cfg, std::span<const ToyImage> train, std::span<const ToyImage> held_out,
                      const EpochCallback& on_epoch = {});

std::string metrics_json_line(const EpochMetrics& m);

// "UGTD" | version u32 | d_model u32 | d_fourier u32 | D u32 | float32 blob in layout order.
void save_checkpoint(const DecoderParams& params, const std::filesystem::path& path);
DecoderParams load_checkpoint(const std::filesystem::path& path);

// Predicts from the first positive click; further clicks are ignored.
class ToyDecoderSegmenter final : public Segmenter {
public:
    explicit ToyDecoderSegmenter(DecoderParams params) : params_(std::move(params)) {}
    BinaryMask predict(const ImageRef& image, std::span<const Click> clicks, double g) const override;

private:
    DecoderParams params_;
    mutable std::mutex cache_mutex_;
    mutable std::map<std::string, PatchFeatureMap> cache_;
};

}  // namespace ugs
