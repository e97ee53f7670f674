#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ugs {

// Dense binary mask, row-major, bit-packed into 64-bit words. Bits past
// height*width in the last word are always zero, so word-wise popcounts are exact.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width);

    static BinaryMask full(int height, int width);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
    }

    bool get(int row, int col) const noexcept { return test(index(row, col)); }
    void set(int row, int col, bool value = true) noexcept { assign(index(row, col), value); }

    bool test(std::size_t i) const noexcept { return (words_[i >> 6] >> (i & 63)) & 1U; }
    void assign(std::size_t i, bool value) noexcept {
        const std::uint64_t bit = std::uint64_t{1} << (i & 63);
        if (value) {
            words_[i >> 6] |= bit;
        } else {
            words_[i >> 6] &= ~bit;
        }
    }

    // Fills the half-open rectangle [row0,row1) x [col0,col1), clipped to the mask.
    void fill_rect(int row0, int col0, int row1, int col1, bool value = true);

    std::span<const std::uint64_t> words() const noexcept { return words_; }

    bool any() const noexcept;
    bool same_shape(const BinaryMask& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }

    BinaryMask& operator&=(const BinaryMask& other);
    BinaryMask& operator|=(const BinaryMask& other);
    // Set difference: keeps pixels of *this that are not in `other`.
    BinaryMask& subtract(const BinaryMask& other);
    BinaryMask complement() const;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

    std::size_t index(int row, int col) const noexcept {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

private:
    void clear_tail() noexcept;

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint64_t> words_;
};

BinaryMask operator&(BinaryMask a, const BinaryMask& b);
BinaryMask operator|(BinaryMask a, const BinaryMask& b);
BinaryMask difference(BinaryMask a, const BinaryMask& b);

// Uncompressed COCO-style run-length form: column-major runs, first run counts
// background pixels (possibly zero).
struct RleMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;

    friend bool operator==(const RleMask&, const RleMask&) = default;
};

enum class MaskSource { divide, conquer, gt };

struct ScoredMask {
    BinaryMask mask;
    double confidence = 0.0;
    MaskSource source = MaskSource::divide;
};

enum class Connectivity { four = 4, eight = 8 };

std::size_t area(const BinaryMask& m) noexcept;
std::size_t intersection_area(const BinaryMask& a, const BinaryMask& b);

// |a∩b| / |a∪b|; two empty masks give 0. Throws DimensionError on shape mismatch.
double iou(const BinaryMask& a, const BinaryMask& b);

// |part∩whole| / |part|. Throws InvalidArgument for an empty part.
double containment(const BinaryMask& part, const BinaryMask& whole);

// Components in scan order of their first pixel.
std::vector<BinaryMask> connected_components(const BinaryMask& m,
                                             Connectivity connectivity = Connectivity::four);

// Largest component (ties to the earliest in scan order); empty mask if m is empty.
BinaryMask largest_component(const BinaryMask& m, Connectivity connectivity = Connectivity::four);

RleMask rle_encode(const BinaryMask& m);
BinaryMask rle_decode(const RleMask& r);

// Greedy NMS. Priority: confidence desc, area desc, index asc; a pinned index is
// ranked ahead of everything and therefore always kept. Returns kept indices in
// priority order.
std::vector<std::size_t> nms(std::span<const ScoredMask> masks, double iou_threshold,
                             std::optional<std::size_t> pinned = std::nullopt);

// Nearest-neighbour upsampling: every source pixel becomes a factor x factor block.
BinaryMask upsample(const BinaryMask& m, int factor);

// Inverse of upsample for block-aligned masks: a target pixel is set when at least
// half of its factor x factor footprint is set.
BinaryMask downsample_majority(const BinaryMask& m, int factor);

// City-block distance from every pixel of m to the nearest pixel outside m, with
// everything beyond the image border counted as outside. Zero outside m.
std::vector<std::uint32_t> distance_transform(const BinaryMask& m);

}  // namespace ugs
