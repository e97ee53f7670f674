#include "ugs/mask.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <numeric>
#include <string>

#include "ugs/error.hpp"

namespace ugs {

namespace {

std::size_t word_count(std::size_t bits) { return (bits + 63) / 64; }

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": mask shapes differ (" +
                             std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                             " vs " + std::to_string(b.height()) + "x" +
                             std::to_string(b.width()) + ")");
    }
}

}  // namespace

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
    if (height < 1 || width < 1) {
        throw InvalidArgument("mask dimensions must be positive, got " + std::to_string(height) +
                              "x" + std::to_string(width));
    }
    words_.assign(word_count(pixel_count()), 0);
}

BinaryMask BinaryMask::full(int height, int width) {
    BinaryMask m(height, width);
    std::fill(m.words_.begin(), m.words_.end(), ~std::uint64_t{0});
    m.clear_tail();
    return m;
}

void BinaryMask::clear_tail() noexcept {
    const std::size_t rem = pixel_count() & 63;
    if (rem != 0 && !words_.empty()) {
        words_.back() &= (std::uint64_t{1} << rem) - 1;
    }
}

void BinaryMask::fill_rect(int row0, int col0, int row1, int col1, bool value) {
    row0 = std::max(row0, 0);
    col0 = std::max(col0, 0);
    row1 = std::min(row1, height_);
    col1 = std::min(col1, width_);
    for (int r = row0; r < row1; ++r) {
        for (int c = col0; c < col1; ++c) {
            set(r, c, value);
        }
    }
}

bool BinaryMask::any() const noexcept {
    return std::any_of(words_.begin(), words_.end(), [](std::uint64_t w) { return w != 0; });
}

BinaryMask& BinaryMask::operator&=(const BinaryMask& other) {
    require_same_shape(*this, other, "and");
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] &= other.words_[i];
    return *this;
}

BinaryMask& BinaryMask::operator|=(const BinaryMask& other) {
    require_same_shape(*this, other, "or");
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= other.words_[i];
    return *this;
}

BinaryMask& BinaryMask::subtract(const BinaryMask& other) {
    require_same_shape(*this, other, "subtract");
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] &= ~other.words_[i];
    return *this;
}

BinaryMask BinaryMask::complement() const {
    BinaryMask out = *this;
    for (auto& w : out.words_) w = ~w;
    out.clear_tail();
    return out;
}

BinaryMask operator&(BinaryMask a, const BinaryMask& b) { return a &= b; }
BinaryMask operator|(BinaryMask a, const BinaryMask& b) { return a |= b; }
BinaryMask difference(BinaryMask a, const BinaryMask& b) { return a.subtract(b); }

std::size_t area(const BinaryMask& m) noexcept {
    std::size_t total = 0;
    for (std::uint64_t w : m.words()) total += static_cast<std::size_t>(std::popcount(w));
    return total;
}

std::size_t intersection_area(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "intersection");
    const auto wa = a.words();
    const auto wb = b.words();
    std::size_t total = 0;
    for (std::size_t i = 0; i < wa.size(); ++i) {
        total += static_cast<std::size_t>(std::popcount(wa[i] & wb[i]));
    }
    return total;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "iou");
    const auto wa = a.words();
    const auto wb = b.words();
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < wa.size(); ++i) {
        inter += static_cast<std::size_t>(std::popcount(wa[i] & wb[i]));
        uni += static_cast<std::size_t>(std::popcount(wa[i] | wb[i]));
    }
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double containment(const BinaryMask& part, const BinaryMask& whole) {
    const std::size_t inter = intersection_area(part, whole);
    const std::size_t part_area = area(part);
    if (part_area == 0) throw InvalidArgument("containment: part mask is empty");
    return static_cast<double>(inter) / static_cast<double>(part_area);
}

std::vector<BinaryMask> connected_components(const BinaryMask& m, Connectivity connectivity) {
    std::vector<BinaryMask> out;
    if (m.pixel_count() == 0) return out;
    const int h = m.height();
    const int w = m.width();
    std::vector<std::uint8_t> seen(m.pixel_count(), 0);
    std::vector<std::pair<int, int>> stack;
    const bool eight = connectivity == Connectivity::eight;

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t start = m.index(r, c);
            if (!m.test(start) || seen[start]) continue;
            BinaryMask comp(h, w);
            seen[start] = 1;
            stack.emplace_back(r, c);
            while (!stack.empty()) {
                const auto [cr, cc] = stack.back();
                stack.pop_back();
                comp.set(cr, cc);
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (!eight && dr != 0 && dc != 0) continue;
                        const int nr = cr + dr;
                        const int nc = cc + dc;
                        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                        const std::size_t ni = m.index(nr, nc);
                        if (m.test(ni) && !seen[ni]) {
                            seen[ni] = 1;
                            stack.emplace_back(nr, nc);
                        }
                    }
                }
            }
            out.push_back(std::move(comp));
        }
    }
    return out;
}

BinaryMask largest_component(const BinaryMask& m, Connectivity connectivity) {
    auto comps = connected_components(m, connectivity);
    if (comps.empty()) return BinaryMask(m.height(), m.width());
    std::size_t best = 0;
    std::size_t best_area = area(comps[0]);
    for (std::size_t i = 1; i < comps.size(); ++i) {
        const std::size_t a = area(comps[i]);
        if (a > best_area) {
            best = i;
            best_area = a;
        }
    }
    return std::move(comps[best]);
}

RleMask rle_encode(const BinaryMask& m) {
    RleMask r{m.height(), m.width(), {}};
    bool current = false;
    std::uint32_t run = 0;
    for (int c = 0; c < m.width(); ++c) {
        for (int row = 0; row < m.height(); ++row) {
            const bool v = m.get(row, c);
            if (v != current) {
                r.counts.push_back(run);
                run = 0;
                current = v;
            }
            ++run;
        }
    }
    r.counts.push_back(run);
    return r;
}

BinaryMask rle_decode(const RleMask& r) {
    BinaryMask m(r.height, r.width);
    const std::uint64_t total = std::accumulate(r.counts.begin(), r.counts.end(), std::uint64_t{0});
    if (total != m.pixel_count()) {
        throw FormatError("rle counts sum to " + std::to_string(total) + ", expected " +
                          std::to_string(m.pixel_count()));
    }
    std::uint64_t pos = 0;
    bool value = false;
    const auto h = static_cast<std::uint64_t>(r.height);
    for (std::uint32_t run : r.counts) {
        if (value) {
            for (std::uint64_t k = pos; k < pos + run; ++k) {
                m.set(static_cast<int>(k % h), static_cast<int>(k / h));
            }
        }
        pos += run;
        value = !value;
    }
    return m;
}

std::vector<std::size_t> nms(std::span<const ScoredMask> masks, double iou_threshold,
                             std::optional<std::size_t> pinned) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
        throw InvalidArgument("nms: iou threshold must lie in (0,1]");
    }
    std::vector<std::size_t> order(masks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::size_t> areas(masks.size());
    for (std::size_t i = 0; i < masks.size(); ++i) areas[i] = area(masks[i].mask);
    if (pinned && *pinned >= masks.size()) throw InvalidArgument("nms: pinned index out of range");
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (pinned && (a == *pinned || b == *pinned)) return a == *pinned && b != *pinned;
        if (masks[a].confidence != masks[b].confidence) {
            return masks[a].confidence > masks[b].confidence;
        }
        if (areas[a] != areas[b]) return areas[a] > areas[b];
        return a < b;
    });

    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return iou(masks[idx].mask, masks[k].mask) >= iou_threshold;
        });
        if (!suppressed) kept.push_back(idx);
    }
    return kept;
}

BinaryMask upsample(const BinaryMask& m, int factor) {
    if (factor < 1) throw InvalidArgument("upsample factor must be >= 1");
    if (factor == 1) return m;
    BinaryMask out(m.height() * factor, m.width() * factor);
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            if (m.get(r, c)) {
                out.fill_rect(r * factor, c * factor, (r + 1) * factor, (c + 1) * factor);
            }
        }
    }
    return out;
}

BinaryMask downsample_majority(const BinaryMask& m, int factor) {
    if (factor < 1) throw InvalidArgument("downsample factor must be >= 1");
    if (factor == 1) return m;
    if (m.height() % factor != 0 || m.width() % factor != 0) {
        throw DimensionError("downsample: mask size is not a multiple of the factor");
    }
    BinaryMask out(m.height() / factor, m.width() / factor);
    const int need = (factor * factor + 1) / 2;
    for (int r = 0; r < out.height(); ++r) {
        for (int c = 0; c < out.width(); ++c) {
            int count = 0;
            for (int dr = 0; dr < factor; ++dr) {
                for (int dc = 0; dc < factor; ++dc) {
                    count += m.get(r * factor + dr, c * factor + dc) ? 1 : 0;
                }
            }
            if (count >= need) out.set(r, c);
        }
    }
    return out;
}

std::vector<std::uint32_t> distance_transform(const BinaryMask& m) {
    const int h = m.height();
    const int w = m.width();
    constexpr std::uint32_t inf = std::numeric_limits<std::uint32_t>::max() / 2;
    std::vector<std::uint32_t> d(m.pixel_count(), 0);
    auto at = [&](int r, int c) -> std::uint32_t {
        // Outside the image counts as background.
        if (r < 0 || r >= h || c < 0 || c >= w) return 0;
        return d[m.index(r, c)];
    };
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!m.get(r, c)) continue;
            d[m.index(r, c)] = std::min({inf, at(r - 1, c) + 1, at(r, c - 1) + 1});
        }
    }
    for (int r = h - 1; r >= 0; --r) {
        for (int c = w - 1; c >= 0; --c) {
            if (!m.get(r, c)) continue;
            auto& cur = d[m.index(r, c)];
            cur = std::min({cur, at(r + 1, c) + 1, at(r, c + 1) + 1});
        }
    }
    return d;
}

}  // namespace ugs
