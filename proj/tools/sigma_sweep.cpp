// Prints how well the Fourier granularity encoding separates a 0.1 grid for several
// frequency scales. Columns: scale, max cosine between embeddings 0.1 apart (lower
// separates better), min cosine between embeddings 0.01 apart (higher is smoother).
#include <algorithm>
#include <cmath>
#include <vector>

#include <fmt/core.h>

#include "ugs/decoder.hpp"

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

}  // namespace

int main() {
    fmt::print("{:>8} {:>12} {:>12}\n", "sigma_f", "cos@0.1 max", "cos@0.01 min");
    for (double sigma : {1.0, 3.0, 10.0, 30.0, 100.0}) {
        double coarse_max = -1.0, fine_min = 1.0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto p = ugs::DecoderParams::init(ugs::DecoderShape{}, sigma, seed);
            const auto freq = p.view("fourier.freq");
            for (int k = 1; k < 10; ++k) {
                const double g = 0.1 * k;
                coarse_max = std::max(coarse_max, cosine(ugs::fourier_encode(g, freq), ugs::fourier_encode(g + 0.1, freq)));
            }
            for (int k = 10; k < 100; ++k) {
                const double g = 0.01 * k;
                fine_min = std::min(fine_min, cosine(ugs::fourier_encode(g, freq), ugs::fourier_encode(g + 0.01, freq)));
            }
        }
        fmt::print("{:>8.1f} {:>12.3f} {:>12.3f}\n", sigma, coarse_max, fine_min);
    }
}
