#include "ugs/divide.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "ugs/error.hpp"

namespace ugs {

void AffinityGraph::recompute_degree() {
    degree.assign(static_cast<std::size_t>(n), 0.0);
    for (int p = 0; p < n; ++p) {
        double s = 0.0;
        for (int q = 0; q < n; ++q) s += weight(p, q);
        degree[static_cast<std::size_t>(p)] = s;
    }
}

void validate(const DivideConfig& cfg) {
    if (!(cfg.tau_sim > 0.0 && cfg.tau_sim < 1.0)) throw InvalidArgument("tau_sim must lie in (0,1)");
    if (!(cfg.eps_floor > 0.0)) throw InvalidArgument("eps_floor must be positive");
    if (!(cfg.tau_conf >= 0.0 && cfg.tau_conf <= 1.0)) throw InvalidArgument("tau_conf must lie in [0,1]");
    if (cfg.max_instances < 1) throw InvalidArgument("max_instances must be >= 1");
    if (cfg.patch_size < 1) throw InvalidArgument("patch_size must be >= 1");
}

AffinityGraph build_affinity(const PatchFeatureMap& map, const DivideConfig& cfg) {
    validate(cfg);
    if (!map.normalized) throw InvalidArgument("build_affinity needs an L2-normalized feature map");
    AffinityGraph g;
    g.n = map.patch_count();
    const auto n = static_cast<std::size_t>(g.n);
    g.weights.assign(n * n, cfg.eps_floor);
    bool all_similar = g.n > 1;
    for (int p = 0; p < g.n; ++p) {
        g.weights[static_cast<std::size_t>(p) * n + static_cast<std::size_t>(p)] = 1.0;
        for (int q = p + 1; q < g.n; ++q) {
            const bool similar = cosine(map, p, q) >= cfg.tau_sim;
            all_similar = all_similar && similar;
            const double w = similar ? 1.0 : cfg.eps_floor;
            g.weights[static_cast<std::size_t>(p) * n + static_cast<std::size_t>(q)] = w;
            g.weights[static_cast<std::size_t>(q) * n + static_cast<std::size_t>(p)] = w;
        }
    }
    g.degenerate = all_similar;
    g.recompute_degree();
    return g;
}

AffinityGraph graph_from_weights(int n, std::vector<double> weights) {
    if (n < 1 || weights.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n)) {
        throw DimensionError("graph_from_weights: weight matrix must be n x n");
    }
    AffinityGraph g{n, std::move(weights), {}, false};
    for (int p = 0; p < n; ++p) {
        for (int q = 0; q < n; ++q) {
            const double w = g.weight(p, q);
            if (!(w >= 0.0) || w != g.weight(q, p)) {
                throw InvalidArgument("graph_from_weights: weights must be symmetric and non-negative");
            }
        }
    }
    g.recompute_degree();
    for (double d : g.degree) {
        if (!(d > 0.0)) throw InvalidArgument("graph_from_weights: every degree must be positive");
    }
    return g;
}

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Applies N = D^{-1/2} W D^{-1/2}.
class NormalizedAffinity {
public:
    explicit NormalizedAffinity(const AffinityGraph& g) : g_(g), scale_(g.n) {
        for (int i = 0; i < g.n; ++i) scale_[i] = 1.0 / std::sqrt(g.degree[static_cast<std::size_t>(i)]);
    }

    void apply(const double* x, double* y) const {
        const int n = g_.n;
        tmp_.resize(n);
        for (int i = 0; i < n; ++i) tmp_[i] = scale_[i] * x[i];
        for (int p = 0; p < n; ++p) {
            const double* row = g_.weights.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(n);
            double s = 0.0;
            for (int q = 0; q < n; ++q) s += row[q] * tmp_[q];
            y[p] = scale_[p] * s;
        }
    }

    const VectorXd& scale() const { return scale_; }

private:
    const AffinityGraph& g_;
    VectorXd scale_;
    mutable VectorXd tmp_;
};

void deflate(MatrixXd& q, const VectorXd& top) {
    for (Eigen::Index c = 0; c < q.cols(); ++c) q.col(c) -= top.dot(q.col(c)) * top;
}

// Modified Gram-Schmidt; columns that collapse are replaced from the RNG.
void orthonormalize(MatrixXd& q, const VectorXd& top, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
        for (int attempt = 0; attempt < 8; ++attempt) {
            q.col(c) -= top.dot(q.col(c)) * top;
            for (Eigen::Index k = 0; k < c; ++k) q.col(c) -= q.col(k).dot(q.col(c)) * q.col(k);
            const double nrm = q.col(c).norm();
            if (nrm > 1e-12) {
                q.col(c) /= nrm;
                break;
            }
            for (Eigen::Index r = 0; r < q.rows(); ++r) q(r, c) = gauss(rng);
        }
    }
}

}  // namespace

Bipartition spectral_bipartition(const AffinityGraph& g, const EigenOptions& opts,
                                 std::span<const std::uint8_t> seed_mask) {
    const int n = g.n;
    if (n < 1) throw InvalidArgument("spectral_bipartition: empty graph");
    if (!seed_mask.empty() && seed_mask.size() != static_cast<std::size_t>(n)) {
        throw DimensionError("spectral_bipartition: seed mask length differs from graph size");
    }
    Bipartition out;
    if (n == 1) {
        out.foreground = {1};
        out.fiedler = {0.0};
        out.eigenvector = {0.0};
        return out;
    }

    const NormalizedAffinity op(g);
    VectorXd top(n);
    for (int i = 0; i < n; ++i) top[i] = std::sqrt(g.degree[static_cast<std::size_t>(i)]);
    top.normalize();

    // Block power iteration on N + I (spectrum shifted into [0, 2]) with the known top
    // eigenvector projected out, plus Rayleigh-Ritz so clustered eigenvalues separate.
    const int block = std::min(n - 1, 8);
    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatrixXd q(n, block);
    for (Eigen::Index c = 0; c < block; ++c) {
        for (Eigen::Index r = 0; r < n; ++r) q(r, c) = gauss(rng);
    }
    orthonormalize(q, top, rng);

    MatrixXd z(n, block);
    VectorXd v(n);
    VectorXd nv(n);
    double lambda = 0.0;
    bool converged = false;
    int it = 0;
    for (; it < opts.max_iterations; ++it) {
        for (Eigen::Index c = 0; c < block; ++c) {
            op.apply(q.col(c).data(), z.col(c).data());
            z.col(c) += q.col(c);
        }
        deflate(z, top);
        const MatrixXd t = q.transpose() * z;
        const Eigen::SelfAdjointEigenSolver<MatrixXd> ritz(0.5 * (t + t.transpose()));
        // Ritz rotation puts the best current estimate in the last column.
        const MatrixXd s = ritz.eigenvectors();
        v = q * s.col(block - 1);
        v -= top.dot(v) * top;
        v.normalize();
        op.apply(v.data(), nv.data());
        lambda = v.dot(nv);
        const double residual = (nv - lambda * v).cwiseAbs().maxCoeff();
        if (residual <= opts.tolerance) {
            converged = true;
            ++it;
            break;
        }
        q = z * s;
        orthonormalize(q, top, rng);
    }
    if (!converged) {
        throw ConvergenceError("spectral_bipartition: eigensolver did not converge in " +
                               std::to_string(opts.max_iterations) + " iterations");
    }

    // Fix the sign so the output does not depend on the start vector's orientation.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;

    out.eigenvalue = lambda;
    out.iterations = it;
    out.eigenvector.assign(v.data(), v.data() + n);
    out.fiedler.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.fiedler[static_cast<std::size_t>(i)] = v[i] * op.scale()[i];

    std::size_t positives = 0;
    for (double y : out.fiedler) positives += y > 0.0 ? 1 : 0;
    const std::size_t negatives = static_cast<std::size_t>(n) - positives;

    // Seed: largest |y| among eligible entries. Equal maxima on both sides go to the smaller side.
    double best = -1.0;
    bool pos_has_best = false;
    bool neg_has_best = false;
    for (int i = 0; i < n; ++i) {
        if (!seed_mask.empty() && !seed_mask[static_cast<std::size_t>(i)]) continue;
        const double y = out.fiedler[static_cast<std::size_t>(i)];
        const double a = std::abs(y);
        if (a > best) {
            best = a;
            pos_has_best = y > 0.0;
            neg_has_best = y <= 0.0;
        } else if (a == best) {
            (y > 0.0 ? pos_has_best : neg_has_best) = true;
        }
    }
    bool fg_positive = pos_has_best;
    if (pos_has_best && neg_has_best) fg_positive = positives <= negatives;
    if (best < 0.0) fg_positive = positives <= negatives;

    out.foreground.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const bool pos = out.fiedler[static_cast<std::size_t>(i)] > 0.0;
        out.foreground[static_cast<std::size_t>(i)] = pos == fg_positive ? 1 : 0;
    }
    return out;
}

double ncut_value(const AffinityGraph& g, std::span<const std::uint8_t> side) {
    if (side.size() != static_cast<std::size_t>(g.n)) throw DimensionError("ncut_value: side length");
    double cut = 0.0;
    double assoc_a = 0.0;
    double assoc_b = 0.0;
    for (int p = 0; p < g.n; ++p) {
        const bool in_a = side[static_cast<std::size_t>(p)] != 0;
        (in_a ? assoc_a : assoc_b) += g.degree[static_cast<std::size_t>(p)];
        for (int q = 0; q < g.n; ++q) {
            if (in_a && side[static_cast<std::size_t>(q)] == 0) cut += g.weight(p, q);
        }
    }
    if (assoc_a == 0.0 || assoc_b == 0.0) return std::numeric_limits<double>::infinity();
    return cut / assoc_a + cut / assoc_b;
}

double binarized_coherence(const PatchFeatureMap& map, const BinaryMask& patch_mask, double tau_sim) {
    std::vector<int> members;
    for (int p = 0; p < map.patch_count(); ++p) {
        if (patch_mask.test(static_cast<std::size_t>(p))) members.push_back(p);
    }
    if (members.size() < 2) return members.empty() ? 0.0 : 1.0;
    std::size_t hits = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < members.size(); ++i) {
        for (std::size_t j = i + 1; j < members.size(); ++j) {
            hits += cosine(map, members[i], members[j]) >= tau_sim ? 1 : 0;
            ++pairs;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(pairs);
}

std::vector<ScoredMask> maskcut(const PatchFeatureMap& map, const DivideConfig& cfg) {
    AffinityGraph g = build_affinity(map, cfg);
    std::vector<ScoredMask> out;
    if (g.degenerate) return out;

    const auto n = static_cast<std::size_t>(g.n);
    std::vector<std::uint8_t> eligible(n, 1);
    for (int k = 0; k < cfg.max_instances; ++k) {
        const Bipartition bp = spectral_bipartition(g, cfg.eigen, eligible);
        BinaryMask fg(map.height, map.width);
        for (std::size_t p = 0; p < n; ++p) {
            if (bp.foreground[p] && eligible[p]) fg.assign(p, true);
        }
        fg = largest_component(fg, Connectivity::four);
        if (area(fg) < 2) break;

        const double conf = binarized_coherence(map, fg, cfg.tau_sim);
        out.push_back({upsample(fg, cfg.patch_size), conf, MaskSource::divide});

        // Mask out: every affinity touching the new mask drops to the floor.
        for (std::size_t p = 0; p < n; ++p) {
            if (!fg.test(p)) continue;
            eligible[p] = 0;
            for (std::size_t q = 0; q < n; ++q) {
                g.weights[p * n + q] = cfg.eps_floor;
                g.weights[q * n + p] = cfg.eps_floor;
            }
        }
        g.recompute_degree();
        if (std::none_of(eligible.begin(), eligible.end(), [](std::uint8_t e) { return e != 0; })) break;
    }
    return out;
}

std::vector<ScoredMask> filter_confident(std::span<const ScoredMask> masks, double tau_conf) {
    std::vector<ScoredMask> out;
    for (const auto& m : masks) {
        if (m.confidence >= tau_conf) out.push_back(m);
    }
    return out;
}

}  // namespace ugs
