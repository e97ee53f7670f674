#include "ugs/decoder.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "ugs/error.hpp"
#include "ugs/fixtures.hpp"
#include "ugs/hierarchy.hpp"
#include "ugs/label_io.hpp"

namespace ugs {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using MatMap = Eigen::Map<const Mat>;
using MatMapMut = Eigen::Map<Mat>;

constexpr char kMagic[4] = {'U', 'G', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

MatMap mat(const DecoderParams& p, const std::string& name) {
    const auto& b = p.block(name);
    return MatMap(p.values().data() + b.offset, b.rows, b.cols);
}

Vec vec(const DecoderParams& p, const std::string& name) {
    const auto& b = p.block(name);
    return Eigen::Map<const Vec>(p.values().data() + b.offset, static_cast<Eigen::Index>(b.size()));
}

MatMapMut grad_mat(std::vector<double>& g, const DecoderParams& p, const std::string& name) {
    const auto& b = p.block(name);
    return MatMapMut(g.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<Vec> grad_vec(std::vector<double>& g, const DecoderParams& p, const std::string& name) {
    const auto& b = p.block(name);
    return Eigen::Map<Vec>(g.data() + b.offset, static_cast<Eigen::Index>(b.size()));
}

Mat gelu_m(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
Mat gelu_grad_m(const Mat& x) { return x.unaryExpr([](double v) { return gelu_grad(v); }); }
Vec gelu_v(const Vec& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
Vec gelu_grad_v(const Vec& x) { return x.unaryExpr([](double v) { return gelu_grad(v); }); }

Mat softmax_rows(const Mat& s) {
    Mat p(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        p.row(r) = (s.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Backward through row softmax: dS = P * (dP - rowsum(dP * P)).
Mat softmax_rows_backward(const Mat& p, const Mat& dp) {
    Mat ds = p.cwiseProduct(dp);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double s = ds.row(r).sum();
        ds.row(r) -= s * p.row(r);
    }
    return ds;
}

void check_finite(const Mat& m, const char* stage) {
    if (!m.allFinite()) throw NumericalError(fmt::format("non-finite values after {}", stage));
}

// Fourier features of a normalized position in [-1, 1]^2 through the fixed point basis.
RowVec position_encoding(const DecoderParams& p, double cx, double cy) {
    const MatMap basis = mat(p, "point.basis");
    const Eigen::Index half = basis.cols();
    RowVec out(2 * half);
    for (Eigen::Index k = 0; k < half; ++k) {
        const double proj = kTwoPi * (cx * basis(0, k) + cy * basis(1, k));
        out(k) = std::sin(proj);
        out(half + k) = std::cos(proj);
    }
    return out;
}

double norm_coord(int i, int extent) { return 2.0 * ((static_cast<double>(i) + 0.5) / extent) - 1.0; }

Mat feature_matrix(const PatchFeatureMap& f) {
    const int n = f.height * f.width;
    Mat out(n, f.dim);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < f.dim; ++k) out(i, k) = f.data[static_cast<std::size_t>(i) * f.dim + k];
    }
    return out;
}

// Everything the backward pass needs from one forward pass.
struct Forward {
    // granularity MLP
    Vec phi, a1, h1, a2, h2;
    // tokens: row 0 mask token, row 1 point, row 2 granularity
    Mat t0;
    Mat qs, ks, vs, ps, os;
    Mat t1;
    Mat feats, x;
    Mat qc, kc, vc, pc, oc;
    Mat t2;
    Mat f_pre, f_act;
    Mat t3;
    Vec u1, z1, u2, z2;
    Vec w;
    Vec logits;
};

struct Attn {
    Mat q, k, v, p, o;
};

Attn attention(const Mat& queries, const Mat& keys_in, const DecoderParams& p, const std::string& prefix) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.shape().d_model));
    Attn a;
    a.q = queries * mat(p, prefix + ".wq").transpose();
    a.k = keys_in * mat(p, prefix + ".wk").transpose();
    a.v = keys_in * mat(p, prefix + ".wv").transpose();
    a.p = softmax_rows((a.q * a.k.transpose()) * scale);
    a.o = a.p * a.v;
    return a;
}

Forward forward(const DecoderParams& p, const PatchFeatureMap& features, int x, int y, double g) {
    const auto& s = p.shape();
    if (features.dim != s.feature_dim) {
        throw DimensionError(fmt::format("feature dim {} does not match decoder dim {}", features.dim, s.feature_dim));
    }
    if (x < 0 || y < 0 || x >= features.width || y >= features.height) {
        throw InvalidArgument(fmt::format("point ({}, {}) outside the {}x{} grid", x, y, features.width, features.height));
    }
    Forward f;
    const auto freq = p.view("fourier.freq");
    const auto phi = fourier_encode(g, freq);
    f.phi = Eigen::Map<const Vec>(phi.data(), static_cast<Eigen::Index>(phi.size()));
    f.a1 = mat(p, "gmlp.w1") * f.phi + vec(p, "gmlp.b1");
    f.h1 = gelu_v(f.a1);
    f.a2 = mat(p, "gmlp.w2") * f.h1 + vec(p, "gmlp.b2");
    f.h2 = gelu_v(f.a2);
    const Vec eg = mat(p, "gmlp.w3") * f.h2 + vec(p, "gmlp.b3");

    f.t0.resize(3, s.d_model);
    f.t0.row(0) = vec(p, "prompt.mask_token").transpose();
    f.t0.row(1) = position_encoding(p, norm_coord(x, features.width), norm_coord(y, features.height)) +
                  vec(p, "prompt.point").transpose();
    f.t0.row(2) = eg.transpose();
    check_finite(f.t0, "prompt encoding");

    Attn sa = attention(f.t0, f.t0, p, "self");
    f.qs = std::move(sa.q);
    f.ks = std::move(sa.k);
    f.vs = std::move(sa.v);
    f.ps = std::move(sa.p);
    f.os = std::move(sa.o);
    f.t1 = f.t0 + f.os * mat(p, "self.wo").transpose();

    f.feats = feature_matrix(features);
    const int n = features.height * features.width;
    f.x = f.feats * mat(p, "image.w").transpose();
    f.x.rowwise() += vec(p, "image.b").transpose();
    Mat coords(n, 2);
    for (int i = 0; i < n; ++i) {
        coords(i, 0) = norm_coord(i % features.width, features.width);
        coords(i, 1) = norm_coord(i / features.width, features.height);
    }
    const Mat proj = kTwoPi * (coords * mat(p, "point.basis"));
    f.x.leftCols(proj.cols()) += proj.array().sin().matrix();
    f.x.rightCols(proj.cols()) += proj.array().cos().matrix();

    Attn ca = attention(f.t1, f.x, p, "t2i");
    f.qc = std::move(ca.q);
    f.kc = std::move(ca.k);
    f.vc = std::move(ca.v);
    f.pc = std::move(ca.p);
    f.oc = std::move(ca.o);
    f.t2 = f.t1 + f.oc * mat(p, "t2i.wo").transpose();
    check_finite(f.t2, "token-to-image attention");

    f.f_pre = f.t2 * mat(p, "ffn.w1").transpose();
    f.f_pre.rowwise() += vec(p, "ffn.b1").transpose();
    f.f_act = gelu_m(f.f_pre);
    f.t3 = f.t2 + f.f_act * mat(p, "ffn.w2").transpose();
    f.t3.rowwise() += vec(p, "ffn.b2").transpose();

    const Vec tok = f.t3.row(0).transpose();
    f.u1 = mat(p, "out.w1") * tok + vec(p, "out.b1");
    f.z1 = gelu_v(f.u1);
    f.u2 = mat(p, "out.w2") * f.z1 + vec(p, "out.b2");
    f.z2 = gelu_v(f.u2);
    f.w = mat(p, "out.w3") * f.z2 + vec(p, "out.b3");
    f.logits = f.feats * f.w;
    if (!f.logits.allFinite()) throw NumericalError("non-finite logits");
    return f;
}

void backward(const DecoderParams& p, const Forward& f, const Vec& dlogits, std::vector<double>& grad) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.shape().d_model));

    // logits = F w
    const Vec dw = f.feats.transpose() * dlogits;
    grad_mat(grad, p, "out.w3") += dw * f.z2.transpose();
    grad_vec(grad, p, "out.b3") += dw;
    const Vec du2 = (mat(p, "out.w3").transpose() * dw).cwiseProduct(gelu_grad_v(f.u2));
    grad_mat(grad, p, "out.w2") += du2 * f.z1.transpose();
    grad_vec(grad, p, "out.b2") += du2;
    const Vec du1 = (mat(p, "out.w2").transpose() * du2).cwiseProduct(gelu_grad_v(f.u1));
    grad_mat(grad, p, "out.w1") += du1 * f.t3.row(0);
    grad_vec(grad, p, "out.b1") += du1;

    Mat dt3 = Mat::Zero(f.t3.rows(), f.t3.cols());
    dt3.row(0) = (mat(p, "out.w1").transpose() * du1).transpose();

    // t3 = t2 + gelu(t2 W1^T + b1) W2^T + b2
    Mat dt2 = dt3;
    grad_mat(grad, p, "ffn.w2") += dt3.transpose() * f.f_act;
    grad_vec(grad, p, "ffn.b2") += dt3.colwise().sum().transpose();
    const Mat dpre = (dt3 * mat(p, "ffn.w2")).cwiseProduct(gelu_grad_m(f.f_pre));
    grad_mat(grad, p, "ffn.w1") += dpre.transpose() * f.t2;
    grad_vec(grad, p, "ffn.b1") += dpre.colwise().sum().transpose();
    dt2 += dpre * mat(p, "ffn.w1");

    // t2 = t1 + softmax(q k^T s) v Wo^T with q from t1 and k, v from image tokens x
    Mat dt1 = dt2;
    grad_mat(grad, p, "t2i.wo") += dt2.transpose() * f.oc;
    const Mat doc = dt2 * mat(p, "t2i.wo");
    const Mat dpc = doc * f.vc.transpose();
    const Mat dvc = f.pc.transpose() * doc;
    const Mat dsc = softmax_rows_backward(f.pc, dpc) * scale;
    const Mat dqc = dsc * f.kc;
    const Mat dkc = dsc.transpose() * f.qc;
    grad_mat(grad, p, "t2i.wq") += dqc.transpose() * f.t1;
    grad_mat(grad, p, "t2i.wk") += dkc.transpose() * f.x;
    grad_mat(grad, p, "t2i.wv") += dvc.transpose() * f.x;
    dt1 += dqc * mat(p, "t2i.wq");
    const Mat dx = dkc * mat(p, "t2i.wk") + dvc * mat(p, "t2i.wv");
    grad_mat(grad, p, "image.w") += dx.transpose() * f.feats;
    grad_vec(grad, p, "image.b") += dx.colwise().sum().transpose();

    // t1 = t0 + softmax(q k^T s) v Wo^T, all from t0
    Mat dt0 = dt1;
    grad_mat(grad, p, "self.wo") += dt1.transpose() * f.os;
    const Mat dos = dt1 * mat(p, "self.wo");
    const Mat dps = dos * f.vs.transpose();
    const Mat dvs = f.ps.transpose() * dos;
    const Mat dss = softmax_rows_backward(f.ps, dps) * scale;
    const Mat dqs = dss * f.ks;
    const Mat dks = dss.transpose() * f.qs;
    grad_mat(grad, p, "self.wq") += dqs.transpose() * f.t0;
    grad_mat(grad, p, "self.wk") += dks.transpose() * f.t0;
    grad_mat(grad, p, "self.wv") += dvs.transpose() * f.t0;
    dt0 += dqs * mat(p, "self.wq") + dks * mat(p, "self.wk") + dvs * mat(p, "self.wv");

    grad_vec(grad, p, "prompt.mask_token") += dt0.row(0).transpose();
    grad_vec(grad, p, "prompt.point") += dt0.row(1).transpose();

    const Vec deg = dt0.row(2).transpose();
    grad_mat(grad, p, "gmlp.w3") += deg * f.h2.transpose();
    grad_vec(grad, p, "gmlp.b3") += deg;
    const Vec da2 = (mat(p, "gmlp.w3").transpose() * deg).cwiseProduct(gelu_grad_v(f.a2));
    grad_mat(grad, p, "gmlp.w2") += da2 * f.h1.transpose();
    grad_vec(grad, p, "gmlp.b2") += da2;
    const Vec da1 = (mat(p, "gmlp.w2").transpose() * da2).cwiseProduct(gelu_grad_v(f.a1));
    grad_mat(grad, p, "gmlp.w1") += da1 * f.phi.transpose();
    grad_vec(grad, p, "gmlp.b1") += da1;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Blocks that never reach the logits: the image-to-token attention only updates image tokens.
bool reaches_logits(const ParamBlock& b) { return b.trainable && b.name.rfind("i2t.", 0) != 0; }

}  // namespace

void validate(const DecoderShape& shape) {
    if (shape.d_model < 2 || shape.d_model % 2 != 0) throw InvalidArgument("d_model must be even and >= 2");
    if (shape.d_fourier < 2 || shape.d_fourier % 2 != 0) throw InvalidArgument("d_fourier must be even and >= 2");
    if (shape.feature_dim < 1) throw InvalidArgument("feature dim must be positive");
}

std::vector<double> fourier_encode(double g, std::span<const double> frequencies) {
    const std::size_t half = frequencies.size();
    std::vector<double> out(2 * half);
    for (std::size_t k = 0; k < half; ++k) {
        const double a = kTwoPi * frequencies[k] * g;
        out[k] = std::sin(a);
        out[half + k] = std::cos(a);
    }
    return out;
}

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) noexcept {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(kTwoPi);
    return cdf + x * pdf;
}

std::vector<ParamBlock> param_layout(const DecoderShape& s) {
    validate(s);
    const int d = s.d_model;
    const int h = s.ffn_hidden();
    std::vector<ParamBlock> out;
    std::size_t offset = 0;
    auto add = [&](const std::string& name, int rows, int cols, bool trainable = true) {
        ParamBlock b{name, rows, cols, offset, trainable};
        offset += b.size();
        out.push_back(std::move(b));
    };
    add("fourier.freq", 1, s.d_fourier / 2, false);
    add("point.basis", 2, d / 2, false);
    add("gmlp.w1", d, s.d_fourier);
    add("gmlp.b1", 1, d);
    add("gmlp.w2", d, d);
    add("gmlp.b2", 1, d);
    add("gmlp.w3", d, d);
    add("gmlp.b3", 1, d);
    add("prompt.point", 1, d);
    add("prompt.mask_token", 1, d);
    add("image.w", d, s.feature_dim);
    add("image.b", 1, d);
    for (const char* att : {"self", "t2i"}) {
        for (const char* m : {"wq", "wk", "wv", "wo"}) add(fmt::format("{}.{}", att, m), d, d);
    }
    add("ffn.w1", h, d);
    add("ffn.b1", 1, h);
    add("ffn.w2", d, h);
    add("ffn.b2", 1, d);
    for (const char* m : {"wq", "wk", "wv", "wo"}) add(fmt::format("i2t.{}", m), d, d);
    add("out.w1", d, d);
    add("out.b1", 1, d);
    add("out.w2", d, d);
    add("out.b2", 1, d);
    add("out.w3", s.feature_dim, d);
    add("out.b3", 1, s.feature_dim);
    return out;
}

DecoderParams::DecoderParams(const DecoderShape& shape, double sigma_f, std::uint64_t seed)
    : shape_(shape), layout_(param_layout(shape)) {
    if (!(sigma_f > 0.0) || !std::isfinite(sigma_f)) throw InvalidArgument("sigma_f must be positive");
    values_.assign(layout_.back().offset + layout_.back().size(), 0.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& v : view("fourier.freq")) v = sigma_f * gauss(rng);
    for (double& v : view("point.basis")) v = gauss(rng);
}

DecoderParams DecoderParams::init(const DecoderShape& shape, double sigma_f, std::uint64_t seed) {
    DecoderParams p(shape, sigma_f, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (const auto& b : p.layout_) {
        if (!b.trainable || b.rows == 1) continue;
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(b.cols));
        for (std::size_t i = 0; i < b.size(); ++i) p.values_[b.offset + i] = std_dev * gauss(rng);
    }
    for (double& v : p.view("prompt.mask_token")) v = gauss(rng);
    for (double& v : p.view("prompt.point")) v = gauss(rng);
    return p;
}

const ParamBlock& DecoderParams::block(const std::string& name) const {
    for (const auto& b : layout_) {
        if (b.name == name) return b;
    }
    throw InvalidArgument("unknown parameter block " + name);
}

std::span<double> DecoderParams::view(const std::string& name) {
    const auto& b = block(name);
    return {values_.data() + b.offset, b.size()};
}

std::span<const double> DecoderParams::view(const std::string& name) const {
    const auto& b = block(name);
    return {values_.data() + b.offset, b.size()};
}

std::vector<double> embed_granularity(std::span<const double> phi, const DecoderParams& p) {
    if (static_cast<int>(phi.size()) != p.shape().d_fourier) {
        throw DimensionError(fmt::format("phi has {} entries, expected {}", phi.size(), p.shape().d_fourier));
    }
    const Vec x = Eigen::Map<const Vec>(phi.data(), static_cast<Eigen::Index>(phi.size()));
    const Vec h1 = gelu_v(mat(p, "gmlp.w1") * x + vec(p, "gmlp.b1"));
    const Vec h2 = gelu_v(mat(p, "gmlp.w2") * h1 + vec(p, "gmlp.b2"));
    const Vec e = mat(p, "gmlp.w3") * h2 + vec(p, "gmlp.b3");
    return {e.data(), e.data() + e.size()};
}

DecodeOutput decode(const PatchFeatureMap& features, int x, int y, double g, const DecoderParams& p) {
    const Forward f = forward(p, features, x, y, g);

    // Image tokens attend to the updated prompt tokens.
    Attn it = attention(f.x, f.t3, p, "i2t");
    const Mat img = f.x + it.o * mat(p, "i2t.wo").transpose();
    check_finite(img, "image-to-token attention");

    DecodeOutput out;
    out.logits.assign(f.logits.data(), f.logits.data() + f.logits.size());
    out.weight.assign(f.w.data(), f.w.data() + f.w.size());
    out.image_tokens.assign(img.data(), img.data() + img.size());
    return out;
}

BinaryMask logits_to_mask(std::span<const double> logits, int height, int width) {
    if (logits.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
        throw DimensionError("logit count does not match the mask shape");
    }
    BinaryMask m(height, width);
    for (int i = 0; i < height * width; ++i) {
        if (logits[static_cast<std::size_t>(i)] > 0.0) m.set(i / width, i % width);
    }
    return m;
}

LossValue focal_dice_loss(std::span<const double> logits, const BinaryMask& target, const LossConfig& cfg) {
    const std::size_t n = logits.size();
    if (n != target.pixel_count()) throw DimensionError("logit count does not match the target mask");
    LossValue out;
    out.grad.assign(n, 0.0);
    const double a = cfg.alpha;
    const double gm = cfg.gamma;
    std::vector<double> prob(n);
    double sum_pt = 0.0;
    double sum_p = 0.0;
    double sum_t = 0.0;
    std::vector<double> dfocal(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double l = logits[i];
        const double p = sigmoid(l);
        const bool t = target.test(i);
        prob[i] = p;
        if (t) {
            const double log_p = -softplus(-l);
            out.focal += -a * std::pow(1.0 - p, gm) * log_p;
            dfocal[i] = a * std::pow(1.0 - p, gm) * (gm * p * log_p - (1.0 - p));
            sum_pt += p;
            sum_t += 1.0;
        } else {
            const double log_q = -softplus(l);
            out.focal += -(1.0 - a) * std::pow(p, gm) * log_q;
            dfocal[i] = (1.0 - a) * std::pow(p, gm) * (p - gm * (1.0 - p) * log_q);
        }
        sum_p += p;
    }
    out.focal /= static_cast<double>(n);
    const double num = 2.0 * sum_pt + cfg.smooth;
    const double den = sum_p + sum_t + cfg.smooth;
    out.dice = 1.0 - num / den;
    out.total = cfg.focal_weight * out.focal + cfg.dice_weight * out.dice;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = target.test(i) ? 1.0 : 0.0;
        const double ddice_dp = -(2.0 * t * den - num) / (den * den);
        const double dp_dl = prob[i] * (1.0 - prob[i]);
        out.grad[i] = cfg.focal_weight * dfocal[i] / static_cast<double>(n) + cfg.dice_weight * ddice_dp * dp_dl;
    }
    return out;
}

double loss_and_gradient(const DecoderParams& params, const TrainSample& sample, const LossConfig& cfg,
                         std::vector<double>& grad) {
    if (sample.features == nullptr) throw InvalidArgument("training sample has no features");
    grad.assign(params.values().size(), 0.0);
    const Forward f = forward(params, *sample.features, sample.x, sample.y, sample.g);
    const LossValue lv = focal_dice_loss(std::span(f.logits.data(), static_cast<std::size_t>(f.logits.size())),
                                         sample.target, cfg);
    const Vec dl = Eigen::Map<const Vec>(lv.grad.data(), static_cast<Eigen::Index>(lv.grad.size()));
    backward(params, f, dl, grad);
    return lv.total;
}

GradCheckReport grad_check(const DecoderParams& params, const TrainSample& sample, double eps, std::size_t count,
                           std::uint64_t seed, const LossConfig& cfg, double floor) {
    std::vector<double> analytic;
    loss_and_gradient(params, sample, cfg, analytic);

    std::vector<std::pair<std::size_t, const ParamBlock*>> eligible;
    for (const auto& b : params.layout()) {
        if (!reaches_logits(b)) continue;
        for (std::size_t i = 0; i < b.size(); ++i) eligible.emplace_back(b.offset + i, &b);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    if (eligible.size() > count) eligible.resize(count);

    auto loss_at = [&](const DecoderParams& p) {
        const Forward f = forward(p, *sample.features, sample.x, sample.y, sample.g);
        return focal_dice_loss(std::span(f.logits.data(), static_cast<std::size_t>(f.logits.size())), sample.target,
                               cfg)
            .total;
    };
    GradCheckReport report;
    DecoderParams probe = params;
    for (const auto& [index, blk] : eligible) {
        const double original = probe.values()[index];
        probe.values()[index] = original + eps;
        const double up = loss_at(probe);
        probe.values()[index] = original - eps;
        const double down = loss_at(probe);
        probe.values()[index] = original;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[index];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > report.max_rel_error || report.checked == 0) {
            report.max_rel_error = std::max(report.max_rel_error, rel);
            if (rel >= report.max_rel_error) report.worst_param = fmt::format("{}[{}]", blk->name, index - blk->offset);
        }
        ++report.checked;
    }
    return report;
}

void validate(const TrainConfig& cfg) {
    validate(cfg.shape);
    if (cfg.epochs < 1 || cfg.batch < 1) throw InvalidArgument("epochs and batch must be positive");
    if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw InvalidArgument("learning rate must be positive");
    if (cfg.grid < 8) throw InvalidArgument("grid must be at least 8");
    if (cfg.images < 2 || cfg.train_images < 1 || cfg.train_images >= cfg.images) {
        throw InvalidArgument("need at least one training and one held-out image");
    }
    if (!(cfg.loss.focal_weight >= 0.0 && cfg.loss.dice_weight >= 0.0)) {
        throw InvalidArgument("loss weights must be non-negative");
    }
    if (cfg.jobs < 1) throw InvalidArgument("jobs must be positive");
    if (!(cfg.g_jitter >= 0.0 && cfg.g_jitter <= 1.0)) throw InvalidArgument("g_jitter must lie in [0, 1]");
}

std::vector<ToyImage> make_toy_corpus(const TrainConfig& cfg) {
    validate(cfg);
    std::vector<ToyImage> out;
    for (int i = 0; i < cfg.images; ++i) {
        const std::uint64_t seed = cfg.corpus_seed * 100003ULL + static_cast<std::uint64_t>(i);
        auto nested = fixtures::nested_squares(cfg.grid, cfg.shape.feature_dim, seed, cfg.noise_sigma);
        ToyImage img;
        img.image_id = fmt::format("toy-{:03d}", i);
        img.features = std::move(nested.synth.map);
        img.levels = std::move(nested.synth.gt_masks);
        double amin = 0.0;
        double amax = 0.0;
        for (std::size_t k = 0; k < img.levels.size(); ++k) {
            const double a = static_cast<double>(area(img.levels[k]));
            amin = k == 0 ? a : std::min(amin, a);
            amax = std::max(amax, a);
        }
        for (const auto& m : img.levels) {
            img.granularity.push_back(granularity_score(static_cast<double>(area(m)), amin, amax));
        }
        out.push_back(std::move(img));
    }
    return out;
}

ToyEval evaluate_toy(const DecoderParams& params, std::span<const ToyImage> images) {
    ToyEval ev;
    double iou_sum = 0.0;
    std::size_t monotone = 0;
    const auto grid = parse_grid("0.1:1.0:0.1");
    for (const auto& img : images) {
        const int h = img.features.height;
        const int w = img.features.width;
        for (std::size_t k = 0; k < img.levels.size(); ++k) {
            const Click c = initial_click(img.levels[k]);
            const auto out = decode(img.features, c.x, c.y, img.granularity[k], params);
            iou_sum += iou(logits_to_mask(out.logits, h, w), img.levels[k]);
            ++ev.masks;
        }
        // Fixed point inside the innermost level; slide g across the grid.
        const Click c = initial_click(img.levels.back());
        std::size_t prev = 0;
        for (std::size_t gi = 0; gi < grid.size(); ++gi) {
            const auto out = decode(img.features, c.x, c.y, grid[gi], params);
            const std::size_t a = area(logits_to_mask(out.logits, h, w));
            if (gi > 0) {
                ++ev.pairs;
                if (a >= prev) ++monotone;
            }
            prev = a;
        }
    }
    ev.one_click_iou = ev.masks ? iou_sum / static_cast<double>(ev.masks) : 0.0;
    ev.monotone_fraction = ev.pairs ? static_cast<double>(monotone) / static_cast<double>(ev.pairs) : 0.0;
    return ev;
}

const BinaryMask& nearest_level(const ToyImage& image, const Click& click, double g) {
    std::size_t best = image.levels.size();
    for (std::size_t k = 0; k < image.levels.size(); ++k) {
        if (!image.levels[k].get(click.y, click.x)) continue;
        if (best == image.levels.size()) {
            best = k;
            continue;
        }
        const double dk = std::abs(g - image.granularity[k]);
        const double db = std::abs(g - image.granularity[best]);
        if (dk < db || (dk == db && area(image.levels[k]) < area(image.levels[best]))) best = k;
    }
    if (best == image.levels.size()) throw InvalidArgument("click lies outside every level of " + image.image_id);
    return image.levels[best];
}

TrainResult train_toy(const TrainConfig& cfg, const EpochCallback& on_epoch) {
    const auto corpus = make_toy_corpus(cfg);
    const auto split = static_cast<std::size_t>(cfg.train_images);
    return train_toy(cfg, std::span(corpus).first(split), std::span(corpus).subspan(split), on_epoch);
}

TrainResult train_toy(const TrainConfig& cfg, std::span<const ToyImage> train, std::span<const ToyImage> held_out,
                      const EpochCallback& on_epoch) {
    validate(cfg);
    if (train.empty()) throw InvalidArgument("training set is empty");

    struct Anchor {
        const ToyImage* image;
        std::size_t level;
        Click click;
    };
    std::vector<Anchor> anchors;
    for (const auto& img : train) {
        for (std::size_t k = 0; k < img.levels.size(); ++k) anchors.push_back({&img, k, initial_click(img.levels[k])});
    }
    std::vector<TrainSample> samples(anchors.size());
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    TrainResult result;
    DecoderParams params = DecoderParams::init(cfg.shape, cfg.sigma_f, cfg.seed);
    const std::size_t np = params.values().size();
    std::vector<std::uint8_t> trainable(np, 0);
    for (const auto& b : params.layout()) {
        if (b.trainable) std::fill_n(trainable.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), 1);
    }
    std::vector<double> m(np, 0.0);
    std::vector<double> v(np, 0.0);
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double adam_eps = 1e-8;
    std::uint64_t step = 0;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    const auto batch = static_cast<std::size_t>(cfg.batch);
    std::vector<std::vector<double>> grads(batch);
    std::vector<double> losses(batch);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            const auto& a = anchors[i];
            double g = a.image->granularity[a.level];
            if (unit(rng) < cfg.g_jitter) g = 0.1 + 0.9 * unit(rng);
            samples[i] = {&a.image->features, a.click.x, a.click.y, g, nearest_level(*a.image, a.click, g)};
        }
        double epoch_loss = 0.0;
        bool diverged = false;
        for (std::size_t start = 0; start < order.size() && !diverged; start += batch) {
            const std::size_t count = std::min(batch, order.size() - start);
            std::atomic<std::size_t> next{0};
            std::atomic<bool> failed{false};
            auto work = [&] {
                for (std::size_t i = next++; i < count; i = next++) {
                    try {
                        losses[i] = loss_and_gradient(params, samples[order[start + i]], cfg.loss, grads[i]);
                    } catch (const NumericalError&) {
                        failed = true;
                    }
                }
            };
            const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(cfg.jobs));
            std::vector<std::thread> pool;
            for (std::size_t wkr = 1; wkr < workers; ++wkr) pool.emplace_back(work);
            work();
            for (auto& t : pool) t.join();

            double batch_loss = 0.0;
            for (std::size_t i = 0; i < count; ++i) batch_loss += losses[i];
            if (failed || !std::isfinite(batch_loss)) {
                diverged = true;
                break;
            }
            epoch_loss += batch_loss;
            ++step;
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            auto& pv = params.values();
            for (std::size_t j = 0; j < np; ++j) {
                if (!trainable[j]) continue;
                double gsum = 0.0;
                for (std::size_t i = 0; i < count; ++i) gsum += grads[i][j];
                const double gj = gsum / static_cast<double>(count);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                pv[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + adam_eps);
            }
        }
        if (diverged) {
            result.diverged = true;
            break;
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.loss = epoch_loss / static_cast<double>(samples.size());
        if (!held_out.empty()) {
            const ToyEval ev = evaluate_toy(params, held_out);
            em.val_one_click_iou = ev.one_click_iou;
            em.val_monotone_fraction = ev.monotone_fraction;
        }
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.metrics.push_back(em);
        result.params = params;
        if (on_epoch) on_epoch(em);
    }
    if (result.metrics.empty()) result.params = DecoderParams::init(cfg.shape, cfg.sigma_f, cfg.seed);
    return result;
}

std::string metrics_json_line(const EpochMetrics& m) {
    Json j;
    j["epoch"] = m.epoch;
    j["loss"] = m.loss;
    j["val_one_click_iou"] = m.val_one_click_iou;
    j["val_monotone_fraction"] = m.val_monotone_fraction;
    j["seconds"] = m.seconds;
    return j.dump();
}

void save_checkpoint(const DecoderParams& params, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    auto put = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    out.write(kMagic, 4);
    put(kVersion);
    put(static_cast<std::uint32_t>(params.shape().d_model));
    put(static_cast<std::uint32_t>(params.shape().d_fourier));
    put(static_cast<std::uint32_t>(params.shape().feature_dim));
    for (double v : params.values()) {
        const auto f = static_cast<float>(v);
        std::uint32_t bits = 0;
        std::memcpy(&bits, &f, 4);
        put(bits);
    }
    if (!out) throw IoError("write failed for " + path.string());
}

DecoderParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    auto get = [&]() {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path.string() + ": truncated checkpoint");
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a decoder checkpoint");
    }
    if (const auto version = get(); version != kVersion) {
        throw FormatError(fmt::format("{}: unsupported checkpoint version {}", path.string(), version));
    }
    DecoderShape shape;
    shape.d_model = static_cast<int>(get());
    shape.d_fourier = static_cast<int>(get());
    shape.feature_dim = static_cast<int>(get());
    DecoderParams params(shape, 1.0, 0);
    for (double& v : params.values()) {
        const std::uint32_t bits = get();
        float f = 0.0F;
        std::memcpy(&f, &bits, 4);
        if (!std::isfinite(f)) throw FormatError(path.string() + ": non-finite parameter");
        v = f;
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
    return params;
}

BinaryMask ToyDecoderSegmenter::predict(const ImageRef& image, std::span<const Click> clicks, double g) const {
    const Click* point = nullptr;
    for (const auto& c : clicks) {
        if (c.positive) {
            point = &c;
            break;
        }
    }
    const PatchFeatureMap* features = nullptr;
    {
        std::lock_guard lock(cache_mutex_);
        auto it = cache_.find(image.image_id);
        if (it == cache_.end()) it = cache_.emplace(image.image_id, read_features(image.features)).first;
        features = &it->second;
    }
    if (point == nullptr) return BinaryMask(features->height, features->width);
    const auto out = decode(*features, point->x, point->y, g, params_);
    return logits_to_mask(out.logits, features->height, features->width);
}

}  // namespace ugs
