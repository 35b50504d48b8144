// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Desk-scale calibration problem with exact gradients.
//
// A frozen linear map W plus a LoRA update s*B*A is fitted to targets produced by
// a planted rank-r update U diag(sigma*) V^T. The stored factors share U and V
// with the planted update but carry a perturbed spectrum, so editing only the
// singular values can drive the loss back down.
//
//   L(dW) = 1/(2n) * sum_i ||(W + dW) x_i - y_i||^2
//   G     = dL/d(dW) = 1/n * sum_i e_i x_i^T,   e_i = (W + dW) x_i - y_i

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>

#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/factors.hpp"
#include "spectral_surgeon/policies.hpp"
#include "spectral_surgeon/sensitivity.hpp"
#include "spectral_surgeon/spectral_core.hpp"

namespace spectral_surgeon::toy {

struct Dims {
    long d_out = 48;
    long d_in = 32;
    long r = 8;
    long n_cal = 64;
};

struct Options {
    double noise = 1e-3;            // target noise, relative to the RMS of clean targets
    double spectrum_log_std = 0.5;  // stored sigma = planted sigma * exp(N(0, std))
    double scale = 2.0;             // LoRA scale alpha / r
};

struct ToyProblem {
    Matrix w_frozen;
    FactorPair factors;
    double scale = 1.0;
    Matrix inputs;   // n_cal x d_in, one example per row
    Matrix targets;  // n_cal x d_out
    std::uint64_t seed = 0;
    Dims dims;

    Matrix planted_u;
    Matrix planted_v;
    Vector planted_sigma;
    Vector stored_sigma;

    Matrix delta_w() const { return scale * factors.b * factors.a; }
    Matrix planted_delta_w() const { return planted_u * planted_sigma.asDiagonal() * planted_v.transpose(); }
};

inline Matrix gaussian(std::mt19937_64& rng, long rows, long cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (long j = 0; j < cols; ++j) {
        for (long i = 0; i < rows; ++i) m(i, j) = normal(rng);
    }
    return m;
}

inline Matrix random_orthonormal(std::mt19937_64& rng, long rows, long cols) {
    return detail::thin_qr(gaussian(rng, rows, cols)).q;
}

/// Gaussian factor pair with entries scaled by 1/sqrt(fan-in).
inline FactorPair random_factor_pair(std::uint64_t seed, long d_out, long d_in, long r) {
    std::mt19937_64 rng(seed);
    FactorPair f;
    f.b = gaussian(rng, d_out, r) / std::sqrt(static_cast<double>(r));
    f.a = gaussian(rng, r, d_in) / std::sqrt(static_cast<double>(d_in));
    return f;
}

inline FactorPair factors_from_spectrum(const Matrix& u, const Vector& sigma, const Matrix& v, double scale) {
    SpectralUpdate s;
    s.u = u;
    s.v = v;
    s.sigma = sigma;
    s.scale = scale;
    return refactor(s);
}

inline ToyProblem build_toy_problem(std::uint64_t seed, const Dims& dims, const Options& opt = {}) {
    if (dims.r < 1 || dims.d_out < dims.r || dims.d_in < dims.r || dims.n_cal < 1) {
        throw Error(ErrorKind::invariant, "toy problem requires d_out, d_in >= r >= 1 and n_cal >= 1");
    }
    if (!(opt.scale > 0.0) || opt.noise < 0.0 || opt.spectrum_log_std < 0.0) {
        throw Error(ErrorKind::invariant, "toy problem options out of range");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> log_uniform(std::log(0.1), std::log(10.0));
    std::normal_distribution<double> normal(0.0, 1.0);

    ToyProblem p;
    p.seed = seed;
    p.dims = dims;
    p.scale = opt.scale;
    p.planted_u = random_orthonormal(rng, dims.d_out, dims.r);
    p.planted_v = random_orthonormal(rng, dims.d_in, dims.r);
    p.planted_sigma.resize(dims.r);
    p.stored_sigma.resize(dims.r);
    for (long k = 0; k < dims.r; ++k) p.planted_sigma(k) = std::exp(log_uniform(rng));
    for (long k = 0; k < dims.r; ++k) p.stored_sigma(k) = p.planted_sigma(k) * std::exp(opt.spectrum_log_std * normal(rng));
    p.w_frozen = gaussian(rng, dims.d_out, dims.d_in) / std::sqrt(static_cast<double>(dims.d_in));
    p.inputs = gaussian(rng, dims.n_cal, dims.d_in);

    const Matrix clean = p.inputs * (p.w_frozen + p.planted_delta_w()).transpose();
    const Matrix noise = gaussian(rng, dims.n_cal, dims.d_out);
    const double rms = clean.norm() / std::sqrt(static_cast<double>(clean.size()));
    p.targets = clean + (opt.noise * rms) * noise;

    p.factors = factors_from_spectrum(p.planted_u, p.stored_sigma, p.planted_v, p.scale);
    return p;
}

/// Same problem with the stored factors rebuilt from a different spectrum on the planted bases.
inline ToyProblem with_stored_sigma(ToyProblem p, const Vector& sigma) {
    if (sigma.size() != p.dims.r) throw Error(ErrorKind::invariant, "with_stored_sigma: length mismatch");
    p.stored_sigma = sigma;
    p.factors = factors_from_spectrum(p.planted_u, sigma, p.planted_v, p.scale);
    return p;
}

// Pairwise (cascade) summation: the result depends only on the input order, not on how
// callers split the work.
inline double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 8) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

inline Matrix residuals(const ToyProblem& p, const Matrix& delta_w) {
    return p.inputs * (p.w_frozen + delta_w).transpose() - p.targets;
}

inline double calib_loss(const ToyProblem& p, const Matrix& delta_w) {
    const Matrix e = residuals(p, delta_w);
    std::vector<double> per_example(static_cast<std::size_t>(e.rows()));
    for (Eigen::Index i = 0; i < e.rows(); ++i) per_example[static_cast<std::size_t>(i)] = e.row(i).squaredNorm();
    return pairwise_sum(per_example) / (2.0 * static_cast<double>(e.rows()));
}

inline double calib_loss(const ToyProblem& p) { return calib_loss(p, p.delta_w()); }

struct LossAndGrad {
    double loss = 0.0;
    Matrix grad;                        // d_out x d_in, averaged over examples
    std::optional<Matrix> per_example;  // n_cal x r, row i = diag(U^T e_i x_i^T V)
};

inline LossAndGrad calib_loss_and_grad(const ToyProblem& p, const Matrix& delta_w, const Matrix* u = nullptr,
                                       const Matrix* v = nullptr) {
    const Matrix e = residuals(p, delta_w);
    const double n = static_cast<double>(e.rows());
    LossAndGrad out;
    out.loss = calib_loss(p, delta_w);
    out.grad = e.transpose() * p.inputs / n;
    if (u && v) {
        // u_k^T (e_i x_i^T) v_k = (e_i . u_k) * (x_i . v_k)
        out.per_example = (e * *u).cwiseProduct(p.inputs * *v);
    }
    return out;
}

inline LossAndGrad calib_loss_and_grad(const ToyProblem& p, const Matrix* u = nullptr, const Matrix* v = nullptr) {
    return calib_loss_and_grad(p, p.delta_w(), u, v);
}

/// Central difference of the loss along sigma_k (0-based k) with dW = U diag(sigma) V^T.
inline double finite_diff_sensitivity(const ToyProblem& p, const SpectralUpdate& spec, long k, double eps) {
    if (k < 0 || k >= spec.rank()) throw Error(ErrorKind::invariant, "finite_diff_sensitivity: component out of range");
    if (!(eps > 0.0)) throw Error(ErrorKind::invariant, "finite_diff_sensitivity: eps must be > 0");
    SpectralUpdate plus = spec;
    SpectralUpdate minus = spec;
    plus.sigma(k) += eps;
    minus.sigma(k) -= eps;
    return (calib_loss(p, reconstruct(plus)) - calib_loss(p, reconstruct(minus))) / (2.0 * eps);
}

struct EndToEndResult {
    double loss_before = 0.0;
    double loss_after = 0.0;
    SpectralUpdate spectrum;
    SensitivityProfile profile;
    EditReportEntry report;
    FactorPair edited;
};

inline EndToEndResult run_end_to_end(const ToyProblem& p, const EditPolicyConfig& cfg,
                                     const std::string& module_path = "toy.o_proj") {
    cfg.validate();
    EndToEndResult out;
    out.spectrum = decompose(p.factors, p.scale, module_path);
    const LossAndGrad lg = calib_loss_and_grad(p, &out.spectrum.u, &out.spectrum.v);
    out.loss_before = lg.loss;
    out.profile = normalize(aggregate(*lg.per_example, Reducer::mean_abs));
    out.profile.module_path = module_path;
    EditOutcome edit = apply_edit(out.spectrum, out.profile, cfg);
    out.report = std::move(edit.entry);
    out.edited = edited_factors(p.factors, out.spectrum, edit.edited);
    out.loss_after = calib_loss(p, p.scale * out.edited.b * out.edited.a);
    return out;
}

}  // namespace spectral_surgeon::toy
