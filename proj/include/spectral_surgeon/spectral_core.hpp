// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/factors.hpp"

namespace spectral_surgeon {

/// Thin SVD of one module's effective update: u * diag(sigma) * v^T == scale * B * A.
///
/// Columns of u (d_out x r) and v (d_in x r) are orthonormal, sigma is sorted
/// nonincreasing. The rank is always the adapter rank; when the product is
/// rank-deficient the trailing sigma entries are zero and the matching basis
/// columns are an arbitrary orthonormal completion.
struct SpectralUpdate {
    std::string module_path;
    Matrix u;
    Vector sigma;
    Matrix v;
    double scale = 1.0;

    Eigen::Index rank() const { return sigma.size(); }
};

enum class EnergyMode { l1, none };

inline const char* to_string(EnergyMode mode) { return mode == EnergyMode::l1 ? "l1" : "none"; }

inline EnergyMode parse_energy_mode(const std::string& s) {
    if (s == "l1") return EnergyMode::l1;
    if (s == "none") return EnergyMode::none;
    throw Error(ErrorKind::usage, "unknown energy mode '" + s + "' (expected l1 or none)");
}

struct MagnitudeControlConfig {
    double sigma_clip_min = 0.0;
    EnergyMode energy_mode = EnergyMode::l1;
};

namespace detail {

// Flip (u_k, v_k) pairs so the largest-magnitude entry of each u_k is positive.
inline void canonicalize_signs(Matrix& u, Matrix& v) {
    for (Eigen::Index k = 0; k < u.cols(); ++k) {
        Eigen::Index arg = 0;
        u.col(k).cwiseAbs().maxCoeff(&arg);
        if (u(arg, k) < 0.0) {
            u.col(k) *= -1.0;
            v.col(k) *= -1.0;
        }
    }
}

struct ThinQr {
    Matrix q;  // n x r, orthonormal columns
    Matrix r;  // r x r, upper triangular
};

inline ThinQr thin_qr(const Matrix& m) {
    const Eigen::Index rows = m.rows();
    const Eigen::Index cols = m.cols();
    Eigen::HouseholderQR<Matrix> qr(m);
    ThinQr out;
    out.q = qr.householderQ() * Matrix::Identity(rows, cols);
    out.r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
    return out;
}

}  // namespace detail

// Factor B = Qb Rb and A^T = Qa Ra, take the SVD of the r x r core s * Rb * Ra^T,
// and lift the singular vectors back through Qb and Qa. The d_out x d_in product
// is never formed.
inline SpectralUpdate decompose(const FactorPair& factors, double scale, const std::string& module_path) {
    validate_factors(factors, module_path);
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw Error(ErrorKind::invariant, module_path + ": scale must be positive and finite");
    }

    const detail::ThinQr qb = detail::thin_qr(factors.b);
    const detail::ThinQr qa = detail::thin_qr(factors.a.transpose());
    const Matrix core = scale * qb.r * qa.r.transpose();

    Eigen::JacobiSVD<Matrix> svd(core, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.info() != Eigen::Success || !svd.singularValues().allFinite()) {
        throw Error(ErrorKind::numerical, module_path + ": SVD of the rank-r core failed");
    }

    SpectralUpdate out;
    out.module_path = module_path;
    out.scale = scale;
    out.sigma = svd.singularValues();
    out.u = qb.q * svd.matrixU();
    out.v = qa.q * svd.matrixV();
    detail::canonicalize_signs(out.u, out.v);
    return out;
}

inline Matrix reconstruct(const SpectralUpdate& spec) {
    return spec.u * spec.sigma.asDiagonal() * spec.v.transpose();
}

/// Splits the spectrum symmetrically so that scale * B' * A' == reconstruct(spec):
/// B' = U diag(sqrt(sigma / s)), A' = diag(sqrt(sigma / s)) V^T.
inline FactorPair refactor(const SpectralUpdate& spec) {
    if (!(spec.scale > 0.0)) {
        throw Error(ErrorKind::invariant, spec.module_path + ": scale must be positive");
    }
    if ((spec.sigma.array() < 0.0).any()) {
        throw Error(ErrorKind::invariant, spec.module_path + ": negative singular value");
    }
    const Vector root = (spec.sigma / spec.scale).cwiseSqrt();
    FactorPair out;
    out.b = spec.u * root.asDiagonal();
    out.a = root.asDiagonal() * spec.v.transpose();
    return out;
}

/// LoRA factors for an edited spectrum. A bitwise-unchanged spectrum keeps the original factors.
inline FactorPair edited_factors(const FactorPair& original, const SpectralUpdate& before, const SpectralUpdate& after) {
    if (after.sigma.size() == before.sigma.size() && after.sigma == before.sigma) return original;
    return refactor(after);
}

struct MagnitudeControlResult {
    Vector sigma;
    bool zero_mass = false;
    // l1 mass of the clipped spectrum relative to the original, before and after renormalization.
    double energy_ratio_pre = 1.0;
    double energy_ratio = 1.0;
};

inline double l1_ratio(double num, double den) {
    if (den > 0.0) return num / den;
    return num == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
}

inline MagnitudeControlResult apply_magnitude_control(const Vector& sigma_orig, const Vector& sigma_edited,
                                                      const MagnitudeControlConfig& cfg) {
    if (sigma_orig.size() != sigma_edited.size()) {
        throw Error(ErrorKind::invariant, "magnitude control: length mismatch");
    }
    if (!std::isfinite(cfg.sigma_clip_min) || cfg.sigma_clip_min < 0.0) {
        throw Error(ErrorKind::usage, "sigma_clip_min must be finite and >= 0");
    }
    MagnitudeControlResult out;
    out.sigma = sigma_edited.cwiseMax(cfg.sigma_clip_min);
    const double mass_orig = sigma_orig.sum();
    const double mass = out.sigma.sum();
    out.energy_ratio_pre = l1_ratio(mass, mass_orig);
    if (cfg.energy_mode == EnergyMode::l1) {
        if (mass > 0.0) {
            out.sigma *= mass_orig / mass;
        } else {
            out.zero_mass = true;
        }
    }
    out.energy_ratio = l1_ratio(out.sigma.sum(), mass_orig);
    return out;
}

}  // namespace spectral_surgeon
