// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include "spectral_surgeon/adapter_io.hpp"
#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/spectral_core.hpp"

namespace spectral_surgeon {

enum class Reducer { mean_abs, mean_signed };

inline const char* to_string(Reducer r) { return r == Reducer::mean_abs ? "mean_abs" : "mean_signed"; }

inline Reducer parse_reducer(const std::string& s) {
    if (s == "mean_abs") return Reducer::mean_abs;
    if (s == "mean_signed") return Reducer::mean_signed;
    throw Error(ErrorKind::usage, "unknown reducer '" + s + "' (expected mean_abs or mean_signed)");
}

/// Per-component edit signal for one module.
///
/// `g_signed` and `s_magnitude` are the calibration means of the signed and
/// absolute per-example projections. `x_normalized` and `g_tilde` divide the
/// driving magnitude and the signed mean by the same within-module mean, so
/// mean(x_normalized) == 1 unless the profile is degenerate.
struct SensitivityProfile {
    std::string module_path;
    Vector g_signed;
    Vector s_magnitude;
    Vector x_normalized;
    Vector g_tilde;
    long n_cal = 0;
    Reducer reducer = Reducer::mean_abs;
    bool degenerate = false;

    Eigen::Index rank() const { return g_signed.size(); }

    // Magnitude that drives abs_select / smooth_abs.
    Vector driving_magnitude() const {
        return reducer == Reducer::mean_abs ? s_magnitude : Vector(g_signed.cwiseAbs());
    }
};

/// g_k = u_k^T G v_k for every k, read off the diagonal of U^T G V.
inline Vector project_gradient(const Matrix& u, const Matrix& v, const Matrix& grad) {
    if (grad.rows() != u.rows() || grad.cols() != v.rows() || u.cols() != v.cols()) {
        throw Error(ErrorKind::invariant,
                    "project_gradient: shape mismatch (grad " + std::to_string(grad.rows()) + "x" +
                        std::to_string(grad.cols()) + ", U " + std::to_string(u.rows()) + "x" +
                        std::to_string(u.cols()) + ", V " + std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()) + ")");
    }
    const Matrix ut_g = u.transpose() * grad;  // r x d_in
    Vector g(u.cols());
    for (Eigen::Index k = 0; k < u.cols(); ++k) g(k) = ut_g.row(k).dot(v.col(k));
    return g;
}

// Rows are calibration examples, columns are singular components.
inline SensitivityProfile aggregate(const Matrix& per_example, Reducer reducer = Reducer::mean_abs) {
    if (per_example.rows() < 1 || per_example.cols() < 1) {
        throw Error(ErrorKind::invariant, "aggregate: empty per-example projection matrix");
    }
    require_finite(per_example, "per-example projections");
    SensitivityProfile p;
    p.n_cal = per_example.rows();
    p.reducer = reducer;
    const double inv_n = 1.0 / static_cast<double>(per_example.rows());
    p.g_signed = per_example.colwise().sum().transpose() * inv_n;
    p.s_magnitude = per_example.cwiseAbs().colwise().sum().transpose() * inv_n;
    return p;
}

inline SensitivityProfile normalize(SensitivityProfile p) {
    const Vector s = p.driving_magnitude();
    const double m = s.size() > 0 ? s.mean() : 0.0;
    if (m > 0.0) {
        p.degenerate = false;
        p.x_normalized = s / m;
        p.g_tilde = p.g_signed / m;
    } else {
        p.degenerate = true;
        p.x_normalized = Vector::Zero(s.size());
        p.g_tilde = Vector::Zero(s.size());
    }
    return p;
}

/// Complete profiles for every decomposition from a gradient dump.
///
/// full_matrix entries are projected and then aggregated as a single example;
/// projections entries are aggregated directly and must have been computed
/// against the same exported bases (checked through the dump's basis checksum).
inline std::map<std::string, SensitivityProfile> sensitivities_from_dump(std::span<const SpectralUpdate> decompositions,
                                                                        const GradientDump& dump,
                                                                        Reducer reducer = Reducer::mean_abs) {
    for (const SpectralUpdate& s : decompositions) {
        if (!dump.entries.contains(s.module_path)) {
            throw Error(ErrorKind::coverage, "gradient dump does not cover module " + s.module_path);
        }
    }
    if (dump.mode == GradientMode::projections) {
        if (!dump.basis_checksum) {
            throw Error(ErrorKind::coverage, "projections dump carries no basis checksum");
        }
        const std::uint64_t expected = basis_checksum(decompositions);
        if (*dump.basis_checksum != expected) {
            throw Error(ErrorKind::coverage, "basis checksum mismatch (dump " + to_hex(*dump.basis_checksum) +
                                                 ", current bases " + to_hex(expected) + "); bases are stale");
        }
    }

    std::vector<SensitivityProfile> profiles(decompositions.size());
    parallel_for(decompositions.size(), [&](std::size_t i) {
        const SpectralUpdate& s = decompositions[i];
        const Matrix& entry = dump.entries.at(s.module_path);
        Matrix per_example;
        if (dump.mode == GradientMode::full_matrix) {
            per_example = project_gradient(s.u, s.v, entry).transpose();
        } else {
            if (entry.cols() != s.rank()) {
                throw Error(ErrorKind::invariant, s.module_path + ": projection width " + std::to_string(entry.cols()) +
                                                      " differs from rank " + std::to_string(s.rank()));
            }
            per_example = entry;
        }
        SensitivityProfile p = normalize(aggregate(per_example, reducer));
        p.module_path = s.module_path;
        if (dump.mode == GradientMode::full_matrix) p.n_cal = dump.n_cal;
        profiles[i] = std::move(p);
    });

    std::map<std::string, SensitivityProfile> out;
    for (auto& p : profiles) out.emplace(p.module_path, std::move(p));
    return out;
}

}  // namespace spectral_surgeon
