// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Invariant suites run by `spectral_surgeon verify`. Each suite draws its own
// seeded problems and reports the worst observed error against its tolerance.

#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/policies.hpp"
#include "spectral_surgeon/sensitivity.hpp"
#include "spectral_surgeon/spectral_core.hpp"
#include "spectral_surgeon/toy_harness.hpp"

namespace spectral_surgeon::verify {

struct SuiteResult {
    std::string name;
    bool passed = true;
    double max_error = 0.0;
    double tolerance = 0.0;
    long cases = 0;
    std::string detail;
};

inline nlohmann::json to_json(const SuiteResult& r) {
    return {{"suite", r.name}, {"passed", r.passed}, {"max_error", r.max_error},
            {"tolerance", r.tolerance}, {"cases", r.cases}, {"detail", r.detail}};
}

struct Options {
    std::uint64_t seed = 20260101;
    long cases = 20;
    // Test hook: reverse each decomposed spectrum before the ordering check.
    bool inject_sigma_order_violation = false;
};

inline double orthonormality_error(const Matrix& q) {
    return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

// max of ||(I - UU^T) dW||_F and ||dW (I - VV^T)||_F relative to ||dW||_F.
inline double containment_error(const SpectralUpdate& basis, const Matrix& dw) {
    const double norm = dw.norm();
    if (norm == 0.0) return 0.0;
    const Matrix left = dw - basis.u * (basis.u.transpose() * dw);
    const Matrix right = dw - (dw * basis.v) * basis.v.transpose();
    return std::max(left.norm(), right.norm()) / norm;
}

namespace detail {

struct Instance {
    FactorPair factors;
    double scale;
};

inline Instance random_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<long> rank(1, 16);
    const long r = rank(rng);
    std::uniform_int_distribution<long> out_dim(r, 128);
    std::uniform_int_distribution<long> in_dim(r, 96);
    const long d_out = out_dim(rng);
    const long d_in = in_dim(rng);
    return {toy::random_factor_pair(rng(), d_out, d_in, r), 16.0 / static_cast<double>(r)};
}

inline SuiteResult run_cases(const std::string& name, double tol, long cases,
                             const std::function<double(long)>& measure) {
    SuiteResult res;
    res.name = name;
    res.tolerance = tol;
    res.cases = cases;
    for (long i = 0; i < cases; ++i) {
        const double err = measure(i);
        if (!(err <= tol)) {
            if (res.passed) res.detail = "case " + std::to_string(i) + " error " + std::to_string(err);
            res.passed = false;
        }
        if (std::isnan(err)) res.max_error = err;
        else if (!std::isnan(res.max_error)) res.max_error = std::max(res.max_error, err);
    }
    return res;
}

inline SensitivityProfile random_profile(std::mt19937_64& rng, const std::string& path, long r) {
    Matrix rows = toy::gaussian(rng, 16, r);
    SensitivityProfile p = normalize(aggregate(rows));
    p.module_path = path;
    return p;
}

}  // namespace detail

inline SuiteResult orthonormality(const Options& o) {
    return detail::run_cases("orthonormality", 1e-10, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        return std::max(orthonormality_error(s.u), orthonormality_error(s.v));
    });
}

inline SuiteResult reconstruction(const Options& o) {
    return detail::run_cases("reconstruction", 1e-10, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        const Matrix want = inst.scale * inst.factors.b * inst.factors.a;
        return relative_frobenius(reconstruct(s), want);
    });
}

inline SuiteResult spectrum_order(const Options& o) {
    return detail::run_cases("spectrum_order", 0.0, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        if (o.inject_sigma_order_violation) s.sigma.reverseInPlace();
        double worst = 0.0;
        for (Eigen::Index k = 1; k < s.sigma.size(); ++k) worst = std::max(worst, s.sigma(k) - s.sigma(k - 1));
        if ((s.sigma.array() < 0.0).any()) worst = std::max(worst, -s.sigma.minCoeff());
        return worst;
    });
}

inline SuiteResult refactoring(const Options& o) {
    return detail::run_cases("refactor", 1e-9, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        const FactorPair f = refactor(s);
        return relative_frobenius(s.scale * f.b * f.a, reconstruct(s));
    });
}

inline SuiteResult containment(const Options& o) {
    const Policy policies[] = {Policy::abs_select, Policy::smooth_abs, Policy::random_index, Policy::grad_direction};
    return detail::run_cases("containment", 1e-9, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        std::mt19937_64 rng(o.seed ^ static_cast<std::uint64_t>(i));
        const SensitivityProfile profile = detail::random_profile(rng, "case", s.rank());
        double worst = 0.0;
        for (Policy p : policies) {
            EditPolicyConfig cfg;
            cfg.policy = p;
            cfg.seed = static_cast<std::uint64_t>(i);
            const EditOutcome e = apply_edit(s, profile, cfg);
            worst = std::max(worst, containment_error(s, reconstruct(e.edited)));
        }
        return worst;
    });
}

inline SuiteResult energy(const Options& o) {
    return detail::run_cases("energy", 1e-12, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        std::mt19937_64 rng(o.seed + 7 * static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> unif(0.1, 3.0);
        Vector alpha(s.rank());
        for (auto& a : alpha) a = unif(rng);
        const auto [edited, mc] = apply_alpha(s, alpha, MagnitudeControlConfig{});
        return std::abs(edited.sigma.sum() - s.sigma.sum()) / s.sigma.sum();
    });
}

inline SuiteResult noop(const Options& o) {
    return detail::run_cases("noop", 1e-12, o.cases, [&](long i) {
        const auto inst = detail::random_instance(o.seed + static_cast<std::uint64_t>(i));
        const SpectralUpdate s = decompose(inst.factors, inst.scale, "case");
        const double c = 0.25 + 0.5 * static_cast<double>(i);
        const auto [edited, mc] = apply_alpha(s, Vector::Constant(s.rank(), c), MagnitudeControlConfig{});
        return (edited.sigma - s.sigma).cwiseAbs().maxCoeff() / std::max(s.sigma.maxCoeff(), 1e-300);
    });
}

// Max relative disagreement between u_k^T G v_k and a central difference of the loss.
inline double finite_difference_error(const toy::ToyProblem& p) {
    const SpectralUpdate s = decompose(p.factors, p.scale, "toy");
    const toy::LossAndGrad lg = toy::calib_loss_and_grad(p, reconstruct(s));
    const Vector g = project_gradient(s.u, s.v, lg.grad);
    double worst = 0.0;
    for (long k = 0; k < s.rank(); ++k) {
        const double eps = 1e-5 * std::max(1.0, s.sigma(k));
        const double fd = toy::finite_diff_sensitivity(p, s, k, eps);
        const double denom = std::max(std::abs(fd), std::abs(g(k)));
        if (denom > 0.0) worst = std::max(worst, std::abs(fd - g(k)) / denom);
    }
    return worst;
}

inline SuiteResult finite_difference(const Options& o) {
    return detail::run_cases("finite_difference", 1e-4, o.cases, [&](long i) {
        const toy::ToyProblem p = toy::build_toy_problem(o.seed + 1000 + static_cast<std::uint64_t>(i), toy::Dims{48, 32, 8, 64});
        return finite_difference_error(p);
    });
}

struct NamedSuite {
    const char* name;
    SuiteResult (*run)(const Options&);
};

inline const std::vector<NamedSuite>& all_suites() {
    static const std::vector<NamedSuite> suites = {
        {"orthonormality", &orthonormality}, {"reconstruction", &reconstruction},
        {"spectrum_order", &spectrum_order}, {"refactor", &refactoring},
        {"containment", &containment},       {"energy", &energy},
        {"noop", &noop},                     {"finite_difference", &finite_difference},
    };
    return suites;
}

inline std::vector<SuiteResult> run(const std::vector<std::string>& selected, const Options& o) {
    std::set<std::string> known;
    for (const auto& s : all_suites()) known.insert(s.name);
    for (const auto& name : selected) {
        if (!known.contains(name)) throw Error(ErrorKind::usage, "unknown verify suite '" + name + "'");
    }
    std::vector<SuiteResult> out;
    for (const auto& s : all_suites()) {
        if (selected.empty() || std::find(selected.begin(), selected.end(), s.name) != selected.end()) {
            out.push_back(s.run(o));
        }
    }
    return out;
}

}  // namespace spectral_surgeon::verify
