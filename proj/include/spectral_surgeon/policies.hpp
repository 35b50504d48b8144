// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/adapter_io.hpp"
#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/sensitivity.hpp"
#include "spectral_surgeon/spectral_core.hpp"

namespace spectral_surgeon {

enum class Policy { abs_select, smooth_abs, random_index, grad_direction };

inline const char* to_string(Policy p) {
    switch (p) {
        case Policy::abs_select: return "abs_select";
        case Policy::smooth_abs: return "smooth_abs";
        case Policy::random_index: return "random_index";
        case Policy::grad_direction: return "grad_direction";
    }
    return "?";
}

inline Policy parse_policy(const std::string& s) {
    if (s == "abs_select") return Policy::abs_select;
    if (s == "smooth_abs") return Policy::smooth_abs;
    if (s == "random_index") return Policy::random_index;
    if (s == "grad_direction") return Policy::grad_direction;
    throw Error(ErrorKind::usage, "unknown policy '" + s + "'");
}

/// Hyperparameters for every edit policy. Defaults are the reference experimental values.
struct EditPolicyConfig {
    Policy policy = Policy::abs_select;
    double core_frac = 0.2;
    double noise_frac = 0.2;
    long min_core_k = 1;
    double amp_factor = 1.25;
    double sup_factor = 0.80;
    double mid_factor = 1.0;
    double smooth_temperature = 0.35;
    double smooth_center_q = 0.5;
    bool smooth_align_mid = false;
    double eta_suppress = 2.0;
    double eta_enhance = 0.2;
    double eta = 0.5;
    bool asymmetric_update = true;
    double grad_power = 1.0;
    std::uint64_t seed = 0;
    MagnitudeControlConfig magnitude;

    void validate() const {
        auto fail = [](const std::string& msg) { throw Error(ErrorKind::usage, msg); };
        if (!(core_frac >= 0.0 && core_frac <= 1.0)) fail("core_frac must lie in [0, 1]");
        if (!(noise_frac >= 0.0 && noise_frac <= 1.0)) fail("noise_frac must lie in [0, 1]");
        if (min_core_k < 0) fail("min_core_k must be >= 0");
        if (!std::isfinite(amp_factor) || !std::isfinite(sup_factor) || !std::isfinite(mid_factor)) {
            fail("gate factors must be finite");
        }
        if (!(smooth_temperature > 0.0) || !std::isfinite(smooth_temperature)) fail("smooth_temperature must be > 0");
        if (!(smooth_center_q > 0.0 && smooth_center_q < 1.0)) fail("smooth_center_q must lie in (0, 1)");
        if (!std::isfinite(eta_suppress) || !std::isfinite(eta_enhance) || !std::isfinite(eta)) fail("step sizes must be finite");
        if (!(grad_power >= 0.0) || !std::isfinite(grad_power)) fail("grad_power must be >= 0");
        if (!std::isfinite(magnitude.sigma_clip_min) || magnitude.sigma_clip_min < 0.0) fail("sigma_clip_min must be >= 0");
    }
};

inline nlohmann::json to_json(const EditPolicyConfig& c) {
    return {
        {"policy", to_string(c.policy)},
        {"core_frac", c.core_frac},
        {"noise_frac", c.noise_frac},
        {"min_core_k", c.min_core_k},
        {"amp_factor", c.amp_factor},
        {"sup_factor", c.sup_factor},
        {"mid_factor", c.mid_factor},
        {"smooth_temperature", c.smooth_temperature},
        {"smooth_center_q", c.smooth_center_q},
        {"smooth_align_mid", c.smooth_align_mid},
        {"eta_suppress", c.eta_suppress},
        {"eta_enhance", c.eta_enhance},
        {"eta", c.eta},
        {"asymmetric_update", c.asymmetric_update},
        {"grad_power", c.grad_power},
        {"seed", c.seed},
        {"sigma_clip_min", c.magnitude.sigma_clip_min},
        {"preserve_energy", to_string(c.magnitude.energy_mode)},
    };
}

// ---------------------------------------------------------------------------
// Hard selection counts
// ---------------------------------------------------------------------------

struct SelectionCounts {
    long k_core = 0;
    long k_noise = 0;
};

// std::round rounds halfway cases away from zero.
inline long round_half_away(double v) { return static_cast<long>(std::round(v)); }

inline SelectionCounts selection_counts(long r, double core_frac, double noise_frac, long min_core_k) {
    if (r < 1) throw Error(ErrorKind::invariant, "selection_counts: rank must be >= 1");
    const double rd = static_cast<double>(r);
    SelectionCounts c;
    c.k_core = std::min(r, std::max(round_half_away(rd * core_frac), min_core_k));
    c.k_core = std::max(c.k_core, 0L);
    c.k_noise = std::clamp(round_half_away(rd * noise_frac), 0L, r - c.k_core);
    return c;
}

inline SelectionCounts selection_counts(long r, const EditPolicyConfig& cfg) {
    return selection_counts(r, cfg.core_frac, cfg.noise_frac, cfg.min_core_k);
}

// ---------------------------------------------------------------------------
// Per-module RNG
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based generator: draw i is splitmix64(key + i * golden). The key
/// mixes the seed with the FNV-1a hash of the module path, so each module's
/// stream is independent of the order modules are processed in.
class ModuleRng {
public:
    using result_type = std::uint64_t;

    ModuleRng(std::uint64_t seed, std::string_view module_path)
        : key_(splitmix64(seed ^ fnv1a(module_path))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }

    result_type operator()() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }

    // Uniform integer in [0, bound), unbiased (Lemire's multiply-and-reject).
    std::uint64_t below(std::uint64_t bound) {
        if (bound == 0) throw Error(ErrorKind::invariant, "ModuleRng::below: empty range");
        unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<unsigned __int128>((*this)()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Alpha vectors
// ---------------------------------------------------------------------------

struct AlphaResult {
    Vector alpha;
    std::optional<SelectionCounts> counts;
    std::vector<std::string> flags;
};

namespace detail {

inline Vector three_level(long r, const std::vector<long>& core, const std::vector<long>& noise,
                          const EditPolicyConfig& cfg) {
    Vector alpha = Vector::Constant(r, cfg.mid_factor);
    for (long i : core) alpha(i) = cfg.amp_factor;
    for (long i : noise) alpha(i) = cfg.sup_factor;
    return alpha;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace detail

/// Linear-interpolation quantile on sorted values at position (n - 1) * q.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw Error(ErrorKind::invariant, "quantile of an empty vector");
    const double pos = static_cast<double>(sorted.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac;
}

inline double quantile(const Vector& x, double q) {
    std::vector<double> v(x.data(), x.data() + x.size());
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, q);
}

// A profile is degenerate exactly when its normalized magnitudes are all zero.
inline bool is_degenerate_signal(const Vector& x) { return x.size() == 0 || (x.array() == 0.0).all(); }

/// Top-k_core of x get amp_factor, bottom-k_noise of the rest get sup_factor,
/// others mid_factor. Ties go to the lower index in both selections.
inline AlphaResult alpha_abs_select(const Vector& x, const EditPolicyConfig& cfg) {
    const long r = x.size();
    AlphaResult out;
    const SelectionCounts counts = selection_counts(r, cfg);
    out.counts = counts;
    if (is_degenerate_signal(x)) {
        out.alpha = Vector::Constant(r, cfg.mid_factor);
        out.flags.emplace_back("degenerate_profile");
        return out;
    }
    std::vector<long> order(static_cast<std::size_t>(r));
    std::iota(order.begin(), order.end(), 0L);
    std::stable_sort(order.begin(), order.end(), [&](long i, long j) { return x(i) > x(j); });
    std::vector<long> core(order.begin(), order.begin() + counts.k_core);
    std::vector<long> rest(order.begin() + counts.k_core, order.end());
    std::sort(rest.begin(), rest.end());
    std::stable_sort(rest.begin(), rest.end(), [&](long i, long j) { return x(i) < x(j); });
    std::vector<long> noise(rest.begin(), rest.begin() + counts.k_noise);
    out.alpha = detail::three_level(r, core, noise, cfg);
    return out;
}

/// Sigmoid gate between sup_factor and amp_factor, centred on a quantile of x
/// with a temperature proportional to an inter-quantile range.
inline AlphaResult alpha_smooth_abs(const Vector& x, const EditPolicyConfig& cfg) {
    const long r = x.size();
    AlphaResult out;
    if (r == 0) {
        out.alpha = Vector();
        return out;
    }
    const double xmax = x.maxCoeff();
    const double xmin = x.minCoeff();
    auto flat = [&](const char* flag) {
        out.alpha = Vector::Constant(r, cfg.mid_factor);
        out.flags.emplace_back(flag);
        return out;
    };
    if (is_degenerate_signal(x)) return flat("degenerate_profile");
    if (xmax - xmin < 1e-8 * std::max(1.0, xmax)) return flat("smooth_degenerate");

    std::vector<double> sorted(x.data(), x.data() + r);
    std::sort(sorted.begin(), sorted.end());
    double q_lo = cfg.noise_frac;
    double q_hi = 1.0 - cfg.core_frac;
    if (q_hi <= q_lo) {
        q_lo = 0.25;
        q_hi = 0.75;
    }
    const double tau = cfg.smooth_temperature * (quantile_sorted(sorted, q_hi) - quantile_sorted(sorted, q_lo));
    if (!(tau > 0.0)) return flat("smooth_degenerate");

    double mu = quantile_sorted(sorted, cfg.smooth_center_q);
    if (cfg.smooth_align_mid) {
        const double lo = std::min(cfg.sup_factor, cfg.amp_factor);
        const double hi = std::max(cfg.sup_factor, cfg.amp_factor);
        if (cfg.mid_factor > lo && cfg.mid_factor < hi) {
            const double t = (cfg.mid_factor - cfg.sup_factor) / (cfg.amp_factor - cfg.sup_factor);
            mu -= tau * std::log(t / (1.0 - t));
        } else {
            out.flags.emplace_back("align_mid_ignored");
        }
    }
    out.alpha.resize(r);
    for (long k = 0; k < r; ++k) {
        out.alpha(k) = cfg.sup_factor + (cfg.amp_factor - cfg.sup_factor) * detail::sigmoid((x(k) - mu) / tau);
    }
    return out;
}

/// Same counts and levels as abs_select, indices drawn uniformly without replacement.
inline AlphaResult alpha_random_index(long r, const EditPolicyConfig& cfg, std::string_view module_path) {
    AlphaResult out;
    const SelectionCounts counts = selection_counts(r, cfg);
    out.counts = counts;
    ModuleRng rng(cfg.seed, module_path);
    std::vector<long> idx(static_cast<std::size_t>(r));
    std::iota(idx.begin(), idx.end(), 0L);
    const long picks = counts.k_core + counts.k_noise;
    for (long i = 0; i < picks; ++i) {
        const long j = i + static_cast<long>(rng.below(static_cast<std::uint64_t>(r - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    std::vector<long> core(idx.begin(), idx.begin() + counts.k_core);
    std::vector<long> noise(idx.begin() + counts.k_core, idx.begin() + picks);
    out.alpha = detail::three_level(r, core, noise, cfg);
    return out;
}

/// Multiplicative signed step alpha_k = exp(-g_eff_k).
inline AlphaResult alpha_grad_direction(const Vector& g_tilde, const EditPolicyConfig& cfg) {
    require_finite(g_tilde, "normalized signed sensitivities");
    AlphaResult out;
    out.alpha.resize(g_tilde.size());
    for (Eigen::Index k = 0; k < g_tilde.size(); ++k) {
        const double g = g_tilde(k);
        double g_eff = 0.0;
        if (cfg.asymmetric_update) {
            const double pos = std::max(g, 0.0);
            const double neg = -std::max(-g, 0.0);
            const double shaped = pos > 0.0 ? std::pow(pos, cfg.grad_power) : 0.0;
            g_eff = cfg.eta_suppress * shaped + cfg.eta_enhance * neg;
        } else {
            g_eff = cfg.eta * g;
        }
        out.alpha(k) = std::exp(-g_eff);
    }
    return out;
}

inline AlphaResult compute_alpha(const SensitivityProfile& profile, const EditPolicyConfig& cfg) {
    switch (cfg.policy) {
        case Policy::abs_select: return alpha_abs_select(profile.x_normalized, cfg);
        case Policy::smooth_abs: return alpha_smooth_abs(profile.x_normalized, cfg);
        case Policy::random_index: return alpha_random_index(profile.rank(), cfg, profile.module_path);
        case Policy::grad_direction: {
            AlphaResult out = alpha_grad_direction(profile.g_tilde, cfg);
            if (profile.degenerate) out.flags.emplace_back("degenerate_profile");
            return out;
        }
    }
    throw Error(ErrorKind::usage, "unknown policy");
}

/// Scales the spectrum by an explicit alpha and applies magnitude control.
inline std::pair<SpectralUpdate, MagnitudeControlResult> apply_alpha(const SpectralUpdate& spec, const Vector& alpha,
                                                                     const MagnitudeControlConfig& magnitude) {
    if (alpha.size() != spec.rank()) {
        throw Error(ErrorKind::invariant, spec.module_path + ": alpha length differs from rank");
    }
    MagnitudeControlResult mc = apply_magnitude_control(spec.sigma, alpha.cwiseProduct(spec.sigma), magnitude);
    SpectralUpdate edited = spec;
    edited.sigma = mc.sigma;
    return {std::move(edited), std::move(mc)};
}

struct EditOutcome {
    SpectralUpdate edited;
    EditReportEntry entry;
};

/// sigma' = alpha * sigma followed by magnitude control. U and V are carried over unchanged.
inline EditOutcome apply_edit(const SpectralUpdate& spec, const SensitivityProfile& profile,
                              const EditPolicyConfig& cfg) {
    if (profile.rank() != spec.rank() || profile.x_normalized.size() != spec.rank() ||
        profile.g_tilde.size() != spec.rank()) {
        throw Error(ErrorKind::invariant, spec.module_path + ": rank mismatch between spectrum and sensitivity profile");
    }
    AlphaResult a = compute_alpha(profile, cfg);
    auto [edited, mc] = apply_alpha(spec, a.alpha, cfg.magnitude);

    EditOutcome out;
    out.edited = std::move(edited);

    EditReportEntry& e = out.entry;
    e.module_path = spec.module_path;
    e.alpha = a.alpha;
    e.sigma_before = spec.sigma;
    e.sigma_after = mc.sigma;
    if (a.counts) {
        e.k_core = a.counts->k_core;
        e.k_noise = a.counts->k_noise;
    }
    e.energy_ratio_pre = mc.energy_ratio_pre;
    e.energy_ratio = mc.energy_ratio;
    e.flags = std::move(a.flags);
    if (mc.zero_mass) e.flags.emplace_back("zero_mass");
    return out;
}

}  // namespace spectral_surgeon
