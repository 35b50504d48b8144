// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails or exceeds its runtime budget.

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "spectral_surgeon/cli.hpp"
#include "test_util.hpp"

namespace ss = spectral_surgeon;
namespace toy = spectral_surgeon::toy;
namespace st = spectral_surgeon::safetensors;
using ss::Matrix;
using ss::Vector;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void check(bool cond, const std::string& what) {
        if (!cond && ok) detail = what;
        ok = ok && cond;
    }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

int failures = 0;

void criterion(const char* name, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.ok = false;
        o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= budget_s) o.check(false, "runtime " + fmt(secs) + " s exceeds " + fmt(budget_s) + " s");
    std::printf("%s  %-28s  %8.3f s  %s\n", o.ok ? "PASS" : "FAIL", name, secs, o.detail.c_str());
    std::fflush(stdout);
    if (!o.ok) ++failures;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), out.data());
    return out;
}

std::map<double, int> multiset(const Vector& a) {
    std::map<double, int> m;
    for (double v : a) ++m[v];
    return m;
}

Outcome accounting() {
    Outcome o;
    o.check(ss::count_edited_scalars(32, 2, 16) == 1024, "(32,2,16) != 1024");
    o.check(ss::count_edited_scalars(36, 2, 16) == 1152, "(36,2,16) != 1152");
    return o;
}

Outcome random_baseline() {
    Outcome o;
    std::mt19937_64 rng(512);
    std::vector<double> xs;
    for (int t = 0; t < 200; ++t) {
        xs.push_back(ss::align_subspace(toy::random_orthonormal(rng, 512, 4), toy::random_orthonormal(rng, 512, 4)));
    }
    const double m = mean_of(xs), se = stderr_of(xs);
    o.check(std::abs(m - 4.0 / 512.0) <= 3.0 * se, "mean " + fmt(m) + " vs 4/512 (3se " + fmt(3 * se) + ")");
    const double base = ss::random_subspace_baseline(4096, 16);
    o.check(base == 16.0 / 4096.0 && std::abs(base - 0.0039) < 5e-5, "baseline(4096,16) = " + fmt(base));
    if (o.ok) o.detail = "mean " + fmt(m) + ", baseline(4096,16) " + fmt(base);
    return o;
}

Outcome svd_suite() {
    Outcome o;
    std::mt19937_64 rng(50);
    double worst_orth = 0, worst_rec = 0, worst_sig = 0;
    for (int i = 0; i < 50; ++i) {
        const long r = 1 + static_cast<long>(rng() % 16);
        const long d_out = r + static_cast<long>(rng() % (129 - r));
        const long d_in = r + static_cast<long>(rng() % (97 - r));
        const auto f = toy::random_factor_pair(rng(), d_out, d_in, r);
        const double scale = 16.0 / static_cast<double>(r);
        const auto s = ss::decompose(f, scale, "case");
        const Matrix dense = oracle::explicit_product(f.b, f.a, scale);
        const auto ref = oracle::dense_svd(dense);
        auto gram = [](const Matrix& q) {
            return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
        };
        worst_orth = std::max({worst_orth, gram(s.u), gram(s.v)});
        worst_rec = std::max(worst_rec, ss::relative_frobenius(ss::reconstruct(s), dense));
        for (long k = 0; k < r; ++k) worst_sig = std::max(worst_sig, std::abs(s.sigma(k) - ref.sigma(k)));
    }
    o.check(worst_orth <= 1e-10, "orthonormality " + fmt(worst_orth));
    o.check(worst_rec <= 1e-10, "reconstruction " + fmt(worst_rec));
    o.check(worst_sig <= 1e-8, "spectrum vs oracle " + fmt(worst_sig));
    if (o.ok) o.detail = "orth " + fmt(worst_orth) + ", recon " + fmt(worst_rec) + ", sigma " + fmt(worst_sig);
    return o;
}

Outcome sensitivity_oracle() {
    Outcome o;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = toy::build_toy_problem(7000 + seed, {48, 32, 8, 64});
        const auto s = ss::decompose(p.factors, p.scale, "toy");
        const Vector g = ss::project_gradient(s.u, s.v, toy::calib_loss_and_grad(p).grad);
        for (long k = 0; k < s.rank(); ++k) {
            const double fd = toy::finite_diff_sensitivity(p, s, k, 1e-5 * std::max(1.0, s.sigma(k)));
            worst = std::max(worst, std::abs(fd - g(k)) / std::abs(fd));
        }
    }
    o.check(worst <= 1e-4, "max relative error " + fmt(worst));
    if (o.ok) o.detail = "max relative error " + fmt(worst);
    return o;
}

Outcome policy_formulas() {
    Outcome o;
    ss::EditPolicyConfig cfg;
    const auto c1 = ss::selection_counts(16, 0.2, 0.2, 1);
    const auto c2 = ss::selection_counts(16, 1.0, 0.2, 1);
    const auto c3 = ss::selection_counts(4, 0.1, 0.9, 1);
    o.check(c1.k_core == 3 && c1.k_noise == 3, "selection_counts(16, .2, .2, 1)");
    o.check(c2.k_core == 16 && c2.k_noise == 0, "selection_counts(16, 1, .2, 1)");
    o.check(c3.k_core == 1 && c3.k_noise == 3, "selection_counts(4, .1, .9, 1)");

    ss::EditPolicyConfig quarter = cfg;
    quarter.core_frac = quarter.noise_frac = 0.25;
    o.check(ss::alpha_abs_select(vec({4, 3, 2, 1}), quarter).alpha == vec({1.25, 1.0, 1.0, 0.80}), "abs_select placement");
    o.check(ss::alpha_abs_select(Vector::Zero(4), cfg).alpha == Vector::Ones(4), "abs_select degenerate");
    ss::EditPolicyConfig ties = cfg;
    ties.core_frac = 0.5;
    ties.noise_frac = 0.25;
    o.check(ss::alpha_abs_select(Vector::Ones(4), ties).alpha == vec({1.25, 1.25, 0.80, 1.0}), "abs_select ties");

    double worst = 0.0;
    const Vector mid = ss::alpha_smooth_abs(vec({0.2, 0.8, 1.0, 2.0, 0.9}), cfg).alpha;
    worst = std::max(worst, std::abs(mid(4) - 1.025));
    const Vector want = vec({0.8380865385676803692, 0.98709939268887862391, 1.0629006073111213761, 1.2395739308360343013});
    worst = std::max(worst, (ss::alpha_smooth_abs(vec({0.2, 0.8, 1.0, 2.0}), cfg).alpha - want).cwiseAbs().maxCoeff());

    const Vector gd = ss::alpha_grad_direction(vec({0.5, -0.5, 0.0}), cfg).alpha;
    worst = std::max(worst, std::abs(gd(0) - 0.36787944117144232160));
    worst = std::max(worst, std::abs(gd(1) - 1.1051709180756476248));
    worst = std::max(worst, std::abs(gd(2) - 1.0));
    ss::EditPolicyConfig sym = cfg;
    sym.asymmetric_update = false;
    const Vector gs = ss::alpha_grad_direction(vec({1.0, -1.0}), sym).alpha;
    worst = std::max(worst, std::abs(gs(0) - 0.60653065971263342360));
    worst = std::max(worst, std::abs(gs(1) - 1.6487212707001281468));
    o.check(worst <= 1e-12, "closed-form deviation " + fmt(worst));
    if (o.ok) o.detail = "max closed-form deviation " + fmt(worst);
    return o;
}

Outcome conservation() {
    Outcome o;
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> unif(0.1, 3.0);
    double worst_energy = 0, worst_noop = 0, worst_contain = 0;
    const ss::Policy policies[] = {ss::Policy::abs_select, ss::Policy::smooth_abs, ss::Policy::random_index,
                                   ss::Policy::grad_direction};
    for (int i = 0; i < 40; ++i) {
        const long r = 2 + static_cast<long>(rng() % 15);
        const auto s = ss::decompose(toy::random_factor_pair(rng(), 40 + r, 30 + r, r), 2.0, "case");
        Vector alpha(r);
        for (auto& a : alpha) a = unif(rng);
        const auto [edited, mc] = ss::apply_alpha(s, alpha, {});
        worst_energy = std::max(worst_energy, std::abs(edited.sigma.sum() - s.sigma.sum()) / s.sigma.sum());

        const auto [same, mc2] = ss::apply_alpha(s, Vector::Constant(r, unif(rng)), {});
        worst_noop = std::max(worst_noop, (same.sigma - s.sigma).norm() / s.sigma.norm());

        ss::SensitivityProfile prof = ss::normalize(ss::aggregate(toy::gaussian(rng, 16, r)));
        prof.module_path = "case";
        for (auto p : policies) {
            ss::EditPolicyConfig cfg;
            cfg.policy = p;
            cfg.seed = static_cast<std::uint64_t>(i);
            const Matrix dw = ss::reconstruct(ss::apply_edit(s, prof, cfg).edited);
            worst_contain = std::max(worst_contain, ss::verify::containment_error(s, dw));
        }
    }
    o.check(worst_energy <= 1e-12, "l1 energy " + fmt(worst_energy));
    o.check(worst_noop <= 1e-12, "uniform no-op " + fmt(worst_noop));
    o.check(worst_contain <= 1e-9, "containment " + fmt(worst_contain));
    if (o.ok) o.detail = "energy " + fmt(worst_energy) + ", no-op " + fmt(worst_noop) + ", containment " + fmt(worst_contain);
    return o;
}

Outcome control_matching() {
    Outcome o;
    std::mt19937_64 rng(1000);
    std::uniform_real_distribution<double> unif(0.01, 2.0);
    ss::EditPolicyConfig cfg;
    std::vector<int> amp(16, 0);
    bool multisets_equal = true;
    const int draws = 1000;
    for (int d = 0; d < draws; ++d) {
        cfg.seed = static_cast<std::uint64_t>(d);
        Vector x(16);
        for (auto& v : x) v = unif(rng);
        const Vector ri = ss::alpha_random_index(16, cfg, "model.layers.0.self_attn.o_proj").alpha;
        multisets_equal = multisets_equal && multiset(ri) == multiset(ss::alpha_abs_select(x, cfg).alpha);
        for (int i = 0; i < 16; ++i) amp[static_cast<std::size_t>(i)] += ri(i) == cfg.amp_factor;
    }
    o.check(multisets_equal, "alpha multisets differ");
    const double p = 3.0 / 16.0;
    const double tol = 3.0 * std::sqrt(p * (1 - p) / draws);
    double worst = 0.0;
    for (int a : amp) worst = std::max(worst, std::abs(a / double(draws) - p));
    o.check(worst <= tol, "frequency deviation " + fmt(worst) + " > " + fmt(tol));
    if (o.ok) o.detail = "max frequency deviation " + fmt(worst) + " (3 sigma " + fmt(tol) + ")";
    return o;
}

Outcome end_to_end() {
    Outcome o;
    double worst_increase = -1e300;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = toy::build_toy_problem(9000 + seed, {});
        for (double eta : {1e-3, 1e-2}) {
            ss::EditPolicyConfig cfg;
            cfg.policy = ss::Policy::grad_direction;
            cfg.asymmetric_update = false;
            cfg.eta = eta;
            cfg.magnitude.energy_mode = ss::EnergyMode::none;
            const auto r = toy::run_end_to_end(p, cfg);
            worst_increase = std::max(worst_increase, r.loss_after - r.loss_before);
        }
    }
    o.check(worst_increase <= 0.0, "loss increased by " + fmt(worst_increase));

    double worst_planted = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        toy::Options opt;
        opt.noise = 0.0;
        const auto p = toy::build_toy_problem(9500 + seed, {}, opt);
        const auto s = ss::decompose(p.factors, p.scale, "toy");
        const Matrix target = p.planted_delta_w();
        Vector alpha(s.rank());
        for (long k = 0; k < s.rank(); ++k) alpha(k) = s.u.col(k).dot(target * s.v.col(k)) / s.sigma(k);
        ss::MagnitudeControlConfig none;
        none.energy_mode = ss::EnergyMode::none;
        const auto f = ss::refactor(ss::apply_alpha(s, alpha, none).first);
        worst_planted = std::max(worst_planted, toy::calib_loss(p, p.scale * f.b * f.a));
    }
    o.check(worst_planted <= 1e-18, "planted recovery loss " + fmt(worst_planted));
    if (o.ok) o.detail = "max loss change " + fmt(worst_increase) + ", planted loss " + fmt(worst_planted);
    return o;
}

Outcome file_round_trips() {
    Outcome o;
    test_util::TempDir dir;

    auto adapter = test_util::synthetic_adapter(2, {"q_proj", "o_proj", "down_proj"}, 64, 48, 8, 77);
    adapter.key_prefix = std::string(ss::kPeftPrefix);
    ss::save_adapter(adapter, dir / "a.safetensors", dir / "a.json");
    const auto loaded = ss::load_adapter(dir / "a.safetensors", dir / "a.json");
    bool exact = loaded.modules.size() == adapter.modules.size();
    for (const auto& [k, f] : adapter.modules) {
        exact = exact && loaded.modules.at(k).a == f.a.cast<float>().cast<double>() &&
                loaded.modules.at(k).b == f.b.cast<float>().cast<double>();
    }
    ss::save_adapter(loaded, dir / "b.safetensors", dir / "b.json");
    o.check(exact, "adapter values changed through save/load");
    o.check(test_util::read_file(dir / "a.safetensors") == test_util::read_file(dir / "b.safetensors"),
            "adapter re-save not byte-identical");

    std::vector<ss::SpectralUpdate> specs;
    for (const auto& [k, f] : loaded.modules) specs.push_back(ss::decompose(f, loaded.config.scale(), k));
    ss::export_bases(specs, dir / "bases.safetensors");
    const auto bases = ss::load_bases(dir / "bases.safetensors");
    bool bases_exact = bases.checksum == ss::basis_checksum(specs);
    for (const auto& s : specs) {
        const auto& b = bases.modules.at(s.module_path);
        bases_exact = bases_exact && b.u == s.u.cast<float>().cast<double>() && b.v == s.v.cast<float>().cast<double>() &&
                      b.sigma == s.sigma.cast<float>().cast<double>();
    }
    o.check(bases_exact, "bases values changed through save/load");

    ss::GradientDump dump;
    dump.mode = ss::GradientMode::projections;
    dump.n_cal = 128;
    dump.basis_checksum = bases.checksum;
    std::mt19937_64 rng(5);
    for (const auto& s : specs) dump.entries[s.module_path] = toy::gaussian(rng, 128, 8);
    ss::save_gradient_dump(dump, dir / "g.safetensors");
    const auto dump2 = ss::load_gradient_dump(dir / "g.safetensors");
    bool dump_exact = dump2.n_cal == 128 && dump2.basis_checksum == dump.basis_checksum;
    for (const auto& [k, m] : dump.entries) dump_exact = dump_exact && dump2.entries.at(k) == m.cast<float>().cast<double>();
    ss::save_gradient_dump(dump2, dir / "g2.safetensors");
    o.check(dump_exact, "dump values changed through save/load");
    o.check(test_util::read_file(dir / "g.safetensors") == test_util::read_file(dir / "g2.safetensors"),
            "dump re-save not byte-identical");

    // Isolation through the edit command.
    ss::cli::ToyDemoOptions toy_opts;
    toy_opts.emit_dir = dir / "toy";
    ss::cli::emit_toy_files(toy_opts);
    ss::cli::EditOptions e;
    e.adapter = dir / "toy/adapter_model.safetensors";
    e.grads = dir / "toy/grads.safetensors";
    e.out_adapter = dir / "edited/adapter_model.safetensors";
    e.report = dir / "edited/report.json";
    e.policy.policy = ss::Policy::grad_direction;
    std::ostringstream sink;
    o.check(ss::cli::cmd_edit(e, sink) == ss::cli::kExitOk, "cmd_edit failed");
    const auto before = st::load(e.adapter);
    const auto after = st::load(e.out_adapter);
    bool isolated = before.tensors.size() == after.tensors.size();
    bool edited = true;
    for (const auto& [k, t] : before.tensors) {
        if (k.find("q_proj") != std::string::npos) isolated = isolated && after.tensors.at(k) == t;
        else edited = edited && !(after.tensors.at(k) == t);
    }
    o.check(isolated, "unedited modules changed through cmd_edit");
    o.check(edited, "filtered modules unchanged by cmd_edit");
    return o;
}

}  // namespace

int main() {
    criterion("edit-overhead accounting", 1e-3, accounting);
    criterion("random-subspace baseline", 10.0, random_baseline);
    criterion("svd suite", 5.0, svd_suite);
    criterion("sensitivity oracle", 10.0, sensitivity_oracle);
    criterion("policy formulas", 1.0, policy_formulas);
    criterion("conservation", 5.0, conservation);
    criterion("control matching", 5.0, control_matching);
    criterion("end-to-end descent", 30.0, end_to_end);
    criterion("file-format round trips", 5.0, file_round_trips);
    std::printf("%s: %d criterion(s) failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
    return failures == 0 ? 0 : 1;
}
