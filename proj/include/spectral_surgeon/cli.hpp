// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Subcommand implementations behind tools/spectral_surgeon. Each command takes a
// plain options struct, does its own I/O, and throws spectral_surgeon::Error on
// failure; `guarded` turns errors into exit codes and structured stderr JSON.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/adapter_io.hpp"
#include "spectral_surgeon/alignment.hpp"
#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/policies.hpp"
#include "spectral_surgeon/sensitivity.hpp"
#include "spectral_surgeon/spectral_core.hpp"
#include "spectral_surgeon/toy_harness.hpp"
#include "spectral_surgeon/verify.hpp"

namespace spectral_surgeon::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline const std::vector<std::string>& default_module_filter() {
    static const std::vector<std::string> families = {"o_proj", "down_proj"};
    return families;
}

inline int exit_code_for(ErrorKind kind) { return kind == ErrorKind::usage ? kExitUsage : kExitFailure; }

template <typename Fn>
int guarded(Fn&& fn, std::ostream& err = std::cerr) {
    try {
        return fn();
    } catch (const Error& e) {
        err << nlohmann::json{{"error", to_string(e.kind())}, {"message", e.what()}}.dump() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
        return kExitFailure;
    }
}

inline fs::path sibling_config(const fs::path& adapter_path) {
    return adapter_path.parent_path() / "adapter_config.json";
}

inline std::vector<std::string> filter_modules(const LoraAdapter& adapter, const std::vector<std::string>& families) {
    const std::set<std::string> wanted(families.begin(), families.end());
    std::vector<std::string> out;
    for (const auto& [path, _] : adapter.modules) {
        if (wanted.contains(parse_module_path(path).family)) out.push_back(path);
    }
    if (out.empty()) throw Error(ErrorKind::coverage, "no modules matched the module filter");
    return out;
}

inline std::vector<SpectralUpdate> decompose_all(const LoraAdapter& adapter, const std::vector<std::string>& paths) {
    std::vector<SpectralUpdate> out(paths.size());
    parallel_for(paths.size(), [&](std::size_t i) {
        out[i] = decompose(adapter.modules.at(paths[i]), adapter.config.scale(), paths[i]);
    });
    return out;
}

// L * |M| * r over the layers and families that actually matched.
inline nlohmann::json edit_accounting(const std::vector<std::string>& paths, long r) {
    std::set<long> layers;
    std::set<std::string> families;
    for (const auto& p : paths) {
        const auto parts = parse_module_path(p);
        if (parts.layer) layers.insert(*parts.layer);
        families.insert(parts.family);
    }
    const long L = layers.empty() ? 1 : static_cast<long>(layers.size());
    return {{"num_layers", L},
            {"families", std::vector<std::string>(families.begin(), families.end())},
            {"rank", r},
            {"count_edited_scalars", count_edited_scalars(L, static_cast<long>(families.size()), r)},
            {"edited_modules", paths.size()}};
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

struct DecomposeOptions {
    fs::path adapter;
    std::optional<fs::path> config;
    fs::path out_bases;
    std::optional<fs::path> report;
    std::vector<std::string> modules = default_module_filter();
};

inline int cmd_decompose(const DecomposeOptions& o, std::ostream& out = std::cout) {
    const LoraAdapter adapter = load_adapter(o.adapter, o.config.value_or(sibling_config(o.adapter)));
    const auto paths = filter_modules(adapter, o.modules);

    std::vector<SpectralUpdate> specs(paths.size());
    std::vector<std::string> failures(paths.size());
    parallel_for(paths.size(), [&](std::size_t i) {
        try {
            specs[i] = decompose(adapter.modules.at(paths[i]), adapter.config.scale(), paths[i]);
        } catch (const Error& e) {
            failures[i] = e.what();
        }
    });

    nlohmann::json modules = nlohmann::json::object();
    nlohmann::json errors = nlohmann::json::object();
    std::vector<SpectralUpdate> good;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        if (!failures[i].empty()) {
            errors[paths[i]] = failures[i];
            continue;
        }
        const auto& s = specs[i];
        modules[paths[i]] = {{"sigma", to_std(s.sigma)},
                             {"energy_l1", s.sigma.sum()},
                             {"energy_fro2", s.sigma.squaredNorm()},
                             {"d_out", s.u.rows()},
                             {"d_in", s.v.rows()}};
        good.push_back(s);
    }
    export_bases(good, o.out_bases);

    nlohmann::json report = {{"schema_version", kReportSchemaVersion},
                             {"kind", "decompose"},
                             {"scale", adapter.config.scale()},
                             {"basis_checksum", to_hex(basis_checksum(good))},
                             {"accounting", edit_accounting(paths, adapter.rank())},
                             {"modules", modules}};
    if (!errors.empty()) report["errors"] = errors;
    if (o.report) write_json(report, *o.report);
    else out << report.dump(2) << '\n';
    if (!errors.empty()) throw Error(ErrorKind::numerical, std::to_string(errors.size()) + " module(s) failed to decompose");
    return kExitOk;
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

struct EditOptions {
    fs::path adapter;
    std::optional<fs::path> config;
    fs::path grads;
    fs::path out_adapter;
    std::optional<fs::path> out_config;
    std::optional<fs::path> report;
    std::vector<std::string> modules = default_module_filter();
    EditPolicyConfig policy;
    Reducer reducer = Reducer::mean_abs;
};

struct EditRunResult {
    LoraAdapter edited;
    EditReport report;
};

/// Decompose the filtered modules, derive sensitivities from the dump, reweight
/// their spectra, and refactor. Modules outside the filter are carried over untouched.
inline EditRunResult edit_adapter(const LoraAdapter& adapter, const GradientDump& dump,
                                  const std::vector<std::string>& families, const EditPolicyConfig& cfg,
                                  Reducer reducer) {
    cfg.validate();
    const auto paths = filter_modules(adapter, families);
    const auto specs = decompose_all(adapter, paths);
    const auto profiles = sensitivities_from_dump(specs, dump, reducer);

    std::vector<EditOutcome> outcomes(specs.size());
    parallel_for(specs.size(), [&](std::size_t i) { outcomes[i] = apply_edit(specs[i], profiles.at(paths[i]), cfg); });

    EditRunResult res;
    res.edited = adapter;
    res.report.policy = to_string(cfg.policy);
    res.report.config = to_json(cfg);
    res.report.config["reducer"] = to_string(reducer);
    res.report.config["modules"] = families;
    res.report.key_prefix = adapter.key_prefix;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const FactorPair& original = adapter.modules.at(paths[i]);
        FactorPair updated = edited_factors(original, specs[i], outcomes[i].edited);
        res.edited.modules[paths[i]] = std::move(updated);
        res.report.modules.emplace(paths[i], std::move(outcomes[i].entry));
    }
    return res;
}

inline int cmd_edit(const EditOptions& o, std::ostream& out = std::cout) {
    const LoraAdapter adapter = load_adapter(o.adapter, o.config.value_or(sibling_config(o.adapter)));
    const GradientDump dump = load_gradient_dump(o.grads);
    EditRunResult res = edit_adapter(adapter, dump, o.modules, o.policy, o.reducer);
    if (o.out_adapter.has_parent_path()) fs::create_directories(o.out_adapter.parent_path());
    save_adapter(res.edited, o.out_adapter, o.out_config.value_or(sibling_config(o.out_adapter)));
    nlohmann::json report = to_json(res.report);
    report["n_cal"] = dump.n_cal;
    report["gradient_mode"] = to_string(dump.mode);
    if (o.report) write_json(report, *o.report);
    else out << report.dump(2) << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeOptions {
    fs::path adapter;
    std::optional<fs::path> config;
    std::string family = "o_proj";
    AlignMetric metric = AlignMetric::subspace_overlap;
    long m = 4;
    fs::path out_csv;
    std::optional<fs::path> synergy_out;
    std::string synergy_family_a = "o_proj";
    std::string synergy_family_b = "down_proj";
};

inline int cmd_analyze(const AnalyzeOptions& o, std::ostream& out = std::cout) {
    const LoraAdapter adapter = load_adapter(o.adapter, o.config.value_or(sibling_config(o.adapter)));
    const AlignmentMatrix heatmap = layer_heatmap(adapter, o.family, o.metric, o.m);
    write_heatmap(heatmap, o.out_csv);
    nlohmann::json summary = sidecar_json(heatmap);
    if (o.synergy_out) {
        const SynergyResult syn = intra_layer_synergy(adapter, o.m, o.synergy_family_a, o.synergy_family_b);
        const nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                                  {"kind", "synergy"},
                                  {"families", {o.synergy_family_a, o.synergy_family_b}},
                                  {"m", syn.m},
                                  {"d_model", syn.d_model},
                                  {"baseline", syn.baseline},
                                  {"layers", syn.layer_ids},
                                  {"values", syn.values}};
        write_json(j, *o.synergy_out);
        summary["synergy"] = j;
    }
    out << summary.dump() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyOptions {
    std::vector<std::string> suites;
    verify::Options options;
    std::optional<fs::path> report;
};

inline int cmd_verify(const VerifyOptions& o, std::ostream& out = std::cout) {
    const auto results = verify::run(o.suites, o.options);
    nlohmann::json suites = nlohmann::json::array();
    std::vector<std::string> failed;
    for (const auto& r : results) {
        suites.push_back(verify::to_json(r));
        if (!r.passed) failed.push_back(r.name);
    }
    const nlohmann::json report = {{"schema_version", kReportSchemaVersion},
                                   {"kind", "verify"},
                                   {"passed", failed.empty()},
                                   {"failed", failed},
                                   {"suites", suites}};
    if (o.report) write_json(report, *o.report);
    out << report.dump(2) << '\n';
    return failed.empty() ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// toy-demo
// ---------------------------------------------------------------------------

struct ToyDemoOptions {
    std::uint64_t seed = 0;
    toy::Dims dims{48, 32, 8, 128};
    toy::Options toy;
    EditPolicyConfig policy;
    std::optional<fs::path> emit_dir;
    long layers = 2;
    GradientMode dump_mode = GradientMode::projections;
};

inline std::uint64_t toy_module_seed(std::uint64_t seed, const std::string& module_path) {
    return splitmix64(seed ^ fnv1a(module_path));
}

inline std::string toy_module_path(long layer, const std::string& family) {
    const bool attn = family == "o_proj" || family == "q_proj";
    return "model.layers." + std::to_string(layer) + (attn ? ".self_attn." : ".mlp.") + family;
}

/// Writes a toy adapter (o_proj and down_proj per layer, plus an unedited q_proj),
/// its config, exported bases, and a gradient dump computed at the stored factors.
inline nlohmann::json emit_toy_files(const ToyDemoOptions& o) {
    const fs::path dir = *o.emit_dir;
    fs::create_directories(dir);
    const long r = o.dims.r;

    std::map<std::string, toy::ToyProblem> problems;
    LoraAdapter adapter;
    adapter.config.r = r;
    adapter.config.lora_alpha = o.toy.scale * static_cast<double>(r);
    adapter.config.target_modules = {"q_proj", "o_proj", "down_proj"};
    adapter.config.raw = {{"peft_type", "LORA"}};
    adapter.key_prefix = std::string(kPeftPrefix);
    for (long layer = 0; layer < o.layers; ++layer) {
        for (const std::string family : {"o_proj", "down_proj"}) {
            const std::string path = toy_module_path(layer, family);
            auto p = toy::build_toy_problem(toy_module_seed(o.seed, path), o.dims, o.toy);
            adapter.modules[path] = p.factors;
            problems.emplace(path, std::move(p));
        }
        const std::string q = toy_module_path(layer, "q_proj");
        adapter.modules[q] = toy::random_factor_pair(toy_module_seed(o.seed, q), o.dims.d_out, o.dims.d_in, r);
    }
    const fs::path adapter_path = dir / "adapter_model.safetensors";
    const fs::path config_path = dir / "adapter_config.json";
    save_adapter(adapter, adapter_path, config_path);

    // Recompute everything from the stored (32-bit) factors so the dump matches what
    // `edit` will see when it reloads the adapter.
    const LoraAdapter stored = load_adapter(adapter_path, config_path);
    std::vector<std::string> paths;
    for (const auto& [path, _] : problems) paths.push_back(path);
    const auto specs = decompose_all(stored, paths);
    export_bases(specs, dir / "bases.safetensors");

    GradientDump dump;
    dump.mode = o.dump_mode;
    dump.n_cal = o.dims.n_cal;
    dump.seed = o.seed;
    dump.example_range = "0:" + std::to_string(o.dims.n_cal);
    nlohmann::json losses = nlohmann::json::object();
    for (const auto& s : specs) {
        toy::ToyProblem p = problems.at(s.module_path);
        p.factors = stored.modules.at(s.module_path);
        const auto lg = toy::calib_loss_and_grad(p, &s.u, &s.v);
        dump.entries[s.module_path] = o.dump_mode == GradientMode::full_matrix ? lg.grad : *lg.per_example;
        losses[s.module_path] = lg.loss;
    }
    if (o.dump_mode == GradientMode::projections) dump.basis_checksum = basis_checksum(specs);
    save_gradient_dump(dump, dir / "grads.safetensors");
    return {{"dir", dir.string()},
            {"adapter", adapter_path.string()},
            {"config", config_path.string()},
            {"bases", (dir / "bases.safetensors").string()},
            {"grads", (dir / "grads.safetensors").string()},
            {"gradient_mode", to_string(o.dump_mode)},
            {"calibration_loss", losses}};
}

inline int cmd_toy_demo(const ToyDemoOptions& o, std::ostream& out = std::cout) {
    o.policy.validate();
    const toy::ToyProblem p = toy::build_toy_problem(o.seed, o.dims, o.toy);
    const toy::EndToEndResult res = toy::run_end_to_end(p, o.policy);
    nlohmann::json report = {{"schema_version", kReportSchemaVersion},
                             {"kind", "toy-demo"},
                             {"seed", o.seed},
                             {"dims", {{"d_out", o.dims.d_out}, {"d_in", o.dims.d_in}, {"r", o.dims.r}, {"n_cal", o.dims.n_cal}}},
                             {"policy", to_string(o.policy.policy)},
                             {"config", to_json(o.policy)},
                             {"loss_before", res.loss_before},
                             {"loss_after", res.loss_after},
                             {"module", to_json(res.report)}};
    if (o.emit_dir) report["emitted"] = emit_toy_files(o);
    out << report.dump(2) << '\n';
    return kExitOk;
}

}  // namespace spectral_surgeon::cli
