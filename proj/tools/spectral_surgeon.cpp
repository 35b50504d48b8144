// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spectral_surgeon/cli.hpp"

namespace ss = spectral_surgeon;
namespace cli = spectral_surgeon::cli;

namespace {

struct PolicyFlags {
    std::string policy = "abs_select";
    std::string preserve_energy = "l1";
    std::string asymmetric = "true";
    std::string reducer = "mean_abs";
    ss::EditPolicyConfig cfg;

    void attach(CLI::App& app) {
        app.add_option("--policy", policy, "abs_select | smooth_abs | random_index | grad_direction")
            ->capture_default_str();
        app.add_option("--core-frac", cfg.core_frac)->capture_default_str();
        app.add_option("--noise-frac", cfg.noise_frac)->capture_default_str();
        app.add_option("--min-core-k", cfg.min_core_k)->capture_default_str();
        app.add_option("--amp-factor", cfg.amp_factor)->capture_default_str();
        app.add_option("--sup-factor", cfg.sup_factor)->capture_default_str();
        app.add_option("--mid-factor", cfg.mid_factor)->capture_default_str();
        app.add_option("--smooth-temperature", cfg.smooth_temperature)->capture_default_str();
        app.add_option("--smooth-center-q", cfg.smooth_center_q)->capture_default_str();
        app.add_flag("--smooth-align-mid", cfg.smooth_align_mid);
        app.add_option("--eta-suppress", cfg.eta_suppress)->capture_default_str();
        app.add_option("--eta-enhance", cfg.eta_enhance)->capture_default_str();
        app.add_option("--eta", cfg.eta, "symmetric step size (when --asymmetric-update false)")->capture_default_str();
        app.add_option("--grad-power", cfg.grad_power)->capture_default_str();
        app.add_option("--asymmetric-update", asymmetric, "true | false")->capture_default_str();
        app.add_option("--sigma-clip-min", cfg.magnitude.sigma_clip_min)->capture_default_str();
        app.add_option("--preserve-energy", preserve_energy, "l1 | none")->capture_default_str();
        app.add_option("--seed", cfg.seed)->capture_default_str();
        app.add_option("--reducer", reducer, "mean_abs | mean_signed")->capture_default_str();
    }

    ss::EditPolicyConfig resolve() const {
        ss::EditPolicyConfig out = cfg;
        out.policy = ss::parse_policy(policy);
        out.magnitude.energy_mode = ss::parse_energy_mode(preserve_energy);
        if (asymmetric == "true" || asymmetric == "1") out.asymmetric_update = true;
        else if (asymmetric == "false" || asymmetric == "0") out.asymmetric_update = false;
        else throw ss::Error(ss::ErrorKind::usage, "--asymmetric-update expects true or false");
        out.validate();
        return out;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral editing of LoRA adapters: decompose, analyze, edit, verify"};
    app.require_subcommand(1);

    std::vector<std::string> modules = cli::default_module_filter();
    auto add_modules = [&](CLI::App* sub) {
        sub->add_option("--modules", modules, "module families to edit")->delimiter(',')->capture_default_str();
    };

    // decompose
    cli::DecomposeOptions dec;
    std::string dec_config, dec_report;
    auto* decompose = app.add_subcommand("decompose", "thin SVD of every filtered module; export bases");
    decompose->add_option("--adapter", dec.adapter)->required();
    decompose->add_option("--config", dec_config, "adapter config JSON (default: adapter_config.json beside the adapter)");
    decompose->add_option("--out-bases", dec.out_bases)->required();
    decompose->add_option("--report", dec_report);
    add_modules(decompose);

    // edit
    cli::EditOptions edit;
    PolicyFlags edit_flags;
    std::string edit_config, edit_out_config, edit_report;
    auto* edit_cmd = app.add_subcommand("edit", "reweight singular values from calibration gradients");
    edit_cmd->add_option("--adapter", edit.adapter)->required();
    edit_cmd->add_option("--config", edit_config);
    edit_cmd->add_option("--grads", edit.grads)->required();
    edit_cmd->add_option("--out-adapter", edit.out_adapter)->required();
    edit_cmd->add_option("--out-config", edit_out_config);
    edit_cmd->add_option("--report", edit_report);
    add_modules(edit_cmd);
    edit_flags.attach(*edit_cmd);

    // analyze
    cli::AnalyzeOptions an;
    std::string an_config, an_metric = "subspace_overlap", an_synergy;
    auto* analyze = app.add_subcommand("analyze", "cross-layer alignment heatmap and intra-layer synergy");
    analyze->add_option("--adapter", an.adapter)->required();
    analyze->add_option("--config", an_config);
    analyze->add_option("--family", an.family)->capture_default_str();
    analyze->add_option("--metric", an_metric, "u1_similarity | subspace_overlap")->capture_default_str();
    analyze->add_option("--m", an.m, "subspace dimension")->capture_default_str();
    analyze->add_option("--out-csv", an.out_csv)->required();
    analyze->add_option("--synergy-out", an_synergy, "write o_proj/down_proj synergy JSON here");

    // verify
    cli::VerifyOptions ver;
    std::string ver_report;
    auto* verify = app.add_subcommand("verify", "run invariant suites on seeded toy problems");
    verify->add_option("--suite", ver.suites, "suite name (repeatable; default: all)");
    verify->add_option("--seed", ver.options.seed)->capture_default_str();
    verify->add_option("--cases", ver.options.cases)->capture_default_str();
    verify->add_flag("--inject-sigma-order-violation", ver.options.inject_sigma_order_violation,
                     "test hook: corrupt spectrum ordering before checking it");
    verify->add_option("--report", ver_report);

    // toy-demo
    cli::ToyDemoOptions toy;
    PolicyFlags toy_flags;
    std::string toy_emit, toy_dump_mode = "projections";
    auto* toy_cmd = app.add_subcommand("toy-demo", "end-to-end edit on a synthetic problem with exact gradients");
    toy_cmd->add_option("--toy-seed", toy.seed)->capture_default_str();
    toy_cmd->add_option("--d-out", toy.dims.d_out)->capture_default_str();
    toy_cmd->add_option("--d-in", toy.dims.d_in)->capture_default_str();
    toy_cmd->add_option("--rank", toy.dims.r)->capture_default_str();
    toy_cmd->add_option("--n-cal", toy.dims.n_cal)->capture_default_str();
    toy_cmd->add_option("--noise", toy.toy.noise)->capture_default_str();
    toy_cmd->add_option("--layers", toy.layers, "layers in the emitted adapter")->capture_default_str();
    toy_cmd->add_option("--emit-dir", toy_emit, "write adapter, config, bases and gradient dump here");
    toy_cmd->add_option("--dump-mode", toy_dump_mode, "projections | full_matrix")->capture_default_str();
    toy_flags.attach(*toy_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kExitUsage;
    }

    return cli::guarded([&]() -> int {
        if (*decompose) {
            if (!dec_config.empty()) dec.config = dec_config;
            if (!dec_report.empty()) dec.report = dec_report;
            dec.modules = modules;
            return cli::cmd_decompose(dec);
        }
        if (*edit_cmd) {
            if (!edit_config.empty()) edit.config = edit_config;
            if (!edit_out_config.empty()) edit.out_config = edit_out_config;
            if (!edit_report.empty()) edit.report = edit_report;
            edit.modules = modules;
            edit.policy = edit_flags.resolve();
            edit.reducer = ss::parse_reducer(edit_flags.reducer);
            return cli::cmd_edit(edit);
        }
        if (*analyze) {
            if (!an_config.empty()) an.config = an_config;
            if (!an_synergy.empty()) an.synergy_out = an_synergy;
            an.metric = ss::parse_align_metric(an_metric);
            return cli::cmd_analyze(an);
        }
        if (*verify) {
            if (!ver_report.empty()) ver.report = ver_report;
            return cli::cmd_verify(ver);
        }
        if (!toy_emit.empty()) toy.emit_dir = toy_emit;
        toy.policy = toy_flags.resolve();
        if (toy_dump_mode == "projections") toy.dump_mode = ss::GradientMode::projections;
        else if (toy_dump_mode == "full_matrix") toy.dump_mode = ss::GradientMode::full_matrix;
        else throw ss::Error(ss::ErrorKind::usage, "--dump-mode expects projections or full_matrix");
        return cli::cmd_toy_demo(toy);
    });
}
