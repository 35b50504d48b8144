// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "spectral_surgeon/cli.hpp"
#include "test_util.hpp"

namespace ss = spectral_surgeon;
namespace cli = spectral_surgeon::cli;
namespace st = spectral_surgeon::safetensors;
using test_util::TempDir;

namespace {

nlohmann::json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

void emit_toy(const TempDir& dir, std::uint64_t seed = 3) {
    cli::ToyDemoOptions o;
    o.seed = seed;
    o.emit_dir = dir.path();
    cli::emit_toy_files(o);
}

cli::EditOptions edit_options(const TempDir& dir, const std::string& out_name) {
    cli::EditOptions e;
    e.adapter = dir / "adapter_model.safetensors";
    e.grads = dir / "grads.safetensors";
    e.out_adapter = dir / (out_name + "/adapter_model.safetensors");
    e.report = dir / (out_name + "/report.json");
    return e;
}

}  // namespace

TEST(CliDecompose, ExportsFilteredModulesWithAccounting) {
    TempDir dir;
    auto adapter = test_util::synthetic_adapter(2, {"q_proj", "o_proj", "down_proj"}, 24, 20, 4, 1);
    ss::save_adapter(adapter, dir / "adapter_model.safetensors", dir / "adapter_config.json");

    cli::DecomposeOptions o;
    o.adapter = dir / "adapter_model.safetensors";
    o.out_bases = dir / "bases.safetensors";
    o.report = dir / "report.json";
    EXPECT_EQ(cli::cmd_decompose(o), cli::kExitOk);

    const auto bases = ss::load_bases(o.out_bases);
    EXPECT_EQ(bases.modules.size(), 4u);
    EXPECT_EQ(st::load(o.out_bases).tensors.size(), 12u);
    const auto report = read_json(*o.report);
    EXPECT_EQ(report.at("kind"), "decompose");
    EXPECT_EQ(report.at("accounting").at("count_edited_scalars"), ss::count_edited_scalars(2, 2, 4));
    EXPECT_EQ(report.at("modules").size(), 4u);
    EXPECT_EQ(report.at("basis_checksum"), ss::to_hex(bases.checksum));
}

TEST(CliDecompose, EmptyFilterMatchIsAnError) {
    TempDir dir;
    auto adapter = test_util::synthetic_adapter(1, {"q_proj"}, 8, 8, 2, 2);
    ss::save_adapter(adapter, dir / "adapter_model.safetensors", dir / "adapter_config.json");
    cli::DecomposeOptions o;
    o.adapter = dir / "adapter_model.safetensors";
    o.out_bases = dir / "bases.safetensors";
    std::ostringstream out;
    try {
        cli::cmd_decompose(o, out);
        FAIL();
    } catch (const ss::Error& e) {
        EXPECT_EQ(e.kind(), ss::ErrorKind::coverage);
        EXPECT_NE(std::string(e.what()).find("no modules matched"), std::string::npos);
    }
}

TEST(CliEdit, UnfilteredModulesAreByteIdentical) {
    TempDir dir;
    emit_toy(dir);
    auto e = edit_options(dir, "out");
    e.policy.policy = ss::Policy::grad_direction;
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_edit(e, out), cli::kExitOk);

    const auto before = st::load(dir / "adapter_model.safetensors");
    const auto after = st::load(e.out_adapter);
    ASSERT_EQ(before.tensors.size(), after.tensors.size());
    int changed = 0, same = 0;
    for (const auto& [key, t] : before.tensors) {
        const auto& u = after.tensors.at(key);
        if (key.find("q_proj") != std::string::npos) {
            EXPECT_EQ(t, u) << key;
            ++same;
        } else {
            changed += !(t == u);
        }
    }
    EXPECT_EQ(same, 4);
    EXPECT_EQ(changed, 8);
    EXPECT_TRUE(std::filesystem::exists(dir / "out/adapter_config.json"));
    const auto report = read_json(*e.report);
    EXPECT_EQ(report.at("kind"), "edit");
    EXPECT_EQ(report.at("modules").size(), 4u);
}

TEST(CliEdit, L1EnergyRatiosAreOne) {
    TempDir dir;
    emit_toy(dir);
    for (auto policy : {ss::Policy::abs_select, ss::Policy::smooth_abs, ss::Policy::random_index, ss::Policy::grad_direction}) {
        auto e = edit_options(dir, std::string("out_") + ss::to_string(policy));
        e.policy.policy = policy;
        std::ostringstream out;
        ASSERT_EQ(cli::cmd_edit(e, out), cli::kExitOk);
        for (const auto& [path, m] : read_json(*e.report).at("modules").items()) {
            EXPECT_NEAR(m.at("energy_ratio").get<double>(), 1.0, 1e-9) << path;
        }
    }
}

TEST(CliEdit, RandomIndexRunsAreByteIdentical) {
    TempDir dir;
    emit_toy(dir);
    std::vector<std::vector<std::uint8_t>> outputs;
    for (const std::string name : {"a", "b"}) {
        auto e = edit_options(dir, name);
        e.policy.policy = ss::Policy::random_index;
        e.policy.seed = 7;
        std::ostringstream out;
        ASSERT_EQ(cli::cmd_edit(e, out), cli::kExitOk);
        outputs.push_back(test_util::read_file(e.out_adapter));
        outputs.push_back(test_util::read_file(*e.report));
    }
    EXPECT_EQ(outputs[0], outputs[2]);
    EXPECT_EQ(outputs[1], outputs[3]);
}

TEST(CliEdit, FullMatrixDumpWorks) {
    TempDir dir;
    cli::ToyDemoOptions o;
    o.emit_dir = dir.path();
    o.dump_mode = ss::GradientMode::full_matrix;
    cli::emit_toy_files(o);
    auto e = edit_options(dir, "out");
    std::ostringstream out;
    EXPECT_EQ(cli::cmd_edit(e, out), cli::kExitOk);
}

TEST(CliEdit, StaleBasesAndCoverageGaps) {
    TempDir dir;
    emit_toy(dir);
    // Rewrite the dump against a different adapter seed: checksum no longer matches.
    TempDir other;
    emit_toy(other, 99);
    auto e = edit_options(dir, "out");
    e.grads = other / "grads.safetensors";
    std::ostringstream out;
    EXPECT_THROW(cli::cmd_edit(e, out), ss::Error);

    e = edit_options(dir, "out2");
    e.modules = {"o_proj", "down_proj", "q_proj"};
    try {
        cli::cmd_edit(e, out);
        FAIL();
    } catch (const ss::Error& err) {
        EXPECT_EQ(err.kind(), ss::ErrorKind::coverage);
        EXPECT_EQ(cli::exit_code_for(err.kind()), cli::kExitFailure);
    }
}

TEST(CliAnalyze, IdenticalLayersAllOnes) {
    TempDir dir;
    auto adapter = test_util::synthetic_adapter(3, {"o_proj", "down_proj"}, 32, 24, 8, 3);
    const auto first = adapter.modules.at(test_util::module_path(0, "o_proj"));
    for (long l = 0; l < 3; ++l) adapter.modules[test_util::module_path(l, "o_proj")] = first;
    ss::save_adapter(adapter, dir / "adapter_model.safetensors", dir / "adapter_config.json");

    cli::AnalyzeOptions o;
    o.adapter = dir / "adapter_model.safetensors";
    o.out_csv = dir / "heat.csv";
    o.synergy_out = dir / "synergy.json";
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_analyze(o, out), cli::kExitOk);
    std::ifstream csv(o.out_csv);
    std::string line;
    std::getline(csv, line);
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        std::stringstream ss_line(line);
        std::string cell;
        std::getline(ss_line, cell, ',');
        while (std::getline(ss_line, cell, ',')) EXPECT_EQ(cell, "1") << line;
    }
    EXPECT_EQ(rows, 3);
    const auto syn = read_json(*o.synergy_out);
    EXPECT_EQ(syn.at("values").size(), 3u);
}

TEST(CliAnalyze, RandomAdapterOffDiagonalMean) {
    TempDir dir;
    const long layers = 16;
    auto adapter = test_util::synthetic_adapter(layers, {"o_proj"}, 512, 32, 8, 4);
    ss::save_adapter(adapter, dir / "adapter_model.safetensors", dir / "adapter_config.json");
    cli::AnalyzeOptions o;
    o.adapter = dir / "adapter_model.safetensors";
    o.out_csv = dir / "heat.csv";
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_analyze(o, out), cli::kExitOk);

    std::ifstream csv(o.out_csv);
    std::string line;
    std::getline(csv, line);
    std::vector<double> off;
    for (long i = 0; std::getline(csv, line); ++i) {
        std::stringstream ss_line(line);
        std::string cell;
        std::getline(ss_line, cell, ',');
        for (long j = 0; std::getline(ss_line, cell, ','); ++j) {
            if (j > i) off.push_back(std::stod(cell));
        }
    }
    ASSERT_EQ(off.size(), static_cast<std::size_t>(layers * (layers - 1) / 2));
    double mean = 0.0, var = 0.0;
    for (double v : off) mean += v;
    mean /= static_cast<double>(off.size());
    for (double v : off) var += (v - mean) * (v - mean);
    var /= static_cast<double>(off.size() - 1);
    EXPECT_NEAR(mean, 0.0078125, 3.0 * std::sqrt(var / static_cast<double>(off.size())));
}

TEST(CliAnalyze, SidecarBaselineAtModelWidth) {
    TempDir dir;
    auto adapter = test_util::synthetic_adapter(2, {"o_proj"}, 4096, 16, 16, 5);
    ss::save_adapter(adapter, dir / "adapter_model.safetensors", dir / "adapter_config.json");
    cli::AnalyzeOptions o;
    o.adapter = dir / "adapter_model.safetensors";
    o.out_csv = dir / "heat.csv";
    o.m = 16;
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_analyze(o, out), cli::kExitOk);
    const auto side = read_json(dir / "heat.json");
    EXPECT_DOUBLE_EQ(side.at("baseline").get<double>(), 16.0 / 4096.0);
    EXPECT_NEAR(side.at("baseline").get<double>(), 0.0039, 1e-4);
    EXPECT_EQ(side.at("dimension"), 4096);

    o.m = 17;
    try {
        cli::cmd_analyze(o, out);
        FAIL();
    } catch (const ss::Error& e) {
        EXPECT_EQ(cli::exit_code_for(e.kind()), cli::kExitUsage);
    }
}

TEST(CliVerify, DefaultPassesAndInjectionFails) {
    cli::VerifyOptions o;
    std::ostringstream out;
    EXPECT_EQ(cli::cmd_verify(o, out), cli::kExitOk);
    const auto report = nlohmann::json::parse(out.str());
    EXPECT_TRUE(report.at("passed").get<bool>());
    for (const auto& s : report.at("suites")) {
        if (s.at("suite") == "finite_difference") {
            EXPECT_LE(s.at("max_error").get<double>(), 1e-4);
        }
    }

    o.options.inject_sigma_order_violation = true;
    std::ostringstream bad;
    EXPECT_EQ(cli::cmd_verify(o, bad), cli::kExitFailure);
    const auto failed = nlohmann::json::parse(bad.str()).at("failed");
    EXPECT_EQ(failed, nlohmann::json::array({"spectrum_order"}));
}

TEST(CliVerify, UnknownSuiteIsUsageError) {
    cli::VerifyOptions o;
    o.suites = {"nope"};
    std::ostringstream out;
    try {
        cli::cmd_verify(o, out);
        FAIL();
    } catch (const ss::Error& e) {
        EXPECT_EQ(e.kind(), ss::ErrorKind::usage);
    }
}

TEST(CliGuarded, StructuredErrorsAndExitCodes) {
    std::ostringstream err;
    const int code = cli::guarded([]() -> int { throw ss::Error(ss::ErrorKind::coverage, "gap"); }, err);
    EXPECT_EQ(code, cli::kExitFailure);
    const auto j = nlohmann::json::parse(err.str());
    EXPECT_EQ(j.at("error"), "coverage");
    EXPECT_EQ(j.at("message"), "gap");
    std::ostringstream err2;
    EXPECT_EQ(cli::guarded([]() -> int { throw ss::Error(ss::ErrorKind::usage, "x"); }, err2), cli::kExitUsage);
}

TEST(CliToyDemo, ReportsLosses) {
    cli::ToyDemoOptions o;
    o.policy.policy = ss::Policy::grad_direction;
    o.policy.asymmetric_update = false;
    o.policy.eta = 1e-3;
    o.policy.magnitude.energy_mode = ss::EnergyMode::none;
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_toy_demo(o, out), cli::kExitOk);
    const auto j = nlohmann::json::parse(out.str());
    EXPECT_LE(j.at("loss_after").get<double>(), j.at("loss_before").get<double>());
}
