// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/factors.hpp"
#include "spectral_surgeon/safetensors.hpp"
#include "spectral_surgeon/spectral_core.hpp"

namespace spectral_surgeon {

inline constexpr std::string_view kPeftPrefix = "base_model.model.";
inline constexpr std::string_view kLoraASuffix = ".lora_A.weight";
inline constexpr std::string_view kLoraBSuffix = ".lora_B.weight";

struct AdapterConfig {
    long r = 0;
    double lora_alpha = 0.0;
    std::vector<std::string> target_modules;
    // Full config object as read; unknown fields are written back untouched.
    nlohmann::json raw = nlohmann::json::object();

    double scale() const { return lora_alpha / static_cast<double>(r); }
};

struct LoraAdapter {
    std::map<std::string, FactorPair> modules;
    AdapterConfig config;
    // Prefix stripped from every factor key on load ("" or "base_model.model.").
    std::string key_prefix;
    // Tensors that are not LoRA factors, keyed by their full original name.
    std::map<std::string, safetensors::Tensor> passthrough;
    std::map<std::string, std::string> metadata;

    long rank() const { return config.r; }
};

inline bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline AdapterConfig read_adapter_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open adapter config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, path.string() + ": config parse failure: " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::format, path.string() + ": config is not a JSON object");
    for (const char* field : {"r", "lora_alpha", "target_modules"}) {
        if (!j.contains(field)) {
            throw Error(ErrorKind::format, path.string() + ": missing config field '" + field + "'");
        }
    }
    AdapterConfig cfg;
    try {
        cfg.r = j.at("r").get<long>();
        cfg.lora_alpha = j.at("lora_alpha").get<double>();
        cfg.target_modules = j.at("target_modules").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, path.string() + ": bad config field: " + e.what());
    }
    if (cfg.r < 1) throw Error(ErrorKind::invariant, path.string() + ": r must be >= 1");
    if (!(cfg.lora_alpha > 0.0) || !std::isfinite(cfg.lora_alpha)) {
        throw Error(ErrorKind::invariant, path.string() + ": lora_alpha must be positive");
    }
    cfg.raw = std::move(j);
    return cfg;
}

inline void validate_adapter(const LoraAdapter& adapter) {
    if (adapter.config.r < 1) throw Error(ErrorKind::invariant, "adapter rank must be >= 1");
    for (const auto& [path, f] : adapter.modules) {
        validate_factors(f, path);
        if (f.rank() != adapter.config.r) {
            throw Error(ErrorKind::invariant, path + ": rank mismatch (factors have rank " +
                                                  std::to_string(f.rank()) + ", config r=" +
                                                  std::to_string(adapter.config.r) + ")");
        }
    }
}

inline LoraAdapter load_adapter(const std::filesystem::path& path, const std::filesystem::path& config_path) {
    LoraAdapter adapter;
    adapter.config = read_adapter_config(config_path);
    safetensors::File file = safetensors::load(path);
    adapter.metadata = std::move(file.metadata);

    std::map<std::string, safetensors::Tensor> a_factors;
    std::map<std::string, safetensors::Tensor> b_factors;
    for (auto& [key, tensor] : file.tensors) {
        std::string_view name = key;
        const bool is_a = ends_with(name, kLoraASuffix);
        const bool is_b = ends_with(name, kLoraBSuffix);
        if (!is_a && !is_b) {
            adapter.passthrough.emplace(key, std::move(tensor));
            continue;
        }
        if (name.starts_with(kPeftPrefix)) {
            name.remove_prefix(kPeftPrefix.size());
            adapter.key_prefix = kPeftPrefix;
        }
        name.remove_suffix(kLoraASuffix.size());
        if (tensor.shape.size() != 2) {
            throw Error(ErrorKind::format, key + ": LoRA factor must be a 2-D tensor");
        }
        if (!tensor.is_finite()) throw Error(ErrorKind::invariant, key + ": non-finite value");
        (is_a ? a_factors : b_factors).emplace(std::string(name), std::move(tensor));
    }

    for (const auto& [module, _] : a_factors) {
        if (!b_factors.contains(module)) throw Error(ErrorKind::format, module + ": unpaired factor (lora_B missing)");
    }
    for (const auto& [module, _] : b_factors) {
        if (!a_factors.contains(module)) throw Error(ErrorKind::format, module + ": unpaired factor (lora_A missing)");
    }

    for (auto& [module, a] : a_factors) {
        auto& b = b_factors.at(module);
        FactorPair pair;
        pair.a = a.to_matrix();
        pair.b = b.to_matrix();
        pair.precision = safetensors::element_size(a.dtype) >= safetensors::element_size(b.dtype) ? a.dtype : b.dtype;
        pair.source = std::make_shared<const FactorSource>(FactorSource{std::move(a), std::move(b)});
        adapter.modules.emplace(module, std::move(pair));
    }
    validate_adapter(adapter);
    return adapter;
}

inline void write_adapter_config(const AdapterConfig& cfg, const std::filesystem::path& path) {
    nlohmann::json j = cfg.raw.is_object() ? cfg.raw : nlohmann::json::object();
    j["r"] = cfg.r;
    j["lora_alpha"] = cfg.lora_alpha;
    j["target_modules"] = cfg.target_modules;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline safetensors::File adapter_to_file(const LoraAdapter& adapter) {
    validate_adapter(adapter);
    safetensors::File file;
    file.metadata = adapter.metadata;
    for (const auto& [key, t] : adapter.passthrough) file.tensors.emplace(key, t);
    for (const auto& [module, f] : adapter.modules) {
        const std::string base = adapter.key_prefix + module;
        if (f.matches_source()) {
            file.tensors.emplace(base + std::string(kLoraASuffix), f.source->a);
            file.tensors.emplace(base + std::string(kLoraBSuffix), f.source->b);
        } else {
            file.tensors.emplace(base + std::string(kLoraASuffix), safetensors::make_f32(f.a));
            file.tensors.emplace(base + std::string(kLoraBSuffix), safetensors::make_f32(f.b));
        }
    }
    return file;
}

/// Writes the factor tensors to `path` and the adapter config to `config_path`.
/// Modules whose factors are unchanged since load keep their original bytes;
/// everything else is stored as F32.
inline void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path,
                         const std::filesystem::path& config_path) {
    const safetensors::File file = adapter_to_file(adapter);
    safetensors::save(file, path);
    write_adapter_config(adapter.config, config_path);
}

// ---------------------------------------------------------------------------
// Gradient dumps
// ---------------------------------------------------------------------------

enum class GradientMode { full_matrix, projections };

inline const char* to_string(GradientMode m) { return m == GradientMode::full_matrix ? "full_matrix" : "projections"; }

/// Calibration gradients per module. In full_matrix mode each entry is the
/// averaged d_out x d_in gradient; in projections mode each entry is an
/// n_cal x r matrix of per-example projections onto exported bases.
struct GradientDump {
    GradientMode mode = GradientMode::full_matrix;
    std::map<std::string, Matrix> entries;
    long n_cal = 0;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> basis_checksum;
    std::string example_range;

    std::set<std::string> module_set() const {
        std::set<std::string> out;
        for (const auto& [k, _] : entries) out.insert(k);
        return out;
    }
};

inline long parse_long_field(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::format, "metadata field '" + what + "' is not an integer: '" + text + "'");
    }
}

inline GradientDump load_gradient_dump(const std::filesystem::path& path) {
    safetensors::File file = safetensors::load(path);
    GradientDump dump;

    const auto n_cal_it = file.metadata.find("n_cal");
    if (n_cal_it == file.metadata.end()) {
        throw Error(ErrorKind::format, path.string() + ": missing metadata field 'n_cal'");
    }
    dump.n_cal = parse_long_field(n_cal_it->second, "n_cal");
    if (dump.n_cal < 1) throw Error(ErrorKind::invariant, path.string() + ": n_cal must be >= 1");
    if (auto it = file.metadata.find("seed"); it != file.metadata.end()) {
        dump.seed = static_cast<std::uint64_t>(std::stoull(it->second));
    }
    if (auto it = file.metadata.find("basis_checksum"); it != file.metadata.end()) {
        dump.basis_checksum = from_hex(it->second);
    }
    if (auto it = file.metadata.find("example_range"); it != file.metadata.end()) {
        dump.example_range = it->second;
    }

    bool saw_grad = false;
    bool saw_proj = false;
    for (auto& [key, tensor] : file.tensors) {
        std::string_view name = key;
        if (ends_with(name, ".grad")) {
            saw_grad = true;
            name.remove_suffix(5);
        } else if (ends_with(name, ".proj")) {
            saw_proj = true;
            name.remove_suffix(5);
        } else {
            throw Error(ErrorKind::format, path.string() + ": unexpected key '" + key + "' in gradient dump");
        }
        if (tensor.shape.size() != 2) throw Error(ErrorKind::format, key + ": expected a 2-D tensor");
        if (!tensor.is_finite()) throw Error(ErrorKind::invariant, key + ": non-finite value");
        dump.entries.emplace(std::string(name), tensor.to_matrix());
    }
    if (saw_grad && saw_proj) throw Error(ErrorKind::format, path.string() + ": mixed gradient modes");

    std::optional<GradientMode> declared;
    if (auto it = file.metadata.find("mode"); it != file.metadata.end()) {
        if (it->second == "full_matrix") declared = GradientMode::full_matrix;
        else if (it->second == "projections") declared = GradientMode::projections;
        else throw Error(ErrorKind::format, path.string() + ": unknown gradient mode '" + it->second + "'");
    }
    if (saw_grad || saw_proj) {
        dump.mode = saw_proj ? GradientMode::projections : GradientMode::full_matrix;
        if (declared && *declared != dump.mode) {
            throw Error(ErrorKind::format, path.string() + ": metadata mode disagrees with tensor keys");
        }
    } else if (declared) {
        dump.mode = *declared;
    } else {
        throw Error(ErrorKind::format, path.string() + ": missing metadata field 'mode'");
    }

    if (dump.mode == GradientMode::projections) {
        std::optional<Eigen::Index> cols;
        for (const auto& [module, m] : dump.entries) {
            if (cols && *cols != m.cols()) {
                throw Error(ErrorKind::format, path.string() + ": projection column count inconsistent at " + module);
            }
            cols = m.cols();
            if (m.rows() != dump.n_cal) {
                throw Error(ErrorKind::format, module + ": projection rows (" + std::to_string(m.rows()) +
                                                   ") differ from n_cal (" + std::to_string(dump.n_cal) + ")");
            }
        }
    }
    return dump;
}

inline void save_gradient_dump(const GradientDump& dump, const std::filesystem::path& path) {
    if (dump.n_cal < 1) throw Error(ErrorKind::invariant, "n_cal must be >= 1");
    safetensors::File file;
    file.metadata["mode"] = to_string(dump.mode);
    file.metadata["n_cal"] = std::to_string(dump.n_cal);
    if (dump.seed) file.metadata["seed"] = std::to_string(*dump.seed);
    if (dump.basis_checksum) file.metadata["basis_checksum"] = to_hex(*dump.basis_checksum);
    if (!dump.example_range.empty()) file.metadata["example_range"] = dump.example_range;
    const char* suffix = dump.mode == GradientMode::full_matrix ? ".grad" : ".proj";
    for (const auto& [module, m] : dump.entries) {
        require_finite(m, module + suffix);
        file.tensors.emplace(module + suffix, safetensors::make_f32(m));
    }
    safetensors::save(file, path);
}

// ---------------------------------------------------------------------------
// Exported bases
// ---------------------------------------------------------------------------

/// FNV-1a over the F32 payloads of U then V for each module, in sorted path order.
template <typename Range>
std::uint64_t basis_checksum(const Range& decompositions) {
    std::vector<const SpectralUpdate*> sorted;
    for (const SpectralUpdate& s : decompositions) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto* x, const auto* y) { return x->module_path < y->module_path; });
    std::uint64_t h = kFnvOffset;
    for (const SpectralUpdate* s : sorted) {
        h = fnv1a(safetensors::make_f32(s->u).data, h);
        h = fnv1a(safetensors::make_f32(s->v).data, h);
    }
    return h;
}

inline void export_bases(std::span<const SpectralUpdate> decompositions, const std::filesystem::path& path) {
    safetensors::File file;
    nlohmann::json scales = nlohmann::json::object();
    for (const SpectralUpdate& s : decompositions) {
        file.tensors.emplace(s.module_path + ".U", safetensors::make_f32(s.u));
        file.tensors.emplace(s.module_path + ".V", safetensors::make_f32(s.v));
        file.tensors.emplace(s.module_path + ".sigma", safetensors::make_f32(s.sigma));
        scales[s.module_path] = s.scale;
    }
    file.metadata["format"] = "spectral_surgeon.bases";
    file.metadata["basis_checksum"] = to_hex(basis_checksum(decompositions));
    file.metadata["scales"] = scales.dump();
    safetensors::save(file, path);
}

struct ExportedBases {
    std::map<std::string, SpectralUpdate> modules;
    std::uint64_t checksum = 0;
};

inline ExportedBases load_bases(const std::filesystem::path& path) {
    const safetensors::File file = safetensors::load(path);
    ExportedBases out;
    nlohmann::json scales = nlohmann::json::object();
    if (auto it = file.metadata.find("scales"); it != file.metadata.end()) scales = nlohmann::json::parse(it->second);
    for (const auto& [key, tensor] : file.tensors) {
        const auto dot = key.rfind('.');
        if (dot == std::string::npos) throw Error(ErrorKind::format, "unexpected key '" + key + "' in bases file");
        const std::string module = key.substr(0, dot);
        const std::string part = key.substr(dot + 1);
        if (!tensor.is_finite()) throw Error(ErrorKind::invariant, key + ": non-finite value");
        SpectralUpdate& s = out.modules[module];
        s.module_path = module;
        s.scale = scales.value(module, 1.0);
        if (part == "U") s.u = tensor.to_matrix();
        else if (part == "V") s.v = tensor.to_matrix();
        else if (part == "sigma") s.sigma = tensor.to_matrix().col(0);
        else throw Error(ErrorKind::format, "unexpected key '" + key + "' in bases file");
    }
    std::vector<SpectralUpdate> all;
    for (const auto& [_, s] : out.modules) {
        if (s.u.cols() != s.sigma.size() || s.v.cols() != s.sigma.size()) {
            throw Error(ErrorKind::format, s.module_path + ": incomplete or inconsistent basis triple");
        }
        all.push_back(s);
    }
    out.checksum = basis_checksum(all);
    if (auto it = file.metadata.find("basis_checksum"); it != file.metadata.end() && from_hex(it->second) != out.checksum) {
        throw Error(ErrorKind::invariant, path.string() + ": stored basis checksum does not match payload");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Edit reports
// ---------------------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct EditReportEntry {
    std::string module_path;
    Vector alpha;
    Vector sigma_before;
    Vector sigma_after;
    std::optional<long> k_core;
    std::optional<long> k_noise;
    double energy_ratio_pre = 1.0;
    double energy_ratio = 1.0;
    std::vector<std::string> flags;
};

struct EditReport {
    std::string policy;
    nlohmann::json config = nlohmann::json::object();
    std::string key_prefix;
    std::map<std::string, EditReportEntry> modules;

    long total_edited_scalars() const {
        long n = 0;
        for (const auto& [_, e] : modules) n += static_cast<long>(e.alpha.size());
        return n;
    }
};

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::json to_json(const EditReportEntry& e) {
    nlohmann::json j = {
        {"alpha", to_std(e.alpha)},
        {"sigma_before", to_std(e.sigma_before)},
        {"sigma_after", to_std(e.sigma_after)},
        {"energy_ratio_pre", e.energy_ratio_pre},
        {"energy_ratio", e.energy_ratio},
        {"flags", e.flags},
    };
    if (e.k_core) j["k_core"] = *e.k_core;
    if (e.k_noise) j["k_noise"] = *e.k_noise;
    return j;
}

inline nlohmann::json to_json(const EditReport& r) {
    nlohmann::json modules = nlohmann::json::object();
    for (const auto& [path, e] : r.modules) modules[path] = to_json(e);
    return {
        {"schema_version", kReportSchemaVersion},
        {"kind", "edit"},
        {"policy", r.policy},
        {"config", r.config},
        {"key_prefix", r.key_prefix},
        {"total_edited_scalars", r.total_edited_scalars()},
        {"modules", modules},
    };
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

}  // namespace spectral_surgeon
