// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/adapter_io.hpp"
#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/spectral_core.hpp"

namespace spectral_surgeon {

enum class AlignMetric { u1_similarity, subspace_overlap };

inline const char* to_string(AlignMetric m) {
    return m == AlignMetric::u1_similarity ? "u1_similarity" : "subspace_overlap";
}

inline AlignMetric parse_align_metric(const std::string& s) {
    if (s == "u1_similarity") return AlignMetric::u1_similarity;
    if (s == "subspace_overlap") return AlignMetric::subspace_overlap;
    throw Error(ErrorKind::usage, "unknown metric '" + s + "' (expected u1_similarity or subspace_overlap)");
}

inline double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }

/// |u_a^T u_b| for unit vectors.
inline double align_u1(const Vector& u_a, const Vector& u_b) {
    if (u_a.size() != u_b.size()) throw Error(ErrorKind::invariant, "align_u1: dimension mismatch");
    if (std::abs(u_a.norm() - 1.0) > 1e-8 || std::abs(u_b.norm() - 1.0) > 1e-8) {
        throw Error(ErrorKind::invariant, "align_u1: inputs must be unit vectors");
    }
    return clamp_unit(std::abs(u_a.dot(u_b)));
}

inline void require_orthonormal(const Matrix& block, const char* what) {
    const Matrix gram = block.transpose() * block;
    const double dev = (gram - Matrix::Identity(block.cols(), block.cols())).cwiseAbs().maxCoeff();
    if (dev > 1e-8) {
        throw Error(ErrorKind::invariant, std::string(what) + ": columns are not orthonormal (deviation " +
                                              std::to_string(dev) + ")");
    }
}

/// (1/m) * ||U_a^T U_b||_F^2, the mean squared cosine of the principal angles
/// between two m-dimensional subspaces.
inline double align_subspace(const Matrix& u_a_block, const Matrix& u_b_block) {
    if (u_a_block.cols() != u_b_block.cols()) throw Error(ErrorKind::invariant, "align_subspace: m mismatch");
    if (u_a_block.rows() != u_b_block.rows()) throw Error(ErrorKind::invariant, "align_subspace: dimension mismatch");
    if (u_a_block.cols() < 1) throw Error(ErrorKind::invariant, "align_subspace: m must be >= 1");
    require_orthonormal(u_a_block, "align_subspace lhs");
    require_orthonormal(u_b_block, "align_subspace rhs");
    const double m = static_cast<double>(u_a_block.cols());
    return clamp_unit((u_a_block.transpose() * u_b_block).squaredNorm() / m);
}

/// Expected overlap of two random m-dimensional subspaces of R^d.
inline double random_subspace_baseline(long d, long m) {
    if (d < 1 || m < 1) throw Error(ErrorKind::invariant, "baseline requires d, m >= 1");
    return static_cast<double>(m) / static_cast<double>(d);
}

/// Edited-scalar count when every layer edits the same module families: L * |M| * r.
inline long count_edited_scalars(long num_layers, long num_families, long r) {
    return num_layers * num_families * r;
}

struct ModulePathParts {
    std::optional<long> layer;
    std::string family;
};

// "model.layers.3.self_attn.o_proj" -> {3, "o_proj"}; the layer is the first
// all-digit path segment.
inline ModulePathParts parse_module_path(std::string_view path) {
    ModulePathParts out;
    std::size_t start = 0;
    while (start <= path.size()) {
        const std::size_t dot = path.find('.', start);
        const std::string_view seg = path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
        if (!out.layer && !seg.empty() && std::all_of(seg.begin(), seg.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            long v = 0;
            std::from_chars(seg.data(), seg.data() + seg.size(), v);
            out.layer = v;
        }
        if (dot == std::string_view::npos) {
            out.family = std::string(seg);
            break;
        }
        start = dot + 1;
    }
    return out;
}

struct AlignmentMatrix {
    AlignMetric metric = AlignMetric::subspace_overlap;
    long m = 1;
    std::string module_family;
    std::vector<long> layer_ids;
    Matrix values;
    long dimension = 0;  // output dimension d of the compared bases

    double baseline() const { return random_subspace_baseline(dimension, metric == AlignMetric::u1_similarity ? 1 : m); }
};

/// Module path per layer for one family; every layer present in the adapter must have it.
inline std::map<long, std::string> family_by_layer(const LoraAdapter& adapter, const std::string& family) {
    std::map<long, std::string> found;
    std::set<long> layers;
    for (const auto& [path, _] : adapter.modules) {
        const auto parts = parse_module_path(path);
        if (!parts.layer) continue;
        layers.insert(*parts.layer);
        if (parts.family != family) continue;
        if (!found.emplace(*parts.layer, path).second) {
            throw Error(ErrorKind::invariant, "family " + family + " appears twice in layer " + std::to_string(*parts.layer));
        }
    }
    for (long layer : layers) {
        if (!found.contains(layer)) {
            throw Error(ErrorKind::coverage, "family " + family + " absent in layer " + std::to_string(layer));
        }
    }
    if (found.empty()) throw Error(ErrorKind::coverage, "family " + family + " not present in the adapter");
    return found;
}

inline AlignmentMatrix layer_heatmap(const LoraAdapter& adapter, const std::string& family, AlignMetric metric, long m) {
    if (metric == AlignMetric::subspace_overlap && (m < 1 || m > adapter.rank())) {
        throw Error(ErrorKind::usage, "subspace dimension m=" + std::to_string(m) + " must lie in [1, r=" +
                                          std::to_string(adapter.rank()) + "]");
    }
    const long width = metric == AlignMetric::u1_similarity ? 1 : m;
    const auto paths = family_by_layer(adapter, family);

    AlignmentMatrix out;
    out.metric = metric;
    out.m = width;
    out.module_family = family;
    std::vector<std::string> module_paths;
    for (const auto& [layer, path] : paths) {
        out.layer_ids.push_back(layer);
        module_paths.push_back(path);
    }
    const std::size_t n = module_paths.size();
    std::vector<Matrix> blocks(n);
    parallel_for(n, [&](std::size_t i) {
        const SpectralUpdate s = decompose(adapter.modules.at(module_paths[i]), adapter.config.scale(), module_paths[i]);
        blocks[i] = s.u.leftCols(width);
    });
    out.dimension = blocks.front().rows();
    for (const auto& b : blocks) {
        if (b.rows() != out.dimension) throw Error(ErrorKind::invariant, "family " + family + " mixes output dimensions");
    }

    out.values = Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    parallel_for(n * n, [&](std::size_t cell) {
        const std::size_t i = cell / n;
        const std::size_t j = cell % n;
        if (j <= i) return;
        const double v = metric == AlignMetric::u1_similarity ? align_u1(blocks[i].col(0), blocks[j].col(0))
                                                              : align_subspace(blocks[i], blocks[j]);
        out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        out.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    });
    return out;
}

struct SynergyResult {
    std::vector<long> layer_ids;
    std::vector<double> values;
    long m = 1;
    long d_model = 0;
    double baseline = 0.0;
};

inline SynergyResult intra_layer_synergy(const LoraAdapter& adapter, long m, const std::string& family_a = "o_proj",
                                         const std::string& family_b = "down_proj") {
    if (m < 1 || m > adapter.rank()) {
        throw Error(ErrorKind::usage, "subspace dimension m must lie in [1, r]");
    }
    const auto paths_a = family_by_layer(adapter, family_a);
    const auto paths_b = family_by_layer(adapter, family_b);
    SynergyResult out;
    out.m = m;
    for (const auto& [layer, path_a] : paths_a) {
        const auto& path_b = paths_b.at(layer);
        const FactorPair& fa = adapter.modules.at(path_a);
        const FactorPair& fb = adapter.modules.at(path_b);
        if (fa.d_out() != fb.d_out()) {
            throw Error(ErrorKind::invariant, "output dimension mismatch in layer " + std::to_string(layer) + " (" +
                                                  std::to_string(fa.d_out()) + " vs " + std::to_string(fb.d_out()) + ")");
        }
        out.d_model = fa.d_out();
        const SpectralUpdate sa = decompose(fa, adapter.config.scale(), path_a);
        const SpectralUpdate sb = decompose(fb, adapter.config.scale(), path_b);
        out.layer_ids.push_back(layer);
        out.values.push_back(align_subspace(sa.u.leftCols(m), sb.u.leftCols(m)));
    }
    out.baseline = random_subspace_baseline(out.d_model, m);
    return out;
}

inline std::string format_sig9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline nlohmann::json sidecar_json(const AlignmentMatrix& h) {
    return {
        {"metric", to_string(h.metric)},
        {"m", h.m},
        {"family", h.module_family},
        {"layers", h.layer_ids},
        {"dimension", h.dimension},
        {"baseline", h.baseline()},
    };
}

/// Writes the matrix as CSV (first row and column hold layer labels) plus a
/// one-line JSON sidecar next to it (same stem, ".json").
inline void write_heatmap(const AlignmentMatrix& h, const std::filesystem::path& csv_path) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw Error(ErrorKind::io, "cannot open " + csv_path.string() + " for writing");
    csv << "layer";
    for (long id : h.layer_ids) csv << ',' << id;
    csv << '\n';
    for (Eigen::Index i = 0; i < h.values.rows(); ++i) {
        csv << h.layer_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < h.values.cols(); ++j) csv << ',' << format_sig9(h.values(i, j));
        csv << '\n';
    }
    if (!csv) throw Error(ErrorKind::io, "write failed for " + csv_path.string());

    auto sidecar_path = csv_path;
    sidecar_path.replace_extension(".json");
    std::ofstream side(sidecar_path, std::ios::trunc);
    if (!side) throw Error(ErrorKind::io, "cannot open " + sidecar_path.string() + " for writing");
    side << sidecar_json(h).dump() << '\n';
}

}  // namespace spectral_surgeon
