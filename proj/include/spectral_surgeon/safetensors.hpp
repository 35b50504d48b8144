// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reader/writer for the safetensors container:
//   [u64 little-endian header length N][N bytes JSON header][raw tensor data]
// The header maps tensor names to {dtype, shape, data_offsets} and may carry a
// string-to-string "__metadata__" map. Offsets are relative to the data section.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectral_surgeon/common.hpp"

namespace spectral_surgeon::safetensors {

enum class Dtype { f64, f32, f16, bf16 };

inline std::size_t element_size(Dtype dtype) {
    switch (dtype) {
        case Dtype::f64: return 8;
        case Dtype::f32: return 4;
        case Dtype::f16: return 2;
        case Dtype::bf16: return 2;
    }
    return 0;
}

inline const char* dtype_name(Dtype dtype) {
    switch (dtype) {
        case Dtype::f64: return "F64";
        case Dtype::f32: return "F32";
        case Dtype::f16: return "F16";
        case Dtype::bf16: return "BF16";
    }
    return "?";
}

inline Dtype parse_dtype(const std::string& name) {
    if (name == "F64") return Dtype::f64;
    if (name == "F32") return Dtype::f32;
    if (name == "F16") return Dtype::f16;
    if (name == "BF16") return Dtype::bf16;
    throw Error(ErrorKind::format, "unsupported tensor dtype '" + name + "'");
}

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;
    std::uint32_t bits = 0;
    if (exponent == 0) {
        if (mantissa == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exponent = 127 - 15 + 1;
            while ((mantissa & 0x400u) == 0) {
                mantissa <<= 1;
                --exponent;
            }
            mantissa &= 0x3ffu;
            bits = sign | (exponent << 23) | (mantissa << 13);
        }
    } else if (exponent == 0x1f) {
        bits = sign | 0x7f800000u | (mantissa << 13);
    } else {
        bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(bits);
}

inline float bf16_to_float(std::uint16_t h) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

struct Tensor {
    Dtype dtype = Dtype::f32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> data;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }

    bool operator==(const Tensor&) const = default;

    // Element i promoted to double.
    double at(std::size_t i) const {
        const std::uint8_t* p = data.data() + i * element_size(dtype);
        switch (dtype) {
            case Dtype::f64: {
                double v;
                std::memcpy(&v, p, 8);
                return v;
            }
            case Dtype::f32: {
                float v;
                std::memcpy(&v, p, 4);
                return v;
            }
            case Dtype::f16: {
                std::uint16_t v;
                std::memcpy(&v, p, 2);
                return half_to_float(v);
            }
            case Dtype::bf16: {
                std::uint16_t v;
                std::memcpy(&v, p, 2);
                return bf16_to_float(v);
            }
        }
        return 0.0;
    }

    // Interprets the tensor as a row-major matrix. 1-D tensors become column vectors.
    Matrix to_matrix() const {
        if (shape.size() > 2) {
            throw Error(ErrorKind::format, "expected a tensor of rank <= 2");
        }
        const Eigen::Index rows = shape.empty() ? 1 : shape[0];
        const Eigen::Index cols = shape.size() == 2 ? shape[1] : 1;
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) {
                m(i, j) = at(static_cast<std::size_t>(i * cols + j));
            }
        }
        return m;
    }

    bool is_finite() const {
        const std::size_t n = numel();
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(at(i))) return false;
        }
        return true;
    }
};

inline Tensor make_f32(const Matrix& m) {
    Tensor t;
    t.dtype = Dtype::f32;
    t.shape = {m.rows(), m.cols()};
    t.data.resize(static_cast<std::size_t>(m.size()) * 4);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j, ++k) {
            const float v = static_cast<float>(m(i, j));
            std::memcpy(t.data.data() + k * 4, &v, 4);
        }
    }
    return t;
}

inline Tensor make_f32(const Vector& v) {
    Tensor t = make_f32(Matrix(v));
    t.shape = {v.size()};
    return t;
}

inline Tensor make_f64(const Matrix& m) {
    Tensor t;
    t.dtype = Dtype::f64;
    t.shape = {m.rows(), m.cols()};
    t.data.resize(static_cast<std::size_t>(m.size()) * 8);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j, ++k) {
            const double v = m(i, j);
            std::memcpy(t.data.data() + k * 8, &v, 8);
        }
    }
    return t;
}

struct File {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

inline File parse(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 8) {
        throw Error(ErrorKind::format, origin + ": malformed header length (file shorter than 8 bytes)");
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) {
        throw Error(ErrorKind::format, origin + ": malformed header length " + std::to_string(header_len));
    }
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_begin, header_begin + header_len);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::format, origin + ": JSON header parse failure: " + e.what());
    }
    if (!header.is_object()) {
        throw Error(ErrorKind::format, origin + ": JSON header is not an object");
    }

    const std::span<const std::uint8_t> payload = bytes.subspan(8 + header_len);
    File file;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) {
                throw Error(ErrorKind::format, origin + ": __metadata__ is not an object");
            }
            for (const auto& [key, value] : entry.items()) {
                file.metadata[key] = value.is_string() ? value.get<std::string>() : value.dump();
            }
            continue;
        }
        try {
            Tensor t;
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > payload.size()) {
                throw Error(ErrorKind::format, "data_offsets out of range");
            }
            for (auto d : t.shape) {
                if (d < 0) throw Error(ErrorKind::format, "negative dimension");
            }
            if (offsets[1] - offsets[0] != t.numel() * element_size(t.dtype)) {
                throw Error(ErrorKind::format, "byte size does not match shape and dtype");
            }
            t.data.assign(payload.begin() + static_cast<std::ptrdiff_t>(offsets[0]),
                          payload.begin() + static_cast<std::ptrdiff_t>(offsets[1]));
            file.tensors.emplace(name, std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::format, origin + ": tensor '" + name + "': " + e.what());
        } catch (const Error& e) {
            throw Error(ErrorKind::format, origin + ": tensor '" + name + "': " + e.what());
        }
    }
    return file;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline File load(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    return parse(bytes, path.string());
}

// Tensors are laid out in sorted key order; the header is space-padded to 8 bytes.
inline std::vector<std::uint8_t> serialize(const File& file) {
    nlohmann::json header = nlohmann::json::object();
    if (!file.metadata.empty()) {
        header["__metadata__"] = file.metadata;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        if (t.data.size() != t.numel() * element_size(t.dtype)) {
            throw Error(ErrorKind::invariant, "tensor '" + name + "' byte size does not match its shape");
        }
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + t.data.size()}}};
        offset += t.data.size();
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::vector<std::uint8_t> out(8 + text.size() + offset);
    const std::uint64_t len = text.size();
    std::memcpy(out.data(), &len, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    std::size_t pos = 8 + text.size();
    for (const auto& [name, t] : file.tensors) {
        std::memcpy(out.data() + pos, t.data.data(), t.data.size());
        pos += t.data.size();
    }
    return out;
}

inline void save(const File& file, const std::filesystem::path& path) {
    const auto bytes = serialize(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

}  // namespace spectral_surgeon::safetensors
