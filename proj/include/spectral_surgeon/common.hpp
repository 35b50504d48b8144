// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace spectral_surgeon {

static_assert(std::endian::native == std::endian::little,
              "tensor containers are little-endian; big-endian hosts are unsupported");

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ErrorKind {
    io,
    format,
    invariant,
    coverage,
    numerical,
    usage,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io: return "io";
        case ErrorKind::format: return "format";
        case ErrorKind::invariant: return "invariant";
        case ErrorKind::coverage: return "coverage";
        case ErrorKind::numerical: return "numerical";
        case ErrorKind::usage: return "usage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// 64-bit FNV-1a.
inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes,
                           std::uint64_t state = kFnvOffset) {
    for (std::uint8_t b : bytes) {
        state ^= b;
        state *= kFnvPrime;
    }
    return state;
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t state = kFnvOffset) {
    return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()),
                 state);
}

inline std::string to_hex(std::uint64_t value) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xf];
        value >>= 4;
    }
    return out;
}

inline std::uint64_t from_hex(std::string_view text) {
    if (text.empty() || text.size() > 16) {
        throw Error(ErrorKind::format, "invalid hex checksum '" + std::string(text) + "'");
    }
    std::uint64_t value = 0;
    for (char c : text) {
        value <<= 4;
        if (c >= '0' && c <= '9') value |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') value |= static_cast<std::uint64_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') value |= static_cast<std::uint64_t>(c - 'A' + 10);
        else throw Error(ErrorKind::format, "invalid hex checksum '" + std::string(text) + "'");
    }
    return value;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const std::string& what) {
    if (!m.allFinite()) {
        throw Error(ErrorKind::invariant, "non-finite value in " + what);
    }
}

inline double relative_frobenius(const Matrix& got, const Matrix& want) {
    const double denom = std::max(1.0, want.norm());
    return (got - want).norm() / denom;
}

// Worker count for per-module parallel work; capped by SPECTRAL_SURGEON_THREADS.
inline unsigned worker_count(std::size_t jobs) {
    unsigned n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SPECTRAL_SURGEON_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    }
    return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs fn(i) for i in [0, count). Each index writes only its own output slot, so
// results do not depend on scheduling. The first exception (lowest index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const unsigned workers = worker_count(count);
    std::vector<std::exception_ptr> errors(count);
    auto run_range = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < count; i += stride) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        run_range(0, 1);
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run_range, w, workers);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace spectral_surgeon
