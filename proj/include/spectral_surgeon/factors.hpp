// Copyright 2026 The Spectral Surgeon Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>

#include "spectral_surgeon/common.hpp"
#include "spectral_surgeon/safetensors.hpp"

namespace spectral_surgeon {

// Raw tensors a FactorPair was decoded from. Kept so that untouched modules can be
// written back byte-for-byte.
struct FactorSource {
    safetensors::Tensor a;
    safetensors::Tensor b;
};

/// One LoRA module: the update is scale * b * a with a: r x d_in and b: d_out x r.
struct FactorPair {
    Matrix a;
    Matrix b;
    safetensors::Dtype precision = safetensors::Dtype::f32;
    std::shared_ptr<const FactorSource> source;

    Eigen::Index rank() const { return a.rows(); }
    Eigen::Index d_in() const { return a.cols(); }
    Eigen::Index d_out() const { return b.rows(); }

    // True when a/b still equal the decoded source tensors exactly.
    bool matches_source() const {
        return source && source->a.to_matrix() == a && source->b.to_matrix() == b;
    }
};

inline void validate_factors(const FactorPair& f, const std::string& where) {
    if (f.b.cols() != f.a.rows()) {
        throw Error(ErrorKind::invariant,
                    where + ": rank mismatch (A has " + std::to_string(f.a.rows()) + " rows, B has " +
                        std::to_string(f.b.cols()) + " columns)");
    }
    if (f.rank() < 1) throw Error(ErrorKind::invariant, where + ": rank must be >= 1");
    if (f.rank() > std::min(f.d_out(), f.d_in())) {
        throw Error(ErrorKind::invariant, where + ": rank exceeds min(d_out, d_in)");
    }
    require_finite(f.a, where + " lora_A");
    require_finite(f.b, where + " lora_B");
}

}  // namespace spectral_surgeon
