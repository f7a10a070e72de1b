#pragma once

#include <string>
#include <vector>

#include "prefalign/tensor.hpp"

namespace prefalign {

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

// Binary checkpoint: magic "MMRL", u32 version, u32 tensor count, then per
// tensor (u32 name length, name bytes, u32 rank, u64 dims, f64 little-endian
// values). Writes go through a temp file + rename so a crash never leaves a
// truncated checkpoint at the target path. Round-trips are bit-exact.
void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::string& path);

// Non-numeric state (rng counters, step indices) rides along as f64 payloads
// via bit reinterpretation; these helpers keep that exact.
double u64_as_f64(std::uint64_t v);
std::uint64_t f64_as_u64(double v);

}  // namespace prefalign
