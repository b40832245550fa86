#pragma once

// Binary tensor file format used for all checkpoints and intermediate dumps:
//   magic "CANM" | u8 dtype (0 = f64, 1 = f32) | u8 rank |
//   rank x u32 little-endian dims | row-major payload (little-endian).

#include <string>

#include "canm/tensor.hpp"

namespace canm {

void write_tensor(const std::string& path, const Tensor& t, DType dtype = DType::f64);

/// Reads a tensor file; f32 payloads are upcast to double. When dtype_out is
/// non-null it receives the stored dtype tag.
Tensor read_tensor(const std::string& path, DType* dtype_out = nullptr);

}  // namespace canm
