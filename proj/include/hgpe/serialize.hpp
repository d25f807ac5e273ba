#pragma once

#include <cstdint>
#include <string>

#include "hgpe/model.hpp"

namespace hgpe {

// Binary weight file: magic "HGPE", u32 version, u32 tensor count, then per
// tensor: u32 name length + UTF-8 name, u32 rank, u64 dims, u8 dtype tag
// (0 = f64, 1 = f32), raw little-endian payload. Tensors appear in
// ParamStore order (learnable parameters and batch-norm buffers).
enum class WeightDtype : uint8_t { F64 = 0, F32 = 1 };

inline constexpr uint32_t kWeightFormatVersion = 1;

void save_weights(const std::string& path, const ParamStore& store,
                  WeightDtype dtype = WeightDtype::F64);

// Loads into an existing store; names, order and shapes must match exactly.
// Throws std::runtime_error naming the first mismatched tensor.
void load_weights(const std::string& path, ParamStore& store);

}  // namespace hgpe
