#pragma once

#include <filesystem>

#include "cmitune/model.hpp"

namespace cmitune {

// Single-line JSON header {version, config, manifest of name/shape/offset}
// followed by a raw little-endian float64 payload. Offsets count elements
// from the payload start. Round-trips bit-exactly.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace cmitune
