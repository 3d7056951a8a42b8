#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "fedzda/zsdg.hpp"

namespace fedzda {

/// Writes images[M,C,H,W] (values in [0,1]) as one 8-bit PNG tiled `columns`
/// wide with a 1-pixel gap. C must be 1 (gray) or 3 (RGB).
void write_png_grid(const std::filesystem::path& path, std::span<const float> images, std::size_t count,
                    std::size_t channels, std::size_t height, std::size_t width, std::size_t columns = 8);

/// class_<n>.png per class plus manifest.json (class, file, count, sources,
/// mean final cross-entropy per class, overall losses). Returns the PNG paths.
std::vector<std::filesystem::path> dump_synthetic(const std::filesystem::path& dir, const SyntheticBatch<float>& batch);

}  // namespace fedzda
