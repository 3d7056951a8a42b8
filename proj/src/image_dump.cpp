#include "fedzda/image_dump.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "fedzda/errors.hpp"

namespace fedzda {

void write_png_grid(const std::filesystem::path& path, std::span<const float> images, std::size_t count,
                    std::size_t channels, std::size_t height, std::size_t width, std::size_t columns) {
  if (channels != 1 && channels != 3) throw ConfigError("PNG dump supports 1 or 3 channels");
  if (count == 0 || columns == 0) throw ConfigError("PNG dump needs at least one image and one column");
  if (images.size() != count * channels * height * width) throw DimensionError("PNG dump: pixel count mismatch");
  const std::size_t cols = std::min(columns, count);
  const std::size_t rows = (count + cols - 1) / cols;
  const std::size_t W = cols * (width + 1) - 1, H = rows * (height + 1) - 1;
  std::vector<png_byte> pixels(W * H * channels, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t ox = (i % cols) * (width + 1), oy = (i / cols) * (height + 1);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const float v = images[((i * channels + c) * height + y) * width + x];
          pixels[((oy + y) * W + ox + x) * channels + c] =
              static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
  }

  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw ParseError(ParseError::Kind::io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw ParseError(ParseError::Kind::io, "libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < H; ++y) png_write_row(png, pixels.data() + y * W * channels);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

std::vector<std::filesystem::path> dump_synthetic(const std::filesystem::path& dir, const SyntheticBatch<float>& batch) {
  std::filesystem::create_directories(dir);
  const std::size_t C = batch.images.dim(1), H = batch.images.dim(2), W = batch.images.dim(3);
  const std::size_t px = C * H * W;
  std::vector<std::filesystem::path> files;
  nlohmann::json manifest;
  manifest["classes"] = nlohmann::json::array();
  for (std::size_t n = 0; n < batch.classes; ++n) {
    std::vector<float> pixels;
    std::set<std::size_t> sources;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (static_cast<std::size_t>(batch.labels[i]) == n) {
        auto im = batch.images.data().subspan(i * px, px);
        pixels.insert(pixels.end(), im.begin(), im.end());
        sources.insert(batch.source[i]);
      }
    if (pixels.empty()) continue;
    const auto file = dir / ("class_" + std::to_string(n) + ".png");
    write_png_grid(file, pixels, pixels.size() / px, C, H, W);
    files.push_back(file);
    manifest["classes"].push_back({{"class", n},
                                   {"file", file.filename().string()},
                                   {"count", pixels.size() / px},
                                   {"sources", std::vector<std::size_t>(sources.begin(), sources.end())},
                                   {"loss", n < batch.class_loss.size() ? batch.class_loss[n] : 0.0}});
  }
  manifest["final_loss"] = nlohmann::json::array();
  for (const auto& l : batch.final_loss)
    manifest["final_loss"].push_back({{"total", l.total}, {"bn", l.bn}, {"ce", l.ce}});
  manifest["initial_loss"] = nlohmann::json::array();
  for (const auto& l : batch.initial_loss)
    manifest["initial_loss"].push_back({{"total", l.total}, {"bn", l.bn}, {"ce", l.ce}});
  std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(1) << '\n';
  return files;
}

}  // namespace fedzda
