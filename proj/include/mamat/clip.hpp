#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "mamat/tensor.hpp"

namespace mamat {

// Frames x Channels x Height x Width, values in [0, 1].
struct VideoClip {
  Tensor<float> data;

  VideoClip() = default;
  explicit VideoClip(Tensor<float> frames);
  VideoClip(std::size_t frames, std::size_t channels, std::size_t height, std::size_t width);

  std::size_t frames() const { return data.dim(0); }
  std::size_t channels() const { return data.dim(1); }
  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
  std::size_t frame_size() const { return channels() * height() * width(); }

  // Channels x Height x Width copy of frame i.
  Tensor<float> frame(std::size_t i) const;
  void set_frame(std::size_t i, const Tensor<float>& frame);
  float& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x);
  float at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit binary PGM (1 channel) or PPM (3 channels). Values are scaled by 1/255.
Tensor<float> read_pnm(const std::filesystem::path& path);
// Values are clamped to [0, 1] and rounded to the nearest of 256 levels.
void write_pnm(const std::filesystem::path& path, const Tensor<float>& frame);

// A clip directory holds frame_00000.pgm (or .ppm), frame_00001..., and
// manifest.json with width, height, frames, channels and any extra fields.
inline constexpr const char* kManifestName = "manifest.json";

std::string frame_file_name(std::size_t index, std::size_t channels);

// Reads frames in index order. When a manifest exists its geometry must agree.
VideoClip read_clip(const std::filesystem::path& dir);
// Writes frames and a manifest; `extra` fields are merged into the manifest.
void write_clip(const std::filesystem::path& dir, const VideoClip& clip, const nlohmann::json& extra = {});

nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace mamat
