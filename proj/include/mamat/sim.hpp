#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "mamat/clip.hpp"

namespace mamat::sim {

struct SimParams {
  double alpha = 2.0;    // tilt amplitude, pixels
  double sigma_s = 8.0;  // spatial correlation of the tilt, pixels
  double rho = 0.9;      // AR(1) coefficient between frames
  double sigma_b = 1.0;  // blur, pixels
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Frames x H x W x 2 displacements (dy, dx) in pixels.
using TiltField = Tensor<double>;

// Normalised 1-D Gaussian of radius ceil(3 sigma); {1} when sigma == 0.
std::vector<double> gaussian_kernel(double sigma);

// Separable Gaussian filter of an H x W plane with edge replication.
std::vector<double> gaussian_filter(const std::vector<double>& plane, std::size_t h, std::size_t w, double sigma);

TiltField gen_tilt_fields(std::size_t frames, std::size_t h, std::size_t w, const SimParams& p);

// output(y, x) = input(y + dy, x + dx), bilinear, sample positions clamped to the frame.
// frame: C x H x W; field: H x W x 2.
Tensor<float> warp_frame(const Tensor<float>& frame, const Tensor<double>& field);

// Separable Gaussian blur of each channel, edge-clamped; sigma 0 is the identity.
Tensor<float> blur_frame(const Tensor<float>& frame, double sigma);

// Warps every frame with its tilt field, then blurs it.
VideoClip simulate_clip(const VideoClip& clean, const SimParams& p);

// Smooth drifting test pattern (bars, blobs and a checker), values in [0, 1].
VideoClip synthetic_pattern(std::size_t frames, std::size_t channels, std::size_t h, std::size_t w,
                            std::uint64_t seed = 0);

}  // namespace mamat::sim
