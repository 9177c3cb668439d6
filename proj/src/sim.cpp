#include "mamat/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace mamat::sim {

void SimParams::validate() const {
  if (!(alpha >= 0)) throw std::invalid_argument("alpha must be non-negative");
  if (!(sigma_s > 0)) throw std::invalid_argument("sigma_s must be positive");
  if (!(sigma_b >= 0)) throw std::invalid_argument("sigma_b must be non-negative");
  if (!(rho >= 0 && rho < 1)) throw std::invalid_argument("rho must be in [0, 1)");
}

nlohmann::json SimParams::to_json() const {
  return {{"alpha", alpha}, {"sigma_s", sigma_s}, {"rho", rho}, {"sigma_b", sigma_b}, {"seed", seed}};
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0)) throw std::invalid_argument("sigma must be non-negative");
  if (sigma == 0) return {1.0};
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

std::vector<double> gaussian_filter(const std::vector<double>& plane, std::size_t h, std::size_t w, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  auto clampi = [](std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, std::ptrdiff_t(n) - 1));
  };
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * plane[y * w + clampi(std::ptrdiff_t(x) + i, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * tmp[clampi(std::ptrdiff_t(y) + i, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

namespace {

// White noise filtered on a domain padded by the kernel radius, cropped and
// scaled to unit standard deviation.
std::vector<double> smooth_noise(std::size_t h, std::size_t w, double sigma, std::mt19937_64& rng) {
  const auto pad = static_cast<std::size_t>(std::ceil(3 * sigma));
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(ph * pw);
  for (auto& v : noise) v = normal(rng);
  const auto filtered = gaussian_filter(noise, ph, pw, sigma);
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = filtered[(y + pad) * pw + x + pad];
  double mean = 0;
  for (auto v : out) mean += v;
  mean /= double(out.size());
  double var = 0;
  for (auto v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(out.size()));
  if (sd > 0) {
    for (auto& v : out) v /= sd;
  }
  return out;
}

}  // namespace

TiltField gen_tilt_fields(std::size_t frames, std::size_t h, std::size_t w, const SimParams& p) {
  p.validate();
  TiltField field({frames, h, w, 2}, 0.0);
  std::mt19937_64 rng(p.seed);
  const double innovation = std::sqrt(1.0 - p.rho * p.rho);
  const std::size_t plane = h * w * 2;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const auto fresh = smooth_noise(h, w, p.sigma_s, rng);
      for (std::size_t i = 0; i < h * w; ++i) {
        double& d = field[t * plane + 2 * i + axis];
        d = t == 0 ? p.alpha * fresh[i] : p.rho * field[(t - 1) * plane + 2 * i + axis] + innovation * p.alpha * fresh[i];
      }
    }
  }
  return field;
}

Tensor<float> warp_frame(const Tensor<float>& frame, const Tensor<double>& field) {
  if (frame.rank() != 3 || field.rank() != 3 || field.dim(0) != frame.dim(1) || field.dim(1) != frame.dim(2) ||
      field.dim(2) != 2) {
    throw ShapeError("warp_frame: frame " + shape_str(frame.shape()) + " and field " + shape_str(field.shape()) +
                     " disagree");
  }
  const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Tensor<float> out(frame.shape(), 0.0f);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double* d = field.ptr() + (y * W + x) * 2;
      const double sy = std::clamp(double(y) + d[0], 0.0, double(H - 1));
      const double sx = std::clamp(double(x) + d[1], 0.0, double(W - 1));
      const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double fy = sy - double(y0), fx = sx - double(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = frame.ptr() + c * H * W;
        const double v = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                         fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
        out[(c * H + y) * W + x] = float(v);
      }
    }
  return out;
}

Tensor<float> blur_frame(const Tensor<float>& frame, double sigma) {
  if (frame.rank() != 3) throw ShapeError("blur_frame expects C x H x W");
  if (sigma == 0) return frame;
  const std::size_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Tensor<float> out(frame.shape(), 0.0f);
  std::vector<double> plane(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    std::copy(frame.ptr() + c * H * W, frame.ptr() + (c + 1) * H * W, plane.begin());
    const auto f = gaussian_filter(plane, H, W, sigma);
    std::transform(f.begin(), f.end(), out.ptr() + c * H * W, [](double v) { return float(v); });
  }
  return out;
}

VideoClip simulate_clip(const VideoClip& clean, const SimParams& p) {
  p.validate();
  const auto fields = gen_tilt_fields(clean.frames(), clean.height(), clean.width(), p);
  VideoClip out(clean.frames(), clean.channels(), clean.height(), clean.width());
  const std::size_t plane = clean.height() * clean.width() * 2;
  for (std::size_t t = 0; t < clean.frames(); ++t) {
    const Tensor<double> field({clean.height(), clean.width(), 2},
                               std::vector<double>(fields.ptr() + t * plane, fields.ptr() + (t + 1) * plane));
    out.set_frame(t, blur_frame(warp_frame(clean.frame(t), field), p.sigma_b));
  }
  return out;
}

VideoClip synthetic_pattern(std::size_t frames, std::size_t channels, std::size_t h, std::size_t w,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double phase = 2 * pi * u(rng), fy = 2 + 2 * u(rng), fx = 2 + 2 * u(rng);
  const double cy = 0.3 + 0.4 * u(rng), cx = 0.3 + 0.4 * u(rng);
  const double vy = 0.3 * (u(rng) - 0.5), vx = 0.3 * (u(rng) - 0.5);
  VideoClip clip(frames, channels, h, w);
  for (std::size_t t = 0; t < frames; ++t) {
    const double dy = vy * double(t), dx = vx * double(t);  // drift in pixels
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double yy = (double(y) + dy) / double(h), xx = (double(x) + dx) / double(w);
        const double bars = 0.5 + 0.5 * std::sin(2 * pi * fx * xx + phase);
        const double rings = 0.5 + 0.5 * std::cos(2 * pi * fy * std::hypot(yy - cy, xx - cx));
        const bool check = (int(std::floor(yy * 4)) + int(std::floor(xx * 4))) % 2 == 0;
        for (std::size_t c = 0; c < channels; ++c) {
          const double mix = channels == 1 ? 0.5 : 0.25 + 0.25 * double(c);
          const double v = 0.1 + 0.8 * (mix * bars + (1 - mix) * rings) * (check ? 1.0 : 0.7);
          clip.at(t, c, y, x) = float(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  return clip;
}

}  // namespace mamat::sim
