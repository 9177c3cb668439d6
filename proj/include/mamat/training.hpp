#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mamat/clip.hpp"
#include "mamat/model.hpp"

namespace mamat {

// mean_i sqrt((x_i - y_i)^2 + eps^2), evaluated as eps + mean(hypot(r, eps) - eps)
// so that identical inputs give exactly eps.
template <class T>
Var<T> charbonnier(Var<T> x, Var<T> y, T eps);

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 300;
  std::size_t crop = 32;
  std::size_t frames = 5;
  double charbonnier_eps = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct OptState {
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of every trainable tensor in `w`. Missing
// gradients count as zero; their names are returned.
std::vector<std::string> adam_step(ModelWeights<float>& w, const std::map<std::string, Tensor<float>>& grads,
                                   OptState& state, const TrainConfig& cfg);

struct ClipPair {
  VideoClip distorted;
  VideoClip clean;
};

struct Sample {
  Tensor<float> window;  // 1 x C x T x S x S
  Tensor<float> target;  // 1 x C x S x S (clean centre frame)
  std::size_t start = 0, y0 = 0, x0 = 0;
};

// T consecutive frames and one spatial origin, shared by both clips.
Sample random_crop(const ClipPair& pair, std::size_t size, std::size_t T, std::mt19937_64& rng);

// Frame indices of the T-frame window centred at `center`, replicating edges.
std::vector<std::size_t> window_frame_indices(std::size_t clip_length, std::size_t T, std::size_t center);

struct Window {
  std::size_t center;
  Tensor<float> frames;  // 1 x C x T x H x W
};

Window make_window(const VideoClip& clip, std::size_t T, std::size_t center);

// Visits the window of every frame in order.
void sliding_window_iter(const VideoClip& clip, std::size_t T, const std::function<void(const Window&)>& visit);

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelWeights<float> weights;
  std::vector<double> losses;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

// Throws NumericalError (with the step and parameter norms) on a non-finite loss.
TrainResult train(const ModelConfig& mcfg, ModelWeights<float> weights, const std::vector<ClipPair>& data,
                  const TrainConfig& cfg, const StepCallback& on_step = {});

void write_loss_csv(const std::vector<double>& losses, std::ostream& os);

}  // namespace mamat
