#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mamat/nn.hpp"

namespace mamat {

struct ModelConfig {
  std::size_t channels = 1;
  std::size_t frames = 5;
  std::size_t width = 8;
  std::size_t state_dim = 8;
  std::size_t heads = 2;
  std::size_t window = 8;
  std::uint64_t seed = 0;

  static constexpr std::size_t sdat_depth = 4;
  static constexpr std::size_t edp_depth = 3;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

// Parameters and batch-norm running statistics, keyed by name. Running
// statistics end in ".running_mean" / ".running_var" and are not trained.
template <class T>
using ModelWeights = std::map<std::string, Tensor<T>>;

bool is_buffer(const std::string& name);

enum class Init { he, lecun, zeros, ones, a_log, dt_bias };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

// Every tensor of the network in lexicographic name order.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);

ModelWeights<float> init_model(const ModelConfig& cfg);

// Number of trainable scalars (buffers excluded).
std::size_t parameter_count(const ModelWeights<float>& w);

// Trainable tensors as tape nodes plus the running statistics they use.
template <class T>
struct Bindings {
  std::map<std::string, Var<T>> vars;
  const ModelWeights<T>* buffers = nullptr;

  Var<T> at(const std::string& name) const;
};

// Registers every non-buffer tensor of `w` as a named parameter of `tape`.
template <class T>
Bindings<T> bind_weights(Tape<T>& tape, const ModelWeights<T>& w);

// x: N x C x T x H x W with H, W divisible by 8. Returns the registered clip.
template <class T>
Var<T> sdat_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                    nn::NormUpdates<T>* updates = nullptr);

// x: N x C x T x H x W -> restored centre frame N x C x H x W.
template <class T>
Var<T> edp_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                   nn::NormUpdates<T>* updates = nullptr);

// edp(sdat(x)); infer mode clamps to [0, 1].
template <class T>
Var<T> mamat_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                     nn::NormUpdates<T>* updates = nullptr);

// Writes the running statistics collected during a train-mode pass.
template <class T>
void apply_norm_updates(ModelWeights<T>& w, const nn::NormUpdates<T>& updates);

// Inference on a window without recording gradients.
Tensor<float> restore_window(const Tensor<float>& window, const ModelConfig& cfg, const ModelWeights<float>& w);

// Throws ShapeError naming the first missing, unexpected or mis-shaped tensor.
void validate_weights(const ModelWeights<float>& w, const ModelConfig& cfg);

// MWTS container: "MWTS" | version u8 = 1 | u32 count | count x (u16 name
// length | name | MTEN blob), sorted by name. The configuration travels as the
// u8 entry "__config__" holding JSON.
inline constexpr const char* kConfigEntry = "__config__";

void save_weights(const ModelWeights<float>& w, const ModelConfig& cfg, std::ostream& sink);

struct LoadedModel {
  ModelConfig config;
  ModelWeights<float> weights;
};

LoadedModel load_weights(std::istream& source);
// Validates every stored tensor against `cfg`.
ModelWeights<float> load_weights(std::istream& source, const ModelConfig& cfg);

}  // namespace mamat
