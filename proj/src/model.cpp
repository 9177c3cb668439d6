#include "mamat/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mamat/mten.hpp"
#include "mamat/ops.hpp"
#include "mamat/ssm.hpp"

namespace mamat {
namespace {

constexpr std::size_t kOffsetChannels = 81;  // 3 axes x 27 taps of a 3x3x3 grid
constexpr std::size_t kSdatKernels[ModelConfig::sdat_depth] = {7, 5, 3, 3};

const std::string kRunningMean = ".running_mean";
const std::string kRunningVar = ".running_var";

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

class SpecBuilder {
 public:
  explicit SpecBuilder(std::size_t state_dim) : d_(state_dim) {}

  void add(std::string name, Shape shape, Init init) { specs_.push_back({std::move(name), std::move(shape), init}); }

  void norm(const std::string& p, std::size_t c) {
    add(p + ".gamma", {c}, Init::ones);
    add(p + ".beta", {c}, Init::zeros);
    add(p + kRunningMean, {c}, Init::zeros);
    add(p + kRunningVar, {c}, Init::ones);
  }

  void conv_bn(const std::string& p, std::size_t cout, std::size_t cin, nn::Triple k) {
    add(p + ".weight", {cout, cin, k[0], k[1], k[2]}, Init::he);
    norm(p + ".bn", cout);
  }

  void conv_bn(const std::string& p, std::size_t cout, std::size_t cin, std::size_t k) {
    conv_bn(p, cout, cin, {k, k, k});
  }

  void deform_bn(const std::string& p, std::size_t cout, std::size_t cin) {
    add(p + ".weight", {cout, cin, 3, 3, 3}, Init::he);
    add(p + ".offset.weight", {kOffsetChannels, cin, 3, 3, 3}, Init::zeros);
    add(p + ".offset.bias", {kOffsetChannels}, Init::zeros);
    norm(p + ".bn", cout);
  }

  void mamba(const std::string& p, std::size_t c) {
    conv_bn(p + ".res", c, c, 1);
    conv_bn(p + ".in", c, c, 1);
    conv_bn(p + ".out", c, c, 1);
    add(p + ".ssm.a_log", {c, d_}, Init::a_log);
    add(p + ".ssm.dt_weight", {c, c, 1, 1, 1}, Init::he);
    add(p + ".ssm.dt_bias", {c}, Init::dt_bias);
    add(p + ".ssm.b_weight", {d_, c, 1, 1, 1}, Init::he);
    add(p + ".ssm.c_weight", {d_, c, 1, 1, 1}, Init::he);
    add(p + ".ssm.d_skip", {c}, Init::ones);
  }

  void res_mamba(const std::string& p, std::size_t cin, std::size_t cout) {
    conv_bn(p + ".conv1", cout, cin, 3);
    conv_bn(p + ".conv2", cout, cout, 3);
    mamba(p + ".mamba", cout);
    if (cin != cout) add(p + ".skip.weight", {cout, cin, 1, 1, 1}, Init::he);
  }

  void double_conv(const std::string& p, std::size_t cin, std::size_t cout) {
    conv_bn(p + ".conv1", cout, cin, 3);
    conv_bn(p + ".conv2", cout, cout, 3);
  }

  void attn(const std::string& p, std::size_t c) {
    add(p + ".norm1.gamma", {c}, Init::ones);
    add(p + ".norm1.beta", {c}, Init::zeros);
    add(p + ".q.weight", {c, c}, Init::lecun);
    add(p + ".q.bias", {c}, Init::zeros);
    add(p + ".k.weight", {c, c}, Init::lecun);
    add(p + ".v.weight", {c, c}, Init::lecun);
    add(p + ".v.bias", {c}, Init::zeros);
    add(p + ".proj.weight", {c, c}, Init::zeros);
    add(p + ".proj.bias", {c}, Init::zeros);
    add(p + ".norm2.gamma", {c}, Init::ones);
    add(p + ".norm2.beta", {c}, Init::zeros);
    add(p + ".fc1.weight", {2 * c, c}, Init::lecun);
    add(p + ".fc1.bias", {2 * c}, Init::zeros);
    add(p + ".fc2.weight", {c, 2 * c}, Init::zeros);
    add(p + ".fc2.bias", {c}, Init::zeros);
  }

  std::vector<ParamSpec> finish() {
    std::sort(specs_.begin(), specs_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < specs_.size(); ++i) {
      if (specs_[i].name == specs_[i - 1].name) throw std::logic_error("duplicate parameter " + specs_[i].name);
    }
    return std::move(specs_);
  }

 private:
  std::size_t d_;
  std::vector<ParamSpec> specs_;
};

template <class T>
class Net {
 public:
  Net(const Bindings<T>& b, nn::Mode mode, nn::NormUpdates<T>* updates) : b_(b), mode_(mode), updates_(updates) {}

  nn::NormParams<T> norm(const std::string& p) const {
    nn::NormParams<T> n{b_.at(p + ".gamma"), b_.at(p + ".beta"), buffer(p + kRunningMean), buffer(p + kRunningVar)};
    n.key = p;
    return n;
  }

  nn::ConvBlockParams<T> conv_block(const std::string& p, nn::Triple stride = {1, 1, 1},
                                    std::optional<nn::Triple> padding = std::nullopt) const {
    return {{b_.at(p + ".weight"), std::nullopt, stride, padding}, norm(p + ".bn")};
  }

  Var<T> conv_bn(Var<T> x, const std::string& p, nn::Triple stride = {1, 1, 1},
                 std::optional<nn::Triple> padding = std::nullopt) const {
    return nn::conv_block(x, conv_block(p, stride, padding), mode_, updates_);
  }

  Var<T> norm_relu(Var<T> x, const std::string& p) const {
    auto r = nn::batchnorm3d(x, norm(p), mode_);
    if (updates_ && mode_ == nn::Mode::train) (*updates_)[p] = {std::move(r.running_mean), std::move(r.running_var)};
    return ops::relu(r.out);
  }

  nn::DeformConv3dParams<T> deform(const std::string& p) const {
    return {{b_.at(p + ".weight"), std::nullopt},
            {b_.at(p + ".offset.weight"), b_.at(p + ".offset.bias")}};
  }

  Var<T> deform_bn(Var<T> x, const std::string& p) const { return norm_relu(nn::deform_conv3d(x, deform(p)), p + ".bn"); }

  Var<T> up_bn(Var<T> x, const std::string& p) const {
    return norm_relu(nn::upconv3d(x, deform(p), {1, 2, 2}), p + ".bn");
  }

  Var<T> double_conv(Var<T> x, const std::string& p) const {
    return conv_bn(conv_bn(x, p + ".conv1"), p + ".conv2");
  }

  Var<T> res_mamba(Var<T> x, const std::string& p) const {
    ssm::ResMambaParams<T> r{conv_block(p + ".conv1"), conv_block(p + ".conv2"), mamba(p + ".mamba"), std::nullopt};
    if (b_.vars.count(p + ".skip.weight")) r.skip_weight = b_.at(p + ".skip.weight");
    return ssm::res_mamba_block(x, r, mode_, updates_);
  }

  nn::AttnBlockParams<T> attn(const std::string& p, std::size_t heads, std::size_t window) const {
    nn::AttnBlockParams<T> a;
    a.norm1_gamma = b_.at(p + ".norm1.gamma");
    a.norm1_beta = b_.at(p + ".norm1.beta");
    a.q_weight = b_.at(p + ".q.weight");
    a.q_bias = b_.at(p + ".q.bias");
    a.k_weight = b_.at(p + ".k.weight");
    a.v_weight = b_.at(p + ".v.weight");
    a.v_bias = b_.at(p + ".v.bias");
    a.proj_weight = b_.at(p + ".proj.weight");
    a.proj_bias = b_.at(p + ".proj.bias");
    a.norm2_gamma = b_.at(p + ".norm2.gamma");
    a.norm2_beta = b_.at(p + ".norm2.beta");
    a.fc1_weight = b_.at(p + ".fc1.weight");
    a.fc1_bias = b_.at(p + ".fc1.bias");
    a.fc2_weight = b_.at(p + ".fc2.weight");
    a.fc2_bias = b_.at(p + ".fc2.bias");
    a.heads = heads;
    a.window = window;
    return a;
  }

  Var<T> at(const std::string& name) const { return b_.at(name); }

 private:
  const Tensor<T>& buffer(const std::string& name) const {
    if (!b_.buffers) throw std::invalid_argument("model bindings carry no running statistics");
    const auto it = b_.buffers->find(name);
    if (it == b_.buffers->end()) throw std::invalid_argument("missing running statistic " + name);
    return it->second;
  }

  ssm::MambaBlockParams<T> mamba(const std::string& p) const {
    return {conv_block(p + ".res"),
            conv_block(p + ".in"),
            conv_block(p + ".out"),
            {b_.at(p + ".ssm.a_log"), b_.at(p + ".ssm.dt_weight"), b_.at(p + ".ssm.dt_bias"),
             b_.at(p + ".ssm.b_weight"), b_.at(p + ".ssm.c_weight"), b_.at(p + ".ssm.d_skip")}};
  }

  const Bindings<T>& b_;
  nn::Mode mode_;
  nn::NormUpdates<T>* updates_;
};

void check_input(const Shape& s, const ModelConfig& cfg) {
  if (s.size() != 5 || s[1] != cfg.channels || s[2] != cfg.frames) {
    throw ShapeError("model input must be N x " + std::to_string(cfg.channels) + " x " + std::to_string(cfg.frames) +
                     " x H x W, got " + shape_str(s));
  }
  if (s[3] % 8 != 0 || s[4] % 8 != 0 || s[3] == 0 || s[4] == 0) {
    throw ShapeError("model input height and width must be positive multiples of 8, got " + shape_str(s));
  }
}

std::size_t level_width(const ModelConfig& cfg, std::size_t level) { return cfg.width << level; }

}  // namespace

void ModelConfig::validate() const {
  if (channels != 1 && channels != 3) throw std::invalid_argument("channels must be 1 or 3");
  if (frames % 2 == 0) throw std::invalid_argument("frames must be odd");
  if (width < 2) throw std::invalid_argument("width must be at least 2");
  if (state_dim < 1) throw std::invalid_argument("state_dim must be at least 1");
  if (heads < 1 || width % heads != 0) throw std::invalid_argument("heads must divide width");
  if (window < 1) throw std::invalid_argument("window must be positive");
}

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::json j{{"channels", cfg.channels}, {"frames", cfg.frames}, {"width", cfg.width},
                   {"state_dim", cfg.state_dim}, {"heads", cfg.heads},   {"window", cfg.window},
                   {"seed", cfg.seed}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig cfg;
  try {
    const auto j = nlohmann::json::parse(text);
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.frames = j.at("frames").get<std::size_t>();
    cfg.width = j.at("width").get<std::size_t>();
    cfg.state_dim = j.at("state_dim").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.window = j.at("window").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::invalid, std::string("model configuration: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

bool is_buffer(const std::string& name) { return ends_with(name, kRunningMean) || ends_with(name, kRunningVar); }

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  SpecBuilder s(cfg.state_dim);
  const std::size_t C = cfg.channels, W = cfg.width;

  for (std::size_t i = 0; i < ModelConfig::sdat_depth; ++i) {
    const auto p = "sdat.enc" + std::to_string(i + 1);
    const std::size_t cin = i == 0 ? C : level_width(cfg, i - 1);
    s.conv_bn(p + ".conv", level_width(cfg, i), cin, kSdatKernels[i]);
    s.deform_bn(p + ".deform", level_width(cfg, i), level_width(cfg, i));
    if (i + 1 < ModelConfig::sdat_depth) {
      s.conv_bn("sdat.down" + std::to_string(i + 1), level_width(cfg, i), level_width(cfg, i), 3);
    }
  }
  for (std::size_t i = ModelConfig::sdat_depth - 1; i-- > 0;) {
    const auto p = "sdat.dec" + std::to_string(i + 1);
    s.deform_bn(p + ".up", level_width(cfg, i), level_width(cfg, i + 1));
    s.conv_bn(p + ".fuse", level_width(cfg, i), 2 * level_width(cfg, i), 3);
  }
  s.add("sdat.out.weight", {C, W, 3, 3, 3}, Init::he);
  s.add("sdat.out.bias", {C}, Init::zeros);

  s.conv_bn("edp.entry", W, C, 3);
  for (std::size_t i = 0; i < ModelConfig::edp_depth; ++i) {
    const std::size_t cin = i == 0 ? W : level_width(cfg, i - 1);
    s.res_mamba("edp.enc" + std::to_string(i + 1), cin, level_width(cfg, i));
    if (i + 1 < ModelConfig::edp_depth) {
      s.conv_bn("edp.down" + std::to_string(i + 1), level_width(cfg, i), level_width(cfg, i), 3);
    }
  }
  const std::size_t top = ModelConfig::edp_depth - 1;
  s.double_conv("edp.dec" + std::to_string(top + 1), level_width(cfg, top), level_width(cfg, top));
  for (std::size_t i = top; i-- > 0;) {
    const auto p = "edp.dec" + std::to_string(i + 1);
    s.deform_bn(p + ".up", level_width(cfg, i), level_width(cfg, i + 1));
    s.double_conv(p, 2 * level_width(cfg, i), level_width(cfg, i));
  }
  s.conv_bn("edp.exit", W, W, nn::Triple{cfg.frames, 1, 1});
  s.attn("edp.attn1", W);
  s.attn("edp.attn2", W);
  s.add("edp.head.weight", {C, W, 1, 1, 1}, Init::he);
  s.add("edp.head.bias", {C}, Init::zeros);
  return s.finish();
}

ModelWeights<float> init_model(const ModelConfig& cfg) {
  ModelWeights<float> w;
  std::mt19937_64 rng(cfg.seed);
  for (const auto& spec : param_specs(cfg)) {
    Tensor<float> t(spec.shape, 0.0f);
    const std::size_t fan_in = t.size() / spec.shape[0];
    switch (spec.init) {
      case Init::he:
      case Init::lecun: {
        const double gain = spec.init == Init::he ? 2.0 : 1.0;
        std::normal_distribution<double> dist(0.0, std::sqrt(gain / double(fan_in)));
        for (auto& v : t.data()) v = float(dist(rng));
        break;
      }
      case Init::zeros:
        break;
      case Init::ones:
        for (auto& v : t.data()) v = 1.0f;
        break;
      case Init::a_log: {
        const std::size_t d = spec.shape[1];
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(std::log(double(i % d + 1)));
        break;
      }
      case Init::dt_bias: {
        std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
        for (auto& v : t.data()) {
          const double dt = std::exp(u(rng));
          v = float(dt + std::log(-std::expm1(-dt)));  // inverse softplus
        }
        break;
      }
    }
    w.emplace(spec.name, std::move(t));
  }
  return w;
}

std::size_t parameter_count(const ModelWeights<float>& w) {
  std::size_t n = 0;
  for (const auto& [name, t] : w) {
    if (!is_buffer(name)) n += t.size();
  }
  return n;
}

template <class T>
Var<T> Bindings<T>::at(const std::string& name) const {
  const auto it = vars.find(name);
  if (it == vars.end()) throw std::invalid_argument("model bindings lack tensor " + name);
  return it->second;
}

template <class T>
Bindings<T> bind_weights(Tape<T>& tape, const ModelWeights<T>& w) {
  Bindings<T> b;
  b.buffers = &w;
  for (const auto& [name, t] : w) {
    if (!is_buffer(name)) b.vars.emplace(name, tape.param(name, t));
  }
  return b;
}

template <class T>
Var<T> sdat_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                    nn::NormUpdates<T>* updates) {
  check_input(x.shape(), cfg);
  const Net<T> net(b, mode, updates);
  std::vector<Var<T>> skips;
  Var<T> h = x;
  for (std::size_t i = 0; i < ModelConfig::sdat_depth; ++i) {
    const auto p = "sdat.enc" + std::to_string(i + 1);
    h = net.deform_bn(net.conv_bn(h, p + ".conv"), p + ".deform");
    if (i + 1 < ModelConfig::sdat_depth) {
      skips.push_back(h);
      h = net.conv_bn(h, "sdat.down" + std::to_string(i + 1), {1, 2, 2});
    }
  }
  for (std::size_t i = ModelConfig::sdat_depth - 1; i-- > 0;) {
    const auto p = "sdat.dec" + std::to_string(i + 1);
    h = net.up_bn(h, p + ".up");
    h = net.conv_bn(ops::concat_channels(h, skips[i]), p + ".fuse");
  }
  auto out = nn::conv3d(h, nn::Conv3dParams<T>{net.at("sdat.out.weight"), net.at("sdat.out.bias")});
  return ops::add(x, out);
}

template <class T>
Var<T> edp_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                   nn::NormUpdates<T>* updates) {
  check_input(x.shape(), cfg);
  const Net<T> net(b, mode, updates);
  const auto d = dims5(x.value());
  Var<T> h = net.conv_bn(x, "edp.entry");
  std::vector<Var<T>> skips;
  for (std::size_t i = 0; i < ModelConfig::edp_depth; ++i) {
    h = net.res_mamba(h, "edp.enc" + std::to_string(i + 1));
    if (i + 1 < ModelConfig::edp_depth) {
      skips.push_back(h);
      h = net.conv_bn(h, "edp.down" + std::to_string(i + 1), {1, 2, 2});
    }
  }
  const std::size_t top = ModelConfig::edp_depth - 1;
  h = net.double_conv(h, "edp.dec" + std::to_string(top + 1));
  for (std::size_t i = top; i-- > 0;) {
    const auto p = "edp.dec" + std::to_string(i + 1);
    h = net.up_bn(h, p + ".up");
    h = net.double_conv(ops::concat_channels(h, skips[i]), p);
  }
  h = net.conv_bn(h, "edp.exit", {1, 1, 1}, nn::Triple{0, 0, 0});
  h = ops::reshape(h, {d.n, cfg.width, d.h, d.w});
  const std::size_t window = std::min({cfg.window, d.h, d.w});
  h = nn::attn_block(h, net.attn("edp.attn1", cfg.heads, window));
  h = nn::attn_block(h, net.attn("edp.attn2", cfg.heads, window));
  h = nn::conv3d(ops::reshape(h, {d.n, cfg.width, 1, d.h, d.w}),
                 nn::Conv3dParams<T>{net.at("edp.head.weight"), net.at("edp.head.bias")});
  return ops::add(ops::select_time(x, d.t / 2), ops::reshape(h, {d.n, d.c, d.h, d.w}));
}

template <class T>
Var<T> mamat_forward(Var<T> x, const ModelConfig& cfg, const Bindings<T>& b, nn::Mode mode,
                     nn::NormUpdates<T>* updates) {
  auto y = edp_forward(sdat_forward(x, cfg, b, mode, updates), cfg, b, mode, updates);
  return mode == nn::Mode::infer ? ops::clamp(y, T(0), T(1)) : y;
}

template <class T>
void apply_norm_updates(ModelWeights<T>& w, const nn::NormUpdates<T>& updates) {
  for (const auto& [key, stats] : updates) {
    w.at(key + kRunningMean) = stats.first;
    w.at(key + kRunningVar) = stats.second;
  }
}

Tensor<float> restore_window(const Tensor<float>& window, const ModelConfig& cfg, const ModelWeights<float>& w) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  const auto b = bind_weights(tape, w);
  return mamat_forward(tape.constant(window), cfg, b, nn::Mode::infer).value();
}

void validate_weights(const ModelWeights<float>& w, const ModelConfig& cfg) {
  const auto specs = param_specs(cfg);
  for (const auto& spec : specs) {
    const auto it = w.find(spec.name);
    if (it == w.end()) throw ShapeError("weights lack tensor " + spec.name);
    if (it->second.shape() != spec.shape) {
      throw ShapeError("tensor " + spec.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(spec.shape));
    }
  }
  if (w.size() != specs.size()) {
    for (const auto& [name, t] : w) {
      const bool known =
          std::any_of(specs.begin(), specs.end(), [&](const ParamSpec& s) { return s.name == name; });
      if (!known) throw ShapeError("unexpected tensor " + name);
    }
  }
}

void save_weights(const ModelWeights<float>& w, const ModelConfig& cfg, std::ostream& sink) {
  const std::string cfg_json = config_to_json(cfg);
  const Shape cfg_shape{cfg_json.size()};
  const Tensor<std::uint8_t> cfg_tensor(cfg_shape, std::vector<std::uint8_t>(cfg_json.begin(), cfg_json.end()));

  std::map<std::string, const Tensor<float>*> entries;
  for (const auto& [name, t] : w) entries.emplace(name, &t);
  if (entries.count(kConfigEntry)) throw std::invalid_argument("weight name collides with the configuration entry");

  sink.write("MWTS", 4);
  le::write_u8(sink, 1);
  le::write_u32(sink, static_cast<std::uint32_t>(entries.size() + 1));
  bool config_written = false;
  auto write_name = [&](const std::string& name) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("weight name too long: " + name);
    le::write_u16(sink, static_cast<std::uint16_t>(name.size()));
    sink.write(name.data(), static_cast<std::streamsize>(name.size()));
  };
  for (const auto& [name, t] : entries) {
    if (!config_written && std::string(kConfigEntry) < name) {
      write_name(kConfigEntry);
      mten_write(cfg_tensor, sink);
      config_written = true;
    }
    write_name(name);
    mten_write(*t, sink);
  }
  if (!config_written) {
    write_name(kConfigEntry);
    mten_write(cfg_tensor, sink);
  }
  if (!sink) throw std::runtime_error("failed writing weights");
}

LoadedModel load_weights(std::istream& source) {
  char magic[4];
  le::read_exact(source, magic, 4);
  if (std::string(magic, 4) != "MWTS") throw FormatError(FormatError::Kind::bad_magic, "not an MWTS container");
  const auto version = le::read_u8(source);
  if (version != 1) {
    throw FormatError(FormatError::Kind::unsupported_version, "unsupported MWTS version " + std::to_string(version));
  }
  const auto count = le::read_u32(source);
  LoadedModel m;
  bool have_config = false;
  std::string previous;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = le::read_u16(source);
    std::string name(len, '\0');
    le::read_exact(source, name.data(), len);
    if (i > 0 && !(previous < name)) {
      throw FormatError(FormatError::Kind::invalid, "MWTS entries not in strictly increasing order at " + name);
    }
    previous = name;
    if (name == kConfigEntry) {
      const auto bytes = mten_read<std::uint8_t>(source);
      m.config = config_from_json(std::string(bytes.data().begin(), bytes.data().end()));
      have_config = true;
    } else {
      m.weights.emplace(name, mten_read<float>(source));
    }
  }
  if (!have_config) throw FormatError(FormatError::Kind::invalid, "MWTS container lacks the model configuration");
  validate_weights(m.weights, m.config);
  return m;
}

ModelWeights<float> load_weights(std::istream& source, const ModelConfig& cfg) {
  auto m = load_weights(source);
  validate_weights(m.weights, cfg);
  return std::move(m.weights);
}

#define MAMAT_INSTANTIATE(T)                                                                                 \
  template struct Bindings<T>;                                                                               \
  template Bindings<T> bind_weights(Tape<T>&, const ModelWeights<T>&);                                               \
  template Var<T> sdat_forward(Var<T>, const ModelConfig&, const Bindings<T>&, nn::Mode, nn::NormUpdates<T>*); \
  template Var<T> edp_forward(Var<T>, const ModelConfig&, const Bindings<T>&, nn::Mode, nn::NormUpdates<T>*);  \
  template Var<T> mamat_forward(Var<T>, const ModelConfig&, const Bindings<T>&, nn::Mode, nn::NormUpdates<T>*); \
  template void apply_norm_updates(ModelWeights<T>&, const nn::NormUpdates<T>&);

MAMAT_INSTANTIATE(float)
MAMAT_INSTANTIATE(double)
MAMAT_INSTANTIATE(long double)

}  // namespace mamat
