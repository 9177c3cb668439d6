#include "mamat/training.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mamat/ops.hpp"

namespace mamat {

template <class T>
Var<T> charbonnier(Var<T> x, Var<T> y, T eps) {
  if (x.shape() != y.shape()) {
    throw ShapeError("charbonnier: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " differ");
  }
  if (!(eps > T(0))) throw DomainError("charbonnier: eps must be positive");
  const auto& xv = x.value();
  const auto& yv = y.value();
  const std::size_t n = xv.size();
  double excess = 0;
  for (std::size_t i = 0; i < n; ++i) excess += std::hypot(double(xv[i]) - double(yv[i]), double(eps)) - double(eps);
  const auto value = Tensor<T>::scalar(T(double(eps) + excess / double(n)));
  const auto ix = x.id(), iy = y.id();
  return x.tape().record("charbonnier", {ix, iy}, value, [ix, iy, eps, n](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(ix);
    const auto& yv = t.value(iy);
    Tensor<T> gx = Tensor<T>::zeros_like(xv);
    const double scale = double(g[0]) / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = double(xv[i]) - double(yv[i]);
      gx[i] = T(scale * r / std::hypot(r, double(eps)));
    }
    if (t.requires_grad(iy)) {
      Tensor<T> gy = gx;
      for (auto& v : gy.data()) v = -v;
      t.accumulate(iy, std::move(gy));
    }
    t.accumulate(ix, std::move(gx));
  });
}

template Var<float> charbonnier(Var<float>, Var<float>, float);
template Var<double> charbonnier(Var<double>, Var<double>, double);

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw std::invalid_argument("Adam eps must be positive");
  if (crop == 0 || crop % 8 != 0) throw std::invalid_argument("crop must be a positive multiple of 8");
  if (frames % 2 == 0) throw std::invalid_argument("window frames must be odd");
  if (!(charbonnier_eps > 0)) throw std::invalid_argument("charbonnier eps must be positive");
}

std::vector<std::string> adam_step(ModelWeights<float>& w, const std::map<std::string, Tensor<float>>& grads,
                                   OptState& state, const TrainConfig& cfg) {
  std::vector<std::string> missing;
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (auto& [name, param] : w) {
    if (is_buffer(name)) continue;
    auto& m = state.m.try_emplace(name, Tensor<float>::zeros_like(param)).first->second;
    auto& v = state.v.try_emplace(name, Tensor<float>::zeros_like(param)).first->second;
    if (m.shape() != param.shape() || v.shape() != param.shape()) {
      throw ShapeError("optimizer moments for " + name + " do not match the parameter shape");
    }
    const auto it = grads.find(name);
    if (it == grads.end()) missing.push_back(name);
    const Tensor<float>* g = it == grads.end() ? nullptr : &it->second;
    if (g && g->shape() != param.shape()) throw ShapeError("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double gi = g ? double((*g)[i]) : 0.0;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = float(mi);
      v[i] = float(vi);
      param[i] = float(param[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps));
    }
  }
  return missing;
}

Sample random_crop(const ClipPair& pair, std::size_t size, std::size_t T, std::mt19937_64& rng) {
  const auto& d = pair.distorted;
  const auto& c = pair.clean;
  if (d.data.shape() != c.data.shape()) throw ShapeError("distorted and clean clips differ in geometry");
  if (d.frames() < T) throw ShapeError("clip has fewer frames than the window");
  if (d.height() < size || d.width() < size) throw ShapeError("frames are smaller than the crop");
  auto pick = [&](std::size_t hi) { return std::uniform_int_distribution<std::size_t>(0, hi)(rng); };
  Sample s;
  s.start = pick(d.frames() - T);
  s.y0 = pick(d.height() - size);
  s.x0 = pick(d.width() - size);
  const std::size_t C = d.channels();
  s.window = Tensor<float>({1, C, T, size, size}, 0.0f);
  s.target = Tensor<float>({1, C, size, size}, 0.0f);
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        for (std::size_t t = 0; t < T; ++t) s.window.at(0, ch, t, y, x) = d.at(s.start + t, ch, s.y0 + y, s.x0 + x);
        s.target[(ch * size + y) * size + x] = c.at(s.start + T / 2, ch, s.y0 + y, s.x0 + x);
      }
  return s;
}

std::vector<std::size_t> window_frame_indices(std::size_t clip_length, std::size_t T, std::size_t center) {
  if (clip_length == 0) throw std::invalid_argument("empty clip");
  if (center >= clip_length) throw std::out_of_range("window centre beyond the clip");
  std::vector<std::size_t> idx(T);
  for (std::size_t k = 0; k < T; ++k) {
    const auto i = static_cast<std::ptrdiff_t>(center + k) - static_cast<std::ptrdiff_t>(T / 2);
    idx[k] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, std::ptrdiff_t(clip_length) - 1));
  }
  return idx;
}

Window make_window(const VideoClip& clip, std::size_t T, std::size_t center) {
  const auto idx = window_frame_indices(clip.frames(), T, center);
  const std::size_t C = clip.channels(), H = clip.height(), W = clip.width();
  Window w{center, Tensor<float>({1, C, T, H, W}, 0.0f)};
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t t = 0; t < T; ++t) {
      const float* src = clip.data.ptr() + (idx[t] * C + ch) * H * W;
      std::copy(src, src + H * W, w.frames.ptr() + (ch * T + t) * H * W);
    }
  return w;
}

void sliding_window_iter(const VideoClip& clip, std::size_t T, const std::function<void(const Window&)>& visit) {
  for (std::size_t i = 0; i < clip.frames(); ++i) visit(make_window(clip, T, i));
}

namespace {

std::string norm_report(const ModelWeights<float>& w) {
  std::ostringstream os;
  os << std::setprecision(6);
  for (const auto& [name, t] : w) {
    double s = 0;
    for (auto v : t.data()) s += double(v) * double(v);
    os << "  " << name << " " << std::sqrt(s) << '\n';
  }
  return os.str();
}

}  // namespace

TrainResult train(const ModelConfig& mcfg, ModelWeights<float> weights, const std::vector<ClipPair>& data,
                  const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  mcfg.validate();
  if (data.empty()) throw std::invalid_argument("training needs at least one clip pair");
  if (cfg.frames != mcfg.frames) throw std::invalid_argument("training window and model frames differ");
  validate_weights(weights, mcfg);
  std::mt19937_64 rng(cfg.seed);
  OptState opt;
  TrainResult result;
  result.losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto& pair = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
    const auto sample = random_crop(pair, cfg.crop, cfg.frames, rng);
    Tape<float> tape;
    const auto b = bind_weights(tape, weights);
    nn::NormUpdates<float> updates;
    auto out = mamat_forward(tape.constant(sample.window), mcfg, b, nn::Mode::train, &updates);
    auto loss = charbonnier(out, tape.constant(sample.target), float(cfg.charbonnier_eps));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step) + "; parameter norms:\n" +
                           norm_report(weights));
    }
    const auto grads = tape.backward(loss);
    adam_step(weights, grads, opt, cfg);
    apply_norm_updates(weights, updates);
    result.losses.push_back(lv);
    if (on_step) on_step(step, lv);
  }
  result.weights = std::move(weights);
  return result;
}

void write_loss_csv(const std::vector<double>& losses, std::ostream& os) {
  os << "step,loss\n" << std::setprecision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
}

}  // namespace mamat
