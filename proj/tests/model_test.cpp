#include <gtest/gtest.h>

#include <sstream>

#include "mamat/model.hpp"
#include "mamat/mten.hpp"
#include "mamat/ops.hpp"
#include "test_util.hpp"

namespace mamat {
namespace {

using mamat::testing::max_abs_diff;
using mamat::testing::random_tensor;

// Independent walk over the layer list.
std::size_t expected_parameter_count(std::size_t C, std::size_t W, std::size_t T, std::size_t d) {
  auto conv_bn = [](std::size_t cout, std::size_t cin, std::size_t taps) { return cout * cin * taps + 2 * cout; };
  auto deform_bn = [&](std::size_t cout, std::size_t cin) { return conv_bn(cout, cin, 27) + 81 * cin * 27 + 81; };
  auto mamba = [&](std::size_t c) { return 3 * conv_bn(c, c, 1) + c * d + c * c + c + 2 * d * c + c; };
  auto rmb = [&](std::size_t cin, std::size_t cout) {
    return conv_bn(cout, cin, 27) + conv_bn(cout, cout, 27) + mamba(cout) + (cin != cout ? cout * cin : 0);
  };
  auto attn = [](std::size_t c) { return 2 * c + (c * c + c) + c * c + (c * c + c) + (c * c + c) + 2 * c + (2 * c * c + 2 * c) + (2 * c * c + c); };

  std::size_t n = 0;
  const std::size_t w[4] = {W, 2 * W, 4 * W, 8 * W};
  const std::size_t k[4] = {343, 125, 27, 27};
  for (int i = 0; i < 4; ++i) n += conv_bn(w[i], i == 0 ? C : w[i - 1], k[i]) + deform_bn(w[i], w[i]);
  for (int i = 0; i < 3; ++i) n += conv_bn(w[i], w[i], 27);
  for (int i = 0; i < 3; ++i) n += deform_bn(w[i], w[i + 1]) + conv_bn(w[i], 2 * w[i], 27);
  n += C * W * 27 + C;

  n += conv_bn(W, C, 27);
  n += rmb(W, W) + rmb(W, 2 * W) + rmb(2 * W, 4 * W);
  n += conv_bn(W, W, 27) + conv_bn(2 * W, 2 * W, 27);
  n += conv_bn(4 * W, 4 * W, 27) * 2;
  n += deform_bn(2 * W, 4 * W) + conv_bn(2 * W, 4 * W, 27) + conv_bn(2 * W, 2 * W, 27);
  n += deform_bn(W, 2 * W) + conv_bn(W, 2 * W, 27) + conv_bn(W, W, 27);
  n += conv_bn(W, W, T);
  n += 2 * attn(W);
  n += C * W + C;
  return n;
}

TEST(ModelConfig, Validation) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.frames = 4;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.channels = 2;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.width = 6;
  bad.heads = 4;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_EQ(config_from_json(config_to_json(cfg)), cfg);
}

TEST(InitModel, ParameterCountMatchesClosedForm) {
  for (auto [C, W, T, d] : {std::array<std::size_t, 4>{1, 8, 5, 8}, {3, 8, 5, 8}, {1, 2, 3, 2}, {3, 4, 7, 3}}) {
    ModelConfig cfg;
    cfg.channels = C;
    cfg.width = W;
    cfg.frames = T;
    cfg.state_dim = d;
    EXPECT_EQ(parameter_count(init_model(cfg)), expected_parameter_count(C, W, T, d)) << C << " " << W;
  }
  EXPECT_EQ(parameter_count(init_model(ModelConfig{})), 1202851u);
}

TEST(InitModel, DeterministicAndStatedZeros) {
  ModelConfig cfg;
  cfg.seed = 42;
  const auto a = init_model(cfg);
  const auto b = init_model(cfg);
  EXPECT_EQ(a, b);
  cfg.seed = 43;
  EXPECT_NE(init_model(cfg).at("sdat.enc1.conv.weight"), a.at("sdat.enc1.conv.weight"));

  std::size_t offset_tensors = 0;
  for (const auto& [name, t] : a) {
    const bool zero_init = name.find(".offset.") != std::string::npos || name.find(".proj.") != std::string::npos ||
                           name.find(".fc2.") != std::string::npos || name.ends_with(".bias") ||
                           name.ends_with(".beta") || name.ends_with(".running_mean");
    if (name.find(".offset.") != std::string::npos) ++offset_tensors;
    if (zero_init && name.find("dt_bias") == std::string::npos) {
      for (auto v : t.data()) ASSERT_EQ(v, 0.0f) << name;
    }
  }
  EXPECT_EQ(offset_tensors, 2u * (4 + 3 + 2));

  const auto& a_log = a.at("edp.enc1.mamba.ssm.a_log");
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_FLOAT_EQ(-std::exp(a_log[c * 8 + k]), -float(k + 1));
  for (auto v : a.at("edp.enc1.mamba.ssm.dt_bias").data()) {
    const double dt = std::log1p(std::exp(double(v)));
    EXPECT_GE(dt, 1e-3 * 0.999);
    EXPECT_LE(dt, 0.1 * 1.001);
  }
  for (auto v : a.at("edp.enc2.mamba.ssm.d_skip").data()) EXPECT_EQ(v, 1.0f);
}

TEST(InitModel, NamesAreLexicographic) {
  const auto specs = param_specs(ModelConfig{});
  for (std::size_t i = 1; i < specs.size(); ++i) EXPECT_LT(specs[i - 1].name, specs[i].name);
  EXPECT_TRUE(is_buffer("sdat.enc1.conv.bn.running_var"));
  EXPECT_FALSE(is_buffer("sdat.enc1.conv.bn.gamma"));
}

struct Run {
  Tensor<float> sdat, edp, full;
};

Run run_model(const ModelConfig& cfg, const ModelWeights<float>& w, const Tensor<float>& x, nn::Mode mode) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  const auto b = bind_weights(tape, w);
  auto xv = tape.constant(x);
  return {sdat_forward(xv, cfg, b, mode).value(), edp_forward(xv, cfg, b, mode).value(),
          mamat_forward(xv, cfg, b, mode).value()};
}

Tensor<float> centre_frame(const Tensor<float>& x) {
  const auto d = dims5(x);
  Tensor<float> c({d.n, d.c, d.h, d.w}, 0.0f);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t ch = 0; ch < d.c; ++ch)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) c[((n * d.c + ch) * d.h + y) * d.w + xx] = x.at(n, ch, d.t / 2, y, xx);
  return c;
}

TEST(Model, ShapesForColourClip) {
  ModelConfig cfg;
  cfg.channels = 3;
  const auto w = init_model(cfg);
  std::mt19937_64 rng(1);
  const auto x = random_tensor<float>({1, 3, 5, 32, 32}, rng, 0, 1);
  const auto r = run_model(cfg, w, x, nn::Mode::infer);
  EXPECT_EQ(r.sdat.shape(), (Shape{1, 3, 5, 32, 32}));
  EXPECT_EQ(r.edp.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(r.full.shape(), (Shape{1, 3, 32, 32}));
  for (auto v : r.full.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  Tape<float> tape;
  const auto b = bind_weights(tape, w);
  EXPECT_THROW(mamat_forward(tape.constant(Tensor<float>({1, 3, 5, 12, 16}, 0.f)), cfg, b, nn::Mode::infer),
               ShapeError);
  EXPECT_THROW(mamat_forward(tape.constant(Tensor<float>({1, 1, 5, 16, 16}, 0.f)), cfg, b, nn::Mode::infer),
               ShapeError);
}

TEST(Model, ResidualIdentities) {
  ModelConfig cfg;
  cfg.width = 4;
  auto w = init_model(cfg);
  for (const auto* name : {"sdat.out.weight", "sdat.out.bias", "edp.head.weight", "edp.head.bias"}) {
    w.at(name) = Tensor<float>::zeros(w.at(name).shape());
  }
  std::mt19937_64 rng(2);
  const auto x = random_tensor<float>({2, 1, 5, 16, 16}, rng, 0, 1);
  for (auto mode : {nn::Mode::train, nn::Mode::infer}) {
    const auto r = run_model(cfg, w, x, mode);
    EXPECT_EQ(r.sdat, x);
    EXPECT_EQ(r.edp, centre_frame(x));
    EXPECT_EQ(r.full, centre_frame(x));
  }
}

TEST(Model, DeterministicForward) {
  ModelConfig cfg;
  cfg.seed = 5;
  const auto w = init_model(cfg);
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({1, 1, 5, 16, 16}, rng, 0, 1);
  EXPECT_EQ(run_model(cfg, w, x, nn::Mode::train).full, run_model(cfg, w, x, nn::Mode::train).full);
  EXPECT_EQ(restore_window(x, cfg, w), run_model(cfg, w, x, nn::Mode::infer).full);
}

// Regression pin: deviation of the fresh network from the centre-frame
// pass-through on a fixed seed and input.
TEST(Model, InitialDeviationPinned) {
  ModelConfig cfg;
  cfg.seed = 7;
  const auto w = init_model(cfg);
  std::mt19937_64 rng(4);
  const auto x = random_tensor<float>({1, 1, 5, 32, 32}, rng, 0, 1);
  const auto y = restore_window(x, cfg, w);
  const double dev = max_abs_diff(y, centre_frame(x));
  EXPECT_NEAR(dev, 0.998476, 1e-4) << dev;
}

TEST(Model, TrainModeCollectsEveryRunningStatistic) {
  ModelConfig cfg;
  cfg.width = 4;
  auto w = init_model(cfg);
  std::mt19937_64 rng(5);
  Tape<float> tape;
  const auto b = bind_weights(tape, w);
  nn::NormUpdates<float> updates;
  mamat_forward(tape.constant(random_tensor<float>({1, 1, 5, 16, 16}, rng, 0, 1)), cfg, b, nn::Mode::train,
                &updates);
  std::size_t buffers = 0;
  for (const auto& [name, t] : w) buffers += is_buffer(name);
  EXPECT_EQ(2 * updates.size(), buffers);
  const auto before = w.at("edp.entry.bn.running_var");
  apply_norm_updates(w, updates);
  EXPECT_NE(w.at("edp.entry.bn.running_var"), before);
}

std::string to_bytes(const ModelWeights<float>& w, const ModelConfig& cfg) {
  std::ostringstream os;
  save_weights(w, cfg, os);
  return os.str();
}

TEST(Weights, RoundTripIsBitExact) {
  ModelConfig cfg;
  cfg.width = 4;
  cfg.seed = 9;
  const auto w = init_model(cfg);
  const auto bytes = to_bytes(w, cfg);
  std::istringstream is(bytes);
  const auto loaded = load_weights(is);
  EXPECT_EQ(loaded.config, cfg);
  EXPECT_EQ(loaded.weights, w);
  EXPECT_EQ(to_bytes(loaded.weights, loaded.config), bytes);

  std::mt19937_64 rng(6);
  const auto x = random_tensor<float>({1, 1, 5, 16, 16}, rng, 0, 1);
  EXPECT_EQ(restore_window(x, cfg, w), restore_window(x, loaded.config, loaded.weights));
}

TEST(Weights, EntriesSortedRegardlessOfInsertion) {
  ModelConfig cfg;
  cfg.width = 2;
  cfg.state_dim = 2;
  const auto w = init_model(cfg);
  std::istringstream is(to_bytes(w, cfg));
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "MWTS");
  EXPECT_EQ(le::read_u8(is), 1);
  const auto count = le::read_u32(is);
  EXPECT_EQ(count, w.size() + 1);
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(le::read_u16(is), '\0');
    is.read(name.data(), std::streamsize(name.size()));
    names.push_back(name);
    if (name == kConfigEntry) {
      mten_read<std::uint8_t>(is);
    } else {
      mten_read<float>(is);
    }
  }
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  EXPECT_NE(std::find(names.begin(), names.end(), kConfigEntry), names.end());
}

TEST(Weights, ValidationNamesTheOffendingTensor) {
  ModelConfig cfg;
  cfg.width = 2;
  cfg.state_dim = 2;
  auto w = init_model(cfg);
  auto bad = w;
  bad.at("edp.head.weight") = Tensor<float>({1, 3, 1, 1, 1}, 0.0f);
  try {
    std::istringstream is(to_bytes(bad, cfg));
    load_weights(is, cfg);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("edp.head.weight"), std::string::npos) << e.what();
  }
  auto missing = w;
  missing.erase("sdat.out.bias");
  EXPECT_THROW(validate_weights(missing, cfg), ShapeError);
  auto extra = w;
  extra.emplace("sdat.extra", Tensor<float>({1}, 0.0f));
  try {
    validate_weights(extra, cfg);
    FAIL() << "expected an unknown-name error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("sdat.extra"), std::string::npos);
  }
  ModelConfig other = cfg;
  other.width = 4;
  std::istringstream is(to_bytes(w, cfg));
  EXPECT_THROW(load_weights(is, other), ShapeError);
}

TEST(Weights, CorruptContainers) {
  ModelConfig cfg;
  cfg.width = 2;
  cfg.state_dim = 2;
  const auto bytes = to_bytes(init_model(cfg), cfg);
  auto expect_kind = [](std::string b, FormatError::Kind kind) {
    std::istringstream is(b);
    try {
      load_weights(is);
      FAIL() << "expected a format error";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  auto b = bytes;
  b[0] = 'X';
  expect_kind(b, FormatError::Kind::bad_magic);
  b = bytes;
  b[4] = 2;
  expect_kind(b, FormatError::Kind::unsupported_version);
  expect_kind(bytes.substr(0, bytes.size() / 2), FormatError::Kind::truncated);
}

}  // namespace
}  // namespace mamat
