#include "mamat/gradsuite.hpp"

#include <chrono>
#include <memory>
#include <random>

#include "mamat/ops.hpp"
#include "mamat/ssm.hpp"
#include "mamat/training.hpp"

namespace mamat {

namespace {

using Params = std::map<std::string, Var<double>>;
using TensorMap = std::map<std::string, Tensor<double>>;

class CaseBuilder {
 public:
  explicit CaseBuilder(std::uint64_t seed) : rng_(seed) {}

  Tensor<double> uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(shape), 0.0);
    for (auto& v : t.data()) v = u(rng_);
    return t;
  }

  // Magnitudes in [lo, hi] with alternating signs, away from zero.
  Tensor<double> signed_away(Shape shape, double lo, double hi) {
    auto t = uniform(std::move(shape), lo, hi);
    for (std::size_t i = 0; i < t.size(); i += 2) t[i] = -t[i];
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

// sum(f(p) * probe) so every output coordinate carries a distinct weight.
ScalarFn probed(std::function<Var<double>(Tape<double>&, const Params&)> f, Tensor<double> probe) {
  auto pr = std::make_shared<const Tensor<double>>(std::move(probe));
  return [f = std::move(f), pr](Tape<double>& t, const Params& p) { return ops::sum(ops::mul(f(t, p), t.constant(*pr))); };
}

void add_ssm(TensorMap& m, CaseBuilder& r, const std::string& prefix, std::size_t c, std::size_t d) {
  Tensor<double> a_log({c, d}, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < d; ++k) a_log[i * d + k] = std::log(double(k + 1));
  m[prefix + "a_log"] = a_log;
  m[prefix + "dt_weight"] = r.uniform({c, c, 1, 1, 1}, -0.5, 0.5);
  m[prefix + "dt_bias"] = r.uniform({c}, -3, -1);
  m[prefix + "b_weight"] = r.uniform({d, c, 1, 1, 1});
  m[prefix + "c_weight"] = r.uniform({d, c, 1, 1, 1});
  m[prefix + "d_skip"] = r.uniform({c});
}

ssm::SsmParams<double> ssm_from(const Params& p, const std::string& prefix) {
  return {p.at(prefix + "a_log"),    p.at(prefix + "dt_weight"), p.at(prefix + "dt_bias"),
          p.at(prefix + "b_weight"), p.at(prefix + "c_weight"),  p.at(prefix + "d_skip")};
}

void add_conv_block(TensorMap& m, CaseBuilder& r, const std::string& prefix, Shape w) {
  const std::size_t c = w[0];
  m[prefix + "weight"] = r.uniform(std::move(w), -0.5, 0.5);
  m[prefix + "gamma"] = r.uniform({c}, 0.5, 1.5);
  m[prefix + "beta"] = r.uniform({c}, 0.2, 0.8);
}

nn::ConvBlockParams<double> conv_block_from(const Params& p, const std::string& prefix) {
  const std::size_t c = p.at(prefix + "weight").shape()[0];
  nn::ConvBlockParams<double> b{{p.at(prefix + "weight")},
                                {p.at(prefix + "gamma"), p.at(prefix + "beta"), Tensor<double>({c}, 0.0), Tensor<double>({c}, 1.0)}};
  b.norm.key = prefix;
  return b;
}

void add_mamba(TensorMap& m, CaseBuilder& r, const std::string& prefix, std::size_t c, std::size_t d) {
  add_ssm(m, r, prefix + "ssm.", c, d);
  for (const char* name : {"res.", "in.", "out."}) add_conv_block(m, r, prefix + name, {c, c, 1, 1, 1});
}

ssm::MambaBlockParams<double> mamba_from(const Params& p, const std::string& prefix) {
  return {conv_block_from(p, prefix + "res."), conv_block_from(p, prefix + "in."), conv_block_from(p, prefix + "out."),
          ssm_from(p, prefix + "ssm.")};
}

const std::vector<std::pair<std::string, Var<double> nn::AttnBlockParams<double>::*>>& attn_fields() {
  using A = nn::AttnBlockParams<double>;
  static const std::vector<std::pair<std::string, Var<double> A::*>> fields = {
      {"norm1.gamma", &A::norm1_gamma}, {"norm1.beta", &A::norm1_beta}, {"q.weight", &A::q_weight},
      {"q.bias", &A::q_bias},           {"k.weight", &A::k_weight},     {"v.weight", &A::v_weight},
      {"v.bias", &A::v_bias},           {"proj.weight", &A::proj_weight}, {"proj.bias", &A::proj_bias},
      {"norm2.gamma", &A::norm2_gamma}, {"norm2.beta", &A::norm2_beta}, {"fc1.weight", &A::fc1_weight},
      {"fc1.bias", &A::fc1_bias},       {"fc2.weight", &A::fc2_weight}, {"fc2.bias", &A::fc2_bias}};
  return fields;
}

void unary_case(std::vector<GradCase>& out, const std::string& name, Var<double> (*fn)(Var<double>),
                Tensor<double> x, CaseBuilder& r) {
  auto probe = r.uniform(x.shape());
  out.push_back({name, probed([fn](Tape<double>&, const Params& p) { return fn(p.at("x")); }, probe), {{"x", x}}});
}

void binary_case(std::vector<GradCase>& out, const std::string& name, Var<double> (*fn)(Var<double>, Var<double>),
                 CaseBuilder& r) {
  const Shape s{3, 4};
  out.push_back({name,
                 probed([fn](Tape<double>&, const Params& p) { return fn(p.at("a"), p.at("b")); }, r.uniform(s)),
                 {{"a", r.uniform(s)}, {"b", r.uniform(s)}}});
}

// Full-network weights in 64-bit, moved off the non-differentiable points of
// the initialisation: offsets get small random weights with fractional bias,
// zero-initialised attention outputs become random and batch-norm shifts keep
// most rectifier inputs away from zero.
TensorMap network_params(const ModelConfig& cfg, TensorMap& buffers, CaseBuilder& r) {
  TensorMap params;
  for (const auto& [name, t] : init_model(cfg)) {
    auto d = t.cast<double>();
    auto ends = [&](const std::string& s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (is_buffer(name)) {
      buffers.emplace(name, std::move(d));
      continue;
    }
    if (ends("offset.weight")) d = r.uniform(d.shape(), -0.002, 0.002);
    if (ends("offset.bias")) d = r.signed_away(d.shape(), 0.3, 0.7);
    if (ends("proj.weight") || ends("fc2.weight")) d = r.uniform(d.shape(), -0.3, 0.3);
    if (ends("proj.bias") || ends("fc2.bias") || ends("q.bias") || ends("v.bias")) d = r.uniform(d.shape(), -0.1, 0.1);
    if (ends(".beta")) d = r.uniform(d.shape(), 0.1, 0.3);
    if (ends("bn.beta")) d = r.uniform(d.shape(), 1.5, 2.5);
    params.emplace(name, std::move(d));
  }
  return params;
}

}  // namespace

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.width = 2;
  c.state_dim = 2;
  c.frames = 3;
  c.heads = 2;
  c.window = 8;
  return c;
}

std::vector<GradCase> gradient_cases(SuiteConfig config) {
  std::vector<GradCase> out;
  CaseBuilder r(2024);

  binary_case(out, "add", &ops::add<double>, r);
  binary_case(out, "sub", &ops::sub<double>, r);
  binary_case(out, "mul", &ops::mul<double>, r);
  out.push_back({"scale", probed([](Tape<double>&, const Params& p) { return ops::scale(p.at("x"), -1.7); },
                                 r.uniform({5})),
                 {{"x", r.uniform({5})}}});
  out.push_back({"add_scalar",
                 probed([](Tape<double>&, const Params& p) { return ops::add_scalar(p.at("x"), 0.4); }, r.uniform({5})),
                 {{"x", r.uniform({5})}}});
  unary_case(out, "relu", &ops::relu<double>, r.signed_away({6}, 0.1, 1.0), r);
  unary_case(out, "sqrt", &ops::sqrt<double>, r.uniform({6}, 0.2, 2.0), r);
  unary_case(out, "square", &ops::square<double>, r.uniform({6}), r);
  unary_case(out, "exp", &ops::exp<double>, r.uniform({6}), r);
  unary_case(out, "neg", &ops::neg<double>, r.uniform({6}), r);
  unary_case(out, "softplus", &ops::softplus<double>, r.uniform({6}, -4, 4), r);
  unary_case(out, "gelu", &ops::gelu<double>, r.uniform({6}, -3, 3), r);
  out.push_back({"clamp",
                 probed([](Tape<double>&, const Params& p) { return ops::clamp(p.at("x"), 0.0, 1.0); }, r.uniform({6})),
                 {{"x", Tensor<double>({6}, {-0.4, 0.1, 0.35, 0.6, 0.9, 1.3})}}});
  out.push_back({"sum", [](Tape<double>&, const Params& p) { return ops::sum(ops::square(p.at("x"))); },
                 {{"x", r.uniform({2, 3})}}});
  out.push_back({"mean", [](Tape<double>&, const Params& p) { return ops::mean(ops::square(p.at("x"))); },
                 {{"x", r.uniform({2, 3})}}});
  out.push_back({"reshape",
                 probed([](Tape<double>&, const Params& p) { return ops::reshape(p.at("x"), {3, 2, 2}); },
                        r.uniform({3, 2, 2})),
                 {{"x", r.uniform({4, 3})}}});
  out.push_back({"concat_channels",
                 probed([](Tape<double>&, const Params& p) { return ops::concat_channels(p.at("a"), p.at("b")); },
                        r.uniform({1, 5, 2, 2, 2})),
                 {{"a", r.uniform({1, 2, 2, 2, 2})}, {"b", r.uniform({1, 3, 2, 2, 2})}}});
  out.push_back({"select_time",
                 probed([](Tape<double>&, const Params& p) { return ops::select_time(p.at("x"), 1); },
                        r.uniform({2, 2, 3, 3})),
                 {{"x", r.uniform({2, 2, 3, 3, 3})}}});
  out.push_back({"upsample_nearest",
                 probed([](Tape<double>&, const Params& p) { return ops::upsample_nearest(p.at("x"), {1, 2, 2}); },
                        r.uniform({1, 2, 2, 4, 6})),
                 {{"x", r.uniform({1, 2, 2, 2, 3})}}});

  out.push_back({"conv3d",
                 probed([](Tape<double>&, const Params& p) {
                          return nn::conv3d(p.at("x"), nn::Conv3dParams<double>{p.at("w"), p.at("b"), {1, 2, 2}});
                        },
                        r.uniform({1, 3, 3, 3, 3})),
                 {{"x", r.uniform({1, 2, 3, 6, 6})}, {"w", r.uniform({3, 2, 3, 3, 3})}, {"b", r.uniform({3})}}});
  out.push_back({"deform_conv3d",
                 probed([](Tape<double>&, const Params& p) {
                          return nn::deform_conv3d(
                              p.at("x"), nn::DeformConv3dParams<double>{{p.at("w"), p.at("b")}, {p.at("ow"), p.at("ob")}});
                        },
                        r.uniform({1, 2, 3, 4, 4})),
                 {{"x", r.uniform({1, 2, 3, 4, 4})},
                  {"w", r.uniform({2, 2, 3, 3, 3})},
                  {"b", r.uniform({2})},
                  {"ow", r.uniform({81, 2, 3, 3, 3}, -0.002, 0.002)},
                  {"ob", r.signed_away({81}, 0.3, 0.7)}},
                 100});
  out.push_back({"deform_conv3d_with_offsets",
                 probed([](Tape<double>&, const Params& p) {
                          return nn::deform_conv3d_with_offsets(p.at("x"), p.at("off"),
                                                                nn::Conv3dParams<double>{p.at("w"), p.at("b")});
                        },
                        r.uniform({1, 2, 2, 3, 3})),
                 {{"x", r.uniform({1, 2, 2, 3, 3})},
                  {"off", r.signed_away({1, 81, 2, 3, 3}, 0.3, 0.7)},
                  {"w", r.uniform({2, 2, 3, 3, 3})},
                  {"b", r.uniform({2})}},
                 150});
  out.push_back({"upconv3d",
                 probed([](Tape<double>&, const Params& p) {
                          return nn::upconv3d(p.at("x"),
                                              nn::DeformConv3dParams<double>{{p.at("w"), p.at("b")}, {p.at("ow"), p.at("ob")}},
                                              {1, 2, 2});
                        },
                        r.uniform({1, 2, 2, 4, 4})),
                 {{"x", r.uniform({1, 3, 2, 2, 2})},
                  {"w", r.uniform({2, 3, 3, 3, 3})},
                  {"b", r.uniform({2})},
                  {"ow", r.uniform({81, 3, 3, 3, 3}, -0.002, 0.002)},
                  {"ob", r.signed_away({81}, 0.3, 0.7)}},
                 100});
  for (auto mode : {nn::Mode::train, nn::Mode::infer}) {
    auto rm = std::make_shared<const Tensor<double>>(Tensor<double>({3}, {0.1, 0.2, -0.3}));
    auto rv = std::make_shared<const Tensor<double>>(Tensor<double>({3}, {1.0, 0.5, 2.0}));
    out.push_back({mode == nn::Mode::train ? "batchnorm3d_train" : "batchnorm3d_infer",
                   probed([mode, rm, rv](Tape<double>&, const Params& p) {
                            nn::NormParams<double> np{p.at("g"), p.at("b"), *rm, *rv};
                            return nn::batchnorm3d(p.at("x"), np, mode).out;
                          },
                          r.uniform({2, 3, 2, 3, 3})),
                   {{"x", r.uniform({2, 3, 2, 3, 3})}, {"g", r.uniform({3})}, {"b", r.uniform({3})}}});
  }
  {
    TensorMap m{{"x", r.uniform({1, 2, 2, 3, 3})}};
    add_conv_block(m, r, "blk.", {3, 2, 3, 3, 3});
    out.push_back({"conv_block",
                   probed([](Tape<double>&, const Params& p) {
                            return nn::conv_block(p.at("x"), conv_block_from(p, "blk."), nn::Mode::train);
                          },
                          r.uniform({1, 3, 2, 3, 3})),
                   m});
  }
  out.push_back({"layer_norm",
                 probed([](Tape<double>&, const Params& p) { return nn::layer_norm(p.at("x"), p.at("g"), p.at("b")); },
                        r.uniform({3, 5})),
                 {{"x", r.uniform({3, 5})}, {"g", r.uniform({5})}, {"b", r.uniform({5})}}});
  out.push_back({"linear",
                 probed([](Tape<double>&, const Params& p) { return nn::linear(p.at("x"), p.at("w"), std::optional<Var<double>>(p.at("b"))); },
                        r.uniform({2, 3, 4})),
                 {{"x", r.uniform({2, 3, 5})}, {"w", r.uniform({4, 5})}, {"b", r.uniform({4})}}});
  out.push_back({"window_partition",
                 probed([](Tape<double>&, const Params& p) { return nn::window_partition(p.at("x"), 2); },
                        r.uniform({4, 4, 3})),
                 {{"x", r.uniform({1, 3, 4, 4})}}});
  out.push_back({"window_reverse",
                 probed([](Tape<double>&, const Params& p) { return nn::window_reverse(p.at("t"), {1, 3, 4, 4}, 2); },
                        r.uniform({1, 3, 4, 4})),
                 {{"t", r.uniform({4, 4, 3})}}});
  out.push_back({"multi_head_attention",
                 probed([](Tape<double>&, const Params& p) {
                          return nn::multi_head_attention(p.at("q"), p.at("k"), p.at("v"), 2);
                        },
                        r.uniform({2, 5, 4})),
                 {{"q", r.uniform({2, 5, 4})}, {"k", r.uniform({2, 5, 4})}, {"v", r.uniform({2, 5, 4})}}});
  {
    TensorMap m{{"x", r.uniform({1, 4, 4, 4})}};
    for (const auto& [name, field] : attn_fields()) {
      (void)field;
      Shape s;
      if (name.find("weight") != std::string::npos) {
        s = name.rfind("fc1", 0) == 0 ? Shape{8, 4} : name.rfind("fc2", 0) == 0 ? Shape{4, 8} : Shape{4, 4};
      } else {
        s = name.rfind("fc1", 0) == 0 ? Shape{8} : Shape{4};
      }
      m[name] = name.find("gamma") != std::string::npos ? r.uniform(s, 0.5, 1.5) : r.uniform(s, -0.5, 0.5);
    }
    out.push_back({"attn_block",
                   probed([](Tape<double>&, const Params& p) {
                            nn::AttnBlockParams<double> a;
                            for (const auto& [name, field] : attn_fields()) a.*field = p.at(name);
                            a.heads = 2;
                            a.window = 2;
                            return nn::attn_block(p.at("x"), a);
                          },
                          r.uniform({1, 4, 4, 4})),
                   m});
  }

  {
    const Shape xs{2, 2, 2, 2, 3}, ps{2, 3, 2, 2, 3};
    out.push_back({"selective_scan",
                   probed([](Tape<double>& t, const Params& p) {
                            Var<double> acc = t.constant(Tensor<double>({2, 2, 2, 2, 3}, 0.0));
                            for (auto dir : ssm::kAllDirections) {
                              acc = ops::add(acc, ssm::selective_scan(p.at("x"), p.at("delta"), p.at("A"), p.at("B"),
                                                                      p.at("C"), p.at("D"), ssm::scan_order(dir, 2, 2, 3)));
                            }
                            return acc;
                          },
                          r.uniform(xs)),
                   {{"x", r.uniform(xs)},
                    {"delta", r.uniform(xs, 0.001, 0.5)},
                    {"A", r.uniform({2, 3}, -3.0, -0.05)},
                    {"B", r.uniform(ps)},
                    {"C", r.uniform(ps)},
                    {"D", r.uniform({2})}}});
  }
  {
    TensorMap m{{"x", r.uniform({1, 2, 2, 3, 3})}};
    add_ssm(m, r, "ssm.", 2, 3);
    out.push_back({"multidirectional_ssm",
                   probed([](Tape<double>&, const Params& p) {
                            return ssm::multidirectional_ssm(p.at("x"), ssm_from(p, "ssm."));
                          },
                          r.uniform({1, 2, 2, 3, 3})),
                   m});
  }
  {
    TensorMap m{{"x", r.uniform({2, 2, 2, 3, 3})}};
    add_mamba(m, r, "", 2, 2);
    out.push_back({"mamba_in_conv",
                   probed([](Tape<double>&, const Params& p) {
                            return ssm::mamba_in_conv(p.at("x"), mamba_from(p, ""), nn::Mode::train);
                          },
                          r.uniform({2, 2, 2, 3, 3})),
                   m});
  }
  {
    TensorMap m{{"x", r.uniform({1, 2, 2, 3, 3})}};
    add_mamba(m, r, "mamba.", 3, 2);
    add_conv_block(m, r, "conv1.", {3, 2, 3, 3, 3});
    add_conv_block(m, r, "conv2.", {3, 3, 3, 3, 3});
    m["skip"] = r.uniform({3, 2, 1, 1, 1});
    out.push_back({"res_mamba_block",
                   probed([](Tape<double>&, const Params& p) {
                            ssm::ResMambaParams<double> rp{conv_block_from(p, "conv1."), conv_block_from(p, "conv2."),
                                                           mamba_from(p, "mamba."), p.at("skip")};
                            return ssm::res_mamba_block(p.at("x"), rp, nn::Mode::train);
                          },
                          r.uniform({1, 3, 2, 3, 3})),
                   m,
                   60});
  }
  {
    auto target = std::make_shared<const Tensor<double>>(r.uniform({3, 4}));
    out.push_back({"charbonnier",
                   [target](Tape<double>& t, const Params& p) { return charbonnier(p.at("x"), t.constant(*target), 1e-3); },
                   {{"x", r.uniform({3, 4})}}});
  }

  {
    const ModelConfig cfg = config == SuiteConfig::tiny ? tiny_model_config() : ModelConfig{};
    CaseBuilder nr(3);
    TensorMap buffers;
    const auto params = network_params(cfg, buffers, nr);
    const std::size_t side = 8;
    const auto x = nr.uniform({1, cfg.channels, cfg.frames, side, side}, 0.0, 1.0);
    const auto probe = nr.uniform({1, cfg.channels, side, side});
    // Evaluated in extended precision: rounding noise in double exceeds the
    // tolerance for the smallest gradients of the deeper blocks.
    using L = long double;
    using LMap = std::map<std::string, Tensor<L>>;
    auto lbuffers = std::make_shared<LMap>();
    LMap lparams;
    for (const auto& [k, v] : buffers) lbuffers->emplace(k, v.cast<L>());
    for (const auto& [k, v] : params) lparams.emplace(k, v.cast<L>());
    auto lx = std::make_shared<const Tensor<L>>(x.cast<L>());
    auto lprobe = std::make_shared<const Tensor<L>>(probe.cast<L>());
    GradCase c{"mamat_forward", {}, params, config == SuiteConfig::tiny ? 6u : 2u};
    c.check = [cfg, lbuffers, lparams = std::move(lparams), lx, lprobe](const GradCheckOptions& o) {
      ScalarFnT<L> fn = [&](Tape<L>& t, const std::map<std::string, Var<L>>& p) {
        Bindings<L> b{p, lbuffers.get()};
        return ops::sum(ops::mul(mamat_forward(t.constant(*lx), cfg, b, nn::Mode::train), t.constant(*lprobe)));
      };
      return finite_diff_check(fn, lparams, o);
    };
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<std::string> SuiteReport::failures() const {
  std::vector<std::string> f;
  for (const auto& c : cases)
    if (!c.passed) f.push_back(c.name);
  return f;
}

SuiteReport run_gradient_suite(SuiteConfig config, double eps, double threshold,
                               const std::function<void(const CaseResult&)>& on_case) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  SuiteReport report;
  report.passed = true;
  std::uint64_t seed = 0;
  for (auto& c : gradient_cases(config)) {
    const auto t0 = clock::now();
    CaseResult res;
    res.name = c.name;
    try {
      const GradCheckOptions opt{
          .eps = eps, .threshold = threshold, .max_coords_per_param = c.max_coords_per_param, .seed = seed++};
      res.report = c.check ? c.check(opt) : finite_diff_check(c.fn, c.params, opt);
      res.passed = res.report.passed;
    } catch (const std::exception& e) {
      res.error = e.what();
      res.passed = false;
    }
    res.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    report.passed = report.passed && res.passed;
    if (on_case) on_case(res);
    report.cases.push_back(std::move(res));
  }
  report.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return report;
}

}  // namespace mamat
