#include <gtest/gtest.h>

#include <random>

#include "derain/gradcheck.hpp"
#include "derain/losses.hpp"
#include "derain/net.hpp"
#include "oracles.hpp"

using namespace derain;
using oracle::random_tensor;

namespace {

/// Runs f once with every parameter of `params` perturbed in turn at a few
/// random coordinates; returns the worst relative error.
template <typename F>
double check_parameters(const NamedTensors<double>& params, int tensors, int coords, std::uint64_t seed,
                        F&& loss, double eps = 1e-5) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int i = 0; i < tensors; ++i) {
    const auto& [name, p] = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng)];
    const auto r = finite_difference_check([&](const Tensor<double>&) { return loss(); }, p, eps,
                                           static_cast<std::size_t>(coords), seed + i);
    EXPECT_TRUE(r.finite) << name;
    worst = std::max(worst, r.max_rel_error);
  }
  return worst;
}

}  // namespace

TEST(PredictiveNet, TinyOutputShape) {
  PredictiveNet<float> net(NetConfig::tiny(), 0);
  const auto y = net.forward(random_tensor<float>(Shape{1, 3, 64, 64}, 1, 0, 1));
  EXPECT_EQ(y.shape(), (Shape{1, 27, 64, 64}));
  const auto k = net.predict_kernels(random_tensor<float>(Shape{1, 3, 64, 64}, 1, 0, 1));
  EXPECT_EQ(k.weights.shape(), (Shape{1, 27, 64, 64}));
  EXPECT_EQ(k.kernel_size, 3);
  EXPECT_EQ(k.channels, 3);
}

TEST(PredictiveNet, ParameterCountMatchesLayerTable) {
  // 17 layers at full width: conv weights (no bias, batch norm follows)
  // plus gamma and beta per block, then the 1x1 head with bias.
  auto block = [](std::size_t out, std::size_t in) { return out * in * 9 + 2 * out; };
  const std::size_t expected = block(64, 3) + block(128, 64) + block(256, 128) + block(512, 256) +
                               block(512, 512) + block(512, 512) + block(256, 512 + 512) +
                               block(27, 256 + 256) + (27 * (27 + 128) + 27);
  PredictiveNet<float> net(NetConfig::with_layers(17, 1.0), 0);
  EXPECT_EQ(net.parameter_count(), expected);

  // 49 layers at 1/8 width, with a 4-channel input.
  auto blocks3 = [&](std::size_t out, std::size_t in) { return block(out, in) + 2 * block(out, out); };
  const std::size_t tiny49 = blocks3(8, 4) + blocks3(16, 8) + blocks3(32, 16) + blocks3(64, 32) +
                             blocks3(64, 64) + blocks3(64, 64) + blocks3(32, 64 + 64) +
                             blocks3(27, 32 + 32) + (27 * (27 + 16) + 27);
  EXPECT_EQ(PredictiveNet<float>(NetConfig::with_layers(49, 0.125, 4), 0).parameter_count(), tiny49);
}

TEST(PredictiveNet, SameSeedSameParameters) {
  PredictiveNet<float> a(NetConfig::tiny(), 42), b(NetConfig::tiny(), 42), c(NetConfig::tiny(), 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin()));
    any_diff |= !std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pc[i].second.data().begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(PredictiveNet, RejectsBadInputs) {
  PredictiveNet<float> net(NetConfig::tiny(), 0);
  try {
    net.predict_kernels(Tensor<float>(Shape{1, 3, 40, 64}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
  EXPECT_THROW(net.predict_kernels(Tensor<float>(Shape{1, 4, 32, 32})), ShapeError);
  EXPECT_THROW(NetConfig::with_layers(17, 0.001), ConfigError);
  EXPECT_THROW(NetConfig::with_layers(21, 1.0), ConfigError);
}

TEST(PredictiveNet, KernelsVaryWithInput) {
  PredictiveNet<float> net(NetConfig::tiny(), 3);
  const auto a = net.forward(random_tensor<float>(Shape{1, 3, 32, 32}, 1, 0, 1));
  const auto b = net.forward(random_tensor<float>(Shape{1, 3, 32, 32}, 2, 0, 1));
  EXPECT_GT(oracle::max_abs_diff(a, b), 1e-4);
  // Spatially variant: not the same kernel at every pixel.
  EXPECT_NE(a.at(0, 0, 3, 4), a.at(0, 0, 20, 17));
}

TEST(PredictiveNet, ParameterGradientsSpotCheck) {
  PredictiveNet<double> net(NetConfig::tiny(), 5);
  const auto x = random_tensor(Shape{2, 3, 16, 16}, 6, 0, 1);
  const auto r = random_tensor(Shape{2, 27, 16, 16}, 7);
  const double err = check_parameters(net.parameters(), 5, 1, 8, [&] { return sum(mul(net.forward(x), r)); });
  EXPECT_LT(err, 1e-4);
}

TEST(SpfiltForward, IdentityHeadPassesInputThrough) {
  for (int scales : {1, 4}) {
    FilterStage<float> stage(NetConfig::tiny(), scales, 0);
    stage.net().force_identity_kernels();
    const auto x = random_tensor<float>(Shape{2, 3, 32, 48}, 1, 0, 1);
    EXPECT_LT(oracle::max_abs_diff(spfilt_forward(stage, x), x), 1e-6) << "S=" << scales;
  }
}

TEST(SpfiltForward, UntrainedOutputIsFinite) {
  FilterStage<float> stage(NetConfig::tiny(), 4, 9);
  const auto x = random_tensor<float>(Shape{1, 3, 64, 64}, 1, 0, 1);
  const auto y = spfilt_forward(stage, x);
  for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
  const double p = psnr(y, x);
  EXPECT_TRUE(std::isfinite(p));
  EXPECT_GT(p, 0.0);
}

TEST(Cascade, IdentityFirstStage) {
  CascadeModel<float> model(ModelConfig::final_design(0.125), 0);
  model.phi1().net().force_identity_kernels();
  const auto x = random_tensor<float>(Shape{1, 3, 32, 32}, 4, 0, 1);
  const auto out = ucpfilt_forward(model, x);
  EXPECT_LT(oracle::max_abs_diff(out.first, x), 1e-6);
  ASSERT_EQ(out.uncertainty.shape(), (Shape{1, 1, 32, 32}));
  for (float v : out.uncertainty.data()) EXPECT_EQ(v, 1.0f / 9.0f);
  EXPECT_EQ(out.fused.shape(), x.shape());
  EXPECT_EQ(out.second.shape(), x.shape());
}

TEST(Cascade, FullyIdentityModelIsIdentity) {
  for (CascadeMode mode : {CascadeMode::kNone, CascadeMode::kNaive, CascadeMode::kUncertainty}) {
    ModelConfig cfg;
    cfg.cascade = mode;
    cfg.normalize();
    CascadeModel<float> model(cfg, 0);
    model.phi1().net().force_identity_kernels();
    if (model.cascaded()) model.phi2().net().force_identity_kernels();
    const auto x = random_tensor<float>(Shape{1, 3, 16, 32}, 4, 0, 1);
    EXPECT_LT(oracle::max_abs_diff(model.forward(x).fused, x), 1e-6) << to_string(mode);
  }
}

TEST(Cascade, NaiveCascadeShapes) {
  ModelConfig cfg;
  cfg.cascade = CascadeMode::kNaive;
  cfg.normalize();
  EXPECT_EQ(cfg.phi2.in_channels, 3);
  CascadeModel<float> model(cfg, 1);
  const auto x = random_tensor<float>(Shape{2, 3, 32, 16}, 4, 0, 1);
  const auto out = model.forward(x);
  EXPECT_EQ(out.fused.shape(), x.shape());
  EXPECT_EQ(out.first.shape(), x.shape());
  EXPECT_EQ(out.second.shape(), x.shape());
}

TEST(Cascade, Deterministic) {
  CascadeModel<float> a(ModelConfig::final_design(0.125), 7), b(ModelConfig::final_design(0.125), 7);
  const auto x = random_tensor<float>(Shape{2, 3, 32, 32}, 4, 0, 1);
  const auto ya = a.forward(x).fused, yb = b.forward(x).fused;
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST(Cascade, EndToEndGradientOfCascadeLoss) {
  CascadeModel<double> model(ModelConfig(), 3);
  const auto x = random_tensor(Shape{2, 3, 16, 16}, 1, 0, 1);
  const auto target = random_tensor(Shape{2, 3, 16, 16}, 2, 0, 1);
  auto loss = [&] {
    const auto o = ucpfilt_forward(model, x);
    return uc_loss(o.fused, o.first, o.second, target);
  };
  const double err = check_parameters(model.parameters(), 12, 2, 11, loss);
  EXPECT_LT(err, 1e-3);
}
