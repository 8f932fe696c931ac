#include "derain/net.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace derain {

NetConfig NetConfig::with_layers(int layers, double width_scale, int in_channels) {
  NetConfig cfg;
  switch (layers) {
    case 49: cfg.convs_per_block = 3; break;
    case 33: cfg.convs_per_block = 2; break;
    case 17: cfg.convs_per_block = 1; break;
    default: throw ConfigError("unsupported depth " + std::to_string(layers) + " (49, 33 or 17)");
  }
  cfg.width_scale = width_scale;
  cfg.in_channels = in_channels;
  cfg.validate();
  return cfg;
}

NetConfig NetConfig::tiny(int in_channels) { return with_layers(17, 0.125, in_channels); }

std::array<int, 8> NetConfig::block_widths() const {
  static constexpr std::array<int, 7> kBase = {64, 128, 256, 512, 512, 512, 256};
  std::array<int, 8> widths{};
  for (std::size_t i = 0; i < kBase.size(); ++i) {
    widths[i] = static_cast<int>(std::floor(kBase[i] * width_scale + 1e-9));
  }
  widths[7] = kOutChannels;
  return widths;
}

void NetConfig::validate() const {
  if (convs_per_block < 1 || convs_per_block > 3) {
    throw ConfigError("convs_per_block must be 1, 2 or 3");
  }
  if (!(width_scale > 0)) throw ConfigError("width_scale must be positive");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  for (int w : block_widths()) {
    if (w < 1) {
      throw ConfigError("width_scale " + std::to_string(width_scale) +
                        " leaves a block with zero channels");
    }
  }
}

std::string NetConfig::str() const {
  std::ostringstream os;
  os << "layers=" << layers() << " width=" << width_scale << " in=" << in_channels;
  return os.str();
}

namespace {

template <typename T>
Tensor<T> he_uniform(Shape shape, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(shape.c) * shape.h * shape.w;
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape.numel());
  for (auto& v : values) v = T(dist(rng));
  return Tensor<T>(shape, std::move(values), true);
}

constexpr double kHeadInitGain = 0.1;

std::string block_name(int b) { return "block" + std::to_string(b + 1); }

}  // namespace

template <typename T>
PredictiveNet<T>::PredictiveNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto w = cfg_.block_widths();
  const std::array<int, 8> in = {cfg_.in_channels, w[0], w[1], w[2], w[3], w[4],
                                 w[5] + w[3], w[6] + w[2]};
  for (int b = 0; b < 8; ++b) {
    int cin = in[b];
    for (int k = 0; k < cfg_.convs_per_block; ++k) {
      ConvBn layer;
      layer.weight = he_uniform<T>(Shape{w[b], cin, 3, 3}, rng);
      layer.gamma = Tensor<T>(Shape{1, w[b], 1, 1}, T(1), true);
      layer.beta = Tensor<T>(Shape{1, w[b], 1, 1}, T(0), true);
      layer.stats = BatchNormStats<T>(w[b]);
      blocks_[b].push_back(std::move(layer));
      cin = w[b];
    }
  }
  head_weight_ = he_uniform<T>(Shape{NetConfig::kOutChannels, w[7] + w[1], 1, 1}, rng);
  head_bias_ = Tensor<T>(Shape{1, NetConfig::kOutChannels, 1, 1}, T(0), true);
  // Start near the identity filter: an untrained stage passes its input
  // through with mild per-pixel noise instead of scrambling it.
  for (T& v : head_weight_.mutable_data()) v *= T(kHeadInitGain);
  const int taps = NetConfig::kKernelSize * NetConfig::kKernelSize;
  for (int c = 0; c < NetConfig::kImageChannels; ++c) head_bias_.mutable_data()[c * taps + taps / 2] = T(1);
}

template <typename T>
void PredictiveNet<T>::check_input(const Tensor<T>& input) const {
  const Shape s = input.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("predictive net expects " + std::to_string(cfg_.in_channels) +
                     " input channels, got " + s.str());
  }
  if (s.h % NetConfig::kSpatialMultiple != 0 || s.w % NetConfig::kSpatialMultiple != 0) {
    throw ShapeError("predictive net input " + s.str() + ": height and width must be multiples of " +
                     std::to_string(NetConfig::kSpatialMultiple));
  }
}

template <typename T>
Tensor<T> PredictiveNet<T>::run_block(Block& block, Tensor<T> x) {
  for (auto& layer : block) {
    x = relu(batch_norm(conv2d(x, layer.weight, Tensor<T>(), 1, 1), layer.gamma, layer.beta,
                        layer.stats, training_));
  }
  return x;
}

template <typename T>
Tensor<T> PredictiveNet<T>::features(const Tensor<T>& input) {
  check_input(input);
  const Tensor<T> x1 = run_block(blocks_[0], input);
  const Tensor<T> x2 = run_block(blocks_[1], avg_pool2(x1));
  const Tensor<T> x3 = run_block(blocks_[2], avg_pool2(x2));
  const Tensor<T> x4 = run_block(blocks_[3], avg_pool2(x3));
  const Tensor<T> x5 = run_block(blocks_[4], avg_pool2(x4));
  const Tensor<T> x6 = run_block(blocks_[5], bilinear_upsample2(x5));
  const Tensor<T> x7 = run_block(blocks_[6], bilinear_upsample2(concat_channels<T>({x6, x4})));
  const Tensor<T> x8 = run_block(blocks_[7], bilinear_upsample2(concat_channels<T>({x7, x3})));
  return bilinear_upsample2(concat_channels<T>({x8, x2}));
}

template <typename T>
Tensor<T> PredictiveNet<T>::forward(const Tensor<T>& input) {
  return conv2d(features(input), head_weight_, head_bias_, 1, 0);
}

template <typename T>
KernelField<T> PredictiveNet<T>::predict_kernels(const Tensor<T>& input) {
  return KernelField<T>(forward(input), NetConfig::kImageChannels, NetConfig::kKernelSize);
}

template <typename T>
NamedTensors<T> PredictiveNet<T>::parameters(const std::string& prefix) const {
  NamedTensors<T> out;
  for (int b = 0; b < 8; ++b) {
    for (std::size_t k = 0; k < blocks_[b].size(); ++k) {
      const std::string base = prefix + block_name(b) + ".conv" + std::to_string(k);
      out.emplace_back(base + ".weight", blocks_[b][k].weight);
      out.emplace_back(base + ".bn.gamma", blocks_[b][k].gamma);
      out.emplace_back(base + ".bn.beta", blocks_[b][k].beta);
    }
  }
  out.emplace_back(prefix + "head.weight", head_weight_);
  out.emplace_back(prefix + "head.bias", head_bias_);
  return out;
}

template <typename T>
NamedBuffers<T> PredictiveNet<T>::buffers(const std::string& prefix) {
  NamedBuffers<T> out;
  for (int b = 0; b < 8; ++b) {
    for (std::size_t k = 0; k < blocks_[b].size(); ++k) {
      const std::string base = prefix + block_name(b) + ".conv" + std::to_string(k);
      out.emplace_back(base + ".bn.running_mean", &blocks_[b][k].stats.mean);
      out.emplace_back(base + ".bn.running_var", &blocks_[b][k].stats.var);
    }
  }
  return out;
}

template <typename T>
std::size_t PredictiveNet<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : parameters()) total += t.numel();
  return total;
}

template <typename T>
void PredictiveNet<T>::force_identity_kernels() {
  auto w = head_weight_.mutable_data();
  std::fill(w.begin(), w.end(), T(0));
  auto b = head_bias_.mutable_data();
  std::fill(b.begin(), b.end(), T(0));
  const int taps = NetConfig::kKernelSize * NetConfig::kKernelSize;
  for (int c = 0; c < NetConfig::kImageChannels; ++c) b[c * taps + taps / 2] = T(1);
}

std::string to_string(CascadeMode mode) {
  switch (mode) {
    case CascadeMode::kNone: return "none";
    case CascadeMode::kNaive: return "naive";
    case CascadeMode::kUncertainty: return "uncertainty";
  }
  return "?";
}

CascadeMode cascade_mode_from_string(const std::string& s) {
  if (s == "none") return CascadeMode::kNone;
  if (s == "naive") return CascadeMode::kNaive;
  if (s == "uncertainty") return CascadeMode::kUncertainty;
  throw ConfigError("unknown cascade mode '" + s + "' (none, naive, uncertainty)");
}

template <typename T>
FilterStage<T>::FilterStage(const NetConfig& cfg, int scales, std::uint64_t seed)
    : net_(cfg, seed), scales_(scales) {
  if (scales < 1 || scales > 4) {
    throw ConfigError("scales must be in 1..4, got " + std::to_string(scales));
  }
  if (scales > 1) fusion_.emplace(scales, NetConfig::kImageChannels);
}

template <typename T>
typename FilterStage<T>::Output FilterStage<T>::run(const Tensor<T>& image,
                                                    const Tensor<T>& net_input,
                                                    MacCounter* counter) {
  Output out;
  out.kernels = net_.predict_kernels(net_input);
  if (scales_ == 1) {
    out.image = apply_spfilt(image, out.kernels, counter);
    return out;
  }
  std::vector<Tensor<T>> per_scale;
  per_scale.reserve(scales_);
  for (int s = 1; s <= scales_; ++s) {
    per_scale.push_back(apply_dilated_filter(image, out.kernels, s, counter));
  }
  out.image = (*fusion_)(per_scale);
  return out;
}

template <typename T>
NamedTensors<T> FilterStage<T>::parameters(const std::string& prefix) const {
  NamedTensors<T> out = net_.parameters(prefix + "net.");
  if (fusion_) {
    out.emplace_back(prefix + "scale_fusion.weight", fusion_->weight());
    out.emplace_back(prefix + "scale_fusion.bias", fusion_->bias());
  }
  return out;
}

ModelConfig ModelConfig::final_design(double width_scale) {
  ModelConfig cfg;
  cfg.phi1 = NetConfig::with_layers(49, width_scale, 3);
  cfg.phi2 = NetConfig::with_layers(17, width_scale, 4);
  cfg.scales = 4;
  cfg.cascade = CascadeMode::kUncertainty;
  return cfg;
}

void ModelConfig::normalize() {
  phi1.in_channels = NetConfig::kImageChannels;
  phi2.in_channels = cascade == CascadeMode::kUncertainty ? NetConfig::kImageChannels + 1
                                                          : NetConfig::kImageChannels;
}

void ModelConfig::validate() const {
  phi1.validate();
  phi2.validate();
  if (scales < 1 || scales > 4) throw ConfigError("scales must be in 1..4");
  if (phi1.in_channels != NetConfig::kImageChannels) {
    throw ConfigError("phi1 must take " + std::to_string(NetConfig::kImageChannels) + " channels");
  }
  const int want = cascade == CascadeMode::kUncertainty ? 4 : 3;
  if (cascade != CascadeMode::kNone && phi2.in_channels != want) {
    throw ConfigError("phi2 must take " + std::to_string(want) + " channels in " +
                      to_string(cascade) + " mode");
  }
}

template <typename T>
CascadeModel<T>::CascadeModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.normalize();
  cfg_.validate();
  // Distinct, seed-derived streams per stage.
  std::array<std::uint64_t, 2> seeds{};
  {
    std::mt19937_64 split(seed);
    seeds = {split(), split()};
  }
  phi1_ = FilterStage<T>(cfg_.phi1, cfg_.scales, seeds[0]);
  if (cascaded()) {
    phi2_.emplace(cfg_.phi2, cfg_.scales, seeds[1]);
    if (cfg_.cascade == CascadeMode::kUncertainty) fusion_.emplace(2, NetConfig::kImageChannels);
  }
}

template <typename T>
void CascadeModel<T>::set_training(bool on) {
  phi1_.net().set_training(on);
  if (phi2_) phi2_->net().set_training(on);
}

template <typename T>
CascadeOutput<T> CascadeModel<T>::forward(const Tensor<T>& rainy, MacCounter* counter) {
  CascadeOutput<T> out;
  auto first = phi1_.run(rainy, rainy, counter);
  out.first = first.image;
  out.uncertainty = uncertainty_map(first.kernels);
  if (cfg_.cascade == CascadeMode::kNone) {
    out.fused = out.first;
    return out;
  }
  if (cfg_.cascade == CascadeMode::kNaive) {
    out.second = phi2_->run(out.first, out.first, counter).image;
    out.fused = out.second;
    return out;
  }
  const Tensor<T> conditioned = concat_channels<T>({out.first, out.uncertainty});
  out.second = phi2_->run(out.first, conditioned, counter).image;
  out.fused = (*fusion_)({out.first, out.second});
  return out;
}

template <typename T>
NamedTensors<T> CascadeModel<T>::parameters() const {
  NamedTensors<T> out = phi1_.parameters("phi1.");
  if (phi2_) {
    for (auto& p : phi2_->parameters("phi2.")) out.push_back(std::move(p));
  }
  if (fusion_) {
    out.emplace_back("cascade_fusion.weight", fusion_->weight());
    out.emplace_back("cascade_fusion.bias", fusion_->bias());
  }
  return out;
}

template <typename T>
NamedBuffers<T> CascadeModel<T>::buffers() {
  NamedBuffers<T> out = phi1_.buffers("phi1.");
  if (phi2_) {
    for (auto& b : phi2_->buffers("phi2.")) out.push_back(b);
  }
  return out;
}

template <typename T>
Tensor<T> spfilt_forward(FilterStage<T>& stage, const Tensor<T>& rainy) {
  return stage.run(rainy, rainy).image;
}

template <typename T>
CascadeOutput<T> ucpfilt_forward(CascadeModel<T>& model, const Tensor<T>& rainy) {
  return model.forward(rainy);
}

template class PredictiveNet<float>;
template class PredictiveNet<double>;
template class FilterStage<float>;
template class FilterStage<double>;
template class CascadeModel<float>;
template class CascadeModel<double>;
template Tensor<float> spfilt_forward(FilterStage<float>&, const Tensor<float>&);
template Tensor<double> spfilt_forward(FilterStage<double>&, const Tensor<double>&);
template CascadeOutput<float> ucpfilt_forward(CascadeModel<float>&, const Tensor<float>&);
template CascadeOutput<double> ucpfilt_forward(CascadeModel<double>&, const Tensor<double>&);

}  // namespace derain
