#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "derain/config.hpp"
#include "derain/losses.hpp"
#include "derain/net.hpp"
#include "derain/rainmix.hpp"
#include "derain/rng.hpp"

namespace derain {

/// Non-finite loss, gradient or parameter.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or malformed dataset on disk.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments of one parameter tensor.
struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
};

/// One bias-corrected Adam update of `params` in place. `t` is the 1-based
/// step number after this update. Throws NumericError on a non-finite
/// gradient before touching anything.
void adam_step(std::span<float> params, std::span<const float> grads, AdamMoments& state,
               std::int64_t t, const AdamConfig& cfg);

/// Adam over a fixed list of parameter tensors. Tensors without a gradient
/// after backward are treated as having a zero gradient.
class Adam {
 public:
  Adam() = default;
  Adam(NamedTensors<float> params, AdamConfig cfg);

  /// Updates every parameter from its accumulated gradient.
  void step();
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const NamedTensors<float>& params() const { return params_; }
  std::vector<AdamMoments>& moments() { return moments_; }
  const std::vector<AdamMoments>& moments() const { return moments_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  NamedTensors<float> params_;
  std::vector<AdamMoments> moments_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

/// Procedural paired data: smooth gradients with flat shapes, plus streaks.
struct ToyDatasetSpec {
  int count = 200;
  int size = 64;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  int shapes_min = 3;
  int shapes_max = 7;
  StreakRanges streaks{.density_min = 0.01, .density_max = 0.05};

  void validate() const;
};

struct PairedSample {
  std::string name;
  Tensor<float> rainy;  // (1, 3, H, W)
  Tensor<float> clean;
};

struct PairedDataset {
  std::vector<PairedSample> train;
  std::vector<PairedSample> val;
};

/// Pair `index` of the toy set, as make_toy_dataset writes it before
/// 8-bit quantization.
PairedSample make_toy_sample(const ToyDatasetSpec& spec, int index);

/// Writes rainy/NNNN.png, clean/NNNN.png and manifest.txt under `dir`.
/// Output bytes depend only on `spec`.
void make_toy_dataset(const ToyDatasetSpec& spec, const std::filesystem::path& dir);

/// Reads a directory written by make_toy_dataset (or laid out the same way).
PairedDataset load_dataset(const std::filesystem::path& dir);

/// Every training knob. Keys of the text form are listed in docs/config.md.
struct TrainConfig {
  ModelConfig model = ModelConfig::final_design(0.125);
  LossConfig loss{};
  AdamConfig adam{};
  int batch = 8;
  int patch = 64;
  int stage1_steps = 2000;
  int stage2_steps = 2000;
  std::uint64_t seed = 0;

  bool rainmix = true;
  AugmentSpec augment{};
  int synth_layers = 50;
  double clean_background_prob = 0.5;

  /// A stage ends early when the windowed loss has not set a new best for
  /// this many steps. 0 disables the rule.
  int plateau_patience = 500;
  int loss_window = 100;
  int checkpoint_every = 0;

  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  /// When set, the dataset is generated into data_dir if it has no manifest.
  std::optional<ToyDatasetSpec> toy;

  void validate() const;
  static TrainConfig parse(KeyValueFile& kv);
  static TrainConfig from_text(const std::string& text, const std::string& source = "<config>");
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

/// Loads cfg.data_dir, generating the toy set there first when cfg.toy is
/// set and the directory has no manifest.
PairedDataset prepare_dataset(const TrainConfig& cfg);

/// Keeps large buffers on the heap between steps (glibc only; no-op
/// elsewhere). Call once before training.
void tune_allocator();

/// One optimization step. wall_ms is time since the trainer started.
struct LossRecord {
  int stage = 1;
  std::int64_t step = 0;
  double loss = 0;
  double lr = 0;
  double wall_ms = 0;

  std::string str() const;
};

struct TrainStats {
  std::uint64_t rng_draws = 0;
  std::uint64_t rainmix_draws = 0;
  std::uint64_t samples = 0;
};

struct HeldOutMetrics {
  int count = 0;
  double psnr_input = 0;
  double psnr_output = 0;
  double ssim_output = 0;
  /// First-stage output; equals psnr_output without a cascade.
  double psnr_first = 0;
};

/// Inference on one image of any size: reflect-pad to a multiple of 16,
/// run in eval mode without recording, crop back.
CascadeOutput<float> run_padded(CascadeModel<float>& model, const Tensor<float>& image);

HeldOutMetrics evaluate(CascadeModel<float>& model, const std::vector<PairedSample>& samples);

struct TrainingBatch {
  Tensor<float> input;   // (B, 3, P, P)
  Tensor<float> target;  // (B, 3, P, P)
};

/// Two-stage protocol. With a cascade, stage 1 fits phi1 alone with the
/// single-output loss and stage 2 fits everything with the cascade loss and
/// a fresh optimizer. Without one, a single stage runs for the combined
/// step budget.
class Trainer {
 public:
  Trainer(TrainConfig cfg, PairedDataset data);

  /// Runs one step of the current stage and advances stage bookkeeping.
  LossRecord step();
  bool done() const { return stage_ > last_stage(); }
  /// Steps until done(); `on_record` sees every record as it is produced.
  void run(const std::function<void(const LossRecord&)>& on_record = {});

  /// Draws the next batch the way step() does, advancing the rng.
  TrainingBatch next_batch();

  HeldOutMetrics evaluate_heldout();

  /// Model, optimizer, rng and loop state. Resuming and stepping reproduces
  /// the uninterrupted run bitwise.
  void save(const std::filesystem::path& dir) const;
  static Trainer resume(const std::filesystem::path& dir, TrainConfig cfg, PairedDataset data);

  CascadeModel<float>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int stage() const { return stage_; }
  std::int64_t global_step() const { return global_step_; }
  std::int64_t stage_step() const { return stage_step_; }
  const std::vector<LossRecord>& history() const { return history_; }
  const TrainStats& stats() const { return stats_; }
  const RainLayerSet<float>& rain_layers() const { return rain_layers_; }
  /// Held-out metrics captured when stage 1 of a cascade finished.
  const std::optional<HeldOutMetrics>& stage1_metrics() const { return stage1_metrics_; }

 private:
  int last_stage() const { return model_.cascaded() ? 2 : 1; }
  int stage_budget() const;
  void begin_stage();
  void end_stage();
  void snapshot_and_throw(const std::string& what);

  TrainConfig cfg_;
  PairedDataset data_;
  CascadeModel<float> model_;
  RainLayerSet<float> rain_layers_;
  Adam adam_;
  CountingRng rng_;
  TrainStats stats_;
  int stage_ = 1;
  std::int64_t global_step_ = 0;
  std::int64_t stage_step_ = 0;
  std::vector<double> stage_losses_;
  double best_window_ = 0;
  bool have_best_ = false;
  std::int64_t since_best_ = 0;
  std::vector<LossRecord> history_;
  std::optional<HeldOutMetrics> stage1_metrics_;
  std::chrono::steady_clock::time_point started_;
};

/// On/off combination of the three ablated components.
struct AblationVariant {
  std::string name;
  bool cascade = true;
  bool multiscale = true;
  bool rainmix = true;

  TrainConfig apply(const TrainConfig& base) const;
};

/// All 8 combinations, full model first and the all-off baseline last.
std::vector<AblationVariant> ablation_matrix();

struct AblationResult {
  AblationVariant variant;
  HeldOutMetrics metrics;
};

/// Trains every variant into out_dir/<name>/ and writes out_dir/ablation.txt.
std::vector<AblationResult> run_ablation(const TrainConfig& base, const PairedDataset& data,
                                         const std::function<void(const std::string&)>& log = {});

}  // namespace derain
