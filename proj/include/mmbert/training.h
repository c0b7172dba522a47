#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmbert/data.h"
#include "mmbert/model.h"
#include "mmbert/tensor.h"
#include "mmbert/tokenizer.h"
#include "mmbert/vision.h"

namespace mmbert {

// ---- optimizer ----

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Bias-corrected Adam over every named parameter, which must all carry a
// gradient. Gradients are cleared afterwards.
void adam_step(const NamedTensors& params, AdamState& state, double lr);

// Scales gradients so their global L2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(const NamedTensors& params, double max_norm);

// ---- schedule ----

struct PlateauConfig {
  std::size_t patience = 5;
  double factor = 0.1;
  double min_lr = 1e-7;

  void validate() const;
};

// Learning rate after observing the validation history (one entry per epoch).
double plateau_schedule(std::span<const double> history, double base_lr, const PlateauConfig& cfg);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab;
  std::vector<std::string> answers;
  std::map<std::string, std::string> meta;
  NamedTensors tensors;
  std::uint64_t epoch = 0;
  double best_val_loss = 0.0;
  std::string rng_state;
};

// Snapshot of the model's parameter values (deep copy).
Checkpoint capture(const Model& model, const Vocab& vocab, const AnswerSpace* answers);
// Builds a model with the checkpoint's configuration and values.
Model instantiate(const Checkpoint& ckpt);
// Copies every parameter whose name starts with one of the prefixes from the
// checkpoint into the model; shapes must agree.
void load_weights(Model& model, const Checkpoint& ckpt, std::span<const std::string_view> prefixes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);
// When expected is given, its fingerprint must match the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source,
                            const ModelConfig* expected = nullptr);

// ---- training loops ----

enum class Variant { kGeneral, kExclusive, kNonPretrained };
std::string_view variant_name(Variant v);
std::optional<Variant> parse_variant(std::string_view name);

struct TrainConfig {
  double lr = 2e-5;
  PlateauConfig plateau;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 60;
  std::size_t early_stop = 0;  // epochs without improvement; 0 = off
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  double val_fraction = 0.1;  // used when no validation split is supplied
  AugmentConfig augment;
  MaskPolicy mask;
  Variant variant = Variant::kGeneral;
  std::size_t category = 0;  // exclusive variant only
  std::ostream* log = nullptr;

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();
  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochStats> history;
};

// Decoded images, keyed by path, so each file is read once per run.
class ImageCache {
 public:
  explicit ImageCache(std::size_t input_size) : input_size_(input_size) {}
  const Image& get(const std::filesystem::path& path);

 private:
  std::size_t input_size_;
  std::map<std::string, Image> images_;
};

// Masked-keyword pretraining. An empty validation set triggers a seeded
// val_fraction split of the training records.
TrainResult pretrain(std::span<const CaptionRecord> train, std::span<const CaptionRecord> val,
                     const Vocab& vocab, const ModelConfig& model_cfg, const TrainConfig& cfg,
                     ImageCache& images);

// Answer classification. init == nullptr trains from scratch; otherwise the
// vision, embedding and encoder weights are taken from init.
TrainResult finetune(std::span<const VqaRecord> train, std::span<const VqaRecord> val,
                     const AnswerSpace& answers, const Vocab& vocab, const Checkpoint* init,
                     const ModelConfig& model_cfg, const TrainConfig& cfg, ImageCache& images);

// Text-only question-category classifier used to route questions to
// per-category models.
TrainResult train_router(std::span<const VqaRecord> train, std::span<const VqaRecord> val,
                         const Vocab& vocab, const ModelConfig& model_cfg, const TrainConfig& cfg);

// Records of one category; fails when none remain.
std::vector<VqaRecord> filter_category(std::span<const VqaRecord> records, std::size_t category);

struct MlmScore {
  double accuracy = 0.0;
  std::size_t masked = 0;
  double loss = 0.0;
};

enum class ImageSource { kReal, kNoise };

// Masks every keyword of every caption and scores the argmax predictions.
MlmScore evaluate_mlm(const Model& model, const Vocab& vocab, std::span<const CaptionRecord> records,
                      ImageCache& images, ImageSource source = ImageSource::kReal,
                      std::uint64_t noise_seed = 0);

// Uniform [0,1) noise image of the given size.
Image noise_image(std::size_t size, Rng& rng);

}  // namespace mmbert
