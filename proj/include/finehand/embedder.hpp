#pragma once

// Residual CNN hand-shape classifier whose penultimate activations serve as
// per-patch embeddings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "finehand/handshape_store.hpp"
#include "finehand/nn/layers.hpp"
#include "finehand/pose_ingest.hpp"

namespace finehand {

struct EmbedderConfig {
  int num_classes = kNumHandShapeClasses;
  int embedding_dim = 2048;
  std::string backbone = "resnet-mini";
  std::vector<int> stage_channels{16, 32, 64};
  int input_size = 64;  // patches are resized to input_size^2 before the stem
  bool pretrained = false;
  std::string pretrained_path;  // backbone checkpoint loaded when pretrained
  float learning_rate = 1e-4f;
  int batch_size = 32;
  int epochs = 10;
  double validation_fraction = 0.1;
  bool mirror_left = false;
  bool augment_hflip = false;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static EmbedderConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct LabeledPatch {
  cv::Mat image;
  int class_id = 0;
  Side side = Side::kRight;
};

struct HandShapePrediction {
  PatchRef ref;
  int class_id = 0;
  std::vector<double> probabilities;
  double confidence = 0.0;
};

struct EmbedderEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> heldout_accuracy;
};

struct EmbedderTrainReport {
  std::vector<EmbedderEpoch> epochs;
  std::vector<std::string> warnings;
  std::size_t train_size = 0;
  std::size_t heldout_size = 0;
};

class Embedder {
 public:
  explicit Embedder(EmbedderConfig config);

  const EmbedderConfig& config() const { return config_; }
  bool trained() const { return trained_; }
  bool frozen() const { return frozen_; }
  /// Idempotent. Afterwards train() and apply_gradients() raise StateError.
  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }

  EmbedderTrainReport train(std::span<const LabeledPatch> pool,
                            const std::function<void(const EmbedderEpoch&)>& on_epoch = {});

  /// Requires a trained model.
  std::vector<HandShapePrediction> predict(std::span<const HandPatch> patches) const;
  HandShapePrediction predict_one(const cv::Mat& image, Side side = Side::kRight) const;

  /// (patches x embedding_dim), one row per patch.
  nn::Matrix embed(std::span<const HandPatch> patches) const;
  nn::Vector embed_one(const cv::Mat& image, Side side = Side::kRight) const;

  /// Joint training: recomputes the forward pass for `image` and
  /// backpropagates dL/d(embedding) into the backbone grads.
  void accumulate_embedding_gradient(const cv::Mat& image, Side side, const nn::Vector& d_embedding);
  void zero_grad();
  void apply_gradients(nn::Adam& optimizer, float scale);

  std::uint64_t checksum() const;
  std::vector<nn::Param*> parameters();
  std::vector<const nn::Param*> parameters() const;

  void save(const std::filesystem::path& path) const;
  static Embedder load(const std::filesystem::path& path);

 private:
  struct StageCache {
    int h = 0, w = 0;  // spatial size inside the stage
    nn::Matrix down_cols, down_out;
    nn::Matrix block_in, a_cols, a_out, b_cols, block_out;
  };
  struct Cache {
    nn::Matrix stem_cols, stem_out;
    std::vector<StageCache> stages;
    nn::Matrix pooled, embedding;
  };

  nn::Matrix to_input(const cv::Mat& image, Side side, bool flip) const;
  /// Returns logits; embedding written to cache (or to `embedding_out` when no cache).
  nn::Matrix forward(const nn::Matrix& input, Cache* cache, nn::Vector* embedding_out) const;
  void backward(const Cache& cache, const nn::Matrix& d_logits, const nn::Matrix* d_embedding);
  void load_backbone(const std::filesystem::path& path);

  EmbedderConfig config_;
  nn::Conv3x3 stem_;
  std::vector<nn::Conv3x3> down_;  // one per stage after the first
  std::vector<nn::Conv3x3> res_a_, res_b_;
  nn::Linear fc_embed_;
  nn::Linear fc_class_;
  bool trained_ = false;
  bool frozen_ = false;
};

}  // namespace finehand
