#pragma once

// Per-hand LSTM sign classifier over hand-shape embedding sequences, with
// late (mean/max) or joint-head (concat) fusion of the two hands.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "finehand/embedder.hpp"
#include "finehand/nn/layers.hpp"
#include "finehand/types.hpp"

namespace finehand {

enum class FusionMode { kMean, kMax, kConcat };
std::string_view to_string(FusionMode mode);
FusionMode fusion_from_string(std::string_view s);

struct SequenceModelConfig {
  int input_dim = 2048;
  int num_layers = 2;
  int hidden_size = 512;
  int time_steps = 20;
  int num_classes = 51;
  int batch_size = 64;
  float learning_rate = 1e-4f;
  FusionMode fusion = FusionMode::kMean;
  bool filter_uninformative = false;
  int max_epochs = 200;
  int patience = 10;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static SequenceModelConfig from_json(const nlohmann::json& j);
  void validate() const;
};

/// indices[i] = floor(i * F / T). Throws InputError when F or T is zero.
std::vector<int> sample_uniform(int num_frames, int time_steps);

/// Positions of frames whose predicted shape is neither garbage nor
/// rest-position. Identity when disabled; falls back to every frame when the
/// filter would remove them all.
std::vector<std::size_t> informative_frames(std::span<const int> predicted_shapes, int garbage_id, int rest_id,
                                            bool enabled);

template <typename T>
std::vector<T> filter_uninformative(std::span<const T> sequence, std::span<const int> predicted_shapes,
                                    int garbage_id, int rest_id, bool enabled) {
  if (sequence.size() != predicted_shapes.size()) throw InputError("predictions not aligned with frames");
  std::vector<T> out;
  for (std::size_t i : informative_frames(predicted_shapes, garbage_id, rest_id, enabled)) out.push_back(sequence[i]);
  return out;
}

/// Elementwise mean or max of two logit vectors. Concat fusion needs a joint
/// head and is rejected here.
std::vector<double> fuse(std::span<const double> left, std::span<const double> right, FusionMode mode);

/// Index of the largest value; the lowest index wins ties.
int argmax(std::span<const double> values);

inline constexpr double kProbabilityEpsilon = 1e-12;

/// L = -(1/N) sum_i sum_j y_ij log(max(p_ij, eps)); rows are samples.
double cross_entropy(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& one_hot);
/// dL/dp_ij = -y_ij / (N max(p_ij, eps)).
Eigen::MatrixXd cross_entropy_grad(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& one_hot);

struct EmbeddingSequence {
  std::string video_id;
  Side side = Side::kRight;
  nn::Matrix matrix;  // T x D, one row per sampled frame
};

/// One training/evaluation item. The patch vectors (T sampled images per
/// hand) are only needed when the embedder is trained jointly.
struct SignExample {
  std::string video_id;
  std::string subject;
  int label = -1;
  nn::Matrix left;   // T x D
  nn::Matrix right;  // T x D
  std::vector<cv::Mat> left_patches;
  std::vector<cv::Mat> right_patches;
};

struct SignPrediction {
  std::string video_id;
  std::vector<double> left_logits;
  std::vector<double> right_logits;
  std::vector<double> fused_logits;
  int predicted_class = 0;
};

struct SignEpoch {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> val_accuracy;
};

struct SignTrainReport {
  std::vector<SignEpoch> epochs;
  int best_epoch = 0;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
};

class SignClassifier {
 public:
  explicit SignClassifier(SequenceModelConfig config);

  const SequenceModelConfig& config() const { return config_; }

  /// Final-layer hidden state after the last step (hidden_size reals).
  nn::Vector encode(const nn::Matrix& sequence, Side side) const;

  /// Trains both hand networks (or the concat model) on `examples`. When
  /// `joint_embedder` is given and not frozen, its parameters are updated
  /// from the sequence loss through the per-frame patches.
  SignTrainReport train(std::span<const SignExample> examples, Embedder* joint_embedder = nullptr,
                        const std::function<void(const SignEpoch&)>& on_epoch = {});

  SignPrediction predict(const SignExample& example) const;
  /// Same as predict() with an explicit fusion mode (mean/max need the
  /// per-hand heads, concat needs the joint head).
  SignPrediction predict(const SignExample& example, FusionMode mode) const;

  bool has_joint_head() const { return config_.fusion == FusionMode::kConcat; }

  std::uint64_t checksum() const;
  void save(const std::filesystem::path& path) const;
  static SignClassifier load(const std::filesystem::path& path);

 private:
  std::vector<nn::Param*> parameters();
  std::vector<const nn::Param*> parameters() const;
  void check_shape(const nn::Matrix& m) const;
  double train_batch(std::span<const SignExample> examples, std::span<const std::size_t> batch,
                     Embedder* joint_embedder, nn::Adam& optimizer, nn::Adam* embedder_optimizer);
  SignPrediction predict_with(const SignExample& example, FusionMode mode, const Embedder* embedder) const;
  nn::Matrix sequence_for(const SignExample& example, Side side, const Embedder* embedder) const;

  SequenceModelConfig config_;
  nn::Lstm left_encoder_, right_encoder_;
  nn::Linear left_head_, right_head_;  // per-hand modes
  nn::Linear joint_head_;              // concat mode
};

}  // namespace finehand
