#pragma once

// Leave-one-subject-out evaluation and the ablation grids (labeling
// iterations, hand/fusion choice, frozen vs joint embedder).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finehand/embedder.hpp"
#include "finehand/pose_ingest.hpp"
#include "finehand/sequence_model.hpp"

namespace finehand {

struct SplitPlan {
  std::string test_subject;
  std::vector<std::string> train_subjects;
};

/// One plan per distinct subject, in sorted order. Needs >= 2 subjects.
std::vector<SplitPlan> make_splits(std::span<const std::string> subjects);

/// correct / total. Throws InputError on empty or misaligned input.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

struct ResultsRow {
  std::string name;
  std::vector<double> per_subject;  // aligned with ResultsTable::subjects
  double average = 0.0;
};

struct ResultsTable {
  std::string experiment;
  std::string axis;
  std::vector<std::string> subjects;
  std::vector<ResultsRow> rows;
  nlohmann::json metadata = nlohmann::json::object();

  /// Appends a row; the average is the unweighted mean over subjects.
  void add_row(std::string name, std::vector<double> per_subject);
  const ResultsRow& row(const std::string& name) const;

  nlohmann::json to_json() const;
  static ResultsTable from_json(const nlohmann::json& j);
  std::string render_text() const;
  /// Per-subject grouped bar chart.
  std::string render_svg() const;
  /// Writes <dir>/<axis>.json, .txt and .svg.
  void write(const std::filesystem::path& dir) const;
};

enum class AblationAxis { kIterations, kHands, kJoint };
std::string_view to_string(AblationAxis axis);
AblationAxis axis_from_string(std::string_view s);

/// A video's embeddings for every frame plus (optional) shape predictions.
struct EmbeddedVideo {
  std::string video_id;
  std::string subject;
  int label = -1;
  nn::Matrix left;   // F x D
  nn::Matrix right;  // F x D
  std::vector<int> left_shapes;   // empty when the embedder cannot predict
  std::vector<int> right_shapes;
};

EmbeddedVideo embed_video(const GestureSample& sample, const Embedder& embedder, bool with_predictions);

/// Optional shape filtering, then uniform sampling to T rows per hand. When
/// `patches` is given the sampled patch images are attached for joint training.
SignExample make_example(const EmbeddedVideo& video, const SequenceModelConfig& config, int garbage_id, int rest_id,
                         const GestureSample* patches = nullptr);

struct AblationConfig {
  std::string experiment = "default";
  SequenceModelConfig sequence;
  /// Embedder checkpoint per labeling iteration (0 = no fine-tuning).
  std::map<int, std::filesystem::path> embedder_checkpoints;
  /// Iterations compared on the iterations axis.
  std::vector<int> iterations{0, 1, 2, 3};
  /// Embedder used on the hands and joint axes.
  int final_iteration = 3;
  int garbage_id = 0;
  int rest_id = 1;
  /// When non-empty, only these test subjects are evaluated (others still train).
  std::vector<std::string> only_subjects;
  std::function<void(const std::string&)> log;
};

/// Ids of training videos per split, recorded for the leakage audit.
struct SplitAudit {
  std::string test_subject;
  std::size_t train_videos = 0;
  std::size_t test_videos = 0;
  std::size_t violations = 0;  // training videos whose subject is the test subject
};

/// Runs every split for one ablation axis. Throws StateError naming any
/// missing embedder checkpoint; throws std::logic_error if a split leaks
/// test-subject videos into training.
ResultsTable run_ablation(std::span<const GestureSample> dataset, AblationAxis axis, const AblationConfig& config,
                          std::vector<SplitAudit>* audits = nullptr);

/// Leakage check: counts training examples whose subject equals the test subject.
SplitAudit audit_split(const SplitPlan& plan, std::span<const SignExample> train, std::span<const SignExample> test);

}  // namespace finehand
