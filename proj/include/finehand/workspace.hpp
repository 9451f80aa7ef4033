#pragma once

// Pipeline stages over an on-disk workspace, shared by the CLI and the
// end-to-end checks.
//
// Layout under a data root:
//   synth/        generated dataset (dataset.json, frames/, keypoints/, handshape_truth.jsonl)
//   patches/      extracted hand patches, one tree per video, plus videos.json
//   store/        labels.jsonl, ledger.json, catalogue.json
//   models/       embedder_iter<k>.ckpt, signs/
//   results/      <experiment>/<axis>.{json,txt,svg}
//   embeddings/   <video_id>/<side>.npy
// Each stage writes a manifest.<stage>.json next to its outputs.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finehand/embedder.hpp"
#include "finehand/eval_harness.hpp"
#include "finehand/handshape_store.hpp"
#include "finehand/pose_ingest.hpp"
#include "finehand/sequence_model.hpp"
#include "finehand/synth_data.hpp"

namespace finehand {

inline constexpr const char* kVersion = "0.3.0";

using Logger = std::function<void(const std::string&)>;

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path synth() const { return root / "synth"; }
  std::filesystem::path patches() const { return root / "patches"; }
  std::filesystem::path store() const { return root / "store"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path results() const { return root / "results"; }
  std::filesystem::path embeddings() const { return root / "embeddings"; }
  std::filesystem::path embedder_checkpoint(int iteration) const;
};

nlohmann::json crop_config_to_json(const CropConfig& c);
CropConfig crop_config_from_json(const nlohmann::json& j, CropConfig base = {});

/// FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

/// Writes <dir>/manifest.<stage>.json with inputs, config, its hash, seed
/// and version.
void write_manifest(const std::filesystem::path& dir, const std::string& stage, const nlohmann::json& inputs,
                    const nlohmann::json& config, std::uint64_t seed);

// --- stages ---------------------------------------------------------------

/// Reads <dataset>/dataset.json, crops every video and writes the patch tree
/// plus <out>/videos.json. Returns the video ids in dataset order.
std::vector<std::string> extract_dataset(const std::filesystem::path& dataset, const std::filesystem::path& out,
                                         const CropConfig& config, const Logger& log = {});

std::vector<std::string> list_videos(const std::filesystem::path& patches);
std::vector<GestureSample> load_samples(const std::filesystem::path& patches);

/// Every `stride`-th video (in sorted id order), starting from the first.
std::vector<std::string> manual_subset(std::vector<std::string> video_ids, double fraction);

/// Label records as embedder training input, reading the patch images.
std::vector<LabeledPatch> labeled_pool(const HandshapeStore& store, const std::filesystem::path& patches,
                                       int up_to_iteration);

/// Predicts every valid, not-yet-labeled patch and enqueues the confident
/// ones for review at `iteration`.
PredictionIngestReport predict_shapes(const Embedder& embedder, std::span<const GestureSample> samples,
                                      HandshapeStore& store, double threshold, int iteration);

/// Iteration 0 is the untrained initialization. Later iterations start from
/// `init` (when given) and fine-tune on the pool up to that iteration.
Embedder train_embedder_iteration(const EmbedderConfig& config, const HandshapeStore& store,
                                  const std::filesystem::path& patches, int iteration,
                                  const std::optional<std::filesystem::path>& init, const Logger& log = {});

/// Writes embeddings/<video_id>/<side>.npy for every video.
void export_embeddings(const Embedder& embedder, std::span<const GestureSample> samples,
                       const std::filesystem::path& out);

// --- whole chain ----------------------------------------------------------

struct PipelineConfig {
  std::string experiment = "synthetic";
  SynthSpec synth;
  CropConfig crop;
  EmbedderConfig embedder;
  SequenceModelConfig sequence;
  double manual_fraction = 0.125;
  int bootstrap_iterations = 2;
  double threshold = 0.9;
  std::vector<std::string> axes{"iterations"};

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  /// Sizes that finish in minutes on one CPU core.
  static PipelineConfig desk_scale();
};

struct PipelineResult {
  std::map<std::string, ResultsTable> tables;  // by axis
  std::vector<SplitAudit> audits;
  nlohmann::json ledger;
  std::vector<nlohmann::json> iteration_log;  // per labeling iteration
};

/// synth -> extract -> manual labels (oracle) -> bootstrap iterations with
/// the oracle reviewer -> leave-one-subject-out evaluation on every axis.
PipelineResult run_synthetic_pipeline(const PipelineConfig& config, const Workspace& ws, const Logger& log = {});

}  // namespace finehand
