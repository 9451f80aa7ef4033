#pragma once

// Deterministic synthetic sign-gesture videos built from procedurally drawn
// hand-shape glyphs, with matching keypoint files and per-frame ground truth.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "finehand/handshape_store.hpp"
#include "finehand/pose_ingest.hpp"

namespace finehand {

struct SynthSpec {
  int num_sign_classes = 8;
  int num_subjects = 6;
  int num_handshape_classes = 10;  // includes the garbage and rest analogues
  int frames_per_video = 30;
  int patch_size = 32;
  std::uint64_t seed = 7;
  double subject_style_jitter = 0.3;
  int repetitions = 3;  // videos per (subject, sign)
  int frame_size = 128;
  int glyph_size = 40;
  double undetected_rate = 0.0;  // fraction of hand observations with zero keypoint confidence

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
  /// Throws InputError for degenerate specs, including more shape classes
  /// than there are renderable glyphs.
  void validate() const;
};

/// Number of distinct glyphs the renderer can draw (garbage and rest included).
int renderable_glyph_count();

/// Shape class ids in the 41-class catalogue: 0 garbage, 1 rest-position,
/// synthetic shape k >= 2 maps to catalogue id k.
struct SynthVideoInfo {
  std::string video_id;
  std::string subject;
  int subject_index = 0;
  int sign_class = 0;
  int repetition = 0;
  int num_frames = 0;
};

struct FrameTruth {
  int shape_class = 0;   // catalogue id
  CropBox glyph_box;     // unclamped square the glyph was drawn into
  bool detected = true;  // false when keypoints were zeroed
};

struct SynthVideo {
  SynthVideoInfo info;
  std::vector<cv::Mat> frames;
  std::vector<int> frame_indices;
  PoseDocument poses;
  std::vector<FrameTruth> left_truth;
  std::vector<FrameTruth> right_truth;
};

class SynthGenerator {
 public:
  explicit SynthGenerator(SynthSpec spec);

  const SynthSpec& spec() const { return spec_; }
  const std::vector<SynthVideoInfo>& videos() const { return videos_; }
  /// Shape schedule (catalogue ids before per-video timing) for a sign.
  std::pair<std::vector<int>, std::vector<int>> sign_shapes(int sign_class) const;

  /// Renders one video. Pure function of (spec, index).
  SynthVideo render(std::size_t video_index) const;

  /// Draws one glyph patch directly (no pose crop). Used for separability checks.
  cv::Mat render_glyph_patch(int shape_class, int subject_index, std::uint64_t sample_seed) const;

 private:
  struct SubjectStyle {
    cv::Scalar skin;
    cv::Scalar background;
    cv::Scalar clothing;
    double rotation_bias = 0.0;  // radians
    double scale_bias = 1.0;
    double thickness_bias = 1.0;
  };
  struct GlyphPose {
    double cx = 0, cy = 0, angle = 0, scale = 1;
  };

  void draw_glyph(cv::Mat& canvas, int shape_class, const GlyphPose& pose, const SubjectStyle& style,
                  std::uint64_t seed) const;
  std::vector<Keypoint> glyph_keypoints(int shape_class, const GlyphPose& pose, std::uint64_t seed) const;

  SynthSpec spec_;
  std::vector<SynthVideoInfo> videos_;
  std::vector<SubjectStyle> styles_;
};

/// Writes spec.json, dataset.json, frames/<video>/<i>.png,
/// keypoints/<video>.json and handshape_truth.jsonl under `root`.
void write_synth_dataset(const SynthGenerator& generator, const std::filesystem::path& root);

/// Scripted reviewer answering from ground truth.
class OracleAnnotator {
 public:
  OracleAnnotator() = default;
  explicit OracleAnnotator(std::map<PatchRef, int> truth) : truth_(std::move(truth)) {}
  static OracleAnnotator from_truth_file(const std::filesystem::path& path);
  static OracleAnnotator from_generator(const SynthGenerator& generator);

  void add(const PatchRef& ref, int class_id) { truth_[ref] = class_id; }
  std::optional<int> label(const PatchRef& ref) const;
  /// Manual labels for every known patch of the given videos.
  std::vector<std::pair<PatchRef, int>> manual_labels(std::span<const std::string> video_ids) const;
  /// Confirms correct predictions, relabels wrong ones, rejects unknown patches.
  std::vector<Decision> review(std::span<const PendingItem> items) const;

 private:
  std::map<PatchRef, int> truth_;
};

}  // namespace finehand
