#pragma once

// Hand-patch extraction from 2D pose keypoints.

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "finehand/types.hpp"

namespace finehand {

inline constexpr std::size_t kHandKeypoints = 21;

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;
  bool operator==(const Keypoint&) const = default;
};

struct PoseFrame {
  int frame_index = 0;
  std::vector<Keypoint> body;
  std::vector<Keypoint> left_hand;   // kHandKeypoints entries
  std::vector<Keypoint> right_hand;  // kHandKeypoints entries

  const std::vector<Keypoint>& hand(Side side) const { return side == Side::kLeft ? left_hand : right_hand; }
  bool operator==(const PoseFrame&) const = default;
};

/// Throws InputError on non-finite coordinates, confidences outside [0,1],
/// a negative frame index, or hand lists that are not 21 long.
void validate(const PoseFrame& frame);

/// One keypoint file: all pose frames of one video.
struct PoseDocument {
  std::string video_id;
  std::vector<PoseFrame> frames;
};

PoseDocument parse_pose_document(const nlohmann::json& doc);
nlohmann::json to_json(const PoseDocument& doc);
PoseDocument read_pose_document(const std::filesystem::path& path);
void write_pose_document(const std::filesystem::path& path, const PoseDocument& doc);

/// Half-open pixel box [x0, x1) x [y0, y1).
struct CropBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long long area() const { return static_cast<long long>(width()) * height(); }
  bool operator==(const CropBox&) const = default;
};

double intersection_over_union(const CropBox& a, const CropBox& b);

struct CropConfig {
  double scale = 2.2;
  int min_side = 32;
  int patch_size = 224;
  double kp_conf_threshold = 0.1;
  int min_valid_kp = 4;
};

/// Square box centered at the centroid of confident keypoints, side
/// max(min_side, ceil(scale * max(span_x, span_y))). Returns nullopt when
/// fewer than min_valid_kp keypoints pass the confidence threshold, or when
/// clamping to `bounds` leaves nothing.
std::optional<CropBox> compute_crop_box(std::span<const Keypoint> hand_keypoints, const CropConfig& config,
                                        std::optional<cv::Size> bounds = std::nullopt);

/// Intersection of `box` with the image rectangle; nullopt if empty.
std::optional<CropBox> clamp_box(const CropBox& box, cv::Size bounds);

struct HandPatch {
  PatchRef ref;
  cv::Mat image;  // patch_size x patch_size, CV_8UC3
  CropBox crop_box;
  bool valid = false;
};

/// Crops (after clamping) and resizes to patch_size^2. A missing box yields an
/// all-zero patch flagged invalid.
HandPatch crop_hand(const cv::Mat& frame, const std::optional<CropBox>& box, int patch_size, PatchRef ref = {});

struct GestureSample {
  std::string video_id;
  std::string subject;
  int sign_class = -1;
  std::vector<int> frame_indices;
  std::vector<HandPatch> left;
  std::vector<HandPatch> right;

  const std::vector<HandPatch>& hand(Side side) const { return side == Side::kLeft ? left : right; }
  std::size_t num_frames() const { return frame_indices.size(); }
};

/// Crops both hands from every frame. `frame_indices[i]` names frames[i];
/// pose frames are matched by frame_index and may be missing.
GestureSample extract_gesture(const std::string& video_id, std::span<const cv::Mat> frames,
                              std::span<const int> frame_indices, std::span<const PoseFrame> poses,
                              const CropConfig& config);

/// Numbered image files in `dir`, sorted by number. Returns (index, path).
std::vector<std::pair<int, std::filesystem::path>> list_numbered_images(const std::filesystem::path& dir);

/// Writes `<root>/<video_id>/<side>/<frame_index>.png` for every patch plus
/// `<root>/<video_id>/index.json` recording validity and crop boxes.
void write_patch_tree(const std::filesystem::path& root, const GestureSample& sample);

/// Reads back what write_patch_tree produced.
GestureSample read_patch_tree(const std::filesystem::path& root, const std::string& video_id);

/// Loads one patch image; throws InputError if missing.
cv::Mat read_patch_image(const std::filesystem::path& root, const PatchRef& ref);

}  // namespace finehand
