#include "finehand/pose_ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void validate_keypoints(const std::vector<Keypoint>& kps, const char* what) {
  for (const auto& kp : kps) {
    if (!std::isfinite(kp.x) || !std::isfinite(kp.y)) {
      throw InputError(std::string("non-finite coordinate in ") + what);
    }
    if (!(kp.confidence >= 0.0 && kp.confidence <= 1.0)) {
      throw InputError(std::string("confidence outside [0,1] in ") + what);
    }
  }
}

std::vector<Keypoint> parse_keypoints(const json& arr, const char* what) {
  if (!arr.is_array()) throw InputError(std::string(what) + " must be an array");
  std::vector<Keypoint> out;
  out.reserve(arr.size());
  for (const auto& entry : arr) {
    if (!entry.is_array() || entry.size() != 3) {
      throw InputError(std::string(what) + " entries must be [x, y, confidence]");
    }
    out.push_back({entry[0].get<double>(), entry[1].get<double>(), entry[2].get<double>()});
  }
  return out;
}

json keypoints_to_json(const std::vector<Keypoint>& kps) {
  json arr = json::array();
  for (const auto& kp : kps) arr.push_back({kp.x, kp.y, kp.confidence});
  return arr;
}

}  // namespace

void validate(const PoseFrame& frame) {
  if (frame.frame_index < 0) throw InputError("negative frame_index");
  if (frame.left_hand.size() != kHandKeypoints) throw InputError("left_hand must have 21 keypoints");
  if (frame.right_hand.size() != kHandKeypoints) throw InputError("right_hand must have 21 keypoints");
  validate_keypoints(frame.body, "body");
  validate_keypoints(frame.left_hand, "left_hand");
  validate_keypoints(frame.right_hand, "right_hand");
}

PoseDocument parse_pose_document(const json& doc) {
  PoseDocument out;
  try {
    out.video_id = doc.at("video_id").get<std::string>();
    for (const auto& f : doc.at("frames")) {
      PoseFrame frame;
      frame.frame_index = f.at("frame_index").get<int>();
      frame.body = parse_keypoints(f.value("body", json::array()), "body");
      frame.left_hand = parse_keypoints(f.at("left_hand"), "left_hand");
      frame.right_hand = parse_keypoints(f.at("right_hand"), "right_hand");
      validate(frame);
      out.frames.push_back(std::move(frame));
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed keypoint document: ") + e.what());
  }
  return out;
}

json to_json(const PoseDocument& doc) {
  json frames = json::array();
  for (const auto& f : doc.frames) {
    frames.push_back({{"frame_index", f.frame_index},
                      {"body", keypoints_to_json(f.body)},
                      {"left_hand", keypoints_to_json(f.left_hand)},
                      {"right_hand", keypoints_to_json(f.right_hand)}});
  }
  return {{"video_id", doc.video_id}, {"frames", std::move(frames)}};
}

PoseDocument read_pose_document(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open keypoint file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw InputError("cannot parse " + path.string() + ": " + e.what());
  }
  return parse_pose_document(doc);
}

void write_pose_document(const fs::path& path, const PoseDocument& doc) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json(doc).dump() << '\n';
}

double intersection_over_union(const CropBox& a, const CropBox& b) {
  const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const long long inter = (ix1 > ix0 && iy1 > iy0) ? static_cast<long long>(ix1 - ix0) * (iy1 - iy0) : 0;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::optional<CropBox> clamp_box(const CropBox& box, cv::Size bounds) {
  CropBox c{std::max(box.x0, 0), std::max(box.y0, 0), std::min(box.x1, bounds.width),
            std::min(box.y1, bounds.height)};
  if (c.x1 <= c.x0 || c.y1 <= c.y0) return std::nullopt;
  return c;
}

std::optional<CropBox> compute_crop_box(std::span<const Keypoint> hand_keypoints, const CropConfig& config,
                                        std::optional<cv::Size> bounds) {
  if (hand_keypoints.size() != kHandKeypoints) {
    throw InputError("hand keypoint list must have 21 entries, got " + std::to_string(hand_keypoints.size()));
  }
  if (!(config.scale > 0.0)) throw InputError("crop scale must be positive");
  if (config.min_side <= 0) throw InputError("min_side must be positive");

  double sum_x = 0, sum_y = 0;
  double min_x = INFINITY, max_x = -INFINITY, min_y = INFINITY, max_y = -INFINITY;
  int n = 0;
  for (const auto& kp : hand_keypoints) {
    if (!std::isfinite(kp.x) || !std::isfinite(kp.y)) throw InputError("non-finite hand keypoint");
    if (kp.confidence < config.kp_conf_threshold) continue;
    ++n;
    sum_x += kp.x;
    sum_y += kp.y;
    min_x = std::min(min_x, kp.x);
    max_x = std::max(max_x, kp.x);
    min_y = std::min(min_y, kp.y);
    max_y = std::max(max_y, kp.y);
  }
  if (n == 0 || n < config.min_valid_kp) return std::nullopt;

  const double cx = sum_x / n, cy = sum_y / n;
  const double span = std::max(max_x - min_x, max_y - min_y);
  // Guard against ceil(2.2*40) landing on 89 through representation error.
  const int side = std::max(config.min_side, static_cast<int>(std::ceil(config.scale * span - 1e-9)));
  CropBox box;
  box.x0 = static_cast<int>(std::lround(cx - side / 2.0));
  box.y0 = static_cast<int>(std::lround(cy - side / 2.0));
  box.x1 = box.x0 + side;
  box.y1 = box.y0 + side;
  if (bounds) return clamp_box(box, *bounds);
  return box;
}

HandPatch crop_hand(const cv::Mat& frame, const std::optional<CropBox>& box, int patch_size, PatchRef ref) {
  if (frame.empty()) throw InputError("empty frame image");
  if (patch_size <= 0) throw InputError("patch_size must be positive");
  HandPatch patch;
  patch.ref = std::move(ref);
  patch.image = cv::Mat::zeros(patch_size, patch_size, CV_8UC3);
  if (!box) return patch;
  const auto clamped = clamp_box(*box, frame.size());
  if (!clamped) return patch;

  cv::Mat src = frame;
  if (src.channels() == 1) cv::cvtColor(frame, src, cv::COLOR_GRAY2BGR);
  const cv::Rect roi(clamped->x0, clamped->y0, clamped->width(), clamped->height());
  cv::resize(src(roi), patch.image, cv::Size(patch_size, patch_size), 0, 0, cv::INTER_LINEAR);
  patch.crop_box = *clamped;
  patch.valid = true;
  return patch;
}

GestureSample extract_gesture(const std::string& video_id, std::span<const cv::Mat> frames,
                              std::span<const int> frame_indices, std::span<const PoseFrame> poses,
                              const CropConfig& config) {
  if (frames.empty()) throw InputError("video " + video_id + " has zero frames");
  if (frames.size() != frame_indices.size()) throw InputError("frame/index count mismatch");

  std::map<int, const PoseFrame*> by_index;
  for (const auto& p : poses) by_index[p.frame_index] = &p;

  GestureSample sample;
  sample.video_id = video_id;
  sample.frame_indices.assign(frame_indices.begin(), frame_indices.end());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const int fi = frame_indices[i];
    const auto it = by_index.find(fi);
    for (Side side : {Side::kLeft, Side::kRight}) {
      std::optional<CropBox> box;
      if (it != by_index.end()) box = compute_crop_box(it->second->hand(side), config, frames[i].size());
      auto patch = crop_hand(frames[i], box, config.patch_size, PatchRef{video_id, fi, side});
      (side == Side::kLeft ? sample.left : sample.right).push_back(std::move(patch));
    }
  }
  return sample;
}

std::vector<std::pair<int, fs::path>> list_numbered_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("frame directory not found: " + dir.string());
  std::vector<std::pair<int, fs::path>> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext != ".png" && ext != ".jpg" && ext != ".jpeg" && ext != ".bmp") continue;
    const auto stem = entry.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); })) {
      continue;
    }
    out.emplace_back(std::stoi(stem), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_patch_tree(const fs::path& root, const GestureSample& sample) {
  json index;
  index["video_id"] = sample.video_id;
  index["subject"] = sample.subject;
  index["sign_class"] = sample.sign_class;
  index["frame_indices"] = sample.frame_indices;
  for (Side side : {Side::kLeft, Side::kRight}) {
    const auto dir = root / sample.video_id / std::string(to_string(side));
    fs::create_directories(dir);
    json entries = json::array();
    for (const auto& patch : sample.hand(side)) {
      const auto path = dir / (std::to_string(patch.ref.frame_index) + ".png");
      if (!cv::imwrite(path.string(), patch.image)) throw std::runtime_error("failed to write " + path.string());
      const auto& b = patch.crop_box;
      entries.push_back({{"frame_index", patch.ref.frame_index},
                         {"valid", patch.valid},
                         {"crop_box", {b.x0, b.y0, b.x1, b.y1}}});
    }
    index[std::string(to_string(side))] = std::move(entries);
  }
  std::ofstream(root / sample.video_id / "index.json") << index.dump(1) << '\n';
}

GestureSample read_patch_tree(const fs::path& root, const std::string& video_id) {
  const auto index_path = root / video_id / "index.json";
  std::ifstream in(index_path);
  if (!in) throw InputError("missing patch index " + index_path.string());
  json index;
  in >> index;
  GestureSample sample;
  sample.video_id = video_id;
  sample.subject = index.value("subject", std::string());
  sample.sign_class = index.value("sign_class", -1);
  sample.frame_indices = index.at("frame_indices").get<std::vector<int>>();
  for (Side side : {Side::kLeft, Side::kRight}) {
    auto& seq = side == Side::kLeft ? sample.left : sample.right;
    for (const auto& e : index.at(std::string(to_string(side)))) {
      HandPatch patch;
      patch.ref = PatchRef{video_id, e.at("frame_index").get<int>(), side};
      patch.valid = e.at("valid").get<bool>();
      const auto b = e.at("crop_box").get<std::vector<int>>();
      patch.crop_box = CropBox{b.at(0), b.at(1), b.at(2), b.at(3)};
      patch.image = read_patch_image(root, patch.ref);
      seq.push_back(std::move(patch));
    }
  }
  return sample;
}

cv::Mat read_patch_image(const fs::path& root, const PatchRef& ref) {
  const auto path = root / ref.video_id / std::string(to_string(ref.side)) / (std::to_string(ref.frame_index) + ".png");
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw InputError("missing patch image " + path.string());
  return img;
}

}  // namespace finehand
