#include "finehand/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kPalmTypes = 3;
constexpr int kFingerPatterns = 8;
// Extended fingers per pattern (0 = thumb .. 4 = little finger).
const std::vector<std::vector<int>> kPatterns{{}, {2}, {1, 3}, {0, 4}, {0, 1, 2, 3, 4}, {0}, {1, 2, 3}, {3, 4}};

constexpr int kGarbage = 0;
constexpr int kRest = 1;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double deg(double d) { return d * std::numbers::pi / 180.0; }

cv::Point2d direction(double angle) { return {std::sin(angle), -std::cos(angle)}; }

double finger_angle(int finger) { return deg(-60.0 + 30.0 * finger); }

}  // namespace

int renderable_glyph_count() { return 2 + kPalmTypes * kFingerPatterns; }

json SynthSpec::to_json() const {
  return {{"num_sign_classes", num_sign_classes},
          {"num_subjects", num_subjects},
          {"num_handshape_classes", num_handshape_classes},
          {"frames_per_video", frames_per_video},
          {"patch_size", patch_size},
          {"seed", seed},
          {"subject_style_jitter", subject_style_jitter},
          {"repetitions", repetitions},
          {"frame_size", frame_size},
          {"glyph_size", glyph_size},
          {"undetected_rate", undetected_rate}};
}

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec s;
  s.num_sign_classes = j.value("num_sign_classes", s.num_sign_classes);
  s.num_subjects = j.value("num_subjects", s.num_subjects);
  s.num_handshape_classes = j.value("num_handshape_classes", s.num_handshape_classes);
  s.frames_per_video = j.value("frames_per_video", s.frames_per_video);
  s.patch_size = j.value("patch_size", s.patch_size);
  s.seed = j.value("seed", s.seed);
  s.subject_style_jitter = j.value("subject_style_jitter", s.subject_style_jitter);
  s.repetitions = j.value("repetitions", s.repetitions);
  s.frame_size = j.value("frame_size", s.frame_size);
  s.glyph_size = j.value("glyph_size", s.glyph_size);
  s.undetected_rate = j.value("undetected_rate", s.undetected_rate);
  return s;
}

void SynthSpec::validate() const {
  if (num_sign_classes < 1 || num_subjects < 1 || repetitions < 1) throw InputError("synthetic counts must be >= 1");
  if (num_handshape_classes < 3) throw InputError("need at least one shape besides garbage and rest-position");
  if (num_handshape_classes > renderable_glyph_count()) {
    throw InputError("requested " + std::to_string(num_handshape_classes) + " hand shapes but only " +
                     std::to_string(renderable_glyph_count()) + " glyphs are renderable");
  }
  if (num_handshape_classes > kNumHandShapeClasses) throw InputError("more shapes than catalogue classes");
  const int n = num_handshape_classes - 2;
  if (num_sign_classes > n * n) throw InputError("too many sign classes for distinct shape schedules");
  if (frames_per_video < 8) throw InputError("frames_per_video must be >= 8");
  if (patch_size < 8) throw InputError("patch_size must be >= 8");
  if (glyph_size < 8 || frame_size < 3 * glyph_size) throw InputError("frame_size must be at least 3x glyph_size");
  if (!(subject_style_jitter >= 0.0 && subject_style_jitter <= 1.0)) throw InputError("subject_style_jitter in [0,1]");
  if (!(undetected_rate >= 0.0 && undetected_rate < 1.0)) throw InputError("undetected_rate in [0,1)");
}

SynthGenerator::SynthGenerator(SynthSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  for (int s = 0; s < spec_.num_subjects; ++s) {
    std::mt19937_64 rng(mix(spec_.seed, 1000 + static_cast<std::uint64_t>(s)));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double j = spec_.subject_style_jitter;
    SubjectStyle st;
    // BGR skin tones
    static const cv::Scalar tones[] = {{150, 180, 225}, {110, 150, 200}, {80, 115, 165}, {60, 85, 125}};
    const cv::Scalar base = tones[static_cast<std::size_t>(s) % 4];
    st.skin = cv::Scalar(base[0] + 40 * j * u(rng), base[1] + 40 * j * u(rng), base[2] + 40 * j * u(rng));
    st.background = cv::Scalar(40 + 30 * u(rng), 45 + 30 * u(rng), 50 + 30 * u(rng));
    st.clothing = cv::Scalar(100 + 80 * u(rng), 90 + 80 * u(rng), 80 + 80 * u(rng));
    st.rotation_bias = u(rng) * j * 0.35;
    st.scale_bias = 1.0 + u(rng) * j * 0.3;
    st.thickness_bias = 1.0 + u(rng) * j * 0.5;
    styles_.push_back(st);
  }
  for (int subj = 0; subj < spec_.num_subjects; ++subj) {
    for (int sign = 0; sign < spec_.num_sign_classes; ++sign) {
      for (int rep = 0; rep < spec_.repetitions; ++rep) {
        SynthVideoInfo v;
        char id[64];
        std::snprintf(id, sizeof(id), "S%02d_G%02d_R%d", subj + 1, sign, rep);
        v.video_id = id;
        std::snprintf(id, sizeof(id), "S%02d", subj + 1);
        v.subject = id;
        v.subject_index = subj;
        v.sign_class = sign;
        v.repetition = rep;
        v.num_frames = spec_.frames_per_video;
        videos_.push_back(v);
      }
    }
  }
}

std::pair<std::vector<int>, std::vector<int>> SynthGenerator::sign_shapes(int sign_class) const {
  const int n = spec_.num_handshape_classes - 2;
  const int a = sign_class % n;
  const int q = sign_class / n;
  const int b = (q + 3 * a + 1) % n;
  std::vector<int> right{2 + a, 2 + b};
  std::vector<int> left;
  if (sign_class % 2 == 0) {
    left = {kRest, kRest};
  } else {
    const int c = (a + b + 1) % n;
    left = {2 + c, 2 + c};
  }
  return {right, left};
}

void SynthGenerator::draw_glyph(cv::Mat& canvas, int shape_class, const GlyphPose& pose, const SubjectStyle& style,
                                std::uint64_t seed) const {
  const double g = spec_.glyph_size * pose.scale;
  const cv::Point2d center(pose.cx, pose.cy);
  const int thickness = std::max(2, static_cast<int>(std::lround(0.08 * g * style.thickness_bias)));
  constexpr int shift = 4;  // sub-pixel drawing precision
  const double sc = 1 << shift;
  auto fp = [&](cv::Point2d p) { return cv::Point(static_cast<int>(std::lround(p.x * sc)), static_cast<int>(std::lround(p.y * sc))); };

  if (shape_class == kGarbage) {
    // Motion-blurred ordinary glyph.
    std::mt19937_64 rng(seed);
    const int base = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec_.num_handshape_classes - 2));
    const int side = static_cast<int>(std::ceil(1.6 * g));
    cv::Mat layer(side, side, CV_8UC3, cv::Scalar(0, 0, 0));
    cv::Mat mask(side, side, CV_8UC3, cv::Scalar(0, 0, 0));
    GlyphPose local = pose;
    local.cx = side / 2.0;
    local.cy = side / 2.0;
    SubjectStyle white = style;
    white.skin = cv::Scalar(255, 255, 255);
    draw_glyph(layer, base, local, style, seed + 1);
    draw_glyph(mask, base, local, white, seed + 1);
    const int klen = std::max(3, static_cast<int>(0.8 * g)) | 1;
    cv::Mat kernel = cv::Mat::zeros(klen, klen, CV_32F);
    const double a = std::uniform_real_distribution<double>(0, std::numbers::pi)(rng);
    const cv::Point2d d(std::cos(a), std::sin(a));
    const cv::Point2d c((klen - 1) / 2.0, (klen - 1) / 2.0);
    cv::line(kernel, cv::Point(c - d * (klen / 2.0)), cv::Point(c + d * (klen / 2.0)), cv::Scalar(1.0));
    kernel /= cv::sum(kernel)[0];
    cv::filter2D(layer, layer, -1, kernel, cv::Point(-1, -1), 0, cv::BORDER_CONSTANT);
    cv::filter2D(mask, mask, -1, kernel, cv::Point(-1, -1), 0, cv::BORDER_CONSTANT);
    const int x0 = static_cast<int>(std::lround(pose.cx - side / 2.0));
    const int y0 = static_cast<int>(std::lround(pose.cy - side / 2.0));
    for (int y = 0; y < side; ++y) {
      const int fy = y0 + y;
      if (fy < 0 || fy >= canvas.rows) continue;
      for (int x = 0; x < side; ++x) {
        const int fx = x0 + x;
        if (fx < 0 || fx >= canvas.cols) continue;
        const auto m = mask.at<cv::Vec3b>(y, x);
        const double alpha = m[0] / 255.0;
        if (alpha <= 0.0) continue;
        auto& dst = canvas.at<cv::Vec3b>(fy, fx);
        const auto src = layer.at<cv::Vec3b>(y, x);
        for (int ch = 0; ch < 3; ++ch) {
          // layer is premultiplied by the blurred mask
          dst[ch] = cv::saturate_cast<uchar>(src[ch] + (1.0 - alpha) * dst[ch]);
        }
      }
    }
    return;
  }

  if (shape_class == kRest) {
    const cv::Size axes(static_cast<int>(std::lround(0.26 * g * sc)), static_cast<int>(std::lround(0.12 * g * sc)));
    cv::ellipse(canvas, fp(center), axes, pose.angle * 180.0 / std::numbers::pi, 0, 360, style.skin, cv::FILLED,
                cv::LINE_AA, shift);
    const cv::Point2d thumb = center + direction(pose.angle - deg(90)) * (0.34 * g);
    cv::line(canvas, fp(center), fp(thumb), style.skin, thickness, cv::LINE_AA, shift);
    return;
  }

  const int k = shape_class - 2;
  const int palm = k / kFingerPatterns;
  const auto& fingers = kPatterns[static_cast<std::size_t>(k % kFingerPatterns)];
  for (int f : fingers) {
    const cv::Point2d dir = direction(pose.angle + finger_angle(f));
    cv::line(canvas, fp(center + dir * (0.10 * g)), fp(center + dir * (0.42 * g)), style.skin, thickness, cv::LINE_AA,
             shift);
  }
  switch (palm) {
    case 0:
      cv::circle(canvas, fp(center), static_cast<int>(std::lround(0.17 * g * sc)), style.skin, cv::FILLED, cv::LINE_AA,
                 shift);
      break;
    case 1: {
      std::vector<cv::Point> pts;
      for (int i = 0; i < 4; ++i) {
        pts.push_back(fp(center + direction(pose.angle + deg(45 + 90 * i)) * (0.15 * g * std::numbers::sqrt2)));
      }
      cv::fillConvexPoly(canvas, pts, style.skin, cv::LINE_AA, shift);
      break;
    }
    default:
      cv::circle(canvas, fp(center), static_cast<int>(std::lround(0.16 * g * sc)), style.skin,
                 std::max(2, static_cast<int>(std::lround(0.06 * g))), cv::LINE_AA, shift);
      break;
  }
}

std::vector<Keypoint> SynthGenerator::glyph_keypoints(int shape_class, const GlyphPose& pose,
                                                      std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.5);
  std::uniform_real_distribution<double> conf(shape_class == kGarbage ? 0.2 : 0.6, shape_class == kGarbage ? 0.5 : 0.95);
  const double g = spec_.glyph_size * pose.scale;
  const cv::Point2d center(pose.cx, pose.cy);
  std::vector<bool> extended(5, false);
  if (shape_class >= 2) {
    for (int f : kPatterns[static_cast<std::size_t>((shape_class - 2) % kFingerPatterns)]) extended[static_cast<std::size_t>(f)] = true;
  }
  std::vector<Keypoint> kps;
  auto push = [&](cv::Point2d p) { kps.push_back({p.x + noise(rng), p.y + noise(rng), conf(rng)}); };
  push(center + direction(pose.angle + std::numbers::pi) * (0.22 * g));  // wrist
  static const double kExtended[] = {0.12, 0.18, 0.24, 0.28};
  static const double kFolded[] = {0.08, 0.10, 0.10, 0.09};
  for (int f = 0; f < 5; ++f) {
    const cv::Point2d dir = direction(pose.angle + finger_angle(f));
    for (int j = 0; j < 4; ++j) {
      push(center + dir * ((extended[static_cast<std::size_t>(f)] ? kExtended[j] : kFolded[j]) * g));
    }
  }
  return kps;
}

SynthVideo SynthGenerator::render(std::size_t video_index) const {
  const auto& info = videos_.at(video_index);
  const auto& style = styles_[static_cast<std::size_t>(info.subject_index)];
  std::mt19937_64 rng(mix(spec_.seed, 0x7f000000ULL + video_index));
  std::uniform_int_distribution<int> shift(-1, 1);
  std::normal_distribution<double> rot_jitter(0.0, deg(6.0));
  std::uniform_real_distribution<double> scale_jitter(0.96, 1.04);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int F = spec_.frames_per_video;
  const int b1 = static_cast<int>(std::lround(0.15 * F)) + shift(rng);
  const int b2 = static_cast<int>(std::lround(0.50 * F)) + shift(rng);
  const int b3 = static_cast<int>(std::lround(0.85 * F)) + shift(rng);
  const auto [right_shapes, left_shapes] = sign_shapes(info.sign_class);
  const double W = spec_.frame_size, H = spec_.frame_size;
  const double phase = unit(rng) * 2.0 * std::numbers::pi;

  SynthVideo video;
  video.info = info;
  video.poses.video_id = info.video_id;
  for (int t = 0; t < F; ++t) {
    cv::Mat frame(spec_.frame_size, spec_.frame_size, CV_8UC3, style.background);
    cv::rectangle(frame, cv::Point(static_cast<int>(0.2 * W), static_cast<int>(0.3 * H)),
                  cv::Point(static_cast<int>(0.8 * W), static_cast<int>(H)), style.clothing, cv::FILLED);
    cv::circle(frame, cv::Point(static_cast<int>(0.5 * W), static_cast<int>(0.17 * H)), static_cast<int>(0.1 * W),
               style.skin, cv::FILLED, cv::LINE_AA);

    PoseFrame pose;
    pose.frame_index = t;
    pose.body = {{0.5 * W, 0.17 * H, 0.9}, {0.5 * W, 0.3 * H, 0.9}, {0.3 * W, 0.32 * H, 0.9}, {0.7 * W, 0.32 * H, 0.9}};
    for (Side side : {Side::kLeft, Side::kRight}) {
      const auto& shapes = side == Side::kLeft ? left_shapes : right_shapes;
      const bool left = side == Side::kLeft;
      int shape;
      double activity;  // 0 at rest, 1 signing
      if (t < b1) {
        shape = kRest, activity = 0.0;
      } else if (t == b1 || t == b2 || t == b3) {
        shape = kGarbage, activity = 0.5;
      } else if (t < b2) {
        shape = shapes[0], activity = 1.0;
      } else if (t < b3) {
        shape = shapes[1], activity = 1.0;
      } else {
        shape = kRest, activity = 0.0;
      }
      // One-handed signs keep the passive hand at rest.
      if (shapes[0] == kRest) shape = kRest, activity = 0.0;

      const double rest_x = left ? 0.68 : 0.32, active_x = left ? 0.64 : 0.36;
      const double wobble = std::sin(2.0 * std::numbers::pi * t / F + phase);
      GlyphPose gp;
      gp.cx = W * (rest_x + activity * (active_x - rest_x + 0.04 * wobble));
      gp.cy = H * (0.76 + activity * (0.42 - 0.76 + 0.03 * std::cos(2.0 * std::numbers::pi * t / F + phase)));
      gp.angle = style.rotation_bias + std::clamp(rot_jitter(rng), deg(-12), deg(12));
      gp.scale = style.scale_bias * scale_jitter(rng);
      const std::uint64_t glyph_seed = mix(mix(spec_.seed, video_index), static_cast<std::uint64_t>(t * 2 + left));
      // Left hands are drawn mirrored.
      GlyphPose drawn = gp;
      if (left) drawn.angle = -gp.angle;
      cv::Mat target = frame;
      if (left) {
        // mirror finger layout: draw into a flipped frame region
        cv::flip(frame, target, 1);
        drawn.cx = W - 1.0 - gp.cx;
      }
      draw_glyph(target, shape, drawn, style, glyph_seed);
      auto kps = glyph_keypoints(shape, drawn, glyph_seed ^ 0xabcdefULL);
      if (left) {
        cv::flip(target, frame, 1);
        for (auto& kp : kps) kp.x = W - 1.0 - kp.x;
      }

      FrameTruth truth;
      truth.shape_class = shape;
      const int side_px = static_cast<int>(std::lround(spec_.glyph_size * gp.scale));
      truth.glyph_box.x0 = static_cast<int>(std::lround(gp.cx - side_px / 2.0));
      truth.glyph_box.y0 = static_cast<int>(std::lround(gp.cy - side_px / 2.0));
      truth.glyph_box.x1 = truth.glyph_box.x0 + side_px;
      truth.glyph_box.y1 = truth.glyph_box.y0 + side_px;
      if (spec_.undetected_rate > 0.0 && unit(rng) < spec_.undetected_rate) {
        truth.detected = false;
        for (auto& kp : kps) kp.confidence = 0.0;
      }
      (left ? pose.left_hand : pose.right_hand) = std::move(kps);
      (left ? video.left_truth : video.right_truth).push_back(truth);
    }

    cv::Mat noise(frame.size(), CV_16SC3);
    cv::RNG cvrng(mix(spec_.seed, video_index * 1000 + static_cast<std::uint64_t>(t)));
    cvrng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(6));
    cv::Mat noisy;
    frame.convertTo(noisy, CV_16SC3);
    noisy += noise;
    noisy.convertTo(frame, CV_8UC3);

    video.frames.push_back(frame);
    video.frame_indices.push_back(t);
    video.poses.frames.push_back(std::move(pose));
  }
  return video;
}

cv::Mat SynthGenerator::render_glyph_patch(int shape_class, int subject_index, std::uint64_t sample_seed) const {
  const auto& style = styles_.at(static_cast<std::size_t>(subject_index));
  std::mt19937_64 rng(mix(spec_.seed, sample_seed));
  std::normal_distribution<double> rot_jitter(0.0, deg(6.0));
  std::uniform_real_distribution<double> scale_jitter(0.96, 1.04);
  const int side = static_cast<int>(std::lround(1.3 * spec_.glyph_size));
  cv::Mat canvas(side, side, CV_8UC3, style.clothing);
  GlyphPose gp;
  gp.cx = side / 2.0;
  gp.cy = side / 2.0;
  gp.angle = style.rotation_bias + std::clamp(rot_jitter(rng), deg(-12), deg(12));
  gp.scale = style.scale_bias * scale_jitter(rng);
  draw_glyph(canvas, shape_class, gp, style, rng());
  cv::Mat patch;
  cv::resize(canvas, patch, cv::Size(spec_.patch_size, spec_.patch_size), 0, 0, cv::INTER_AREA);
  return patch;
}

void write_synth_dataset(const SynthGenerator& generator, const fs::path& root) {
  fs::create_directories(root / "frames");
  fs::create_directories(root / "keypoints");
  std::ofstream(root / "spec.json") << generator.spec().to_json().dump(1) << '\n';
  json videos = json::array();
  std::ofstream truth_out(root / "handshape_truth.jsonl", std::ios::trunc);
  for (std::size_t i = 0; i < generator.videos().size(); ++i) {
    const auto video = generator.render(i);
    const auto& info = video.info;
    const auto frame_dir = root / "frames" / info.video_id;
    fs::create_directories(frame_dir);
    for (std::size_t t = 0; t < video.frames.size(); ++t) {
      cv::imwrite((frame_dir / (std::to_string(video.frame_indices[t]) + ".png")).string(), video.frames[t]);
    }
    write_pose_document(root / "keypoints" / (info.video_id + ".json"), video.poses);
    for (Side side : {Side::kLeft, Side::kRight}) {
      const auto& truth = side == Side::kLeft ? video.left_truth : video.right_truth;
      for (std::size_t t = 0; t < truth.size(); ++t) {
        const auto& b = truth[t].glyph_box;
        truth_out << json{{"video_id", info.video_id},
                          {"frame_index", video.frame_indices[t]},
                          {"side", to_string(side)},
                          {"class_id", truth[t].shape_class},
                          {"detected", truth[t].detected},
                          {"glyph_box", {b.x0, b.y0, b.x1, b.y1}}}
                         .dump()
                  << '\n';
      }
    }
    videos.push_back({{"video_id", info.video_id},
                      {"subject", info.subject},
                      {"sign_class", info.sign_class},
                      {"repetition", info.repetition},
                      {"num_frames", info.num_frames}});
  }
  json dataset{{"num_sign_classes", generator.spec().num_sign_classes}, {"videos", videos}};
  std::ofstream(root / "dataset.json") << dataset.dump(1) << '\n';
}

// ---------------------------------------------------------------------------

OracleAnnotator OracleAnnotator::from_truth_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open truth file " + path.string());
  OracleAnnotator oracle;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (!j.value("detected", true)) continue;
    oracle.add(PatchRef{j.at("video_id").get<std::string>(), j.at("frame_index").get<int>(),
                        side_from_string(j.at("side").get<std::string>())},
               j.at("class_id").get<int>());
  }
  return oracle;
}

OracleAnnotator OracleAnnotator::from_generator(const SynthGenerator& generator) {
  OracleAnnotator oracle;
  for (std::size_t i = 0; i < generator.videos().size(); ++i) {
    const auto video = generator.render(i);
    for (Side side : {Side::kLeft, Side::kRight}) {
      const auto& truth = side == Side::kLeft ? video.left_truth : video.right_truth;
      for (std::size_t t = 0; t < truth.size(); ++t) {
        if (truth[t].detected) oracle.add({video.info.video_id, video.frame_indices[t], side}, truth[t].shape_class);
      }
    }
  }
  return oracle;
}

std::optional<int> OracleAnnotator::label(const PatchRef& ref) const {
  const auto it = truth_.find(ref);
  if (it == truth_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::pair<PatchRef, int>> OracleAnnotator::manual_labels(std::span<const std::string> video_ids) const {
  std::vector<std::pair<PatchRef, int>> out;
  for (const auto& vid : video_ids) {
    for (auto it = truth_.lower_bound(PatchRef{vid, 0, Side::kLeft}); it != truth_.end() && it->first.video_id == vid;
         ++it) {
      out.emplace_back(it->first, it->second);
    }
  }
  return out;
}

std::vector<Decision> OracleAnnotator::review(std::span<const PendingItem> items) const {
  std::vector<Decision> out;
  for (const auto& item : items) {
    const auto truth = label(item.ref);
    if (!truth) {
      out.push_back({item.ref, Decision::Action::kReject, -1});
    } else if (*truth == item.predicted_class) {
      out.push_back({item.ref, Decision::Action::kConfirm, -1});
    } else {
      out.push_back({item.ref, Decision::Action::kRelabel, *truth});
    }
  }
  return out;
}

}  // namespace finehand
