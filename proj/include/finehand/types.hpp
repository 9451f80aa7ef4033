#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include "finehand/errors.hpp"

namespace finehand {

enum class Side : std::uint8_t { kLeft = 0, kRight = 1 };

inline std::string_view to_string(Side side) {
  return side == Side::kLeft ? "left" : "right";
}

inline Side side_from_string(std::string_view s) {
  if (s == "left") return Side::kLeft;
  if (s == "right") return Side::kRight;
  throw InputError("unknown hand side '" + std::string(s) + "'");
}

/// Identifies one hand patch: (video, frame, hand side).
struct PatchRef {
  std::string video_id;
  int frame_index = 0;
  Side side = Side::kRight;

  auto operator<=>(const PatchRef&) const = default;
  bool operator==(const PatchRef&) const = default;

  /// "<video_id>/<side>/<frame_index>", the same shape as the patch tree path.
  std::string key() const {
    return video_id + "/" + std::string(to_string(side)) + "/" + std::to_string(frame_index);
  }
  static PatchRef from_key(std::string_view key);
};

inline PatchRef PatchRef::from_key(std::string_view key) {
  auto last = key.rfind('/');
  if (last == std::string_view::npos || last == 0) throw InputError("bad patch ref '" + std::string(key) + "'");
  auto mid = key.rfind('/', last - 1);
  if (mid == std::string_view::npos) throw InputError("bad patch ref '" + std::string(key) + "'");
  PatchRef ref;
  ref.video_id = std::string(key.substr(0, mid));
  ref.side = side_from_string(key.substr(mid + 1, last - mid - 1));
  const std::string frame(key.substr(last + 1));
  try {
    std::size_t used = 0;
    ref.frame_index = std::stoi(frame, &used);
    if (used != frame.size() || ref.frame_index < 0) throw InputError("");
  } catch (const std::exception&) {
    throw InputError("bad frame index in patch ref '" + std::string(key) + "'");
  }
  if (ref.video_id.empty()) throw InputError("empty video id in patch ref");
  return ref;
}

}  // namespace finehand

template <>
struct std::hash<finehand::PatchRef> {
  std::size_t operator()(const finehand::PatchRef& r) const noexcept {
    std::size_t h = std::hash<std::string>{}(r.video_id);
    h ^= std::hash<int>{}(r.frame_index) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::size_t>(r.side) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  }
};
