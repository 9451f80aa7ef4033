#include "finehand/nn/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include "finehand/errors.hpp"

namespace finehand::nn {

namespace {
constexpr char kMagic[] = "FHCKPT1\n";
constexpr std::size_t kMagicLen = 8;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     std::span<const Param* const> params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json header{{"config", config}, {"params", nlohmann::json::array()}};
  for (const Param* p : params) {
    header["params"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, kMagicLen);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Param* p : params) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint not found: " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::string(magic, kMagicLen) != std::string(kMagic, kMagicLen)) {
    throw InputError("not a checkpoint file: " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw InputError("truncated checkpoint header: " + path.string());
  const auto header = nlohmann::json::parse(text);
  Checkpoint ckpt;
  ckpt.config = header.at("config");
  for (const auto& p : header.at("params")) {
    Matrix m(p.at("rows").get<Eigen::Index>(), p.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in) throw InputError("truncated checkpoint data: " + path.string());
    ckpt.tensors.emplace(p.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void restore(const Checkpoint& ckpt, std::span<Param* const> params) {
  for (Param* p : params) {
    const auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) throw InputError("checkpoint lacks tensor " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw InputError("shape mismatch for tensor " + p->name);
    }
    p->value = it->second;
  }
}

}  // namespace finehand::nn
