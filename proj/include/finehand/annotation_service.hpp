#pragma once

// HTTP backend for the review queue:
//   GET  /queue?iteration=k&sort=confidence   pending items, ascending confidence by default
//   POST /decision                            {ref, action, final_class?, iteration?} or {decisions: [...]}
//   GET  /classes                             catalogue
//   GET  /patch/<video>/<side>/<frame>        PNG bytes
//   GET  /ledger                              ledger rows
// Optional static directory is mounted at "/".

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "finehand/handshape_store.hpp"

namespace httplib {
class Server;
}

namespace finehand {

class AnnotationService {
 public:
  AnnotationService(HandshapeStore& store, std::filesystem::path patch_root,
                    std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~AnnotationService();

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  /// Binds to host:port; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void run();
  void stop();

 private:
  void install_routes();

  HandshapeStore& store_;
  std::filesystem::path patch_root_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace finehand
