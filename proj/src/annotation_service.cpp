#include "finehand/annotation_service.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "finehand/errors.hpp"

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

PatchRef parse_ref(const json& j) {
  if (j.is_string()) return PatchRef::from_key(j.get<std::string>());
  return PatchRef{j.at("video_id").get<std::string>(), j.at("frame_index").get<int>(),
                  side_from_string(j.at("side").get<std::string>())};
}

Decision::Action parse_action(const std::string& s) {
  if (s == "confirm") return Decision::Action::kConfirm;
  if (s == "relabel") return Decision::Action::kRelabel;
  if (s == "reject") return Decision::Action::kReject;
  throw InputError("unknown action '" + s + "'");
}

json pending_json(const PendingItem& item, const ClassCatalogue& catalogue) {
  return {{"ref", item.ref.key()},
          {"video_id", item.ref.video_id},
          {"frame_index", item.ref.frame_index},
          {"side", to_string(item.ref.side)},
          {"predicted_class", item.predicted_class},
          {"predicted_name", catalogue.name(item.predicted_class)},
          {"confidence", item.confidence},
          {"iteration", item.iteration}};
}

}  // namespace

AnnotationService::AnnotationService(HandshapeStore& store, fs::path patch_root, std::optional<fs::path> static_dir)
    : store_(store), patch_root_(std::move(patch_root)), server_(std::make_unique<httplib::Server>()) {
  install_routes();
  if (static_dir) {
    if (!server_->set_mount_point("/", static_dir->string())) {
      throw InputError("static directory not found: " + static_dir->string());
    }
  }
}

AnnotationService::~AnnotationService() { stop(); }

int AnnotationService::bind(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void AnnotationService::run() { server_->listen_after_bind(); }

void AnnotationService::stop() {
  if (server_) server_->stop();
}

void AnnotationService::install_routes() {
  server_->Get("/queue", [this](const httplib::Request& req, httplib::Response& res) {
    std::optional<int> iteration;
    try {
      if (req.has_param("iteration")) iteration = std::stoi(req.get_param_value("iteration"));
    } catch (const std::exception&) {
      return send_error(res, 400, "iteration must be an integer");
    }
    const std::string sort = req.has_param("sort") ? req.get_param_value("sort") : "confidence";
    auto items = store_.pending(iteration);
    if (sort == "confidence") {
      std::stable_sort(items.begin(), items.end(),
                       [](const PendingItem& a, const PendingItem& b) { return a.confidence < b.confidence; });
    } else if (sort == "-confidence") {
      std::stable_sort(items.begin(), items.end(),
                       [](const PendingItem& a, const PendingItem& b) { return a.confidence > b.confidence; });
    } else if (sort != "ref") {
      return send_error(res, 400, "sort must be confidence, -confidence or ref");
    }
    json out = json::array();
    for (const auto& item : items) out.push_back(pending_json(item, store_.catalogue()));
    send_json(res, 200, {{"iteration", iteration ? json(*iteration) : json(nullptr)}, {"items", out}});
  });

  server_->Post("/decision", [this](const httplib::Request& req, httplib::Response& res) {
    std::vector<Decision> decisions;
    std::optional<int> iteration;
    try {
      const auto body = json::parse(req.body);
      const json list = body.contains("decisions") ? body.at("decisions") : json::array({body});
      if (body.contains("iteration")) iteration = body.at("iteration").get<int>();
      for (const auto& d : list) {
        Decision decision;
        decision.ref = parse_ref(d.at("ref"));
        decision.action = parse_action(d.at("action").get<std::string>());
        decision.final_class = d.value("final_class", -1);
        if (!iteration && d.contains("iteration")) iteration = d.at("iteration").get<int>();
        decisions.push_back(std::move(decision));
      }
      if (decisions.empty()) return send_error(res, 400, "no decisions given");
      if (!iteration) {
        // Default to the queue the first item sits in.
        const auto pending = store_.pending();
        const auto it = std::find_if(pending.begin(), pending.end(),
                                     [&](const PendingItem& p) { return p.ref == decisions.front().ref; });
        if (it == pending.end()) {
          if (store_.find(decisions.front().ref) || std::ranges::count(store_.rejected(), decisions.front().ref)) {
            return send_error(res, 409, "already decided: " + decisions.front().ref.key());
          }
          return send_error(res, 404, "not in the review queue: " + decisions.front().ref.key());
        }
        iteration = it->iteration;
      }
      const auto report = store_.apply_corrections(decisions, *iteration);
      send_json(res, 200,
                {{"confirmed", report.confirmed},
                 {"relabeled", report.relabeled},
                 {"rejected", report.rejected},
                 {"iteration", *iteration}});
    } catch (const ConflictError& e) {
      send_error(res, 409, e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("malformed request: ") + e.what());
    } catch (const InputError& e) {
      send_error(res, 400, e.what());
    }
  });

  server_->Get("/classes", [this](const httplib::Request&, httplib::Response& res) {
    const auto& cat = store_.catalogue();
    json classes = json::array();
    for (std::size_t i = 0; i < cat.size(); ++i) classes.push_back({{"id", i}, {"name", cat.names()[i]}});
    send_json(res, 200, {{"classes", classes}, {"garbage_id", cat.garbage_id()}, {"rest_id", cat.rest_id()}});
  });

  server_->Get(R"(/patch/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    PatchRef ref;
    try {
      ref = PatchRef::from_key(req.matches[1].str());
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    const auto path =
        patch_root_ / ref.video_id / std::string(to_string(ref.side)) / (std::to_string(ref.frame_index) + ".png");
    std::ifstream in(path, std::ios::binary);
    if (!in) return send_error(res, 404, "no patch " + ref.key());
    std::ostringstream bytes;
    bytes << in.rdbuf();
    res.status = 200;
    res.set_content(bytes.str(), "image/png");
  });

  server_->Get("/ledger", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, store_.ledger_json());
  });
}

}  // namespace finehand
