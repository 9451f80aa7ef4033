#include "finehand/handshape_store.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// ClassCatalogue

ClassCatalogue ClassCatalogue::default_catalogue() {
  std::vector<std::string> names{"garbage", "rest-position"};
  for (int i = 1; names.size() < kNumHandShapeClasses; ++i) names.push_back("C" + std::to_string(i));
  return ClassCatalogue(std::move(names));
}

ClassCatalogue::ClassCatalogue(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() != kNumHandShapeClasses) {
    throw InputError("class catalogue must have 41 entries, got " + std::to_string(names_.size()));
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!seen.insert(names_[i]).second) throw InputError("duplicate class name '" + names_[i] + "'");
    if (names_[i] == "garbage") garbage_id_ = static_cast<int>(i);
    if (names_[i] == "rest-position") rest_id_ = static_cast<int>(i);
  }
  if (garbage_id_ < 0 || rest_id_ < 0) throw InputError("catalogue must contain 'garbage' and 'rest-position'");
}

int ClassCatalogue::id_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw InputError("unknown class '" + name + "'");
  return static_cast<int>(it - names_.begin());
}

json ClassCatalogue::to_json() const {
  json arr = json::array();
  for (std::size_t i = 0; i < names_.size(); ++i) arr.push_back({{"id", i}, {"name", names_[i]}});
  return {{"classes", arr}, {"garbage", garbage_id_}, {"rest_position", rest_id_}};
}

ClassCatalogue ClassCatalogue::from_json(const json& j) {
  std::vector<std::string> names;
  for (const auto& c : j.at("classes")) names.push_back(c.at("name").get<std::string>());
  return ClassCatalogue(std::move(names));
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kManual: return "manual";
    case Provenance::kAccepted: return "accepted";
    case Provenance::kCorrected: return "corrected";
  }
  return "manual";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "manual") return Provenance::kManual;
  if (s == "accepted") return Provenance::kAccepted;
  if (s == "corrected") return Provenance::kCorrected;
  throw InputError("unknown provenance '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// HandshapeStore

HandshapeStore::HandshapeStore(ClassCatalogue catalogue) : catalogue_(std::move(catalogue)) {}

json HandshapeStore::entry_to_json(const Entry& e) {
  const char* status = e.status == Status::kResolved ? "resolved" : e.status == Status::kPending ? "pending" : "rejected";
  json j{{"video_id", e.ref.video_id},
         {"frame_index", e.ref.frame_index},
         {"side", to_string(e.ref.side)},
         {"class_id", e.class_id},
         {"provenance", to_string(e.provenance)},
         {"iteration", e.iteration},
         {"status", status}};
  j["confidence"] = e.confidence ? json(*e.confidence) : json(nullptr);
  j["predicted_class"] = e.predicted_class >= 0 ? json(e.predicted_class) : json(nullptr);
  return j;
}

HandshapeStore::Entry HandshapeStore::entry_from_json(const json& j) {
  Entry e;
  e.ref = PatchRef{j.at("video_id").get<std::string>(), j.at("frame_index").get<int>(),
                   side_from_string(j.at("side").get<std::string>())};
  e.class_id = j.at("class_id").get<int>();
  e.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  e.iteration = j.at("iteration").get<int>();
  const auto status = j.at("status").get<std::string>();
  if (status == "resolved") {
    e.status = Status::kResolved;
  } else if (status == "pending") {
    e.status = Status::kPending;
  } else if (status == "rejected") {
    e.status = Status::kRejected;
  } else {
    throw InputError("unknown record status '" + status + "'");
  }
  if (!j.at("confidence").is_null()) e.confidence = j.at("confidence").get<double>();
  if (!j.at("predicted_class").is_null()) e.predicted_class = j.at("predicted_class").get<int>();
  return e;
}

LabelRecord HandshapeStore::to_record(const Entry& e) {
  LabelRecord r{e.ref, e.class_id, e.provenance, e.iteration, e.confidence, std::nullopt};
  if (e.predicted_class >= 0) r.predicted_class = e.predicted_class;
  return r;
}

void HandshapeStore::put(Entry e) {
  auto it = entries_.find(e.ref);
  if (it != entries_.end()) {
    e.seq = it->second.seq;
    it->second = std::move(e);
  } else {
    e.seq = next_seq_++;
    entries_.emplace(e.ref, std::move(e));
  }
}

void HandshapeStore::persist_locked(std::span<const Entry> changed) const {
  if (!dir_) return;
  {
    std::ofstream out(*dir_ / "labels.jsonl", std::ios::app);
    for (const auto& e : changed) out << entry_to_json(e).dump() << '\n';
    if (!out) throw std::runtime_error("failed to append to labels.jsonl");
  }
  json rows = json::array();
  for (const auto& r : ledger_locked()) {
    rows.push_back({{"class_id", r.class_id}, {"iteration", r.iteration}, {"P", r.predicted}, {"C", r.correct},
                    {"T", r.total}, {"relabeled", r.relabeled}, {"rejected", r.rejected}, {"pending", r.pending}});
  }
  std::ofstream(*dir_ / "ledger.json") << json{{"rows", rows}}.dump(1) << '\n';
}

std::unique_ptr<HandshapeStore> HandshapeStore::open(const fs::path& dir) {
  fs::create_directories(dir);
  std::unique_ptr<HandshapeStore> store;
  if (fs::exists(dir / "catalogue.json")) {
    store = load(dir);
  } else {
    store = std::make_unique<HandshapeStore>();
    std::ofstream(dir / "catalogue.json") << store->catalogue_.to_json().dump(1) << '\n';
  }
  store->dir_ = dir;
  return store;
}

void HandshapeStore::ingest_manual(std::span<const std::pair<PatchRef, int>> labels) {
  std::unique_lock lock(mutex_);
  if (max_iteration_locked() > 1) throw StateError("manual iteration is closed: predictions already ingested");
  std::set<PatchRef> batch;
  for (const auto& [ref, cls] : labels) {
    if (!catalogue_.contains(cls)) throw InputError("unknown hand-shape class " + std::to_string(cls));
    if (entries_.contains(ref) || !batch.insert(ref).second) throw ConflictError("duplicate label for " + ref.key());
  }
  std::vector<Entry> changed;
  for (const auto& [ref, cls] : labels) {
    Entry e;
    e.ref = ref;
    e.status = Status::kResolved;
    e.provenance = Provenance::kManual;
    e.class_id = cls;
    e.iteration = 1;
    put(e);
    changed.push_back(entries_.at(ref));
  }
  if (!changed.empty()) persist_locked(changed);
}

PredictionIngestReport HandshapeStore::ingest_predictions(std::span<const ShapePredictionInput> predictions,
                                                          double threshold, int iteration) {
  if (iteration < 2) throw InputError("prediction iterations start at 2");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InputError("threshold must be in [0,1]");
  std::unique_lock lock(mutex_);
  if (iteration < max_iteration_locked()) {
    throw StateError("iteration " + std::to_string(iteration) + " is already closed");
  }
  for (const auto& p : predictions) {
    if (!catalogue_.contains(p.class_id)) throw InputError("unknown hand-shape class " + std::to_string(p.class_id));
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) throw InputError("confidence must be in [0,1]");
  }
  PredictionIngestReport report;
  std::vector<Entry> changed;
  for (const auto& p : predictions) {
    if (entries_.contains(p.ref)) {
      ++report.skipped_already_labeled;
      continue;
    }
    if (p.confidence < threshold) {
      ++report.discarded;
      continue;
    }
    Entry e;
    e.ref = p.ref;
    e.status = Status::kPending;
    e.provenance = Provenance::kAccepted;
    e.class_id = p.class_id;
    e.predicted_class = p.class_id;
    e.confidence = p.confidence;
    e.iteration = iteration;
    put(e);
    changed.push_back(entries_.at(p.ref));
    ++report.enqueued;
  }
  if (!changed.empty()) persist_locked(changed);
  return report;
}

CorrectionReport HandshapeStore::apply_corrections(std::span<const Decision> decisions, int iteration) {
  std::unique_lock lock(mutex_);
  std::set<PatchRef> batch;
  for (const auto& d : decisions) {
    const auto it = entries_.find(d.ref);
    if (it == entries_.end() || it->second.iteration != iteration) {
      throw InputError("patch " + d.ref.key() + " is not queued for iteration " + std::to_string(iteration));
    }
    if (it->second.status != Status::kPending || !batch.insert(d.ref).second) {
      throw ConflictError("patch " + d.ref.key() + " was already decided");
    }
    if (d.action == Decision::Action::kRelabel && !catalogue_.contains(d.final_class)) {
      throw InputError("unknown hand-shape class " + std::to_string(d.final_class));
    }
  }
  CorrectionReport report;
  std::vector<Entry> changed;
  for (const auto& d : decisions) {
    Entry e = entries_.at(d.ref);
    switch (d.action) {
      case Decision::Action::kConfirm:
        e.status = Status::kResolved;
        e.provenance = Provenance::kAccepted;
        ++report.confirmed;
        break;
      case Decision::Action::kRelabel:
        e.status = Status::kResolved;
        e.class_id = d.final_class;
        // Relabeling to the predicted class is a confirmation.
        if (d.final_class == e.predicted_class) {
          e.provenance = Provenance::kAccepted;
          ++report.confirmed;
        } else {
          e.provenance = Provenance::kCorrected;
          ++report.relabeled;
        }
        break;
      case Decision::Action::kReject:
        e.status = Status::kRejected;
        ++report.rejected;
        break;
    }
    put(e);
    changed.push_back(e);
  }
  if (!changed.empty()) persist_locked(changed);
  return report;
}

std::vector<LabelRecord> HandshapeStore::training_pool(int up_to_iteration) const {
  std::shared_lock lock(mutex_);
  std::vector<const Entry*> picked;
  for (const auto& [ref, e] : entries_) {
    if (e.status == Status::kResolved && e.iteration <= up_to_iteration) picked.push_back(&e);
  }
  std::sort(picked.begin(), picked.end(), [](const Entry* a, const Entry* b) { return a->seq < b->seq; });
  std::vector<LabelRecord> out;
  out.reserve(picked.size());
  for (const auto* e : picked) out.push_back(to_record(*e));
  return out;
}

std::vector<PendingItem> HandshapeStore::pending(std::optional<int> iteration) const {
  std::shared_lock lock(mutex_);
  std::vector<const Entry*> picked;
  for (const auto& [ref, e] : entries_) {
    if (e.status == Status::kPending && (!iteration || e.iteration == *iteration)) picked.push_back(&e);
  }
  std::sort(picked.begin(), picked.end(), [](const Entry* a, const Entry* b) { return a->seq < b->seq; });
  std::vector<PendingItem> out;
  for (const auto* e : picked) out.push_back({e->ref, e->predicted_class, e->confidence.value_or(0.0), e->iteration});
  return out;
}

std::vector<PatchRef> HandshapeStore::rejected() const {
  std::shared_lock lock(mutex_);
  std::vector<PatchRef> out;
  for (const auto& [ref, e] : entries_) {
    if (e.status == Status::kRejected) out.push_back(ref);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<LabelRecord> HandshapeStore::find(const PatchRef& ref) const {
  std::shared_lock lock(mutex_);
  const auto it = entries_.find(ref);
  if (it == entries_.end() || it->second.status != Status::kResolved) return std::nullopt;
  return to_record(it->second);
}

int HandshapeStore::max_iteration_locked() const {
  int k = entries_.empty() ? 0 : 1;
  for (const auto& [ref, e] : entries_) k = std::max(k, e.iteration);
  return k;
}

int HandshapeStore::max_iteration() const {
  std::shared_lock lock(mutex_);
  return max_iteration_locked();
}

std::vector<LedgerRow> HandshapeStore::ledger_locked() const {
  const int kmax = max_iteration_locked();
  const int nc = static_cast<int>(catalogue_.size());
  // rows[k-1][c]
  std::vector<std::vector<LedgerRow>> rows(static_cast<std::size_t>(kmax), std::vector<LedgerRow>(nc));
  for (const auto& [ref, e] : entries_) {
    auto& row_set = rows[static_cast<std::size_t>(e.iteration - 1)];
    if (e.provenance == Provenance::kManual) {
      auto& r = row_set[static_cast<std::size_t>(e.class_id)];
      ++r.predicted;
      ++r.correct;
      continue;
    }
    auto& r = row_set[static_cast<std::size_t>(e.predicted_class)];
    ++r.predicted;
    if (e.status == Status::kPending) {
      ++r.pending;
    } else if (e.status == Status::kRejected) {
      ++r.rejected;
    } else if (e.provenance == Provenance::kCorrected) {
      ++r.relabeled;
    } else {
      ++r.correct;
    }
  }
  std::vector<LedgerRow> out;
  for (int c = 0; c < nc; ++c) {
    int total = 0;
    for (int k = 1; k <= kmax; ++k) {
      LedgerRow r = rows[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(c)];
      r.class_id = c;
      r.iteration = k;
      total += r.correct;
      r.total = total;
      out.push_back(r);
    }
  }
  return out;
}

std::vector<LedgerRow> HandshapeStore::ledger() const {
  std::shared_lock lock(mutex_);
  return ledger_locked();
}

json HandshapeStore::ledger_json() const {
  json rows = json::array();
  for (const auto& r : ledger()) {
    rows.push_back({{"class_id", r.class_id}, {"class_name", catalogue_.name(r.class_id)}, {"iteration", r.iteration},
                    {"P", r.predicted}, {"C", r.correct}, {"T", r.total}, {"relabeled", r.relabeled},
                    {"rejected", r.rejected}, {"pending", r.pending}});
  }
  return {{"max_iteration", max_iteration()}, {"rows", rows}};
}

void HandshapeStore::save(const fs::path& dir) const {
  fs::create_directories(dir);
  std::shared_lock lock(mutex_);
  std::vector<const Entry*> all;
  for (const auto& [ref, e] : entries_) all.push_back(&e);
  std::sort(all.begin(), all.end(), [](const Entry* a, const Entry* b) { return a->seq < b->seq; });
  {
    std::ofstream out(dir / "labels.jsonl", std::ios::trunc);
    for (const auto* e : all) out << entry_to_json(*e).dump() << '\n';
  }
  std::ofstream(dir / "catalogue.json") << catalogue_.to_json().dump(1) << '\n';
  json rows = json::array();
  for (const auto& r : ledger_locked()) {
    rows.push_back({{"class_id", r.class_id}, {"iteration", r.iteration}, {"P", r.predicted}, {"C", r.correct},
                    {"T", r.total}, {"relabeled", r.relabeled}, {"rejected", r.rejected}, {"pending", r.pending}});
  }
  std::ofstream(dir / "ledger.json") << json{{"rows", rows}}.dump(1) << '\n';
}

std::unique_ptr<HandshapeStore> HandshapeStore::load(const fs::path& dir) {
  std::ifstream cat_in(dir / "catalogue.json");
  if (!cat_in) throw InputError("missing catalogue.json in " + dir.string());
  json cat;
  cat_in >> cat;
  auto store = std::make_unique<HandshapeStore>(ClassCatalogue::from_json(cat));
  std::ifstream in(dir / "labels.jsonl");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      store->put(entry_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InputError("labels.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return store;
}

}  // namespace finehand
