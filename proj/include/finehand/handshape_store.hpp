#pragma once

// Hand-shape label store for the iterative bootstrap-labeling loop.
//
// Iteration 1 holds manual labels. From iteration 2 on, high-confidence
// embedder predictions enter a review queue, and a reviewer confirms,
// relabels or rejects each one. The per-class ledger follows
//   T_1 = C_1 = manual count,  T_k = T_{k-1} + C_k,  0 <= C_k <= P_k,
// where P_k counts enqueued predictions and C_k the confirmed ones.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "finehand/types.hpp"

namespace finehand {

inline constexpr int kNumHandShapeClasses = 41;

class ClassCatalogue {
 public:
  /// garbage, rest-position, then C1..C39.
  static ClassCatalogue default_catalogue();
  /// Throws InputError unless there are exactly 41 unique names with
  /// "garbage" and "rest-position" each present once.
  explicit ClassCatalogue(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::string& name(int class_id) const { return names_.at(static_cast<std::size_t>(class_id)); }
  const std::vector<std::string>& names() const { return names_; }
  bool contains(int class_id) const { return class_id >= 0 && class_id < static_cast<int>(names_.size()); }
  int garbage_id() const { return garbage_id_; }
  int rest_id() const { return rest_id_; }
  int id_of(const std::string& name) const;

  nlohmann::json to_json() const;
  static ClassCatalogue from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> names_;
  int garbage_id_ = -1;
  int rest_id_ = -1;
};

enum class Provenance { kManual, kAccepted, kCorrected };
std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

/// A resolved hand-shape label.
struct LabelRecord {
  PatchRef ref;
  int class_id = 0;
  Provenance provenance = Provenance::kManual;
  int iteration = 1;
  std::optional<double> confidence;  // none for manual labels
  std::optional<int> predicted_class;  // set for accepted/corrected records

  bool operator==(const LabelRecord&) const = default;
};

struct PendingItem {
  PatchRef ref;
  int predicted_class = 0;
  double confidence = 0.0;
  int iteration = 2;
  bool operator==(const PendingItem&) const = default;
};

struct ShapePredictionInput {
  PatchRef ref;
  int class_id = 0;
  double confidence = 0.0;
};

struct Decision {
  enum class Action { kConfirm, kRelabel, kReject };
  PatchRef ref;
  Action action = Action::kConfirm;
  int final_class = -1;  // required for kRelabel
};

struct LedgerRow {
  int class_id = 0;
  int iteration = 1;
  int predicted = 0;   // P_k
  int correct = 0;     // C_k
  int total = 0;       // T_k
  int relabeled = 0;   // predictions of this class moved to another class
  int rejected = 0;    // predictions of this class discarded
  int pending = 0;     // predictions of this class still awaiting review
  bool operator==(const LedgerRow&) const = default;
};

struct PredictionIngestReport {
  int enqueued = 0;
  int discarded = 0;
  int skipped_already_labeled = 0;
};

struct CorrectionReport {
  int confirmed = 0;
  int relabeled = 0;
  int rejected = 0;
};

/// Thread-safe store. Mutations take an exclusive lock, reads a shared one.
/// When opened on a directory, every mutation is appended to labels.jsonl
/// and ledger.json is rewritten.
class HandshapeStore {
 public:
  explicit HandshapeStore(ClassCatalogue catalogue = ClassCatalogue::default_catalogue());
  /// Creates the directory if needed and replays labels.jsonl.
  static std::unique_ptr<HandshapeStore> open(const std::filesystem::path& dir);

  HandshapeStore(const HandshapeStore&) = delete;
  HandshapeStore& operator=(const HandshapeStore&) = delete;

  const ClassCatalogue& catalogue() const { return catalogue_; }

  /// Iteration-1 labels. Atomic: on error nothing is stored.
  void ingest_manual(std::span<const std::pair<PatchRef, int>> labels);

  PredictionIngestReport ingest_predictions(std::span<const ShapePredictionInput> predictions, double threshold,
                                            int iteration);

  /// Atomic. Unknown refs raise InputError; refs already decided raise
  /// ConflictError.
  CorrectionReport apply_corrections(std::span<const Decision> decisions, int iteration);

  std::vector<LabelRecord> training_pool(int up_to_iteration) const;
  std::vector<PendingItem> pending(std::optional<int> iteration = std::nullopt) const;
  std::vector<PatchRef> rejected() const;
  std::optional<LabelRecord> find(const PatchRef& ref) const;

  /// Rows for every catalogue class and every iteration 1..max_iteration().
  std::vector<LedgerRow> ledger() const;
  int max_iteration() const;

  nlohmann::json ledger_json() const;

  /// Writes labels.jsonl (compacted), ledger.json and catalogue.json.
  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<HandshapeStore> load(const std::filesystem::path& dir);

 private:
  enum class Status { kResolved, kPending, kRejected };
  struct Entry {
    PatchRef ref;
    Status status = Status::kResolved;
    Provenance provenance = Provenance::kManual;
    int class_id = 0;
    int predicted_class = -1;
    std::optional<double> confidence;
    int iteration = 1;
    long long seq = 0;  // insertion order
  };

  static nlohmann::json entry_to_json(const Entry& e);
  static Entry entry_from_json(const nlohmann::json& j);
  static LabelRecord to_record(const Entry& e);
  void put(Entry e);  // caller holds the write lock
  void persist_locked(std::span<const Entry> changed) const;
  std::vector<LedgerRow> ledger_locked() const;
  int max_iteration_locked() const;

  ClassCatalogue catalogue_;
  std::unordered_map<PatchRef, Entry> entries_;
  long long next_seq_ = 0;
  std::optional<std::filesystem::path> dir_;
  mutable std::shared_mutex mutex_;
};

}  // namespace finehand
