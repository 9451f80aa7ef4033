#include <gtest/gtest.h>

#include <map>
#include <random>
#include <thread>

#include "finehand/errors.hpp"
#include "finehand/handshape_store.hpp"
#include "test_support.hpp"

using namespace finehand;
using finehand::testing::TempDir;

namespace {

PatchRef ref(const std::string& vid, int frame, Side side = Side::kRight) { return PatchRef{vid, frame, side}; }

const LedgerRow& row(const std::vector<LedgerRow>& rows, int class_id, int iteration) {
  for (const auto& r : rows) {
    if (r.class_id == class_id && r.iteration == iteration) return r;
  }
  throw std::runtime_error("no ledger row");
}

// One class's trajectory through three iterations: manual n1, then (P, C)
// per bootstrap iteration. Non-confirmed predictions alternate between
// relabel and reject.
struct Trajectory {
  int manual;
  int p2, c2;
  int p3, c3;
};

void simulate_manual(HandshapeStore& store, int class_id, const Trajectory& t, const std::string& tag) {
  std::vector<std::pair<PatchRef, int>> manual;
  for (int i = 0; i < t.manual; ++i) manual.emplace_back(ref(tag + "_m", i), class_id);
  store.ingest_manual(manual);
}

void simulate_iteration(HandshapeStore& store, int class_id, const Trajectory& t, const std::string& tag, int k) {
  const int p = k == 2 ? t.p2 : t.p3;
  const int c = k == 2 ? t.c2 : t.c3;
  std::vector<ShapePredictionInput> preds;
  for (int i = 0; i < p; ++i) preds.push_back({ref(tag + "_k" + std::to_string(k), i), class_id, 0.95});
  ASSERT_EQ(store.ingest_predictions(preds, 0.9, k).enqueued, p);
  std::vector<Decision> decisions;
  for (int i = 0; i < p; ++i) {
    Decision d{preds[static_cast<std::size_t>(i)].ref, Decision::Action::kConfirm, -1};
    if (i >= c) {
      d.action = (i % 2 == 0) ? Decision::Action::kRelabel : Decision::Action::kReject;
      d.final_class = class_id == 2 ? 3 : 2;
    }
    decisions.push_back(d);
  }
  store.apply_corrections(decisions, k);
}

void simulate(HandshapeStore& store, int class_id, const Trajectory& t, const std::string& tag) {
  simulate_manual(store, class_id, t, tag);
  simulate_iteration(store, class_id, t, tag, 2);
  simulate_iteration(store, class_id, t, tag, 3);
}

}  // namespace

TEST(ClassCatalogue, DefaultHas41ClassesWithSpecials) {
  const auto cat = ClassCatalogue::default_catalogue();
  EXPECT_EQ(cat.size(), 41u);
  EXPECT_EQ(cat.name(cat.garbage_id()), "garbage");
  EXPECT_EQ(cat.name(cat.rest_id()), "rest-position");
  EXPECT_EQ(cat.id_of("C1"), 2);
  EXPECT_EQ(ClassCatalogue::from_json(cat.to_json()).names(), cat.names());
}

TEST(ClassCatalogue, RejectsWrongSizeOrMissingSpecials) {
  auto names = ClassCatalogue::default_catalogue().names();
  names.pop_back();
  EXPECT_THROW(ClassCatalogue{names}, InputError);
  names = ClassCatalogue::default_catalogue().names();
  names[0] = "blur";
  EXPECT_THROW(ClassCatalogue{names}, InputError);
  names = ClassCatalogue::default_catalogue().names();
  names[5] = names[6];
  EXPECT_THROW(ClassCatalogue{names}, InputError);
}

TEST(HandshapeStore, ManualIngestSetsFirstIterationTotals) {
  HandshapeStore store;
  std::vector<std::pair<PatchRef, int>> labels;
  for (int i = 0; i < 402; ++i) labels.emplace_back(ref("v", i), 2);
  store.ingest_manual(labels);
  const auto rows = store.ledger();
  EXPECT_EQ(row(rows, 2, 1).total, 402);
  EXPECT_EQ(row(rows, 2, 1).correct, 402);
  EXPECT_EQ(store.training_pool(1).size(), 402u);
  EXPECT_FALSE(store.find(ref("v", 0))->confidence.has_value());
}

TEST(HandshapeStore, EmptyManualListChangesNothing) {
  HandshapeStore store;
  store.ingest_manual({});
  EXPECT_TRUE(store.training_pool(10).empty());
}

TEST(HandshapeStore, ManualErrorsAreAtomic) {
  HandshapeStore store;
  std::vector<std::pair<PatchRef, int>> dup{{ref("v", 1), 2}, {ref("v", 2), 3}, {ref("v", 1), 4}};
  EXPECT_THROW(store.ingest_manual(dup), ConflictError);
  EXPECT_TRUE(store.training_pool(1).empty());
  std::vector<std::pair<PatchRef, int>> bad{{ref("v", 1), 2}, {ref("v", 2), 41}};
  EXPECT_THROW(store.ingest_manual(bad), InputError);
  EXPECT_TRUE(store.training_pool(1).empty());
  store.ingest_manual(std::vector<std::pair<PatchRef, int>>{{ref("v", 1), 2}});
  EXPECT_THROW(store.ingest_manual(std::vector<std::pair<PatchRef, int>>{{ref("v", 1), 5}}), ConflictError);
}

TEST(HandshapeStore, ThresholdSplitsEnqueuedAndDiscarded) {
  HandshapeStore store;
  std::vector<ShapePredictionInput> preds{{ref("p", 1), 3, 0.95}, {ref("p", 2), 7, 0.50}};
  const auto r = store.ingest_predictions(preds, 0.9, 2);
  EXPECT_EQ(r.enqueued, 1);
  EXPECT_EQ(r.discarded, 1);
  ASSERT_EQ(store.pending(2).size(), 1u);
  EXPECT_EQ(store.pending(2)[0].ref, ref("p", 1));
  EXPECT_EQ(row(store.ledger(), 3, 2).predicted, 1);
  EXPECT_EQ(row(store.ledger(), 7, 2).predicted, 0);

  HandshapeStore all;
  EXPECT_EQ(all.ingest_predictions(preds, 0.0, 2).enqueued, 2);
}

TEST(HandshapeStore, PredictionsNeedIterationTwoOrLater) {
  HandshapeStore store;
  std::vector<ShapePredictionInput> preds{{ref("p", 1), 3, 0.95}};
  EXPECT_THROW(store.ingest_predictions(preds, 0.9, 1), InputError);
  EXPECT_THROW(store.ingest_predictions(preds, 1.5, 2), InputError);
}

TEST(HandshapeStore, AlreadyLabeledAndRejectedPatchesAreSkipped) {
  HandshapeStore store;
  store.ingest_manual(std::vector<std::pair<PatchRef, int>>{{ref("a", 0), 2}});
  std::vector<ShapePredictionInput> preds{{ref("a", 0), 2, 0.99}, {ref("a", 1), 2, 0.99}};
  auto r = store.ingest_predictions(preds, 0.9, 2);
  EXPECT_EQ(r.enqueued, 1);
  EXPECT_EQ(r.skipped_already_labeled, 1);
  store.apply_corrections(std::vector<Decision>{{ref("a", 1), Decision::Action::kReject, -1}}, 2);
  r = store.ingest_predictions(std::vector<ShapePredictionInput>{{ref("a", 1), 2, 0.99}}, 0.9, 3);
  EXPECT_EQ(r.enqueued, 0);
  EXPECT_EQ(r.skipped_already_labeled, 1);
  EXPECT_EQ(store.rejected().size(), 1u);
}

TEST(HandshapeStore, CorrectionSemantics) {
  HandshapeStore store;
  std::vector<ShapePredictionInput> preds{{ref("q", 0), 5, 0.95}, {ref("q", 1), 5, 0.96}, {ref("q", 2), 5, 0.97},
                                          {ref("q", 3), 5, 0.98}};
  store.ingest_predictions(preds, 0.9, 2);
  const std::vector<Decision> decisions{{ref("q", 0), Decision::Action::kConfirm, -1},
                                        {ref("q", 1), Decision::Action::kRelabel, 12},
                                        {ref("q", 2), Decision::Action::kReject, -1},
                                        {ref("q", 3), Decision::Action::kRelabel, 5}};
  const auto r = store.apply_corrections(decisions, 2);
  EXPECT_EQ(r.confirmed, 2);  // relabel to the predicted class counts as a confirmation
  EXPECT_EQ(r.relabeled, 1);
  EXPECT_EQ(r.rejected, 1);
  const auto rows = store.ledger();
  EXPECT_EQ(row(rows, 5, 2).predicted, 4);
  EXPECT_EQ(row(rows, 5, 2).correct, 2);
  EXPECT_EQ(row(rows, 5, 2).relabeled, 1);
  EXPECT_EQ(row(rows, 5, 2).rejected, 1);
  EXPECT_EQ(row(rows, 12, 2).correct, 0);  // relabeled records do not count toward C_k
  const auto pool = store.training_pool(2);
  EXPECT_EQ(std::count_if(pool.begin(), pool.end(), [](const LabelRecord& l) { return l.class_id == 12; }), 1);
  EXPECT_EQ(store.find(ref("q", 1))->provenance, Provenance::kCorrected);
  EXPECT_EQ(store.find(ref("q", 0))->provenance, Provenance::kAccepted);
  EXPECT_FALSE(store.find(ref("q", 2)).has_value());
}

TEST(HandshapeStore, CorrectionErrors) {
  HandshapeStore store;
  store.ingest_predictions(std::vector<ShapePredictionInput>{{ref("q", 0), 5, 0.95}}, 0.9, 2);
  EXPECT_THROW(store.apply_corrections(std::vector<Decision>{{ref("zz", 0), Decision::Action::kConfirm, -1}}, 2),
               InputError);
  EXPECT_THROW(store.apply_corrections(std::vector<Decision>{{ref("q", 0), Decision::Action::kConfirm, -1}}, 3),
               InputError);
  EXPECT_THROW(store.apply_corrections(std::vector<Decision>{{ref("q", 0), Decision::Action::kRelabel, 99}}, 2),
               InputError);
  store.apply_corrections(std::vector<Decision>{{ref("q", 0), Decision::Action::kConfirm, -1}}, 2);
  EXPECT_THROW(store.apply_corrections(std::vector<Decision>{{ref("q", 0), Decision::Action::kReject, -1}}, 2),
               ConflictError);
}

TEST(HandshapeStore, CorrectionBatchesAreAtomic) {
  HandshapeStore store;
  store.ingest_predictions(std::vector<ShapePredictionInput>{{ref("q", 0), 5, 0.95}}, 0.9, 2);
  const std::vector<Decision> batch{{ref("q", 0), Decision::Action::kConfirm, -1},
                                    {ref("nope", 0), Decision::Action::kConfirm, -1}};
  EXPECT_THROW(store.apply_corrections(batch, 2), InputError);
  EXPECT_EQ(store.pending(2).size(), 1u);
}

TEST(HandshapeStore, AllRejectedLeavesTotalUnchanged) {
  HandshapeStore store;
  simulate(store, 4, {10, 7, 0, 3, 0}, "r");
  const auto rows = store.ledger();
  EXPECT_EQ(row(rows, 4, 2).correct, 0);
  EXPECT_EQ(row(rows, 4, 2).total, 10);
  EXPECT_EQ(row(rows, 4, 3).total, 10);
}

// Table 1 of the reference experiment, rows C1..C5 (catalogue ids 2..6).
TEST(HandshapeStore, TableOneRows) {
  const std::map<int, Trajectory> table{{2, {402, 598, 534, 524, 511}},
                                        {3, {217, 277, 277, 281, 277}},
                                        {4, {69, 88, 73, 102, 96}},
                                        {5, {328, 554, 408, 435, 396}},
                                        {6, {163, 236, 196, 219, 198}}};
  // Published T_2, T_3. Row C4 prints T_2 = 735 although 328 + 408 = 736; its
  // T_3 = 1131 equals 735 + 396, so the published row carries the slip forward.
  const std::map<int, std::pair<int, int>> published{
      {2, {936, 1447}}, {3, {494, 771}}, {4, {142, 238}}, {5, {735, 1131}}, {6, {359, 557}}};
  HandshapeStore store;
  for (const auto& [c, t] : table) simulate_manual(store, c, t, "c" + std::to_string(c));
  for (int k : {2, 3}) {
    for (const auto& [c, t] : table) simulate_iteration(store, c, t, "c" + std::to_string(c), k);
  }
  const auto rows = store.ledger();
  for (const auto& [c, t] : table) {
    SCOPED_TRACE("class " + std::to_string(c));
    EXPECT_EQ(row(rows, c, 1).total, t.manual);
    EXPECT_EQ(row(rows, c, 2).predicted, t.p2);
    EXPECT_EQ(row(rows, c, 2).correct, t.c2);
    EXPECT_EQ(row(rows, c, 3).predicted, t.p3);
    EXPECT_EQ(row(rows, c, 3).correct, t.c3);
    EXPECT_EQ(row(rows, c, 2).total, t.manual + t.c2);
    EXPECT_EQ(row(rows, c, 3).total, t.manual + t.c2 + t.c3);
    if (c != 5) {
      EXPECT_EQ(row(rows, c, 2).total, published.at(c).first);
      EXPECT_EQ(row(rows, c, 3).total, published.at(c).second);
    } else {
      EXPECT_EQ(row(rows, c, 2).total, published.at(c).first + 1);
      EXPECT_EQ(row(rows, c, 3).total, published.at(c).second + 1);
    }
  }
  EXPECT_EQ(row(rows, 2, 2).total, 936);
  EXPECT_EQ(row(rows, 2, 3).total, 1447);
}

TEST(HandshapeStore, RandomizedLedgerIdentity) {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    HandshapeStore store;
    const int iterations = 2 + static_cast<int>(rng() % 3);
    std::vector<std::pair<PatchRef, int>> manual;
    const int n_manual = static_cast<int>(rng() % 30);
    for (int i = 0; i < n_manual; ++i) manual.emplace_back(ref("m", i), static_cast<int>(rng() % 41));
    store.ingest_manual(manual);
    std::map<int, int> expected_pool;
    for (const auto& [r, c] : manual) ++expected_pool[c];
    for (int k = 2; k <= iterations; ++k) {
      std::vector<ShapePredictionInput> preds;
      const int n = static_cast<int>(rng() % 40);
      for (int i = 0; i < n; ++i) {
        preds.push_back({ref("k" + std::to_string(k), i), static_cast<int>(rng() % 41),
                         std::uniform_real_distribution<double>(0, 1)(rng)});
      }
      store.ingest_predictions(preds, 0.5, k);
      std::vector<Decision> decisions;
      for (const auto& item : store.pending(k)) {
        const auto roll = rng() % 3;
        Decision d{item.ref, Decision::Action::kConfirm, -1};
        if (roll == 1) {
          d.action = Decision::Action::kRelabel;
          d.final_class = static_cast<int>(rng() % 41);
        } else if (roll == 2) {
          d.action = Decision::Action::kReject;
        }
        if (d.action == Decision::Action::kConfirm) ++expected_pool[item.predicted_class];
        if (d.action == Decision::Action::kRelabel) ++expected_pool[d.final_class];
        decisions.push_back(d);
      }
      store.apply_corrections(decisions, k);
    }
    const auto rows = store.ledger();
    // Iterations that queued nothing leave no rows behind.
    ASSERT_EQ(rows.size() % 41, 0u);
    ASSERT_LE(rows.size(), static_cast<std::size_t>(41 * iterations));
    for (const auto& r : rows) {
      ASSERT_GE(r.correct, 0);
      ASSERT_LE(r.correct, r.predicted);
      if (r.iteration == 1) {
        ASSERT_EQ(r.total, r.correct);
      } else {
        ASSERT_EQ(r.total, row(rows, r.class_id, r.iteration - 1).total + r.correct);
      }
    }
    std::map<int, int> pool;
    for (const auto& rec : store.training_pool(iterations)) ++pool[rec.class_id];
    ASSERT_EQ(pool, expected_pool);
  }
}

TEST(HandshapeStore, TrainingPoolRespectsIterationAndPending) {
  HandshapeStore store;
  store.ingest_manual(std::vector<std::pair<PatchRef, int>>{{ref("m", 0), 2}});
  store.ingest_predictions(std::vector<ShapePredictionInput>{{ref("p", 0), 2, 0.99}, {ref("p", 1), 2, 0.99}}, 0.9, 2);
  store.apply_corrections(std::vector<Decision>{{ref("p", 0), Decision::Action::kConfirm, -1}}, 2);
  EXPECT_EQ(store.training_pool(1).size(), 1u);
  EXPECT_EQ(store.training_pool(2).size(), 2u);  // pending p1 is excluded
  EXPECT_EQ(store.training_pool(99).size(), 2u);
}

TEST(HandshapeStore, PersistenceRoundTrip) {
  TempDir dir;
  std::vector<LabelRecord> pool;
  std::vector<LedgerRow> ledger;
  std::vector<PendingItem> pending;
  {
    auto store = HandshapeStore::open(dir.path());
    simulate(*store, 2, {5, 4, 3, 3, 1}, "x");
    store->ingest_predictions(std::vector<ShapePredictionInput>{{ref("late", 0), 9, 0.93}}, 0.9, 3);
    pool = store->training_pool(3);
    ledger = store->ledger();
    pending = store->pending();
  }
  auto replayed = HandshapeStore::open(dir.path());
  EXPECT_EQ(replayed->training_pool(3), pool);
  EXPECT_EQ(replayed->ledger(), ledger);
  EXPECT_EQ(replayed->pending(), pending);
  EXPECT_TRUE(std::filesystem::exists(dir / "ledger.json"));

  TempDir snap;
  replayed->save(snap.path());
  auto loaded = HandshapeStore::load(snap.path());
  EXPECT_EQ(loaded->training_pool(3), pool);
  EXPECT_EQ(loaded->ledger(), ledger);
  EXPECT_EQ(loaded->rejected(), replayed->rejected());
}

TEST(HandshapeStore, ConcurrentReadersAndOneWriter) {
  HandshapeStore store;
  std::atomic<bool> done{false};
  std::vector<std::thread> readers;
  std::atomic<int> violations{0};
  for (int t = 0; t < 3; ++t) {
    readers.emplace_back([&] {
      while (!done) {
        const auto rows = store.ledger();
        for (const auto& r : rows) {
          if (r.correct > r.predicted) ++violations;
        }
      }
    });
  }
  for (int i = 0; i < 200; ++i) {
    store.ingest_predictions(std::vector<ShapePredictionInput>{{ref("w", i), i % 41, 0.99}}, 0.9, 2);
    store.apply_corrections(std::vector<Decision>{{ref("w", i), Decision::Action::kConfirm, -1}}, 2);
  }
  done = true;
  for (auto& t : readers) t.join();
  EXPECT_EQ(violations, 0);
  EXPECT_EQ(store.training_pool(2).size(), 200u);
}
