#include <gtest/gtest.h>

#include <random>
#include <set>

#include "finehand/errors.hpp"
#include "finehand/eval_harness.hpp"
#include "finehand/synth_data.hpp"
#include "test_support.hpp"

using namespace finehand;
using finehand::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<GestureSample> tiny_dataset(int subjects) {
  SynthSpec spec;
  spec.num_subjects = subjects;
  spec.num_sign_classes = 2;
  spec.repetitions = 2;
  spec.frames_per_video = 10;
  const SynthGenerator gen(spec);
  CropConfig crop;
  crop.patch_size = spec.patch_size;
  std::vector<GestureSample> out;
  for (std::size_t i = 0; i < gen.videos().size(); ++i) {
    const auto v = gen.render(i);
    auto g = extract_gesture(v.info.video_id, v.frames, v.frame_indices, v.poses.frames, crop);
    g.subject = v.info.subject;
    g.sign_class = v.info.sign_class;
    out.push_back(std::move(g));
  }
  return out;
}

EmbedderConfig tiny_embedder() {
  EmbedderConfig c;
  c.embedding_dim = 8;
  c.stage_channels = {4, 8};
  c.input_size = 16;
  c.seed = 2;
  return c;
}

AblationConfig tiny_ablation(const TempDir& dir) {
  Embedder(tiny_embedder()).save(dir / "e0.ckpt");
  AblationConfig cfg;
  cfg.experiment = "tiny";
  cfg.sequence.input_dim = 8;
  cfg.sequence.hidden_size = 6;
  cfg.sequence.num_layers = 1;
  cfg.sequence.time_steps = 4;
  cfg.sequence.num_classes = 2;
  cfg.sequence.batch_size = 4;
  cfg.sequence.max_epochs = 3;
  cfg.sequence.learning_rate = 1e-2f;
  cfg.embedder_checkpoints = {{0, dir / "e0.ckpt"}};
  cfg.iterations = {0};
  cfg.final_iteration = 0;
  return cfg;
}

}  // namespace

TEST(MakeSplits, LeaveOneSubjectOut) {
  std::vector<std::string> subjects;
  for (int i = 12; i >= 1; --i) subjects.push_back("S" + std::to_string(100 + i));
  subjects.push_back("S105");  // duplicates collapse
  const auto plans = make_splits(subjects);
  ASSERT_EQ(plans.size(), 12u);
  std::set<std::string> tests;
  for (const auto& p : plans) {
    EXPECT_EQ(p.train_subjects.size(), 11u);
    EXPECT_EQ(std::count(p.train_subjects.begin(), p.train_subjects.end(), p.test_subject), 0);
    std::set<std::string> all(p.train_subjects.begin(), p.train_subjects.end());
    all.insert(p.test_subject);
    EXPECT_EQ(all.size(), 12u);
    tests.insert(p.test_subject);
  }
  EXPECT_EQ(tests.size(), 12u);
  EXPECT_TRUE(std::is_sorted(plans.begin(), plans.end(),
                             [](const SplitPlan& a, const SplitPlan& b) { return a.test_subject < b.test_subject; }));
  EXPECT_EQ(make_splits(std::vector<std::string>{"a", "b"}).size(), 2u);
  EXPECT_THROW(make_splits(std::vector<std::string>{"a", "a"}), InputError);
  EXPECT_THROW(make_splits(std::vector<std::string>{}), InputError);
}

TEST(Accuracy, ExamplesAndCountingOracle) {
  EXPECT_DOUBLE_EQ(accuracy(std::vector<int>{1, 2, 3}, std::vector<int>{1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(std::vector<int>{1, 2, 3, 4}, std::vector<int>{1, 2, 3, 0}), 0.75);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), InputError);
  EXPECT_THROW(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), InputError);
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 100;
    std::vector<int> p(n), l(n);
    int hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % 4);
      l[i] = static_cast<int>(rng() % 4);
      if (p[i] == l[i]) ++hits;
    }
    ASSERT_DOUBLE_EQ(accuracy(p, l), static_cast<double>(hits) / static_cast<double>(n));
  }
}

TEST(ResultsTable, AverageIsUnweightedMean) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    ResultsTable t;
    const std::size_t n = 1 + rng() % 12;
    for (std::size_t i = 0; i < n; ++i) t.subjects.push_back("S" + std::to_string(i));
    std::vector<double> v(n);
    double sum = 0;
    for (auto& x : v) sum += (x = u(rng));
    t.add_row("r", v);
    ASSERT_NEAR(t.row("r").average, sum / static_cast<double>(n), 1e-9);
  }
}

TEST(ResultsTable, SerializationAndRendering) {
  ResultsTable t;
  t.experiment = "exp";
  t.axis = "hands";
  t.subjects = {"S01", "S02"};
  t.add_row("left", {0.5, 0.75});
  t.add_row("both-mean", {1.0, 0.875});
  EXPECT_THROW(t.add_row("bad", {0.1}), InputError);
  EXPECT_THROW(t.row("missing"), InputError);
  const auto back = ResultsTable::from_json(t.to_json());
  EXPECT_EQ(back.to_json(), t.to_json());
  const auto text = t.render_text();
  EXPECT_NE(text.find("both-mean"), std::string::npos);
  EXPECT_NE(text.find("0.62"), std::string::npos);  // average of left
  EXPECT_NE(t.render_svg().find("<svg"), std::string::npos);
  TempDir dir;
  t.write(dir.path());
  for (const char* ext : {".json", ".txt", ".svg"}) EXPECT_TRUE(fs::exists(dir / (std::string("hands") + ext)));
}

TEST(AxisNames, RoundTrip) {
  for (auto a : {AblationAxis::kIterations, AblationAxis::kHands, AblationAxis::kJoint}) {
    EXPECT_EQ(axis_from_string(to_string(a)), a);
  }
  EXPECT_THROW(axis_from_string("depth"), InputError);
}

TEST(AuditSplit, CountsTestSubjectLeaks) {
  SplitPlan plan{"S02", {"S01"}};
  std::vector<SignExample> train(3), test(1);
  train[0].subject = "S01";
  train[1].subject = "S02";
  train[2].subject = "S01";
  test[0].subject = "S02";
  test[0].video_id = "x";
  train[2].video_id = "x";
  const auto a = audit_split(plan, train, test);
  EXPECT_EQ(a.violations, 2u);
  EXPECT_EQ(a.train_videos, 3u);
  EXPECT_EQ(a.test_videos, 1u);
}

TEST(MakeExample, SamplesAndFilters) {
  EmbeddedVideo v;
  v.video_id = "v";
  v.subject = "S";
  v.label = 1;
  v.left = nn::Matrix(10, 2);
  v.right = nn::Matrix(10, 2);
  for (int i = 0; i < 10; ++i) {
    v.left.row(i) << static_cast<float>(i), 0.0f;
    v.right.row(i) << static_cast<float>(100 + i), 0.0f;
  }
  v.left_shapes = {0, 0, 5, 5, 5, 5, 1, 1, 1, 1};
  v.right_shapes = std::vector<int>(10, 0);
  SequenceModelConfig cfg;
  cfg.time_steps = 4;
  auto ex = make_example(v, cfg, 0, 1);
  EXPECT_EQ(ex.left(1, 0), 2.0f);  // floor(1 * 10 / 4)
  cfg.filter_uninformative = true;
  ex = make_example(v, cfg, 0, 1);
  for (int t = 0; t < 4; ++t) {
    EXPECT_GE(ex.left(t, 0), 2.0f);
    EXPECT_LE(ex.left(t, 0), 5.0f);
  }
  EXPECT_EQ(ex.right(1, 0), 102.0f);  // everything filtered: fallback to all frames
}

TEST(RunAblation, MissingCheckpointNamesIt) {
  TempDir dir;
  auto cfg = tiny_ablation(dir);
  cfg.iterations = {0, 2};
  const auto data = tiny_dataset(2);
  try {
    run_ablation(data, AblationAxis::kIterations, cfg);
    FAIL() << "expected StateError";
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 2"), std::string::npos);
  }
  cfg.embedder_checkpoints[2] = dir / "nope.ckpt";
  try {
    run_ablation(data, AblationAxis::kIterations, cfg);
    FAIL() << "expected StateError";
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.ckpt"), std::string::npos);
  }
}

TEST(RunAblation, TinyRunsOnEveryAxis) {
  TempDir dir;
  const auto cfg = tiny_ablation(dir);
  const auto data = tiny_dataset(2);
  std::vector<SplitAudit> audits;
  const auto it = run_ablation(data, AblationAxis::kIterations, cfg, &audits);
  EXPECT_EQ(it.subjects, (std::vector<std::string>{"S01", "S02"}));
  ASSERT_EQ(it.rows.size(), 1u);
  EXPECT_EQ(it.rows[0].name, "iteration-0");
  ASSERT_EQ(audits.size(), 2u);
  for (const auto& a : audits) EXPECT_EQ(a.violations, 0u);

  const auto hands = run_ablation(data, AblationAxis::kHands, cfg);
  std::vector<std::string> names;
  for (const auto& r : hands.rows) names.push_back(r.name);
  EXPECT_EQ(names, (std::vector<std::string>{"left", "right", "both-max", "both-concat", "both-mean"}));

  const auto joint = run_ablation(data, AblationAxis::kJoint, cfg);
  ASSERT_EQ(joint.rows.size(), 2u);
  EXPECT_EQ(joint.rows[0].name, "separate");
  EXPECT_EQ(joint.rows[1].name, "joint");
  EXPECT_TRUE(joint.metadata.at("embedder_checksum_changed").get<bool>());

  // Frozen checkpoint on disk is untouched by the joint run.
  EXPECT_EQ(Embedder::load(dir / "e0.ckpt").checksum(), Embedder(tiny_embedder()).checksum());
}

TEST(RunAblation, SingleSplitAndDeterminism) {
  TempDir dir;
  auto cfg = tiny_ablation(dir);
  cfg.only_subjects = {"S02"};
  const auto data = tiny_dataset(3);
  const auto a = run_ablation(data, AblationAxis::kIterations, cfg);
  const auto b = run_ablation(data, AblationAxis::kIterations, cfg);
  EXPECT_EQ(a.subjects, std::vector<std::string>{"S02"});
  EXPECT_EQ(a.rows[0].per_subject.size(), 1u);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  cfg.only_subjects = {"S99"};
  EXPECT_THROW(run_ablation(data, AblationAxis::kIterations, cfg), InputError);
}
