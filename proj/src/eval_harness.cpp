#include "finehand/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<SplitPlan> make_splits(std::span<const std::string> subjects) {
  const std::set<std::string> unique(subjects.begin(), subjects.end());
  if (unique.size() < 2) throw InputError("cross-subject evaluation needs at least 2 subjects");
  std::vector<SplitPlan> plans;
  for (const auto& test : unique) {
    SplitPlan p;
    p.test_subject = test;
    for (const auto& s : unique) {
      if (s != test) p.train_subjects.push_back(s);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw InputError("accuracy of an empty prediction list");
  if (predictions.size() != labels.size()) throw InputError("predictions and labels differ in length");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// ResultsTable

void ResultsTable::add_row(std::string name, std::vector<double> per_subject) {
  if (per_subject.size() != subjects.size()) throw InputError("row '" + name + "' does not match subject columns");
  ResultsRow row;
  row.name = std::move(name);
  row.average = per_subject.empty()
                    ? 0.0
                    : std::accumulate(per_subject.begin(), per_subject.end(), 0.0) / static_cast<double>(per_subject.size());
  row.per_subject = std::move(per_subject);
  rows.push_back(std::move(row));
}

const ResultsRow& ResultsTable::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw InputError("results table has no row '" + name + "'");
}

json ResultsTable::to_json() const {
  json jrows = json::array();
  for (const auto& r : rows) jrows.push_back({{"name", r.name}, {"per_subject", r.per_subject}, {"average", r.average}});
  return {{"experiment", experiment}, {"axis", axis}, {"subjects", subjects}, {"rows", jrows}, {"metadata", metadata}};
}

ResultsTable ResultsTable::from_json(const json& j) {
  ResultsTable t;
  t.experiment = j.at("experiment").get<std::string>();
  t.axis = j.at("axis").get<std::string>();
  t.subjects = j.at("subjects").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) {
    t.rows.push_back({r.at("name").get<std::string>(), r.at("per_subject").get<std::vector<double>>(),
                      r.at("average").get<double>()});
  }
  t.metadata = j.value("metadata", json::object());
  return t;
}

std::string ResultsTable::render_text() const {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream out;
  out << experiment << " / " << axis << '\n';
  out << std::left << std::setw(static_cast<int>(name_w)) << "method";
  for (const auto& s : subjects) out << "  " << std::setw(6) << s;
  out << "  Average\n";
  out << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(name_w)) << r.name;
    for (double v : r.per_subject) out << "  " << std::setw(6) << v;
    out << "  " << r.average << '\n';
  }
  return out.str();
}

std::string ResultsTable::render_svg() const {
  const int bar_w = 10, group_gap = 14, chart_h = 200, top = 30, left = 40;
  const int groups = static_cast<int>(subjects.size()) + 1;  // + Average
  const int per_group = std::max<int>(1, static_cast<int>(rows.size())) * bar_w + group_gap;
  const int width = left + groups * per_group + 160;
  const int height = top + chart_h + 40;
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << experiment << " / " << axis << "</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + chart_h << "\" x2=\"" << width - 160 << "\" y2=\""
      << top + chart_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = top + chart_h - tick * chart_h / 4;
    svg << "<text x=\"4\" y=\"" << y + 4 << "\" font-size=\"10\">" << std::fixed << std::setprecision(2)
        << tick / 4.0 << "</text>\n";
  }
  for (int g = 0; g < groups; ++g) {
    const int gx = left + g * per_group;
    const std::string label = g < static_cast<int>(subjects.size()) ? subjects[static_cast<std::size_t>(g)] : "Avg";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double v = g < static_cast<int>(subjects.size()) ? rows[r].per_subject[static_cast<std::size_t>(g)] : rows[r].average;
      const int h = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * chart_h));
      svg << "<rect x=\"" << gx + static_cast<int>(r) * bar_w << "\" y=\"" << top + chart_h - h << "\" width=\""
          << bar_w - 1 << "\" height=\"" << h << "\" fill=\"" << palette[r % 7] << "\"/>\n";
    }
    svg << "<text x=\"" << gx << "\" y=\"" << top + chart_h + 14 << "\" font-size=\"10\">" << label << "</text>\n";
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = top + 10 + static_cast<int>(r) * 16;
    svg << "<rect x=\"" << width - 150 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
        << palette[r % 7] << "\"/><text x=\"" << width - 135 << "\" y=\"" << y << "\" font-size=\"11\">"
        << rows[r].name << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void ResultsTable::write(const fs::path& dir) const {
  fs::create_directories(dir);
  std::ofstream(dir / (axis + ".json")) << to_json().dump(1) << '\n';
  std::ofstream(dir / (axis + ".txt")) << render_text();
  std::ofstream(dir / (axis + ".svg")) << render_svg();
}

std::string_view to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kIterations: return "iterations";
    case AblationAxis::kHands: return "hands";
    case AblationAxis::kJoint: return "joint";
  }
  return "iterations";
}

AblationAxis axis_from_string(std::string_view s) {
  if (s == "iterations") return AblationAxis::kIterations;
  if (s == "hands") return AblationAxis::kHands;
  if (s == "joint") return AblationAxis::kJoint;
  throw InputError("unknown ablation axis '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

EmbeddedVideo embed_video(const GestureSample& sample, const Embedder& embedder, bool with_predictions) {
  EmbeddedVideo v;
  v.video_id = sample.video_id;
  v.subject = sample.subject;
  v.label = sample.sign_class;
  v.left = embedder.embed(sample.left);
  v.right = embedder.embed(sample.right);
  if (with_predictions && embedder.trained()) {
    for (const auto& p : embedder.predict(sample.left)) v.left_shapes.push_back(p.class_id);
    for (const auto& p : embedder.predict(sample.right)) v.right_shapes.push_back(p.class_id);
  }
  return v;
}

SignExample make_example(const EmbeddedVideo& video, const SequenceModelConfig& config, int garbage_id, int rest_id,
                         const GestureSample* patches) {
  SignExample ex;
  ex.video_id = video.video_id;
  ex.subject = video.subject;
  ex.label = video.label;
  for (Side side : {Side::kLeft, Side::kRight}) {
    const auto& all = side == Side::kLeft ? video.left : video.right;
    const auto& shapes = side == Side::kLeft ? video.left_shapes : video.right_shapes;
    const auto frames = static_cast<int>(all.rows());
    std::vector<std::size_t> positions;
    if (config.filter_uninformative && static_cast<int>(shapes.size()) == frames) {
      positions = informative_frames(shapes, garbage_id, rest_id, true);
    } else {
      positions.resize(static_cast<std::size_t>(frames));
      std::iota(positions.begin(), positions.end(), std::size_t{0});
    }
    const auto picks = sample_uniform(static_cast<int>(positions.size()), config.time_steps);
    nn::Matrix m(config.time_steps, all.cols());
    std::vector<cv::Mat> imgs;
    for (int t = 0; t < config.time_steps; ++t) {
      const auto row = positions[static_cast<std::size_t>(picks[static_cast<std::size_t>(t)])];
      m.row(t) = all.row(static_cast<Eigen::Index>(row));
      if (patches) imgs.push_back(patches->hand(side)[row].image);
    }
    if (side == Side::kLeft) {
      ex.left = std::move(m);
      ex.left_patches = std::move(imgs);
    } else {
      ex.right = std::move(m);
      ex.right_patches = std::move(imgs);
    }
  }
  return ex;
}

SplitAudit audit_split(const SplitPlan& plan, std::span<const SignExample> train, std::span<const SignExample> test) {
  SplitAudit a;
  a.test_subject = plan.test_subject;
  a.train_videos = train.size();
  a.test_videos = test.size();
  std::set<std::string> test_ids;
  for (const auto& ex : test) test_ids.insert(ex.video_id);
  for (const auto& ex : train) {
    if (ex.subject == plan.test_subject || test_ids.contains(ex.video_id)) ++a.violations;
  }
  return a;
}

namespace {

Embedder load_embedder(const AblationConfig& config, int iteration) {
  const auto it = config.embedder_checkpoints.find(iteration);
  if (it == config.embedder_checkpoints.end()) {
    throw StateError("missing embedder checkpoint for iteration " + std::to_string(iteration));
  }
  if (!fs::exists(it->second)) {
    throw StateError("missing embedder checkpoint for iteration " + std::to_string(iteration) + ": " +
                     it->second.string());
  }
  auto e = Embedder::load(it->second);
  e.freeze();
  return e;
}

struct SplitData {
  SplitPlan plan;
  std::vector<SignExample> train;
  std::vector<SignExample> test;
};

std::vector<SplitData> build_splits(std::span<const SignExample> examples, const std::vector<std::string>& only,
                                    std::vector<SplitAudit>* audits) {
  std::vector<std::string> subjects;
  for (const auto& ex : examples) subjects.push_back(ex.subject);
  std::vector<SplitData> out;
  for (auto& plan : make_splits(subjects)) {
    if (!only.empty() && std::find(only.begin(), only.end(), plan.test_subject) == only.end()) continue;
    SplitData d;
    for (const auto& ex : examples) {
      (ex.subject == plan.test_subject ? d.test : d.train).push_back(ex);
    }
    const auto audit = audit_split(plan, d.train, d.test);
    if (audits) audits->push_back(audit);
    if (audit.violations != 0) {
      throw std::logic_error("split for " + plan.test_subject + " leaks " + std::to_string(audit.violations) +
                             " test-subject videos into training");
    }
    d.plan = std::move(plan);
    out.push_back(std::move(d));
  }
  if (out.empty()) throw InputError("no split matches the requested test subjects");
  return out;
}

std::vector<int> labels_of(std::span<const SignExample> examples) {
  std::vector<int> out;
  for (const auto& ex : examples) out.push_back(ex.label);
  return out;
}

}  // namespace

ResultsTable run_ablation(std::span<const GestureSample> dataset, AblationAxis axis, const AblationConfig& config,
                          std::vector<SplitAudit>* audits) {
  if (dataset.empty()) throw InputError("evaluation dataset is empty");
  auto log = [&](const std::string& msg) {
    if (config.log) config.log(msg);
  };
  ResultsTable table;
  table.experiment = config.experiment;
  table.axis = std::string(to_string(axis));
  table.metadata["sequence_model"] = config.sequence.to_json();
  table.metadata["seed"] = config.sequence.seed;

  // Check every needed artifact before doing any work.
  std::vector<int> needed;
  if (axis == AblationAxis::kIterations) {
    needed = config.iterations;
  } else {
    needed = {config.final_iteration};
  }
  for (int k : needed) {
    const auto it = config.embedder_checkpoints.find(k);
    if (it == config.embedder_checkpoints.end() || !fs::exists(it->second)) {
      throw StateError("missing embedder checkpoint for iteration " + std::to_string(k) +
                       (it == config.embedder_checkpoints.end() ? std::string() : ": " + it->second.string()));
    }
  }

  const bool joint = axis == AblationAxis::kJoint;
  auto examples_for = [&](const Embedder& embedder) {
    std::vector<SignExample> examples;
    for (const auto& sample : dataset) {
      const auto ev = embed_video(sample, embedder, config.sequence.filter_uninformative);
      examples.push_back(make_example(ev, config.sequence, config.garbage_id, config.rest_id, joint ? &sample : nullptr));
    }
    return examples;
  };

  std::vector<std::vector<double>> columns;  // per row, per subject
  std::vector<std::string> row_names;
  auto set_subjects = [&](const std::vector<SplitData>& splits) {
    if (!table.subjects.empty()) return;
    for (const auto& s : splits) table.subjects.push_back(s.plan.test_subject);
  };
  std::vector<SplitAudit> local_audits;
  auto* audit_sink = audits ? audits : &local_audits;

  if (axis == AblationAxis::kIterations) {
    for (int k : config.iterations) {
      const Embedder embedder = load_embedder(config, k);
      log("iteration " + std::to_string(k) + ": embedding " + std::to_string(dataset.size()) + " videos");
      const auto splits = build_splits(examples_for(embedder), config.only_subjects, audit_sink);
      set_subjects(splits);
      std::vector<double> accs;
      for (std::size_t s = 0; s < splits.size(); ++s) {
        auto cfg = config.sequence;
        cfg.fusion = FusionMode::kMean;
        cfg.seed = config.sequence.seed + s;
        SignClassifier model(cfg);
        model.train(splits[s].train);
        std::vector<int> preds;
        for (const auto& ex : splits[s].test) preds.push_back(model.predict(ex).predicted_class);
        accs.push_back(accuracy(preds, labels_of(splits[s].test)));
        log("  iteration " + std::to_string(k) + " test " + splits[s].plan.test_subject + ": " + std::to_string(accs.back()));
      }
      row_names.push_back("iteration-" + std::to_string(k));
      columns.push_back(accs);
    }
  } else if (axis == AblationAxis::kHands) {
    const Embedder embedder = load_embedder(config, config.final_iteration);
    const auto splits = build_splits(examples_for(embedder), config.only_subjects, audit_sink);
    set_subjects(splits);
    row_names = {"left", "right", "both-max", "both-concat", "both-mean"};
    columns.assign(5, {});
    for (std::size_t s = 0; s < splits.size(); ++s) {
      auto cfg = config.sequence;
      cfg.seed = config.sequence.seed + s;
      cfg.fusion = FusionMode::kMean;
      SignClassifier per_hand(cfg);
      per_hand.train(splits[s].train);
      cfg.fusion = FusionMode::kConcat;
      SignClassifier concat(cfg);
      concat.train(splits[s].train);
      std::vector<int> left, right, mx, cat, mean;
      for (const auto& ex : splits[s].test) {
        const auto pm = per_hand.predict(ex, FusionMode::kMean);
        left.push_back(argmax(pm.left_logits));
        right.push_back(argmax(pm.right_logits));
        mean.push_back(pm.predicted_class);
        mx.push_back(per_hand.predict(ex, FusionMode::kMax).predicted_class);
        cat.push_back(concat.predict(ex).predicted_class);
      }
      const auto labels = labels_of(splits[s].test);
      columns[0].push_back(accuracy(left, labels));
      columns[1].push_back(accuracy(right, labels));
      columns[2].push_back(accuracy(mx, labels));
      columns[3].push_back(accuracy(cat, labels));
      columns[4].push_back(accuracy(mean, labels));
      log("  hands test " + splits[s].plan.test_subject + " done");
    }
  } else {
    const Embedder frozen = load_embedder(config, config.final_iteration);
    const auto splits = build_splits(examples_for(frozen), config.only_subjects, audit_sink);
    set_subjects(splits);
    row_names = {"separate", "joint"};
    columns.assign(2, {});
    std::vector<std::string> checksum_notes;
    for (std::size_t s = 0; s < splits.size(); ++s) {
      auto cfg = config.sequence;
      cfg.seed = config.sequence.seed + s;
      cfg.fusion = FusionMode::kMean;
      const auto before = frozen.checksum();
      SignClassifier separate(cfg);
      separate.train(splits[s].train);
      if (frozen.checksum() != before) throw std::logic_error("frozen embedder changed during sequence training");
      std::vector<int> preds;
      for (const auto& ex : splits[s].test) preds.push_back(separate.predict(ex).predicted_class);
      const auto labels = labels_of(splits[s].test);
      columns[0].push_back(accuracy(preds, labels));

      Embedder tuned = frozen;
      tuned.unfreeze();
      SignClassifier joint_model(cfg);
      joint_model.train(splits[s].train, &tuned);
      tuned.freeze();
      preds.clear();
      for (const auto& ex : splits[s].test) {
        // Re-embed the test video with the jointly tuned embedder.
        const auto& sample = *std::find_if(dataset.begin(), dataset.end(),
                                           [&](const GestureSample& g) { return g.video_id == ex.video_id; });
        const auto ev = embed_video(sample, tuned, cfg.filter_uninformative);
        preds.push_back(joint_model.predict(make_example(ev, cfg, config.garbage_id, config.rest_id)).predicted_class);
      }
      columns[1].push_back(accuracy(preds, labels));
      table.metadata["embedder_checksum_changed"] = tuned.checksum() != frozen.checksum();
      log("  joint test " + splits[s].plan.test_subject + " done");
    }
  }

  for (std::size_t r = 0; r < row_names.size(); ++r) table.add_row(row_names[r], columns[r]);
  json audit_json = json::array();
  for (const auto& a : *audit_sink) {
    audit_json.push_back({{"test_subject", a.test_subject}, {"train_videos", a.train_videos},
                          {"test_videos", a.test_videos}, {"violations", a.violations}});
  }
  table.metadata["split_audit"] = audit_json;
  return table;
}

}  // namespace finehand
