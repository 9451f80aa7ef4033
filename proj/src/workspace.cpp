#include "finehand/workspace.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "finehand/errors.hpp"
#include "finehand/npy.hpp"

namespace finehand {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void emit(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

}  // namespace

fs::path Workspace::embedder_checkpoint(int iteration) const {
  return models() / ("embedder_iter" + std::to_string(iteration) + ".ckpt");
}

json crop_config_to_json(const CropConfig& c) {
  return {{"scale", c.scale},
          {"min_side", c.min_side},
          {"patch_size", c.patch_size},
          {"kp_conf_threshold", c.kp_conf_threshold},
          {"min_valid_kp", c.min_valid_kp}};
}

CropConfig crop_config_from_json(const json& j, CropConfig base) {
  base.scale = j.value("scale", base.scale);
  base.min_side = j.value("min_side", base.min_side);
  base.patch_size = j.value("patch_size", base.patch_size);
  base.kp_conf_threshold = j.value("kp_conf_threshold", base.kp_conf_threshold);
  base.min_valid_kp = j.value("min_valid_kp", base.min_valid_kp);
  if (base.scale <= 0 || base.min_side < 1 || base.patch_size < 1 || base.min_valid_kp < 1) {
    throw InputError("crop config values must be positive");
  }
  return base;
}

std::string config_hash(const json& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const fs::path& dir, const std::string& stage, const json& inputs, const json& config,
                    std::uint64_t seed) {
  fs::create_directories(dir);
  const json manifest{{"stage", stage},
                      {"inputs", inputs},
                      {"config", config},
                      {"config_hash", config_hash(config)},
                      {"seed", seed},
                      {"versions", {{"finehand", kVersion}}}};
  std::ofstream(dir / ("manifest." + stage + ".json")) << manifest.dump(1) << '\n';
}

std::vector<std::string> extract_dataset(const fs::path& dataset, const fs::path& out, const CropConfig& config,
                                         const Logger& log) {
  const auto desc = read_json(dataset / "dataset.json");
  fs::create_directories(out);
  std::vector<std::string> ids;
  json listing = json::array();
  for (const auto& v : desc.at("videos")) {
    const auto id = v.at("video_id").get<std::string>();
    std::vector<cv::Mat> frames;
    std::vector<int> indices;
    for (const auto& [index, path] : list_numbered_images(dataset / "frames" / id)) {
      cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
      if (img.empty()) throw InputError("unreadable frame " + path.string());
      frames.push_back(std::move(img));
      indices.push_back(index);
    }
    if (frames.empty()) throw InputError("video " + id + " has no frames");
    const auto poses = read_pose_document(dataset / "keypoints" / (id + ".json"));
    auto sample = extract_gesture(id, frames, indices, poses.frames, config);
    sample.subject = v.at("subject").get<std::string>();
    sample.sign_class = v.at("sign_class").get<int>();
    write_patch_tree(out, sample);
    listing.push_back({{"video_id", id}, {"subject", sample.subject}, {"sign_class", sample.sign_class}});
    ids.push_back(id);
  }
  std::ofstream(out / "videos.json") << json{{"videos", listing}}.dump(1) << '\n';
  emit(log, "extracted " + std::to_string(ids.size()) + " videos into " + out.string());
  return ids;
}

std::vector<std::string> list_videos(const fs::path& patches) {
  std::vector<std::string> ids;
  const auto listing = read_json(patches / "videos.json");
  for (const auto& v : listing.at("videos")) ids.push_back(v.at("video_id").get<std::string>());
  return ids;
}

std::vector<GestureSample> load_samples(const fs::path& patches) {
  std::vector<GestureSample> out;
  for (const auto& id : list_videos(patches)) out.push_back(read_patch_tree(patches, id));
  return out;
}

std::vector<std::string> manual_subset(std::vector<std::string> video_ids, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("manual fraction must be in (0, 1]");
  std::sort(video_ids.begin(), video_ids.end());
  const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / fraction)));
  std::vector<std::string> out;
  for (std::size_t i = 0; i < video_ids.size(); i += stride) out.push_back(video_ids[i]);
  return out;
}

std::vector<LabeledPatch> labeled_pool(const HandshapeStore& store, const fs::path& patches, int up_to_iteration) {
  std::vector<LabeledPatch> pool;
  for (const auto& rec : store.training_pool(up_to_iteration)) {
    pool.push_back({read_patch_image(patches, rec.ref), rec.class_id, rec.ref.side});
  }
  return pool;
}

PredictionIngestReport predict_shapes(const Embedder& embedder, std::span<const GestureSample> samples,
                                      HandshapeStore& store, double threshold, int iteration) {
  std::vector<HandPatch> candidates;
  for (const auto& sample : samples) {
    for (Side side : {Side::kLeft, Side::kRight}) {
      for (const auto& patch : sample.hand(side)) {
        if (patch.valid && !store.find(patch.ref)) candidates.push_back(patch);
      }
    }
  }
  std::vector<ShapePredictionInput> inputs;
  if (!candidates.empty()) {
    for (const auto& p : embedder.predict(candidates)) inputs.push_back({p.ref, p.class_id, p.confidence});
  }
  return store.ingest_predictions(inputs, threshold, iteration);
}

Embedder train_embedder_iteration(const EmbedderConfig& config, const HandshapeStore& store, const fs::path& patches,
                                  int iteration, const std::optional<fs::path>& init, const Logger& log) {
  if (iteration < 0) throw InputError("iteration must be >= 0");
  Embedder embedder = init ? Embedder::load(*init) : Embedder(config);
  if (iteration == 0) return embedder;
  const auto pool = labeled_pool(store, patches, iteration);
  emit(log, "iteration " + std::to_string(iteration) + ": training embedder on " + std::to_string(pool.size()) +
                " patches");
  const auto report = embedder.train(pool, [&](const EmbedderEpoch& e) {
    emit(log, "  epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss) +
                  (e.heldout_accuracy ? " heldout " + std::to_string(*e.heldout_accuracy) : std::string()));
  });
  if (!report.warnings.empty()) {
    emit(log, "  " + std::to_string(report.warnings.size()) + " warning(s), first: " + report.warnings.front());
  }
  return embedder;
}

void export_embeddings(const Embedder& embedder, std::span<const GestureSample> samples, const fs::path& out) {
  for (const auto& sample : samples) {
    for (Side side : {Side::kLeft, Side::kRight}) {
      write_npy(out / sample.video_id / (std::string(to_string(side)) + ".npy"), embedder.embed(sample.hand(side)));
    }
  }
}

// ---------------------------------------------------------------------------

json PipelineConfig::to_json() const {
  return {{"experiment", experiment},
          {"synth", synth.to_json()},
          {"crop", crop_config_to_json(crop)},
          {"embedder", embedder.to_json()},
          {"sequence", sequence.to_json()},
          {"manual_fraction", manual_fraction},
          {"bootstrap_iterations", bootstrap_iterations},
          {"threshold", threshold},
          {"axes", axes}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c = desk_scale();
  auto merged = [](json base, const json& patch) {
    base.merge_patch(patch);
    return base;
  };
  c.experiment = j.value("experiment", c.experiment);
  if (j.contains("synth")) c.synth = SynthSpec::from_json(merged(c.synth.to_json(), j.at("synth")));
  if (j.contains("crop")) c.crop = crop_config_from_json(j.at("crop"), c.crop);
  if (j.contains("embedder")) c.embedder = EmbedderConfig::from_json(merged(c.embedder.to_json(), j.at("embedder")));
  if (j.contains("sequence")) c.sequence = SequenceModelConfig::from_json(merged(c.sequence.to_json(), j.at("sequence")));
  c.manual_fraction = j.value("manual_fraction", c.manual_fraction);
  c.bootstrap_iterations = j.value("bootstrap_iterations", c.bootstrap_iterations);
  c.threshold = j.value("threshold", c.threshold);
  if (j.contains("axes")) c.axes = j.at("axes").get<std::vector<std::string>>();
  for (const auto& a : c.axes) axis_from_string(a);
  if (c.bootstrap_iterations < 0) throw InputError("bootstrap_iterations must be >= 0");
  return c;
}

PipelineConfig PipelineConfig::desk_scale() {
  PipelineConfig c;
  c.crop.patch_size = c.synth.patch_size;
  c.embedder.embedding_dim = 128;
  c.embedder.stage_channels = {8, 16, 32};
  c.embedder.input_size = c.synth.patch_size;
  c.embedder.learning_rate = 2e-3f;
  c.embedder.batch_size = 32;
  c.embedder.epochs = 6;
  c.embedder.seed = c.synth.seed;
  c.sequence.input_dim = c.embedder.embedding_dim;
  c.sequence.hidden_size = 64;
  c.sequence.num_layers = 2;
  c.sequence.num_classes = c.synth.num_sign_classes;
  c.sequence.batch_size = 16;
  c.sequence.learning_rate = 3e-3f;
  c.sequence.max_epochs = 60;
  c.sequence.patience = 10;
  c.sequence.seed = c.synth.seed;
  return c;
}

PipelineResult run_synthetic_pipeline(const PipelineConfig& config, const Workspace& ws, const Logger& log) {
  PipelineResult result;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + "s";
  };

  const SynthGenerator generator(config.synth);
  write_synth_dataset(generator, ws.synth());
  write_manifest(ws.synth(), "synth", json::object(), config.synth.to_json(), config.synth.seed);
  emit(log, "synth done (" + elapsed() + ")");

  const auto ids = extract_dataset(ws.synth(), ws.patches(), config.crop, log);
  write_manifest(ws.patches(), "extract", {{"dataset", ws.synth().string()}}, crop_config_to_json(config.crop), 0);
  const auto samples = load_samples(ws.patches());

  if (fs::exists(ws.store())) fs::remove_all(ws.store());
  auto store = HandshapeStore::open(ws.store());
  const auto oracle = OracleAnnotator::from_truth_file(ws.synth() / "handshape_truth.jsonl");
  const auto manual_videos = manual_subset(ids, config.manual_fraction);
  const auto manual = oracle.manual_labels(manual_videos);
  store->ingest_manual(manual);
  emit(log, "manual labels: " + std::to_string(manual.size()) + " patches from " +
                std::to_string(manual_videos.size()) + " videos");

  fs::create_directories(ws.models());
  const auto init_path = ws.embedder_checkpoint(0);
  train_embedder_iteration(config.embedder, *store, ws.patches(), 0, std::nullopt).save(init_path);

  AblationConfig ablation;
  ablation.experiment = config.experiment;
  ablation.sequence = config.sequence;
  ablation.embedder_checkpoints[0] = init_path;
  ablation.log = log;
  ablation.garbage_id = store->catalogue().garbage_id();
  ablation.rest_id = store->catalogue().rest_id();

  const int last = 1 + config.bootstrap_iterations;
  for (int k = 1; k <= last; ++k) {
    const auto embedder = train_embedder_iteration(config.embedder, *store, ws.patches(), k, init_path, log);
    embedder.save(ws.embedder_checkpoint(k));
    ablation.embedder_checkpoints[k] = ws.embedder_checkpoint(k);
    json it{{"iteration", k}, {"pool", store->training_pool(k).size()}};
    if (k < last) {
      const auto ingest = predict_shapes(embedder, samples, *store, config.threshold, k + 1);
      const auto decisions = oracle.review(store->pending(k + 1));
      const auto corrected = store->apply_corrections(decisions, k + 1);
      it["enqueued"] = ingest.enqueued;
      it["discarded"] = ingest.discarded;
      it["confirmed"] = corrected.confirmed;
      it["relabeled"] = corrected.relabeled;
      it["rejected"] = corrected.rejected;
    }
    emit(log, "iteration " + std::to_string(k) + ": " + it.dump() + " (" + elapsed() + ")");
    result.iteration_log.push_back(std::move(it));
  }
  write_manifest(ws.models(), "train-embedder", {{"patches", ws.patches().string()}, {"store", ws.store().string()}},
                 config.embedder.to_json(), config.embedder.seed);
  result.ledger = store->ledger_json();

  ablation.iterations.clear();
  for (int k = 0; k <= last; ++k) ablation.iterations.push_back(k);
  ablation.final_iteration = last;
  const auto out_dir = ws.results() / config.experiment;
  for (const auto& axis_name : config.axes) {
    const auto axis = axis_from_string(axis_name);
    auto table = run_ablation(samples, axis, ablation, &result.audits);
    table.write(out_dir);
    emit(log, table.render_text() + "(" + elapsed() + ")");
    result.tables.emplace(axis_name, std::move(table));
  }
  write_manifest(out_dir, "evaluate", {{"patches", ws.patches().string()}, {"models", ws.models().string()}},
                 config.to_json(), config.sequence.seed);
  return result;
}

}  // namespace finehand
