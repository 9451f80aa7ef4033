// finehand: command-line driver for the hand-shape / sign pipeline.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "finehand/annotation_service.hpp"
#include "finehand/errors.hpp"
#include "finehand/workspace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace finehand;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed config file " + path + ": " + e.what());
  }
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

template <typename Config>
Config merged(const Config& base, const json& patch) {
  json j = base.to_json();
  j.merge_patch(patch);
  return Config::from_json(j);
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

AnnotationService* g_service = nullptr;
extern "C" void on_signal(int) {
  if (g_service) g_service->stop();
}

fs::path require_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw StateError("missing " + flag + " checkpoint");
  if (!fs::exists(path)) throw StateError("checkpoint given by " + flag + " does not exist: " + path);
  return path;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finehand: hand-shape bootstrap labeling and sign recognition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  const char* env_root = std::getenv("FINEHAND_DATA_ROOT");
  std::string data_root = env_root ? env_root : "data";
  std::string config_path;
  app.add_option("--data-root", data_root, "Workspace root (default: $FINEHAND_DATA_ROOT or ./data)");
  app.add_option("--config", config_path, "JSON config with crop/embedder/sequence/synth sections");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic gesture dataset");
  std::string synth_spec, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "SynthSpec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory (default: <root>/synth)");
  synth->add_option("--seed", synth_seed, "Override the SynthSpec seed");

  // extract
  auto* extract = app.add_subcommand("extract", "Crop hand patches from frames and keypoints");
  std::string extract_dataset_dir, extract_out;
  std::optional<int> patch_size;
  extract->add_option("--dataset", extract_dataset_dir, "Directory with dataset.json, frames/, keypoints/");
  extract->add_option("--out", extract_out, "Patch tree root (default: <root>/patches)");
  extract->add_option("--patch-size", patch_size, "Output patch side in pixels");

  // ingest-labels
  auto* ingest = app.add_subcommand("ingest-labels", "Add manual labels, review decisions or oracle answers");
  std::string ingest_manual_file, ingest_decisions, ingest_oracle, store_dir, patches_dir;
  int ingest_iteration = 1;
  double manual_fraction = 0.125;
  ingest->add_option("--manual", ingest_manual_file, "JSONL of {video_id, frame_index, side, class_id}");
  ingest->add_option("--decisions", ingest_decisions, "JSON list of {ref, action, final_class?}");
  ingest->add_option("--oracle", ingest_oracle, "Ground-truth JSONL answering for a scripted reviewer");
  ingest->add_option("--iteration", ingest_iteration, "Iteration the labels belong to");
  ingest->add_option("--manual-fraction", manual_fraction, "With --oracle at iteration 1: fraction of videos labeled");
  ingest->add_option("--store", store_dir, "Label store directory (default: <root>/store)");
  ingest->add_option("--patches", patches_dir, "Patch tree root (default: <root>/patches)");

  // predict-shapes
  auto* predict = app.add_subcommand("predict-shapes", "Queue confident hand-shape predictions for review");
  std::string embedder_path;
  int predict_iteration = 2;
  double threshold = 0.9;
  predict->add_option("--embedder", embedder_path, "Embedder checkpoint");
  predict->add_option("--iteration", predict_iteration, "Review iteration (>= 2)")->required();
  predict->add_option("--threshold", threshold, "Minimum confidence to enqueue");
  predict->add_option("--store", store_dir);
  predict->add_option("--patches", patches_dir);

  // serve-annotate
  auto* serve = app.add_subcommand("serve-annotate", "Serve the review queue over HTTP");
  std::string host = "127.0.0.1", static_dir;
  int port = 8765;
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--static", static_dir, "Directory of UI files served at /");
  serve->add_option("--store", store_dir);
  serve->add_option("--patches", patches_dir);

  // train-embedder
  auto* train_emb = app.add_subcommand("train-embedder", "Fine-tune the hand-shape embedder on the label pool");
  int emb_iteration = 1;
  std::string emb_out, emb_init;
  std::optional<int> emb_epochs;
  std::optional<std::uint64_t> emb_seed;
  train_emb->add_option("--iteration", emb_iteration, "Pool iteration (0 writes the untrained init)")->required();
  train_emb->add_option("--out", emb_out, "Checkpoint path (default: <root>/models/embedder_iter<k>.ckpt)");
  train_emb->add_option("--init", emb_init, "Start from this checkpoint");
  train_emb->add_option("--epochs", emb_epochs);
  train_emb->add_option("--seed", emb_seed);
  train_emb->add_option("--store", store_dir);
  train_emb->add_option("--patches", patches_dir);

  // train-signs
  auto* train_signs = app.add_subcommand("train-signs", "Train the sign classifier on embedding sequences");
  std::string signs_out, fusion = "mean", exclude_subject;
  bool joint = false, filter = false;
  std::optional<std::uint64_t> signs_seed;
  train_signs->add_option("--embedder", embedder_path, "Embedder checkpoint");
  train_signs->add_option("--out", signs_out, "Output directory (default: <root>/models/signs)");
  train_signs->add_option("--fusion", fusion)->check(CLI::IsMember({"mean", "max", "concat"}));
  train_signs->add_flag("--joint", joint, "Update the embedder from the sequence loss");
  train_signs->add_flag("--filter-uninformative", filter, "Drop garbage/rest frames before sampling");
  train_signs->add_option("--exclude-subject", exclude_subject, "Hold this subject out of training");
  train_signs->add_option("--seed", signs_seed);
  train_signs->add_option("--patches", patches_dir);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Leave-one-subject-out ablations");
  std::string experiment = "default", models_dir, results_dir;
  std::vector<std::string> axes{"iterations"};
  std::vector<int> iterations{0, 1, 2, 3};
  std::optional<int> final_iteration;
  evaluate->add_option("--experiment", experiment);
  evaluate->add_option("--axis", axes, "iterations, hands, joint (repeatable)")
      ->check(CLI::IsMember({"iterations", "hands", "joint"}));
  evaluate->add_option("--iterations", iterations, "Embedder iterations to compare");
  evaluate->add_option("--final-iteration", final_iteration, "Embedder used on hands/joint axes");
  evaluate->add_option("--models", models_dir, "Directory of embedder_iter<k>.ckpt (default: <root>/models)");
  evaluate->add_option("--results", results_dir, "Output root (default: <root>/results)");
  evaluate->add_flag("--filter-uninformative", filter);
  evaluate->add_option("--patches", patches_dir);

  // export-embeddings
  auto* export_cmd = app.add_subcommand("export-embeddings", "Dump per-frame embeddings as .npy");
  std::string export_out;
  export_cmd->add_option("--embedder", embedder_path, "Embedder checkpoint");
  export_cmd->add_option("--out", export_out, "Output root (default: <root>/embeddings)");
  export_cmd->add_option("--patches", patches_dir);

  // plot-results
  auto* plot = app.add_subcommand("plot-results", "Render results JSON tables as SVG bar charts");
  std::vector<std::string> plot_inputs;
  plot->add_option("tables", plot_inputs, "results/<experiment>/<axis>.json files")->required()->check(CLI::ExistingFile);

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "Run the whole synthetic chain end to end");
  pipeline->add_option("--experiment", experiment);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const Workspace ws{data_root};
    const json cfg = load_config_file(config_path);
    const fs::path store_path = store_dir.empty() ? ws.store() : fs::path(store_dir);
    const fs::path patches_path = patches_dir.empty() ? ws.patches() : fs::path(patches_dir);
    const auto crop = crop_config_from_json(section(cfg, "crop"));
    auto emb_cfg = merged(PipelineConfig::desk_scale().embedder, section(cfg, "embedder"));
    auto seq_cfg = merged(PipelineConfig::desk_scale().sequence, section(cfg, "sequence"));

    if (*synth) {
      SynthSpec spec = synth_spec.empty() ? SynthSpec{} : SynthSpec::from_json(load_config_file(synth_spec));
      if (cfg.contains("synth")) spec = merged(spec, cfg.at("synth"));
      if (synth_seed) spec.seed = *synth_seed;
      const fs::path out = synth_out.empty() ? ws.synth() : fs::path(synth_out);
      write_synth_dataset(SynthGenerator(spec), out);
      write_manifest(out, "synth", {{"spec", synth_spec}}, spec.to_json(), spec.seed);
      log_line("wrote synthetic dataset to " + out.string());
    } else if (*extract) {
      auto c = crop;
      if (patch_size) c.patch_size = *patch_size;
      const fs::path dataset = extract_dataset_dir.empty() ? ws.synth() : fs::path(extract_dataset_dir);
      const fs::path out = extract_out.empty() ? ws.patches() : fs::path(extract_out);
      extract_dataset(dataset, out, c, log_line);
      write_manifest(out, "extract", {{"dataset", dataset.string()}}, crop_config_to_json(c), 0);
    } else if (*ingest) {
      const int given = !ingest_manual_file.empty() + !ingest_decisions.empty() + !ingest_oracle.empty();
      if (given != 1) throw UsageError("ingest-labels needs exactly one of --manual, --decisions, --oracle");
      auto store = HandshapeStore::open(store_path);
      json summary;
      if (!ingest_manual_file.empty()) {
        const auto oracle = OracleAnnotator::from_truth_file(ingest_manual_file);
        const auto labels = oracle.manual_labels(list_videos(patches_path));
        store->ingest_manual(labels);
        summary["manual"] = labels.size();
      } else if (!ingest_decisions.empty()) {
        std::vector<Decision> decisions;
        for (const auto& d : load_config_file(ingest_decisions)) {
          Decision dec;
          dec.ref = PatchRef::from_key(d.at("ref").get<std::string>());
          const auto action = d.at("action").get<std::string>();
          dec.action = action == "confirm"   ? Decision::Action::kConfirm
                       : action == "relabel" ? Decision::Action::kRelabel
                       : action == "reject"  ? Decision::Action::kReject
                                             : throw InputError("unknown action '" + action + "'");
          dec.final_class = d.value("final_class", -1);
          decisions.push_back(dec);
        }
        const auto r = store->apply_corrections(decisions, ingest_iteration);
        summary = {{"confirmed", r.confirmed}, {"relabeled", r.relabeled}, {"rejected", r.rejected}};
      } else {
        const auto oracle = OracleAnnotator::from_truth_file(ingest_oracle);
        if (ingest_iteration == 1) {
          const auto labels = oracle.manual_labels(manual_subset(list_videos(patches_path), manual_fraction));
          store->ingest_manual(labels);
          summary["manual"] = labels.size();
        } else {
          const auto r = store->apply_corrections(oracle.review(store->pending(ingest_iteration)), ingest_iteration);
          summary = {{"confirmed", r.confirmed}, {"relabeled", r.relabeled}, {"rejected", r.rejected}};
        }
      }
      write_manifest(store_path, "ingest-labels",
                     {{"manual", ingest_manual_file}, {"decisions", ingest_decisions}, {"oracle", ingest_oracle}},
                     {{"iteration", ingest_iteration}, {"manual_fraction", manual_fraction}}, 0);
      std::cout << summary.dump() << '\n';
    } else if (*predict) {
      const auto embedder = Embedder::load(require_file(
          embedder_path.empty() ? ws.embedder_checkpoint(predict_iteration - 1).string() : embedder_path, "--embedder"));
      auto store = HandshapeStore::open(store_path);
      const auto samples = load_samples(patches_path);
      const auto r = predict_shapes(embedder, samples, *store, threshold, predict_iteration);
      write_manifest(store_path, "predict-shapes", {{"embedder", embedder_path}, {"patches", patches_path.string()}},
                     {{"threshold", threshold}, {"iteration", predict_iteration}}, 0);
      std::cout << json{{"enqueued", r.enqueued}, {"discarded", r.discarded},
                        {"skipped_already_labeled", r.skipped_already_labeled}}
                       .dump()
                << '\n';
    } else if (*serve) {
      auto store = HandshapeStore::open(store_path);
      AnnotationService service(*store, patches_path,
                                static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
      const int bound = service.bind(host, port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      log_line("serving annotation queue on http://" + host + ":" + std::to_string(bound));
      service.run();
      g_service = nullptr;
    } else if (*train_emb) {
      if (emb_epochs) emb_cfg.epochs = *emb_epochs;
      if (emb_seed) emb_cfg.seed = *emb_seed;
      const auto store = HandshapeStore::open(store_path);
      std::optional<fs::path> init;
      if (!emb_init.empty()) init = require_file(emb_init, "--init");
      else if (emb_iteration > 0 && fs::exists(ws.embedder_checkpoint(0))) init = ws.embedder_checkpoint(0);
      const auto embedder = train_embedder_iteration(emb_cfg, *store, patches_path, emb_iteration, init, log_line);
      const fs::path out = emb_out.empty() ? ws.embedder_checkpoint(emb_iteration) : fs::path(emb_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      embedder.save(out);
      write_manifest(out.parent_path(), "train-embedder-iter" + std::to_string(emb_iteration),
                     {{"store", store_path.string()}, {"patches", patches_path.string()}, {"init", emb_init}},
                     emb_cfg.to_json(), emb_cfg.seed);
      log_line("wrote " + out.string());
    } else if (*train_signs) {
      auto embedder = Embedder::load(require_file(embedder_path, "--embedder"));
      seq_cfg.fusion = fusion_from_string(fusion);
      seq_cfg.filter_uninformative = filter;
      if (signs_seed) seq_cfg.seed = *signs_seed;
      const auto samples = load_samples(patches_path);
      std::vector<SignExample> examples;
      for (const auto& s : samples) {
        if (!exclude_subject.empty() && s.subject == exclude_subject) continue;
        examples.push_back(make_example(embed_video(s, embedder, filter), seq_cfg, 0, 1, joint ? &s : nullptr));
      }
      if (examples.empty()) throw InputError("no training videos left");
      if (joint) embedder.unfreeze();
      else embedder.freeze();
      SignClassifier model(seq_cfg);
      const fs::path out = signs_out.empty() ? ws.models() / "signs" : fs::path(signs_out);
      fs::create_directories(out);
      std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
      const auto report = model.train(examples, joint ? &embedder : nullptr, [&](const SignEpoch& e) {
        json line{{"epoch", e.epoch}, {"loss", e.loss}};
        if (e.val_accuracy) line["val_accuracy"] = *e.val_accuracy;
        metrics << line.dump() << '\n';
      });
      model.save(out / "sign_model.ckpt");
      if (joint) embedder.save(out / "embedder_joint.ckpt");
      write_manifest(out, "train-signs", {{"embedder", embedder_path}, {"patches", patches_path.string()}},
                     seq_cfg.to_json(), seq_cfg.seed);
      log_line("trained on " + std::to_string(report.train_size) + " videos, best epoch " +
               std::to_string(report.best_epoch));
    } else if (*evaluate) {
      AblationConfig ab;
      ab.experiment = experiment;
      ab.sequence = seq_cfg;
      ab.sequence.filter_uninformative = filter || seq_cfg.filter_uninformative;
      ab.iterations = iterations;
      ab.final_iteration = final_iteration.value_or(*std::max_element(iterations.begin(), iterations.end()));
      ab.log = log_line;
      const fs::path models = models_dir.empty() ? ws.models() : fs::path(models_dir);
      for (const auto& entry : fs::directory_iterator(models)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("embedder_iter", 0) == 0 && entry.path().extension() == ".ckpt") {
          ab.embedder_checkpoints[std::stoi(name.substr(13))] = entry.path();
        }
      }
      const auto samples = load_samples(patches_path);
      const fs::path out = (results_dir.empty() ? ws.results() : fs::path(results_dir)) / experiment;
      for (const auto& axis : axes) {
        const auto table = run_ablation(samples, axis_from_string(axis), ab);
        table.write(out);
        std::cout << table.render_text();
      }
      write_manifest(out, "evaluate", {{"patches", patches_path.string()}, {"models", models.string()}},
                     {{"sequence", ab.sequence.to_json()}, {"axes", axes}, {"iterations", iterations}},
                     ab.sequence.seed);
    } else if (*export_cmd) {
      const auto embedder = Embedder::load(require_file(embedder_path, "--embedder"));
      const fs::path out = export_out.empty() ? ws.embeddings() : fs::path(export_out);
      export_embeddings(embedder, load_samples(patches_path), out);
      write_manifest(out, "export-embeddings", {{"embedder", embedder_path}}, embedder.config().to_json(),
                     embedder.config().seed);
    } else if (*plot) {
      for (const auto& input : plot_inputs) {
        const auto table = ResultsTable::from_json(load_config_file(input));
        fs::path svg = input;
        svg.replace_extension(".svg");
        std::ofstream(svg) << table.render_svg();
        log_line("wrote " + svg.string());
      }
    } else if (*pipeline) {
      auto pc = PipelineConfig::from_json(cfg);
      if (!experiment.empty() && experiment != "default") pc.experiment = experiment;
      const auto result = run_synthetic_pipeline(pc, ws, log_line);
      for (const auto& [axis, table] : result.tables) std::cout << table.render_text();
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const StateError& e) {
    std::cerr << "state error: " << e.what() << '\n';
    return 1;
  } catch (const ConflictError& e) {
    std::cerr << "conflict: " << e.what() << '\n';
    return 1;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
