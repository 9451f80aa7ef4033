#include "finehand/sequence_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "finehand/nn/checkpoint.hpp"

namespace finehand {

using nn::Matrix;
using nn::Vector;
using nlohmann::json;

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kMean: return "mean";
    case FusionMode::kMax: return "max";
    case FusionMode::kConcat: return "concat";
  }
  return "mean";
}

FusionMode fusion_from_string(std::string_view s) {
  if (s == "mean") return FusionMode::kMean;
  if (s == "max") return FusionMode::kMax;
  if (s == "concat") return FusionMode::kConcat;
  throw InputError("unknown fusion mode '" + std::string(s) + "'");
}

json SequenceModelConfig::to_json() const {
  return {{"input_dim", input_dim},
          {"num_layers", num_layers},
          {"hidden_size", hidden_size},
          {"time_steps", time_steps},
          {"num_classes", num_classes},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"fusion", to_string(fusion)},
          {"filter_uninformative", filter_uninformative},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"validation_fraction", validation_fraction},
          {"seed", seed}};
}

SequenceModelConfig SequenceModelConfig::from_json(const json& j) {
  SequenceModelConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.time_steps = j.value("time_steps", c.time_steps);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.fusion = fusion_from_string(j.value("fusion", std::string(to_string(c.fusion))));
  c.filter_uninformative = j.value("filter_uninformative", c.filter_uninformative);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.seed = j.value("seed", c.seed);
  return c;
}

void SequenceModelConfig::validate() const {
  if (input_dim < 1 || num_layers < 1 || hidden_size < 1 || time_steps < 1 || num_classes < 2 || batch_size < 1) {
    throw InputError("sequence model sizes must be positive");
  }
  if (!(learning_rate > 0)) throw InputError("learning_rate must be positive");
  if (max_epochs < 1 || patience < 1) throw InputError("max_epochs and patience must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw InputError("validation_fraction in [0,1)");
}

std::vector<int> sample_uniform(int num_frames, int time_steps) {
  if (num_frames < 1) throw InputError("cannot sample from zero frames");
  if (time_steps < 1) throw InputError("time_steps must be positive");
  std::vector<int> out(static_cast<std::size_t>(time_steps));
  for (int i = 0; i < time_steps; ++i) {
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(static_cast<long long>(i) * num_frames / time_steps);
  }
  return out;
}

std::vector<std::size_t> informative_frames(std::span<const int> predicted_shapes, int garbage_id, int rest_id,
                                            bool enabled) {
  std::vector<std::size_t> all(predicted_shapes.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (!enabled) return all;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < predicted_shapes.size(); ++i) {
    if (predicted_shapes[i] != garbage_id && predicted_shapes[i] != rest_id) kept.push_back(i);
  }
  return kept.empty() ? all : kept;
}

std::vector<double> fuse(std::span<const double> left, std::span<const double> right, FusionMode mode) {
  if (left.size() != right.size()) throw InputError("logit vectors differ in length");
  if (mode == FusionMode::kConcat) throw InputError("concat fusion requires the joint head of a trained model");
  std::vector<double> out(left.size());
  for (std::size_t i = 0; i < left.size(); ++i) {
    out[i] = mode == FusionMode::kMean ? (left[i] + right[i]) / 2.0 : std::max(left[i], right[i]);
  }
  return out;
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw InputError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

double cross_entropy(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& one_hot) {
  if (probabilities.rows() != one_hot.rows() || probabilities.cols() != one_hot.cols()) {
    throw InputError("prediction/label shape mismatch");
  }
  if (probabilities.rows() == 0) throw InputError("empty batch");
  const auto n = static_cast<double>(probabilities.rows());
  const Eigen::ArrayXXd logp = probabilities.array().max(kProbabilityEpsilon).log();
  return -(one_hot.array() * logp).sum() / n;
}

Eigen::MatrixXd cross_entropy_grad(const Eigen::MatrixXd& probabilities, const Eigen::MatrixXd& one_hot) {
  if (probabilities.rows() != one_hot.rows() || probabilities.cols() != one_hot.cols()) {
    throw InputError("prediction/label shape mismatch");
  }
  const auto n = static_cast<double>(probabilities.rows());
  return (-one_hot.array() / (n * probabilities.array().max(kProbabilityEpsilon))).matrix();
}

// ---------------------------------------------------------------------------

SignClassifier::SignClassifier(SequenceModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const int H = config_.hidden_size;
  left_encoder_ = nn::Lstm(config_.input_dim, H, config_.num_layers, "left.lstm", rng);
  right_encoder_ = nn::Lstm(config_.input_dim, H, config_.num_layers, "right.lstm", rng);
  left_head_ = nn::Linear(H, config_.num_classes, "left.head", rng);
  right_head_ = nn::Linear(H, config_.num_classes, "right.head", rng);
  joint_head_ = nn::Linear(2 * H, config_.num_classes, "joint.head", rng);
}

std::vector<nn::Param*> SignClassifier::parameters() {
  std::vector<nn::Param*> out;
  left_encoder_.collect(out);
  right_encoder_.collect(out);
  if (has_joint_head()) {
    joint_head_.collect(out);
  } else {
    left_head_.collect(out);
    right_head_.collect(out);
  }
  return out;
}

std::vector<const nn::Param*> SignClassifier::parameters() const {
  std::vector<const nn::Param*> out;
  left_encoder_.collect(out);
  right_encoder_.collect(out);
  if (has_joint_head()) {
    joint_head_.collect(out);
  } else {
    left_head_.collect(out);
    right_head_.collect(out);
  }
  return out;
}

std::uint64_t SignClassifier::checksum() const {
  const auto params = parameters();
  return nn::checksum(params);
}

void SignClassifier::check_shape(const Matrix& m) const {
  if (m.rows() != config_.time_steps || m.cols() != config_.input_dim) {
    throw InputError("sequence shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                     " does not match " + std::to_string(config_.time_steps) + "x" +
                     std::to_string(config_.input_dim));
  }
  if (!m.allFinite()) throw InputError("sequence contains non-finite values");
}

namespace {

std::vector<Matrix> to_steps(const Matrix& sequence) {
  std::vector<Matrix> steps;
  steps.reserve(static_cast<std::size_t>(sequence.rows()));
  for (Eigen::Index t = 0; t < sequence.rows(); ++t) steps.emplace_back(sequence.row(t).transpose());
  return steps;
}

std::vector<double> to_vec(const Matrix& column) {
  std::vector<double> v(static_cast<std::size_t>(column.rows()));
  for (Eigen::Index i = 0; i < column.rows(); ++i) v[static_cast<std::size_t>(i)] = column(i, 0);
  return v;
}

}  // namespace

Vector SignClassifier::encode(const Matrix& sequence, Side side) const {
  check_shape(sequence);
  const auto steps = to_steps(sequence);
  const auto& enc = side == Side::kLeft ? left_encoder_ : right_encoder_;
  return enc.forward(steps, nullptr).col(0);
}

Matrix SignClassifier::sequence_for(const SignExample& example, Side side, const Embedder* embedder) const {
  if (!embedder) return side == Side::kLeft ? example.left : example.right;
  const auto& patches = side == Side::kLeft ? example.left_patches : example.right_patches;
  if (static_cast<int>(patches.size()) != config_.time_steps) {
    throw InputError("joint training needs " + std::to_string(config_.time_steps) + " patches per hand");
  }
  Matrix m(config_.time_steps, config_.input_dim);
  for (std::size_t t = 0; t < patches.size(); ++t) {
    m.row(static_cast<Eigen::Index>(t)) = embedder->embed_one(patches[t], side).transpose();
  }
  return m;
}

SignPrediction SignClassifier::predict_with(const SignExample& example, FusionMode mode,
                                            const Embedder* embedder) const {
  if ((mode == FusionMode::kConcat) != has_joint_head()) {
    throw StateError(std::string("fusion '") + std::string(to_string(mode)) + "' is not available for a model trained with '" +
                     std::string(to_string(config_.fusion)) + "'");
  }
  const Vector hl = encode(sequence_for(example, Side::kLeft, embedder), Side::kLeft);
  const Vector hr = encode(sequence_for(example, Side::kRight, embedder), Side::kRight);
  SignPrediction p;
  p.video_id = example.video_id;
  if (mode == FusionMode::kConcat) {
    Matrix h(2 * config_.hidden_size, 1);
    h << hl, hr;
    p.fused_logits = to_vec(joint_head_.forward(h));
  } else {
    p.left_logits = to_vec(left_head_.forward(hl));
    p.right_logits = to_vec(right_head_.forward(hr));
    p.fused_logits = fuse(p.left_logits, p.right_logits, mode);
  }
  p.predicted_class = argmax(p.fused_logits);
  return p;
}

SignPrediction SignClassifier::predict(const SignExample& example, FusionMode mode) const {
  return predict_with(example, mode, nullptr);
}

SignPrediction SignClassifier::predict(const SignExample& example) const {
  return predict_with(example, config_.fusion, nullptr);
}

double SignClassifier::train_batch(std::span<const SignExample> examples, std::span<const std::size_t> batch,
                                   Embedder* joint_embedder, nn::Adam& optimizer, nn::Adam* embedder_optimizer) {
  const int T = config_.time_steps, D = config_.input_dim, H = config_.hidden_size;
  const auto B = static_cast<Eigen::Index>(batch.size());
  std::vector<Matrix> xl(static_cast<std::size_t>(T), Matrix(D, B)), xr(static_cast<std::size_t>(T), Matrix(D, B));
  Matrix y = Matrix::Zero(config_.num_classes, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& ex = examples[batch[static_cast<std::size_t>(b)]];
    const Matrix l = sequence_for(ex, Side::kLeft, joint_embedder);
    const Matrix r = sequence_for(ex, Side::kRight, joint_embedder);
    check_shape(l);
    check_shape(r);
    for (int t = 0; t < T; ++t) {
      xl[static_cast<std::size_t>(t)].col(b) = l.row(t).transpose();
      xr[static_cast<std::size_t>(t)].col(b) = r.row(t).transpose();
    }
    y(ex.label, b) = 1.0f;
  }

  const auto params = parameters();
  for (auto* p : params) p->zero_grad();
  if (joint_embedder) joint_embedder->zero_grad();

  nn::Lstm::Cache cl, cr;
  const Matrix hl = left_encoder_.forward(xl, &cl);
  const Matrix hr = right_encoder_.forward(xr, &cr);
  const float inv_b = 1.0f / static_cast<float>(B);
  auto batch_loss = [&](const Matrix& probs) {
    double loss = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
      Eigen::Index cls;
      y.col(b).maxCoeff(&cls);
      loss -= std::log(std::max(kProbabilityEpsilon, static_cast<double>(probs(cls, b))));
    }
    return loss / static_cast<double>(B);
  };

  double loss = 0.0;
  Matrix dhl, dhr;
  if (has_joint_head()) {
    Matrix h(2 * H, B);
    h << hl, hr;
    const Matrix probs = nn::softmax(joint_head_.forward(h));
    loss = batch_loss(probs);
    const Matrix dh = joint_head_.backward(h, (probs - y) * inv_b);
    dhl = dh.topRows(H);
    dhr = dh.bottomRows(H);
  } else {
    const Matrix pl = nn::softmax(left_head_.forward(hl));
    const Matrix pr = nn::softmax(right_head_.forward(hr));
    loss = 0.5 * (batch_loss(pl) + batch_loss(pr));
    dhl = left_head_.backward(hl, (pl - y) * inv_b);
    dhr = right_head_.backward(hr, (pr - y) * inv_b);
  }
  const auto dxl = left_encoder_.backward(cl, dhl);
  const auto dxr = right_encoder_.backward(cr, dhr);
  optimizer.step(params);

  if (joint_embedder) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& ex = examples[batch[static_cast<std::size_t>(b)]];
      for (int t = 0; t < T; ++t) {
        joint_embedder->accumulate_embedding_gradient(ex.left_patches[static_cast<std::size_t>(t)], Side::kLeft,
                                                      dxl[static_cast<std::size_t>(t)].col(b));
        joint_embedder->accumulate_embedding_gradient(ex.right_patches[static_cast<std::size_t>(t)], Side::kRight,
                                                      dxr[static_cast<std::size_t>(t)].col(b));
      }
    }
    joint_embedder->apply_gradients(*embedder_optimizer, 1.0f);
  }
  return loss;
}

SignTrainReport SignClassifier::train(std::span<const SignExample> examples, Embedder* joint_embedder,
                                      const std::function<void(const SignEpoch&)>& on_epoch) {
  if (examples.empty()) throw InputError("sign training set is empty");
  for (const auto& ex : examples) {
    if (ex.label < 0 || ex.label >= config_.num_classes) {
      throw InputError("sign label " + std::to_string(ex.label) + " out of range for " + ex.video_id);
    }
  }
  if (joint_embedder && joint_embedder->frozen()) joint_embedder = nullptr;

  // Stratified validation split.
  std::mt19937_64 rng(config_.seed ^ 0xa11ce5ULL);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(config_.num_classes));
  for (std::size_t i = 0; i < examples.size(); ++i) by_class[static_cast<std::size_t>(examples[i].label)].push_back(i);
  std::vector<std::size_t> train_idx, val_idx;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * config_.validation_fraction));
    val_idx.insert(val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  SignTrainReport report;
  report.train_size = train_idx.size();
  report.val_size = val_idx.size();

  nn::Adam optimizer(config_.learning_rate);
  std::optional<nn::Adam> embedder_optimizer;
  if (joint_embedder) embedder_optimizer.emplace(joint_embedder->config().learning_rate);

  const auto params = parameters();
  std::vector<Matrix> best_values;
  std::vector<Matrix> best_embedder_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto* p : params) best_values.push_back(p->value);
    if (joint_embedder) {
      best_embedder_values.clear();
      for (const auto* p : joint_embedder->parameters()) best_embedder_values.push_back(p->value);
    }
  };
  double best_acc = -1.0, best_val_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 1; epoch <= config_.max_epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(config_.batch_size)) {
      const std::size_t end = std::min(train_idx.size(), start + static_cast<std::size_t>(config_.batch_size));
      loss_sum += train_batch(examples, std::span(train_idx).subspan(start, end - start), joint_embedder, optimizer,
                              embedder_optimizer ? &*embedder_optimizer : nullptr);
      ++n_batches;
    }
    SignEpoch em;
    em.epoch = epoch;
    em.loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;

    if (!val_idx.empty()) {
      std::size_t correct = 0;
      double val_loss = 0.0;
      for (std::size_t i : val_idx) {
        const auto p = predict_with(examples[i], config_.fusion, joint_embedder);
        if (p.predicted_class == examples[i].label) ++correct;
        const double mx = *std::max_element(p.fused_logits.begin(), p.fused_logits.end());
        double z = 0.0;
        for (double v : p.fused_logits) z += std::exp(v - mx);
        val_loss += -(p.fused_logits[static_cast<std::size_t>(examples[i].label)] - mx - std::log(z));
      }
      const double acc = static_cast<double>(correct) / static_cast<double>(val_idx.size());
      val_loss /= static_cast<double>(val_idx.size());
      em.val_accuracy = acc;
      // Accuracy decides; validation loss breaks plateaus.
      if (acc > best_acc || (acc == best_acc && val_loss < best_val_loss)) {
        best_acc = acc;
        best_val_loss = val_loss;
        report.best_epoch = epoch;
        since_best = 0;
        snapshot();
      } else {
        ++since_best;
      }
    } else {
      report.best_epoch = epoch;
    }
    report.epochs.push_back(em);
    if (on_epoch) on_epoch(em);
    if (!val_idx.empty() && since_best >= config_.patience) break;
  }

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    if (joint_embedder) {
      auto eparams = joint_embedder->parameters();
      for (std::size_t i = 0; i < eparams.size(); ++i) eparams[i]->value = best_embedder_values[i];
    }
  }
  return report;
}

void SignClassifier::save(const std::filesystem::path& path) const {
  const auto params = parameters();
  nn::save_checkpoint(path, {{"kind", "sign_classifier"}, {"sequence_model", config_.to_json()}}, params);
}

SignClassifier SignClassifier::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (ckpt.config.value("kind", "") != "sign_classifier") {
    throw InputError(path.string() + " is not a sign classifier checkpoint");
  }
  SignClassifier model(SequenceModelConfig::from_json(ckpt.config.at("sequence_model")));
  const auto params = model.parameters();
  nn::restore(ckpt, params);
  return model;
}

}  // namespace finehand
