#include "finehand/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "finehand/nn/checkpoint.hpp"

namespace finehand {

using nn::Matrix;
using nn::Vector;
using nlohmann::json;

namespace {

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0f); }

Matrix relu_mask(const Matrix& grad, const Matrix& activated) {
  return (activated.array() > 0.0f).select(grad, 0.0f);
}

}  // namespace

json EmbedderConfig::to_json() const {
  return {{"num_classes", num_classes},
          {"embedding_dim", embedding_dim},
          {"backbone", backbone},
          {"stage_channels", stage_channels},
          {"input_size", input_size},
          {"pretrained", pretrained},
          {"pretrained_path", pretrained_path},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"validation_fraction", validation_fraction},
          {"mirror_left", mirror_left},
          {"augment_hflip", augment_hflip},
          {"seed", seed}};
}

EmbedderConfig EmbedderConfig::from_json(const json& j) {
  EmbedderConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.backbone = j.value("backbone", c.backbone);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.input_size = j.value("input_size", c.input_size);
  c.pretrained = j.value("pretrained", c.pretrained);
  c.pretrained_path = j.value("pretrained_path", c.pretrained_path);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.mirror_left = j.value("mirror_left", c.mirror_left);
  c.augment_hflip = j.value("augment_hflip", c.augment_hflip);
  c.seed = j.value("seed", c.seed);
  return c;
}

void EmbedderConfig::validate() const {
  if (num_classes != kNumHandShapeClasses) {
    throw InputError("num_classes must equal the catalogue size " + std::to_string(kNumHandShapeClasses));
  }
  if (embedding_dim < 1) throw InputError("embedding_dim must be positive");
  if (stage_channels.empty()) throw InputError("stage_channels must not be empty");
  for (int c : stage_channels) {
    if (c < 1) throw InputError("stage channels must be positive");
  }
  if (input_size < 4) throw InputError("input_size too small");
  if (!(learning_rate > 0)) throw InputError("learning_rate must be positive");
  if (batch_size < 1 || epochs < 0) throw InputError("batch_size/epochs out of range");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw InputError("validation_fraction in [0,1)");
  if (backbone != "resnet-mini") throw InputError("unsupported backbone '" + backbone + "'");
}

Embedder::Embedder(EmbedderConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto& ch = config_.stage_channels;
  stem_ = nn::Conv3x3(3, ch[0], 1, "stem", rng);
  for (std::size_t s = 0; s < ch.size(); ++s) {
    const std::string p = "stage" + std::to_string(s);
    if (s > 0) down_.emplace_back(ch[s - 1], ch[s], 2, p + ".down", rng);
    res_a_.emplace_back(ch[s], ch[s], 1, p + ".res_a", rng);
    res_b_.emplace_back(ch[s], ch[s], 1, p + ".res_b", rng);
    res_b_.back().weight.value *= 0.5f;
  }
  fc_embed_ = nn::Linear(ch.back(), config_.embedding_dim, "fc_embed", rng);
  fc_class_ = nn::Linear(config_.embedding_dim, config_.num_classes, "fc_class", rng);
  if (config_.pretrained) {
    if (config_.pretrained_path.empty()) throw InputError("pretrained=true requires pretrained_path");
    load_backbone(config_.pretrained_path);
  }
}

std::vector<nn::Param*> Embedder::parameters() {
  std::vector<nn::Param*> out;
  stem_.collect(out);
  for (std::size_t s = 0; s < res_a_.size(); ++s) {
    if (s > 0) down_[s - 1].collect(out);
    res_a_[s].collect(out);
    res_b_[s].collect(out);
  }
  fc_embed_.collect(out);
  fc_class_.collect(out);
  return out;
}

std::vector<const nn::Param*> Embedder::parameters() const {
  std::vector<const nn::Param*> out;
  stem_.collect(out);
  for (std::size_t s = 0; s < res_a_.size(); ++s) {
    if (s > 0) down_[s - 1].collect(out);
    res_a_[s].collect(out);
    res_b_[s].collect(out);
  }
  fc_embed_.collect(out);
  fc_class_.collect(out);
  return out;
}

std::uint64_t Embedder::checksum() const {
  const auto params = parameters();
  return nn::checksum(params);
}

Matrix Embedder::to_input(const cv::Mat& image, Side side, bool flip) const {
  if (image.empty()) throw InputError("empty patch image");
  cv::Mat src = image;
  if (src.channels() == 1) cv::cvtColor(image, src, cv::COLOR_GRAY2BGR);
  if (src.type() != CV_8UC3) throw InputError("patch images must be 8-bit BGR");
  const int n = config_.input_size;
  if (src.rows != n || src.cols != n) {
    cv::Mat resized;
    cv::resize(src, resized, cv::Size(n, n), 0, 0, cv::INTER_AREA);
    src = resized;
  }
  const bool mirror = flip != (config_.mirror_left && side == Side::kLeft);
  Matrix x(3, n * n);
  for (int y = 0; y < n; ++y) {
    const auto* row = src.ptr<cv::Vec3b>(y);
    for (int xx = 0; xx < n; ++xx) {
      const cv::Vec3b px = row[mirror ? n - 1 - xx : xx];
      for (int c = 0; c < 3; ++c) x(c, y * n + xx) = static_cast<float>(px[c]) / 255.0f - 0.5f;
    }
  }
  return x;
}

Matrix Embedder::forward(const Matrix& input, Cache* cache, Vector* embedding_out) const {
  Cache local;
  Cache& c = cache ? *cache : local;
  int h = config_.input_size, w = config_.input_size;
  c.stem_out = relu(stem_.forward(input, h, w, c.stem_cols));
  Matrix x = c.stem_out;
  c.stages.resize(res_a_.size());
  for (std::size_t s = 0; s < res_a_.size(); ++s) {
    auto& sc = c.stages[s];
    if (s > 0) {
      const auto& down = down_[s - 1];
      sc.down_out = relu(down.forward(x, h, w, sc.down_cols));
      h = down.out_size(h);
      w = down.out_size(w);
      x = sc.down_out;
    }
    sc.h = h;
    sc.w = w;
    sc.block_in = x;
    sc.a_out = relu(res_a_[s].forward(x, h, w, sc.a_cols));
    sc.block_out = relu(x + res_b_[s].forward(sc.a_out, h, w, sc.b_cols));
    x = sc.block_out;
  }
  c.pooled = x.rowwise().mean();
  c.embedding = relu(fc_embed_.forward(c.pooled));
  if (embedding_out) *embedding_out = c.embedding.col(0);
  return fc_class_.forward(c.embedding);
}

void Embedder::backward(const Cache& c, const Matrix& d_logits, const Matrix* d_embedding) {
  Matrix d_emb = d_embedding ? *d_embedding : Matrix::Zero(config_.embedding_dim, 1);
  if (d_logits.size() > 0) d_emb += fc_class_.backward(c.embedding, d_logits);
  const Matrix d_pooled = fc_embed_.backward(c.pooled, relu_mask(d_emb, c.embedding));
  const auto& last = c.stages.back();
  Matrix dx = d_pooled.replicate(1, last.h * last.w) / static_cast<float>(last.h * last.w);
  for (std::size_t s = res_a_.size(); s-- > 0;) {
    const auto& sc = c.stages[s];
    const Matrix d_out = relu_mask(dx, sc.block_out);
    const Matrix d_a = relu_mask(res_b_[s].backward(sc.b_cols, d_out, sc.h, sc.w), sc.a_out);
    Matrix d_in = d_out + res_a_[s].backward(sc.a_cols, d_a, sc.h, sc.w);
    if (s > 0) {
      const int ph = c.stages[s - 1].h, pw = c.stages[s - 1].w;
      dx = down_[s - 1].backward(sc.down_cols, relu_mask(d_in, sc.down_out), ph, pw);
    } else {
      dx = std::move(d_in);
    }
  }
  stem_.backward(c.stem_cols, relu_mask(dx, c.stem_out), config_.input_size, config_.input_size);
}

void Embedder::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

void Embedder::apply_gradients(nn::Adam& optimizer, float scale) {
  if (frozen_) throw StateError("embedder is frozen");
  const auto params = parameters();
  optimizer.step(params, scale);
}

EmbedderTrainReport Embedder::train(std::span<const LabeledPatch> pool,
                                    const std::function<void(const EmbedderEpoch&)>& on_epoch) {
  if (frozen_) throw StateError("embedder is frozen");
  if (pool.empty()) throw InputError("training pool is empty");
  EmbedderTrainReport report;
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(config_.num_classes));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const int cls = pool[i].class_id;
    if (cls < 0 || cls >= config_.num_classes) throw InputError("pool class " + std::to_string(cls) + " out of range");
    by_class[static_cast<std::size_t>(cls)].push_back(i);
  }
  std::mt19937_64 rng(config_.seed ^ 0x5eedULL);
  std::vector<std::size_t> train_idx, heldout_idx;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) {
      report.warnings.push_back("class " + std::to_string(c) + " has zero samples");
      continue;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * config_.validation_fraction));
    heldout_idx.insert(heldout_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
  }
  std::sort(heldout_idx.begin(), heldout_idx.end());
  report.train_size = train_idx.size();
  report.heldout_size = heldout_idx.size();

  nn::Adam optimizer(config_.learning_rate);
  const auto params = parameters();
  std::bernoulli_distribution flip_coin(0.5);
  Cache cache;
  for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(config_.batch_size)) {
      const std::size_t end = std::min(train_idx.size(), start + static_cast<std::size_t>(config_.batch_size));
      zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto& sample = pool[train_idx[b]];
        const bool flip = config_.augment_hflip && flip_coin(rng);
        const Matrix logits = forward(to_input(sample.image, sample.side, flip), &cache, nullptr);
        Matrix probs = nn::softmax(logits);
        loss_sum -= std::log(std::max(1e-12, static_cast<double>(probs(sample.class_id, 0))));
        probs(sample.class_id, 0) -= 1.0f;
        backward(cache, probs, nullptr);
      }
      optimizer.step(params, 1.0f / static_cast<float>(end - start));
    }
    trained_ = true;
    EmbedderEpoch em;
    em.epoch = epoch;
    em.train_loss = train_idx.empty() ? 0.0 : loss_sum / static_cast<double>(train_idx.size());
    if (!heldout_idx.empty()) {
      std::size_t correct = 0;
      for (std::size_t i : heldout_idx) {
        if (predict_one(pool[i].image, pool[i].side).class_id == pool[i].class_id) ++correct;
      }
      em.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout_idx.size());
    }
    report.epochs.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  trained_ = true;
  return report;
}

HandShapePrediction Embedder::predict_one(const cv::Mat& image, Side side) const {
  if (!trained_) throw StateError("embedder has not been trained");
  const Matrix logits = forward(to_input(image, side, false), nullptr, nullptr);
  const Matrix probs = nn::softmax(logits);
  HandShapePrediction p;
  p.probabilities.resize(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) p.probabilities[static_cast<std::size_t>(i)] = probs(i, 0);
  // first maximum wins ties
  p.class_id = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) - p.probabilities.begin());
  p.confidence = p.probabilities[static_cast<std::size_t>(p.class_id)];
  return p;
}

std::vector<HandShapePrediction> Embedder::predict(std::span<const HandPatch> patches) const {
  std::vector<HandShapePrediction> out;
  out.reserve(patches.size());
  for (const auto& patch : patches) {
    auto p = predict_one(patch.image, patch.ref.side);
    p.ref = patch.ref;
    out.push_back(std::move(p));
  }
  return out;
}

Vector Embedder::embed_one(const cv::Mat& image, Side side) const {
  Vector e;
  forward(to_input(image, side, false), nullptr, &e);
  return e;
}

Matrix Embedder::embed(std::span<const HandPatch> patches) const {
  Matrix out(static_cast<Eigen::Index>(patches.size()), config_.embedding_dim);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = embed_one(patches[i].image, patches[i].ref.side).transpose();
  }
  return out;
}

void Embedder::accumulate_embedding_gradient(const cv::Mat& image, Side side, const Vector& d_embedding) {
  if (frozen_) throw StateError("embedder is frozen");
  Cache cache;
  forward(to_input(image, side, false), &cache, nullptr);
  const Matrix d = d_embedding;
  backward(cache, Matrix(), &d);
}

void Embedder::save(const std::filesystem::path& path) const {
  json cfg = config_.to_json();
  cfg["trained"] = trained_;
  const auto params = parameters();
  nn::save_checkpoint(path, {{"kind", "embedder"}, {"embedder", cfg}}, params);
}

Embedder Embedder::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (ckpt.config.value("kind", "") != "embedder") throw InputError(path.string() + " is not an embedder checkpoint");
  auto cfg = EmbedderConfig::from_json(ckpt.config.at("embedder"));
  cfg.pretrained = false;  // weights come from the checkpoint itself
  Embedder e(cfg);
  e.config_.pretrained = ckpt.config.at("embedder").value("pretrained", false);
  e.config_.pretrained_path = ckpt.config.at("embedder").value("pretrained_path", "");
  const auto params = e.parameters();
  nn::restore(ckpt, params);
  e.trained_ = ckpt.config.at("embedder").value("trained", false);
  return e;
}

void Embedder::load_backbone(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  std::vector<nn::Param*> backbone;
  for (auto* p : parameters()) {
    if (p->name.rfind("fc_class", 0) != 0) backbone.push_back(p);
  }
  nn::restore(ckpt, backbone);
}

}  // namespace finehand
