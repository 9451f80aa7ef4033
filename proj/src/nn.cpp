#include "finehand/nn/layers.hpp"

#include <cmath>
#include <cstring>

namespace finehand::nn {

Param::Param(std::string n, Eigen::Index rows, Eigen::Index cols)
    : name(std::move(n)),
      value(Matrix::Zero(rows, cols)),
      grad(Matrix::Zero(rows, cols)),
      m(Matrix::Zero(rows, cols)),
      v(Matrix::Zero(rows, cols)) {}

void init_normal(Param& p, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

std::uint64_t checksum(std::span<const Param* const> params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Param* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(float);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void Adam::step(std::span<Param* const> params, float scale) {
  ++t_;
  const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
  const float step = lr_ * std::sqrt(bc2) / bc1;
  for (Param* p : params) {
    if (scale != 1.0f) p->grad *= scale;
    p->m = beta1_ * p->m + (1.0f - beta1_) * p->grad;
    p->v = beta2_ * p->v + (1.0f - beta2_) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= step * p->m.array() / (p->v.array().sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------

Linear::Linear(int in, int out, const std::string& name, std::mt19937_64& rng)
    : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {
  init_normal(weight, std::sqrt(2.0f / static_cast<float>(in)), rng);
}

Matrix Linear::forward(const Matrix& x) const {
  Matrix y = weight.value * x;
  y.colwise() += bias.value.col(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  weight.grad.noalias() += dy * x.transpose();
  bias.grad.col(0) += dy.rowwise().sum();
  return weight.value.transpose() * dy;
}

// ---------------------------------------------------------------------------

Conv3x3::Conv3x3(int in_channels, int out_channels, int stride, const std::string& name, std::mt19937_64& rng)
    : weight(name + ".weight", out_channels, in_channels * 9),
      bias(name + ".bias", out_channels, 1),
      in_channels_(in_channels),
      stride_(stride) {
  init_normal(weight, std::sqrt(2.0f / static_cast<float>(in_channels * 9)), rng);
}

Matrix Conv3x3::forward(const Matrix& x, int height, int width, Matrix& cols) const {
  const int ho = out_size(height), wo = out_size(width);
  cols.setZero(in_channels_ * 9, ho * wo);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      float* col = cols.col(oy * wo + ox).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride_ + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride_ + kx - 1;
          if (ix < 0 || ix >= width) continue;
          const int pix = iy * width + ix;
          for (int c = 0; c < in_channels_; ++c) col[c * 9 + ky * 3 + kx] = x(c, pix);
        }
      }
    }
  }
  Matrix y = weight.value * cols;
  y.colwise() += bias.value.col(0);
  return y;
}

Matrix Conv3x3::backward(const Matrix& cols, const Matrix& dy, int height, int width) {
  weight.grad.noalias() += dy * cols.transpose();
  bias.grad.col(0) += dy.rowwise().sum();
  const Matrix dcols = weight.value.transpose() * dy;
  const int ho = out_size(height), wo = out_size(width);
  Matrix dx = Matrix::Zero(in_channels_, height * width);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const float* col = dcols.col(oy * wo + ox).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride_ + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride_ + kx - 1;
          if (ix < 0 || ix >= width) continue;
          const int pix = iy * width + ix;
          for (int c = 0; c < in_channels_; ++c) dx(c, pix) += col[c * 9 + ky * 3 + kx];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

namespace {

inline float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

}  // namespace

Lstm::Lstm(int input_size, int hidden_size, int num_layers, const std::string& name, std::mt19937_64& rng)
    : input_size_(input_size), hidden_(hidden_size) {
  for (int l = 0; l < num_layers; ++l) {
    const int in = l == 0 ? input_size : hidden_size;
    const std::string prefix = name + ".l" + std::to_string(l);
    wx_.emplace_back(prefix + ".wx", 4 * hidden_size, in);
    wh_.emplace_back(prefix + ".wh", 4 * hidden_size, hidden_size);
    b_.emplace_back(prefix + ".b", 4 * hidden_size, 1);
    init_normal(wx_.back(), 1.0f / std::sqrt(static_cast<float>(in)), rng);
    init_normal(wh_.back(), 1.0f / std::sqrt(static_cast<float>(hidden_size)), rng);
    b_.back().value.block(hidden_size, 0, hidden_size, 1).setOnes();  // forget-gate bias
  }
}

void Lstm::collect(std::vector<Param*>& out) {
  for (std::size_t l = 0; l < wx_.size(); ++l) {
    out.push_back(&wx_[l]);
    out.push_back(&wh_[l]);
    out.push_back(&b_[l]);
  }
}

void Lstm::collect(std::vector<const Param*>& out) const {
  for (std::size_t l = 0; l < wx_.size(); ++l) {
    out.push_back(&wx_[l]);
    out.push_back(&wh_[l]);
    out.push_back(&b_[l]);
  }
}

Matrix Lstm::forward(std::span<const Matrix> steps, Cache* cache) const {
  const int H = hidden_;
  const Eigen::Index T = static_cast<Eigen::Index>(steps.size());
  const Eigen::Index B = steps.empty() ? 0 : steps[0].cols();
  if (cache) cache->layers.assign(wx_.size(), {});

  std::vector<Matrix> inputs(steps.begin(), steps.end());
  Matrix h_last;
  for (std::size_t l = 0; l < wx_.size(); ++l) {
    const Eigen::Index in = inputs[0].rows();
    Matrix stacked(in, T * B);
    for (Eigen::Index t = 0; t < T; ++t) stacked.middleCols(t * B, B) = inputs[static_cast<std::size_t>(t)];
    Matrix pre = wx_[l].value * stacked;
    pre.colwise() += b_[l].value.col(0);

    Matrix h = Matrix::Zero(H, B), c = Matrix::Zero(H, B);
    std::vector<Matrix> outputs;
    outputs.reserve(static_cast<std::size_t>(T));
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) {
      lc->gates.resize(4 * H, T * B);
      lc->c.reserve(static_cast<std::size_t>(T));
      lc->h.reserve(static_cast<std::size_t>(T));
    }
    for (Eigen::Index t = 0; t < T; ++t) {
      Matrix z = pre.middleCols(t * B, B);
      z.noalias() += wh_[l].value * h;
      auto zi = z.topRows(H), zf = z.middleRows(H, H), zg = z.middleRows(2 * H, H), zo = z.bottomRows(H);
      zi = zi.unaryExpr(&sigmoid);
      zf = zf.unaryExpr(&sigmoid);
      zg = zg.array().tanh().matrix();
      zo = zo.unaryExpr(&sigmoid);
      c = zf.cwiseProduct(c) + zi.cwiseProduct(zg);
      h = zo.cwiseProduct(c.array().tanh().matrix());
      if (lc) {
        lc->gates.middleCols(t * B, B) = z;
        lc->c.push_back(c);
        lc->h.push_back(h);
      }
      outputs.push_back(h);
    }
    if (lc) lc->inputs = std::move(inputs);
    inputs = std::move(outputs);
    h_last = h;
  }
  return h_last;
}

std::vector<Matrix> Lstm::backward(const Cache& cache, const Matrix& dh_final) {
  const int H = hidden_;
  const auto& top = cache.layers.back();
  const std::size_t T = top.h.size();
  const Eigen::Index B = dh_final.cols();

  // dL/dh for every step of the layer currently being processed.
  std::vector<Matrix> dh_ext(T, Matrix::Zero(H, B));
  dh_ext[T - 1] = dh_final;

  for (std::size_t li = wx_.size(); li-- > 0;) {
    const auto& lc = cache.layers[li];
    const Eigen::Index in = lc.inputs[0].rows();
    Matrix dz_all(4 * H, static_cast<Eigen::Index>(T) * B);
    Matrix dh_next = Matrix::Zero(H, B), dc_next = Matrix::Zero(H, B);
    for (std::size_t t = T; t-- > 0;) {
      const Eigen::Index col = static_cast<Eigen::Index>(t) * B;
      const auto gi = lc.gates.block(0, col, H, B).array();
      const auto gf = lc.gates.block(H, col, H, B).array();
      const auto gg = lc.gates.block(2 * H, col, H, B).array();
      const auto go = lc.gates.block(3 * H, col, H, B).array();
      const Eigen::ArrayXXf tanh_c = lc.c[t].array().tanh();
      const Eigen::ArrayXXf dh = (dh_next + dh_ext[t]).array();
      const Eigen::ArrayXXf dc = dc_next.array() + dh * go * (1.0f - tanh_c.square());
      Eigen::ArrayXXf c_prev = Eigen::ArrayXXf::Zero(H, B);
      if (t > 0) c_prev = lc.c[t - 1].array();
      auto dz = dz_all.middleCols(col, B);
      dz.topRows(H) = (dc * gg * gi * (1.0f - gi)).matrix();
      dz.middleRows(H, H) = (dc * c_prev * gf * (1.0f - gf)).matrix();
      dz.middleRows(2 * H, H) = (dc * gi * (1.0f - gg.square())).matrix();
      dz.bottomRows(H) = (dh * tanh_c * go * (1.0f - go)).matrix();
      dc_next = (dc * gf).matrix();
      dh_next.noalias() = wh_[li].value.transpose() * dz;
      if (t > 0) wh_[li].grad.noalias() += dz * lc.h[t - 1].transpose();
    }
    Matrix stacked(in, static_cast<Eigen::Index>(T) * B);
    for (std::size_t t = 0; t < T; ++t) stacked.middleCols(static_cast<Eigen::Index>(t) * B, B) = lc.inputs[t];
    wx_[li].grad.noalias() += dz_all * stacked.transpose();
    b_[li].grad.col(0) += dz_all.rowwise().sum();
    const Matrix dx_all = wx_[li].value.transpose() * dz_all;
    for (std::size_t t = 0; t < T; ++t) dh_ext[t] = dx_all.middleCols(static_cast<Eigen::Index>(t) * B, B);
  }
  return dh_ext;
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const float mx = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - mx).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

}  // namespace finehand::nn
