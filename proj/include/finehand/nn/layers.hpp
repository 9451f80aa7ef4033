#pragma once

// Minimal dense building blocks with explicit backward passes. Activations
// are column-major with one sample per column.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace finehand::nn {

using Matrix = Eigen::MatrixXf;
using Vector = Eigen::VectorXf;

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // Adam first moment
  Matrix v;  // Adam second moment

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols);
  void zero_grad() { grad.setZero(); }
};

/// Fills with N(0, stddev^2).
void init_normal(Param& p, float stddev, std::mt19937_64& rng);

/// FNV-1a over the raw bytes of every parameter value, in order.
std::uint64_t checksum(std::span<const Param* const> params);

class Adam {
 public:
  explicit Adam(float learning_rate, float beta1 = 0.9f, float beta2 = 0.999f, float epsilon = 1e-8f)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  /// One update from the accumulated grads; `scale` multiplies every grad first.
  void step(std::span<Param* const> params, float scale = 1.0f);
  long long steps() const { return t_; }

 private:
  float lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
};

/// y = W x + b
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, const std::string& name, std::mt19937_64& rng);

  Matrix forward(const Matrix& x) const;
  /// Accumulates weight/bias grads and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(std::vector<Param*>& out) { out.push_back(&weight); out.push_back(&bias); }
  void collect(std::vector<const Param*>& out) const { out.push_back(&weight); out.push_back(&bias); }

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }

  Param weight;
  Param bias;
};

/// 3x3 convolution, padding 1, on a single sample stored as (channels x H*W).
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(int in_channels, int out_channels, int stride, const std::string& name, std::mt19937_64& rng);

  int out_size(int n) const { return (n - 1) / stride_ + 1; }
  /// Returns (out_channels x Ho*Wo); fills `cols` with the im2col buffer.
  Matrix forward(const Matrix& x, int height, int width, Matrix& cols) const;
  /// Accumulates grads and returns dL/dx (in_channels x H*W).
  Matrix backward(const Matrix& cols, const Matrix& dy, int height, int width);
  void collect(std::vector<Param*>& out) { out.push_back(&weight); out.push_back(&bias); }
  void collect(std::vector<const Param*>& out) const { out.push_back(&weight); out.push_back(&bias); }

  Param weight;  // out x (in*9)
  Param bias;    // out x 1

 private:
  int in_channels_ = 0;
  int stride_ = 1;
};

/// Stacked LSTM. Gate rows are ordered input, forget, cell, output.
class Lstm {
 public:
  struct LayerCache {
    std::vector<Matrix> inputs;  // In x B per step
    Matrix gates;                // 4H x (T*B), post-activation
    std::vector<Matrix> c;       // H x B per step
    std::vector<Matrix> h;       // H x B per step
  };
  struct Cache {
    std::vector<LayerCache> layers;
  };

  Lstm() = default;
  Lstm(int input_size, int hidden_size, int num_layers, const std::string& name, std::mt19937_64& rng);

  /// Hidden state of the last layer at the final step (H x B).
  Matrix forward(std::span<const Matrix> steps, Cache* cache) const;
  /// Backpropagates dL/dh_final through time; returns dL/dx for each step.
  std::vector<Matrix> backward(const Cache& cache, const Matrix& dh_final);

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

  int input_size() const { return input_size_; }
  int hidden_size() const { return hidden_; }
  int num_layers() const { return static_cast<int>(wx_.size()); }

 private:
  int input_size_ = 0;
  int hidden_ = 0;
  std::vector<Param> wx_, wh_, b_;
};

/// Column-wise softmax.
Matrix softmax(const Matrix& logits);

}  // namespace finehand::nn
