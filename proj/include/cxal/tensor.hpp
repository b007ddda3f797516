#pragma once

// Dense 2-D float32 tensors and a recording tape for reverse-mode gradients.
//
// Every value is a rows x cols matrix; scalars are 1x1 and vectors are 1xN.
// Tensors share storage on copy. A Graph records each primitive applied to
// tensors that require gradients and replays the record in reverse on
// backward().

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxal/rng.hpp"

namespace cxal {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, bool requires_grad = false);
  Tensor(std::size_t rows, std::size_t cols, std::vector<float> values,
         bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  std::size_t rows() const { return impl_->rows; }
  std::size_t cols() const { return impl_->cols; }
  std::size_t numel() const { return impl_->rows * impl_->cols; }
  std::array<std::size_t, 2> shape() const { return {impl_->rows, impl_->cols}; }
  std::string shape_str() const;

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float& at(std::size_t r, std::size_t c) { return impl_->data[r * impl_->cols + c]; }
  float at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->cols + c]; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<float> grad() { return impl_->grad; }
  std::span<const float> grad() const { return impl_->grad; }
  /// Allocates a zeroed gradient buffer on first use.
  std::span<float> ensure_grad() const;
  void zero_grad();

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }
  /// Detached deep copy.
  Tensor clone() const;

 private:
  struct Impl {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

std::string shape_str(std::size_t rows, std::size_t cols);

/// Throws NumericError if any element is NaN or infinite.
void require_finite(const Tensor& t, const char* where);

/// Additive attention mask: 0 where allowed, -inf where disallowed.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
};

/// The recording tape. Construct with record=false for inference.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Tensor matmul(const Tensor& a, const Tensor& b);
  /// a * b^T.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  /// Adds a 1xN row to every row of a.
  Tensor add_row(const Tensor& a, const Tensor& row);
  Tensor scale(const Tensor& a, float s);
  Tensor mul(const Tensor& a, const Tensor& b);
  /// Multiplies every element by the 1x1 tensor s.
  Tensor mul_scalar(const Tensor& a, const Tensor& s);
  Tensor exp(const Tensor& a);
  Tensor softmax_rows(const Tensor& a);
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps = 1e-5F);
  /// Row lookup: out[i] = table[ids[i]].
  Tensor gather_rows(const Tensor& table, std::span<const int> ids);
  Tensor add_mask(const Tensor& a, const AttentionMask& mask);
  /// tanh-approximated GELU.
  Tensor gelu(const Tensor& a);
  Tensor l2_normalize_rows(const Tensor& a);
  /// Mean cross-entropy of each row's logits against its target column.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
  /// Inverted dropout. Callers skip it outside training.
  Tensor dropout(const Tensor& a, float p, Rng& rng);
  Tensor mean_rows(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor transpose(const Tensor& a);
  Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
  Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
  Tensor concat_cols(std::span<const Tensor> parts);
  Tensor concat_rows(std::span<const Tensor> parts);

  /// Accumulates d(root)/d(x) into every tensor on the tape that requires grad.
  void backward(const Tensor& root);

 private:
  using BackwardFn = std::function<void(std::span<const float>)>;
  struct Node {
    Tensor output;
    BackwardFn backward;
  };

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  void push(Tensor& out, BackwardFn fn);

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace cxal
