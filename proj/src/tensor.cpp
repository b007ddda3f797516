#include "cxal/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cxal {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat view(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
ConstMapMat view(std::span<const float> s, std::size_t rows, std::size_t cols) {
  return {s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
MapMat view_mut(std::span<float> s, std::size_t rows, std::size_t cols) {
  return {s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

void check_inputs(const char* op, std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    require_defined(*t, op);
    require_finite(*t, op);
  }
}

constexpr float kGeluC = 0.7978845608028654F;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715F;

}  // namespace

std::string shape_str(std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

Tensor::Tensor(std::size_t rows, std::size_t cols, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("tensor dimensions must be positive, got " + cxal::shape_str(rows, cols));
  }
  impl_->rows = rows;
  impl_->cols = cols;
  impl_->data.assign(rows * cols, 0.0F);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<float> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("tensor dimensions must be positive, got " + cxal::shape_str(rows, cols));
  }
  if (values.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match " +
                     cxal::shape_str(rows, cols));
  }
  impl_->rows = rows;
  impl_->cols = cols;
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(1, 1, std::vector<float>{value}, requires_grad);
}

std::string Tensor::shape_str() const {
  return defined() ? cxal::shape_str(rows(), cols()) : "[undefined]";
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str());
  }
  return impl_->data[0];
}

std::span<float> Tensor::ensure_grad() const {
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->data.size(), 0.0F);
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0F);
}

Tensor Tensor::clone() const {
  return Tensor(rows(), cols(), impl_->data, false);
}

void require_finite(const Tensor& t, const char* where) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(where) + ": non-finite value in " + t.shape_str() + " input");
    }
  }
}

bool Graph::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!record_) {
    return false;
  }
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Graph::push(Tensor& out, BackwardFn fn) {
  out.set_requires_grad(true);
  nodes_.push_back(Node{out, std::move(fn)});
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  check_inputs("matmul", {&a, &b});
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  Tensor out(a.rows(), b.cols());
  view_mut(out.data(), out.rows(), out.cols()).noalias() = view(a) * view(b);
  if (wants_grad({&a, &b})) {
    push(out, [a, b](std::span<const float> g) mutable {
      const auto dc = view(g, a.rows(), b.cols());
      if (a.requires_grad()) view_mut(a.ensure_grad(), a.rows(), a.cols()).noalias() += dc * view(b).transpose();
      if (b.requires_grad()) view_mut(b.ensure_grad(), b.rows(), b.cols()).noalias() += view(a).transpose() * dc;
    });
  }
  return out;
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
  check_inputs("matmul_nt", {&a, &b});
  if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a, b);
  Tensor out(a.rows(), b.rows());
  view_mut(out.data(), out.rows(), out.cols()).noalias() = view(a) * view(b).transpose();
  if (wants_grad({&a, &b})) {
    push(out, [a, b](std::span<const float> g) mutable {
      const auto dc = view(g, a.rows(), b.rows());
      if (a.requires_grad()) view_mut(a.ensure_grad(), a.rows(), a.cols()).noalias() += dc * view(b);
      if (b.requires_grad()) view_mut(b.ensure_grad(), b.rows(), b.cols()).noalias() += dc.transpose() * view(a);
    });
  }
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  check_inputs("add", {&a, &b});
  if (a.shape() != b.shape()) shape_mismatch("add", a, b);
  Tensor out(a.rows(), a.cols());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (wants_grad({&a, &b})) {
    push(out, [a, b](std::span<const float> g) mutable {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

Tensor Graph::add_row(const Tensor& a, const Tensor& row) {
  check_inputs("add_row", {&a, &row});
  if (row.rows() != 1 || row.cols() != a.cols()) shape_mismatch("add_row", a, row);
  Tensor out(a.rows(), a.cols());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) = a.at(r, c) + row.data()[c];
  }
  if (wants_grad({&a, &row})) {
    push(out, [a, row, n](std::span<const float> g) mutable {
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (row.requires_grad()) {
        auto d = row.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
      }
    });
  }
  return out;
}

Tensor Graph::scale(const Tensor& a, float s) {
  check_inputs("scale", {&a});
  Tensor out(a.rows(), a.cols());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (wants_grad({&a})) {
    push(out, [a, s](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
  }
  return out;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  check_inputs("mul", {&a, &b});
  if (a.shape() != b.shape()) shape_mismatch("mul", a, b);
  Tensor out(a.rows(), a.cols());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  if (wants_grad({&a, &b})) {
    push(out, [a, b](std::span<const float> g) mutable {
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto d = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

Tensor Graph::mul_scalar(const Tensor& a, const Tensor& s) {
  check_inputs("mul_scalar", {&a, &s});
  if (s.numel() != 1) shape_mismatch("mul_scalar", a, s);
  const float k = s.item();
  Tensor out(a.rows(), a.cols());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * k;
  if (wants_grad({&a, &s})) {
    push(out, [a, s, k](std::span<const float> g) mutable {
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * k;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * a.data()[i];
        s.ensure_grad()[0] += static_cast<float>(acc);
      }
    });
  }
  return out;
}

Tensor Graph::exp(const Tensor& a) {
  check_inputs("exp", {&a});
  Tensor out(a.rows(), a.cols());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(a.data()[i]);
  if (wants_grad({&a})) {
    push(out, [a, out](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * out.data()[i];
    });
  }
  return out;
}

Tensor Graph::softmax_rows(const Tensor& a) {
  require_defined(a, "softmax_rows");
  for (float v : a.data()) {
    if (std::isnan(v) || v == std::numeric_limits<float>::infinity()) {
      throw NumericError("softmax_rows: non-finite value in " + a.shape_str() + " input");
    }
  }
  const std::size_t n = a.cols();
  Tensor out(a.rows(), n);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, a.at(r, c));
    if (!std::isfinite(mx)) {
      throw NumericError("softmax_rows: row " + std::to_string(r) + " has every position masked");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const float e = std::exp(a.at(r, c) - mx);
      out.at(r, c) = e;
      total += e;
    }
    const auto inv = static_cast<float>(1.0 / total);
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) *= inv;
  }
  if (wants_grad({&a})) {
    push(out, [a, out, n](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      const auto y = out.data();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += static_cast<double>(g[r * n + c]) * y[r * n + c];
        for (std::size_t c = 0; c < n; ++c) {
          d[r * n + c] += y[r * n + c] * (g[r * n + c] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor Graph::layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps) {
  check_inputs("layer_norm", {&a, &gain, &bias});
  const std::size_t n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n) shape_mismatch("layer_norm", a, gain);
  if (bias.rows() != 1 || bias.cols() != n) shape_mismatch("layer_norm", a, bias);
  Tensor out(a.rows(), n);
  std::vector<float> xhat(a.numel());
  std::vector<float> inv_std(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += a.at(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double dx = a.at(r, c) - mean;
      var += dx * dx;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (std::size_t c = 0; c < n; ++c) {
      const auto xh = static_cast<float>((a.at(r, c) - mean) * is);
      xhat[r * n + c] = xh;
      out.at(r, c) = xh * gain.data()[c] + bias.data()[c];
    }
  }
  if (wants_grad({&a, &gain, &bias})) {
    push(out, [a, gain, bias, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                  std::span<const float> g) mutable {
      if (gain.requires_grad() || bias.requires_grad()) {
        auto dg = gain.requires_grad() ? gain.ensure_grad() : std::span<float>{};
        auto db = bias.requires_grad() ? bias.ensure_grad() : std::span<float>{};
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!dg.empty()) dg[i % n] += g[i] * xhat[i];
          if (!db.empty()) db[i % n] += g[i];
        }
      }
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double sum_dxh = 0.0;
          double sum_dxh_xh = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const double dxh = static_cast<double>(g[r * n + c]) * gain.data()[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[r * n + c];
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            const double dxh = static_cast<double>(g[r * n + c]) * gain.data()[c];
            d[r * n + c] += static_cast<float>(
                inv_std[r] * (dxh - inv_n * sum_dxh - xhat[r * n + c] * inv_n * sum_dxh_xh));
          }
        }
      }
    });
  }
  return out;
}

Tensor Graph::gather_rows(const Tensor& table, std::span<const int> ids) {
  check_inputs("gather_rows", {&table});
  if (ids.empty()) {
    throw ShapeError("gather_rows: empty index list");
  }
  const std::size_t n = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(id) + " outside table " +
                              table.shape_str());
    }
  }
  Tensor out(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  if (wants_grad({&table})) {
    push(out, [table, n, idx = std::vector<int>(ids.begin(), ids.end())](std::span<const float> g) mutable {
      auto d = table.ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < n; ++c) d[idx[i] * n + c] += g[i * n + c];
      }
    });
  }
  return out;
}

Tensor Graph::add_mask(const Tensor& a, const AttentionMask& mask) {
  check_inputs("add_mask", {&a});
  if (mask.rows != a.rows() || mask.cols != a.cols() || mask.values.size() != a.numel()) {
    throw ShapeError("add_mask: mask " + shape_str(mask.rows, mask.cols) + " vs input " + a.shape_str());
  }
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + mask.values[i];
  if (wants_grad({&a})) {
    push(out, [a](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
  }
  return out;
}

Tensor Graph::gelu(const Tensor& a) {
  check_inputs("gelu", {&a});
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float x = a.data()[i];
    out.data()[i] = 0.5F * x * (1.0F + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  if (wants_grad({&a})) {
    push(out, [a](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = a.data()[i];
        const float u = kGeluC * (x + kGeluA * x * x * x);
        const float t = std::tanh(u);
        const float du = kGeluC * (1.0F + 3.0F * kGeluA * x * x);
        d[i] += g[i] * (0.5F * (1.0F + t) + 0.5F * x * (1.0F - t * t) * du);
      }
    });
  }
  return out;
}

Tensor Graph::l2_normalize_rows(const Tensor& a) {
  check_inputs("l2_normalize_rows", {&a});
  const std::size_t n = a.cols();
  Tensor out(a.rows(), n);
  std::vector<float> norms(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += static_cast<double>(a.at(r, c)) * a.at(r, c);
    if (ss == 0.0) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " is the zero vector");
    }
    const double norm = std::sqrt(ss);
    norms[r] = static_cast<float>(norm);
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) = static_cast<float>(a.at(r, c) / norm);
  }
  if (wants_grad({&a})) {
    push(out, [a, out, n, norms = std::move(norms)](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += static_cast<double>(g[r * n + c]) * out.at(r, c);
        for (std::size_t c = 0; c < n; ++c) {
          d[r * n + c] += static_cast<float>((g[r * n + c] - out.at(r, c) * dot) / norms[r]);
        }
      }
    });
  }
  return out;
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_defined(logits, "cross_entropy");
  for (float v : logits.data()) {
    if (std::isnan(v) || v == std::numeric_limits<float>::infinity()) {
      throw NumericError("cross_entropy: non-finite logit in " + logits.shape_str());
    }
  }
  if (targets.size() != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     logits.shape_str());
  }
  const std::size_t m = logits.rows();
  const std::size_t n = logits.cols();
  std::vector<float> probs(m * n);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside " +
                              std::to_string(n) + " classes");
    }
    if (!std::isfinite(logits.at(r, static_cast<std::size_t>(t)))) {
      throw NumericError("cross_entropy: target logit masked in row " + std::to_string(r));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(logits.at(r, c)));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(static_cast<double>(logits.at(r, c)) - mx);
    const double lse = mx + std::log(z);
    total += lse - logits.at(r, static_cast<std::size_t>(t));
    for (std::size_t c = 0; c < n; ++c) {
      probs[r * n + c] = static_cast<float>(std::exp(static_cast<double>(logits.at(r, c)) - lse));
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(m)));
  if (wants_grad({&logits})) {
    push(out, [logits, m, n, probs = std::move(probs),
               tgt = std::vector<int>(targets.begin(), targets.end())](std::span<const float> g) mutable {
      auto d = logits.ensure_grad();
      const float k = g[0] / static_cast<float>(m);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          const float onehot = static_cast<int>(c) == tgt[r] ? 1.0F : 0.0F;
          d[r * n + c] += k * (probs[r * n + c] - onehot);
        }
      }
    });
  }
  return out;
}

Tensor Graph::dropout(const Tensor& a, float p, Rng& rng) {
  check_inputs("dropout", {&a});
  if (p < 0.0F || p >= 1.0F) {
    throw std::invalid_argument("dropout: probability must be in [0, 1)");
  }
  if (p == 0.0F) {
    return a;
  }
  const float keep_scale = 1.0F / (1.0F - p);
  std::vector<float> keep(a.numel());
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = rng.bernoulli(p) ? 0.0F : keep_scale;
    out.data()[i] = a.data()[i] * keep[i];
  }
  if (wants_grad({&a})) {
    push(out, [a, keep = std::move(keep)](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * keep[i];
    });
  }
  return out;
}

Tensor Graph::mean_rows(const Tensor& a) {
  check_inputs("mean_rows", {&a});
  const std::size_t n = a.cols();
  Tensor out(1, n);
  std::vector<double> acc(n, 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) acc[c] += a.at(r, c);
  }
  for (std::size_t c = 0; c < n; ++c) out.data()[c] = static_cast<float>(acc[c] / static_cast<double>(a.rows()));
  if (wants_grad({&a})) {
    push(out, [a, n](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      const float inv = 1.0F / static_cast<float>(a.rows());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i % n] * inv;
    });
  }
  return out;
}

Tensor Graph::sum(const Tensor& a) {
  check_inputs("sum", {&a});
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (wants_grad({&a})) {
    push(out, [a](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (float& v : d) v += g[0];
    });
  }
  return out;
}

Tensor Graph::transpose(const Tensor& a) {
  check_inputs("transpose", {&a});
  Tensor out(a.cols(), a.rows());
  view_mut(out.data(), out.rows(), out.cols()) = view(a).transpose();
  if (wants_grad({&a})) {
    push(out, [a](std::span<const float> g) mutable {
      view_mut(a.ensure_grad(), a.rows(), a.cols()) += view(g, a.cols(), a.rows()).transpose();
    });
  }
  return out;
}

Tensor Graph::slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice_cols");
  if (count == 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + a.shape_str());
  }
  Tensor out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = a.at(r, begin + c);
  }
  if (wants_grad({&a})) {
    push(out, [a, begin, count](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      const std::size_t n = a.cols();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < count; ++c) d[r * n + begin + c] += g[r * count + c];
      }
    });
  }
  return out;
}

Tensor Graph::slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice_rows");
  if (count == 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + a.shape_str());
  }
  const std::size_t n = a.cols();
  Tensor out(count, n);
  std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n), count * n, out.data().begin());
  if (wants_grad({&a})) {
    push(out, [a, begin, n](std::span<const float> g) mutable {
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[begin * n + i] += g[i];
    });
  }
  return out;
}

Tensor Graph::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no inputs");
  }
  std::size_t total = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rows() != parts[0].rows()) shape_mismatch("concat_cols", parts[0], p);
    total += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  const std::size_t rows = parts[0].rows();
  Tensor out(rows, total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < p.cols(); ++c) out.at(r, offset + c) = p.at(r, c);
    }
    offset += p.cols();
  }
  if (record_ && any_grad) {
    push(out, [ps = std::vector<Tensor>(parts.begin(), parts.end()), rows, total](std::span<const float> g) mutable {
      std::size_t off = 0;
      for (Tensor& p : ps) {
        if (p.requires_grad()) {
          auto d = p.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < p.cols(); ++c) d[r * p.cols() + c] += g[r * total + off + c];
          }
        }
        off += p.cols();
      }
    });
  }
  return out;
}

Tensor Graph::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_rows: no inputs");
  }
  std::size_t total = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != parts[0].cols()) shape_mismatch("concat_rows", parts[0], p);
    total += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  Tensor out(total, parts[0].cols());
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  if (record_ && any_grad) {
    push(out, [ps = std::vector<Tensor>(parts.begin(), parts.end())](std::span<const float> g) mutable {
      std::size_t off = 0;
      for (Tensor& p : ps) {
        if (p.requires_grad()) {
          auto d = p.ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

void Graph::backward(const Tensor& root) {
  require_defined(root, "backward");
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + root.shape_str());
  }
  Tensor r = root;
  if (!r.requires_grad()) {
    return;
  }
  r.ensure_grad()[0] += 1.0F;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) {
      it->backward(it->output.grad());
    }
  }
}

}  // namespace cxal
