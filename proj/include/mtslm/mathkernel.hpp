#pragma once

// Dense row-major matrices and the hand-derived forward/backward passes the
// models need: LSTM layer, tied-embedding softmax cross-entropy, sigmoid MSE,
// and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtslm/errors.hpp"
#include "mtslm/rng.hpp"

namespace mtslm {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c)
      throw std::invalid_argument("Matrix: data length != rows*cols");
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](double v) { return std::isfinite(v); });
  }
};

/// Bit-level equality (distinguishes -0.0 and NaN payloads).
inline bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

namespace detail {
/// crow += sum_q coef[q] * rows[q], four source rows per pass over crow.
inline void axpy_rows(double* crow, std::size_t n, const double* coef, const double* const* rows,
                      std::size_t count) {
  std::size_t q = 0;
  for (; q + 4 <= count; q += 4) {
    const double a0 = coef[q], a1 = coef[q + 1], a2 = coef[q + 2], a3 = coef[q + 3];
    const double *r0 = rows[q], *r1 = rows[q + 1], *r2 = rows[q + 2], *r3 = rows[q + 3];
    for (std::size_t j = 0; j < n; ++j) crow[j] += (a0 * r0[j] + a1 * r1[j]) + (a2 * r2[j] + a3 * r3[j]);
  }
  for (; q < count; ++q) {
    const double a0 = coef[q];
    const double* r0 = rows[q];
    for (std::size_t j = 0; j < n; ++j) crow[j] += a0 * r0[j];
  }
}
}  // namespace detail

/// c += a * b
inline void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  detail::require(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols,
                  "matmul_acc: dimension mismatch");
  const std::size_t n = b.cols;
  std::vector<double> coef;
  std::vector<const double*> rows;
  coef.reserve(a.cols);
  rows.reserve(a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    coef.clear();
    rows.clear();
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a.data[i * a.cols + k];
      if (av == 0.0) continue;
      coef.push_back(av);
      rows.push_back(b.data.data() + k * n);
    }
    detail::axpy_rows(c.data.data() + i * n, n, coef.data(), rows.data(), coef.size());
  }
}

/// c += a^T * b
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  detail::require(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols,
                  "matmul_tn_acc: dimension mismatch");
  const std::size_t n = b.cols;
  std::vector<double> coef;
  std::vector<const double*> rows;
  coef.reserve(a.rows);
  rows.reserve(a.rows);
  for (std::size_t i = 0; i < a.cols; ++i) {
    coef.clear();
    rows.clear();
    for (std::size_t p = 0; p < a.rows; ++p) {
      const double av = a.data[p * a.cols + i];
      if (av == 0.0) continue;
      coef.push_back(av);
      rows.push_back(b.data.data() + p * n);
    }
    detail::axpy_rows(c.data.data() + i * n, n, coef.data(), rows.data(), coef.size());
  }
}

/// c += a * b^T
inline void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  detail::require(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows,
                  "matmul_nt_acc: dimension mismatch");
  const std::size_t k = a.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * k;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.data.data() + j * k;
      // eight interleaved partial sums, combined in a fixed order
      double acc[8] = {};
      const std::size_t k8 = k - k % 8;
      std::size_t p = 0;
      for (; p < k8; p += 8)
        for (std::size_t q = 0; q < 8; ++q) acc[q] += arow[p + q] * brow[p + q];
      for (; p < k; ++p) acc[0] += arow[p] * brow[p];
      c(i, j) += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    }
  }
}

/// sigma(z) = 1/(1+e^-z) for z >= 0, e^z/(1+e^z) otherwise.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

/// log sum_j e^{x_j} = m + log sum_j e^{x_j - m}, m = max_j x_j.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// A trainable buffer plus its gradient. Frozen buffers still receive
/// gradients but no optimizer may write their values.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t rows, std::size_t cols)
      : name(std::move(n)), value(rows, cols), grad(rows, cols) {}

  void zero_grad() { grad.zero(); }
};

using ParameterList = std::vector<Parameter*>;

inline void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

inline void uniform_fill(Matrix& m, double range, Rng& rng) {
  for (double& v : m.data) v = (2.0 * rng.uniform() - 1.0) * range;
}

struct LstmState {
  Matrix h;
  Matrix c;

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Matrix(batch, hidden), Matrix(batch, hidden)};
  }
};

/// Everything one forward step produced; backward and the analysis tools
/// (forget-gate traces, cell-state differences) read from here.
struct LstmStepCache {
  Matrix x, h_prev, c_prev;
  Matrix i, f, g, o;  // input gate, forget gate, candidate, output gate
  Matrix c, tanh_c, h;
};

/// One LSTM layer:
///   i = sigma(x Wx_i + h Wh_i + b_i)   f = sigma(x Wx_f + h Wh_f + b_f)
///   g = tanh(x Wx_g + h Wh_g + b_g)    o = sigma(x Wx_o + h Wh_o + b_o)
///   c = f*c_prev + i*g                  h = o*tanh(c)
/// Weight columns are laid out in gate blocks [i | f | g | o].
class LstmLayer {
 public:
  Parameter w_x;  // input_size x 4H
  Parameter w_h;  // H x 4H
  Parameter b_i, b_f, b_g, b_o;  // 1 x H each

  LstmLayer() = default;
  LstmLayer(std::size_t input_size, std::size_t hidden_size)
      : w_x("w_x", input_size, 4 * hidden_size),
        w_h("w_h", hidden_size, 4 * hidden_size),
        b_i("b_i", 1, hidden_size),
        b_f("b_f", 1, hidden_size),
        b_g("b_g", 1, hidden_size),
        b_o("b_o", 1, hidden_size),
        input_size_(input_size),
        hidden_size_(hidden_size) {
    detail::require(input_size > 0 && hidden_size > 0, "LstmLayer: empty layer");
  }

  std::size_t input_size() const { return input_size_; }
  std::size_t hidden_size() const { return hidden_size_; }

  /// Uniform init of every weight and bias in [-range, range]. Frozen biases
  /// are left alone.
  void init_uniform(double range, Rng& rng) {
    uniform_fill(w_x.value, range, rng);
    uniform_fill(w_h.value, range, rng);
    for (Parameter* b : {&b_i, &b_f, &b_g, &b_o}) {
      if (b->frozen) {
        // keep the stream aligned with an unfrozen init
        for (std::size_t k = 0; k < b->value.size(); ++k) rng.uniform();
      } else {
        uniform_fill(b->value, range, rng);
      }
    }
  }

  /// Fix b_f to the given values and b_i = -b_f; both become non-trainable.
  void freeze_gate_biases(std::span<const double> forget_bias) {
    detail::require(forget_bias.size() == hidden_size_,
                    "freeze_gate_biases: one bias per unit required");
    for (std::size_t j = 0; j < hidden_size_; ++j) {
      b_f.value.data[j] = forget_bias[j];
      b_i.value.data[j] = -forget_bias[j];
    }
    b_f.frozen = b_i.frozen = true;
    b_f.decay = b_i.decay = false;
  }

  bool bias_frozen() const { return b_f.frozen && b_i.frozen; }

  ParameterList parameters() { return {&w_x, &w_h, &b_i, &b_f, &b_g, &b_o}; }

  /// Ablation mask: h (and optionally c) of masked units is multiplied by
  /// mask[j] after it is computed, so downstream layers and the recurrence
  /// see the masked value.
  void set_unit_mask(std::vector<double> mask, bool mask_cell = false) {
    detail::require(mask.empty() || mask.size() == hidden_size_,
                    "set_unit_mask: mask length != hidden size");
    mask_ = std::move(mask);
    mask_cell_ = mask_cell && !mask_.empty();
  }
  void clear_unit_mask() { mask_.clear(); mask_cell_ = false; }
  const std::vector<double>& unit_mask() const { return mask_; }

  /// When false, step() keeps only the latest cache entry (inference mode).
  void set_record_history(bool on) { record_history_ = on; }

  LstmState step(const Matrix& x, const LstmState& prev) {
    const std::size_t B = x.rows, H = hidden_size_;
    detail::require(x.cols == input_size_, "lstm_step: input width mismatch");
    detail::require(prev.h.rows == B && prev.h.cols == H && prev.c.rows == B &&
                        prev.c.cols == H,
                    "lstm_step: state shape mismatch");
    if (!x.all_finite() || !prev.h.all_finite() || !prev.c.all_finite())
      throw NonFiniteError("lstm_step: non-finite input");

    Matrix z(B, 4 * H);
    for (std::size_t b = 0; b < B; ++b) {
      double* zr = z.data.data() + b * 4 * H;
      for (std::size_t j = 0; j < H; ++j) {
        zr[j] = b_i.value.data[j];
        zr[H + j] = b_f.value.data[j];
        zr[2 * H + j] = b_g.value.data[j];
        zr[3 * H + j] = b_o.value.data[j];
      }
    }
    matmul_acc(x, w_x.value, z);
    matmul_acc(prev.h, w_h.value, z);

    LstmStepCache s;
    s.i = Matrix(B, H);
    s.f = Matrix(B, H);
    s.g = Matrix(B, H);
    s.o = Matrix(B, H);
    s.c = Matrix(B, H);
    s.tanh_c = Matrix(B, H);
    s.h = Matrix(B, H);
    for (std::size_t b = 0; b < B; ++b) {
      const double* zr = z.data.data() + b * 4 * H;
      for (std::size_t j = 0; j < H; ++j) {
        const std::size_t k = b * H + j;
        const double ig = sigmoid(zr[j]);
        const double fg = sigmoid(zr[H + j]);
        const double gg = std::tanh(zr[2 * H + j]);
        const double og = sigmoid(zr[3 * H + j]);
        double c = fg * prev.c.data[k] + ig * gg;
        if (mask_cell_) c *= mask_[j];
        const double tc = std::tanh(c);
        double h = og * tc;
        if (!mask_.empty()) h *= mask_[j];
        s.i.data[k] = ig;
        s.f.data[k] = fg;
        s.g.data[k] = gg;
        s.o.data[k] = og;
        s.c.data[k] = c;
        s.tanh_c.data[k] = tc;
        s.h.data[k] = h;
      }
    }
    if (!s.c.all_finite() || !s.h.all_finite())
      throw NonFiniteError("lstm_step: non-finite state produced");

    LstmState next{s.h, s.c};
    s.x = x;
    s.h_prev = prev.h;
    s.c_prev = prev.c;
    if (!record_history_) cache_.clear();
    cache_.push_back(std::move(s));
    return next;
  }

  /// Backpropagation through the cached steps. dh[t] is the loss gradient
  /// arriving at h_t from outside the recurrence (layer above or output
  /// head). Parameter gradients are accumulated; returns dL/dx_t per step.
  /// Gradients into the initial state are dropped (truncated BPTT).
  std::vector<Matrix> backward(std::span<const Matrix> dh) {
    if (cache_.empty()) throw std::logic_error("lstm_backward: no cached forward steps");
    if (dh.size() != cache_.size())
      throw std::invalid_argument("lstm_backward: step count mismatch with cache");
    const std::size_t T = cache_.size(), H = hidden_size_;
    const std::size_t B = cache_.front().h.rows;

    std::vector<Matrix> dx(T);
    Matrix dh_next(B, H), dc_next(B, H);
    // Per-step inputs and pre-activation gradients stacked so the weight
    // gradients are one product each at the end.
    Matrix xs(T * B, input_size_), hs(T * B, H), dzs(T * B, 4 * H);
    for (std::size_t tt = T; tt-- > 0;) {
      const LstmStepCache& s = cache_[tt];
      detail::require(dh[tt].rows == B && dh[tt].cols == H,
                      "lstm_backward: upstream gradient shape mismatch");
      std::copy(s.x.data.begin(), s.x.data.end(), xs.data.begin() + tt * B * input_size_);
      std::copy(s.h_prev.data.begin(), s.h_prev.data.end(), hs.data.begin() + tt * B * H);
      Matrix dz(B, 4 * H);
      for (std::size_t b = 0; b < B; ++b) {
        double* dzr = dz.data.data() + b * 4 * H;
        for (std::size_t j = 0; j < H; ++j) {
          const std::size_t k = b * H + j;
          const double m = mask_.empty() ? 1.0 : mask_[j];
          const double dhv = (dh[tt].data[k] + dh_next.data[k]) * m;
          const double ig = s.i.data[k], fg = s.f.data[k], gg = s.g.data[k],
                       og = s.o.data[k], tc = s.tanh_c.data[k];
          const double d_o = dhv * tc;
          double dc = dc_next.data[k] + dhv * og * (1.0 - tc * tc);
          if (mask_cell_) dc *= m;
          dzr[j] = dc * gg * ig * (1.0 - ig);
          dzr[H + j] = dc * s.c_prev.data[k] * fg * (1.0 - fg);
          dzr[2 * H + j] = dc * ig * (1.0 - gg * gg);
          dzr[3 * H + j] = d_o * og * (1.0 - og);
          dc_next.data[k] = dc * fg;
        }
      }
      dx[tt] = Matrix(B, input_size_);
      matmul_nt_acc(dz, w_x.value, dx[tt]);
      dh_next.zero();
      matmul_nt_acc(dz, w_h.value, dh_next);
      std::copy(dz.data.begin(), dz.data.end(), dzs.data.begin() + tt * B * 4 * H);
    }
    matmul_tn_acc(xs, dzs, w_x.grad);
    matmul_tn_acc(hs, dzs, w_h.grad);
    for (std::size_t r = 0; r < T * B; ++r) {
      const double* dzr = dzs.data.data() + r * 4 * H;
      for (std::size_t j = 0; j < H; ++j) {
        b_i.grad.data[j] += dzr[j];
        b_f.grad.data[j] += dzr[H + j];
        b_g.grad.data[j] += dzr[2 * H + j];
        b_o.grad.data[j] += dzr[3 * H + j];
      }
    }
    return dx;
  }

  void clear_cache() { cache_.clear(); }
  std::size_t cached_steps() const { return cache_.size(); }
  const std::vector<LstmStepCache>& cache() const { return cache_; }

 private:
  std::size_t input_size_ = 0;
  std::size_t hidden_size_ = 0;
  std::vector<LstmStepCache> cache_;
  std::vector<double> mask_;
  bool mask_cell_ = false;
  bool record_history_ = true;
};

struct TiedSoftmaxResult {
  std::vector<double> loss;  // per row, nats
  Matrix d_hidden;           // empty unless gradients were requested
};

/// loss_b = -log softmax(E h_b)[target_b] with the decoder weight being the
/// embedding matrix E (V x d) itself. With grad_scale != 0, gradients of
/// grad_scale * sum_b loss_b are accumulated into embedding.grad and
/// returned for the hidden rows.
inline TiedSoftmaxResult tied_softmax_cross_entropy(const Matrix& hidden,
                                                    Parameter& embedding,
                                                    std::span<const std::uint32_t> targets,
                                                    double grad_scale = 0.0) {
  const Matrix& E = embedding.value;
  const std::size_t B = hidden.rows, V = E.rows;
  detail::require(hidden.cols == E.cols, "tied softmax: hidden width != embedding width");
  detail::require(targets.size() == B, "tied softmax: one target per row required");
  for (std::uint32_t t : targets)
    if (t >= V) throw std::out_of_range("tied softmax: target id out of vocabulary");

  Matrix logits(B, V);
  matmul_nt_acc(hidden, E, logits);

  TiedSoftmaxResult out;
  out.loss.resize(B);
  const bool want_grad = grad_scale != 0.0;
  Matrix dlogits;
  if (want_grad) dlogits = Matrix(B, V);
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = logits.row(b);
    const double lse = log_sum_exp(row);
    out.loss[b] = lse - row[targets[b]];
    if (want_grad) {
      for (std::size_t v = 0; v < V; ++v)
        dlogits(b, v) = grad_scale * std::exp(row[v] - lse);
      dlogits(b, targets[b]) -= grad_scale;
    }
  }
  if (want_grad) {
    matmul_tn_acc(dlogits, hidden, embedding.grad);
    out.d_hidden = Matrix(B, hidden.cols);
    matmul_acc(dlogits, E, out.d_hidden);
  }
  return out;
}

struct MseResult {
  double loss = 0.0;
  Matrix d_outputs;
};

/// loss = mean over elements of (sigma(o) - y)^2, y in {0, 1}.
inline MseResult sigmoid_mse(const Matrix& outputs, const Matrix& targets) {
  detail::require(outputs.same_shape(targets), "sigmoid_mse: shape mismatch");
  for (double y : targets.data)
    detail::require(y == 0.0 || y == 1.0, "sigmoid_mse: targets must be 0 or 1");
  MseResult r;
  r.d_outputs = Matrix(outputs.rows, outputs.cols);
  const double n = static_cast<double>(outputs.size());
  if (outputs.size() == 0) return r;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const double s = sigmoid(outputs.data[k]);
    const double e = s - targets.data[k];
    r.loss += e * e;
    r.d_outputs.data[k] = 2.0 * e * s * (1.0 - s) / n;
  }
  r.loss /= n;
  return r;
}

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool updatable = true;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<GradCheckEntry> entries;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates checked per buffer; 0 = all. Larger buffers are sampled.
  std::size_t max_coords_per_param = 0;
  /// |a - n| / max(|a|, |n|, floor). With eps = 1e-5 the difference
  /// quotient carries ~1e-11 of rounding noise, so near-zero gradients are
  /// compared in absolute terms below the floor.
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

/// Compares analytic gradients against central differences.
/// `compute_grads` must zero and fill every parameter's grad; `loss` must be
/// a deterministic function of the current parameter values.
inline GradCheckReport grad_check(const std::function<double()>& loss,
                                  const std::function<void()>& compute_grads,
                                  const ParameterList& params,
                                  const GradCheckOptions& opt = {}) {
  detail::require(opt.eps > 0.0, "grad_check: eps must be positive");
  compute_grads();
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  Rng rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_param == 0 || n <= opt.max_coords_per_param) {
      coords.resize(n);
      for (std::size_t k = 0; k < n; ++k) coords[k] = k;
    } else {
      for (std::size_t k = 0; k < opt.max_coords_per_param; ++k)
        coords.push_back(static_cast<std::size_t>(rng.below(n)));
    }
    for (std::size_t k : coords) {
      const double w = p.value.data[k];
      p.value.data[k] = w + opt.eps;
      const double up = loss();
      p.value.data[k] = w - opt.eps;
      const double down = loss();
      p.value.data[k] = w;
      GradCheckEntry e;
      e.param = p.name;
      e.index = k;
      e.analytic = analytic[pi].data[k];
      e.numeric = (up - down) / (2.0 * opt.eps);
      e.rel_error = std::abs(e.analytic - e.numeric) /
                    std::max({std::abs(e.analytic), std::abs(e.numeric), opt.floor});
      e.updatable = !p.frozen;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.entries.push_back(std::move(e));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace mtslm
