#pragma once

// Optimizers (SGD with NT-ASGD averaging, Adam) and the two training loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtslm/corpus.hpp"
#include "mtslm/csv.hpp"
#include "mtslm/dyck.hpp"
#include "mtslm/errors.hpp"
#include "mtslm/mathkernel.hpp"
#include "mtslm/model.hpp"
#include "mtslm/rng.hpp"

namespace mtslm {

struct SgdAsgdConfig {
  double lr = 20.0;
  double weight_decay = 1.2e-6;
  double clip_norm = 0.25;  // 0 disables clipping
  std::size_t epochs = 1000;
  std::size_t nonmono = 5;
  std::size_t batch_size = 20;
  std::size_t eval_batch_size = 10;
  bool record_wallclock = false;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("SgdAsgdConfig: lr must be > 0");
    if (weight_decay < 0.0 || clip_norm < 0.0)
      throw std::invalid_argument("SgdAsgdConfig: weight_decay and clip_norm must be >= 0");
    if (nonmono < 1) throw std::invalid_argument("SgdAsgdConfig: nonmono must be >= 1");
    if (batch_size < 1 || eval_batch_size < 1) throw std::invalid_argument("SgdAsgdConfig: batch sizes must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const SgdAsgdConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"epochs", c.epochs},
       {"nonmono", c.nonmono},
       {"batch_size", c.batch_size},
       {"eval_batch_size", c.eval_batch_size},
       {"record_wallclock", c.record_wallclock}};
}

inline void from_json(const nlohmann::json& j, SgdAsgdConfig& c) {
  c = SgdAsgdConfig{};
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.epochs = j.value("epochs", c.epochs);
  c.nonmono = j.value("nonmono", c.nonmono);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
  c.record_wallclock = j.value("record_wallclock", c.record_wallclock);
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 2000;
  bool record_wallclock = false;

  void validate() const {
    if (!(lr > 0.0) || !(eps > 0.0)) throw std::invalid_argument("AdamConfig: lr and eps must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("AdamConfig: betas must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr},       {"beta1", c.beta1},   {"beta2", c.beta2},
       {"eps", c.eps},     {"epochs", c.epochs}, {"record_wallclock", c.record_wallclock}};
}

inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  c = AdamConfig{};
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.epochs = j.value("epochs", c.epochs);
  c.record_wallclock = j.value("record_wallclock", c.record_wallclock);
}

/// Everything an optimizer carries between steps. Buffers are keyed
/// "<role>/<parameter name>" (role: m, v for Adam; avg for ASGD).
struct OptimizerState {
  std::string kind;  // "sgd-asgd", "adam", or empty
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  bool asgd_triggered = false;
  std::uint64_t asgd_start_step = 0;
  std::uint64_t asgd_count = 0;
  std::vector<double> valid_history;
  std::map<std::string, Matrix> buffers;

  Matrix& buffer(const std::string& role, const Parameter& p) {
    auto [it, inserted] = buffers.try_emplace(role + "/" + p.name);
    if (inserted) it->second = Matrix(p.value.rows, p.value.cols);
    if (!it->second.same_shape(p.value))
      throw std::invalid_argument("optimizer buffer shape mismatch for " + p.name);
    return it->second;
  }
};

inline void to_json(nlohmann::json& j, const OptimizerState& s) {
  j = {{"kind", s.kind},
       {"step", s.step},
       {"epoch", s.epoch},
       {"asgd_triggered", s.asgd_triggered},
       {"asgd_start_step", s.asgd_start_step},
       {"asgd_count", s.asgd_count},
       {"valid_history", s.valid_history}};
}

inline void from_json(const nlohmann::json& j, OptimizerState& s) {
  s.kind = j.at("kind").get<std::string>();
  s.step = j.at("step").get<std::uint64_t>();
  s.epoch = j.at("epoch").get<std::uint64_t>();
  s.asgd_triggered = j.at("asgd_triggered").get<bool>();
  s.asgd_start_step = j.at("asgd_start_step").get<std::uint64_t>();
  s.asgd_count = j.at("asgd_count").get<std::uint64_t>();
  s.valid_history = j.at("valid_history").get<std::vector<double>>();
}

namespace detail {
inline void require_finite_grads(const ParameterList& params, const char* who) {
  for (const Parameter* p : params)
    if (!p->frozen && !p->grad.all_finite())
      throw NonFiniteError(std::string(who) + ": non-finite gradient in " + p->name + "; step aborted");
}
}  // namespace detail

/// L2 norm over the gradients of all trainable parameters.
inline double global_grad_norm(const ParameterList& params) {
  double s = 0.0;
  for (const Parameter* p : params)
    if (!p->frozen)
      for (double g : p->grad.data) s += g * g;
  return std::sqrt(s);
}

struct SgdStepReport {
  double grad_norm = 0.0;
  double scale = 1.0;  // clip factor applied to the gradients
};

/// Global-norm clip, then w <- w - lr * (g + wd * w). Frozen parameters are
/// never read for the norm nor written; weight decay skips parameters with
/// decay == false.
inline SgdStepReport sgd_step(const ParameterList& params, double lr, double weight_decay, double clip_norm) {
  detail::require_finite_grads(params, "sgd_step");
  SgdStepReport r;
  r.grad_norm = global_grad_norm(params);
  if (clip_norm > 0.0 && r.grad_norm > clip_norm) r.scale = clip_norm / r.grad_norm;
  for (Parameter* p : params) {
    if (p->frozen) continue;
    const double wd = p->decay ? weight_decay : 0.0;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      double& w = p->value.data[k];
      w -= lr * (r.scale * p->grad.data[k] + wd * w);
    }
  }
  return r;
}

/// Non-monotone trigger: with history = [v_0, ..., v_{L-1}] (last entry
/// current), fires iff at least n+1 earlier evaluations exist and
/// v_{L-1} > min(v_0, ..., v_{L-2-n}).
inline bool nt_asgd_trigger(std::span<const double> history, std::size_t n) {
  if (history.empty()) throw std::invalid_argument("nt_asgd_trigger: empty history");
  if (n < 1) throw std::invalid_argument("nt_asgd_trigger: n must be >= 1");
  const std::size_t prior = history.size() - 1;
  if (prior < n + 1) return false;
  const double best = *std::min_element(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(prior - n));
  return history.back() > best;
}

/// Starts averaging: running means restart from the next post-step values.
inline void asgd_start(OptimizerState& state) {
  state.asgd_triggered = true;
  state.asgd_start_step = state.step;
  state.asgd_count = 0;
}

/// Folds the current parameter values into the running means.
inline void asgd_accumulate(OptimizerState& state, const ParameterList& params) {
  if (!state.asgd_triggered) return;
  ++state.asgd_count;
  const double inv = 1.0 / static_cast<double>(state.asgd_count);
  for (const Parameter* p : params) {
    if (p->frozen) continue;
    Matrix& avg = state.buffer("avg", *p);
    for (std::size_t k = 0; k < avg.size(); ++k) avg.data[k] += (p->value.data[k] - avg.data[k]) * inv;
  }
}

inline std::vector<Matrix> snapshot_values(const ParameterList& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

inline void restore_values(const ParameterList& params, const std::vector<Matrix>& values) {
  if (values.size() != params.size()) throw std::invalid_argument("restore_values: count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!values[k].same_shape(params[k]->value)) throw std::invalid_argument("restore_values: shape mismatch");
    params[k]->value = values[k];
  }
}

/// Writes the running means into the trainable parameters.
inline void asgd_load_average(OptimizerState& state, const ParameterList& params) {
  if (!state.asgd_triggered || state.asgd_count == 0) return;
  for (Parameter* p : params)
    if (!p->frozen) p->value = state.buffer("avg", *p);
}

/// Bias-corrected Adam. The step counter is shared by all parameters.
inline void adam_step(const AdamConfig& config, OptimizerState& state, const ParameterList& params) {
  detail::require_finite_grads(params, "adam_step");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (Parameter* p : params) {
    if (p->frozen) continue;
    Matrix& m = state.buffer("m", *p);
    Matrix& v = state.buffer("v", *p);
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double g = p->grad.data[k];
      m.data[k] = config.beta1 * m.data[k] + (1.0 - config.beta1) * g;
      v.data[k] = config.beta2 * v.data[k] + (1.0 - config.beta2) * g * g;
      const double mhat = m.data[k] / c1;
      const double vhat = v.data[k] / c2;
      p->value.data[k] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;
  bool asgd_triggered = false;
  double wallclock_s = 0.0;
};

inline CsvTable epoch_log_table(const std::vector<EpochLog>& log) {
  CsvTable t;
  t.header = {"epoch", "train_loss", "valid_loss", "lr", "asgd_triggered", "wallclock_s"};
  for (const auto& e : log)
    t.add({std::to_string(e.epoch), format_number(e.train_loss), format_number(e.valid_loss), format_number(e.lr),
           e.asgd_triggered ? "1" : "0", format_number(e.wallclock_s)});
  return t;
}

struct TrainResult {
  std::vector<EpochLog> log;
  OptimizerState optimizer;
  double best_valid_loss = 0.0;
  std::size_t best_epoch = 0;
};

namespace detail {
class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};
}  // namespace detail

/// SGD over stateful BPTT windows with NT-ASGD. Each epoch draws its window
/// plan from derive_seed(seed, epoch), starts from zero state, and detaches
/// the state between windows. Validation runs after every epoch (on the
/// averaged weights once averaging has started); the parameters with the
/// best validation loss are left in the model.
inline TrainResult train_lm(LanguageModel& model, const CorpusBundle& corpus, const SgdAsgdConfig& config,
                            std::uint64_t seed) {
  config.validate();
  if (corpus.vocab.size() != model.config.vocab_size)
    throw std::invalid_argument("train_lm: corpus vocabulary size differs from the model's");
  if (corpus.train.size() <= config.batch_size || corpus.valid.size() <= config.eval_batch_size)
    throw std::invalid_argument("train_lm: corpus too small for the batch sizes");

  const ParameterList params = model.parameters();
  const auto streams = make_streams(corpus.train, config.batch_size);
  TrainResult result;
  result.optimizer.kind = "sgd-asgd";
  OptimizerState& opt = result.optimizer;
  std::vector<Matrix> best;
  bool have_best = false;
  const detail::Stopwatch clock(config.record_wallclock);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const BatchPlan plan =
        make_batch_plan(corpus.train.size(), config.batch_size, BatchMode::train, derive_seed(seed, epoch));
    LmState state = model.zero_state(config.batch_size);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const Window& w : plan.windows) {
      zero_grads(params);
      const double loss = lm_train_window(model, make_window(streams, w), state);
      if (!std::isfinite(loss))
        throw DivergenceError("train_lm: non-finite training loss at epoch " + std::to_string(epoch));
      try {
        sgd_step(params, config.lr, config.weight_decay, config.clip_norm);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("train_lm: ") + e.what() + " at epoch " + std::to_string(epoch));
      }
      ++opt.step;
      asgd_accumulate(opt, params);
      loss_sum += loss * static_cast<double>(w.length);
      loss_n += w.length;
    }
    model.clear_caches();

    double valid;
    if (opt.asgd_triggered && opt.asgd_count > 0) {
      const auto current = snapshot_values(params);
      asgd_load_average(opt, params);
      valid = mean(lm_stream_losses(model, corpus.valid, config.eval_batch_size));
      if (!have_best || valid < result.best_valid_loss) {
        best = snapshot_values(params);
        have_best = true;
        result.best_valid_loss = valid;
        result.best_epoch = epoch;
      }
      restore_values(params, current);
    } else {
      valid = mean(lm_stream_losses(model, corpus.valid, config.eval_batch_size));
      if (!have_best || valid < result.best_valid_loss) {
        best = snapshot_values(params);
        have_best = true;
        result.best_valid_loss = valid;
        result.best_epoch = epoch;
      }
    }
    if (!std::isfinite(valid))
      throw DivergenceError("train_lm: non-finite validation loss at epoch " + std::to_string(epoch));

    opt.epoch = epoch;
    if (!opt.asgd_triggered) {
      opt.valid_history.push_back(valid);
      if (nt_asgd_trigger(opt.valid_history, config.nonmono)) asgd_start(opt);
    }
    result.log.push_back({epoch, loss_sum / static_cast<double>(loss_n), valid, config.lr, opt.asgd_triggered,
                          clock.seconds()});
  }
  if (have_best) restore_values(params, best);
  return result;
}

/// Mean per-sequence loss over a split, no gradients.
inline double dyck_mean_loss(DyckModel& model, const std::vector<DyckSequence>& seqs) {
  double s = 0.0;
  for (const auto& q : seqs) s += dyck_loss(model, q);
  model.lstm.clear_cache();
  return seqs.empty() ? 0.0 : s / static_cast<double>(seqs.size());
}

/// Adam on one sequence at a time with full-sequence BPTT; the visiting
/// order is reshuffled each epoch from derive_seed(seed, epoch). Keeps the
/// parameters with the best validation loss.
inline TrainResult train_dyck(DyckModel& model, const DyckDataset& data, const AdamConfig& config,
                              std::uint64_t seed) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("train_dyck: empty training split");
  const ParameterList params = model.parameters();
  TrainResult result;
  result.optimizer.kind = "adam";
  OptimizerState& opt = result.optimizer;
  std::vector<std::size_t> order(data.train.size());
  std::vector<Matrix> best;
  bool have_best = false;
  const detail::Stopwatch clock(config.record_wallclock);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    Rng rng(derive_seed(seed, epoch));
    shuffle(order, rng);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      zero_grads(params);
      const double loss = dyck_loss_and_backward(model, data.train[idx]);
      if (!std::isfinite(loss))
        throw DivergenceError("train_dyck: non-finite training loss at epoch " + std::to_string(epoch));
      try {
        adam_step(config, opt, params);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("train_dyck: ") + e.what() + " at epoch " + std::to_string(epoch));
      }
      loss_sum += loss;
    }
    const double valid = data.valid.empty() ? 0.0 : dyck_mean_loss(model, data.valid);
    if (!std::isfinite(valid))
      throw DivergenceError("train_dyck: non-finite validation loss at epoch " + std::to_string(epoch));
    if (!have_best || valid < result.best_valid_loss) {
      best = snapshot_values(params);
      have_best = true;
      result.best_valid_loss = valid;
      result.best_epoch = epoch;
    }
    opt.epoch = epoch;
    result.log.push_back(
        {epoch, loss_sum / static_cast<double>(order.size()), valid, config.lr, false, clock.seconds()});
  }
  model.lstm.clear_cache();
  if (have_best) restore_values(params, best);
  return result;
}

}  // namespace mtslm
