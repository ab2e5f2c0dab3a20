#pragma once

// The two model families: a stacked LSTM word-level language model with a
// tied embedding/decoder, and the single-layer Dyck-2 closer predictor.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtslm/corpus.hpp"
#include "mtslm/dyck.hpp"
#include "mtslm/mathkernel.hpp"
#include "mtslm/rng.hpp"
#include "mtslm/timescale.hpp"

namespace mtslm {

// ---------------------------------------------------------------------------
// Language model

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t embedding_size = 400;
  std::vector<std::size_t> layer_sizes{1150, 1150, 400};
  std::vector<TimescaleSource> layer_timescales;  // one per layer; empty = all trainable
  bool tie_embeddings = true;
  double embedding_init = 0.1;  // U(-r, r); LSTM layers use 1/H

  /// Every gate bias trainable.
  static LmConfig baseline(std::size_t vocab, std::size_t embedding = 400,
                           std::vector<std::size_t> layers = {1150, 1150, 400}) {
    LmConfig c;
    c.vocab_size = vocab;
    c.embedding_size = embedding;
    c.layer_sizes = std::move(layers);
    c.layer_timescales.assign(c.layer_sizes.size(), TimescaleSource::trainable());
    return c;
  }

  /// Layer 1 fixed at T = 3 / T = 4 (half each), layer 2 fixed from
  /// InverseGamma(alpha) quantiles, remaining layers trainable.
  static LmConfig multi_timescale(std::size_t vocab, double alpha = 0.56, std::size_t embedding = 400,
                                  std::vector<std::size_t> layers = {1150, 1150, 400}) {
    LmConfig c = baseline(vocab, embedding, std::move(layers));
    if (c.layer_sizes.size() < 2)
      throw std::invalid_argument("multi_timescale: need at least two layers");
    c.layer_timescales[0] = TimescaleSource::fixed_list(split_timescales(c.layer_sizes[0], 3.0, 4.0));
    c.layer_timescales[1] = TimescaleSource::inverse_gamma(alpha);
    return c;
  }

  const TimescaleSource& timescale_source(std::size_t layer) const {
    static const TimescaleSource trainable = TimescaleSource::trainable();
    return layer < layer_timescales.size() ? layer_timescales[layer] : trainable;
  }

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("LmConfig: vocabulary too small");
    if (embedding_size == 0) throw std::invalid_argument("LmConfig: embedding size must be > 0");
    if (layer_sizes.empty() || layer_sizes.size() > 3)
      throw std::invalid_argument("LmConfig: between one and three layers supported");
    for (std::size_t h : layer_sizes)
      if (h == 0) throw std::invalid_argument("LmConfig: empty layer");
    if (!tie_embeddings) throw std::invalid_argument("LmConfig: untied embeddings are not supported");
    if (layer_sizes.back() != embedding_size)
      throw std::invalid_argument("LmConfig: last layer width must equal embedding width when tied");
    if (!layer_timescales.empty() && layer_timescales.size() != layer_sizes.size())
      throw std::invalid_argument("LmConfig: one timescale source per layer required");
    if (!(embedding_init > 0.0)) throw std::invalid_argument("LmConfig: embedding_init must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const LmConfig& c) {
  j = {{"vocab_size", c.vocab_size},       {"embedding_size", c.embedding_size},
       {"layer_sizes", c.layer_sizes},     {"layer_timescales", c.layer_timescales},
       {"tie_embeddings", c.tie_embeddings}, {"embedding_init", c.embedding_init}};
}

inline void from_json(const nlohmann::json& j, LmConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embedding_size = j.at("embedding_size").get<std::size_t>();
  c.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
  c.layer_timescales = j.at("layer_timescales").get<std::vector<TimescaleSource>>();
  c.tie_embeddings = j.value("tie_embeddings", true);
  c.embedding_init = j.value("embedding_init", 0.1);
}

/// Per-layer (h, c), one row per stream.
using LmState = std::vector<LstmState>;

/// A window of next-token prediction for B parallel streams; element
/// [t * batch + b] is step t of stream b.
struct TokenWindow {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::vector<std::uint32_t> inputs;
  std::vector<std::uint32_t> targets;

  std::span<const std::uint32_t> inputs_at(std::size_t t) const {
    return {inputs.data() + t * batch, batch};
  }
  std::span<const std::uint32_t> targets_at(std::size_t t) const {
    return {targets.data() + t * batch, batch};
  }
};

inline TokenWindow make_window(const std::vector<std::vector<std::uint32_t>>& streams, const Window& w) {
  TokenWindow tw;
  tw.steps = w.length;
  tw.batch = streams.size();
  tw.inputs.resize(tw.steps * tw.batch);
  tw.targets.resize(tw.steps * tw.batch);
  for (std::size_t t = 0; t < tw.steps; ++t)
    for (std::size_t b = 0; b < tw.batch; ++b) {
      tw.inputs[t * tw.batch + b] = streams[b].at(w.offset + t);
      tw.targets[t * tw.batch + b] = streams[b].at(w.offset + t + 1);
    }
  return tw;
}

class LanguageModel {
 public:
  LmConfig config;
  Parameter embedding;  // V x d; also the decoder weight
  std::vector<LstmLayer> layers;
  std::vector<std::optional<TimescaleSpec>> timescales;  // assigned, per layer

  ParameterList parameters() {
    ParameterList out{&embedding};
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (Parameter* p : layers[l].parameters()) out.push_back(p);
    return out;
  }

  std::size_t frozen_scalar_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters())
      if (p->frozen) n += p->value.size();
    return n;
  }

  LmState zero_state(std::size_t batch) const {
    LmState s;
    for (const auto& layer : layers) s.push_back(LstmState::zeros(batch, layer.hidden_size()));
    return s;
  }

  /// Embedding rows for a batch of ids.
  Matrix embed(std::span<const std::uint32_t> ids) const {
    Matrix x(ids.size(), config.embedding_size);
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (ids[b] >= config.vocab_size) throw std::out_of_range("LanguageModel: token id out of range");
      const auto row = embedding.value.row(ids[b]);
      std::copy(row.begin(), row.end(), x.row(b).begin());
    }
    return x;
  }

  /// One time step through every layer; returns the top hidden state.
  Matrix step(const Matrix& x, LmState& state) {
    Matrix h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      state[l] = layers[l].step(h, state[l]);
      h = state[l].h;
    }
    return h;
  }

  void clear_caches() {
    for (auto& layer : layers) layer.clear_cache();
  }

  void set_record_history(bool on) {
    for (auto& layer : layers) layer.set_record_history(on);
  }

  /// Window most recently passed to lm_forward (needed by lm_backward).
  const TokenWindow& last_window() const { return last_window_; }
  void set_last_window(TokenWindow w) { last_window_ = std::move(w); }

 private:
  TokenWindow last_window_;
};

/// Embedding ~ U(-embedding_init, embedding_init); every LSTM weight and
/// bias ~ U(-1/H, 1/H) with H the layer's output size; then the gate biases
/// of fixed-timescale layers are overwritten and frozen (b_i = -b_f).
inline LanguageModel build_lm(const LmConfig& config, std::uint64_t seed) {
  config.validate();
  LanguageModel m;
  m.config = config;
  m.embedding = Parameter("embedding", config.vocab_size, config.embedding_size);
  Rng rng(seed);
  uniform_fill(m.embedding.value, config.embedding_init, rng);
  std::size_t in = config.embedding_size;
  for (std::size_t l = 0; l < config.layer_sizes.size(); ++l) {
    const std::size_t H = config.layer_sizes[l];
    LstmLayer layer(in, H);
    for (Parameter* p : layer.parameters()) p->name = "layer" + std::to_string(l) + "/" + p->name;
    layer.init_uniform(1.0 / static_cast<double>(H), rng);
    const TimescaleSource& src = config.timescale_source(l);
    if (src.kind != TimescaleSource::Kind::trainable) {
      TimescaleSpec spec = assign_timescales(H, src);
      layer.freeze_gate_biases(spec.forget_bias);
      m.timescales.emplace_back(std::move(spec));
    } else {
      m.timescales.emplace_back(std::nullopt);
    }
    m.layers.push_back(std::move(layer));
    in = H;
  }
  return m;
}

struct LmForwardResult {
  std::vector<double> losses;  // [t * batch + b], nats
  LmState state;
};

/// Stateful forward over one window. The incoming state is treated as a
/// constant (no gradient flows into the previous window).
inline LmForwardResult lm_forward(LanguageModel& model, const TokenWindow& window, const LmState& state) {
  if (state.size() != model.layers.size())
    throw std::invalid_argument("lm_forward: state has wrong layer count");
  for (std::size_t l = 0; l < state.size(); ++l)
    if (state[l].h.rows != window.batch || state[l].h.cols != model.layers[l].hidden_size())
      throw std::invalid_argument("lm_forward: state shape mismatch");
  for (std::uint32_t id : window.inputs)
    if (id >= model.config.vocab_size) throw std::out_of_range("lm_forward: input id out of range");

  model.clear_caches();
  LmForwardResult r;
  r.state = state;
  r.losses.reserve(window.steps * window.batch);
  for (std::size_t t = 0; t < window.steps; ++t) {
    const Matrix h = model.step(model.embed(window.inputs_at(t)), r.state);
    const auto ce = tied_softmax_cross_entropy(h, model.embedding, window.targets_at(t));
    r.losses.insert(r.losses.end(), ce.loss.begin(), ce.loss.end());
  }
  model.set_last_window(window);
  return r;
}

/// Accumulates gradients of grad_scale * sum(losses) of the last forward
/// window into every parameter (frozen ones included).
inline void lm_backward(LanguageModel& model, double grad_scale) {
  const TokenWindow& w = model.last_window();
  const auto& top = model.layers.back().cache();
  if (top.size() != w.steps) throw std::logic_error("lm_backward: caches do not match the last window");
  std::vector<Matrix> dh(w.steps);
  for (std::size_t t = 0; t < w.steps; ++t)
    dh[t] = tied_softmax_cross_entropy(top[t].h, model.embedding, w.targets_at(t), grad_scale).d_hidden;
  for (std::size_t l = model.layers.size(); l-- > 0;) dh = model.layers[l].backward(dh);
  for (std::size_t t = 0; t < w.steps; ++t) {
    const auto ids = w.inputs_at(t);
    for (std::size_t b = 0; b < w.batch; ++b) {
      auto grow = model.embedding.grad.row(ids[b]);
      const auto src = dh[t].row(b);
      for (std::size_t k = 0; k < grow.size(); ++k) grow[k] += src[k];
    }
  }
}

/// Mean loss of the window with gradients accumulated (scale 1/(steps*batch)).
inline double lm_train_window(LanguageModel& model, const TokenWindow& window, LmState& state) {
  auto r = lm_forward(model, window, state);
  const double n = static_cast<double>(r.losses.size());
  double sum = 0.0;
  for (double v : r.losses) sum += v;
  lm_backward(model, 1.0 / n);
  state = std::move(r.state);
  return sum / n;
}

/// Stateful no-gradient pass over a token sequence split into `batch`
/// contiguous streams, length-70 windows, state carried across windows.
/// Losses are returned stream-major: stream b covers positions
/// [b * (L - 1), (b + 1) * (L - 1)) with L the stream length.
inline std::vector<double> lm_stream_losses(LanguageModel& model, const std::vector<std::uint32_t>& tokens,
                                            std::size_t batch = 1) {
  const auto streams = make_streams(tokens, batch);
  const BatchPlan plan = make_batch_plan(tokens.size(), batch, BatchMode::eval, std::uint64_t{0});
  const std::size_t per_stream = plan.stream_length - 1;
  std::vector<double> out(batch * per_stream);
  LmState state = model.zero_state(batch);
  for (const Window& w : plan.windows) {
    auto r = lm_forward(model, make_window(streams, w), state);
    for (std::size_t t = 0; t < w.length; ++t)
      for (std::size_t b = 0; b < batch; ++b) out[b * per_stream + w.offset + t] = r.losses[t * batch + b];
    state = std::move(r.state);
  }
  model.clear_caches();
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Dyck-2 model

inline constexpr std::size_t kDyckAlphabet = 4;  // ( ) [ ]

inline std::size_t dyck_symbol_index(char c) {
  switch (c) {
    case '(': return 0;
    case ')': return 1;
    case '[': return 2;
    case ']': return 3;
    default: throw std::invalid_argument("dyck symbol outside {(, ), [, ]}");
  }
}

struct DyckModelConfig {
  std::size_t hidden_size = 256;
  TimescaleSource timescale = TimescaleSource::trainable();
  /// Uniform init half-width; 0 means 1/sqrt(hidden_size).
  double init_range = 0.0;

  double effective_init_range() const {
    return init_range > 0.0 ? init_range : 1.0 / std::sqrt(static_cast<double>(hidden_size));
  }
};

inline void to_json(nlohmann::json& j, const DyckModelConfig& c) {
  j = {{"hidden_size", c.hidden_size}, {"timescale", c.timescale}, {"init_range", c.init_range}};
}

inline void from_json(const nlohmann::json& j, DyckModelConfig& c) {
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.timescale = j.at("timescale").get<TimescaleSource>();
  c.init_range = j.value("init_range", 0.0);
}

/// One LSTM layer over one-hot symbols, then a linear map to two logits
/// (one per closer type).
class DyckModel {
 public:
  DyckModelConfig config;
  LstmLayer lstm;
  Parameter w_out;  // H x 2
  Parameter b_out;  // 1 x 2
  std::optional<TimescaleSpec> timescales;

  ParameterList parameters() {
    ParameterList out = lstm.parameters();
    out.push_back(&w_out);
    out.push_back(&b_out);
    return out;
  }
};

inline DyckModel build_dyck_model(const DyckModelConfig& config, std::uint64_t seed) {
  if (config.hidden_size < 2) throw std::invalid_argument("build_dyck_model: hidden size must be >= 2");
  DyckModel m;
  m.config = config;
  m.lstm = LstmLayer(kDyckAlphabet, config.hidden_size);
  for (Parameter* p : m.lstm.parameters()) p->name = "lstm/" + p->name;
  m.w_out = Parameter("out/w", config.hidden_size, 2);
  m.b_out = Parameter("out/b", 1, 2);
  Rng rng(seed);
  const double r = config.effective_init_range();
  m.lstm.init_uniform(r, rng);
  uniform_fill(m.w_out.value, r, rng);
  uniform_fill(m.b_out.value, r, rng);
  if (config.timescale.kind != TimescaleSource::Kind::trainable) {
    TimescaleSpec spec = assign_timescales(config.hidden_size, config.timescale);
    m.lstm.freeze_gate_biases(spec.forget_bias);
    m.timescales = std::move(spec);
  }
  return m;
}

inline DyckModel build_dyck_model(std::size_t hidden_size, const TimescaleSource& timescale,
                                  std::uint64_t seed) {
  DyckModelConfig c;
  c.hidden_size = hidden_size;
  c.timescale = timescale;
  return build_dyck_model(c, seed);
}

/// Output logits, one row per symbol; LSTM caches hold the whole sequence.
inline Matrix dyck_forward(DyckModel& model, std::string_view symbols) {
  model.lstm.clear_cache();
  const std::size_t H = model.config.hidden_size;
  LstmState state = LstmState::zeros(1, H);
  Matrix out(symbols.size(), 2);
  Matrix x(1, kDyckAlphabet);
  for (std::size_t t = 0; t < symbols.size(); ++t) {
    x.zero();
    x(0, dyck_symbol_index(symbols[t])) = 1.0;
    state = model.lstm.step(x, state);
    for (std::size_t k = 0; k < 2; ++k) {
      double o = model.b_out.value.data[k];
      for (std::size_t j = 0; j < H; ++j) o += state.h.data[j] * model.w_out.value(j, k);
      out(t, k) = o;
    }
  }
  return out;
}

inline Matrix dyck_target_matrix(const std::vector<TargetPair>& targets) {
  Matrix y(targets.size(), 2);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    y(t, 0) = targets[t][0];
    y(t, 1) = targets[t][1];
  }
  return y;
}

/// Per-sequence sigmoid MSE; gradients accumulated into every parameter.
inline double dyck_loss_and_backward(DyckModel& model, const DyckSequence& seq) {
  const Matrix logits = dyck_forward(model, seq.symbols);
  const MseResult mse = sigmoid_mse(logits, dyck_target_matrix(seq.targets));
  const std::size_t T = seq.symbols.size(), H = model.config.hidden_size;
  const auto& cache = model.lstm.cache();
  std::vector<Matrix> dh(T, Matrix(1, H));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < 2; ++k) {
      const double g = mse.d_outputs(t, k);
      model.b_out.grad.data[k] += g;
      for (std::size_t j = 0; j < H; ++j) {
        model.w_out.grad(j, k) += cache[t].h.data[j] * g;
        dh[t].data[j] += model.w_out.value(j, k) * g;
      }
    }
  }
  model.lstm.backward(dh);
  return mse.loss;
}

inline double dyck_loss(DyckModel& model, const DyckSequence& seq) {
  return sigmoid_mse(dyck_forward(model, seq.symbols), dyck_target_matrix(seq.targets)).loss;
}

/// sigma(logits) per step.
inline std::vector<std::array<double, 2>> dyck_predict(DyckModel& model, std::string_view symbols) {
  const Matrix logits = dyck_forward(model, symbols);
  std::vector<std::array<double, 2>> out(symbols.size());
  for (std::size_t t = 0; t < symbols.size(); ++t) out[t] = {sigmoid(logits(t, 0)), sigmoid(logits(t, 1))};
  return out;
}

}  // namespace mtslm
