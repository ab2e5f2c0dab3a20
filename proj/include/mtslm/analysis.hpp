#pragma once

// Measurements on trained models: perplexity by frequency bin, block
// bootstrap confidence intervals, forget-gate traces, KS distribution fits,
// unit-ablation routing, word-ablation cell-state decay, Dyck accuracy.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mtslm/corpus.hpp"
#include "mtslm/dyck.hpp"
#include "mtslm/mathkernel.hpp"
#include "mtslm/model.hpp"
#include "mtslm/rng.hpp"
#include "mtslm/timescale.hpp"

namespace mtslm {

// ---------------------------------------------------------------------------
// Workers

/// MTSLM_THREADS if set to a positive integer, else 1.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("MTSLM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Runs fn(worker, i) for i in [0, n). Worker w handles a contiguous index
/// range; callers write results by index so output order never depends on
/// scheduling.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * n / workers; i < (w + 1) * n / workers; ++i) fn(w, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Perplexity

struct LossRecord {
  std::size_t position = 0;  // index of the predicted token
  std::uint32_t token = 0;
  double nll = 0.0;  // nats
  std::uint8_t bin = 0;
};

/// Stateful pass (batch 1, length-70 windows, zero state at the start).
inline std::vector<LossRecord> evaluate_lm(LanguageModel& model, const std::vector<std::uint32_t>& tokens,
                                           const Vocab& vocab) {
  if (vocab.size() != model.config.vocab_size)
    throw std::invalid_argument("evaluate_lm: vocabulary size differs from the model's");
  const auto bins = frequency_bins(vocab);
  const auto losses = lm_stream_losses(model, tokens, 1);
  std::vector<LossRecord> out(losses.size());
  for (std::size_t k = 0; k < losses.size(); ++k) {
    const std::uint32_t id = tokens[k + 1];
    out[k] = {k + 1, id, std::max(0.0, losses[k]), bins[id]};
  }
  return out;
}

struct PerplexityReport {
  double overall = 0.0;
  std::array<std::optional<double>, kFrequencyBins> by_bin;  // absent when a bin has no tokens
  std::array<std::size_t, kFrequencyBins> counts{};
};

/// exp(mean nll), overall and restricted to each frequency bin.
inline PerplexityReport perplexity_report(const std::vector<LossRecord>& records) {
  if (records.empty()) throw std::invalid_argument("perplexity_report: no records");
  PerplexityReport r;
  std::array<double, kFrequencyBins> sums{};
  double total = 0.0;
  for (const auto& rec : records) {
    total += rec.nll;
    sums.at(rec.bin) += rec.nll;
    ++r.counts.at(rec.bin);
  }
  r.overall = std::exp(total / static_cast<double>(records.size()));
  for (std::size_t b = 0; b < kFrequencyBins; ++b)
    if (r.counts[b] > 0) r.by_bin[b] = std::exp(sums[b] / static_cast<double>(r.counts[b]));
  return r;
}

// ---------------------------------------------------------------------------
// Block bootstrap

struct BootstrapResult {
  double point = 0.0;      // statistic on the original streams
  double mean_diff = 0.0;  // mean over resamples
  double lo = 0.0;         // 2.5th percentile
  double hi = 0.0;         // 97.5th percentile
  std::size_t blocks = 0;
  bool significant() const { return lo > 0.0 || hi < 0.0; }
};

/// Linear-interpolated quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("sorted_quantile: empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || sorted[lo] == sorted[hi]) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Statistic = perplexity_a - perplexity_b over the tokens of the selected
/// blocks. Streams are cut into aligned non-overlapping blocks of block_len
/// (a trailing partial block is dropped); each resample draws that many
/// blocks with replacement. An optional mask restricts which tokens count
/// (e.g. one frequency bin).
inline BootstrapResult bootstrap_diff_ci(std::span<const double> losses_a, std::span<const double> losses_b,
                                         std::size_t block_len = 100, std::size_t n_resamples = 10000,
                                         std::uint64_t seed = 0, std::span<const std::uint8_t> mask = {}) {
  if (losses_a.size() != losses_b.size()) throw std::invalid_argument("bootstrap_diff_ci: streams differ in length");
  if (!mask.empty() && mask.size() != losses_a.size())
    throw std::invalid_argument("bootstrap_diff_ci: mask length differs from the streams");
  if (block_len == 0 || losses_a.size() < block_len)
    throw std::invalid_argument("bootstrap_diff_ci: streams shorter than one block");
  if (n_resamples == 0) throw std::invalid_argument("bootstrap_diff_ci: need at least one resample");
  const std::size_t nb = losses_a.size() / block_len;
  std::vector<double> sum_a(nb, 0.0), sum_b(nb, 0.0);
  std::vector<std::size_t> count(nb, 0);
  for (std::size_t k = 0; k < nb; ++k)
    for (std::size_t t = k * block_len; t < (k + 1) * block_len; ++t) {
      if (!mask.empty() && !mask[t]) continue;
      sum_a[k] += losses_a[t];
      sum_b[k] += losses_b[t];
      ++count[k];
    }
  const auto statistic = [&](const auto& pick) {
    double a = 0.0, b = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < nb; ++k) {
      const std::size_t blk = pick(k);
      a += sum_a[blk];
      b += sum_b[blk];
      n += count[blk];
    }
    if (n == 0) return 0.0;
    return std::exp(a / static_cast<double>(n)) - std::exp(b / static_cast<double>(n));
  };

  BootstrapResult r;
  r.blocks = nb;
  if (std::accumulate(count.begin(), count.end(), std::size_t{0}) == 0)
    throw std::invalid_argument("bootstrap_diff_ci: mask selects no tokens");
  r.point = statistic([](std::size_t k) { return k; });
  Rng rng(seed);
  std::vector<double> stats(n_resamples);
  std::vector<std::size_t> picks(nb);
  for (std::size_t s = 0; s < n_resamples; ++s) {
    for (auto& p : picks) p = static_cast<std::size_t>(rng.below(nb));
    stats[s] = statistic([&](std::size_t k) { return picks[k]; });
  }
  r.mean_diff = std::accumulate(stats.begin(), stats.end(), 0.0) / static_cast<double>(n_resamples);
  std::sort(stats.begin(), stats.end());
  r.lo = sorted_quantile(stats, 0.025);
  r.hi = sorted_quantile(stats, 0.975);
  return r;
}

// ---------------------------------------------------------------------------
// Forget-gate traces

/// Contiguous, non-overlapping input sequences of `steps` tokens; at most
/// `max_sequences` of them (0 = as many as fit).
inline std::vector<std::vector<std::uint32_t>> split_sequences(const std::vector<std::uint32_t>& tokens,
                                                               std::size_t steps, std::size_t max_sequences = 0) {
  if (steps == 0) throw std::invalid_argument("split_sequences: steps must be >= 1");
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t off = 0; off + steps <= tokens.size(); off += steps) {
    if (max_sequences && out.size() == max_sequences) break;
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + steps));
  }
  return out;
}

/// f_t of every unit in `layer`, each sequence run from zero state.
/// All sequences must share one length.
inline std::vector<GateTrace> collect_gate_traces(LanguageModel& model,
                                                  const std::vector<std::vector<std::uint32_t>>& sequences,
                                                  std::size_t layer) {
  if (layer >= model.layers.size()) throw std::out_of_range("collect_gate_traces: layer index out of range");
  if (sequences.empty()) throw std::invalid_argument("collect_gate_traces: no sequences");
  const std::size_t K = sequences.front().size();
  const std::size_t H = model.layers[layer].hidden_size();
  std::vector<GateTrace> traces(H);
  for (std::size_t j = 0; j < H; ++j) traces[j] = {j, sequences.size(), K, std::vector<double>(sequences.size() * K)};
  model.set_record_history(false);
  for (std::size_t n = 0; n < sequences.size(); ++n) {
    if (sequences[n].size() != K) throw std::invalid_argument("collect_gate_traces: sequences differ in length");
    LmState state = model.zero_state(1);
    for (std::size_t t = 0; t < K; ++t) {
      const std::uint32_t id = sequences[n][t];
      model.step(model.embed(std::span<const std::uint32_t>(&id, 1)), state);
      const Matrix& f = model.layers[layer].cache().back().f;
      for (std::size_t j = 0; j < H; ++j) traces[j].values[n * K + t] = f.data[j];
    }
  }
  model.set_record_history(true);
  model.clear_caches();
  return traces;
}

inline std::vector<double> estimate_timescales(const std::vector<GateTrace>& traces) {
  std::vector<double> out;
  out.reserve(traces.size());
  for (const auto& t : traces) out.push_back(estimate_timescale(t));
  return out;
}

/// Heat map of mean forget-gate value per step: units sorted by overall
/// mean f (ascending), averaged over sequences, then over consecutive
/// groups of `group` units (a short last group is kept). Rows are groups,
/// columns steps.
inline Matrix gate_heatmap(const std::vector<GateTrace>& traces, std::size_t group = 10) {
  if (traces.empty() || group == 0) throw std::invalid_argument("gate_heatmap: empty input");
  const std::size_t K = traces.front().steps, N = traces.front().sequences;
  std::vector<std::vector<double>> per_unit(traces.size(), std::vector<double>(K, 0.0));
  std::vector<double> overall(traces.size(), 0.0);
  for (std::size_t j = 0; j < traces.size(); ++j) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < K; ++t) per_unit[j][t] += traces[j].values[n * K + t];
    for (std::size_t t = 0; t < K; ++t) {
      per_unit[j][t] /= static_cast<double>(N);
      overall[j] += per_unit[j][t];
    }
  }
  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return overall[a] < overall[b]; });
  const std::size_t rows = (traces.size() + group - 1) / group;
  Matrix heat(rows, K);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t begin = r * group, end = std::min(begin + group, traces.size());
    for (std::size_t t = 0; t < K; ++t) {
      double s = 0.0;
      for (std::size_t k = begin; k < end; ++k) s += per_unit[order[k]][t];
      heat(r, t) = s / static_cast<double>(end - begin);
    }
  }
  return heat;
}

// ---------------------------------------------------------------------------
// Rank correlation and KS fitting

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation of the average ranks.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < rx.size(); ++k) {
    sxy += (rx[k] - mx) * (ry[k] - my);
    sxx += (rx[k] - mx) * (rx[k] - mx);
    syy += (ry[k] - my) * (ry[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman: a sample is constant");
  return sxy / std::sqrt(sxx * syy);
}

/// D = max_i max(|i/n - F(x_(i))|, |(i-1)/n - F(x_(i))|) over sorted samples.
inline double ks_statistic(std::span<const double> samples, const std::function<double(double)>& cdf) {
  if (samples.empty()) throw std::invalid_argument("ks_statistic: empty samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double F = cdf(x[i]);
    d = std::max({d, std::abs(static_cast<double>(i + 1) / n - F), std::abs(static_cast<double>(i) / n - F)});
  }
  return std::min(d, 1.0);
}

inline double normal_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc(-(x - mu) / (sigma * std::sqrt(2.0)));
}

enum class DistributionFamily { inverse_gamma, narrow_gaussian };

inline const char* to_string(DistributionFamily f) {
  return f == DistributionFamily::inverse_gamma ? "inverse-gamma" : "narrow-gaussian";
}

struct KsFitResult {
  DistributionFamily family = DistributionFamily::inverse_gamma;
  std::vector<double> grid;
  std::vector<double> d;  // KS statistic per grid point
  double best_param = 0.0;
  double best_d = 1.0;
};

struct TimescaleFit {
  KsFitResult inverse_gamma;
  KsFitResult narrow_gaussian;
  const KsFitResult& winner() const {
    return narrow_gaussian.best_d < inverse_gamma.best_d ? narrow_gaussian : inverse_gamma;
  }
};

/// {step, 2*step, ..., count*step}, each point computed by multiplication.
inline std::vector<double> linear_grid(double step, std::size_t count) {
  std::vector<double> g(count);
  for (std::size_t k = 0; k < count; ++k) g[k] = static_cast<double>(k + 1) * step;
  return g;
}

inline std::vector<double> default_alpha_grid() { return linear_grid(0.1, 30); }
inline std::vector<double> default_mu_grid() { return linear_grid(0.1, 30); }
inline constexpr double kNarrowGaussianSigma = 0.1;

/// KS statistic over an inverse-gamma shape grid (scale 1) and a
/// fixed-width Gaussian mean grid. Ties keep the first grid point.
inline TimescaleFit fit_timescale_distribution(std::span<const double> samples,
                                               const std::vector<double>& alpha_grid = default_alpha_grid(),
                                               const std::vector<double>& mu_grid = default_mu_grid(),
                                               double sigma = kNarrowGaussianSigma) {
  if (alpha_grid.empty() || mu_grid.empty()) throw std::invalid_argument("fit_timescale_distribution: empty grid");
  if (samples.empty()) throw std::invalid_argument("fit_timescale_distribution: empty samples");
  for (double x : samples)
    if (!(x > 0.0)) throw std::invalid_argument("fit_timescale_distribution: samples must be > 0");
  TimescaleFit fit;
  const auto run = [&](KsFitResult& r, DistributionFamily fam, const std::vector<double>& grid,
                       const std::function<double(double, double)>& cdf) {
    r.family = fam;
    r.grid = grid;
    r.d.clear();
    r.best_d = std::numeric_limits<double>::infinity();
    for (double p : grid) {
      const double d = ks_statistic(samples, [&](double x) { return cdf(x, p); });
      r.d.push_back(d);
      if (d < r.best_d) {
        r.best_d = d;
        r.best_param = p;
      }
    }
  };
  run(fit.inverse_gamma, DistributionFamily::inverse_gamma, alpha_grid,
      [](double x, double a) { return inv_gamma_cdf(x, {a, 1.0}); });
  run(fit.narrow_gaussian, DistributionFamily::narrow_gaussian, mu_grid,
      [sigma](double x, double mu) { return normal_cdf(x, mu, sigma); });
  return fit;
}

// ---------------------------------------------------------------------------
// Unit ablation

/// 1 everywhere except 0 at the listed units.
inline std::vector<double> ablation_mask(std::size_t width, std::span<const std::size_t> units) {
  std::vector<double> m(width, 1.0);
  for (std::size_t u : units) m.at(u) = 0.0;
  return m;
}

/// Elementwise product; combining the masks of two unit sets gives the
/// mask of their union.
inline std::vector<double> compose_masks(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("compose_masks: length mismatch");
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * b[k];
  return out;
}

/// Per-token losses with the given units of `layer` ablated.
inline std::vector<double> ablated_losses(LanguageModel& model, const std::vector<std::uint32_t>& tokens,
                                          std::size_t layer, std::vector<double> mask, bool mask_cell = false) {
  if (layer >= model.layers.size()) throw std::out_of_range("ablated_losses: layer index out of range");
  model.layers[layer].set_unit_mask(std::move(mask), mask_cell);
  try {
    auto out = lm_stream_losses(model, tokens, 1);
    model.layers[layer].clear_unit_mask();
    return out;
  } catch (...) {
    model.layers[layer].clear_unit_mask();
    throw;
  }
}

/// Timescale used to order units: the assigned value for fixed layers,
/// the value implied by the current forget bias otherwise.
inline std::vector<double> unit_timescales(const LanguageModel& model, std::size_t layer) {
  if (layer >= model.layers.size()) throw std::out_of_range("unit_timescales: layer index out of range");
  if (model.timescales[layer]) return model.timescales[layer]->timescales;
  std::vector<double> out;
  for (double b : model.layers[layer].b_f.value.data) out.push_back(forgetting_time(b));
  return out;
}

struct AblationGroup {
  std::size_t index = 0;
  std::vector<std::size_t> units;
  double mean_timescale = 0.0;
  std::array<std::optional<double>, kFrequencyBins> ratio;  // ablated / intact perplexity per bin
  double ratio_all = 1.0;
};

struct AblationReport {
  std::size_t layer = 0;
  std::size_t group_size = 0;
  PerplexityReport intact;
  std::vector<AblationGroup> groups;
};

struct AblationOptions {
  std::size_t group_size = 50;
  bool mask_cell = false;  // also zero c_t of ablated units
};

inline AblationGroup ablation_ratios(LanguageModel& model, const std::vector<std::uint32_t>& tokens,
                                     const Vocab& vocab, std::size_t layer, std::vector<std::size_t> units,
                                     const PerplexityReport& intact, bool mask_cell = false) {
  const auto bins = frequency_bins(vocab);
  const auto losses =
      ablated_losses(model, tokens, layer, ablation_mask(model.layers[layer].hidden_size(), units), mask_cell);
  std::vector<LossRecord> recs(losses.size());
  for (std::size_t k = 0; k < losses.size(); ++k)
    recs[k] = {k + 1, tokens[k + 1], std::max(0.0, losses[k]), bins[tokens[k + 1]]};
  const PerplexityReport p = perplexity_report(recs);
  AblationGroup g;
  g.units = std::move(units);
  g.ratio_all = p.overall / intact.overall;
  for (std::size_t b = 0; b < kFrequencyBins; ++b)
    if (p.by_bin[b] && intact.by_bin[b]) g.ratio[b] = *p.by_bin[b] / *intact.by_bin[b];
  return g;
}

/// Units of `layer` sorted by timescale and cut into floor(width /
/// group_size) consecutive groups (leftover units at the long end are not
/// ablated); each group is ablated alone and compared with the intact model.
inline AblationReport ablate_and_route(LanguageModel& model, const std::vector<std::uint32_t>& tokens,
                                       const Vocab& vocab, std::size_t layer, const AblationOptions& opt = {}) {
  if (layer >= model.layers.size()) throw std::out_of_range("ablate_and_route: layer index out of range");
  const std::size_t width = model.layers[layer].hidden_size();
  if (opt.group_size == 0 || opt.group_size > width)
    throw std::invalid_argument("ablate_and_route: group size larger than the layer");
  const auto T = unit_timescales(model, layer);
  std::vector<std::size_t> order(width);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return T[a] < T[b]; });

  AblationReport rep;
  rep.layer = layer;
  rep.group_size = opt.group_size;
  rep.intact = perplexity_report(evaluate_lm(model, tokens, vocab));
  const std::size_t n_groups = width / opt.group_size;
  rep.groups.resize(n_groups);
  const std::size_t workers = worker_count();
  std::vector<LanguageModel> clones(std::min(workers, n_groups), model);
  parallel_for(n_groups, clones.size(), [&](std::size_t w, std::size_t g) {
    std::vector<std::size_t> units(order.begin() + static_cast<std::ptrdiff_t>(g * opt.group_size),
                                   order.begin() + static_cast<std::ptrdiff_t>((g + 1) * opt.group_size));
    double sum_t = 0.0;
    for (std::size_t u : units) sum_t += T[u];
    AblationGroup grp = ablation_ratios(clones[w], tokens, vocab, layer, std::move(units), rep.intact, opt.mask_cell);
    grp.index = g;
    grp.mean_timescale = sum_t / static_cast<double>(opt.group_size);
    rep.groups[g] = std::move(grp);
  });
  return rep;
}

// ---------------------------------------------------------------------------
// Word ablation

enum class WordAblationPolicy { replace_with_unk, zero_embedding };

struct WordAblationOptions {
  WordAblationPolicy policy = WordAblationPolicy::replace_with_unk;
  std::size_t group_layer = 1;  // layer whose units get per-group curves
  std::size_t group_size = 100;  // 0 disables group curves
};

struct DecayCurve {
  std::string label;          // "layer<l>" or "layer<l>/group<g>"
  double mean_timescale = 0;  // groups only
  std::vector<double> values;  // index tau
};

struct WordAblationResult {
  std::vector<DecayCurve> layers;
  std::vector<DecayCurve> groups;
};

/// For each sentence, runs intact and ablated passes from zero state where
/// the token at ablate_pos is replaced. curve(tau) = ||c_{t0+tau} -
/// c'_{t0+tau}||_2 divided by its tau = 0 value, averaged over the
/// sentences that reach t0 + tau.
inline WordAblationResult word_ablation_decay(LanguageModel& model,
                                              const std::vector<std::vector<std::uint32_t>>& sentences,
                                              std::size_t ablate_pos, const Vocab& vocab,
                                              const WordAblationOptions& opt = {}) {
  if (sentences.empty()) throw std::invalid_argument("word_ablation_decay: no sentences");
  const std::size_t L = model.layers.size();
  const bool grouped = opt.group_size > 0;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<double> group_t;
  if (grouped) {
    if (opt.group_layer >= L) throw std::out_of_range("word_ablation_decay: group layer out of range");
    const auto T = unit_timescales(model, opt.group_layer);
    std::vector<std::size_t> order(T.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return T[a] < T[b]; });
    for (std::size_t g = 0; g + 1 <= T.size() / opt.group_size; ++g) {
      groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(g * opt.group_size),
                          order.begin() + static_cast<std::ptrdiff_t>((g + 1) * opt.group_size));
      double s = 0.0;
      for (std::size_t u : groups.back()) s += T[u];
      group_t.push_back(s / static_cast<double>(opt.group_size));
    }
  }
  std::size_t horizon = 0;
  for (const auto& s : sentences) {
    if (s.size() <= ablate_pos) throw std::invalid_argument("word_ablation_decay: sentence shorter than ablate_pos");
    horizon = std::max(horizon, s.size() - ablate_pos);
  }
  std::vector<std::vector<double>> layer_sum(L, std::vector<double>(horizon, 0.0));
  std::vector<std::vector<double>> group_sum(groups.size(), std::vector<double>(horizon, 0.0));
  std::vector<std::size_t> reach(horizon, 0);

  const auto run = [&](const std::vector<std::uint32_t>& s, bool ablate) {
    std::vector<LmState> states;
    LmState st = model.zero_state(1);
    for (std::size_t t = 0; t < s.size(); ++t) {
      Matrix x;
      if (ablate && t == ablate_pos && opt.policy == WordAblationPolicy::zero_embedding) {
        x = Matrix(1, model.config.embedding_size);
      } else {
        const std::uint32_t id = (ablate && t == ablate_pos) ? vocab.unk_id() : s[t];
        x = model.embed(std::span<const std::uint32_t>(&id, 1));
      }
      model.step(x, st);
      if (t >= ablate_pos) states.push_back(st);
    }
    return states;
  };

  model.set_record_history(false);
  try {
    for (const auto& s : sentences) {
      if (opt.policy == WordAblationPolicy::replace_with_unk && s[ablate_pos] == vocab.unk_id())
        throw std::invalid_argument("word_ablation_decay: degenerate ablation (token already <unk>)");
      const auto a = run(s, false), b = run(s, true);
      std::vector<double> norm0(L), gnorm0(groups.size());
      for (std::size_t tau = 0; tau < a.size(); ++tau) {
        ++reach[tau];
        for (std::size_t l = 0; l < L; ++l) {
          double d2 = 0.0;
          for (std::size_t j = 0; j < a[tau][l].c.size(); ++j) {
            const double d = a[tau][l].c.data[j] - b[tau][l].c.data[j];
            d2 += d * d;
          }
          const double d = std::sqrt(d2);
          if (tau == 0) {
            if (d == 0.0) throw std::invalid_argument("word_ablation_decay: degenerate ablation (no state change)");
            norm0[l] = d;
          }
          layer_sum[l][tau] += d / norm0[l];
        }
        for (std::size_t g = 0; g < groups.size(); ++g) {
          double d2 = 0.0;
          for (std::size_t u : groups[g]) {
            const double d = a[tau][opt.group_layer].c.data[u] - b[tau][opt.group_layer].c.data[u];
            d2 += d * d;
          }
          const double d = std::sqrt(d2);
          if (tau == 0) gnorm0[g] = d;
          group_sum[g][tau] += gnorm0[g] > 0.0 ? d / gnorm0[g] : 0.0;
        }
      }
    }
  } catch (...) {
    model.set_record_history(true);
    model.clear_caches();
    throw;
  }
  model.set_record_history(true);
  model.clear_caches();

  WordAblationResult r;
  for (std::size_t l = 0; l < L; ++l) {
    DecayCurve c{"layer" + std::to_string(l), 0.0, {}};
    for (std::size_t tau = 0; tau < horizon; ++tau) c.values.push_back(layer_sum[l][tau] / static_cast<double>(reach[tau]));
    r.layers.push_back(std::move(c));
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    DecayCurve c{"layer" + std::to_string(opt.group_layer) + "/group" + std::to_string(g), group_t[g], {}};
    for (std::size_t tau = 0; tau < horizon; ++tau) c.values.push_back(group_sum[g][tau] / static_cast<double>(reach[tau]));
    r.groups.push_back(std::move(c));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dyck accuracy

using DyckPrediction = std::vector<std::array<double, 2>>;
using DyckPredictor = std::function<DyckPrediction(std::string_view)>;

/// Every step's thresholded outputs must equal the target pair.
inline bool sequence_correct(const DyckPrediction& pred, const std::vector<TargetPair>& targets,
                             double threshold = 0.5) {
  if (pred.size() != targets.size()) throw std::invalid_argument("sequence_correct: length mismatch");
  for (std::size_t t = 0; t < pred.size(); ++t)
    for (std::size_t k = 0; k < 2; ++k)
      if ((pred[t][k] > threshold) != (targets[t][k] == 1)) return false;
  return true;
}

struct AccuracyBucket {
  std::size_t lo = 0;
  std::size_t hi = 0;  // exclusive
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return static_cast<double>(correct) / static_cast<double>(n); }
};

struct DyckAccuracyReport {
  std::vector<AccuracyBucket> buckets;  // non-empty buckets only
  std::size_t n = 0;
  std::size_t correct = 0;
  std::vector<std::uint8_t> per_sequence;  // 1 if correct, in test order
  double overall() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

/// Buckets [edges[k], edges[k+1]) on the maximum pair distance; sequences
/// outside every bucket count only toward the overall figure.
inline DyckAccuracyReport dyck_accuracy_by_timescale(const DyckPredictor& predict,
                                                     const std::vector<DyckSequence>& test,
                                                     const std::vector<std::size_t>& edges,
                                                     double threshold = 0.5) {
  if (!std::is_sorted(edges.begin(), edges.end())) throw std::invalid_argument("dyck_accuracy: edges must be sorted");
  DyckAccuracyReport rep;
  rep.per_sequence.resize(test.size());
  std::vector<AccuracyBucket> all;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) all.push_back({edges[k], edges[k + 1], 0, 0});
  for (std::size_t i = 0; i < test.size(); ++i) {
    const bool ok = sequence_correct(predict(test[i].symbols), test[i].targets, threshold);
    rep.per_sequence[i] = ok;
    ++rep.n;
    rep.correct += ok;
    for (auto& b : all)
      if (test[i].max_distance >= b.lo && test[i].max_distance < b.hi) {
        ++b.n;
        b.correct += ok;
      }
  }
  for (const auto& b : all)
    if (b.n > 0) rep.buckets.push_back(b);
  return rep;
}

inline DyckAccuracyReport dyck_accuracy_by_timescale(DyckModel& model, const std::vector<DyckSequence>& test,
                                                     const std::vector<std::size_t>& edges,
                                                     double threshold = 0.5) {
  const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(test.size(), 1));
  if (workers <= 1)
    return dyck_accuracy_by_timescale([&](std::string_view s) { return dyck_predict(model, s); }, test, edges,
                                      threshold);
  std::vector<DyckModel> clones(workers, model);
  std::vector<DyckPrediction> preds(test.size());
  parallel_for(test.size(), workers, [&](std::size_t w, std::size_t i) { preds[i] = dyck_predict(clones[w], test[i].symbols); });
  std::size_t next = 0;
  return dyck_accuracy_by_timescale([&](std::string_view) { return preds[next++]; }, test, edges, threshold);
}

/// Fraction of sequences with max distance > min_distance predicted
/// entirely correctly; nullopt when there are none.
inline std::optional<double> long_range_accuracy(const DyckAccuracyReport& rep, const std::vector<DyckSequence>& test,
                                                 std::size_t min_distance) {
  std::size_t n = 0, ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test[i].max_distance > min_distance) {
      ++n;
      ok += rep.per_sequence.at(i);
    }
  if (n == 0) return std::nullopt;
  return static_cast<double>(ok) / static_cast<double>(n);
}

}  // namespace mtslm
