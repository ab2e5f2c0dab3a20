#pragma once

// Forget-gate bias <-> memory timescale conversions, timescale estimation
// from gate traces, the Inverse Gamma distribution, per-unit timescale
// assignment, and the exponential-mixture decay E_T[e^{-s/T}].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtslm/quadrature.hpp"
#include "mtslm/rng.hpp"

namespace mtslm {

// ---------------------------------------------------------------------------
// Bias <-> timescale

/// T = -1/log(sigma(b_f)) = 1/log(1 + e^{-b_f}).
/// For b_f > 36, log1p(e^{-b}) == e^{-b} in double precision, so T = e^{b};
/// that is clamped to the largest finite double once e^{b} overflows.
inline double forgetting_time(double b_f) {
  if (!std::isfinite(b_f)) throw std::invalid_argument("forgetting_time: bias must be finite");
  if (b_f > 36.0) {
    if (b_f > 700.0 && b_f >= std::log(std::numeric_limits<double>::max()))
      return std::numeric_limits<double>::max();
    return std::exp(b_f);
  }
  // softplus(-b) without overflow for very negative b
  const double x = -b_f;
  const double sp = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  return 1.0 / sp;
}

/// b_f = -log(e^{1/T} - 1). expm1 keeps precision for large T; for
/// 1/T > 30 the identity -log(e^x - 1) = -x - log1p(-e^{-x}) avoids overflow.
inline double forget_bias(double T) {
  if (!(T > 0.0) || !std::isfinite(T))
    throw std::invalid_argument("forget_bias: timescale must be positive and finite");
  const double x = 1.0 / T;
  if (x > 30.0) return -x - std::log1p(-std::exp(-x));
  return -std::log(std::expm1(x));
}

// ---------------------------------------------------------------------------
// Timescale estimation

/// Forget-gate values f_t^j of one unit over N sequences of K steps,
/// stored sequence-major (j * K + t).
struct GateTrace {
  std::size_t unit = 0;
  std::size_t sequences = 0;
  std::size_t steps = 0;
  std::vector<double> values;
};

inline constexpr double kGateClamp = 1e-12;

/// T_est = -1/log(mean f), the mean clamped to [1e-12, 1 - 1e-12].
inline double estimate_timescale(std::span<const double> gate_values) {
  if (gate_values.empty()) throw std::invalid_argument("estimate_timescale: empty trace");
  double sum = 0.0;
  for (double f : gate_values) sum += f;
  double mean = sum / static_cast<double>(gate_values.size());
  mean = std::clamp(mean, kGateClamp, 1.0 - kGateClamp);
  return -1.0 / std::log(mean);
}

inline double estimate_timescale(const GateTrace& trace) {
  if (trace.values.size() != trace.sequences * trace.steps)
    throw std::invalid_argument("estimate_timescale: trace dimensions inconsistent");
  return estimate_timescale(std::span<const double>(trace.values));
}

// ---------------------------------------------------------------------------
// Inverse Gamma distribution

struct InverseGammaParams {
  double alpha = 1.0;  // shape
  double beta = 1.0;   // scale

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
      throw std::invalid_argument("InverseGammaParams: alpha and beta must be positive");
  }
};

/// log P(T) = alpha log beta - lgamma(alpha) - (alpha+1) log T - beta/T
inline double inv_gamma_log_pdf(double T, const InverseGammaParams& p) {
  p.validate();
  if (!(T > 0.0)) throw std::invalid_argument("inv_gamma_pdf: T must be positive");
  return p.alpha * std::log(p.beta) - std::lgamma(p.alpha) -
         (p.alpha + 1.0) * std::log(T) - p.beta / T;
}

inline double inv_gamma_pdf(double T, const InverseGammaParams& p) {
  return std::exp(inv_gamma_log_pdf(T, p));
}

namespace detail {

inline double gamma_prefactor(double a, double x) {
  return std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// P(a, x) by its power series; converges quickly for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double ap = a, del = 1.0 / a, sum = del;
  for (int n = 0; n < 10000; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-17) break;
  }
  return sum * gamma_prefactor(a, x);
}

// Q(a, x) by its continued fraction (modified Lentz); for x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return h * gamma_prefactor(a, x);
}

}  // namespace detail

/// Regularized lower incomplete gamma P(a, x).
inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("regularized_gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return x < a + 1.0 ? detail::gamma_p_series(a, x) : 1.0 - detail::gamma_q_fraction(a, x);
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("regularized_gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  return x < a + 1.0 ? 1.0 - detail::gamma_p_series(a, x) : detail::gamma_q_fraction(a, x);
}

/// F(x) = Q(alpha, beta / x).
inline double inv_gamma_cdf(double x, const InverseGammaParams& p) {
  p.validate();
  if (!(x > 0.0)) throw std::invalid_argument("inv_gamma_cdf: x must be positive");
  return regularized_gamma_q(p.alpha, p.beta / x);
}

/// Inverse CDF by safeguarded Newton iteration inside a bisection bracket.
inline double inv_gamma_quantile(double prob, const InverseGammaParams& p) {
  p.validate();
  if (!(prob > 0.0 && prob < 1.0))
    throw std::invalid_argument("inv_gamma_quantile: probability must lie in (0, 1)");
  const auto F = [&](double x) { return inv_gamma_cdf(x, p); };

  double lo = p.beta / std::max(p.alpha, 1.0), hi = lo;
  while (F(lo) >= prob) {
    lo *= 0.5;
    if (lo < 1e-300) return lo;
  }
  while (F(hi) <= prob) {
    hi *= 2.0;
    if (hi > 1e300) return hi;
  }
  double x = std::sqrt(lo * hi);
  for (int it = 0; it < 500; ++it) {
    const double fx = F(x) - prob;
    if (fx == 0.0) return x;
    if (fx < 0.0) lo = x; else hi = x;
    if (hi / lo - 1.0 < 4e-16) break;
    const double dens = inv_gamma_pdf(x, p);
    double next = dens > 0.0 ? x - fx / dens : std::sqrt(lo * hi);
    if (!(next > lo && next < hi)) next = std::sqrt(lo * hi);
    x = next;
  }
  return x;
}

/// Gamma(shape, 1) variate: Marsaglia-Tsang squeeze/rejection; for
/// shape < 1 sample at shape + 1 and scale by U^{1/shape}.
inline double sample_gamma(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("sample_gamma: shape must be positive");
  if (shape < 1.0) {
    const double g = sample_gamma(shape + 1.0, rng);
    return g * std::pow(rng.uniform_open(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// Draws from InverseGamma(alpha, beta) as beta / Gamma(alpha, 1).
class InverseGammaSampler {
 public:
  InverseGammaSampler(InverseGammaParams params, std::uint64_t seed)
      : params_(params), rng_(seed) {
    params_.validate();
  }
  double operator()() { return params_.beta / sample_gamma(params_.alpha, rng_); }
  const Rng& rng() const { return rng_; }

 private:
  InverseGammaParams params_;
  Rng rng_;
};

inline std::vector<double> sample_inv_gamma(const InverseGammaParams& p, std::size_t n,
                                            std::uint64_t seed) {
  InverseGammaSampler draw(p, seed);
  std::vector<double> out(n);
  for (double& v : out) v = draw();
  return out;
}

// ---------------------------------------------------------------------------
// Timescale assignment

enum class AssignMode { quantile, sample };

/// How a layer's gate biases are set.
struct TimescaleSource {
  enum class Kind { trainable, fixed, inverse_gamma };

  Kind kind = Kind::trainable;
  std::vector<double> fixed;        // Kind::fixed, one T per unit
  InverseGammaParams distribution;  // Kind::inverse_gamma
  AssignMode mode = AssignMode::quantile;
  std::uint64_t seed = 0;           // AssignMode::sample only

  static TimescaleSource trainable() { return {}; }
  static TimescaleSource fixed_list(std::vector<double> timescales) {
    TimescaleSource s;
    s.kind = Kind::fixed;
    s.fixed = std::move(timescales);
    return s;
  }
  static TimescaleSource inverse_gamma(double alpha, AssignMode mode = AssignMode::quantile,
                                       std::uint64_t seed = 0, double beta = 1.0) {
    TimescaleSource s;
    s.kind = Kind::inverse_gamma;
    s.distribution = {alpha, beta};
    s.mode = mode;
    s.seed = seed;
    return s;
  }
};

/// Per-unit timescales with the biases that realize them.
struct TimescaleSpec {
  std::vector<double> timescales;
  std::vector<double> forget_bias;
  std::vector<double> input_bias;  // = -forget_bias
  TimescaleSource source;

  std::size_t size() const { return timescales.size(); }
};

/// floor(n/2) units at t_first, the rest at t_second.
inline std::vector<double> split_timescales(std::size_t n, double t_first, double t_second) {
  std::vector<double> out(n, t_second);
  std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n / 2), t_first);
  return out;
}

inline TimescaleSpec timescale_spec_from(std::vector<double> timescales, TimescaleSource source) {
  TimescaleSpec spec;
  spec.forget_bias.reserve(timescales.size());
  spec.input_bias.reserve(timescales.size());
  for (double T : timescales) {
    const double b = forget_bias(T);
    spec.forget_bias.push_back(b);
    spec.input_bias.push_back(-b);
  }
  spec.timescales = std::move(timescales);
  spec.source = std::move(source);
  return spec;
}

/// quantile mode: T_i = F^{-1}((i + 0.5) / n), ascending.
/// sample mode: n seeded draws (unsorted).
inline TimescaleSpec assign_timescales(std::size_t n_units, const TimescaleSource& source) {
  if (n_units == 0) throw std::invalid_argument("assign_timescales: n_units must be >= 1");
  switch (source.kind) {
    case TimescaleSource::Kind::trainable:
      throw std::invalid_argument("assign_timescales: trainable source has no timescales");
    case TimescaleSource::Kind::fixed:
      if (source.fixed.empty())
        throw std::invalid_argument("assign_timescales: empty fixed timescale list");
      if (source.fixed.size() != n_units)
        throw std::invalid_argument("assign_timescales: fixed list length != n_units");
      return timescale_spec_from(source.fixed, source);
    case TimescaleSource::Kind::inverse_gamma: {
      source.distribution.validate();
      std::vector<double> T(n_units);
      if (source.mode == AssignMode::quantile) {
        for (std::size_t i = 0; i < n_units; ++i)
          T[i] = inv_gamma_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(n_units),
                                    source.distribution);
      } else {
        T = sample_inv_gamma(source.distribution, n_units, source.seed);
      }
      return timescale_spec_from(std::move(T), source);
    }
  }
  throw std::logic_error("assign_timescales: unknown source kind");
}

// ---------------------------------------------------------------------------
// Exponential mixture

struct MixtureMethod {
  enum class Kind { quadrature, monte_carlo };
  Kind kind = Kind::quadrature;
  std::size_t samples = 1'000'000;
  std::uint64_t seed = 0;
  /// Equal-probability strata for post-stratifying the Monte Carlo draws;
  /// 1 gives the plain sample mean.
  std::size_t strata = 1000;

  static MixtureMethod quadrature() { return {}; }
  static MixtureMethod monte_carlo(std::size_t n, std::uint64_t seed, std::size_t strata = 1000) {
    return {Kind::monte_carlo, n, seed, strata};
  }
};

/// E_{T ~ InvGamma(d, 1)}[e^{-s/T}], the retention after lag s of a unit
/// population whose timescales follow the Inverse Gamma law.
///
/// Quadrature integrates P(T) e^{-s/T} dT after the change of variables
/// u = 1/T = e^w, i.e. over w with integrand P(e^{-w}) e^{-s e^w} e^{-w}.
/// The truncated left tail (T -> inf) is bounded by e^{d w_lo}/(d Gamma(d)).
inline double mixture_decay(double s, double d, const MixtureMethod& method = {}) {
  if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("mixture_decay: lag must be >= 0");
  if (!(d > 0.0) || !std::isfinite(d)) throw std::invalid_argument("mixture_decay: exponent must be > 0");
  const InverseGammaParams p{d, 1.0};

  if (method.kind == MixtureMethod::Kind::monte_carlo) {
    if (method.samples == 0) throw std::invalid_argument("mixture_decay: need >= 1 sample");
    InverseGammaSampler draw(p, method.seed);
    if (method.strata <= 1) {
      double sum = 0.0;
      for (std::size_t k = 0; k < method.samples; ++k) sum += std::exp(-s / draw());
      return sum / static_cast<double>(method.samples);
    }
    // Post-stratification: the same draws are binned into strata whose
    // probabilities under the sampling law are known from the CDF, and the
    // stratum means are combined with those probabilities as weights.
    // K equal-probability strata cover the bulk; the top one is split further
    // in quarter decades of tail probability while each piece still expects
    // >= 8 draws, since for large lags almost all of the mean sits in the
    // long-timescale tail.
    const std::size_t K = method.strata;
    const double n = static_cast<double>(method.samples);
    std::vector<double> upper_probs;  // cumulative probability at each upper edge
    for (std::size_t k = 1; k < K; ++k)
      upper_probs.push_back(static_cast<double>(k) / static_cast<double>(K));
    double tail = 1.0 / static_cast<double>(K);
    for (;;) {
      const double next = tail * std::pow(10.0, -0.25);
      if (n * (tail - next) < 8.0 || n * next < 8.0) break;
      upper_probs.push_back(1.0 - next);
      tail = next;
    }
    std::vector<double> edges(upper_probs.size()), weights(upper_probs.size() + 1);
    double prev = 0.0;
    for (std::size_t k = 0; k < upper_probs.size(); ++k) {
      edges[k] = inv_gamma_quantile(upper_probs[k], p);
      weights[k] = upper_probs[k] - prev;
      prev = upper_probs[k];
    }
    weights.back() = 1.0 - prev;

    std::vector<double> sums(weights.size(), 0.0);
    std::vector<std::size_t> counts(weights.size(), 0);
    for (std::size_t k = 0; k < method.samples; ++k) {
      const double T = draw();
      const auto bin = static_cast<std::size_t>(
          std::upper_bound(edges.begin(), edges.end(), T) - edges.begin());
      sums[bin] += std::exp(-s / T);
      ++counts[bin];
    }
    // An empty stratum borrows the mean of the nearest populated one below.
    double total = 0.0, last_mean = 0.0;
    bool have_mean = false;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      if (counts[k] > 0) {
        last_mean = sums[k] / static_cast<double>(counts[k]);
        have_mean = true;
      }
      if (have_mean) total += weights[k] * last_mean;
    }
    return total;
  }

  const auto integrand = [&](double w) {
    const double T = std::exp(-w);
    return std::exp(inv_gamma_log_pdf(T, p) - s * std::exp(w) - w);
  };
  const double log_norm = std::log(d) + std::lgamma(d);
  const double w_lo = (-40.0 + log_norm) / d;
  const double w_peak = std::log(d / (1.0 + s));
  const double w_hi = std::max(std::log(800.0 / (1.0 + s)), w_peak + 1.0);
  return integrate(integrand, w_lo, w_hi, 1e-15, 1e-13, 20000).value;
}

// ---------------------------------------------------------------------------
// JSON

inline const char* to_string(AssignMode m) { return m == AssignMode::quantile ? "quantile" : "sample"; }

inline AssignMode assign_mode_from_string(const std::string& s) {
  if (s == "quantile") return AssignMode::quantile;
  if (s == "sample") return AssignMode::sample;
  throw std::invalid_argument("unknown timescale assignment mode: " + s);
}

inline void to_json(nlohmann::json& j, const TimescaleSource& s) {
  switch (s.kind) {
    case TimescaleSource::Kind::trainable:
      j = {{"kind", "trainable"}};
      break;
    case TimescaleSource::Kind::fixed:
      j = {{"kind", "fixed"}, {"timescales", s.fixed}};
      break;
    case TimescaleSource::Kind::inverse_gamma:
      j = {{"kind", "inverse_gamma"},
           {"alpha", s.distribution.alpha},
           {"beta", s.distribution.beta},
           {"mode", to_string(s.mode)},
           {"seed", s.seed}};
      break;
  }
}

inline void from_json(const nlohmann::json& j, TimescaleSource& s) {
  const std::string kind = j.at("kind").get<std::string>();
  s = TimescaleSource{};
  if (kind == "trainable") {
    s.kind = TimescaleSource::Kind::trainable;
  } else if (kind == "fixed") {
    s.kind = TimescaleSource::Kind::fixed;
    s.fixed = j.at("timescales").get<std::vector<double>>();
  } else if (kind == "inverse_gamma") {
    s.kind = TimescaleSource::Kind::inverse_gamma;
    s.distribution.alpha = j.at("alpha").get<double>();
    s.distribution.beta = j.value("beta", 1.0);
    s.mode = assign_mode_from_string(j.value("mode", std::string("quantile")));
    s.seed = j.value("seed", std::uint64_t{0});
  } else {
    throw std::invalid_argument("unknown timescale source kind: " + kind);
  }
}

inline void to_json(nlohmann::json& j, const TimescaleSpec& s) {
  j = {{"source", s.source}, {"timescales", s.timescales}, {"forget_bias", s.forget_bias}};
}

inline void from_json(const nlohmann::json& j, TimescaleSpec& s) {
  s.source = j.at("source").get<TimescaleSource>();
  s.timescales = j.at("timescales").get<std::vector<double>>();
  s.forget_bias = j.at("forget_bias").get<std::vector<double>>();
  s.input_bias.resize(s.forget_bias.size());
  for (std::size_t k = 0; k < s.forget_bias.size(); ++k) s.input_bias[k] = -s.forget_bias[k];
}

}  // namespace mtslm
