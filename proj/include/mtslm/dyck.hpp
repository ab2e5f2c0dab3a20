#pragma once

// Dyck-2 probabilistic grammar:
//   S -> (S) with p1 | [S] with p2 | SS with q | empty otherwise.
// Generation, next-closer targets, matched-pair distances, datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mtslm/errors.hpp"
#include "mtslm/rng.hpp"

namespace mtslm {

struct DyckGrammarParams {
  double p1 = 0.25;
  double p2 = 0.25;
  double q = 0.25;
  std::size_t max_len = 200;

  void validate() const {
    const bool ok = p1 > 0.0 && p1 < 1.0 && p2 > 0.0 && p2 < 1.0 && q > 0.0 && q < 1.0 &&
                    p1 + p2 + q < 1.0 && max_len >= 2;
    if (!ok) throw std::invalid_argument("DyckGrammarParams: need 0 < p1, p2, q < 1 and p1 + p2 + q < 1");
  }
};

using TargetPair = std::array<std::uint8_t, 2>;  // (")" valid, "]" valid)

struct DyckSequence {
  std::string symbols;
  std::vector<TargetPair> targets;
  std::vector<std::size_t> distances;  // ordered by opening index
  std::size_t max_distance = 0;
};

inline constexpr std::size_t kDyckMaxStack = 10000;
inline constexpr std::size_t kDyckMaxAttempts = 1000000;

/// One leftmost expansion from S with an explicit work stack. Rule choice
/// by a single draw u: u < p1 -> (S); u < p1+p2 -> [S]; u < p1+p2+q -> SS;
/// else empty. Returns an empty string when the attempt is rejected (would
/// exceed max_len, exceeds the stack cap, or expands to nothing).
template <UniformSource U>
std::string expand_dyck(const DyckGrammarParams& params, U& draws) {
  std::string out;
  std::vector<char> work{'S'};
  std::size_t pending_terminals = 0;
  while (!work.empty()) {
    const char item = work.back();
    work.pop_back();
    if (item != 'S') {
      out.push_back(item);
      --pending_terminals;
      continue;
    }
    const double u = draws.uniform();
    if (u < params.p1) {
      work.insert(work.end(), {')', 'S', '('});
      pending_terminals += 2;
    } else if (u < params.p1 + params.p2) {
      work.insert(work.end(), {']', 'S', '['});
      pending_terminals += 2;
    } else if (u < params.p1 + params.p2 + params.q) {
      work.insert(work.end(), {'S', 'S'});
    }
    if (out.size() + pending_terminals > params.max_len || work.size() > kDyckMaxStack) return {};
  }
  return out;
}

/// Rejection loop around expand_dyck.
template <UniformSource U>
std::string generate_dyck_symbols(const DyckGrammarParams& params, U& draws) {
  params.validate();
  for (std::size_t attempt = 0; attempt < kDyckMaxAttempts; ++attempt) {
    std::string s = expand_dyck(params, draws);
    if (!s.empty()) return s;
  }
  throw std::runtime_error("generate_dyck: no acceptable sequence within the attempt limit");
}

/// After each symbol, the one-hot of the innermost open bracket's closer,
/// or (0, 0) when nothing is open.
inline std::vector<TargetPair> dyck_targets(std::string_view symbols) {
  std::vector<char> stack;
  std::vector<TargetPair> out;
  out.reserve(symbols.size());
  for (char c : symbols) {
    switch (c) {
      case '(':
      case '[':
        stack.push_back(c);
        break;
      case ')':
      case ']':
        if (stack.empty() || stack.back() != (c == ')' ? '(' : '['))
          throw std::invalid_argument("dyck_targets: invalid bracket prefix");
        stack.pop_back();
        break;
      default:
        throw std::invalid_argument("dyck_targets: symbol outside {(, ), [, ]}");
    }
    if (stack.empty())
      out.push_back({0, 0});
    else if (stack.back() == '(')
      out.push_back({1, 0});
    else
      out.push_back({0, 1});
  }
  return out;
}

inline bool is_balanced(std::string_view symbols) {
  std::vector<char> stack;
  for (char c : symbols) {
    if (c == '(' || c == '[') {
      stack.push_back(c);
    } else if (c == ')' || c == ']') {
      if (stack.empty() || stack.back() != (c == ')' ? '(' : '[')) return false;
      stack.pop_back();
    } else {
      return false;
    }
  }
  return stack.empty();
}

/// index(close) - index(open) for every matched pair, ordered by opening index.
inline std::vector<std::size_t> pair_distances(std::string_view symbols) {
  if (!is_balanced(symbols)) throw std::invalid_argument("pair_distances: unbalanced input");
  std::vector<std::size_t> open, dist(symbols.size() / 2);
  std::vector<std::size_t> slot_of_open(symbols.size());
  std::size_t next_slot = 0;
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    if (symbols[k] == '(' || symbols[k] == '[') {
      slot_of_open[k] = next_slot++;
      open.push_back(k);
    } else {
      const std::size_t o = open.back();
      open.pop_back();
      dist[slot_of_open[o]] = k - o;
    }
  }
  return dist;
}

inline DyckSequence make_dyck_sequence(std::string symbols) {
  DyckSequence s;
  s.distances = pair_distances(symbols);
  s.targets = dyck_targets(symbols);
  s.max_distance = s.distances.empty() ? 0 : *std::max_element(s.distances.begin(), s.distances.end());
  s.symbols = std::move(symbols);
  return s;
}

template <UniformSource U>
DyckSequence generate_dyck(const DyckGrammarParams& params, U& draws) {
  return make_dyck_sequence(generate_dyck_symbols(params, draws));
}

struct DyckDataset {
  DyckGrammarParams params;
  std::uint64_t seed = 0;
  std::vector<DyckSequence> train, valid, test;
};

/// Sequence k of split s is generated from its own stream
/// Rng(derive_seed(seed, s, k)), so splits are disjoint and every sequence
/// can be produced independently.
inline DyckDataset build_dyck_dataset(const DyckGrammarParams& params, std::size_t n_train,
                                      std::size_t n_valid, std::size_t n_test, std::uint64_t seed) {
  params.validate();
  if (n_train == 0 || n_valid == 0 || n_test == 0)
    throw std::invalid_argument("build_dyck_dataset: split sizes must be >= 1");
  DyckDataset ds;
  ds.params = params;
  ds.seed = seed;
  const auto fill = [&](std::vector<DyckSequence>& out, std::size_t n, std::uint64_t split) {
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      Rng rng(derive_seed(seed, split, k));
      out.push_back(generate_dyck(params, rng));
    }
  };
  fill(ds.train, n_train, 0);
  fill(ds.valid, n_valid, 1);
  fill(ds.test, n_test, 2);
  return ds;
}

/// count[d] = number of matched pairs at distance d, pooled over sequences.
inline std::vector<std::size_t> distance_histogram(const std::vector<DyckSequence>& seqs) {
  std::vector<std::size_t> hist;
  for (const auto& s : seqs)
    for (std::size_t d : s.distances) {
      if (d >= hist.size()) hist.resize(d + 1, 0);
      ++hist[d];
    }
  return hist;
}

struct PowerLawFit {
  double slope = 0.0;      // log count per log distance
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t points = 0;
};

/// Least-squares line through (log d, log count) for d in [lo, hi] with a
/// nonzero count. Matched-pair distances are always odd, so even distances
/// never enter the fit.
inline PowerLawFit fit_power_law(const std::vector<std::size_t>& hist, std::size_t lo, std::size_t hi) {
  std::vector<double> xs, ys;
  for (std::size_t d = std::max<std::size_t>(lo, 1); d <= hi && d < hist.size(); ++d)
    if (hist[d] > 0) {
      xs.push_back(std::log(static_cast<double>(d)));
      ys.push_back(std::log(static_cast<double>(hist[d])));
    }
  if (xs.size() < 2) throw std::invalid_argument("fit_power_law: fewer than two populated distances");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    mx += xs[k];
    my += ys[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxx += (xs[k] - mx) * (xs[k] - mx);
    sxy += (xs[k] - mx) * (ys[k] - my);
    syy += (ys[k] - my) * (ys[k] - my);
  }
  PowerLawFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  f.points = xs.size();
  return f;
}

// JSON lines: {"symbols": "...", "max_distance": n}; targets and distances
// are recomputed on load.

inline void write_dyck_jsonl(const std::filesystem::path& path, const std::vector<DyckSequence>& seqs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : seqs)
    out << nlohmann::json{{"symbols", s.symbols}, {"max_distance", s.max_distance}}.dump() << '\n';
}

inline std::vector<DyckSequence> read_dyck_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open " + path.string());
  std::vector<DyckSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DyckSequence s = make_dyck_sequence(j.at("symbols").get<std::string>());
      if (j.contains("max_distance") && j["max_distance"].get<std::size_t>() != s.max_distance)
        throw FormatError("max_distance disagrees with symbols");
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mtslm
