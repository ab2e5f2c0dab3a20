// Acceptance run: one [PASS]/[FAIL] line per criterion. `--only N` (repeatable)
// restricts the run, `--log FILE` copies the result lines. Exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mtslm/analysis.hpp"
#include "mtslm/checkpoint.hpp"
#include "mtslm/corpus.hpp"
#include "mtslm/dyck.hpp"
#include "mtslm/model.hpp"
#include "mtslm/timescale.hpp"
#include "mtslm/train.hpp"

#ifndef MTSLM_CLI_PATH
#define MTSLM_CLI_PATH "mtslm"
#endif

using namespace mtslm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " FAILED{" << what << "}";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// Tokens from a sparse random successor table over `vocab - 2` words.
CorpusBundle synthetic_corpus(std::size_t vocab, std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t words = vocab - 2;
  std::vector<std::array<std::uint32_t, 4>> next(words);
  for (auto& row : next)
    for (auto& v : row) v = static_cast<std::uint32_t>(rng.below(words));
  const auto sample = [&](std::size_t n) {
    std::vector<std::uint32_t> out{0};
    while (out.size() < n) out.push_back(next[out.back()][rng.below(4)]);
    return out;
  };
  CorpusBundle b;
  for (std::size_t k = 0; k < words; ++k) b.vocab.add("w" + std::to_string(k));
  b.vocab.add("<eos>");
  b.vocab.add("<unk>");
  b.train = sample(n_train);
  b.valid = sample(n_eval);
  b.test = sample(n_eval);
  b.vocab.recount(b.train);
  return b;
}

// ---------------------------------------------------------------------------

Outcome mixture_identity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst_quad = 0.0, worst_mc = 0.0;
  std::uint64_t seed = 1;
  for (double d : {0.5, 1.0, 1.5})
    for (double s : {1.0, 2.0, 5.0, 10.0, 100.0}) {
      const double exact = std::pow(s + 1.0, -d);
      worst_quad = std::max(worst_quad, std::abs(mixture_decay(s, d) / exact - 1.0));
      const double mc = mixture_decay(s, d, MixtureMethod::monte_carlo(1'000'000, seed++));
      worst_mc = std::max(worst_mc, std::abs(mc / exact - 1.0));
    }
  const double elapsed = seconds_since(t0);
  o.detail << "quadrature max rel err " << fmt(worst_quad) << ", Monte Carlo (1e6 draws) max rel err "
           << fmt(worst_mc) << ", " << fmt(elapsed, 3) << " s";
  o.require(worst_quad <= 1e-6, "quadrature within 1e-6");
  o.require(worst_mc <= 0.01, "Monte Carlo within 1%");
  o.require(elapsed < 10.0, "runtime < 10 s");
  return o;
}

Outcome timescale_calculus() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int k = 0; k <= 100000; ++k) {
    const double T = 0.5 * std::pow(2e6, k / 100000.0);
    worst = std::max(worst, std::abs(forgetting_time(forget_bias(T)) - T) / T);
  }
  const double spot_t = std::abs(forgetting_time(0.0) - 1.0 / std::numbers::ln2);
  const double spot_b = std::abs(forget_bias(1.0) + std::log(std::numbers::e - 1.0));
  const double elapsed = seconds_since(t0);
  o.detail << "round-trip max rel err " << fmt(worst) << " over T in [0.5, 1e6]; spot errors " << fmt(spot_t) << ", "
           << fmt(spot_b) << "; " << fmt(elapsed, 3) << " s";
  o.require(worst <= 1e-12, "round trip <= 1e-12");
  o.require(spot_t <= 1e-15 && spot_b <= 1e-15, "spot values");
  o.require(elapsed < 1.0, "runtime < 1 s");
  return o;
}

Outcome gradient_correctness() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst_lm = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    // embedding width 2 feeds a 2-unit layer tied back to V = 5
    for (bool mts : {false, true}) {
      auto cfg = mts ? LmConfig::multi_timescale(5, 0.56, 2, {2, 2}) : LmConfig::baseline(5, 2, {2});
      auto m = build_lm(cfg, seed);
      const std::vector<std::vector<std::uint32_t>> streams{{1, 4, 0, 3}};
      const TokenWindow w = make_window(streams, Window{0, 3});
      const auto rep = grad_check([&] { return mean(lm_forward(m, w, m.zero_state(1)).losses); },
                                  [&] {
                                    zero_grads(m.parameters());
                                    lm_forward(m, w, m.zero_state(1));
                                    lm_backward(m, 1.0 / 3.0);
                                  },
                                  m.parameters());
      worst_lm = std::max(worst_lm, rep.max_rel_error);
      checked += rep.checked;
    }
  }
  double worst_dyck = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto m = build_dyck_model(4, seed == 2 ? TimescaleSource::inverse_gamma(1.5) : TimescaleSource::trainable(), seed);
    const auto seq = make_dyck_sequence("([])()");
    const auto rep = grad_check([&] { return dyck_loss(m, seq); },
                                [&] {
                                  zero_grads(m.parameters());
                                  dyck_loss_and_backward(m, seq);
                                },
                                m.parameters());
    worst_dyck = std::max(worst_dyck, rep.max_rel_error);
    checked += rep.checked;
  }
  const double elapsed = seconds_since(t0);
  o.detail << "LM max rel err " << fmt(worst_lm) << ", Dyck max rel err " << fmt(worst_dyck) << " (" << checked
           << " coordinates, h = 1e-5), " << fmt(elapsed, 3) << " s";
  o.require(worst_lm < 1e-4, "LM gradients");
  o.require(worst_dyck < 1e-4, "Dyck gradients");
  o.require(elapsed < 30.0, "runtime < 30 s");
  return o;
}

Outcome timescale_control() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const CorpusBundle corpus = synthetic_corpus(200, 40000, 4000, 4);
  auto model = build_lm(LmConfig::multi_timescale(corpus.vocab.size(), 0.56, 64, {64, 64}), 11);
  std::vector<Matrix> frozen_before;
  for (auto& layer : model.layers) {
    frozen_before.push_back(layer.b_i.value);
    frozen_before.push_back(layer.b_f.value);
  }
  SgdAsgdConfig cfg;
  cfg.epochs = 15;
  const TrainResult r = train_lm(model, corpus, cfg, 5);

  bool bit_identical = true;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    bit_identical &= bit_equal(frozen_before[2 * l], model.layers[l].b_i.value);
    bit_identical &= bit_equal(frozen_before[2 * l + 1], model.layers[l].b_f.value);
  }
  const auto traces = collect_gate_traces(model, split_sequences(corpus.test, 70, 50), 1);
  const auto estimated = estimate_timescales(traces);
  const double rho = spearman(model.timescales[1]->timescales, estimated);
  const double elapsed = seconds_since(t0);
  o.detail << "Spearman rho " << fmt(rho) << " on the inverse-gamma layer (64 units), valid ppl "
           << fmt(std::exp(r.best_valid_loss)) << ", frozen biases " << (bit_identical ? "bit-identical" : "CHANGED")
           << ", " << fmt(elapsed, 3) << " s";
  o.require(rho > 0.9, "rho > 0.9");
  o.require(bit_identical, "frozen biases unchanged");
  o.require(elapsed <= 20 * 60, "runtime <= 20 min");
  return o;
}

Outcome distribution_fit() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto ig = sample_inv_gamma({1.4, 1.0}, 10000, 2024);
  const TimescaleFit a = fit_timescale_distribution(ig);
  Rng rng(2025);
  std::vector<double> normal;
  while (normal.size() < 10000) {
    const double x = 0.5 + 0.1 * rng.normal();
    if (x > 0.0) normal.push_back(x);
  }
  const TimescaleFit b = fit_timescale_distribution(normal);
  const double elapsed = seconds_since(t0);
  o.detail << "IG(1.4) draws -> " << to_string(a.winner().family) << " alpha " << fmt(a.inverse_gamma.best_param)
           << " (D " << fmt(a.inverse_gamma.best_d) << "); Normal(0.5, 0.1) draws -> " << to_string(b.winner().family)
           << " mu " << fmt(b.narrow_gaussian.best_param) << " (D " << fmt(b.narrow_gaussian.best_d) << "); "
           << fmt(elapsed, 3) << " s";
  o.require(a.winner().family == DistributionFamily::inverse_gamma, "inverse-gamma wins");
  o.require(a.inverse_gamma.best_param >= 1.3 - 1e-9 && a.inverse_gamma.best_param <= 1.5 + 1e-9, "alpha range");
  o.require(b.winner().family == DistributionFamily::narrow_gaussian, "narrow-gaussian wins");
  o.require(b.narrow_gaussian.best_param >= 0.45 - 1e-9 && b.narrow_gaussian.best_param <= 0.55 + 1e-9, "mu range");
  o.require(elapsed < 60.0, "runtime < 1 min");
  return o;
}

Outcome dyck_power_law() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const DyckGrammarParams g;  // p1 = p2 = q = 0.25
  std::vector<DyckSequence> seqs;
  for (std::size_t k = 0; k < 10000; ++k) {
    Rng rng(derive_seed(606, 0, k));
    seqs.push_back(generate_dyck(g, rng));
  }
  const auto hist = distance_histogram(seqs);
  const PowerLawFit fit = fit_power_law(hist, 2, 100);
  const double elapsed = seconds_since(t0);
  o.detail << "log-log fit over distances 2-100: slope " << fmt(fit.slope) << ", R^2 " << fmt(fit.r_squared) << " ("
           << fit.points << " populated distances), " << fmt(elapsed, 3) << " s";
  o.require(fit.r_squared > 0.9, "R^2 > 0.9");
  o.require(elapsed < 60.0, "runtime < 1 min");
  return o;
}

Outcome dyck_directional() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const DyckDataset data = build_dyck_dataset({}, 2000, 200, 3000, 100);
  AdamConfig cfg;
  cfg.epochs = 300;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> acc[2];
  std::size_t n_long = 0;
  for (const auto& s : data.test) n_long += s.max_distance > 50;
  for (int mts = 0; mts < 2; ++mts)
    for (std::uint64_t seed : seeds) {
      const auto src = mts ? TimescaleSource::inverse_gamma(1.5) : TimescaleSource::trainable();
      DyckModel model = build_dyck_model(128, src, derive_seed(seed, 1));
      train_dyck(model, data, cfg, derive_seed(seed, 2));
      const auto rep = dyck_accuracy_by_timescale(model, data.test, {1, 10, 20, 30, 40, 50, 75, 100, 200});
      const auto lr = long_range_accuracy(rep, data.test, 50);
      acc[mts].push_back(lr.value_or(0.0));
      std::cerr << "  C7 " << (mts ? "mts" : "baseline") << " seed " << seed << ": long-range acc "
                << (lr ? fmt(*lr) : "n/a")
                << ", overall " << fmt(rep.overall()) << " (" << fmt(seconds_since(t0), 4) << " s)\n";
    }
  const auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto var_of = [&](const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  const double mb = mean_of(acc[0]), mm = mean_of(acc[1]);
  const double pooled_sd = std::sqrt(0.5 * (var_of(acc[0]) + var_of(acc[1])));
  const double elapsed = seconds_since(t0);
  o.detail << "accuracy on " << n_long << " test sequences with max distance > 50: baseline mean " << fmt(mb)
           << ", MTS mean " << fmt(mm) << ", gap " << fmt(mm - mb) << ", pooled sd " << fmt(pooled_sd) << "; "
           << fmt(elapsed / 3600.0, 3) << " h";
  o.require(mm >= mb - pooled_sd, "MTS >= baseline - pooled sd");
  o.require(mm - mb >= 0.0, "gap >= 0");
  o.require(elapsed <= 4 * 3600.0, "runtime <= 4 h");
  return o;
}

Outcome substituted_table_properties() {
  Outcome o;
  // uniform model
  const std::size_t V = 100;
  auto uniform = build_lm(LmConfig::baseline(V, 8, {8}), 1);
  uniform.embedding.value.zero();
  std::vector<std::uint32_t> tokens(1000);
  Rng rng(3);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(V));
  Vocab vocab;
  for (std::size_t k = 0; k + 2 < V; ++k) vocab.add("w" + std::to_string(k));
  vocab.add("<eos>");
  vocab.add("<unk>");
  const double ppl_uniform = perplexity_report(evaluate_lm(uniform, tokens, vocab)).overall;
  o.require(std::abs(ppl_uniform - 100.0) < 1e-9, "uniform perplexity = V");

  // tiny corpus beats add-one unigram
  const CorpusBundle corpus = synthetic_corpus(50, 2000, 400, 8);
  auto model = build_lm(LmConfig::multi_timescale(50, 0.56, 16, {16, 16}), 2);
  SgdAsgdConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 4;
  cfg.eval_batch_size = 2;
  train_lm(model, corpus, cfg, 4);
  const double ppl_model = std::exp(mean(lm_stream_losses(model, corpus.test, 1)));
  double nll = 0.0;
  const double n = static_cast<double>(corpus.train.size());
  for (std::size_t k = 1; k < corpus.test.size(); ++k)
    nll -= std::log((static_cast<double>(corpus.vocab.count(corpus.test[k])) + 1.0) / (n + 50.0));
  const double ppl_unigram = std::exp(nll / static_cast<double>(corpus.test.size() - 1));
  o.require(ppl_model < ppl_unigram, "trained model beats unigram");

  // bootstrap: zero variance and coverage
  std::vector<double> a(1000);
  for (auto& v : a) v = 4.0 + rng.uniform();
  const auto zero = bootstrap_diff_ci(a, a, 100, 2000, 1);
  o.require(zero.lo == 0.0 && zero.hi == 0.0 && zero.mean_diff == 0.0, "zero-variance interval");
  const double mu_a = 4.0, mu_b = 3.95, truth = std::exp(mu_a) - std::exp(mu_b);
  std::size_t covered = 0;
  for (std::size_t trial = 0; trial < 500; ++trial) {
    Rng tr(derive_seed(77, trial));
    std::vector<double> x(20000), y(20000);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double shared = tr.normal();
      x[k] = mu_a + 0.8 * shared + 0.5 * tr.normal();
      y[k] = mu_b + 0.8 * shared + 0.5 * tr.normal();
    }
    const auto ci = bootstrap_diff_ci(x, y, 100, 2000, trial);
    covered += ci.lo <= truth && truth <= ci.hi;
  }
  o.require(covered >= 470, "coverage >= 94% of 500");

  // frequency bins on constructed counts
  const bool bins_ok = frequency_bin(10001) == 0 && frequency_bin(10000) == 1 && frequency_bin(1001) == 1 &&
                       frequency_bin(1000) == 2 && frequency_bin(101) == 2 && frequency_bin(100) == 3;
  o.require(bins_ok, "frequency-bin boundaries");

  o.detail << "uniform ppl " << fmt(ppl_uniform, 12) << " (V = 100); tiny-corpus ppl " << fmt(ppl_model)
           << " vs unigram " << fmt(ppl_unigram) << "; bootstrap coverage " << covered << "/500; bins "
           << (bins_ok ? "ok" : "wrong");
  return o;
}

Outcome ablation_harness() {
  Outcome o;
  const std::size_t V = 30;
  Vocab vocab;
  for (std::size_t k = 0; k + 2 < V; ++k) vocab.add("w" + std::to_string(k));
  vocab.add("<eos>");
  vocab.add("<unk>");
  for (std::uint32_t id = 0; id < V; ++id) vocab.set_count(id, id * 40);
  std::vector<std::uint32_t> tokens(300);
  Rng rng(6);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(V));

  auto model = build_lm(LmConfig::multi_timescale(V, 0.56, 8, {16, 8}), 3);
  const auto intact = perplexity_report(evaluate_lm(model, tokens, vocab));
  const auto empty = ablation_ratios(model, tokens, vocab, 1, {}, intact);
  bool ones = empty.ratio_all == 1.0;
  for (const auto& r : empty.ratio) ones &= !r || *r == 1.0;
  o.require(ones, "empty ablation ratios exactly 1");

  auto wide = build_lm(LmConfig::multi_timescale(V, 0.56, 4, {4, 1150, 4}), 1);
  const std::vector<std::uint32_t> short_tokens(tokens.begin(), tokens.begin() + 30);
  const auto rep = ablate_and_route(wide, short_tokens, vocab, 1, {});
  o.require(rep.groups.size() == 23, "23 groups");

  const std::vector<std::size_t> ga{0, 2, 4, 6}, gb{9, 11, 13};
  std::vector<std::size_t> both = ga;
  both.insert(both.end(), gb.begin(), gb.end());
  const auto composed = ablated_losses(model, tokens, 0, compose_masks(ablation_mask(16, ga), ablation_mask(16, gb)));
  const auto direct = ablated_losses(model, tokens, 0, ablation_mask(16, both));
  o.require(composed == direct, "mask composition bit-exact");

  o.detail << "empty-set ratios " << (ones ? "all 1.0" : "not 1.0") << "; 1150 units / 50 -> " << rep.groups.size()
           << " groups; union mask vs composed masks " << (composed == direct ? "bit-identical" : "differ");
  return o;
}

int run_cli(const std::vector<std::string>& args) {
  std::string cmd = std::string("\"") + MTSLM_CLI_PATH + "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = detail::read_file(e.path());
  return out;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "mtslm_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto write = [&](const std::string& name, const std::string& text) {
    detail::write_file(root / name, text);
  };
  std::string train, valid, test;
  Rng rng(12);
  const auto sentence = [&] {
    std::string s;
    const std::size_t len = 3 + rng.below(8);
    for (std::size_t k = 0; k < len; ++k) s += (k ? " w" : "w") + std::to_string(rng.below(60));
    return s + "\n";
  };
  for (int k = 0; k < 400; ++k) train += sentence();
  for (int k = 0; k < 60; ++k) valid += sentence();
  for (int k = 0; k < 60; ++k) test += sentence();
  write("train.txt", train);
  write("valid.txt", valid);
  write("test.txt", test);
  write("markov.json", R"({"seed": 3})");
  write("dyck.json", R"({"seed": 9, "n_train": 200, "n_valid": 20, "n_test": 50})");
  write("lm.json", R"({"seed": 4, "model": {"preset": "mts", "embedding_size": 8, "layer_sizes": [12, 8]},
    "optimizer": {"epochs": 2, "batch_size": 4, "eval_batch_size": 2}})");
  write("train_dyck.json", R"({"seed": 2, "model": {"hidden_size": 8, "timescale": "mts"},
    "optimizer": {"epochs": 2, "lr": 0.005}})");

  std::size_t files = 0;
  bool all_zero = true, same = true;
  std::vector<std::string> differing;
  std::map<std::string, std::string> first;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const auto p = [&](const char* sub) { return (out / sub).string(); };
    const std::vector<std::vector<std::string>> commands = {
        {"prepare-corpus", "--train", (root / "train.txt").string(), "--valid", (root / "valid.txt").string(),
         "--test", (root / "test.txt").string(), "--out", p("corpus")},
        {"gen-markov", "--corpus", p("corpus"), "--out", p("markov"), "--config", (root / "markov.json").string()},
        {"gen-dyck", "--out", p("dyck"), "--config", (root / "dyck.json").string()},
        {"train-lm", "--corpus", p("corpus"), "--out", p("lm"), "--config", (root / "lm.json").string()},
        {"train-dyck", "--data", p("dyck"), "--out", p("dyck_run"), "--config", (root / "train_dyck.json").string()},
    };
    for (const auto& c : commands) all_zero &= run_cli(c) == 0;
    auto bytes = tree_bytes(out);
    if (first.empty()) {
      first = std::move(bytes);
      files = first.size();
    } else {
      same = bytes.size() == first.size();
      for (const auto& [name, content] : first) {
        const auto it = bytes.find(name);
        if (it == bytes.end() || it->second != content) {
          same = false;
          differing.push_back(name);
        }
      }
    }
  }
  o.require(all_zero, "every command exits 0");
  o.require(files > 0 && same, "byte-identical artifacts");
  o.detail << "5 commands x 2 runs, " << files << " artifacts compared: "
           << (same ? "byte-identical" : "differ (" + std::to_string(differing.size()) + " files)");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::ofstream log;
  for (int k = 1; k < argc; ++k) {
    const std::string a = argv[k];
    if (a == "--only" && k + 1 < argc) {
      only.insert(std::atoi(argv[++k]));
    } else if (a == "--log" && k + 1 < argc) {
      log.open(argv[++k]);
    } else {
      std::cerr << "usage: acceptance [--only N]... [--log FILE]\n";
      return 2;
    }
  }
  const std::vector<Criterion> criteria = {
      {1, "mixture identity", mixture_identity},
      {2, "bias/timescale calculus", timescale_calculus},
      {3, "gradient correctness", gradient_correctness},
      {4, "timescale control", timescale_control},
      {5, "distribution-fit discrimination", distribution_fit},
      {6, "Dyck-2 distance power law", dyck_power_law},
      {7, "Dyck-2 long-range direction", dyck_directional},
      {8, "perplexity harness substitutes", substituted_table_properties},
      {9, "ablation harness", ablation_harness},
      {10, "determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    const std::string line =
        std::string(o.pass ? "[PASS]" : "[FAIL]") + " C" + std::to_string(c.id) + " " + c.name + ": " + o.detail.str();
    std::cout << line << std::endl;
    if (log) log << line << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
