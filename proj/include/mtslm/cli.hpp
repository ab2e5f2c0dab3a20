#pragma once

// Experiment driver behind the mtslm executable. Paths come from flags;
// everything that affects numbers comes from a JSON config that is
// schema-checked and written back, fully resolved, next to the outputs.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 config schema,
// 4 missing input.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mtslm/analysis.hpp"
#include "mtslm/checkpoint.hpp"
#include "mtslm/corpus.hpp"
#include "mtslm/csv.hpp"
#include "mtslm/dyck.hpp"
#include "mtslm/errors.hpp"
#include "mtslm/model.hpp"
#include "mtslm/timescale.hpp"
#include "mtslm/train.hpp"

#ifndef MTSLM_VERSION
#define MTSLM_VERSION "0.0.0"
#endif
#ifndef MTSLM_GIT_DESCRIBE
#define MTSLM_GIT_DESCRIBE "unknown"
#endif

namespace mtslm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kSchema = 3, kMissingInput = 4 };

inline std::string version_string() { return std::string("mtslm ") + MTSLM_VERSION + " (" + MTSLM_GIT_DESCRIBE + ")"; }

// ---------------------------------------------------------------------------
// Config schema

enum class Kind { count, number, boolean, string, number_array, count_array, object };

struct Schema;

struct Field {
  Kind kind = Kind::number;
  bool required = false;
  std::shared_ptr<const Schema> nested;  // for Kind::object
};

struct Schema {
  std::map<std::string, Field> fields;
};

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::count: return "non-negative integer";
    case Kind::number: return "number";
    case Kind::boolean: return "boolean";
    case Kind::string: return "string";
    case Kind::number_array: return "array of numbers";
    case Kind::count_array: return "array of non-negative integers";
    case Kind::object: return "object";
  }
  return "?";
}

inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

inline bool kind_matches(Kind k, const json& v) {
  switch (k) {
    case Kind::count: return is_count(v);
    case Kind::number: return v.is_number();
    case Kind::boolean: return v.is_boolean();
    case Kind::string: return v.is_string();
    case Kind::number_array:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); });
    case Kind::count_array: return v.is_array() && std::all_of(v.begin(), v.end(), is_count);
    case Kind::object: return v.is_object();
  }
  return false;
}

/// Unknown keys, wrong types, and missing required keys are schema errors.
inline void validate(const json& doc, const Schema& schema, const std::string& where = "config") {
  if (!doc.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    const auto it = schema.fields.find(key);
    if (it == schema.fields.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!kind_matches(it->second.kind, value))
      throw ConfigError(where + "." + key + ": expected " + kind_name(it->second.kind));
    if (it->second.kind == Kind::object && it->second.nested) validate(value, *it->second.nested, where + "." + key);
  }
  for (const auto& [key, field] : schema.fields)
    if (field.required && !doc.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
}

inline std::shared_ptr<const Schema> schema(std::map<std::string, Field> fields) {
  return std::make_shared<const Schema>(Schema{std::move(fields)});
}

inline Field f(Kind k, bool required = false) { return Field{k, required, nullptr}; }
inline Field obj(std::shared_ptr<const Schema> s, bool required = false) {
  return Field{Kind::object, required, std::move(s)};
}

inline std::shared_ptr<const Schema> sgd_schema() {
  return schema({{"lr", f(Kind::number)},
                 {"weight_decay", f(Kind::number)},
                 {"clip_norm", f(Kind::number)},
                 {"epochs", f(Kind::count)},
                 {"nonmono", f(Kind::count)},
                 {"batch_size", f(Kind::count)},
                 {"eval_batch_size", f(Kind::count)},
                 {"record_wallclock", f(Kind::boolean)}});
}

inline std::shared_ptr<const Schema> adam_schema() {
  return schema({{"lr", f(Kind::number)},
                 {"beta1", f(Kind::number)},
                 {"beta2", f(Kind::number)},
                 {"eps", f(Kind::number)},
                 {"epochs", f(Kind::count)},
                 {"record_wallclock", f(Kind::boolean)}});
}

inline std::shared_ptr<const Schema> lm_model_schema() {
  return schema({{"preset", f(Kind::string)},
                 {"embedding_size", f(Kind::count)},
                 {"layer_sizes", f(Kind::count_array)},
                 {"alpha", f(Kind::number)},
                 {"layer1_timescales", f(Kind::number_array)},
                 {"embedding_init", f(Kind::number)}});
}

// ---------------------------------------------------------------------------
// Helpers

inline json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw MissingInputError("config file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": not valid JSON: " + e.what());
  }
}

inline void require_exists(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingInputError(what + " not found: " + path);
}

inline void write_json(const fs::path& path, const json& j) { detail::write_file(path, j.dump(2) + "\n"); }

inline void write_resolved_config(const fs::path& dir, const std::string& command, json resolved) {
  fs::create_directories(dir);
  write_json(dir / "config.json", json{{"command", command}, {"config", std::move(resolved)}, {"version", MTSLM_VERSION}});
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

struct ResolvedLm {
  LmConfig config;
  json resolved;
};

inline ResolvedLm resolve_lm_model(const json& m, std::size_t vocab_size) {
  const std::string preset = get_or<std::string>(m, "preset", "baseline");
  if (preset != "baseline" && preset != "mts") throw ConfigError("model.preset: expected 'baseline' or 'mts'");
  const auto embedding = get_or<std::size_t>(m, "embedding_size", 400);
  const auto layers = get_or<std::vector<std::size_t>>(m, "layer_sizes", {1150, 1150, 400});
  const double alpha = get_or<double>(m, "alpha", 0.56);
  const auto first = get_or<std::vector<double>>(m, "layer1_timescales", {3.0, 4.0});
  if (first.size() != 2) throw ConfigError("model.layer1_timescales: expected two values");
  ResolvedLm r;
  try {
    r.config = preset == "mts" ? LmConfig::multi_timescale(vocab_size, alpha, embedding, layers)
                               : LmConfig::baseline(vocab_size, embedding, layers);
    if (preset == "mts")
      r.config.layer_timescales[0] = TimescaleSource::fixed_list(split_timescales(layers[0], first[0], first[1]));
    r.config.embedding_init = get_or<double>(m, "embedding_init", 0.1);
    r.config.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  r.resolved = {{"preset", preset},          {"embedding_size", embedding}, {"layer_sizes", layers},
                {"alpha", alpha},            {"layer1_timescales", first},  {"embedding_init", r.config.embedding_init}};
  return r;
}

template <class Cfg>
Cfg resolve_optimizer(const json& j, const char* where) {
  Cfg c = j.get<Cfg>();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
  return c;
}

inline json perplexity_json(const PerplexityReport& p) {
  json j = {{"All", p.overall}};
  for (std::size_t b = 0; b < kFrequencyBins; ++b)
    j[kFrequencyBinNames[b]] = p.by_bin[b] ? json(*p.by_bin[b]) : json();
  return j;
}

inline LanguageModel load_lm(const std::string& path) {
  require_exists(path, "checkpoint");
  return load_lm_checkpoint(path);
}

inline std::vector<std::vector<std::uint32_t>> sentences_of(const std::vector<std::uint32_t>& tokens,
                                                            std::uint32_t eos) {
  std::vector<std::vector<std::uint32_t>> out(1);
  for (std::uint32_t id : tokens) {
    out.back().push_back(id);
    if (id == eos) out.emplace_back();
  }
  if (out.back().empty()) out.pop_back();
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Paths {
  std::string config, out, corpus, data, model, report, baseline;
  std::string train, valid, test;
  std::vector<std::string> runs;
};

inline int cmd_prepare_corpus(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({}));
  for (const auto& [path, what] : {std::pair{p.train, "train text"}, {p.valid, "valid text"}, {p.test, "test text"}})
    require_exists(path, what);
  const CorpusBundle b =
      load_corpus(detail::read_file(p.train), detail::read_file(p.valid), detail::read_file(p.test));
  save_corpus(p.out, b);
  write_resolved_config(p.out, "prepare-corpus", json::object());
  return kOk;
}

inline int cmd_gen_markov(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"seed", f(Kind::count)}, {"length", f(Kind::count)}}));
  require_exists(p.corpus, "corpus directory");
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const auto length = get_or<std::size_t>(cfg, "length", 0);
  const CorpusBundle src = load_corpus_dir(p.corpus);
  save_corpus(p.out, generate_markov_corpus(src, static_cast<long long>(length), seed));
  write_resolved_config(p.out, "gen-markov", {{"seed", seed}, {"length", length}});
  return kOk;
}

inline int cmd_gen_dyck(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"seed", f(Kind::count)},
                         {"n_train", f(Kind::count)},
                         {"n_valid", f(Kind::count)},
                         {"n_test", f(Kind::count)},
                         {"p1", f(Kind::number)},
                         {"p2", f(Kind::number)},
                         {"q", f(Kind::number)},
                         {"max_len", f(Kind::count)}}));
  DyckGrammarParams g;
  g.p1 = get_or(cfg, "p1", g.p1);
  g.p2 = get_or(cfg, "p2", g.p2);
  g.q = get_or(cfg, "q", g.q);
  g.max_len = get_or(cfg, "max_len", g.max_len);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const auto n_train = get_or<std::size_t>(cfg, "n_train", 10000);
  const auto n_valid = get_or<std::size_t>(cfg, "n_valid", 2000);
  const auto n_test = get_or<std::size_t>(cfg, "n_test", 5000);
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const DyckDataset ds = build_dyck_dataset(g, n_train, n_valid, n_test, seed);
  fs::create_directories(p.out);
  write_dyck_jsonl(fs::path(p.out) / "train.jsonl", ds.train);
  write_dyck_jsonl(fs::path(p.out) / "valid.jsonl", ds.valid);
  write_dyck_jsonl(fs::path(p.out) / "test.jsonl", ds.test);
  write_resolved_config(p.out, "gen-dyck",
                        {{"seed", seed}, {"n_train", n_train}, {"n_valid", n_valid}, {"n_test", n_test},
                         {"p1", g.p1}, {"p2", g.p2}, {"q", g.q}, {"max_len", g.max_len}});
  return kOk;
}

inline DyckDataset load_dyck_dir(const std::string& dir) {
  require_exists(dir, "Dyck data directory");
  DyckDataset ds;
  ds.train = read_dyck_jsonl(fs::path(dir) / "train.jsonl");
  ds.valid = read_dyck_jsonl(fs::path(dir) / "valid.jsonl");
  ds.test = read_dyck_jsonl(fs::path(dir) / "test.jsonl");
  return ds;
}

inline std::shared_ptr<const Schema> train_lm_schema() {
  return schema({{"seed", f(Kind::count)}, {"model", obj(lm_model_schema())}, {"optimizer", obj(sgd_schema())}});
}

/// Trains one LM; returns the model and writes checkpoint + log into dir.
inline LanguageModel train_lm_into(const fs::path& dir, const CorpusBundle& corpus, const LmConfig& model_cfg,
                                   const SgdAsgdConfig& opt, std::uint64_t seed) {
  LanguageModel model = build_lm(model_cfg, derive_seed(seed, 1));
  const std::uint64_t train_seed = derive_seed(seed, 2);
  TrainResult r = train_lm(model, corpus, opt, train_seed);
  fs::create_directories(dir);
  epoch_log_table(r.log).write(dir / "train_log.csv");
  Rng rng(train_seed);
  Checkpoint ck = make_checkpoint(model, &r.optimizer, &rng);
  ck.meta = {{"seed", seed}, {"best_epoch", r.best_epoch}, {"best_valid_loss", r.best_valid_loss}};
  write_checkpoint(dir / "model.ckpt", ck);
  return model;
}

inline int cmd_train_lm(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *train_lm_schema());
  require_exists(p.corpus, "corpus directory");
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const ResolvedLm m = resolve_lm_model(cfg.value("model", json::object()), corpus.vocab.size());
  const auto opt = resolve_optimizer<SgdAsgdConfig>(cfg.value("optimizer", json::object()), "optimizer");
  write_resolved_config(p.out, "train-lm", {{"seed", seed}, {"model", m.resolved}, {"optimizer", opt}});
  train_lm_into(p.out, corpus, m.config, opt, seed);
  return kOk;
}

inline int cmd_train_dyck(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"seed", f(Kind::count)},
                         {"model", obj(schema({{"hidden_size", f(Kind::count)},
                                               {"timescale", f(Kind::string)},
                                               {"alpha", f(Kind::number)},
                                               {"init_range", f(Kind::number)}}))},
                         {"optimizer", obj(adam_schema())}}));
  const DyckDataset ds = load_dyck_dir(p.data);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const json m = cfg.value("model", json::object());
  const std::string mode = get_or<std::string>(m, "timescale", "baseline");
  if (mode != "baseline" && mode != "mts") throw ConfigError("model.timescale: expected 'baseline' or 'mts'");
  DyckModelConfig mc;
  mc.hidden_size = get_or<std::size_t>(m, "hidden_size", 256);
  const double alpha = get_or<double>(m, "alpha", 1.5);
  if (!(alpha > 0.0)) throw ConfigError("model.alpha: must be > 0");
  mc.timescale = mode == "mts" ? TimescaleSource::inverse_gamma(alpha) : TimescaleSource::trainable();
  mc.init_range = get_or<double>(m, "init_range", 0.0);
  if (mc.hidden_size < 2) throw ConfigError("model.hidden_size: must be >= 2");
  const auto opt = resolve_optimizer<AdamConfig>(cfg.value("optimizer", json::object()), "optimizer");
  write_resolved_config(p.out, "train-dyck",
                        {{"seed", seed},
                         {"model", {{"hidden_size", mc.hidden_size}, {"timescale", mode}, {"alpha", alpha},
                                    {"init_range", mc.init_range}}},
                         {"optimizer", opt}});
  DyckModel model = build_dyck_model(mc, derive_seed(seed, 1));
  const std::uint64_t train_seed = derive_seed(seed, 2);
  TrainResult r = train_dyck(model, ds, opt, train_seed);
  epoch_log_table(r.log).write(fs::path(p.out) / "train_log.csv");
  Rng rng(train_seed);
  Checkpoint ck = make_checkpoint(model, &r.optimizer, &rng);
  ck.meta = {{"seed", seed}, {"best_epoch", r.best_epoch}, {"best_valid_loss", r.best_valid_loss}};
  write_checkpoint(fs::path(p.out) / "model.ckpt", ck);
  return kOk;
}

inline CsvTable table1(const std::string& label, const PerplexityReport& p) {
  CsvTable t;
  t.header = {"model", "bin", "perplexity"};
  for (std::size_t b = 0; b < kFrequencyBins; ++b)
    t.add({label, kFrequencyBinNames[b], p.by_bin[b] ? format_number(*p.by_bin[b]) : ""});
  t.add({label, "All", format_number(p.overall)});
  return t;
}

inline int cmd_eval(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"split", f(Kind::string)},
                         {"label", f(Kind::string)},
                         {"baseline_label", f(Kind::string)},
                         {"block_len", f(Kind::count)},
                         {"resamples", f(Kind::count)},
                         {"seed", f(Kind::count)}}));
  require_exists(p.corpus, "corpus directory");
  LanguageModel model = load_lm(p.model);
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const std::string split = get_or<std::string>(cfg, "split", "test");
  if (split != "train" && split != "valid" && split != "test") throw ConfigError("split: expected train, valid, or test");
  const std::string label = get_or<std::string>(cfg, "label", "model");
  const std::string base_label = get_or<std::string>(cfg, "baseline_label", "baseline");
  const auto block_len = get_or<std::size_t>(cfg, "block_len", 100);
  const auto resamples = get_or<std::size_t>(cfg, "resamples", 10000);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const auto& tokens = corpus.split(split);
  write_resolved_config(p.report, "eval",
                        {{"split", split}, {"label", label}, {"baseline_label", base_label},
                         {"block_len", block_len}, {"resamples", resamples}, {"seed", seed}});

  const auto recs = evaluate_lm(model, tokens, corpus.vocab);
  const PerplexityReport rep = perplexity_report(recs);
  CsvTable t = table1(label, rep);
  json summary = {{label, perplexity_json(rep)}};

  if (!p.baseline.empty()) {
    LanguageModel base = load_lm(p.baseline);
    const auto base_recs = evaluate_lm(base, tokens, corpus.vocab);
    const PerplexityReport base_rep = perplexity_report(base_recs);
    for (const auto& row : table1(base_label, base_rep).rows) t.add(row);
    summary[base_label] = perplexity_json(base_rep);
    std::vector<double> la, lb;
    for (const auto& r : base_recs) la.push_back(r.nll);
    for (const auto& r : recs) lb.push_back(r.nll);
    CsvTable bt;
    bt.header = {"bin", "point", "mean_diff", "lo", "hi", "significant"};
    for (std::size_t b = 0; b <= kFrequencyBins; ++b) {
      std::vector<std::uint8_t> mask;
      if (b < kFrequencyBins) {
        mask.resize(recs.size());
        for (std::size_t k = 0; k < recs.size(); ++k) mask[k] = recs[k].bin == b;
        if (std::find(mask.begin(), mask.end(), 1) == mask.end()) continue;
      }
      const BootstrapResult r = bootstrap_diff_ci(la, lb, block_len, resamples, seed, mask);
      bt.add({b < kFrequencyBins ? kFrequencyBinNames[b] : "All", format_number(r.point), format_number(r.mean_diff),
              format_number(r.lo), format_number(r.hi), r.significant() ? "1" : "0"});
    }
    bt.write(fs::path(p.report) / "bootstrap.csv");
  }
  t.write(fs::path(p.report) / "table1.csv");
  write_json(fs::path(p.report) / "perplexity.json", summary);
  return kOk;
}

inline int cmd_fit_timescales(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"split", f(Kind::string)},
                         {"layer", f(Kind::count)},
                         {"pool_all_layers", f(Kind::boolean)},
                         {"sequences", f(Kind::count)},
                         {"steps", f(Kind::count)},
                         {"alpha_grid", f(Kind::number_array)},
                         {"mu_grid", f(Kind::number_array)},
                         {"sigma", f(Kind::number)},
                         {"heatmap_group", f(Kind::count)}}));
  require_exists(p.corpus, "corpus directory");
  LanguageModel model = load_lm(p.model);
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const std::string split = get_or<std::string>(cfg, "split", "test");
  const auto layer = get_or<std::size_t>(cfg, "layer", 1);
  const bool pool = get_or<bool>(cfg, "pool_all_layers", false);
  const auto n_seq = get_or<std::size_t>(cfg, "sequences", 100);
  const auto steps = get_or<std::size_t>(cfg, "steps", 70);
  const auto alpha_grid = get_or<std::vector<double>>(cfg, "alpha_grid", default_alpha_grid());
  const auto mu_grid = get_or<std::vector<double>>(cfg, "mu_grid", default_mu_grid());
  const double sigma = get_or<double>(cfg, "sigma", kNarrowGaussianSigma);
  const auto group = get_or<std::size_t>(cfg, "heatmap_group", 10);
  if (alpha_grid.empty() || mu_grid.empty()) throw ConfigError("alpha_grid and mu_grid must be non-empty");
  if (!pool && layer >= model.layers.size()) throw ConfigError("layer: out of range for this model");
  if (steps == 0 || n_seq == 0 || group == 0) throw ConfigError("sequences, steps, heatmap_group must be >= 1");
  write_resolved_config(p.report, "fit-timescales",
                        {{"split", split}, {"layer", layer}, {"pool_all_layers", pool}, {"sequences", n_seq},
                         {"steps", steps}, {"alpha_grid", alpha_grid}, {"mu_grid", mu_grid}, {"sigma", sigma},
                         {"heatmap_group", group}});

  const auto seqs = split_sequences(corpus.split(split), steps, n_seq);
  if (seqs.empty()) throw std::runtime_error("fit-timescales: split shorter than one sequence");
  CsvTable ts;
  ts.header = {"layer", "unit", "assigned_T", "estimated_T"};
  std::vector<double> pooled;
  json summary = {{"layers", json::object()}};
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!pool && l != layer) continue;
    const auto traces = collect_gate_traces(model, seqs, l);
    const auto est = estimate_timescales(traces);
    const auto assigned = unit_timescales(model, l);
    for (std::size_t j = 0; j < est.size(); ++j)
      ts.add({std::to_string(l), std::to_string(j), format_number(assigned[j]), format_number(est[j])});
    pooled.insert(pooled.end(), est.begin(), est.end());
    json lj = {{"fixed", model.timescales[l].has_value()}};
    if (model.timescales[l]) {
      try {
        lj["spearman"] = spearman(assigned, est);
      } catch (const std::invalid_argument&) {
        lj["spearman"] = nullptr;  // constant assignment (e.g. a single timescale)
      }
    }
    summary["layers"][std::to_string(l)] = lj;
    if (l == layer) {
      const Matrix heat = gate_heatmap(traces, group);
      CsvTable ht;
      ht.header = {"group", "step", "mean_f"};
      for (std::size_t r = 0; r < heat.rows; ++r)
        for (std::size_t t = 0; t < heat.cols; ++t)
          ht.add({std::to_string(r), std::to_string(t), format_number(heat(r, t))});
      ht.write(fs::path(p.report) / "heatmap.csv");
    }
  }
  const TimescaleFit fit = fit_timescale_distribution(pooled, alpha_grid, mu_grid, sigma);
  CsvTable ks;
  ks.header = {"family", "param", "D"};
  for (const KsFitResult* r : {&fit.inverse_gamma, &fit.narrow_gaussian})
    for (std::size_t k = 0; k < r->grid.size(); ++k)
      ks.add({to_string(r->family), format_number(r->grid[k]), format_number(r->d[k])});
  ks.write(fs::path(p.report) / "ksfit.csv");
  ts.write(fs::path(p.report) / "timescales.csv");
  summary["winner"] = to_string(fit.winner().family);
  summary["inverse_gamma"] = {{"best_alpha", fit.inverse_gamma.best_param}, {"D", fit.inverse_gamma.best_d}};
  summary["narrow_gaussian"] = {{"best_mu", fit.narrow_gaussian.best_param}, {"D", fit.narrow_gaussian.best_d}};
  write_json(fs::path(p.report) / "fit.json", summary);
  return kOk;
}

inline std::vector<std::uint32_t> limit_tokens(const std::vector<std::uint32_t>& tokens, std::size_t max_tokens) {
  if (max_tokens == 0 || tokens.size() <= max_tokens) return tokens;
  return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(max_tokens)};
}

inline int cmd_ablate(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"split", f(Kind::string)},
                         {"layer", f(Kind::count)},
                         {"group_size", f(Kind::count)},
                         {"mask_cell", f(Kind::boolean)},
                         {"max_tokens", f(Kind::count)}}));
  require_exists(p.corpus, "corpus directory");
  LanguageModel model = load_lm(p.model);
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const std::string split = get_or<std::string>(cfg, "split", "test");
  AblationOptions opt;
  const auto layer = get_or<std::size_t>(cfg, "layer", 1);
  opt.group_size = get_or<std::size_t>(cfg, "group_size", 50);
  opt.mask_cell = get_or<bool>(cfg, "mask_cell", false);
  const auto max_tokens = get_or<std::size_t>(cfg, "max_tokens", 0);
  if (layer >= model.layers.size()) throw ConfigError("layer: out of range for this model");
  if (opt.group_size == 0 || opt.group_size > model.layers[layer].hidden_size())
    throw ConfigError("group_size: must be between 1 and the layer width");
  write_resolved_config(p.report, "ablate",
                        {{"split", split}, {"layer", layer}, {"group_size", opt.group_size},
                         {"mask_cell", opt.mask_cell}, {"max_tokens", max_tokens}});
  const AblationReport rep =
      ablate_and_route(model, limit_tokens(corpus.split(split), max_tokens), corpus.vocab, layer, opt);
  CsvTable t;
  t.header = {"group", "mean_T", "bin", "ratio"};
  for (const auto& g : rep.groups) {
    for (std::size_t b = 0; b < kFrequencyBins; ++b)
      if (g.ratio[b])
        t.add({std::to_string(g.index), format_number(g.mean_timescale), kFrequencyBinNames[b], format_number(*g.ratio[b])});
    t.add({std::to_string(g.index), format_number(g.mean_timescale), "All", format_number(g.ratio_all)});
  }
  t.write(fs::path(p.report) / "routing.csv");
  return kOk;
}

inline int cmd_word_ablate(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"split", f(Kind::string)},
                         {"ablate_pos", f(Kind::count)},
                         {"min_length", f(Kind::count)},
                         {"sentences", f(Kind::count)},
                         {"policy", f(Kind::string)},
                         {"group_layer", f(Kind::count)},
                         {"group_size", f(Kind::count)}}));
  require_exists(p.corpus, "corpus directory");
  LanguageModel model = load_lm(p.model);
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const std::string split = get_or<std::string>(cfg, "split", "test");
  const auto pos = get_or<std::size_t>(cfg, "ablate_pos", 5);
  const auto min_len = get_or<std::size_t>(cfg, "min_length", pos + 10);
  const auto n = get_or<std::size_t>(cfg, "sentences", 100);
  const std::string policy = get_or<std::string>(cfg, "policy", "unk");
  if (policy != "unk" && policy != "zero") throw ConfigError("policy: expected 'unk' or 'zero'");
  WordAblationOptions opt;
  opt.policy = policy == "unk" ? WordAblationPolicy::replace_with_unk : WordAblationPolicy::zero_embedding;
  opt.group_layer = get_or<std::size_t>(cfg, "group_layer", 1);
  opt.group_size = get_or<std::size_t>(cfg, "group_size", 100);
  if (min_len <= pos) throw ConfigError("min_length must exceed ablate_pos");
  if (opt.group_size > 0 && opt.group_layer >= model.layers.size())
    throw ConfigError("group_layer: out of range for this model");
  write_resolved_config(p.report, "word-ablate",
                        {{"split", split}, {"ablate_pos", pos}, {"min_length", min_len}, {"sentences", n},
                         {"policy", policy}, {"group_layer", opt.group_layer}, {"group_size", opt.group_size}});
  std::vector<std::vector<std::uint32_t>> chosen;
  for (auto& s : sentences_of(corpus.split(split), corpus.vocab.eos_id())) {
    if (chosen.size() == n) break;
    if (s.size() >= min_len && !(opt.policy == WordAblationPolicy::replace_with_unk && s[pos] == corpus.vocab.unk_id()))
      chosen.push_back(std::move(s));
  }
  if (chosen.empty()) throw std::runtime_error("word-ablate: no sentence meets min_length");
  const WordAblationResult r = word_ablation_decay(model, chosen, pos, corpus.vocab, opt);
  CsvTable t;
  t.header = {"curve", "tau", "value"};
  for (const auto* curves : {&r.layers, &r.groups})
    for (const auto& c : *curves)
      for (std::size_t tau = 0; tau < c.values.size(); ++tau)
        t.add({c.label, std::to_string(tau), format_number(c.values[tau])});
  t.write(fs::path(p.report) / "decay.csv");
  json groups = json::array();
  for (const auto& c : r.groups) groups.push_back({{"curve", c.label}, {"mean_T", c.mean_timescale}});
  write_json(fs::path(p.report) / "decay_groups.json", {{"sentences", chosen.size()}, {"groups", groups}});
  return kOk;
}

inline int cmd_dyck_eval(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"edges", f(Kind::count_array)},
                         {"threshold", f(Kind::number)},
                         {"long_range", f(Kind::count)},
                         {"split", f(Kind::string)}}));
  require_exists(p.model, "checkpoint");
  DyckModel model = load_dyck_checkpoint(p.model);
  const DyckDataset ds = load_dyck_dir(p.data);
  const auto edges = get_or<std::vector<std::size_t>>(cfg, "edges", {1, 10, 20, 30, 40, 50, 75, 100, 200});
  const double threshold = get_or<double>(cfg, "threshold", 0.5);
  const auto long_range = get_or<std::size_t>(cfg, "long_range", 50);
  const std::string split = get_or<std::string>(cfg, "split", "test");
  if (!std::is_sorted(edges.begin(), edges.end()) || edges.size() < 2)
    throw ConfigError("edges: need at least two ascending values");
  if (split != "valid" && split != "test") throw ConfigError("split: expected valid or test");
  write_resolved_config(p.report, "dyck-eval",
                        {{"edges", edges}, {"threshold", threshold}, {"long_range", long_range}, {"split", split}});
  const auto& seqs = split == "test" ? ds.test : ds.valid;
  const DyckAccuracyReport rep = dyck_accuracy_by_timescale(model, seqs, edges, threshold);
  CsvTable t;
  t.header = {"bucket_lo", "bucket_hi", "n", "accuracy"};
  for (const auto& b : rep.buckets)
    t.add({std::to_string(b.lo), std::to_string(b.hi), std::to_string(b.n), format_number(b.accuracy())});
  t.write(fs::path(p.report) / "dyck_acc.csv");
  const auto lr = long_range_accuracy(rep, seqs, long_range);
  write_json(fs::path(p.report) / "dyck_summary.json",
             {{"overall", rep.overall()}, {"n", rep.n}, {"long_range_min", long_range},
              {"long_range_accuracy", lr ? json(*lr) : json()}});
  return kOk;
}

inline int cmd_sweep_alpha(const Paths& p) {
  const json cfg = read_config(p.config);
  validate(cfg, *schema({{"seed", f(Kind::count)},
                         {"alphas", f(Kind::number_array, true)},
                         {"model", obj(lm_model_schema())},
                         {"optimizer", obj(sgd_schema())}}));
  require_exists(p.corpus, "corpus directory");
  const CorpusBundle corpus = load_corpus_dir(p.corpus);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  const auto alphas = cfg.at("alphas").get<std::vector<double>>();
  if (alphas.empty()) throw ConfigError("alphas: need at least one value");
  for (double a : alphas)
    if (!(a > 0.0)) throw ConfigError("alphas: values must be > 0");
  json model_cfg = cfg.value("model", json::object());
  model_cfg["preset"] = "mts";
  const auto opt = resolve_optimizer<SgdAsgdConfig>(cfg.value("optimizer", json::object()), "optimizer");
  const ResolvedLm first = resolve_lm_model(model_cfg, corpus.vocab.size());
  json resolved_model = first.resolved;
  resolved_model.erase("alpha");
  write_resolved_config(p.out, "sweep-alpha",
                        {{"seed", seed}, {"alphas", alphas}, {"model", resolved_model}, {"optimizer", opt}});
  CsvTable t;
  t.header = {"alpha", "valid_perplexity", "test_perplexity"};
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    json mc = model_cfg;
    mc["alpha"] = alphas[k];
    const ResolvedLm m = resolve_lm_model(mc, corpus.vocab.size());
    LanguageModel model = train_lm_into(fs::path(p.out) / ("alpha_" + std::to_string(k)), corpus, m.config, opt, seed);
    const double valid = std::exp(mean(lm_stream_losses(model, corpus.valid, 1)));
    const double test = std::exp(mean(lm_stream_losses(model, corpus.test, 1)));
    t.add({format_number(alphas[k]), format_number(valid), format_number(test)});
  }
  t.write(fs::path(p.out) / "sweep.csv");
  return kOk;
}

/// One section per run directory (keyed by directory name): every CSV as
/// {header, rows}, every JSON document parsed, plus the version string.
inline json report_bundle(const std::vector<fs::path>& runs) {
  if (runs.empty()) throw std::invalid_argument("report: no run directories given");
  json out = {{"version", version_string()}, {"runs", json::object()}};
  for (const auto& dir : runs) {
    if (!fs::is_directory(dir)) throw MissingInputError("run directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && (e.path().extension() == ".csv" || e.path().extension() == ".json"))
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    json section = {{"reports", json::object()}};
    bool any_report = false;
    for (const auto& file : files) {
      const std::string name = file.filename().string();
      if (file.extension() == ".csv") {
        const CsvTable t = read_csv(file);
        section["reports"][name] = {{"header", t.header}, {"rows", t.rows}};
        any_report = true;
      } else {
        json doc;
        try {
          doc = json::parse(detail::read_file(file));
        } catch (const json::parse_error& e) {
          throw FormatError(file.string() + ":" + std::to_string(e.byte) + ": malformed JSON (byte offset)");
        }
        if (name == "config.json") {
          section["config"] = doc;
        } else {
          section["reports"][name] = doc;
          any_report = true;
        }
      }
    }
    if (!any_report) throw std::invalid_argument("report: run directory has no reports: " + dir.string());
    std::string id = dir.filename().string();
    if (id.empty()) id = dir.parent_path().filename().string();
    if (out["runs"].contains(id)) throw std::invalid_argument("report: duplicate run id " + id);
    out["runs"][id] = std::move(section);
  }
  return out;
}

inline int cmd_report(const Paths& p, std::ostream& out) {
  std::vector<fs::path> runs(p.runs.begin(), p.runs.end());
  const json bundle = report_bundle(runs);
  if (p.out.empty())
    out << bundle.dump(2) << "\n";
  else
    write_json(p.out, bundle);
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-timescale LSTM language modeling experiments", "mtslm"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(0, 1);
  Paths p;

  const auto add = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };
  const auto need = [](CLI::App* c, const char* flag, std::string& target, const char* help) {
    c->add_option(flag, target, help)->required();
  };
  const auto config = [&](CLI::App* c) { c->add_option("--config", p.config, "JSON config file"); };

  auto* prep = add("prepare-corpus", "Tokenize train/valid/test text files into a corpus directory");
  need(prep, "--train", p.train, "training text");
  need(prep, "--valid", p.valid, "validation text");
  need(prep, "--test", p.test, "test text");
  need(prep, "--out", p.out, "output corpus directory");
  config(prep);

  auto* markov = add("gen-markov", "Sample a bigram-Markov control corpus from an existing corpus");
  need(markov, "--corpus", p.corpus, "source corpus directory");
  need(markov, "--out", p.out, "output corpus directory");
  config(markov);

  auto* gdyck = add("gen-dyck", "Generate Dyck-2 train/valid/test JSON-lines files");
  need(gdyck, "--out", p.out, "output directory");
  config(gdyck);

  auto* tlm = add("train-lm", "Train a language model with SGD + NT-ASGD");
  need(tlm, "--corpus", p.corpus, "corpus directory");
  need(tlm, "--out", p.out, "output run directory");
  config(tlm);

  auto* tdyck = add("train-dyck", "Train a Dyck-2 model with Adam");
  need(tdyck, "--data", p.data, "Dyck data directory");
  need(tdyck, "--out", p.out, "output run directory");
  config(tdyck);

  auto* ev = add("eval", "Perplexity by frequency bin, optional bootstrap against a baseline");
  need(ev, "--model", p.model, "checkpoint");
  need(ev, "--corpus", p.corpus, "corpus directory");
  need(ev, "--report", p.report, "report directory");
  ev->add_option("--baseline", p.baseline, "baseline checkpoint for the bootstrap comparison");
  config(ev);

  auto* fit = add("fit-timescales", "Estimate unit timescales from forget gates and fit distributions");
  need(fit, "--model", p.model, "checkpoint");
  need(fit, "--corpus", p.corpus, "corpus directory");
  need(fit, "--report", p.report, "report directory");
  config(fit);

  auto* abl = add("ablate", "Per-group unit ablation and per-bin perplexity ratios");
  need(abl, "--model", p.model, "checkpoint");
  need(abl, "--corpus", p.corpus, "corpus directory");
  need(abl, "--report", p.report, "report directory");
  config(abl);

  auto* wabl = add("word-ablate", "Cell-state difference decay after ablating one word");
  need(wabl, "--model", p.model, "checkpoint");
  need(wabl, "--corpus", p.corpus, "corpus directory");
  need(wabl, "--report", p.report, "report directory");
  config(wabl);

  auto* deval = add("dyck-eval", "Dyck-2 whole-sequence accuracy by maximum pair distance");
  need(deval, "--model", p.model, "checkpoint");
  need(deval, "--data", p.data, "Dyck data directory");
  need(deval, "--report", p.report, "report directory");
  config(deval);

  auto* sweep = add("sweep-alpha", "Train and evaluate multi-timescale models over a list of shape values");
  need(sweep, "--corpus", p.corpus, "corpus directory");
  need(sweep, "--out", p.out, "output directory");
  need(sweep, "--config", p.config, "JSON config file with an 'alphas' list");

  auto* report = add("report", "Merge run directories into one JSON summary");
  report->add_option("--run", p.runs, "run directory (repeatable)")->required();
  report->add_option("--out", p.out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return kUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (name == "prepare-corpus") return cmd_prepare_corpus(p);
    if (name == "gen-markov") return cmd_gen_markov(p);
    if (name == "gen-dyck") return cmd_gen_dyck(p);
    if (name == "train-lm") return cmd_train_lm(p);
    if (name == "train-dyck") return cmd_train_dyck(p);
    if (name == "eval") return cmd_eval(p);
    if (name == "fit-timescales") return cmd_fit_timescales(p);
    if (name == "ablate") return cmd_ablate(p);
    if (name == "word-ablate") return cmd_word_ablate(p);
    if (name == "dyck-eval") return cmd_dyck_eval(p);
    if (name == "sweep-alpha") return cmd_sweep_alpha(p);
    if (name == "report") return cmd_report(p, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kSchema;
  } catch (const MissingInputError& e) {
    err << "missing input: " << e.what() << "\n";
    return kMissingInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  err << app.help();
  return kUsage;
}

}  // namespace mtslm::cli
