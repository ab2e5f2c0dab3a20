#pragma once

// Word-level corpora: vocabulary, stateful batch layout for truncated BPTT,
// the bigram-Markov control corpus, and training-frequency bins.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "mtslm/errors.hpp"
#include "mtslm/rng.hpp"

namespace mtslm {

inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kUnkToken = "<unk>";

class Vocab {
 public:
  /// Adds `token` if new; returns its id either way.
  std::uint32_t add(std::string_view token) {
    const std::string key(token);
    if (auto it = index_.find(key); it != index_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(tokens_.size());
    tokens_.push_back(key);
    counts_.push_back(0);
    index_.emplace(key, id);
    return id;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  /// Id of `token`, or the unknown-token id.
  std::uint32_t id(std::string_view token) const {
    if (auto it = index_.find(std::string(token)); it != index_.end()) return it->second;
    return unk_id();
  }

  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

  std::uint32_t eos_id() const { return lookup_required(kEosToken); }
  std::uint32_t unk_id() const { return lookup_required(kUnkToken); }

  std::uint64_t count(std::uint32_t id) const { return counts_.at(id); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  void set_count(std::uint32_t id, std::uint64_t c) { counts_.at(id) = c; }

  void recount(const std::vector<std::uint32_t>& ids) {
    std::fill(counts_.begin(), counts_.end(), 0);
    for (std::uint32_t id : ids) ++counts_.at(id);
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::uint32_t lookup_required(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end())
      throw std::logic_error("Vocab: missing special token " + std::string(token));
    return it->second;
  }

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

enum class Provenance { natural, markov_bigram };

inline const char* to_string(Provenance p) {
  return p == Provenance::natural ? "natural" : "markov-bigram";
}

struct CorpusBundle {
  std::vector<std::uint32_t> train, valid, test;
  Vocab vocab;
  Provenance provenance = Provenance::natural;

  const std::vector<std::uint32_t>& split(std::string_view name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split: " + std::string(name));
  }
};

/// Whitespace tokens, with an end-of-sentence token for every newline.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool has_newline = end != std::string_view::npos;
    if (!has_newline) end = text.size();
    std::istringstream line{std::string(text.substr(pos, end - pos))};
    for (std::string tok; line >> tok;) out.push_back(tok);
    if (has_newline) out.emplace_back(kEosToken);
    pos = end + 1;
  }
  return out;
}

inline std::vector<std::uint32_t> encode(const std::vector<std::string>& tokens, const Vocab& vocab) {
  std::vector<std::uint32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

/// Inverse of tokenize: tokens space-separated, <eos> rendered as newline.
inline std::string detokenize(const std::vector<std::uint32_t>& ids, const Vocab& vocab) {
  std::string out;
  bool line_start = true;
  const std::uint32_t eos = vocab.eos_id();
  for (std::uint32_t id : ids) {
    if (id == eos) {
      out += '\n';
      line_start = true;
      continue;
    }
    if (!line_start) out += ' ';
    out += vocab.token(id);
    line_start = false;
  }
  return out;
}

/// Vocabulary from the training split only, ids in order of first
/// appearance; <eos> and <unk> are appended if the text lacks them.
inline CorpusBundle load_corpus(std::string_view train_text, std::string_view valid_text,
                                std::string_view test_text) {
  const auto train_tokens = tokenize(train_text);
  if (train_tokens.empty()) throw std::invalid_argument("load_corpus: empty training text");
  CorpusBundle b;
  for (const auto& t : train_tokens) b.vocab.add(t);
  b.vocab.add(kEosToken);
  b.vocab.add(kUnkToken);
  b.train = encode(train_tokens, b.vocab);
  b.valid = encode(tokenize(valid_text), b.vocab);
  b.test = encode(tokenize(test_text), b.vocab);
  b.vocab.recount(b.train);
  return b;
}

// ---------------------------------------------------------------------------
// Batching

struct Window {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Window&) const = default;
};

/// Windows over the stream positions that have a next-token target; the
/// same windows apply to every stream in the batch.
struct BatchPlan {
  std::size_t batch_size = 1;
  std::size_t stream_length = 0;  // tokens per stream
  std::vector<Window> windows;
  std::uint64_t seed = 0;
};

enum class BatchMode { train, eval };

inline constexpr std::size_t kLongWindow = 70;
inline constexpr std::size_t kShortWindow = 35;
inline constexpr double kLongWindowProb = 0.95;

/// Tokens are reshaped into batch_size contiguous streams (n / batch_size
/// tokens each; the tail remainder is dropped). Train windows are 70 long
/// when the draw u < 0.95, else 35; eval windows are all 70. The final
/// window is cut short to the remaining positions.
template <UniformSource U>
BatchPlan make_batch_plan(std::size_t n_tokens, std::size_t batch_size, BatchMode mode, U& draws) {
  if (batch_size == 0) throw std::invalid_argument("make_batch_plan: batch size must be >= 1");
  if (n_tokens <= batch_size)
    throw std::invalid_argument("make_batch_plan: batch size not smaller than token count");
  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.stream_length = n_tokens / batch_size;
  const std::size_t positions = plan.stream_length - 1;
  for (std::size_t off = 0; off < positions;) {
    std::size_t len = kLongWindow;
    if (mode == BatchMode::train && !(draws.uniform() < kLongWindowProb)) len = kShortWindow;
    len = std::min(len, positions - off);
    plan.windows.push_back({off, len});
    off += len;
  }
  return plan;
}

inline BatchPlan make_batch_plan(std::size_t n_tokens, std::size_t batch_size, BatchMode mode,
                                 std::uint64_t seed) {
  Rng rng(seed);
  BatchPlan plan = make_batch_plan(n_tokens, batch_size, mode, rng);
  plan.seed = mode == BatchMode::train ? seed : 0;
  return plan;
}

/// Stream-major layout: streams[b][p] = tokens[b * stream_length + p].
inline std::vector<std::vector<std::uint32_t>> make_streams(const std::vector<std::uint32_t>& tokens,
                                                            std::size_t batch_size) {
  if (batch_size == 0 || tokens.size() < batch_size)
    throw std::invalid_argument("make_streams: batch size larger than token count");
  const std::size_t len = tokens.size() / batch_size;
  std::vector<std::vector<std::uint32_t>> streams(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b)
    streams[b].assign(tokens.begin() + static_cast<std::ptrdiff_t>(b * len),
                      tokens.begin() + static_cast<std::ptrdiff_t>((b + 1) * len));
  return streams;
}

// ---------------------------------------------------------------------------
// Markov control corpus

/// Empirical unigram and bigram tables of a token stream, sampled by
/// cumulative-count lookup.
class BigramModel {
 public:
  BigramModel(const std::vector<std::uint32_t>& tokens, std::size_t vocab_size)
      : successors_(vocab_size), cumulative_(vocab_size) {
    if (tokens.size() < 2) throw std::invalid_argument("BigramModel: need at least two tokens");
    std::vector<std::uint64_t> unigram(vocab_size, 0);
    std::vector<std::unordered_map<std::uint32_t, std::uint64_t>> pairs(vocab_size);
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      ++unigram.at(tokens[k]);
      if (k + 1 < tokens.size()) ++pairs[tokens[k]][tokens[k + 1]];
    }
    std::uint64_t run = 0;
    for (std::uint32_t v = 0; v < vocab_size; ++v) {
      if (unigram[v] == 0) continue;
      run += unigram[v];
      unigram_ids_.push_back(v);
      unigram_cum_.push_back(run);
    }
    for (std::uint32_t v = 0; v < vocab_size; ++v) {
      std::vector<std::pair<std::uint32_t, std::uint64_t>> row(pairs[v].begin(), pairs[v].end());
      std::sort(row.begin(), row.end());
      std::uint64_t c = 0;
      for (const auto& [next, n] : row) {
        c += n;
        successors_[v].push_back(next);
        cumulative_[v].push_back(c);
      }
    }
  }

  bool has_successor(std::uint32_t v) const { return !successors_.at(v).empty(); }

  std::uint32_t sample_unigram(Rng& rng) const { return pick(unigram_ids_, unigram_cum_, rng); }

  std::uint32_t sample_next(std::uint32_t prev, Rng& rng) const {
    return pick(successors_.at(prev), cumulative_.at(prev), rng);
  }

 private:
  static std::uint32_t pick(const std::vector<std::uint32_t>& ids,
                            const std::vector<std::uint64_t>& cum, Rng& rng) {
    const std::uint64_t r = rng.below(cum.back());
    const auto it = std::upper_bound(cum.begin(), cum.end(), r);
    return ids[static_cast<std::size_t>(it - cum.begin())];
  }

  std::vector<std::uint32_t> unigram_ids_;
  std::vector<std::uint64_t> unigram_cum_;
  std::vector<std::vector<std::uint32_t>> successors_;
  std::vector<std::vector<std::uint64_t>> cumulative_;
};

/// Samples a token chain from the bigram statistics: first token from the
/// unigram distribution, then P(w_t | w_{t-1}); a token without an observed
/// successor restarts the chain with a fresh unigram draw.
inline std::vector<std::uint32_t> sample_markov_chain(const BigramModel& model, std::size_t length,
                                                      Rng& rng) {
  std::vector<std::uint32_t> out;
  out.reserve(length);
  for (std::size_t k = 0; k < length; ++k) {
    if (k == 0 || !model.has_successor(out.back()))
      out.push_back(model.sample_unigram(rng));
    else
      out.push_back(model.sample_next(out.back(), rng));
  }
  return out;
}

/// Markov control corpus built from the source's training-split bigrams.
/// The train split has `length` tokens (0 = same size as the source train
/// split); valid and test match the source sizes. Vocabulary ids are kept,
/// counts are recomputed from the generated training split.
inline CorpusBundle generate_markov_corpus(const CorpusBundle& source, long long length,
                                           std::uint64_t seed) {
  if (length < 0) throw std::invalid_argument("generate_markov_corpus: length must be positive");
  const std::size_t n_train = length == 0 ? source.train.size() : static_cast<std::size_t>(length);
  if (n_train == 0) throw std::invalid_argument("generate_markov_corpus: length must be positive");
  const BigramModel model(source.train, source.vocab.size());
  CorpusBundle out;
  out.vocab = source.vocab;
  out.provenance = Provenance::markov_bigram;
  Rng train_rng(derive_seed(seed, 0)), valid_rng(derive_seed(seed, 1)), test_rng(derive_seed(seed, 2));
  out.train = sample_markov_chain(model, n_train, train_rng);
  out.valid = sample_markov_chain(model, source.valid.size(), valid_rng);
  out.test = sample_markov_chain(model, source.test.size(), test_rng);
  out.vocab.recount(out.train);
  return out;
}

// ---------------------------------------------------------------------------
// Frequency bins

inline constexpr std::size_t kFrequencyBins = 4;
inline constexpr std::array<const char*, kFrequencyBins> kFrequencyBinNames = {
    "above_10K", "1K-10K", "100-1K", "below_100"};

/// count > 10000 -> 0; (1000, 10000] -> 1; (100, 1000] -> 2; <= 100 -> 3.
inline std::uint8_t frequency_bin(std::uint64_t count) {
  if (count > 10000) return 0;
  if (count > 1000) return 1;
  if (count > 100) return 2;
  return 3;
}

inline std::vector<std::uint8_t> frequency_bins(const Vocab& vocab) {
  std::vector<std::uint8_t> bins(vocab.size());
  for (std::uint32_t id = 0; id < vocab.size(); ++id) bins[id] = frequency_bin(vocab.count(id));
  return bins;
}

// ---------------------------------------------------------------------------
// Files: little-endian u32 token arrays plus a JSON vocabulary sidecar.

namespace detail {
inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}
}  // namespace detail

inline void write_token_file(const std::filesystem::path& path, const std::vector<std::uint32_t>& ids) {
  std::string bytes(ids.size() * 4, '\0');
  for (std::size_t k = 0; k < ids.size(); ++k)
    for (int b = 0; b < 4; ++b) bytes[4 * k + b] = static_cast<char>((ids[k] >> (8 * b)) & 0xFF);
  detail::write_file(path, bytes);
}

inline std::vector<std::uint32_t> read_token_file(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() % 4 != 0) throw FormatError("token file size not a multiple of 4: " + path.string());
  std::vector<std::uint32_t> ids(bytes.size() / 4);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * k + b])) << (8 * b);
    ids[k] = v;
  }
  return ids;
}

inline nlohmann::json vocab_to_json(const Vocab& vocab) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::uint32_t id = 0; id < vocab.size(); ++id)
    arr.push_back({{"token", vocab.token(id)}, {"id", id}, {"count", vocab.count(id)}});
  return arr;
}

inline Vocab vocab_from_json(const nlohmann::json& arr) {
  Vocab v;
  for (std::size_t k = 0; k < arr.size(); ++k) {
    const auto& e = arr[k];
    if (e.at("id").get<std::uint32_t>() != k) throw FormatError("vocab.json: ids must be dense and ordered");
    v.add(e.at("token").get<std::string>());
    v.set_count(static_cast<std::uint32_t>(k), e.at("count").get<std::uint64_t>());
  }
  if (v.size() != arr.size()) throw FormatError("vocab.json: duplicate tokens");
  return v;
}

/// Directory layout: train.bin, valid.bin, test.bin, vocab.json, meta.json.
inline void save_corpus(const std::filesystem::path& dir, const CorpusBundle& b) {
  std::filesystem::create_directories(dir);
  write_token_file(dir / "train.bin", b.train);
  write_token_file(dir / "valid.bin", b.valid);
  write_token_file(dir / "test.bin", b.test);
  detail::write_file(dir / "vocab.json", vocab_to_json(b.vocab).dump(1) + "\n");
  const nlohmann::json meta = {{"provenance", to_string(b.provenance)},
                               {"vocab_size", b.vocab.size()},
                               {"train_tokens", b.train.size()},
                               {"valid_tokens", b.valid.size()},
                               {"test_tokens", b.test.size()}};
  detail::write_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline CorpusBundle load_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingInputError("corpus directory not found: " + dir.string());
  CorpusBundle b;
  b.vocab = vocab_from_json(nlohmann::json::parse(detail::read_file(dir / "vocab.json")));
  b.train = read_token_file(dir / "train.bin");
  b.valid = read_token_file(dir / "valid.bin");
  b.test = read_token_file(dir / "test.bin");
  const auto meta = nlohmann::json::parse(detail::read_file(dir / "meta.json"));
  b.provenance = meta.value("provenance", std::string("natural")) == "markov-bigram"
                     ? Provenance::markov_bigram
                     : Provenance::natural;
  for (const auto* split : {&b.train, &b.valid, &b.test})
    for (std::uint32_t id : *split)
      if (id >= b.vocab.size()) throw FormatError("token id out of vocabulary in " + dir.string());
  return b;
}

}  // namespace mtslm
