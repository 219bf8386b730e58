#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clada/error.hpp"
#include "clada/random.hpp"
#include "clada/tokenizer.hpp"

namespace clada {

struct CorpusSequence {
  std::string id;
  std::string group;
  TokenSequence tokens;

  friend bool operator==(const CorpusSequence&, const CorpusSequence&) = default;
};

struct Corpus {
  std::vector<CorpusSequence> sequences;

  bool empty() const { return sequences.empty(); }
  std::size_t size() const { return sequences.size(); }

  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.tokens.size();
    return n;
  }

  Corpus filter_group(const std::string& group) const {
    Corpus out;
    for (const auto& s : sequences)
      if (s.group == group) out.sequences.push_back(s);
    return out;
  }
};

/// JSON-lines: one {"id": string, "group": string, "tokens": [u32]} per line.
inline Corpus read_corpus(std::istream& is) {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    auto fail = [&](const std::string& what) {
      throw FormatError("corpus line " + std::to_string(lineno) + ": " + what);
    };
    if (!j.is_object()) fail("expected an object");
    if (!j.contains("id") || !j["id"].is_string()) fail("missing string field 'id'");
    if (!j.contains("tokens") || !j["tokens"].is_array()) fail("missing array field 'tokens'");
    CorpusSequence s;
    s.id = j["id"].get<std::string>();
    s.group = j.value("group", std::string{});
    for (const auto& t : j["tokens"]) {
      if (!t.is_number_unsigned()) fail("tokens must be unsigned integers");
      s.tokens.push_back(t.get<TokenId>());
    }
    c.sequences.push_back(std::move(s));
  }
  return c;
}

inline void write_corpus(const Corpus& c, std::ostream& os) {
  for (const auto& s : c.sequences) {
    nlohmann::json j;
    j["id"] = s.id;
    j["group"] = s.group;
    j["tokens"] = s.tokens;
    os << j.dump() << '\n';
  }
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open corpus '" + path + "'");
  return read_corpus(is);
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_corpus(c, os);
}

/// Synthetic natural-language-like text. A fixed pseudo-word lexicon with a
/// Zipfian unigram law and sparse preferred successors gives the
/// predictable local structure that real text has and random tokens lack.
class SyntheticTextSource {
 public:
  explicit SyntheticTextSource(std::uint64_t lexicon_seed = 1, std::size_t lexicon_size = 400) {
    Rng rng(lexicon_seed);
    static const char* const kOnsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r",
                                          "s", "t", "v", "w", "th", "st", "pr", "ch", "tr"};
    static const char* const kVowels[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai"};
    static const char* const kCodas[] = {"", "", "n", "s", "t", "r", "l", "nd", "ng", "ck"};
    for (std::size_t w = 0; w < lexicon_size; ++w) {
      std::string word;
      const auto syl = 1 + rng.below(3);
      for (std::uint64_t s = 0; s < syl; ++s) {
        word += kOnsets[rng.below(std::size(kOnsets))];
        word += kVowels[rng.below(std::size(kVowels))];
        word += kCodas[rng.below(std::size(kCodas))];
      }
      words_.push_back(word);
    }
    double z = 0.0;
    for (std::size_t r = 0; r < lexicon_size; ++r) z += 1.0 / static_cast<double>(r + 1);
    double acc = 0.0;
    for (std::size_t r = 0; r < lexicon_size; ++r) {
      acc += 1.0 / static_cast<double>(r + 1) / z;
      zipf_cdf_.push_back(acc);
    }
    successors_.resize(lexicon_size);
    for (auto& s : successors_)
      for (int k = 0; k < 4; ++k) s.push_back(sample_zipf(rng));
  }

  /// Text of at least `min_bytes` bytes.
  std::string text(Rng& rng, std::size_t min_bytes) const {
    std::string out;
    std::size_t w = sample_zipf(rng);
    bool sentence_start = true;
    while (out.size() < min_bytes) {
      std::string word = words_[w];
      if (sentence_start) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      out += word;
      sentence_start = false;
      if (rng.uniform() < 0.08) {
        out += ". ";
        sentence_start = true;
      } else if (rng.uniform() < 0.05) {
        out += ", ";
      } else {
        out += ' ';
      }
      w = rng.uniform() < 0.7 ? successors_[w][rng.below(successors_[w].size())] : sample_zipf(rng);
    }
    return out;
  }

 private:
  std::size_t sample_zipf(Rng& rng) const {
    const double u = rng.uniform();
    for (std::size_t r = 0; r < zipf_cdf_.size(); ++r)
      if (u < zipf_cdf_[r]) return r;
    return zipf_cdf_.size() - 1;
  }

  std::vector<std::string> words_;
  std::vector<double> zipf_cdf_;
  std::vector<std::vector<std::size_t>> successors_;
};

/// `count` NLS sequences of exactly `length` byte tokens, group "NLS".
inline Corpus synthetic_corpus(std::uint64_t seed, std::size_t count, std::size_t length) {
  SyntheticTextSource src;
  Rng rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < count; ++i) {
    auto toks = tokenize(src.text(rng, length));
    toks.resize(length);
    c.sequences.push_back({"nls-" + std::to_string(i), "NLS", std::move(toks)});
  }
  return c;
}

}  // namespace clada
