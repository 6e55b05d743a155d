#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "lambo/rng.hpp"

namespace lambo::seq {

struct UnknownToken : std::runtime_error {
  explicit UnknownToken(const std::string& tok)
      : std::runtime_error("unknown token: '" + tok + "'") {}
};
struct SequenceTooLong : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContainsMask : std::runtime_error {
  ContainsMask() : std::runtime_error("sequence contains masking token") {}
};
struct InvalidSequence : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotEnoughPositions : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using TokenId = std::size_t;

class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> tokens, TokenId padding_id, TokenId masking_id)
      : tokens_(std::move(tokens)), padding_id_(padding_id), masking_id_(masking_id) {
    if (padding_id_ >= tokens_.size() || masking_id_ >= tokens_.size())
      throw InvalidSequence("vocabulary: special id out of range");
    if (padding_id_ == masking_id_) throw InvalidSequence("vocabulary: pad == mask");
    for (TokenId i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second)
        throw InvalidSequence("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }

  static Vocabulary amino_acid_preset() {
    std::vector<std::string> toks = {"<pad>", "<mask>"};
    for (char c : std::string("ACDEFGHIKLMNPQRSTVWY")) toks.emplace_back(1, c);
    return Vocabulary(std::move(toks), 0, 1);
  }

  // Preset file: '!' directive lines declare the special token strings,
  // remaining lines list the tokens in order.
  //   !pad <pad>
  //   !mask <mask>
  //   <pad>
  //   <mask>
  //   A
  //   ...
  static Vocabulary from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidSequence("vocabulary: cannot open " + path);
    std::string line, pad_tok, mask_tok;
    std::vector<std::string> toks;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line[0] == '!') {
        std::istringstream ss(line.substr(1));
        std::string key, val;
        ss >> key >> val;
        if (key == "pad") pad_tok = val;
        else if (key == "mask") mask_tok = val;
        else throw InvalidSequence("vocabulary: unknown directive '" + key + "'");
      } else {
        toks.push_back(line);
      }
    }
    auto find = [&](const std::string& t) {
      auto it = std::find(toks.begin(), toks.end(), t);
      if (it == toks.end()) throw InvalidSequence("vocabulary: special '" + t + "' not listed");
      return static_cast<TokenId>(it - toks.begin());
    };
    if (pad_tok.empty() || mask_tok.empty())
      throw InvalidSequence("vocabulary: missing !pad or !mask directive");
    TokenId p = find(pad_tok), m = find(mask_tok);
    return Vocabulary(std::move(toks), p, m);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    out << "!pad " << tokens_[padding_id_] << "\n";
    out << "!mask " << tokens_[masking_id_] << "\n";
    for (const auto& t : tokens_) out << t << "\n";
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId padding_id() const { return padding_id_; }
  TokenId masking_id() const { return masking_id_; }
  bool is_special(TokenId id) const { return id == padding_id_ || id == masking_id_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) throw UnknownToken(tok);
    return it->second;
  }

 private:
  std::vector<std::string> tokens_;
  TokenId padding_id_;
  TokenId masking_id_;
  std::unordered_map<std::string, TokenId> index_;
};

// Fixed-length padded token sequence; padding forms a contiguous suffix.
struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t t_max() const { return ids.size(); }

  std::size_t length(const Vocabulary& v) const {
    std::size_t n = ids.size();
    while (n > 0 && ids[n - 1] == v.padding_id()) --n;
    return n;
  }

  bool contains_mask(const Vocabulary& v) const {
    for (TokenId id : ids)
      if (id == v.masking_id()) return true;
    return false;
  }

  void validate(const Vocabulary& v) const {
    std::size_t n = length(v);
    if (n == 0) throw InvalidSequence("sequence has no non-padding tokens");
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] >= v.size()) throw InvalidSequence("token id out of range");
      if (ids[i] == v.padding_id())
        throw InvalidSequence("padding is not a contiguous suffix");
    }
  }

  bool operator==(const TokenSequence& o) const = default;
};

struct CorruptionPlan {
  std::vector<std::size_t> positions;  // distinct, inside the non-padding prefix

  std::size_t num_ops() const { return positions.size(); }

  void validate(const TokenSequence& seq, const Vocabulary& v) const {
    const std::size_t n = seq.length(v);
    std::set<std::size_t> seen;
    for (std::size_t p : positions) {
      if (p >= n) throw InvalidSequence("corruption position outside non-padding prefix");
      if (v.is_special(seq.ids[p])) throw InvalidSequence("corruption position on special token");
      if (!seen.insert(p).second) throw InvalidSequence("duplicate corruption position");
    }
  }
};

inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                              std::size_t t_max) {
  if (text.size() > t_max) throw SequenceTooLong("sequence longer than t_max");
  TokenSequence seq;
  seq.ids.assign(t_max, vocab.padding_id());
  for (std::size_t i = 0; i < text.size(); ++i)
    seq.ids[i] = vocab.id_of(std::string(1, text[i]));
  seq.validate(vocab);
  return seq;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  if (seq.contains_mask(vocab)) throw ContainsMask();
  seq.validate(vocab);
  std::string out;
  for (std::size_t i = 0, n = seq.length(vocab); i < n; ++i) out += vocab.token(seq.ids[i]);
  return out;
}

inline std::vector<std::size_t> eligible_positions(const TokenSequence& seq,
                                                   const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0, n = seq.length(vocab); i < n; ++i)
    if (!vocab.is_special(seq.ids[i])) out.push_back(i);
  return out;
}

inline CorruptionPlan select_positions(const TokenSequence& seq, const Vocabulary& vocab,
                                       std::size_t n, Rng& rng) {
  auto eligible = eligible_positions(seq, vocab);
  if (n > eligible.size())
    throw NotEnoughPositions("requested " + std::to_string(n) + " of " +
                             std::to_string(eligible.size()) + " eligible positions");
  CorruptionPlan plan;
  for (std::size_t k : rng.sample_without_replacement(eligible.size(), n))
    plan.positions.push_back(eligible[k]);
  std::sort(plan.positions.begin(), plan.positions.end());
  return plan;
}

inline TokenSequence apply_mask_corruption(const TokenSequence& seq, const CorruptionPlan& plan,
                                           const Vocabulary& vocab) {
  plan.validate(seq, vocab);
  TokenSequence out = seq;
  for (std::size_t p : plan.positions) out.ids[p] = vocab.masking_id();
  return out;
}

// Training-time corruption count: deterministic rounding of the mask ratio,
// never less than one position.
inline std::size_t training_mask_count(std::size_t non_padding_len, double mask_ratio) {
  auto n = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(non_padding_len)));
  return std::max<std::size_t>(n, 1);
}

}  // namespace lambo::seq
