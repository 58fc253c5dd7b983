#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "perturbkit/remapping.hpp"

namespace perturbkit {

/// Half-open subword index range covering one whitespace word.
struct WordPieces {
  int begin = 0;
  int end = 0;
  bool operator==(const WordPieces&) const = default;
};

/// A token string resolved to backend subword ids. word_boundaries tile
/// subword_ids without gaps or overlap, one entry per source word.
struct TokenizedRegion {
  std::vector<int> subword_ids;
  std::vector<WordPieces> word_boundaries;
  std::vector<bool> single_tokenized;
};

/// Greedy longest-prefix-match subword tokenizer over a fixed vocabulary.
/// A word splits into the longest vocabulary piece matching at each offset;
/// a word with no decomposition is an error (no unk token).
class SubwordTokenizer {
 public:
  SubwordTokenizer() = default;
  explicit SubwordTokenizer(std::vector<std::string> vocab);

  int size() const { return static_cast<int>(pieces_.size()); }
  bool has(const std::string& piece) const { return ids_.count(piece) > 0; }
  /// Vocabulary id, or -1 when absent.
  int id(const std::string& piece) const;
  const std::string& piece(int id) const { return pieces_.at(id); }

  /// Throws BackendError when some suffix has no matching piece.
  std::vector<int> split_word(const std::string& word) const;

  /// Tokenize words in position order.
  TokenizedRegion tokenize(const TokenString& s) const;

  const std::vector<std::string>& vocab() const { return pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> ids_;
};

inline constexpr const char* kBosPiece = "<s>";
inline constexpr const char* kMaskPiece = "[MASK]";

}  // namespace perturbkit
