#include "perturbkit/tokenizer.hpp"

#include "perturbkit/common.hpp"

namespace perturbkit {

SubwordTokenizer::SubwordTokenizer(std::vector<std::string> vocab)
    : pieces_(std::move(vocab)) {
  for (size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw BackendError("empty vocabulary piece");
    if (!ids_.emplace(pieces_[i], static_cast<int>(i)).second)
      throw BackendError("duplicate vocabulary piece: " + pieces_[i]);
  }
}

int SubwordTokenizer::id(const std::string& piece) const {
  auto it = ids_.find(piece);
  return it == ids_.end() ? -1 : it->second;
}

std::vector<int> SubwordTokenizer::split_word(const std::string& word) const {
  std::vector<int> out;
  size_t off = 0;
  while (off < word.size()) {
    int best = -1;
    size_t best_len = 0;
    // longest piece matching at this offset
    for (size_t len = word.size() - off; len >= 1; --len) {
      auto it = ids_.find(word.substr(off, len));
      if (it != ids_.end()) {
        best = it->second;
        best_len = len;
        break;
      }
    }
    if (best < 0)
      throw BackendError("no subword decomposition for '" + word + "' at offset " +
                         std::to_string(off));
    out.push_back(best);
    off += best_len;
  }
  return out;
}

TokenizedRegion SubwordTokenizer::tokenize(const TokenString& s) const {
  TokenizedRegion out;
  for (auto& tok : s.tokens()) {
    std::vector<int> ids = split_word(tok.surface);
    int begin = static_cast<int>(out.subword_ids.size());
    out.subword_ids.insert(out.subword_ids.end(), ids.begin(), ids.end());
    out.word_boundaries.push_back({begin, begin + static_cast<int>(ids.size())});
    out.single_tokenized.push_back(ids.size() == 1);
  }
  return out;
}

}  // namespace perturbkit
