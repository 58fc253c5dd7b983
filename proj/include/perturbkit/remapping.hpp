#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace perturbkit {

/// A vocabulary element at a 1-based position within a string.
struct Token {
  std::string surface;
  int position = 0;
  bool operator==(const Token&) const = default;
};

/// A set of tokens with pairwise-distinct positions, kept sorted by position.
/// May be empty (an empty context is legal).
class TokenString {
 public:
  TokenString() = default;
  explicit TokenString(std::vector<Token> tokens);

  /// Whitespace-split text into tokens at positions 1..n.
  static TokenString from_text(const std::string& text);

  const std::vector<Token>& tokens() const { return tokens_; }
  bool empty() const { return tokens_.empty(); }
  size_t size() const { return tokens_.size(); }

  /// Surfaces joined by single spaces in position order.
  std::string text() const;

  /// Merge with another token string; positions must stay distinct
  /// (checked by validate(), not here).
  TokenString merged(const TokenString& other) const;

  bool operator==(const TokenString&) const = default;

 private:
  std::vector<Token> tokens_;
};

/// Inclusive 1-based range of whitespace-word indices.
struct Span {
  int start = 0;
  int end = 0;
  bool operator==(const Span&) const = default;
};

/// The 4-tuple of contexts and critical regions. A remapping expresses the
/// correspondence "in context C, region R_o becomes R_a".
struct Remapping {
  std::string id;
  TokenString context_original;
  TokenString region_original;
  TokenString context_alternate;
  TokenString region_alternate;
  bool deletion = false;  // when set, one region may be empty
  bool operator==(const Remapping&) const = default;
};

/// Flat serialized form of one remapping plus its labels.
struct RemappingRecord {
  std::string id;
  std::string class_label;
  std::string original_text;
  std::string alternate_text;
  std::optional<Span> region_original_span;   // nullopt = empty region
  std::optional<Span> region_alternate_span;  // nullopt = empty region
  std::map<std::string, std::string> factors;
  bool deletion = false;
  bool first_subword_only = false;
  bool operator==(const RemappingRecord&) const = default;
};

struct ValidationReport {
  std::vector<std::string> problems;
  std::vector<std::string> warnings;
  bool ok() const { return problems.empty(); }
};

/// Build a Remapping from a record. The region span selects the critical
/// words; everything else becomes context. Throws ParseError on spans outside
/// string bounds, inverted spans, or an empty region without the deletion flag.
Remapping parse_remapping(const RemappingRecord& record);

/// Check remapping invariants. Problems: duplicate positions within either
/// side, empty region on a non-deletion remapping. Warning: differing
/// contexts (legal but usually unintended).
ValidationReport validate(const Remapping& remapping);

/// Inverse of parse_remapping for remappings with contiguous regions.
/// Throws ConfigError when a region is non-contiguous (not representable
/// as a span record).
RemappingRecord to_record(const Remapping& remapping);

}  // namespace perturbkit
