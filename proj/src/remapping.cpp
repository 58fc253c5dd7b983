#include "perturbkit/remapping.hpp"

#include <algorithm>
#include <set>

#include "perturbkit/common.hpp"

namespace perturbkit {

TokenString::TokenString(std::vector<Token> tokens) : tokens_(std::move(tokens)) {
  std::sort(tokens_.begin(), tokens_.end(),
            [](const Token& a, const Token& b) { return a.position < b.position; });
}

TokenString TokenString::from_text(const std::string& text) {
  std::vector<Token> toks;
  int pos = 1;
  for (auto& w : split_whitespace(text)) toks.push_back({w, pos++});
  return TokenString(std::move(toks));
}

std::string TokenString::text() const {
  std::vector<std::string> surfaces;
  surfaces.reserve(tokens_.size());
  for (auto& t : tokens_) surfaces.push_back(t.surface);
  return join(surfaces, " ");
}

TokenString TokenString::merged(const TokenString& other) const {
  std::vector<Token> all = tokens_;
  all.insert(all.end(), other.tokens_.begin(), other.tokens_.end());
  return TokenString(std::move(all));
}

namespace {

struct SplitResult {
  TokenString context;
  TokenString region;
};

SplitResult split_by_span(const std::string& text, const std::optional<Span>& span,
                          const std::string& which, bool deletion) {
  TokenString full = TokenString::from_text(text);
  if (!span) {
    if (!deletion)
      throw ParseError("empty " + which + " region requires the deletion flag");
    return {full, TokenString()};
  }
  int n = static_cast<int>(full.size());
  if (span->start < 1 || span->end > n || span->start > span->end)
    throw ParseError(which + " region span [" + std::to_string(span->start) + "," +
                     std::to_string(span->end) + "] outside string of " +
                     std::to_string(n) + " words");
  std::vector<Token> ctx, reg;
  for (auto& t : full.tokens()) {
    if (t.position >= span->start && t.position <= span->end)
      reg.push_back(t);
    else
      ctx.push_back(t);
  }
  return {TokenString(std::move(ctx)), TokenString(std::move(reg))};
}

void check_positions(const TokenString& s, const std::string& which,
                     std::vector<std::string>& problems) {
  std::set<int> seen;
  for (auto& t : s.tokens()) {
    if (!seen.insert(t.position).second)
      problems.push_back("duplicate position " + std::to_string(t.position) + " in " +
                         which);
    if (t.position < 1)
      problems.push_back("non-positive position " + std::to_string(t.position) +
                         " in " + which);
  }
}

}  // namespace

Remapping parse_remapping(const RemappingRecord& record) {
  Remapping m;
  m.id = record.id;
  m.deletion = record.deletion;
  auto orig = split_by_span(record.original_text, record.region_original_span,
                            "original", record.deletion);
  auto alt = split_by_span(record.alternate_text, record.region_alternate_span,
                           "alternate", record.deletion);
  m.context_original = std::move(orig.context);
  m.region_original = std::move(orig.region);
  m.context_alternate = std::move(alt.context);
  m.region_alternate = std::move(alt.region);
  return m;
}

ValidationReport validate(const Remapping& m) {
  ValidationReport report;
  check_positions(m.context_original.merged(m.region_original), "original string",
                  report.problems);
  check_positions(m.context_alternate.merged(m.region_alternate), "alternate string",
                  report.problems);
  if (!m.deletion) {
    if (m.region_original.empty())
      report.problems.push_back("empty original region on a non-deletion remapping");
    if (m.region_alternate.empty())
      report.problems.push_back("empty alternate region on a non-deletion remapping");
  }
  if (m.context_original != m.context_alternate)
    report.warnings.push_back("original and alternate contexts differ");
  return report;
}

namespace {

std::optional<Span> region_span(const TokenString& region, const std::string& which) {
  if (region.empty()) return std::nullopt;
  int lo = region.tokens().front().position;
  int hi = region.tokens().back().position;
  if (hi - lo + 1 != static_cast<int>(region.size()))
    throw ConfigError("non-contiguous " + which + " region cannot be written as a span");
  return Span{lo, hi};
}

}  // namespace

RemappingRecord to_record(const Remapping& m) {
  RemappingRecord r;
  r.id = m.id;
  r.deletion = m.deletion;
  r.original_text = m.context_original.merged(m.region_original).text();
  r.alternate_text = m.context_alternate.merged(m.region_alternate).text();
  r.region_original_span = region_span(m.region_original, "original");
  r.region_alternate_span = region_span(m.region_alternate, "alternate");
  return r;
}

}  // namespace perturbkit
