#pragma once

// Shared plumbing for the built-in reference LMs: config serde, parameter
// packing, and manifest construction. Internal to src/.

#include <json.hpp>
#include <string>
#include <vector>

#include "perturbkit/backend.hpp"
#include "perturbkit/common.hpp"
#include "perturbkit/mat.hpp"

namespace perturbkit::detail {

struct NamedParam {
  std::string name;
  Mat* mat;
};

nlohmann::json config_to_json(const ReferenceLMConfig& cfg);
ReferenceLMConfig config_from_json(const nlohmann::json& j);

std::string build_manifest(const std::string& backend_id, Mode mode,
                           const ReferenceLMConfig& cfg,
                           const std::vector<NamedParam>& params);

/// Parse + sanity-check a manifest against the expected backend id; returns
/// the embedded config. Shape checks happen in unpack().
ReferenceLMConfig parse_manifest(const std::string& manifest_json,
                                 const std::string& backend_id);

std::vector<double> pack(const std::vector<NamedParam>& params);
void unpack(const std::vector<NamedParam>& params, const std::vector<double>& blob);

/// Deterministic Gaussian initialization; each parameter gets a seed derived
/// from (cfg.seed, its index).
void init_params(const std::vector<NamedParam>& params, uint64_t seed, double scale);

/// Context and region merged into one subword sequence in position order,
/// with per-word boundaries and a region flag per word.
struct SeqInfo {
  std::vector<int> ids;
  std::vector<WordPieces> bounds;
  std::vector<bool> is_region;
};

SeqInfo assemble_sequence(const SubwordTokenizer& tok, const TokenString& ctx,
                          const TokenString& region);

/// Causal ordering precondition: every region position follows every context
/// position. Throws BackendError otherwise.
void require_causal_order(const TokenString& ctx, const TokenString& region);

ModelPtr make_ref_causal(const ReferenceLMConfig& cfg,
                         const std::vector<TokenString>& corpus);
ModelPtr load_ref_causal(const std::string& manifest_json,
                         const std::vector<double>& blob);
ModelPtr make_ref_masked(const ReferenceLMConfig& cfg,
                         const std::vector<TokenString>& corpus);
ModelPtr load_ref_masked(const std::string& manifest_json,
                         const std::vector<double>& blob);

}  // namespace perturbkit::detail
