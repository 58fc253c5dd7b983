#pragma once

#include <optional>
#include <string>
#include <vector>

#include "perturbkit/perturb.hpp"
#include "perturbkit/transfer.hpp"

namespace perturbkit {

/// Rendering knobs for the SVG reports. Everything here is presentation
/// only; the matrices and records being drawn are never modified.
struct PlotSpec {
  /// Cap |value| at this magnitude before color or axis mapping.
  std::optional<double> clip;
  /// Exponent of the |value|/max color curve; below 1 boosts faint cells.
  double color_gamma = 1.0;
  /// Class groups in display order. Unlisted groups follow in data order;
  /// a name matching no group in the data is an error.
  std::vector<std::string> group_order;
  /// Mark per-group medians on distribution plots.
  bool medians = true;

  bool operator==(const PlotSpec&) const = default;
};

std::string plot_spec_to_json(const PlotSpec& spec);
PlotSpec plot_spec_from_json(const std::string& text);

/// Transfer grid as a heatmap: rows and columns sorted by class group with
/// separator rules between groups, diverging palette with sign-preserving
/// power-law normalization, skipped cells gray. Cell values live in
/// <title> tooltips, extremes in the legend.
std::string heatmap_svg(const TransferMatrix& m, const PlotSpec& spec = {});

/// Violin-style densities of effect values grouped by the train/eval class
/// relation (self, within, between), with median markers per group.
std::string distribution_svg(const std::vector<EffectRecord>& records,
                             const PlotSpec& spec = {});

}  // namespace perturbkit
