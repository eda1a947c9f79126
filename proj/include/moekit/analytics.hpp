// SPDX-License-Identifier: Apache-2.0
//
// Routing-distribution analysis over captured traces: expert loads, modality
// preferences, and principal-component token pathways, plus the CSV/JSON
// report emitters.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "moekit/types.hpp"

namespace moekit {

/// Per layer, the fraction of top-1 assignments landing on each expert.
/// Fractions are exact ratios of integer counts and sum to 1 per layer.
std::vector<std::vector<double>> expert_load_distribution(const RoutingTrace& trace);

struct ModalityShare {
  bool active = false;  // false: the expert received no assignments
  double text_fraction = 0.0;
  double image_fraction = 0.0;
};

/// Per layer, per expert: the share of its top-1 assigned tokens that are
/// text vs image. Experts without assignments report active = false rather
/// than 0/0.
std::vector<std::vector<ModalityShare>> modality_preference(const RoutingTrace& trace);

struct PathwayEntry {
  std::vector<std::size_t> experts;  // top-1 expert per layer
  double score = 0.0;                // |projection on the first component|
  Modality modality = Modality::kText;
  bool top2 = false;  // among the two best of its modality in this report
};

struct PathwayReport {
  std::vector<PathwayEntry> pathways;  // scores descending, deduplicated
};

/// Each token's pathway vector is the concatenation of its per-layer gate
/// probability vectors. Tokens are ranked by |projection| onto the first
/// principal component of those vectors; the top-n tokens' discrete expert
/// sequences are returned, deduplicated, with the per-modality top-2 flagged.
PathwayReport token_pathways(const RoutingTrace& trace, std::size_t n = 10);

struct PcaResult {
  std::vector<double> component;  // unit length, first nonzero entry positive
  double eigenvalue = 0.0;
};

/// First principal component of a row-major [rows x cols] data matrix via
/// covariance eigen-decomposition (cyclic Jacobi sweeps). Requires rows >= 2.
PcaResult first_principal_component(const std::vector<double>& data, std::size_t rows,
                                    std::size_t cols);

// --- report files ------------------------------------------------------------
// loads csv:        layer,expert,fraction
// preferences csv:  layer,expert,text_fraction,image_fraction (blank = inactive)
// pathways json:    {"pathways":[{"experts":[...],"score":..,"modality":..,"top2":..}]}

void write_loads_csv(const RoutingTrace& trace, const std::string& path);
void write_preferences_csv(const RoutingTrace& trace, const std::string& path);
void write_pathways_json(const PathwayReport& report, const std::string& path);

// Schema checks, run on every emission; throw on violation.
void validate_loads_csv(const std::string& path);
void validate_preferences_csv(const std::string& path);
void validate_pathways_json(const std::string& path);

}  // namespace moekit
