#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/grid.hpp"
#include "core/powerflow.hpp"

namespace gridwatch::cty {

// An outage hypothesis: a nonempty set of distinct elements, order = size.
struct Contingency {
  std::vector<grid::ElementRef> elements;  // kept sorted (kind, id)

  int order() const { return static_cast<int>(elements.size()); }
  std::string label() const;

  friend auto operator<=>(const Contingency&, const Contingency&) = default;
};

// One verified field observation already mapped to a grid asset; the bridge
// from the report pipeline into probability space.
struct AssetObservation {
  grid::ElementRef asset;
  double confidence = 0.0;  // in [0, 1]
  std::string report_id;
};

struct AssetProbability {
  std::map<grid::ElementRef, double> p;
  std::map<grid::ElementRef, std::vector<std::string>> provenance;

  double get(const grid::ElementRef& e, double fallback) const {
    auto it = p.find(e);
    return it == p.end() ? fallback : it->second;
  }
};

struct ScreeningPolicy {
  double floor = 0.001;    // baseline per-asset failure probability
  double threshold = 0.0;  // minimum contingency probability to analyze
  size_t budget = SIZE_MAX;
  int max_order = 2;
};

inline constexpr double kSeverityMax = 10.0;  // sentinel for unsolvable cases

struct SeverityScore {
  double value = 0.0;  // max post-contingency branch loading
  bool unsolvable = false;
  std::optional<int> worst_branch;
};

struct AssessedContingency {
  Contingency contingency;
  double probability = 0.0;
  SeverityScore severity;
};

struct RiskAssessment {
  std::vector<AssessedContingency> entries;  // screened order
  std::map<int, double> bus_risk;            // probability-weighted severity per bus
};

// All size-x subsets of outageable (in-service) elements in lexicographic
// (kind, id) order. x larger than the element count yields an empty list.
std::vector<Contingency> enumerate_contingencies(const grid::GridSpec& spec, int x);

// Noisy-OR combination per asset: p = 1 - prod(1 - c_i). Assets without any
// observation sit at the policy floor.
AssetProbability derive_probabilities(const std::vector<AssetObservation>& observations,
                                      const grid::GridSpec& spec, const ScreeningPolicy& policy);

// Contingency probability = product of member-asset probabilities. Keeps
// entries >= threshold, sorts by descending probability (ties lexicographic),
// truncates to the budget.
std::vector<std::pair<Contingency, double>> screen(const std::vector<Contingency>& candidates,
                                                   const AssetProbability& probs,
                                                   const ScreeningPolicy& policy);

// Applies the outage and re-solves. Islands that carry load but no slack, or
// a diverged solve, score the sentinel; dead islands (no load, no slack) are
// pruned before the solve.
SeverityScore assess(const grid::GridSpec& spec, const Contingency& c, const pf::Controls& u,
                     const pf::SolveOptions& opts = {});

// Screen + assess, optionally across worker threads. Results are ordered
// exactly as the screened list regardless of parallelism.
RiskAssessment assess_all(const grid::GridSpec& spec,
                          const std::vector<std::pair<Contingency, double>>& screened,
                          const pf::SolveOptions& opts = {}, int jobs = 1);

struct RiskRaster {
  int rows = 0;
  int cols = 0;
  double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;
  std::vector<double> values;  // row-major, normalized to [0, 1]

  double at(int row, int col) const { return values[static_cast<size_t>(row) * cols + col]; }
  double cell_x(int col) const;
  double cell_y(int row) const;
};

// Inverse-distance-squared interpolation of per-bus risk over the bus
// bounding box, normalized by the maximum cell. Throws util::ParseError when
// all buses coincide or grid_res < 2.
RiskRaster risk_surface(const RiskAssessment& assessment, const grid::GridSpec& spec,
                        int grid_res);

std::string raster_to_csv(const RiskRaster& raster);
std::string raster_to_svg(const RiskRaster& raster, const grid::GridSpec& spec);
std::string table_to_csv(const RiskAssessment& assessment);

}  // namespace gridwatch::cty
