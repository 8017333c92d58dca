#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace gridwatch::grid {

enum class BusKind { Slack, Pv, Pq };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::Pq;
  // Per-unit magnitude, set for slack/pv buses only.
  std::optional<double> voltage_setpoint;
  double x = 0.0;  // planar map units
  double y = 0.0;
  std::string name;
};

struct Branch {
  int id = 0;
  int from_bus = 0;
  int to_bus = 0;
  double r = 0.0;        // series resistance, p.u.
  double x = 0.0;        // series reactance, p.u.
  double b_shunt = 0.0;  // total line charging susceptance, p.u.
  double rating = 0.0;   // apparent-power limit, p.u.
  bool in_service = true;
};

struct Generator {
  int id = 0;
  int bus = 0;
  double p_set = 0.0;  // p.u.
  double q_min = 0.0;
  double q_max = 0.0;
  bool in_service = true;
};

struct Load {
  int id = 0;
  int bus = 0;
  double p = 0.0;  // p.u.
  double q = 0.0;
};

struct GridSpec {
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  std::vector<Load> loads;

  const Bus* find_bus(int id) const;
  const Branch* find_branch(int id) const;
  const Generator* find_generator(int id) const;
  int bus_index(int id) const;  // -1 if unknown
};

// Separated real/imaginary parts of the bus admittance matrix, with the
// bus-id <-> row mapping used by every downstream solve.
struct AdmittanceMatrix {
  Eigen::MatrixXd g;
  Eigen::MatrixXd b;
  std::vector<int> row_to_bus_id;
  std::map<int, int> bus_id_to_row;

  int size() const { return static_cast<int>(row_to_bus_id.size()); }
};

enum class ElementKind { Branch, Generator };

struct ElementRef {
  ElementKind kind = ElementKind::Branch;
  int id = 0;

  friend auto operator<=>(const ElementRef&, const ElementRef&) = default;
};

std::string element_kind_name(ElementKind k);

// Parses and validates the JSON grid format. Power quantities in the file are
// in physical units (MW / MVAr / MVA) and are converted to per-unit on
// base_mva here; impedances and voltage setpoints are already per-unit.
// Strict mode rejects unknown keys. Throws util::ParseError.
GridSpec parse_grid(std::string_view text, bool lenient = false);

// Validation shared by parse_grid and programmatic construction.
void validate_grid(const GridSpec& spec);

AdmittanceMatrix build_admittance(const GridSpec& spec);

// Returns a copy with the referenced elements out of service. Idempotent.
// Throws util::ParseError on unknown element ids.
GridSpec apply_outage(const GridSpec& spec, const std::vector<ElementRef>& elements);

// Partition of bus ids into islands connected via in-service branches.
// Each island is sorted ascending; islands ordered by smallest member.
std::vector<std::vector<int>> connectivity(const GridSpec& spec);

nlohmann::json grid_to_json(const GridSpec& spec);

}  // namespace gridwatch::grid
