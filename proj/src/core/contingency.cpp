#include "core/contingency.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <sstream>
#include <thread>

#include "core/util.hpp"

namespace gridwatch::cty {

using grid::ElementKind;
using grid::ElementRef;

std::string Contingency::label() const {
  std::string out;
  for (const auto& e : elements) {
    if (!out.empty()) out += "+";
    out += grid::element_kind_name(e.kind) + ":" + std::to_string(e.id);
  }
  return out;
}

std::vector<Contingency> enumerate_contingencies(const grid::GridSpec& spec, int x) {
  if (x < 1) throw std::invalid_argument("contingency order must be >= 1");
  std::vector<ElementRef> pool;
  for (const auto& br : spec.branches)
    if (br.in_service) pool.push_back({ElementKind::Branch, br.id});
  for (const auto& g : spec.generators)
    if (g.in_service) pool.push_back({ElementKind::Generator, g.id});
  std::sort(pool.begin(), pool.end());

  std::vector<Contingency> out;
  const int n = static_cast<int>(pool.size());
  if (x > n) return out;

  std::vector<int> idx(static_cast<size_t>(x));
  for (int i = 0; i < x; ++i) idx[static_cast<size_t>(i)] = i;
  while (true) {
    Contingency c;
    for (int i : idx) c.elements.push_back(pool[static_cast<size_t>(i)]);
    out.push_back(std::move(c));
    int pos = x - 1;
    while (pos >= 0 && idx[static_cast<size_t>(pos)] == n - x + pos) --pos;
    if (pos < 0) break;
    ++idx[static_cast<size_t>(pos)];
    for (int i = pos + 1; i < x; ++i) idx[static_cast<size_t>(i)] = idx[static_cast<size_t>(i - 1)] + 1;
  }
  return out;
}

namespace {

void validate_policy(const ScreeningPolicy& policy) {
  if (policy.floor < 0.0 || policy.floor > 1.0)
    throw std::invalid_argument("screening floor must be in [0, 1]");
  if (policy.threshold < 0.0 || policy.threshold > 1.0)
    throw std::invalid_argument("screening threshold must be in [0, 1]");
  if (policy.budget < 1) throw std::invalid_argument("screening budget must be >= 1");
  if (policy.max_order < 1) throw std::invalid_argument("max_order must be >= 1");
}

}  // namespace

AssetProbability derive_probabilities(const std::vector<AssetObservation>& observations,
                                      const grid::GridSpec& spec, const ScreeningPolicy& policy) {
  validate_policy(policy);
  AssetProbability ap;
  for (const auto& br : spec.branches)
    if (br.in_service) ap.p[{ElementKind::Branch, br.id}] = policy.floor;
  for (const auto& g : spec.generators)
    if (g.in_service) ap.p[{ElementKind::Generator, g.id}] = policy.floor;

  // Noisy-OR accumulated as the complement product per asset.
  std::map<ElementRef, double> miss;
  for (const auto& obs : observations) {
    if (!ap.p.count(obs.asset)) continue;  // out-of-service or unknown target
    const double c = std::clamp(obs.confidence, 0.0, 1.0);
    miss.try_emplace(obs.asset, 1.0).first->second *= (1.0 - c);
    ap.provenance[obs.asset].push_back(obs.report_id);
  }
  for (const auto& [asset, m] : miss) ap.p[asset] = 1.0 - m;
  return ap;
}

std::vector<std::pair<Contingency, double>> screen(const std::vector<Contingency>& candidates,
                                                   const AssetProbability& probs,
                                                   const ScreeningPolicy& policy) {
  validate_policy(policy);
  std::vector<std::pair<Contingency, double>> kept;
  kept.reserve(candidates.size());
  for (const auto& c : candidates) {
    double p = 1.0;
    for (const auto& e : c.elements) p *= probs.get(e, policy.floor);
    if (p >= policy.threshold) kept.emplace_back(c, p);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (kept.size() > policy.budget) kept.resize(policy.budget);
  return kept;
}

SeverityScore assess(const grid::GridSpec& spec, const Contingency& c, const pf::Controls& u,
                     const pf::SolveOptions& opts) {
  const grid::GridSpec outaged = grid::apply_outage(spec, c.elements);

  // Partition first: islands with load but no slack are lost load, islands
  // with neither are dead weight we can drop before solving.
  std::set<int> dead_buses;
  for (const auto& island : grid::connectivity(outaged)) {
    bool has_slack = false, has_load = false;
    for (int id : island) {
      if (outaged.find_bus(id)->kind == grid::BusKind::Slack) has_slack = true;
      for (const auto& l : outaged.loads)
        if (l.bus == id && (l.p != 0.0 || l.q != 0.0)) has_load = true;
    }
    if (has_slack) continue;
    if (has_load) return {kSeverityMax, true, std::nullopt};
    dead_buses.insert(island.begin(), island.end());
  }

  grid::GridSpec solvable = outaged;
  pf::Controls controls = u;
  if (!dead_buses.empty()) {
    grid::GridSpec pruned;
    pruned.base_mva = solvable.base_mva;
    for (const auto& b : solvable.buses)
      if (!dead_buses.count(b.id)) pruned.buses.push_back(b);
    for (const auto& br : solvable.branches)
      if (!dead_buses.count(br.from_bus) && !dead_buses.count(br.to_bus))
        pruned.branches.push_back(br);
    pf::Controls pruned_controls;
    std::vector<double> pg, qg;
    for (size_t gi = 0; gi < solvable.generators.size(); ++gi) {
      if (dead_buses.count(solvable.generators[gi].bus)) continue;
      pruned.generators.push_back(solvable.generators[gi]);
      pg.push_back(controls.p_gen(static_cast<Eigen::Index>(gi)));
      qg.push_back(controls.q_gen(static_cast<Eigen::Index>(gi)));
    }
    for (const auto& l : solvable.loads)
      if (!dead_buses.count(l.bus)) pruned.loads.push_back(l);
    pruned_controls.p_gen = Eigen::Map<Eigen::VectorXd>(pg.data(), static_cast<Eigen::Index>(pg.size()));
    pruned_controls.q_gen = Eigen::Map<Eigen::VectorXd>(qg.data(), static_cast<Eigen::Index>(qg.size()));
    solvable = std::move(pruned);
    controls = std::move(pruned_controls);
  }

  const pf::SolveOutcome outcome = pf::solve_newton(solvable, controls, opts);
  const auto* conv = std::get_if<pf::Converged>(&outcome);
  if (!conv) return {kSeverityMax, true, std::nullopt};

  SeverityScore score;
  for (const auto& f : pf::line_flows(conv->state, solvable)) {
    if (f.loading > score.value) {
      score.value = f.loading;
      score.worst_branch = f.branch_id;
    }
  }
  return score;
}

RiskAssessment assess_all(const grid::GridSpec& spec,
                          const std::vector<std::pair<Contingency, double>>& screened,
                          const pf::SolveOptions& opts, int jobs) {
  RiskAssessment result;
  result.entries.resize(screened.size());

  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(screened.size())));
  std::atomic<size_t> next{0};
  auto work = [&]() {
    const pf::Controls u = pf::Controls::from_spec(spec);
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= screened.size()) break;
      result.entries[i] = {screened[i].first, screened[i].second,
                           assess(spec, screened[i].first, u, opts)};
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  // Per-bus risk: probability-weighted severity over contingencies whose
  // elements touch the bus.
  for (const auto& b : spec.buses) result.bus_risk[b.id] = 0.0;
  for (const auto& entry : result.entries) {
    std::set<int> touched;
    for (const auto& e : entry.contingency.elements) {
      if (e.kind == ElementKind::Branch) {
        if (const auto* br = spec.find_branch(e.id)) {
          touched.insert(br->from_bus);
          touched.insert(br->to_bus);
        }
      } else if (const auto* g = spec.find_generator(e.id)) {
        touched.insert(g->bus);
      }
    }
    for (int bus : touched) result.bus_risk[bus] += entry.probability * entry.severity.value;
  }
  return result;
}

double RiskRaster::cell_x(int col) const {
  return x_min + (x_max - x_min) * (col + 0.5) / cols;
}

double RiskRaster::cell_y(int row) const {
  return y_min + (y_max - y_min) * (row + 0.5) / rows;
}

RiskRaster risk_surface(const RiskAssessment& assessment, const grid::GridSpec& spec,
                        int grid_res) {
  if (grid_res < 2) throw util::ParseError("raster resolution must be >= 2");
  if (spec.buses.empty()) throw util::ParseError("cannot raster an empty grid");

  RiskRaster r;
  r.rows = r.cols = grid_res;
  r.x_min = r.x_max = spec.buses[0].x;
  r.y_min = r.y_max = spec.buses[0].y;
  for (const auto& b : spec.buses) {
    r.x_min = std::min(r.x_min, b.x);
    r.x_max = std::max(r.x_max, b.x);
    r.y_min = std::min(r.y_min, b.y);
    r.y_max = std::max(r.y_max, b.y);
  }
  if (r.x_min == r.x_max && r.y_min == r.y_max)
    throw util::ParseError("degenerate bounding box: all buses coincide");
  // Keep zero-width axes drawable by giving them the other axis's extent.
  if (r.x_min == r.x_max) {
    r.x_min -= (r.y_max - r.y_min) / 2;
    r.x_max += (r.y_max - r.y_min) / 2;
  }
  if (r.y_min == r.y_max) {
    r.y_min -= (r.x_max - r.x_min) / 2;
    r.y_max += (r.x_max - r.x_min) / 2;
  }

  constexpr double kEpsilon = 1e-9;  // guard at bus locations
  r.values.assign(static_cast<size_t>(grid_res) * grid_res, 0.0);
  for (int row = 0; row < grid_res; ++row) {
    for (int col = 0; col < grid_res; ++col) {
      const double cx = r.cell_x(col);
      const double cy = r.cell_y(row);
      double weighted = 0.0, weight = 0.0;
      for (const auto& b : spec.buses) {
        const double d2 = (b.x - cx) * (b.x - cx) + (b.y - cy) * (b.y - cy) + kEpsilon;
        const double w = 1.0 / d2;
        weighted += w * assessment.bus_risk.at(b.id);
        weight += w;
      }
      r.values[static_cast<size_t>(row) * grid_res + col] = weighted / weight;
    }
  }
  const double peak = *std::max_element(r.values.begin(), r.values.end());
  if (peak > 0.0)
    for (double& v : r.values) v /= peak;
  return r;
}

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

// Blue -> yellow -> red ramp for the heatmap.
std::string ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  int rc, gc, bc;
  if (t < 0.5) {
    const double u = t / 0.5;
    rc = static_cast<int>(30 + u * (250 - 30));
    gc = static_cast<int>(60 + u * (220 - 60));
    bc = static_cast<int>(160 - u * 120);
  } else {
    const double u = (t - 0.5) / 0.5;
    rc = static_cast<int>(250 - u * 40);
    gc = static_cast<int>(220 - u * 180);
    bc = static_cast<int>(40 - u * 10);
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rc, gc, bc);
  return buf;
}

}  // namespace

std::string raster_to_csv(const RiskRaster& raster) {
  std::string out = "row,col,x,y,value\n";
  for (int row = 0; row < raster.rows; ++row) {
    for (int col = 0; col < raster.cols; ++col) {
      out += std::to_string(row) + "," + std::to_string(col) + "," + fmt(raster.cell_x(col)) +
             "," + fmt(raster.cell_y(row)) + "," + fmt(raster.at(row, col)) + "\n";
    }
  }
  return out;
}

std::string raster_to_svg(const RiskRaster& raster, const grid::GridSpec& spec) {
  const int width = 640, height = 640, margin = 40;
  const double plot_w = width - 2.0 * margin;
  const double plot_h = height - 2.0 * margin;
  auto px = [&](double x) {
    return margin + (x - raster.x_min) / (raster.x_max - raster.x_min) * plot_w;
  };
  // SVG y axis points down; map north up.
  auto py = [&](double y) {
    return margin + (raster.y_max - y) / (raster.y_max - raster.y_min) * plot_h;
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  const double cell_w = plot_w / raster.cols;
  const double cell_h = plot_h / raster.rows;
  for (int row = 0; row < raster.rows; ++row) {
    for (int col = 0; col < raster.cols; ++col) {
      const double x = margin + col * cell_w;
      const double y = margin + (raster.rows - 1 - row) * cell_h;
      svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w + 0.5
          << "\" height=\"" << cell_h + 0.5 << "\" fill=\"" << ramp_color(raster.at(row, col))
          << "\"/>\n";
    }
  }
  for (const auto& br : spec.branches) {
    const auto* a = spec.find_bus(br.from_bus);
    const auto* b = spec.find_bus(br.to_bus);
    svg << "<line x1=\"" << px(a->x) << "\" y1=\"" << py(a->y) << "\" x2=\"" << px(b->x)
        << "\" y2=\"" << py(b->y) << "\" stroke=\"#333333\" stroke-width=\""
        << (br.in_service ? 2 : 1) << "\""
        << (br.in_service ? "" : " stroke-dasharray=\"4 3\"") << "/>\n";
  }
  for (const auto& bus : spec.buses) {
    svg << "<circle cx=\"" << px(bus.x) << "\" cy=\"" << py(bus.y)
        << "\" r=\"6\" fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << px(bus.x) + 9 << "\" y=\"" << py(bus.y) - 6
        << "\" font-family=\"sans-serif\" font-size=\"13\">" << bus.id
        << (bus.name.empty() ? "" : " " + bus.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string table_to_csv(const RiskAssessment& assessment) {
  std::string out = "rank,elements,order,probability,severity,unsolvable,worst_branch\n";
  int rank = 1;
  for (const auto& e : assessment.entries) {
    out += std::to_string(rank++) + "," + e.contingency.label() + "," +
           std::to_string(e.contingency.order()) + "," + fmt(e.probability) + "," +
           fmt(e.severity.value) + "," + (e.severity.unsolvable ? "true" : "false") + "," +
           (e.severity.worst_branch ? std::to_string(*e.severity.worst_branch) : "") + "\n";
  }
  return out;
}

}  // namespace gridwatch::cty
