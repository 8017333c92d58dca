#include "core/grid.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <set>
#include <unordered_map>

#include "core/util.hpp"

namespace gridwatch::grid {

using util::ParseError;

namespace {

// Field-presence helper for strict parsing: every listed key must exist,
// anything else is rejected unless lenient.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string context, bool lenient)
      : obj_(obj), context_(std::move(context)), lenient_(lenient) {
    if (!obj.is_object()) throw ParseError("expected an object", context_);
  }

  const nlohmann::json* optional(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return nullptr;
    return &*it;
  }

  const nlohmann::json& required(const std::string& key) {
    const nlohmann::json* v = optional(key);
    if (!v) throw ParseError("missing required field '" + key + "'", context_);
    return *v;
  }

  double number(const std::string& key) {
    const nlohmann::json& v = required(key);
    if (!v.is_number()) throw ParseError("field '" + key + "' must be a number", context_);
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ParseError("field '" + key + "' must be finite", context_);
    return d;
  }

  int integer(const std::string& key) {
    const nlohmann::json& v = required(key);
    if (!v.is_number_integer()) throw ParseError("field '" + key + "' must be an integer", context_);
    return v.get<int>();
  }

  bool boolean(const std::string& key, std::optional<bool> fallback = std::nullopt) {
    const nlohmann::json* v = optional(key);
    if (!v) {
      if (lenient_ && fallback) return *fallback;
      throw ParseError("missing required field '" + key + "'", context_);
    }
    if (!v->is_boolean()) throw ParseError("field '" + key + "' must be a boolean", context_);
    return v->get<bool>();
  }

  void finish() const {
    if (lenient_) return;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key()))
        throw ParseError("unknown key '" + it.key() + "' (use --lenient to ignore)", context_);
    }
  }

  const std::string& context() const { return context_; }

 private:
  const nlohmann::json& obj_;
  std::string context_;
  bool lenient_;
  std::set<std::string> seen_;
};

BusKind parse_kind(const nlohmann::json& v, const std::string& context) {
  if (!v.is_string()) throw ParseError("bus 'kind' must be a string", context);
  const std::string s = v.get<std::string>();
  if (s == "slack") return BusKind::Slack;
  if (s == "pv") return BusKind::Pv;
  if (s == "pq") return BusKind::Pq;
  throw ParseError("bus 'kind' must be one of slack|pv|pq, got '" + s + "'", context);
}

}  // namespace

const Bus* GridSpec::find_bus(int id) const {
  for (const auto& b : buses)
    if (b.id == id) return &b;
  return nullptr;
}

const Branch* GridSpec::find_branch(int id) const {
  for (const auto& b : branches)
    if (b.id == id) return &b;
  return nullptr;
}

const Generator* GridSpec::find_generator(int id) const {
  for (const auto& g : generators)
    if (g.id == id) return &g;
  return nullptr;
}

int GridSpec::bus_index(int id) const {
  for (size_t i = 0; i < buses.size(); ++i)
    if (buses[i].id == id) return static_cast<int>(i);
  return -1;
}

std::string element_kind_name(ElementKind k) {
  return k == ElementKind::Branch ? "branch" : "generator";
}

GridSpec parse_grid(std::string_view text, bool lenient) {
  const nlohmann::json doc = util::parse_json(text);
  FieldReader top(doc, "top level", lenient);

  GridSpec spec;
  {
    const nlohmann::json& base = top.required("base_mva");
    if (!base.is_number() || base.get<double>() <= 0.0)
      throw ParseError("base_mva must be a positive number", "top level");
    spec.base_mva = base.get<double>();
  }

  const nlohmann::json& buses = top.required("buses");
  const nlohmann::json& branches = top.required("branches");
  const nlohmann::json& generators = top.required("generators");
  const nlohmann::json& loads = top.required("loads");
  top.finish();
  for (const auto* arr : {&buses, &branches, &generators, &loads}) {
    if (!arr->is_array()) throw ParseError("top-level collections must be arrays", "top level");
  }

  size_t idx = 0;
  for (const auto& j : buses) {
    FieldReader f(j, "buses[" + std::to_string(idx++) + "]", lenient);
    Bus b;
    b.id = f.integer("id");
    b.kind = parse_kind(f.required("kind"), f.context());
    if (const nlohmann::json* vs = f.optional("voltage_setpoint")) {
      if (!vs->is_number()) throw ParseError("voltage_setpoint must be a number", f.context());
      b.voltage_setpoint = vs->get<double>();
      if (b.kind == BusKind::Pq && !lenient)
        throw ParseError("voltage_setpoint is only valid on slack/pv buses", f.context());
    }
    const nlohmann::json& coord = f.required("coord");
    if (!coord.is_array() || coord.size() != 2 || !coord[0].is_number() || !coord[1].is_number())
      throw ParseError("coord must be a [x, y] number pair", f.context());
    b.x = coord[0].get<double>();
    b.y = coord[1].get<double>();
    if (const nlohmann::json* name = f.optional("name")) {
      if (!name->is_string()) throw ParseError("name must be a string", f.context());
      b.name = name->get<std::string>();
    }
    f.finish();
    spec.buses.push_back(std::move(b));
  }

  idx = 0;
  for (const auto& j : branches) {
    FieldReader f(j, "branches[" + std::to_string(idx++) + "]", lenient);
    Branch b;
    b.id = f.integer("id");
    b.from_bus = f.integer("from_bus");
    b.to_bus = f.integer("to_bus");
    b.r = f.number("r");
    b.x = f.number("x");
    b.b_shunt = f.number("b_shunt");
    b.rating = f.number("rating") / spec.base_mva;  // MVA -> p.u.
    b.in_service = f.boolean("in_service", true);
    f.finish();
    spec.branches.push_back(b);
  }

  idx = 0;
  for (const auto& j : generators) {
    FieldReader f(j, "generators[" + std::to_string(idx++) + "]", lenient);
    Generator g;
    g.id = f.integer("id");
    g.bus = f.integer("bus");
    g.p_set = f.number("p_set") / spec.base_mva;  // MW -> p.u.
    g.q_min = f.number("q_min") / spec.base_mva;
    g.q_max = f.number("q_max") / spec.base_mva;
    g.in_service = f.boolean("in_service", true);
    f.finish();
    spec.generators.push_back(g);
  }

  idx = 0;
  for (const auto& j : loads) {
    FieldReader f(j, "loads[" + std::to_string(idx++) + "]", lenient);
    Load l;
    l.id = f.integer("id");
    l.bus = f.integer("bus");
    l.p = f.number("p") / spec.base_mva;  // MW -> p.u.
    l.q = f.number("q") / spec.base_mva;
    f.finish();
    spec.loads.push_back(l);
  }

  validate_grid(spec);
  return spec;
}

void validate_grid(const GridSpec& spec) {
  if (spec.base_mva <= 0.0) throw ParseError("base_mva must be positive");

  std::set<int> bus_ids;
  for (const auto& b : spec.buses) {
    if (!bus_ids.insert(b.id).second)
      throw ParseError("duplicate bus id " + std::to_string(b.id));
    if (b.kind != BusKind::Pq) {
      if (!b.voltage_setpoint)
        throw ParseError("bus " + std::to_string(b.id) + " (slack/pv) needs voltage_setpoint");
      if (*b.voltage_setpoint <= 0.0)
        throw ParseError("bus " + std::to_string(b.id) + " voltage_setpoint must be > 0");
    }
    if (!std::isfinite(b.x) || !std::isfinite(b.y))
      throw ParseError("bus " + std::to_string(b.id) + " coordinates must be finite");
  }

  std::set<int> branch_ids;
  for (const auto& br : spec.branches) {
    const std::string ctx = "branch " + std::to_string(br.id);
    if (!branch_ids.insert(br.id).second) throw ParseError("duplicate branch id", ctx);
    if (!bus_ids.count(br.from_bus))
      throw ParseError("reference to unknown bus " + std::to_string(br.from_bus), ctx);
    if (!bus_ids.count(br.to_bus))
      throw ParseError("reference to unknown bus " + std::to_string(br.to_bus), ctx);
    if (br.from_bus == br.to_bus) throw ParseError("from_bus equals to_bus", ctx);
    if (br.r == 0.0 && br.x == 0.0) throw ParseError("zero-impedance branch", ctx);
    if (br.rating <= 0.0) throw ParseError("rating must be > 0", ctx);
  }

  std::set<int> gen_ids;
  for (const auto& g : spec.generators) {
    const std::string ctx = "generator " + std::to_string(g.id);
    if (!gen_ids.insert(g.id).second) throw ParseError("duplicate generator id", ctx);
    if (!bus_ids.count(g.bus))
      throw ParseError("reference to unknown bus " + std::to_string(g.bus), ctx);
    if (g.q_min > g.q_max) throw ParseError("q_min exceeds q_max", ctx);
  }

  std::set<int> load_ids;
  for (const auto& l : spec.loads) {
    const std::string ctx = "load " + std::to_string(l.id);
    if (!load_ids.insert(l.id).second) throw ParseError("duplicate load id", ctx);
    if (!bus_ids.count(l.bus))
      throw ParseError("reference to unknown bus " + std::to_string(l.bus), ctx);
    if (!std::isfinite(l.p) || !std::isfinite(l.q)) throw ParseError("load must be finite", ctx);
  }

  // Slack placement: at least one overall, at most one per island. Islands
  // without any slack are reported by connectivity(), not rejected here.
  int slack_total = 0;
  for (const auto& b : spec.buses)
    if (b.kind == BusKind::Slack) ++slack_total;
  if (!spec.buses.empty() && slack_total == 0) throw ParseError("no slack bus");
  for (const auto& island : connectivity(spec)) {
    int slack_here = 0;
    for (int id : island)
      if (spec.find_bus(id)->kind == BusKind::Slack) ++slack_here;
    if (slack_here > 1)
      throw ParseError("multiple slack buses in one island (bus " + std::to_string(island[0]) +
                       "'s island has " + std::to_string(slack_here) + ")");
  }
}

AdmittanceMatrix build_admittance(const GridSpec& spec) {
  AdmittanceMatrix y;
  const int n = static_cast<int>(spec.buses.size());
  y.g = Eigen::MatrixXd::Zero(n, n);
  y.b = Eigen::MatrixXd::Zero(n, n);
  y.row_to_bus_id.reserve(n);
  for (int i = 0; i < n; ++i) {
    y.row_to_bus_id.push_back(spec.buses[i].id);
    y.bus_id_to_row[spec.buses[i].id] = i;
  }

  for (const auto& br : spec.branches) {
    if (!br.in_service) continue;
    const int i = y.bus_id_to_row.at(br.from_bus);
    const int k = y.bus_id_to_row.at(br.to_bus);
    const std::complex<double> z(br.r, br.x);
    const std::complex<double> series = 1.0 / z;
    // pi-model: series admittance between terminals, half the charging
    // susceptance as a shunt at each end.
    y.g(i, k) -= series.real();
    y.b(i, k) -= series.imag();
    y.g(k, i) -= series.real();
    y.b(k, i) -= series.imag();
    y.g(i, i) += series.real();
    y.b(i, i) += series.imag() + br.b_shunt / 2.0;
    y.g(k, k) += series.real();
    y.b(k, k) += series.imag() + br.b_shunt / 2.0;
  }
  return y;
}

GridSpec apply_outage(const GridSpec& spec, const std::vector<ElementRef>& elements) {
  GridSpec out = spec;
  for (const auto& e : elements) {
    bool found = false;
    if (e.kind == ElementKind::Branch) {
      for (auto& br : out.branches)
        if (br.id == e.id) {
          br.in_service = false;
          found = true;
        }
    } else {
      for (auto& g : out.generators)
        if (g.id == e.id) {
          g.in_service = false;
          found = true;
        }
    }
    if (!found)
      throw ParseError("unknown " + element_kind_name(e.kind) + " id " + std::to_string(e.id));
  }
  return out;
}

std::vector<std::vector<int>> connectivity(const GridSpec& spec) {
  std::unordered_map<int, std::vector<int>> adj;
  for (const auto& b : spec.buses) adj[b.id];
  for (const auto& br : spec.branches) {
    if (!br.in_service) continue;
    adj[br.from_bus].push_back(br.to_bus);
    adj[br.to_bus].push_back(br.from_bus);
  }

  std::set<int> unvisited;
  for (const auto& b : spec.buses) unvisited.insert(b.id);
  std::vector<std::vector<int>> islands;
  while (!unvisited.empty()) {
    std::vector<int> island;
    std::vector<int> stack{*unvisited.begin()};
    unvisited.erase(unvisited.begin());
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      island.push_back(id);
      for (int next : adj[id]) {
        auto it = unvisited.find(next);
        if (it != unvisited.end()) {
          unvisited.erase(it);
          stack.push_back(next);
        }
      }
    }
    std::sort(island.begin(), island.end());
    islands.push_back(std::move(island));
  }
  std::sort(islands.begin(), islands.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return islands;
}

nlohmann::json grid_to_json(const GridSpec& spec) {
  nlohmann::json j;
  j["base_mva"] = spec.base_mva;
  j["bus_count"] = spec.buses.size();
  j["branch_count"] = spec.branches.size();
  j["generator_count"] = spec.generators.size();
  j["load_count"] = spec.loads.size();
  nlohmann::json islands = nlohmann::json::array();
  for (const auto& island : connectivity(spec)) islands.push_back(island);
  j["islands"] = islands;
  return j;
}

}  // namespace gridwatch::grid
