#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here deliberately avoids the library's computation paths: admittance and
// mismatch are rebuilt with straight loops and no sparsity shortcuts, so the
// implementation can be checked against a second route.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "core/grid.hpp"
#include "core/powerflow.hpp"
#include "core/util.hpp"

#ifndef GRIDWATCH_DATA_DIR
#error "GRIDWATCH_DATA_DIR must be defined by the build"
#endif

namespace testsupport {

inline std::string data_path(const std::string& name) {
  return std::string(GRIDWATCH_DATA_DIR) + "/" + name;
}

inline gridwatch::grid::GridSpec load_sevenbus() {
  return gridwatch::grid::parse_grid(gridwatch::util::read_file(data_path("sevenbus.json")));
}

// Self-cleaning scratch directory for store/persistence tests.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("gridwatch_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Y-bus assembled without std::complex: g = r/(r^2+x^2), b = -x/(r^2+x^2).
struct DenseAdmittance {
  Eigen::MatrixXd g;
  Eigen::MatrixXd b;
};

inline DenseAdmittance oracle_admittance(const gridwatch::grid::GridSpec& spec) {
  const int n = static_cast<int>(spec.buses.size());
  DenseAdmittance y{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  for (const auto& br : spec.branches) {
    if (!br.in_service) continue;
    int i = -1, k = -1;
    for (int r = 0; r < n; ++r) {
      if (spec.buses[r].id == br.from_bus) i = r;
      if (spec.buses[r].id == br.to_bus) k = r;
    }
    const double d = br.r * br.r + br.x * br.x;
    const double gs = br.r / d;
    const double bs = -br.x / d;
    y.g(i, k) -= gs;
    y.g(k, i) -= gs;
    y.b(i, k) -= bs;
    y.b(k, i) -= bs;
    y.g(i, i) += gs;
    y.g(k, k) += gs;
    y.b(i, i) += bs + br.b_shunt / 2.0;
    y.b(k, k) += bs + br.b_shunt / 2.0;
  }
  return y;
}

// Straight-loop residual evaluation over every k, no skipping.
inline gridwatch::pf::Mismatch oracle_mismatch(const gridwatch::pf::SystemState& state,
                                               const gridwatch::pf::Controls& u,
                                               const gridwatch::grid::GridSpec& spec) {
  const DenseAdmittance y = oracle_admittance(spec);
  const int n = static_cast<int>(spec.buses.size());
  gridwatch::pf::Mismatch m;
  m.f_p = Eigen::VectorXd::Zero(n);
  m.f_q = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    double pg = 0.0, qg = 0.0, pl = 0.0, ql = 0.0;
    for (size_t gi = 0; gi < spec.generators.size(); ++gi) {
      const auto& g = spec.generators[gi];
      if (g.in_service && g.bus == spec.buses[i].id) {
        pg += u.p_gen(static_cast<Eigen::Index>(gi));
        qg += u.q_gen(static_cast<Eigen::Index>(gi));
      }
    }
    for (const auto& l : spec.loads)
      if (l.bus == spec.buses[i].id) {
        pl += l.p;
        ql += l.q;
      }
    double p = 0.0, q = 0.0;
    for (int k = 0; k < n; ++k) {
      const double th = state.theta(i) - state.theta(k);
      const double vv = state.v(i) * state.v(k);
      p += vv * (y.g(i, k) * std::cos(th) + y.b(i, k) * std::sin(th));
      q += vv * (y.g(i, k) * std::sin(th) - y.b(i, k) * std::cos(th));
    }
    m.f_p(i) = -pg + pl + p;
    m.f_q(i) = -qg + ql + q;
  }
  return m;
}

// Brute-force reachability over in-service branches.
inline std::vector<std::vector<int>> oracle_islands(const gridwatch::grid::GridSpec& spec) {
  std::vector<int> ids;
  for (const auto& b : spec.buses) ids.push_back(b.id);
  std::vector<std::vector<int>> islands;
  std::vector<bool> done(ids.size(), false);
  for (size_t s = 0; s < ids.size(); ++s) {
    if (done[s]) continue;
    std::vector<int> island{ids[s]};
    done[s] = true;
    bool grew = true;
    while (grew) {
      grew = false;
      for (const auto& br : spec.branches) {
        if (!br.in_service) continue;
        const bool has_from =
            std::find(island.begin(), island.end(), br.from_bus) != island.end();
        const bool has_to = std::find(island.begin(), island.end(), br.to_bus) != island.end();
        if (has_from != has_to) {
          island.push_back(has_from ? br.to_bus : br.from_bus);
          for (size_t t = 0; t < ids.size(); ++t)
            if (ids[t] == island.back()) done[t] = true;
          grew = true;
        }
      }
    }
    std::sort(island.begin(), island.end());
    islands.push_back(island);
  }
  std::sort(islands.begin(), islands.end());
  return islands;
}

// Random connected grid with <= max_buses buses; bus 1 is the slack.
inline gridwatch::grid::GridSpec random_grid(std::mt19937& rng, int max_buses = 10) {
  using namespace gridwatch::grid;
  std::uniform_int_distribution<int> nbus_dist(2, max_buses);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = nbus_dist(rng);

  GridSpec spec;
  spec.base_mva = 100.0;
  for (int i = 0; i < n; ++i) {
    Bus b;
    b.id = i + 1;
    if (i == 0) {
      b.kind = BusKind::Slack;
      b.voltage_setpoint = 1.0;
    } else if (unit(rng) < 0.25) {
      b.kind = BusKind::Pv;
      b.voltage_setpoint = 0.98 + 0.06 * unit(rng);
    } else {
      b.kind = BusKind::Pq;
    }
    b.x = 10.0 * unit(rng);
    b.y = 10.0 * unit(rng);
    spec.buses.push_back(b);
  }

  int branch_id = 1;
  auto add_branch = [&](int from, int to) {
    Branch br;
    br.id = branch_id++;
    br.from_bus = from;
    br.to_bus = to;
    br.r = unit(rng) < 0.4 ? 0.0 : 0.05 * unit(rng);
    br.x = 0.05 + 0.2 * unit(rng);
    br.b_shunt = unit(rng) < 0.5 ? 0.0 : 0.04 * unit(rng);
    br.rating = 0.5 + 1.5 * unit(rng);
    spec.branches.push_back(br);
  };
  for (int i = 2; i <= n; ++i) {
    std::uniform_int_distribution<int> parent(1, i - 1);
    add_branch(parent(rng), i);
  }
  const int extras = static_cast<int>(unit(rng) * n);
  for (int e = 0; e < extras; ++e) {
    std::uniform_int_distribution<int> pick(1, n);
    const int a = pick(rng);
    const int b = pick(rng);
    if (a != b) add_branch(std::min(a, b), std::max(a, b));
  }

  int gen_id = 1, load_id = 1;
  for (int i = 1; i <= n; ++i) {
    const auto kind = spec.buses[static_cast<size_t>(i - 1)].kind;
    if (kind == BusKind::Pv || kind == BusKind::Slack || unit(rng) < 0.2) {
      Generator g;
      g.id = gen_id++;
      g.bus = i;
      g.p_set = 0.5 * unit(rng);
      g.q_min = -1.0;
      g.q_max = 1.0;
      spec.generators.push_back(g);
    }
    if (unit(rng) < 0.7) {
      Load l;
      l.id = load_id++;
      l.bus = i;
      l.p = 0.6 * unit(rng);
      l.q = -0.1 + 0.4 * unit(rng);
      spec.loads.push_back(l);
    }
  }
  return spec;
}

inline gridwatch::pf::SystemState random_state(std::mt19937& rng,
                                               const gridwatch::grid::GridSpec& spec) {
  std::uniform_real_distribution<double> vdist(0.9, 1.1);
  std::uniform_real_distribution<double> tdist(-0.5, 0.5);
  gridwatch::pf::SystemState s;
  const auto n = static_cast<Eigen::Index>(spec.buses.size());
  s.v = Eigen::VectorXd::Zero(n);
  s.theta = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.v(i) = vdist(rng);
    s.theta(i) = tdist(rng);
  }
  return s;
}

}  // namespace testsupport
