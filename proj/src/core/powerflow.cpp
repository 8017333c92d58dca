#include "core/powerflow.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

namespace gridwatch::pf {

using grid::BusKind;

namespace {

constexpr double kDivergenceNorm = 1e6;

struct Unknowns {
  std::vector<int> theta_buses;  // bus indices with a theta unknown (non-slack)
  std::vector<int> v_buses;      // bus indices with a V unknown (pq)
};

Unknowns classify(const grid::GridSpec& spec) {
  Unknowns u;
  for (size_t i = 0; i < spec.buses.size(); ++i) {
    if (spec.buses[i].kind != BusKind::Slack) u.theta_buses.push_back(static_cast<int>(i));
    if (spec.buses[i].kind == BusKind::Pq) u.v_buses.push_back(static_cast<int>(i));
  }
  return u;
}

// Net generator injections per bus, in GridSpec bus order.
void bus_injections(const grid::GridSpec& spec, const Controls& u, Eigen::VectorXd& pg,
                    Eigen::VectorXd& qg) {
  const int n = static_cast<int>(spec.buses.size());
  pg = Eigen::VectorXd::Zero(n);
  qg = Eigen::VectorXd::Zero(n);
  for (size_t gi = 0; gi < spec.generators.size(); ++gi) {
    const auto& g = spec.generators[gi];
    if (!g.in_service) continue;
    const int row = spec.bus_index(g.bus);
    pg(row) += u.p_gen(static_cast<Eigen::Index>(gi));
    qg(row) += u.q_gen(static_cast<Eigen::Index>(gi));
  }
}

void bus_loads(const grid::GridSpec& spec, Eigen::VectorXd& pl, Eigen::VectorXd& ql) {
  const int n = static_cast<int>(spec.buses.size());
  pl = Eigen::VectorXd::Zero(n);
  ql = Eigen::VectorXd::Zero(n);
  for (const auto& l : spec.loads) {
    const int row = spec.bus_index(l.bus);
    pl(row) += l.p;
    ql(row) += l.q;
  }
}

}  // namespace

Controls Controls::from_spec(const grid::GridSpec& spec) {
  Controls u;
  const auto n = static_cast<Eigen::Index>(spec.generators.size());
  u.p_gen = Eigen::VectorXd::Zero(n);
  u.q_gen = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) u.p_gen(i) = spec.generators[static_cast<size_t>(i)].p_set;
  return u;
}

SystemState flat_start(const grid::GridSpec& spec) {
  SystemState s;
  const auto n = static_cast<Eigen::Index>(spec.buses.size());
  s.v = Eigen::VectorXd::Ones(n);
  s.theta = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = spec.buses[static_cast<size_t>(i)];
    if (b.voltage_setpoint) s.v(i) = *b.voltage_setpoint;
  }
  return s;
}

Mismatch compute_mismatch(const SystemState& state, const Controls& u, const grid::GridSpec& spec,
                          const grid::AdmittanceMatrix& y) {
  const int n = static_cast<int>(spec.buses.size());
  if (state.v.size() != n || state.theta.size() != n || y.size() != n ||
      u.p_gen.size() != static_cast<Eigen::Index>(spec.generators.size()) ||
      u.q_gen.size() != u.p_gen.size())
    throw std::invalid_argument("compute_mismatch: dimension mismatch");

  Eigen::VectorXd pg, qg, pl, ql;
  bus_injections(spec, u, pg, qg);
  bus_loads(spec, pl, ql);

  Mismatch m;
  m.f_p = Eigen::VectorXd::Zero(n);
  m.f_q = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    double p = 0.0, q = 0.0;
    for (int k = 0; k < n; ++k) {
      const double g = y.g(i, k);
      const double b = y.b(i, k);
      if (g == 0.0 && b == 0.0 && i != k) continue;
      const double th = state.theta(i) - state.theta(k);
      const double vv = state.v(i) * state.v(k);
      p += vv * (g * std::cos(th) + b * std::sin(th));
      q += vv * (g * std::sin(th) - b * std::cos(th));
    }
    m.f_p(i) = -pg(i) + pl(i) + p;
    m.f_q(i) = -qg(i) + ql(i) + q;
  }
  return m;
}

double reduced_norm(const Mismatch& m, const grid::GridSpec& spec) {
  double norm = 0.0;
  for (size_t i = 0; i < spec.buses.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    if (spec.buses[i].kind != BusKind::Slack) norm = std::max(norm, std::abs(m.f_p(idx)));
    if (spec.buses[i].kind == BusKind::Pq) norm = std::max(norm, std::abs(m.f_q(idx)));
  }
  return norm;
}

Eigen::MatrixXd build_jacobian(const SystemState& state, const grid::GridSpec& spec,
                               const grid::AdmittanceMatrix& y) {
  const int n = static_cast<int>(spec.buses.size());
  const Unknowns unk = classify(spec);
  const int nth = static_cast<int>(unk.theta_buses.size());
  const int nv = static_cast<int>(unk.v_buses.size());

  // Calculated injections P_i, Q_i (network terms only; loads and generator
  // setpoints are constants and drop out of the partials).
  Eigen::VectorXd pcalc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd qcalc = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      const double g = y.g(i, k);
      const double b = y.b(i, k);
      if (g == 0.0 && b == 0.0 && i != k) continue;
      const double th = state.theta(i) - state.theta(k);
      const double vv = state.v(i) * state.v(k);
      pcalc(i) += vv * (g * std::cos(th) + b * std::sin(th));
      qcalc(i) += vv * (g * std::sin(th) - b * std::cos(th));
    }
  }

  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(nth + nv, nth + nv);

  auto dp_dtheta = [&](int i, int j) {
    if (i == j) return -qcalc(i) - y.b(i, i) * state.v(i) * state.v(i);
    const double th = state.theta(i) - state.theta(j);
    return state.v(i) * state.v(j) * (y.g(i, j) * std::sin(th) - y.b(i, j) * std::cos(th));
  };
  auto dp_dv = [&](int i, int j) {
    if (i == j) return pcalc(i) / state.v(i) + y.g(i, i) * state.v(i);
    const double th = state.theta(i) - state.theta(j);
    return state.v(i) * (y.g(i, j) * std::cos(th) + y.b(i, j) * std::sin(th));
  };
  auto dq_dtheta = [&](int i, int j) {
    if (i == j) return pcalc(i) - y.g(i, i) * state.v(i) * state.v(i);
    const double th = state.theta(i) - state.theta(j);
    return -state.v(i) * state.v(j) * (y.g(i, j) * std::cos(th) + y.b(i, j) * std::sin(th));
  };
  auto dq_dv = [&](int i, int j) {
    if (i == j) return qcalc(i) / state.v(i) - y.b(i, i) * state.v(i);
    const double th = state.theta(i) - state.theta(j);
    return state.v(i) * (y.g(i, j) * std::sin(th) - y.b(i, j) * std::cos(th));
  };

  for (int r = 0; r < nth; ++r) {
    const int i = unk.theta_buses[r];
    for (int c = 0; c < nth; ++c) jac(r, c) = dp_dtheta(i, unk.theta_buses[c]);
    for (int c = 0; c < nv; ++c) jac(r, nth + c) = dp_dv(i, unk.v_buses[c]);
  }
  for (int r = 0; r < nv; ++r) {
    const int i = unk.v_buses[r];
    for (int c = 0; c < nth; ++c) jac(nth + r, c) = dq_dtheta(i, unk.theta_buses[c]);
    for (int c = 0; c < nv; ++c) jac(nth + r, nth + c) = dq_dv(i, unk.v_buses[c]);
  }
  return jac;
}

SolveOutcome solve_newton(const grid::GridSpec& spec, const Controls& u, const SolveOptions& opts) {
  if (opts.tol <= 0.0 || opts.max_iter < 1)
    throw std::invalid_argument("solve_newton: tol must be > 0 and max_iter >= 1");

  // Every island must carry a slack bus before we iterate.
  const auto islands = grid::connectivity(spec);
  for (const auto& island : islands) {
    bool has_slack = false;
    for (int id : island)
      if (spec.find_bus(id)->kind == BusKind::Slack) has_slack = true;
    if (!has_slack) return Islanded{islands};
  }

  const grid::AdmittanceMatrix y = build_admittance(spec);
  const Unknowns unk = classify(spec);
  SystemState state = flat_start(spec);
  std::vector<double> trace;

  for (int iter = 0;; ++iter) {
    const Mismatch m = compute_mismatch(state, u, spec, y);
    const double norm = reduced_norm(m, spec);
    trace.push_back(norm);

    if (!std::isfinite(norm) || norm > kDivergenceNorm)
      return Diverged{iter, norm, "mismatch norm blew up", trace};
    if (norm <= opts.tol) {
      Converged c{state, iter, norm, trace, {}};
      // Post-solve reactive limit screening (limits are not enforced in the
      // iteration itself).
      Eigen::VectorXd pl, ql;
      bus_loads(spec, pl, ql);
      for (size_t i = 0; i < spec.buses.size(); ++i) {
        const auto& bus = spec.buses[i];
        if (bus.kind == BusKind::Pq) continue;
        double qmin = 0.0, qmax = 0.0;
        bool has_gen = false;
        for (const auto& g : spec.generators)
          if (g.in_service && g.bus == bus.id) {
            has_gen = true;
            qmin += g.q_min;
            qmax += g.q_max;
          }
        if (!has_gen) continue;
        // Reactive output required of the bus's generators at the solution.
        double qinj = 0.0;
        const auto idx = static_cast<Eigen::Index>(i);
        for (size_t k = 0; k < spec.buses.size(); ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          const double th = state.theta(idx) - state.theta(kk);
          qinj += state.v(idx) * state.v(kk) *
                  (y.g(idx, kk) * std::sin(th) - y.b(idx, kk) * std::cos(th));
        }
        const double qgen = qinj + ql(idx);
        if (qgen < qmin - 1e-9 || qgen > qmax + 1e-9) {
          c.warnings.push_back("bus " + std::to_string(bus.id) + ": reactive output " +
                               std::to_string(qgen) + " p.u. outside aggregate limits [" +
                               std::to_string(qmin) + ", " + std::to_string(qmax) + "]");
        }
      }
      return c;
    }
    if (iter >= opts.max_iter)
      return Diverged{iter, norm, "max iterations reached", trace};

    // Newton step: J * dx = -f over the reduced residuals.
    const int nth = static_cast<int>(unk.theta_buses.size());
    const int nv = static_cast<int>(unk.v_buses.size());
    Eigen::VectorXd f(nth + nv);
    for (int r = 0; r < nth; ++r) f(r) = m.f_p(unk.theta_buses[r]);
    for (int r = 0; r < nv; ++r) f(nth + r) = m.f_q(unk.v_buses[r]);

    if (nth + nv == 0) {
      // Slack-only network: nothing to solve, residual decides above.
      return Diverged{iter, norm, "no unknowns but residual above tolerance", trace};
    }

    const Eigen::MatrixXd jac = build_jacobian(state, spec, y);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible())
      return Diverged{iter, norm, "singular Jacobian", trace};
    const Eigen::VectorXd dx = lu.solve(-f);
    if (!dx.allFinite())
      return Diverged{iter, norm, "non-finite Newton step", trace};

    for (int r = 0; r < nth; ++r) state.theta(unk.theta_buses[r]) += dx(r);
    for (int r = 0; r < nv; ++r) state.v(unk.v_buses[r]) += dx(nth + r);
  }
}

std::vector<BranchFlow> line_flows(const SystemState& state, const grid::GridSpec& spec) {
  std::vector<BranchFlow> flows;
  flows.reserve(spec.branches.size());
  for (const auto& br : spec.branches) {
    BranchFlow f;
    f.branch_id = br.id;
    if (br.in_service) {
      const int i = spec.bus_index(br.from_bus);
      const int k = spec.bus_index(br.to_bus);
      const std::complex<double> vi = std::polar(state.v(i), state.theta(i));
      const std::complex<double> vk = std::polar(state.v(k), state.theta(k));
      const std::complex<double> series = 1.0 / std::complex<double>(br.r, br.x);
      const std::complex<double> shunt(0.0, br.b_shunt / 2.0);
      const std::complex<double> s_from = vi * std::conj(series * (vi - vk) + shunt * vi);
      const std::complex<double> s_to = vk * std::conj(series * (vk - vi) + shunt * vk);
      f.p_from = s_from.real();
      f.q_from = s_from.imag();
      f.p_to = s_to.real();
      f.q_to = s_to.imag();
      f.loading = std::max(std::abs(s_from), std::abs(s_to)) / br.rating;
    }
    flows.push_back(f);
  }
  return flows;
}

}  // namespace gridwatch::pf
