#pragma once

#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "core/grid.hpp"

namespace gridwatch::pf {

// State vector x = [V, theta], aligned with GridSpec::buses order.
struct SystemState {
  Eigen::VectorXd v;      // per-unit magnitudes
  Eigen::VectorXd theta;  // radians
};

// Controls u: per-generator outputs, aligned with GridSpec::generators order.
// q_gen is an input at pq buses and a solved quantity at pv/slack buses.
struct Controls {
  Eigen::VectorXd p_gen;
  Eigen::VectorXd q_gen;

  static Controls from_spec(const grid::GridSpec& spec);
};

// Per-bus residuals of the power balance at a candidate state.
struct Mismatch {
  Eigen::VectorXd f_p;
  Eigen::VectorXd f_q;
};

struct SolveOptions {
  double tol = 1e-8;  // infinity-norm mismatch tolerance, p.u.
  int max_iter = 20;
  bool flat_start = true;  // no warm-start path exists yet; kept for clarity
};

struct Converged {
  SystemState state;
  int iterations = 0;
  double final_mismatch_norm = 0.0;
  std::vector<double> norm_trace;  // mismatch norm per iteration, incl. final
  std::vector<std::string> warnings;
};

struct Diverged {
  int iterations = 0;
  double mismatch_norm = 0.0;
  std::string diagnostic;
  std::vector<double> norm_trace;
};

struct Islanded {
  std::vector<std::vector<int>> islands;
};

using SolveOutcome = std::variant<Converged, Diverged, Islanded>;

// Evaluates the real/reactive power-balance residuals at (state, u):
//   f_p[i] = -Pg_i + Pl_i + sum_k Vi*Vk*(G_ik*cos(th_i - th_k) + B_ik*sin(th_i - th_k))
//   f_q[i] = -Qg_i + Ql_i + sum_k Vi*Vk*(G_ik*sin(th_i - th_k) - B_ik*cos(th_i - th_k))
// The sum runs over buses k with a nonzero admittance entry, including k = i.
Mismatch compute_mismatch(const SystemState& state, const Controls& u, const grid::GridSpec& spec,
                          const grid::AdmittanceMatrix& y);

// Infinity norm over the residuals the Newton solve drives to zero: f_p at
// non-slack buses and f_q at pq buses.
double reduced_norm(const Mismatch& m, const grid::GridSpec& spec);

// Analytic partials of the reduced mismatch in the standard block layout
// [df_p/dtheta, df_p/dV; df_q/dtheta, df_q/dV]. Rows: f_p at non-slack buses
// then f_q at pq buses; columns: theta at non-slack buses then V at pq buses,
// both in GridSpec bus order.
Eigen::MatrixXd build_jacobian(const SystemState& state, const grid::GridSpec& spec,
                               const grid::AdmittanceMatrix& y);

SolveOutcome solve_newton(const grid::GridSpec& spec, const Controls& u,
                          const SolveOptions& opts = {});

struct BranchFlow {
  int branch_id = 0;
  double p_from = 0.0;
  double q_from = 0.0;
  double p_to = 0.0;
  double q_to = 0.0;
  double loading = 0.0;  // max terminal apparent power / rating
};

// Pi-model terminal flows at a converged state. Out-of-service branches carry
// zero flow.
std::vector<BranchFlow> line_flows(const SystemState& state, const grid::GridSpec& spec);

SystemState flat_start(const grid::GridSpec& spec);

}  // namespace gridwatch::pf
