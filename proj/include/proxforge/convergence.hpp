#pragma once

// Convergence analysis of the two-relaxation solver: step-size bound,
// quadratic forms Q1/Q2, Fejer monotonicity, Lagrangian gap rates.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "prox.hpp"
#include "scheme.hpp"

namespace proxforge {

using DualVec = std::vector<SpaceElement>;

inline DualVec apply_all(const Problem& p, const SpaceElement& x) {
  DualVec out;
  out.reserve(p.G.size());
  for (const auto& t : p.G) out.push_back(t.op.apply(x));
  return out;
}

inline SpaceElement adjoint_sum(const Problem& p, const DualVec& y) {
  SpaceElement out(p.primal_space);
  for (std::size_t i = 0; i < p.G.size(); ++i) axpy_inplace(1.0, p.G[i].op.adjoint(y[i]), out);
  return out;
}

inline double inner(const DualVec& a, const DualVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += inner(a[i], b[i]);
  return s;
}

inline double norm_sq(const DualVec& a) {
  double s = 0.0;
  for (const auto& e : a) s += norm_sq(e);
  return s;
}

inline DualVec axpby(double alpha, const DualVec& a, double beta, const DualVec& b) {
  DualVec out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(axpby(alpha, a[i], beta, b[i]));
  return out;
}

inline DualVec zero_dual(const Problem& p) {
  DualVec out;
  for (const auto& t : p.G) out.emplace_back(t.op.range());
  return out;
}

// ---------------------------------------------------------------------------
// Parameter constraints

inline void require_relaxation_range(double a21, double c21) {
  if (!(a21 > 0.0 && a21 < 2.0 && c21 > 0.0 && c21 < 2.0))
    throw ArgumentError("relaxation parameters must lie in (0, 2)");
}

/// a21^2 (2 - a21)(2 - c21) / (a21 + c21 - a21 c21)^2
inline double bound_K(double a21, double c21) {
  require_relaxation_range(a21, c21);
  // Written as (a(2-c)/s)(a(2-a)/s) with both factors expanded around 1, so
  // that a21 = c21 gives exactly 1.
  const double s = a21 + c21 - a21 * c21;
  const double d = a21 - c21;
  return (1.0 + d / s) * (1.0 + d * (1.0 - a21) / s);
}

struct EstimationResult {
  bool positivity = false;  // a21 + c21 > a21 c21
  double ratio = 0.0;       // a21 c21 (2 - a21)(2 - c21) / (a21 + c21 - a21 c21)^2
};

inline EstimationResult estimation_inequalities(double a21, double c21) {
  require_relaxation_range(a21, c21);
  const double s = a21 + c21 - a21 * c21;
  return {s > 0.0, a21 * c21 * (2.0 - a21) * (2.0 - c21) / (s * s)};
}

struct ConvergentParams {
  double a21 = 1.0;
  double c21 = 1.0;
  double sigma = 0.5;
  double tau = 0.5;
};

inline bool is_convergent(const ConvergentParams& p, double L_norm) {
  if (!(p.a21 > 0.0 && p.a21 < 2.0 && p.c21 > 0.0 && p.c21 < 2.0)) return false;
  if (!(p.sigma > 0.0 && p.tau > 0.0)) return false;
  return p.sigma * p.tau * L_norm * L_norm < bound_K(p.a21, p.c21);
}

inline void validate(const ConvergentParams& p, double L_norm) {
  if (!is_convergent(p, L_norm))
    throw ArgumentError("parameters violate 0 < a21, c21 < 2 or sigma tau ||L||^2 < K");
}

inline SchemeMatrices to_scheme(const ConvergentParams& p) {
  return preset_new_solver(p.sigma, p.tau, p.a21, p.c21);
}

// ---------------------------------------------------------------------------
// Quadratic forms

struct QuadFormEval {
  double Q1 = 0.0;
  double Q2 = 0.0;
  double C1 = 0.0;
  double D1 = 0.0;
  double C2 = 0.0;
  double D2 = 0.0;
  bool bounds_hold = false;  // Q_i >= C_i ||dx||^2 and Q_i >= D_i ||dy||^2 up to rounding
};

/// Positivity constants of Q1, Q2 for an operator of norm L_norm.
inline QuadFormEval quad_constants(const ConvergentParams& p, double L_norm) {
  const double a = p.a21, c = p.c21, s = p.sigma, t = p.tau;
  const double stl = s * t * L_norm * L_norm;
  const double m = a + c - a * c;
  const double num2 = a * a * (2.0 - a) * (2.0 - c) - m * m * stl;
  QuadFormEval q;
  q.C1 = (a - c * stl) / (2.0 * t * a * c);
  q.D1 = (a - c * stl) / (2.0 * s * a * a);
  q.C2 = num2 / (2.0 * t * a * a * (2.0 - a));
  q.D2 = num2 / (2.0 * s * a * a * (2.0 - c));
  return q;
}

inline double Q1_value(const ConvergentParams& p, double dx_sq, double dy_sq, double y_Lx) {
  return dx_sq / (2.0 * p.tau * p.c21) + dy_sq / (2.0 * p.sigma * p.a21) - y_Lx / p.a21;
}

inline double Q2_value(const ConvergentParams& p, double dx_sq, double dy_sq, double y_Lx) {
  const double a = p.a21, c = p.c21;
  return (2.0 - c) / (2.0 * p.tau) * dx_sq + (2.0 - a) / (2.0 * p.sigma) * dy_sq -
         (a + c - a * c) / a * y_Lx;
}

inline QuadFormEval eval_Q(const ConvergentParams& p, const Problem& problem, double L_norm,
                           const SpaceElement& dx, const DualVec& dy) {
  validate(p, L_norm);
  QuadFormEval q = quad_constants(p, L_norm);
  const double dx_sq = norm_sq(dx);
  const double dy_sq = norm_sq(dy);
  const double yLx = inner(dy, apply_all(problem, dx));
  q.Q1 = Q1_value(p, dx_sq, dy_sq, yLx);
  q.Q2 = Q2_value(p, dx_sq, dy_sq, yLx);
  const double slack = 1e-12 * (1.0 + std::abs(q.Q1) + std::abs(q.Q2) +
                                (dx_sq / p.tau + dy_sq / p.sigma));
  q.bounds_hold = q.Q1 >= q.C1 * dx_sq - slack && q.Q1 >= q.D1 * dy_sq - slack &&
                  q.Q2 >= q.C2 * dx_sq - slack && q.Q2 >= q.D2 * dy_sq - slack;
  return q;
}

// ---------------------------------------------------------------------------
// The solver written in its analysis variables

/// Iterate pair (x_n, y_{n+1}).
struct AnalysisIterate {
  SpaceElement x;
  DualVec y;
};

/// One sweep from (x_n, y_{n+1}):
///   p_n     = prox^tau_F(x_n - tau L* y_{n+1})
///   x_{n+1} = x_n + c21 (p_n - x_n)
///   q_{n+1} = prox^sigma_{G*}(y_{n+1} + sigma L(p_n + c21/a21 (p_n - x_n)))
///   y_{n+2} = y_{n+1} + a21 (q_{n+1} - y_{n+1})
struct AnalysisStep {
  SpaceElement p;
  DualVec q;
  AnalysisIterate next;
};

inline AnalysisStep analysis_step(const Problem& problem, const ConvergentParams& prm,
                                  const AnalysisIterate& it) {
  const auto& [x, y] = it;
  SpaceElement p = prox(problem.F, prm.tau, axpby(1.0, x, -prm.tau, adjoint_sum(problem, y)));
  SpaceElement xn = axpby(1.0 - prm.c21, x, prm.c21, p);
  const double r = prm.c21 / prm.a21;
  const auto ext = axpby(1.0 + r, p, -r, x);
  DualVec q, yn;
  for (std::size_t i = 0; i < problem.G.size(); ++i) {
    const auto& t = problem.G[i];
    q.push_back(prox_conjugate(t.g, prm.sigma, axpby(1.0, y[i], prm.sigma, t.op.apply(ext))));
    yn.push_back(axpby(1.0 - prm.a21, y[i], prm.a21, q.back()));
  }
  return {std::move(p), std::move(q), {std::move(xn), std::move(yn)}};
}

inline double Q1_at(const ConvergentParams& prm, const Problem& problem, const SpaceElement& dx,
                    const DualVec& dy) {
  return Q1_value(prm, norm_sq(dx), norm_sq(dy), inner(dy, apply_all(problem, dx)));
}

inline double Q2_at(const ConvergentParams& prm, const Problem& problem, const SpaceElement& dx,
                    const DualVec& dy) {
  return Q2_value(prm, norm_sq(dx), norm_sq(dy), inner(dy, apply_all(problem, dx)));
}

// ---------------------------------------------------------------------------
// Checks

struct FejerTrace {
  std::vector<double> Q1;              // Q1(x_n - xbar, y_{n+1} - ybar), n = 0..steps
  std::vector<double> Q2_displacement; // Q2(p_n - x_n, q_{n+1} - y_{n+1}), n = 0..steps-1
  double tol = 0.0;
  double worst_violation = -std::numeric_limits<double>::infinity();
  bool holds = true;
};

inline constexpr double kReferenceResidualGate = 1e-6;

/// Runs `steps` sweeps from (x0, y1) = (0, 0) and records the per-step
/// decrease of Q1 against Q2 of the displacement. Tolerance is
/// 1e-8 (1 + Q1 at start).
inline FejerTrace fejer_check(const Problem& problem, const ConvergentParams& prm, double L_norm,
                              std::size_t steps, const SpaceElement& xbar, const DualVec& ybar) {
  validate(prm, L_norm);
  const double res = fixed_point_residual(problem, {prm.sigma}, prm.tau, xbar, ybar);
  if (!(res <= kReferenceResidualGate))
    throw ArgumentError("fejer_check: reference residual " + std::to_string(res) +
                        " exceeds the gate");
  FejerTrace tr;
  AnalysisIterate it{SpaceElement(problem.primal_space), zero_dual(problem)};
  auto q1 = [&](const AnalysisIterate& a) {
    return Q1_at(prm, problem, a.x - xbar, axpby(1.0, a.y, -1.0, ybar));
  };
  tr.Q1.push_back(q1(it));
  tr.tol = 1e-8 * (1.0 + tr.Q1.front());
  for (std::size_t n = 0; n < steps; ++n) {
    auto st = analysis_step(problem, prm, it);
    const double q2 = Q2_at(prm, problem, st.p - it.x, axpby(1.0, st.q, -1.0, it.y));
    it = std::move(st.next);
    tr.Q1.push_back(q1(it));
    tr.Q2_displacement.push_back(q2);
    const double excess = (tr.Q1[n + 1] - tr.Q1[n]) + q2;
    tr.worst_violation = std::max(tr.worst_violation, excess);
    if (!(excess <= tr.tol)) tr.holds = false;
  }
  return tr;
}

/// <Lx, y> + F(x) - G*(y); -inf when y is outside dom G*, +inf when F(x) is.
inline double lagrangian(const Problem& problem, const SpaceElement& x, const DualVec& y) {
  double conj = 0.0;
  for (std::size_t i = 0; i < problem.G.size(); ++i) conj += conjugate_value(problem.G[i].g, y[i]);
  const double fx = value(problem.F, x);
  if (std::isinf(conj) && std::isinf(fx)) return std::numeric_limits<double>::quiet_NaN();
  return inner(apply_all(problem, x), y) + fx - conj;
}

struct GapCheck {
  double lhs_ergodic = 0.0;  // L(mean p, y) - L(x, mean q)
  double lhs_min = 0.0;      // min_n L(p_n, y) - L(x, q_{n+1})
  double rhs = 0.0;          // Q1(x0 - x, y1 - y) / N
};

/// Runs N sweeps from (x0, y1) = (0, 0) and evaluates both gap forms at the
/// probe (x, y).
inline GapCheck ergodic_gap_check(const Problem& problem, const ConvergentParams& prm,
                                  double L_norm, std::size_t N, const SpaceElement& probe_x,
                                  const DualVec& probe_y) {
  validate(prm, L_norm);
  if (N == 0) throw ArgumentError("ergodic_gap_check: N must be >= 1");
  AnalysisIterate it{SpaceElement(problem.primal_space), zero_dual(problem)};
  GapCheck g;
  g.rhs = Q1_at(prm, problem, it.x - probe_x, axpby(1.0, it.y, -1.0, probe_y)) /
          static_cast<double>(N);
  SpaceElement p_sum(problem.primal_space);
  DualVec q_sum = zero_dual(problem);
  g.lhs_min = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < N; ++n) {
    auto st = analysis_step(problem, prm, it);
    g.lhs_min = std::min(g.lhs_min, lagrangian(problem, st.p, probe_y) -
                                        lagrangian(problem, probe_x, st.q));
    axpy_inplace(1.0, st.p, p_sum);
    for (std::size_t i = 0; i < q_sum.size(); ++i) axpy_inplace(1.0, st.q[i], q_sum[i]);
    it = std::move(st.next);
  }
  const double inv = 1.0 / static_cast<double>(N);
  DualVec q_mean;
  for (const auto& q : q_sum) q_mean.push_back(scaled(inv, q));
  g.lhs_ergodic =
      lagrangian(problem, scaled(inv, p_sum), probe_y) - lagrangian(problem, probe_x, q_mean);
  return g;
}

struct StrongConvergenceTrace {
  std::vector<double> partial_sums;  // sum_{n<k} ||p_n - xbar||^2, k = 1..steps
  double bound = 0.0;                // Q1(x0 - xbar, y1 - ybar) / mu
};

/// Requires F = base + mu/2 ||. - c||^2.
inline StrongConvergenceTrace strong_convergence_check(const Problem& problem,
                                                       const ConvergentParams& prm,
                                                       double L_norm, std::size_t steps,
                                                       const SpaceElement& xbar,
                                                       const DualVec& ybar) {
  if (problem.F.kind() != ProxFn::Kind::strongly_convex_shift)
    throw ArgumentError("strong_convergence_check: F must be strongly convex");
  const double mu = problem.F.mu();
  if (!(mu > 0.0)) throw ArgumentError("strong_convergence_check: mu must be > 0");
  validate(prm, L_norm);
  AnalysisIterate it{SpaceElement(problem.primal_space), zero_dual(problem)};
  StrongConvergenceTrace tr;
  tr.bound = Q1_at(prm, problem, it.x - xbar, axpby(1.0, it.y, -1.0, ybar)) / mu;
  double sum = 0.0;
  for (std::size_t n = 0; n < steps; ++n) {
    auto st = analysis_step(problem, prm, it);
    sum += norm_sq(st.p - xbar);
    tr.partial_sums.push_back(sum);
    it = std::move(st.next);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Reference solutions

struct ReferenceSolution {
  SpaceElement x;
  DualVec y;
  double residual = 0.0;
  std::size_t iterations = 0;
};

inline constexpr std::size_t kReferenceIterations = 10000;

/// PDHG with theta = 1, sigma = tau = 0.95 / ||L||, doubling the iteration
/// count (up to 8x) until the fixed-point residual drops below the gate.
inline ReferenceSolution reference_solution(const Problem& problem, double L_norm,
                                            std::size_t iters = kReferenceIterations,
                                            double gate = kReferenceResidualGate) {
  if (!(L_norm > 0.0)) throw ArgumentError("reference_solution: L_norm must be > 0");
  const double s = 0.95 / L_norm;
  const auto params = preset_pdhg(s, s, 1.0);
  SolverState st = zero_state(problem, 2, 2);
  std::size_t done = 0;
  for (std::size_t budget = iters; budget <= 8 * iters; budget *= 2) {
    st = run(problem, params, std::move(st), budget - done);
    done = budget;
    DualVec y;
    for (const auto& d : st.dual) y.push_back(d.front());
    // primal[1] is the plain iterate; primal[0] carries the extrapolation.
    const double res = fixed_point_residual(problem, {s}, s, st.primal[1], y);
    if (res <= gate) return {st.primal[1], std::move(y), res, done};
    if (budget == 8 * iters) {
      std::ostringstream msg;
      msg << "reference solve did not reach the residual gate " << gate << ": residual "
          << res << " after " << done << " iterations (base " << iters
          << ", 8x cap); raise the base iteration count";
      throw NumericalError(msg.str());
    }
  }
  throw NumericalError("reference solve failed");
}

}  // namespace proxforge
