#pragma once

// Matrix-parametrized primal-dual iteration. One step, per dual block i:
//
//   [y^1..y^M]_i <- (A_i (x) Id) diag(prox^{sigma_i}_{G_i*}, Id) (B_i (x) Id) [L_i x^1, y^2_i..y^M_i]
//
// followed by the primal update
//
//   [x^1..x^N]   <- (C (x) Id) diag(prox^tau_F, Id) (D (x) Id) [sum_i L_i* y^1_i, x^2..x^N]
//
// so each L_i and each L_i* is evaluated exactly once per step.

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "linops.hpp"
#include "prox.hpp"
#include "tensor.hpp"

namespace proxforge {

struct DualTerm {
  ProxFn g;
  LinOp op;
};

/// min_x F(x) + sum_i G_i(L_i x)
struct Problem {
  ProxFn F;
  std::vector<DualTerm> G;
  Space primal_space;

  Problem(ProxFn f, std::vector<DualTerm> g, Space primal)
      : F(std::move(f)), G(std::move(g)), primal_space(std::move(primal)) {
    for (const auto& t : G)
      if (t.op.domain() != primal_space)
        throw DimensionError("Problem: operator domain differs from primal space");
  }

  double objective(const SpaceElement& x) const {
    double v = value(F, x);
    for (const auto& t : G) v += value(t.g, t.op.apply(x));
    return v;
  }

  /// Stacked operator x -> (L_1 x, ..., L_m x).
  StackedOp stacked() const {
    std::vector<LinOp> ops;
    for (const auto& t : G) ops.push_back(t.op);
    return StackedOp(std::move(ops));
  }
};

struct DualBlockParams {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  double sigma = 1.0;
};

struct SchemeStage {
  /// One entry shared by all dual blocks, or one entry per block.
  std::vector<DualBlockParams> dual;
  Eigen::MatrixXd C;
  Eigen::MatrixXd D;
  double tau = 1.0;

  const DualBlockParams& block(std::size_t i) const {
    return dual.size() == 1 ? dual.front() : dual.at(i);
  }
};

/// Parameters of the iteration. Stage n mod stages.size() is used at step n,
/// so a single stage means constant matrices.
struct SchemeMatrices {
  std::size_t N = 2;
  std::size_t M = 2;
  std::vector<SchemeStage> stages;

  const SchemeStage& at(std::size_t n) const { return stages[n % stages.size()]; }

  void validate(std::size_t n_blocks = 0) const {
    if (N == 0 || M == 0) throw DimensionError("SchemeMatrices: N and M must be >= 1");
    if (stages.empty()) throw DimensionError("SchemeMatrices: no stages");
    auto check = [](const Eigen::MatrixXd& m, std::size_t k, const char* what) {
      if (static_cast<std::size_t>(m.rows()) != k || static_cast<std::size_t>(m.cols()) != k)
        throw DimensionError(std::string("SchemeMatrices: ") + what + " has wrong size");
      if (!m.allFinite()) throw NumericalError(std::string("SchemeMatrices: ") + what + " not finite");
    };
    for (const auto& s : stages) {
      check(s.C, N, "C");
      check(s.D, N, "D");
      if (!(s.tau > 0.0) || !std::isfinite(s.tau)) throw ArgumentError("SchemeMatrices: tau must be > 0");
      if (s.dual.empty()) throw DimensionError("SchemeMatrices: no dual parameters");
      if (n_blocks != 0 && s.dual.size() != 1 && s.dual.size() != n_blocks)
        throw DimensionError("SchemeMatrices: dual parameter count does not match problem");
      for (const auto& d : s.dual) {
        check(d.A, M, "A");
        check(d.B, M, "B");
        if (!(d.sigma > 0.0) || !std::isfinite(d.sigma))
          throw ArgumentError("SchemeMatrices: sigma must be > 0");
      }
    }
  }
};

struct SolverState {
  std::vector<SpaceElement> primal;             // x^1 .. x^N
  std::vector<std::vector<SpaceElement>> dual;  // per block: y^1 .. y^M
  std::size_t iter = 0;

  const SpaceElement& lead_primal() const { return primal.front(); }
};

/// All memories at the zero vector.
inline SolverState zero_state(const Problem& p, std::size_t N, std::size_t M) {
  SolverState s;
  s.primal.assign(N, SpaceElement(p.primal_space));
  for (const auto& t : p.G) s.dual.emplace_back(M, SpaceElement(t.op.range()));
  return s;
}

inline void check_state(const Problem& p, const SchemeMatrices& m, const SolverState& s) {
  if (s.primal.size() != m.N) throw DimensionError("state: primal memory count differs from N");
  if (s.dual.size() != p.G.size()) throw DimensionError("state: dual block count differs from problem");
  for (const auto& x : s.primal)
    if (x.space() != p.primal_space) throw DimensionError("state: primal space mismatch");
  for (std::size_t i = 0; i < p.G.size(); ++i) {
    if (s.dual[i].size() != m.M) throw DimensionError("state: dual memory count differs from M");
    for (const auto& y : s.dual[i])
      if (y.space() != p.G[i].op.range()) throw DimensionError("state: dual space mismatch");
  }
}

/// out_r = sum_k mat(r, k) in_k
inline std::vector<SpaceElement> combine(const Eigen::MatrixXd& mat,
                                         const std::vector<SpaceElement>& in) {
  std::vector<SpaceElement> out;
  out.reserve(in.size());
  for (Eigen::Index r = 0; r < mat.rows(); ++r) {
    SpaceElement acc(in.front().space());
    auto a = acc.data();
    for (Eigen::Index k = 0; k < mat.cols(); ++k) {
      const double c = mat(r, k);
      if (c == 0.0) continue;
      const auto v = in[static_cast<std::size_t>(k)].data();
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += c * v[j];
    }
    out.push_back(std::move(acc));
  }
  return out;
}

/// Intermediate values of one step, kept for reverse-mode differentiation.
struct StepTape {
  struct Half {
    std::vector<SpaceElement> input;     // before the first matrix
    std::vector<SpaceElement> mixed;     // after the first matrix, prox applied to slot 0
    SpaceElement prox_arg{make_space({1}, "unset")};  // slot 0 before the prox
  };
  std::vector<Half> dual;  // per block
  Half primal;
  std::size_t stage = 0;
};

inline SolverState step(const Problem& problem, const SchemeMatrices& params,
                        const SolverState& state, StepTape* tape = nullptr) {
  check_state(problem, params, state);
  const SchemeStage& st = params.at(state.iter);
  if (tape) {
    tape->dual.assign(problem.G.size(), {});
    tape->stage = state.iter % params.stages.size();
  }

  SolverState next;
  next.iter = state.iter + 1;
  next.dual.resize(problem.G.size());
  SpaceElement back(problem.primal_space);
  for (std::size_t i = 0; i < problem.G.size(); ++i) {
    const auto& term = problem.G[i];
    const auto& bp = st.block(i);
    std::vector<SpaceElement> input;
    input.reserve(params.M);
    input.push_back(term.op.apply(state.primal.front()));
    for (std::size_t k = 1; k < params.M; ++k) input.push_back(state.dual[i][k]);
    auto mixed = combine(bp.B, input);
    SpaceElement arg = mixed.front();
    mixed.front() = prox_conjugate(term.g, bp.sigma, arg);
    next.dual[i] = combine(bp.A, mixed);
    axpy_inplace(1.0, term.op.adjoint(next.dual[i].front()), back);
    if (tape) tape->dual[i] = {std::move(input), std::move(mixed), std::move(arg)};
  }

  std::vector<SpaceElement> input;
  input.reserve(params.N);
  input.push_back(std::move(back));
  for (std::size_t k = 1; k < params.N; ++k) input.push_back(state.primal[k]);
  auto mixed = combine(st.D, input);
  SpaceElement arg = mixed.front();
  mixed.front() = prox(problem.F, st.tau, arg);
  next.primal = combine(st.C, mixed);
  if (tape) tape->primal = {std::move(input), std::move(mixed), std::move(arg)};
  return next;
}

/// Runs `steps` iterations from `state`.
inline SolverState run(const Problem& problem, const SchemeMatrices& params,
                       SolverState state, std::size_t steps) {
  params.validate(problem.G.size());
  for (std::size_t n = 0; n < steps; ++n) state = step(problem, params, state);
  return state;
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline Eigen::MatrixXd mat2(double a, double b, double c, double d) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, c, d;
  return m;
}

inline SchemeMatrices two_by_two(Eigen::MatrixXd A, Eigen::MatrixXd B, Eigen::MatrixXd C,
                                 Eigen::MatrixXd D, double sigma, double tau) {
  SchemeMatrices m;
  m.N = m.M = 2;
  m.stages.push_back({{{std::move(A), std::move(B), sigma}}, std::move(C), std::move(D), tau});
  return m;
}

inline void require_steps(double sigma, double tau) {
  if (!(sigma > 0.0) || !(tau > 0.0)) throw ArgumentError("step sizes must be > 0");
}

}  // namespace detail

/// Primal-dual hybrid gradient with extrapolation theta.
inline SchemeMatrices preset_pdhg(double sigma, double tau, double theta) {
  detail::require_steps(sigma, tau);
  return detail::two_by_two(detail::mat2(1, 0, 1, 0), detail::mat2(sigma, 1, 0, 1),
                            detail::mat2(1 + theta, -theta, 1, 0), detail::mat2(-tau, 1, 0, 1),
                            sigma, tau);
}

/// Primal-dual Douglas-Rachford with constant relaxation lambda.
inline SchemeMatrices preset_dr(double sigma, double tau, double lambda,
                                bool require_convergent = false) {
  detail::require_steps(sigma, tau);
  if (require_convergent && !(lambda > 0.0 && lambda < 2.0))
    throw ArgumentError("preset_dr: lambda must lie in (0, 2)");
  return detail::two_by_two(detail::mat2(lambda, 1 - lambda, lambda, 1 - lambda),
                            detail::mat2(sigma, 1, 0, 1),
                            detail::mat2(2, -1, lambda, 1 - lambda), detail::mat2(-tau, 1, 0, 1),
                            sigma, tau);
}

/// The convergent two-relaxation solver with parameters a21, c21.
inline SchemeMatrices preset_new_solver(double sigma, double tau, double a21, double c21) {
  detail::require_steps(sigma, tau);
  if (a21 == 0.0) throw ArgumentError("preset_new_solver: a21 must be nonzero");
  const double r = c21 / a21;
  return detail::two_by_two(detail::mat2(a21, 1 - a21, a21, 1 - a21), detail::mat2(sigma, 1, 0, 1),
                            detail::mat2(1 + r, -r, c21, 1 - c21), detail::mat2(-tau, 1, 0, 1),
                            sigma, tau);
}

/// Forward-backward-forward embedding with N = M = 3: two engine steps per
/// FBF iteration, step length gamma[k] for the k-th iteration. Entries that
/// do not influence the iterates are set to zero.
inline SchemeMatrices preset_fbf(const std::vector<double>& gamma) {
  if (gamma.empty()) throw ArgumentError("preset_fbf: empty step schedule");
  SchemeMatrices m;
  m.N = m.M = 3;
  for (double g : gamma) {
    if (!(g > 0.0)) throw ArgumentError("preset_fbf: step lengths must be > 0");
    Eigen::MatrixXd Ae(3, 3), Be(3, 3), Ce(3, 3), De(3, 3);
    Ae << 0, 0, 1, 0, 0, 0, 1, 0, 0;
    Be << g, 0, 1, 1, 0, 0, 0, 0, 1;
    Ce << 1, 0, -1, 0, 0, 0, 1, 1, 0;
    De << -g, 0, 1, g, 0, 0, 0, 0, 1;
    Eigen::MatrixXd Ao(3, 3), Bo(3, 3), Co(3, 3), Do(3, 3);
    Ao << 0, 1, 0, 0, 0, 0, 0, 0, 1;
    Bo << 0, 0, 0, 0, 0, 1, g, 0, 1;
    Co << 0, 0, 1, 0, 0, 0, 0, 0, 1;
    Do << 0, 0, 0, 0, 0, 0, -g, 0, 1;
    m.stages.push_back({{{Ae, Be, g}}, Ce, De, g});
    m.stages.push_back({{{Ao, Bo, g}}, Co, Do, g});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Fixed points

struct FixedPointCheck {
  bool ok = true;
  std::vector<std::string> violations;
};

/// Checks the conditions under which the fixed points of a 2x2 scheme
/// coincide with the primal-dual solutions for every problem:
///   a21 + a22 = 1, b12 = 1, b11 (c11 + c12) = sigma,
///   c21 + c22 = 1, d12 = 1, d11 (a11 + a12) = -tau,
/// plus the embedding structure (second rows of B and D equal (0, 1)) and
/// a21, c21 != 0. Equalities are tested to rel_tol relative to magnitude.
inline FixedPointCheck check_fixed_point_conditions(
    const SchemeMatrices& m, double rel_tol = 4.0 * std::numeric_limits<double>::epsilon()) {
  FixedPointCheck r;
  auto fail = [&](std::string what) {
    r.ok = false;
    r.violations.push_back(std::move(what));
  };
  if (m.N != 2 || m.M != 2) {
    fail("not a 2x2 scheme");
    return r;
  }
  auto eq = [&](double a, double b, const char* what) {
    if (std::abs(a - b) > rel_tol * std::max({1.0, std::abs(a), std::abs(b)})) fail(what);
  };
  for (const auto& s : m.stages) {
    const auto& C = s.C;
    const auto& D = s.D;
    for (const auto& d : s.dual) {
      const auto& A = d.A;
      const auto& B = d.B;
      eq(A(1, 0) + A(1, 1), 1.0, "a21 + a22 = 1");
      eq(B(0, 1), 1.0, "b12 = 1");
      eq(B(0, 0) * (C(0, 0) + C(0, 1)), d.sigma, "b11 (c11 + c12) = sigma");
      eq(D(0, 0) * (A(0, 0) + A(0, 1)), -s.tau, "d11 (a11 + a12) = -tau");
      eq(B(1, 0), 0.0, "b21 = 0");
      eq(B(1, 1), 1.0, "b22 = 1");
      if (A(1, 0) == 0.0) fail("a21 != 0");
    }
    eq(C(1, 0) + C(1, 1), 1.0, "c21 + c22 = 1");
    eq(D(0, 1), 1.0, "d12 = 1");
    eq(D(1, 0), 0.0, "d21 = 0");
    eq(D(1, 1), 1.0, "d22 = 1");
    if (C(1, 0) == 0.0) fail("c21 != 0");
  }
  return r;
}

/// State of a 2x2 scheme (stage 0, block parameters per block) that sits at
/// the fixed point corresponding to the primal-dual pair (x, ys).
inline SolverState fixed_point_state(const SchemeMatrices& m, const SpaceElement& x,
                                     const std::vector<SpaceElement>& ys) {
  if (m.N != 2 || m.M != 2) throw DimensionError("fixed_point_state: needs a 2x2 scheme");
  const auto& st = m.stages.front();
  const auto& C = st.C;
  const double p_ratio = (1.0 - C(1, 1)) / C(1, 0);
  SolverState s;
  s.primal.push_back(scaled(C(0, 0) * p_ratio + C(0, 1), x));
  s.primal.push_back(x);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto& A = st.block(i).A;
    const double q_ratio = (1.0 - A(1, 1)) / A(1, 0);
    s.dual.push_back({scaled(A(0, 0) * q_ratio + A(0, 1), ys[i]), ys[i]});
  }
  return s;
}

/// ||y - prox^sigma_{G*}(y + sigma L x)|| + ||x - prox^tau_F(x - tau L* y)||,
/// with the dual norm taken over all blocks.
inline double fixed_point_residual(const Problem& problem, const std::vector<double>& sigmas,
                                   double tau, const SpaceElement& x,
                                   const std::vector<SpaceElement>& ys) {
  if (ys.size() != problem.G.size() || (sigmas.size() != 1 && sigmas.size() != ys.size()))
    throw DimensionError("fixed_point_residual: block count mismatch");
  double dual_sq = 0.0;
  SpaceElement back(problem.primal_space);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto& t = problem.G[i];
    const double s = sigmas.size() == 1 ? sigmas.front() : sigmas[i];
    const auto arg = axpby(1.0, ys[i], s, t.op.apply(x));
    dual_sq += norm_sq(ys[i] - prox_conjugate(t.g, s, arg));
    axpy_inplace(1.0, t.op.adjoint(ys[i]), back);
  }
  const auto p = prox(problem.F, tau, axpby(1.0, x, -tau, back));
  return std::sqrt(dual_sq) + norm(x - p);
}

/// Residual at the state's lead variables (x^1, y^1_i) with the step sizes
/// of stage 0.
inline double fixed_point_residual(const Problem& problem, const SchemeMatrices& params,
                                   const SolverState& state) {
  const auto& st = params.stages.front();
  std::vector<double> sigmas;
  std::vector<SpaceElement> ys;
  for (std::size_t i = 0; i < problem.G.size(); ++i) {
    sigmas.push_back(st.block(i).sigma);
    ys.push_back(state.dual[i].front());
  }
  return fixed_point_residual(problem, sigmas, st.tau, state.lead_primal(), ys);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) throw DimensionError("matrix: no rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) throw DimensionError("matrix: ragged rows");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

inline nlohmann::json to_json(const SchemeMatrices& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json dual = nlohmann::json::array();
    for (const auto& d : s.dual)
      dual.push_back({{"A", matrix_to_json(d.A)}, {"B", matrix_to_json(d.B)}, {"sigma", d.sigma}});
    stages.push_back({{"dual", dual}, {"C", matrix_to_json(s.C)}, {"D", matrix_to_json(s.D)},
                      {"tau", s.tau}});
  }
  return {{"N", m.N}, {"M", m.M}, {"stages", stages}};
}

inline SchemeMatrices scheme_from_json(const nlohmann::json& j) {
  SchemeMatrices m;
  m.N = j.at("N").get<std::size_t>();
  m.M = j.at("M").get<std::size_t>();
  for (const auto& s : j.at("stages")) {
    SchemeStage st;
    for (const auto& d : s.at("dual"))
      st.dual.push_back({matrix_from_json(d.at("A")), matrix_from_json(d.at("B")),
                         d.at("sigma").get<double>()});
    st.C = matrix_from_json(s.at("C"));
    st.D = matrix_from_json(s.at("D"));
    st.tau = s.at("tau").get<double>();
    m.stages.push_back(std::move(st));
  }
  m.validate();
  return m;
}

}  // namespace proxforge
