#pragma once

// Learning scheme parameters: reparametrizations, the unrolled objective,
// reverse-mode gradients through the engine, and the Adam training loop.

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "convergence.hpp"
#include "json.hpp"
#include "parallel.hpp"
#include "scheme.hpp"

namespace proxforge {

// ---------------------------------------------------------------------------
// Forward-mode scalar for decode Jacobians

struct Dual {
  double v = 0.0;
  double d = 0.0;
  Dual() = default;
  Dual(double value, double deriv = 0.0) : v(value), d(deriv) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator-(Dual a) { return {-a.v, -a.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual exp(Dual a) {
  const double e = std::exp(a.v);
  return {e, e * a.d};
}
inline Dual sqrt(Dual a) {
  const double s = std::sqrt(a.v);
  return {s, a.d / (2.0 * s)};
}
inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }

template <class T>
T sigmoid(T s) {
  using std::exp;
  if (value_of(s) >= 0.0) return T(1.0) / (T(1.0) + exp(-s));
  const T e = exp(s);
  return e / (T(1.0) + e);
}

// ---------------------------------------------------------------------------
// Parameter vectors

enum class Mapping { pdhg_constrained, new_solver_constrained, pdhg_free, matrices_free };

inline std::string to_string(Mapping m) {
  switch (m) {
    case Mapping::pdhg_constrained: return "pdhg_constrained";
    case Mapping::new_solver_constrained: return "new_solver_constrained";
    case Mapping::pdhg_free: return "pdhg_free";
    case Mapping::matrices_free: return "matrices_free";
  }
  return "?";
}

inline Mapping mapping_from_string(const std::string& s) {
  for (auto m : {Mapping::pdhg_constrained, Mapping::new_solver_constrained, Mapping::pdhg_free,
                 Mapping::matrices_free})
    if (to_string(m) == s) return m;
  throw ArgumentError("unknown mapping '" + s + "'");
}

inline bool is_constrained(Mapping m) {
  return m == Mapping::pdhg_constrained || m == Mapping::new_solver_constrained;
}

/// Raw trainable values and how they decode into scheme matrices. `blocks`
/// is the number of distinct dual parameter sets (1 = shared by all blocks);
/// only matrices_free uses N, M and blocks other than the defaults.
struct ParamVector {
  Mapping mapping = Mapping::pdhg_constrained;
  std::size_t N = 2;
  std::size_t M = 2;
  std::size_t blocks = 1;
  std::vector<double> raw;
};

inline std::size_t raw_size(const ParamVector& pv) {
  switch (pv.mapping) {
    case Mapping::pdhg_constrained: return 3;
    case Mapping::new_solver_constrained: return 4;
    case Mapping::pdhg_free: return 3;
    case Mapping::matrices_free: return pv.blocks * (2 * pv.M * pv.M + 1) + 2 * pv.N * pv.N + 1;
  }
  return 0;
}

/// Length of the decoded layout: per dual parameter set A (M*M), B (M*M),
/// sigma; then C (N*N), D (N*N), tau. Matrices are row-major.
inline std::size_t flat_size(std::size_t N, std::size_t M, std::size_t blocks) {
  return blocks * (2 * M * M + 1) + 2 * N * N + 1;
}

inline void check_shape(const ParamVector& pv) {
  if (pv.mapping != Mapping::matrices_free && (pv.N != 2 || pv.M != 2 || pv.blocks != 1))
    throw DimensionError(to_string(pv.mapping) + " requires N = M = 2 and one dual parameter set");
  if (pv.N == 0 || pv.M == 0 || pv.blocks == 0) throw DimensionError("ParamVector: empty shape");
  if (pv.raw.size() != raw_size(pv))
    throw DimensionError("ParamVector: expected " + std::to_string(raw_size(pv)) +
                         " raw values, got " + std::to_string(pv.raw.size()));
}

template <class T>
std::vector<T> pdhg_flat(T sigma, T tau, T theta) {
  return {T(1.0), T(0.0), T(1.0), T(0.0),  sigma,          T(1.0), T(0.0), T(1.0), sigma,
          T(1.0) + theta, -theta, T(1.0), T(0.0), -tau, T(1.0), T(0.0), T(1.0), tau};
}

template <class T>
std::vector<T> new_solver_flat(T sigma, T tau, T a21, T c21) {
  const T r = c21 / a21;
  return {a21, T(1.0) - a21, a21, T(1.0) - a21, sigma,  T(1.0), T(0.0), T(1.0), sigma,
          T(1.0) + r, -r, c21, T(1.0) - c21, -tau, T(1.0), T(0.0), T(1.0), tau};
}

/// Decoded layout as a function of the raw values; T = Dual gives one
/// Jacobian column per seeded direction.
template <class T>
std::vector<T> decode_flat(const ParamVector& shape, const std::vector<T>& s, double L_norm) {
  using std::exp;
  using std::sqrt;
  if (!(L_norm > 0.0)) throw ArgumentError("decode: L_norm must be > 0");
  if (s.size() != raw_size(shape)) throw DimensionError("decode: raw length mismatch");
  const T inv_norm(1.0 / L_norm);
  switch (shape.mapping) {
    case Mapping::pdhg_constrained: {
      const T theta = sigmoid(s[0]);
      const T g = sigmoid(s[1]);
      const T tau = inv_norm * exp(s[2]) * g;
      const T sigma = inv_norm * exp(-s[2]) * g;
      return pdhg_flat(sigma, tau, theta);
    }
    case Mapping::new_solver_constrained: {
      const T p = sigmoid(s[0]);
      const T q = sigmoid(s[1]);
      const T a21 = T(2.0) * p;
      const T c21 = T(2.0) * q;
      // 2 - a21 = 2 sigmoid(-s1), kept in that form against cancellation.
      const T two_minus_a = T(2.0) * sigmoid(-s[0]);
      const T two_minus_c = T(2.0) * sigmoid(-s[1]);
      const T m = a21 + c21 - a21 * c21;
      const T K = a21 * a21 * two_minus_a * two_minus_c / (m * m);
      const T g = sigmoid(s[2]);
      const T scale = sqrt(K) * inv_norm * g;
      return new_solver_flat(scale * exp(-s[3]), scale * exp(s[3]), a21, c21);
    }
    case Mapping::pdhg_free:
      return pdhg_flat(s[1], s[2], s[0]);
    case Mapping::matrices_free:
      return s;
  }
  return {};
}

inline SchemeMatrices scheme_from_flat(const std::vector<double>& flat, std::size_t N,
                                       std::size_t M, std::size_t blocks) {
  if (flat.size() != flat_size(N, M, blocks)) throw DimensionError("flat layout length mismatch");
  std::size_t k = 0;
  auto take = [&](std::size_t n) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[k++];
    return m;
  };
  SchemeMatrices out;
  out.N = N;
  out.M = M;
  SchemeStage st;
  for (std::size_t b = 0; b < blocks; ++b) {
    DualBlockParams d;
    d.A = take(M);
    d.B = take(M);
    d.sigma = flat[k++];
    st.dual.push_back(std::move(d));
  }
  st.C = take(N);
  st.D = take(N);
  st.tau = flat[k++];
  out.stages.push_back(std::move(st));
  return out;
}

inline std::vector<double> flat_from_scheme(const SchemeMatrices& m) {
  if (m.stages.size() != 1) throw DimensionError("flat layout needs constant matrices");
  std::vector<double> out;
  auto put = [&](const Eigen::MatrixXd& a) {
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index c = 0; c < a.cols(); ++c) out.push_back(a(r, c));
  };
  const auto& st = m.stages.front();
  for (const auto& d : st.dual) {
    put(d.A);
    put(d.B);
    out.push_back(d.sigma);
  }
  put(st.C);
  put(st.D);
  out.push_back(st.tau);
  return out;
}

inline std::size_t decoded_blocks(const ParamVector& pv) {
  return pv.mapping == Mapping::matrices_free ? pv.blocks : 1;
}

inline SchemeMatrices decode(const ParamVector& pv, double L_norm) {
  check_shape(pv);
  return scheme_from_flat(decode_flat(pv, pv.raw, L_norm), pv.N, pv.M, decoded_blocks(pv));
}

/// d(decoded layout) / d(raw), flat_size x raw_size.
inline Eigen::MatrixXd decode_jacobian(const ParamVector& pv, double L_norm) {
  check_shape(pv);
  const std::size_t n = pv.raw.size();
  Eigen::MatrixXd J(static_cast<Eigen::Index>(flat_size(pv.N, pv.M, decoded_blocks(pv))),
                    static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<Dual> s;
    for (std::size_t j = 0; j < n; ++j) s.emplace_back(pv.raw[j], j == k ? 1.0 : 0.0);
    const auto out = decode_flat(pv, s, L_norm);
    for (std::size_t r = 0; r < out.size(); ++r)
      J(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = out[r].d;
  }
  return J;
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Starting point close to PDHG with theta = 1 and sigma = tau = 0.95/||L||.
/// The constrained PDHG mapping cannot reach theta = 1 and starts at
/// theta = sigmoid(3).
inline ParamVector initial_params(Mapping mapping, double L_norm, std::size_t N = 2,
                                  std::size_t M = 2, std::size_t blocks = 1) {
  ParamVector pv;
  pv.mapping = mapping;
  const double step = 0.95 / L_norm;
  switch (mapping) {
    case Mapping::pdhg_constrained:
      pv.raw = {3.0, logit(0.95), 0.0};
      break;
    case Mapping::new_solver_constrained:
      pv.raw = {0.0, 0.0, logit(0.95), 0.0};
      break;
    case Mapping::pdhg_free:
      pv.raw = {1.0, step, step};
      break;
    case Mapping::matrices_free: {
      if (N < 2 || M < 2) throw DimensionError("initial_params: free matrices need N, M >= 2");
      pv.N = N;
      pv.M = M;
      pv.blocks = blocks;
      auto pad = [](const Eigen::MatrixXd& small, std::size_t n) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                  static_cast<Eigen::Index>(n));
        m.topLeftCorner(2, 2) = small;
        return m;
      };
      const auto base = preset_pdhg(step, step, 1.0).stages.front();
      SchemeMatrices m;
      m.N = N;
      m.M = M;
      SchemeStage st;
      for (std::size_t b = 0; b < blocks; ++b)
        st.dual.push_back({pad(base.dual[0].A, M), pad(base.dual[0].B, M), step});
      st.C = pad(base.C, N);
      st.D = pad(base.D, N);
      st.tau = step;
      m.stages.push_back(st);
      pv.raw = flat_from_scheme(m);
      break;
    }
  }
  return pv;
}

inline nlohmann::json to_json(const ParamVector& pv) {
  return {{"mapping", to_string(pv.mapping)}, {"N", pv.N}, {"M", pv.M}, {"blocks", pv.blocks},
          {"raw", pv.raw}};
}

inline ParamVector param_vector_from_json(const nlohmann::json& j) {
  ParamVector pv;
  pv.mapping = mapping_from_string(j.at("mapping").get<std::string>());
  pv.N = j.at("N").get<std::size_t>();
  pv.M = j.at("M").get<std::size_t>();
  pv.blocks = j.at("blocks").get<std::size_t>();
  pv.raw = j.at("raw").get<std::vector<double>>();
  for (double v : pv.raw)
    if (!std::isfinite(v)) throw NumericalError("ParamVector: non-finite raw value");
  check_shape(pv);
  return pv;
}

// ---------------------------------------------------------------------------
// Objective and its gradient

/// An element of the subdifferential of f at x; sign(0) = 0 for l1.
inline SpaceElement value_gradient(const ProxFn& f, const SpaceElement& x) {
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return SpaceElement(x.space());
    case ProxFn::Kind::sq_l2_dist:
      return scaled(2.0 * f.weight(), x - *f.data());
    case ProxFn::Kind::l1: {
      SpaceElement g(x.space());
      auto gs = g.data();
      const auto xs = x.data();
      for (std::size_t i = 0; i < xs.size(); ++i)
        gs[i] = xs[i] > 0.0 ? f.weight() : (xs[i] < 0.0 ? -f.weight() : 0.0);
      return g;
    }
    case ProxFn::Kind::separable_sum: {
      auto xs = detail::split_parts(f, x);
      for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = value_gradient(f.parts()[i], xs[i]);
      return detail::join_parts(xs, x.space());
    }
    case ProxFn::Kind::strongly_convex_shift: {
      auto g = value_gradient(f.base(), x);
      axpy_inplace(f.mu(), x - detail::center_or_zero(f, x), g);
      return g;
    }
  }
  return SpaceElement(x.space());
}

inline SpaceElement objective_gradient(const Problem& p, const SpaceElement& x) {
  auto g = value_gradient(p.F, x);
  for (const auto& t : p.G) axpy_inplace(1.0, t.op.adjoint(value_gradient(t.g, t.op.apply(x))), g);
  return g;
}

inline bool state_finite(const SolverState& s) {
  for (const auto& x : s.primal)
    if (!x.all_finite()) return false;
  for (const auto& blk : s.dual)
    for (const auto& y : blk)
      if (!y.all_finite()) return false;
  return true;
}

/// Objective at the lead primal after `depth` steps from the zero state;
/// +inf if any iterate leaves the finite range.
inline double unrolled_objective(const Problem& p, const SchemeMatrices& params, std::size_t depth) {
  params.validate(p.G.size());
  SolverState st = zero_state(p, params.N, params.M);
  for (std::size_t n = 0; n < depth; ++n) {
    st = step(p, params, st);
    if (!state_finite(st)) return std::numeric_limits<double>::infinity();
  }
  const double v = p.objective(st.lead_primal());
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

using ProblemBatch = std::vector<const Problem*>;

/// Mean of unrolled_objective over the batch.
inline double loss(const ProblemBatch& batch, const SchemeMatrices& params, std::size_t depth) {
  if (depth == 0) throw ArgumentError("loss: depth must be >= 1");
  if (batch.empty()) throw ArgumentError("loss: empty batch");
  std::vector<double> vals(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { vals[i] = unrolled_objective(*batch[i], params, depth); });
  double s = 0.0;
  for (double v : vals) s += v;
  const double mean = s / static_cast<double>(batch.size());
  return std::isfinite(mean) ? mean : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Reverse mode through the unrolled iteration

namespace detail {

inline SchemeMatrices zero_like(const SchemeMatrices& m) {
  SchemeMatrices g = m;
  for (auto& st : g.stages) {
    for (auto& d : st.dual) {
      d.A.setZero();
      d.B.setZero();
      d.sigma = 0.0;
    }
    st.C.setZero();
    st.D.setZero();
    st.tau = 0.0;
  }
  return g;
}

/// Given out = mat * in and the adjoint of out, accumulates d mat and
/// returns the adjoint of in.
inline std::vector<SpaceElement> combine_backward(const Eigen::MatrixXd& mat,
                                                  const std::vector<SpaceElement>& in,
                                                  const std::vector<SpaceElement>& out_bar,
                                                  Eigen::MatrixXd& mat_bar) {
  for (Eigen::Index r = 0; r < mat.rows(); ++r)
    for (Eigen::Index k = 0; k < mat.cols(); ++k)
      mat_bar(r, k) += inner(out_bar[static_cast<std::size_t>(r)], in[static_cast<std::size_t>(k)]);
  return combine(mat.transpose(), out_bar);
}

}  // namespace detail

/// Objective after `depth` steps and its gradient with respect to every
/// entry and step size of `params` (same structure as params). Throws
/// NumericalError naming the first non-finite iterate.
inline double unrolled_objective_grad(const Problem& p, const SchemeMatrices& params,
                                      std::size_t depth, SchemeMatrices& grad) {
  params.validate(p.G.size());
  grad = detail::zero_like(params);
  std::vector<StepTape> tapes(depth);
  SolverState st = zero_state(p, params.N, params.M);
  for (std::size_t n = 0; n < depth; ++n) {
    st = step(p, params, st, &tapes[n]);
    if (!state_finite(st))
      throw NumericalError("non-finite iterate at step " + std::to_string(n + 1));
  }
  const double val = p.objective(st.lead_primal());
  if (!std::isfinite(val))
    throw NumericalError("non-finite objective at step " + std::to_string(depth));

  // Adjoints of the state after step n.
  std::vector<SpaceElement> x_bar(params.N, SpaceElement(p.primal_space));
  std::vector<std::vector<SpaceElement>> y_bar;
  for (const auto& t : p.G) y_bar.emplace_back(params.M, SpaceElement(t.op.range()));
  x_bar.front() = objective_gradient(p, st.lead_primal());

  for (std::size_t n = depth; n-- > 0;) {
    const auto& tape = tapes[n];
    const SchemeStage& sp = params.stages[tape.stage];
    SchemeStage& sg = grad.stages[tape.stage];

    // Primal half.
    auto mixed_bar = detail::combine_backward(sp.C, tape.primal.mixed, x_bar, sg.C);
    sg.tau += prox_scale_vjp(p.F, sp.tau, tape.primal.prox_arg, mixed_bar.front());
    mixed_bar.front() = prox_vjp(p.F, sp.tau, tape.primal.prox_arg, mixed_bar.front());
    auto in_bar = detail::combine_backward(sp.D, tape.primal.input, mixed_bar, sg.D);
    std::vector<SpaceElement> x_prev_bar(params.N, SpaceElement(p.primal_space));
    for (std::size_t k = 1; k < params.N; ++k) x_prev_bar[k] = std::move(in_bar[k]);
    const SpaceElement& back_bar = in_bar.front();

    // Dual halves.
    std::vector<std::vector<SpaceElement>> y_prev_bar(p.G.size());
    for (std::size_t i = 0; i < p.G.size(); ++i) {
      const auto& term = p.G[i];
      const auto& dt = tape.dual[i];
      const std::size_t b = sp.dual.size() == 1 ? 0 : i;
      const auto& bp = sp.dual[b];
      auto& bg = sg.dual[b];
      auto out_bar = y_bar[i];
      axpy_inplace(1.0, term.op.apply(back_bar), out_bar.front());
      auto dmixed_bar = detail::combine_backward(bp.A, dt.mixed, out_bar, bg.A);
      bg.sigma += prox_conjugate_scale_vjp(term.g, bp.sigma, dt.prox_arg, dmixed_bar.front());
      dmixed_bar.front() = prox_conjugate_vjp(term.g, bp.sigma, dt.prox_arg, dmixed_bar.front());
      auto din_bar = detail::combine_backward(bp.B, dt.input, dmixed_bar, bg.B);
      axpy_inplace(1.0, term.op.adjoint(din_bar.front()), x_prev_bar.front());
      y_prev_bar[i].assign(params.M, SpaceElement(term.op.range()));
      for (std::size_t k = 1; k < params.M; ++k) y_prev_bar[i][k] = std::move(din_bar[k]);
    }
    x_bar = std::move(x_prev_bar);
    y_bar = std::move(y_prev_bar);
  }
  return val;
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // with respect to pv.raw
};

/// Mean batch objective at `depth` and its gradient with respect to the raw
/// parameters (through decode).
inline LossGrad loss_grad(const ProblemBatch& batch, const ParamVector& pv, double L_norm,
                          std::size_t depth) {
  if (depth == 0) throw ArgumentError("loss_grad: depth must be >= 1");
  if (batch.empty()) throw ArgumentError("loss_grad: empty batch");
  const SchemeMatrices params = decode(pv, L_norm);
  std::vector<double> vals(batch.size());
  std::vector<SchemeMatrices> grads(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    vals[i] = unrolled_objective_grad(*batch[i], params, depth, grads[i]);
  });
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossGrad out;
  Eigen::VectorXd flat_grad = Eigen::VectorXd::Zero(
      static_cast<Eigen::Index>(flat_size(pv.N, pv.M, decoded_blocks(pv))));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.loss += vals[i] * inv;
    const auto g = flat_from_scheme(grads[i]);
    for (std::size_t k = 0; k < g.size(); ++k) flat_grad(static_cast<Eigen::Index>(k)) += g[k] * inv;
  }
  const Eigen::VectorXd raw_grad = decode_jacobian(pv, L_norm).transpose() * flat_grad;
  out.grad.assign(raw_grad.data(), raw_grad.data() + raw_grad.size());
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer pieces

struct TrainConfig {
  std::size_t t_max = 2000;
  double eta0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double clip_norm = 1.0;
  double depth_mean_shift = 8.0;
  double depth_log_std = 1.25;
  std::size_t depth_cap = 100;
  std::size_t eval_depth = 10;
  std::size_t batch_size = 4;
  std::size_t validation_every = 50;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"t_max", c.t_max},         {"eta0", c.eta0},
       {"beta1", c.beta1},         {"beta2", c.beta2},
       {"eps", c.eps},             {"clip_norm", c.clip_norm},
       {"depth_mean_shift", c.depth_mean_shift}, {"depth_log_std", c.depth_log_std},
       {"depth_cap", c.depth_cap}, {"eval_depth", c.eval_depth},
       {"batch_size", c.batch_size}, {"validation_every", c.validation_every},
       {"seed", c.seed}};
}

/// Heavy-tailed excess Z = exp(N(log 2 - s^2/2, s^2)), so E[Z] = 2.
inline double sample_depth_excess(RngStream& rng, double log_std = 1.25) {
  const double m = std::log(2.0) - 0.5 * log_std * log_std;
  return std::exp(m + log_std * rng.normal());
}

inline std::size_t depth_from_excess(double z, double shift = 8.0, std::size_t cap = 100) {
  const double d = std::round(shift + z);
  if (!(d >= 1.0)) return 1;
  return d >= static_cast<double>(cap) ? cap : static_cast<std::size_t>(d);
}

inline std::size_t sample_depth(RngStream& rng, double shift = 8.0, double log_std = 1.25,
                                std::size_t cap = 100) {
  return depth_from_excess(sample_depth_excess(rng, log_std), shift, cap);
}

/// eta_t = eta0/2 (1 + cos(pi t / t_max))
inline double cosine_lr(double eta0, std::size_t t, std::size_t t_max) {
  if (t_max == 0) return eta0;
  return 0.5 * eta0 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(t_max)));
}

/// Scales g in place to norm at most max_norm; returns the original norm.
inline double clip_by_norm(std::vector<double>& g, double max_norm) {
  double s = 0.0;
  for (double v : g) s += v * v;
  const double n = std::sqrt(s);
  if (n > max_norm && n > 0.0)
    for (double& v : g) v *= max_norm / n;
  return n;
}

class Adam {
 public:
  Adam(std::size_t n, double beta1, double beta2, double eps)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct TraceRow {
  std::size_t step = 0;
  std::size_t depth = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
  bool skipped = false;
};

struct TrainResult {
  ParamVector best;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<TraceRow> trace;
};

inline ProblemBatch all_of(const std::vector<Problem>& v) {
  ProblemBatch b;
  for (const auto& p : v) b.push_back(&p);
  return b;
}

/// Adam on loss_grad with per-step sampled depth, clipping and cosine
/// schedule. Validation loss at eval_depth is computed at step 0, every
/// validation_every steps and after the last step; the best parameters by
/// validation are returned. Steps with a non-finite loss or gradient are
/// skipped.
inline TrainResult train(const std::vector<Problem>& train_set,
                         const std::vector<Problem>& validation_set, double L_norm,
                         ParamVector pv, const TrainConfig& cfg) {
  check_shape(pv);
  if (train_set.empty() || validation_set.empty())
    throw ArgumentError("train: empty training or validation set");
  const ProblemBatch val_batch = all_of(validation_set);
  RngStream depth_rng = RngStream(cfg.seed).split(1);
  RngStream batch_rng = RngStream(cfg.seed).split(2);
  Adam opt(pv.raw.size(), cfg.beta1, cfg.beta2, cfg.eps);

  auto validate_now = [&](const ParamVector& q) {
    try {
      return loss(val_batch, decode(q, L_norm), cfg.eval_depth);
    } catch (const std::invalid_argument&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  TrainResult res;
  res.best = pv;
  res.best_validation = validate_now(pv);
  if (!std::isfinite(res.best_validation))
    throw NumericalError("train: non-finite loss at the initial parameters");
  res.trace.push_back({0, cfg.eval_depth, cosine_lr(cfg.eta0, 0, cfg.t_max),
                       res.best_validation, 0.0, res.best_validation, false});

  const std::size_t bs = std::min(cfg.batch_size, train_set.size());
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t t = 0; t < cfg.t_max; ++t) {
    const std::size_t depth = sample_depth(depth_rng, cfg.depth_mean_shift, cfg.depth_log_std,
                                           cfg.depth_cap);
    // Partial Fisher-Yates: a batch without repeats.
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    ProblemBatch batch;
    for (std::size_t i = 0; i < bs; ++i) {
      const std::size_t j = i + batch_rng.below(order.size() - i);
      std::swap(order[i], order[j]);
      batch.push_back(&train_set[order[i]]);
    }
    const double lr = cosine_lr(cfg.eta0, t, cfg.t_max);
    TraceRow row{t + 1, depth, lr, std::numeric_limits<double>::infinity(), 0.0,
                 std::numeric_limits<double>::quiet_NaN(), true};
    try {
      auto lg = loss_grad(batch, pv, L_norm, depth);
      bool finite = std::isfinite(lg.loss);
      for (double g : lg.grad) finite = finite && std::isfinite(g);
      if (finite) {
        row.loss = lg.loss;
        row.grad_norm = clip_by_norm(lg.grad, cfg.clip_norm);
        opt.step(pv.raw, lg.grad, lr);
        row.skipped = false;
      }
    } catch (const NumericalError&) {
    } catch (const std::invalid_argument&) {
    }
    const bool last = t + 1 == cfg.t_max;
    if (last || (cfg.validation_every > 0 && (t + 1) % cfg.validation_every == 0)) {
      row.validation = validate_now(pv);
      if (row.validation < res.best_validation) {
        res.best_validation = row.validation;
        res.best = pv;
        res.best_step = t + 1;
      }
    }
    res.trace.push_back(row);
  }
  res.final_loss = res.best_validation;
  return res;
}

// ---------------------------------------------------------------------------
// One gradient step on F_b(x) = 1/2 x^T H x - b^T x

inline void require_spd(const Eigen::MatrixXd& H) {
  if (H.rows() != H.cols() || H.rows() == 0) throw DimensionError("H must be square");
  if (!H.isApprox(H.transpose(), 1e-12)) throw ArgumentError("H must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) throw ArgumentError("H must be positive definite");
}

/// Step length minimizing the sample mean of F_b(x0 - sigma (H x0 - b)):
/// sum ||r||^2 / sum r^T H r with r = H x0 - b.
inline double closed_form_gd_step(const Eigen::MatrixXd& H, const Eigen::VectorXd& x0,
                                  const std::vector<Eigen::VectorXd>& b_samples) {
  require_spd(H);
  if (b_samples.empty()) throw ArgumentError("closed_form_gd_step: no samples");
  double num = 0.0, den = 0.0;
  for (const auto& b : b_samples) {
    const Eigen::VectorXd r = H * x0 - b;
    num += r.squaredNorm();
    den += r.dot(H * r);
  }
  return num / den;
}

/// Mean of F_b(x0 - sigma (H x0 - b)) over the samples and its derivative
/// in sigma, by the chain rule through the step.
inline std::pair<double, double> gd_step_loss_grad(const Eigen::MatrixXd& H,
                                                   const Eigen::VectorXd& x0,
                                                   const std::vector<Eigen::VectorXd>& b_samples,
                                                   double sigma) {
  double f = 0.0, g = 0.0;
  for (const auto& b : b_samples) {
    const Eigen::VectorXd grad0 = H * x0 - b;
    const Eigen::VectorXd x1 = x0 - sigma * grad0;
    f += 0.5 * x1.dot(H * x1) - b.dot(x1);
    g += (H * x1 - b).dot(-grad0);
  }
  const double n = static_cast<double>(b_samples.size());
  return {f / n, g / n};
}

/// Trains the single step length of a one-step gradient network with the
/// same optimizer, schedule and clipping as train(), on the full sample set.
inline double train_gd_step(const Eigen::MatrixXd& H, const Eigen::VectorXd& x0,
                            const std::vector<Eigen::VectorXd>& b_samples, double sigma0,
                            const TrainConfig& cfg) {
  require_spd(H);
  std::vector<double> s{sigma0};
  Adam opt(1, cfg.beta1, cfg.beta2, cfg.eps);
  for (std::size_t t = 0; t < cfg.t_max; ++t) {
    std::vector<double> g{gd_step_loss_grad(H, x0, b_samples, s[0]).second};
    clip_by_norm(g, cfg.clip_norm);
    opt.step(s, g, cosine_lr(cfg.eta0, t, cfg.t_max));
  }
  return s[0];
}

}  // namespace proxforge
