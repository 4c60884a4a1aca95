#pragma once

// Problem families for TV-regularized reconstruction, reference optima and
// the evaluation protocol.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "convergence.hpp"
#include "learn.hpp"
#include "linops.hpp"
#include "parallel.hpp"
#include "prox.hpp"
#include "scheme.hpp"
#include "tensor.hpp"

namespace proxforge {

enum class Family { deblur, deblur_aniso, tomography };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::deblur: return "deblur";
    case Family::deblur_aniso: return "deblur_aniso";
    case Family::tomography: return "tomography";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (auto f : {Family::deblur, Family::deblur_aniso, Family::tomography})
    if (to_string(f) == s) return f;
  throw ArgumentError("unknown problem family '" + s + "'");
}

/// Regularization weights used when none is configured; each keeps the TV
/// term between 10% and 50% of the optimal objective on its family.
inline double default_lambda(Family f) {
  switch (f) {
    case Family::deblur: return 0.007;
    case Family::deblur_aniso: return 0.007;
    case Family::tomography: return 0.001;
  }
  return 0.007;
}

inline constexpr double kPhantomMax = 3.25;

inline Space image_space(std::size_t side) { return make_space({side, side}, "image"); }

/// Sum of random rotated ellipses with intensities in [0.3, 1.5], clipped to
/// [0, 3.25].
inline SpaceElement make_phantom(std::size_t side, std::size_t n_ellipses, RngStream& rng) {
  if (side < 16) throw ArgumentError("make_phantom: side must be >= 16");
  SpaceElement img(image_space(side));
  auto px = img.data();
  const double n = static_cast<double>(side);
  for (std::size_t e = 0; e < n_ellipses; ++e) {
    const double cx = rng.uniform(-0.6, 0.6);
    const double cy = rng.uniform(-0.6, 0.6);
    const double ra = rng.uniform(0.1, 0.5);
    const double rb = rng.uniform(0.1, 0.5);
    const double phi = rng.uniform(0.0, std::numbers::pi);
    const double val = rng.uniform(0.3, 1.5);
    const double c = std::cos(phi), s = std::sin(phi);
    for (std::size_t i = 0; i < side; ++i) {
      const double y = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / n;
      for (std::size_t j = 0; j < side; ++j) {
        const double x = (2.0 * static_cast<double>(j) + 1.0) / n - 1.0;
        const double u = ((x - cx) * c + (y - cy) * s) / ra;
        const double v = (-(x - cx) * s + (y - cy) * c) / rb;
        if (u * u + v * v <= 1.0) px[i * side + j] += val;
      }
    }
  }
  for (double& v : px) v = std::clamp(v, 0.0, kPhantomMax);
  return img;
}

/// forward(truth) plus Gaussian noise of std noise_frac * RMS(forward(truth)).
inline SpaceElement simulate_data(const SpaceElement& truth, const LinOp& forward,
                                  double noise_frac, RngStream& rng) {
  if (!(noise_frac >= 0.0)) throw ArgumentError("simulate_data: noise_frac must be >= 0");
  SpaceElement clean = forward.apply(truth);
  if (noise_frac == 0.0) return clean;
  const double rms = std::sqrt(norm_sq(clean) / static_cast<double>(clean.size()));
  return clean + gaussian_like(clean, rng, 0.0, noise_frac * rms);
}

/// H_b(x) = ||forward x - b||^2 + lambda ||grad x||_1 with normalized operators.
struct ProblemInstance {
  LinOp forward;
  LinOp grad;
  SpaceElement b;
  double lambda;
  SpaceElement truth;

  Problem problem() const {
    return Problem(ProxFn::zero(),
                   {DualTerm{ProxFn::sq_l2_dist(b, 1.0), forward},
                    DualTerm{ProxFn::l1(lambda), grad}},
                   forward.domain());
  }
};

struct FamilyConfig {
  Family family = Family::deblur;
  std::size_t side = 32;
  double noise_frac = 0.05;
  std::optional<double> lambda;
  std::size_t n_ellipses = 6;
};

/// Normalized forward and gradient operators of a family, plus the norm
/// bound of the stacked operator (forward, grad).
struct FamilyOperators {
  LinOp forward;
  LinOp grad;
  double stacked_norm;
};

inline FamilyOperators family_operators(Family family, std::size_t side) {
  const Space img = image_space(side);
  LinOp fwd = [&] {
    switch (family) {
      case Family::deblur: return gaussian_blur_op(img, 3.0, 3.0);
      case Family::deblur_aniso: return gaussian_blur_op(img, 4.0, 6.0);
      case Family::tomography: return radon_build(RadonGeometry::desk_default(side));
    }
    throw ArgumentError("unknown family");
  }();
  fwd = normalize(with_estimated_norm(fwd));
  LinOp grad = normalize(with_estimated_norm(gradient_op(img)));
  const double L = estimate_norm(StackedOp({fwd, grad}).flat(), kDefaultPowerIterations,
                                 RngStream(0x5eed)) * kNormSafetyFactor;
  return {fwd, grad, L};
}

struct Dataset {
  FamilyConfig config;
  FamilyOperators ops;
  std::uint64_t seed = 0;
  std::vector<ProblemInstance> instances;

  std::vector<Problem> problems(std::size_t first, std::size_t count) const {
    std::vector<Problem> out;
    for (std::size_t i = first; i < first + count && i < instances.size(); ++i)
      out.push_back(instances[i].problem());
    return out;
  }
};

/// Instance k draws its phantom and noise from child stream k of `seed`.
inline Dataset make_dataset(const FamilyConfig& cfg, std::size_t count, std::uint64_t seed) {
  Dataset d{cfg, family_operators(cfg.family, cfg.side), seed, {}};
  const double lambda = cfg.lambda.value_or(default_lambda(cfg.family));
  if (!(lambda > 0.0)) throw ArgumentError("lambda must be > 0");
  const RngStream root(seed);
  for (std::size_t k = 0; k < count; ++k) {
    RngStream phantom_rng = root.split(2 * k);
    RngStream noise_rng = root.split(2 * k + 1);
    SpaceElement truth = make_phantom(cfg.side, cfg.n_ellipses, phantom_rng);
    SpaceElement b = simulate_data(truth, d.ops.forward, cfg.noise_frac, noise_rng);
    d.instances.push_back({d.ops.forward, d.ops.grad, std::move(b), lambda, std::move(truth)});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Reference optima

/// Base iteration count for 32x32 bench references; slow deblurring
/// instances need up to ~10^5 PDHG steps, beyond 8x the library default.
inline constexpr std::size_t kBenchReferenceIterations = 20000;

struct ReferenceOptimum {
  SpaceElement x_star;
  double value = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;
};

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Identifies an instance by family, data, lambda and iteration budget.
inline std::uint64_t instance_hash(const ProblemInstance& inst, const std::string& family,
                                   std::size_t iters) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, family.data(), family.size());
  h = fnv1a(h, inst.b.data().data(), inst.b.size() * sizeof(double));
  h = fnv1a(h, &inst.lambda, sizeof(double));
  h = fnv1a(h, &iters, sizeof(iters));
  return h;
}

/// PDHG reference with the residual gate; memoized under cache_dir when given.
inline ReferenceOptimum reference_solve(const ProblemInstance& inst, double stacked_norm,
                                        std::size_t iters = kReferenceIterations,
                                        const std::optional<std::filesystem::path>& cache_dir = {},
                                        const std::string& family = "") {
  std::filesystem::path stem;
  if (cache_dir) {
    std::ostringstream name;
    name << "ref_" << std::hex << std::setw(16) << std::setfill('0')
         << instance_hash(inst, family, iters);
    stem = *cache_dir / name.str();
    auto meta = stem;
    meta += ".ref.json";
    if (std::filesystem::exists(meta)) {
      std::ifstream in(meta);
      const auto j = nlohmann::json::parse(in);
      return {read_element(stem), j.at("value").get<double>(), j.at("residual").get<double>(),
              j.at("iterations").get<std::size_t>()};
    }
  }
  const Problem p = inst.problem();
  auto sol = reference_solution(p, stacked_norm, iters);
  ReferenceOptimum ref{sol.x, p.objective(sol.x), sol.residual, sol.iterations};
  if (cache_dir) {
    std::filesystem::create_directories(*cache_dir);
    write_element(ref.x_star, stem);
    auto meta = stem;
    meta += ".ref.json";
    std::ofstream(meta) << nlohmann::json{{"value", ref.value},
                                          {"residual", ref.residual},
                                          {"iterations", ref.iterations}}
                               .dump()
                        << "\n";
  }
  return ref;
}

/// H_b(x_depth) - reference value; +inf when the run leaves the finite range.
inline double evaluate_method(const ProblemInstance& inst, const SchemeMatrices& params,
                              std::size_t depth, const ReferenceOptimum& ref) {
  const Problem p = inst.problem();
  const double v = depth == 0 ? p.objective(SpaceElement(p.primal_space))
                              : unrolled_objective(p, params, depth);
  return std::isfinite(v) ? v - ref.value : std::numeric_limits<double>::infinity();
}

/// Fraction of the objective at x contributed by the TV term.
inline double tv_fraction(const ProblemInstance& inst, const SpaceElement& x) {
  const Problem p = inst.problem();
  const double tv = inst.lambda * [&] {
    double s = 0.0;
    for (double v : inst.grad.apply(x).data()) s += std::abs(v);
    return s;
  }();
  return tv / p.objective(x);
}

// ---------------------------------------------------------------------------
// Tables

struct Method {
  std::string name;
  SchemeMatrices params;
};

struct TableRow {
  std::string method;
  std::size_t depth = 0;
  double mean_gap = 0.0;
  double std_gap = 0.0;
  std::size_t n_instances = 0;
  std::uint64_t seed = 0;
};

/// Table order: default PDHG, trained constrained PDHG, trained new solver,
/// free PDHG, free matrices N = M = 2, N = M = 3.
inline const std::vector<std::string>& table_method_order() {
  static const std::vector<std::string> order{"pdhg_default",  "pdhg_constrained",
                                              "new_solver",    "pdhg_free",
                                              "matrices_free_2", "matrices_free_3"};
  return order;
}

inline SchemeMatrices default_pdhg(double stacked_norm) {
  const double s = 0.95 / stacked_norm;
  return preset_pdhg(s, s, 1.0);
}

/// Mean and sample standard deviation of the gap of each method over the
/// instances; +inf gaps propagate into the mean.
inline std::vector<TableRow> run_table(const std::vector<ProblemInstance>& instances,
                                       const std::vector<ReferenceOptimum>& refs,
                                       const std::vector<Method>& methods, std::size_t depth,
                                       std::uint64_t seed) {
  if (instances.empty()) throw ArgumentError("run_table: empty instance set");
  if (refs.size() != instances.size()) throw DimensionError("run_table: reference count mismatch");
  std::vector<TableRow> rows;
  for (const auto& m : methods) {
    std::vector<double> gaps(instances.size());
    parallel_for(instances.size(), [&](std::size_t i) {
      gaps[i] = evaluate_method(instances[i], m.params, depth, refs[i]);
    });
    double mean = 0.0;
    for (double g : gaps) mean += g;
    mean /= static_cast<double>(gaps.size());
    double var = 0.0;
    if (gaps.size() > 1 && std::isfinite(mean)) {
      for (double g : gaps) var += (g - mean) * (g - mean);
      var /= static_cast<double>(gaps.size() - 1);
    }
    rows.push_back({m.name, depth, mean, std::isfinite(mean) ? std::sqrt(var)
                                                             : std::numeric_limits<double>::infinity(),
                    gaps.size(), seed});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest round-trip representation; non-finite values as nan / inf / -inf.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_table_csv(const std::vector<TableRow>& rows, std::ostream& out) {
  out << "method,depth,mean_gap,std_gap,n_instances,seed\n";
  for (const auto& r : rows)
    out << r.method << ',' << r.depth << ',' << csv_number(r.mean_gap) << ','
        << csv_number(r.std_gap) << ',' << r.n_instances << ',' << r.seed << '\n';
}

// ---------------------------------------------------------------------------
// Per-iteration diagnostics

struct DiagnoseRow {
  std::size_t iter = 0;
  double Q1 = std::numeric_limits<double>::quiet_NaN();
  double Q2_displacement = std::numeric_limits<double>::quiet_NaN();
  double objective = 0.0;
  double fixed_point_residual = 0.0;
};

/// The two-relaxation parameters of a scheme, if it is one: a single 2x2
/// stage shared by all dual blocks with the matrices of preset_new_solver.
inline std::optional<ConvergentParams> as_convergent(const SchemeMatrices& m,
                                                     double rel_tol = 1e-12) {
  if (m.N != 2 || m.M != 2 || m.stages.size() != 1) return std::nullopt;
  const auto& st = m.stages.front();
  for (const auto& d : st.dual)
    if (d.sigma != st.dual.front().sigma || d.A != st.dual.front().A || d.B != st.dual.front().B)
      return std::nullopt;
  const auto& d = st.dual.front();
  const double a = d.A(1, 0), c = st.C(1, 0);
  if (a == 0.0) return std::nullopt;
  const auto ref = preset_new_solver(d.sigma, st.tau, a, c).stages.front();
  auto close = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    return ((x - y).array().abs() <= rel_tol * (1.0 + y.array().abs())).all();
  };
  if (!close(d.A, ref.dual[0].A) || !close(d.B, ref.dual[0].B) || !close(st.C, ref.C) ||
      !close(st.D, ref.D))
    return std::nullopt;
  return ConvergentParams{a, c, d.sigma, st.tau};
}

/// Runs the engine for `depth` steps from the zero state. Row k holds the
/// objective at the lead primal and the fixed-point residual after k steps.
/// For two-relaxation schemes with a reference (xbar, ybar), row k also holds
/// Q1(x_{k-1} - xbar, y_k - ybar) and Q2(p_{k-1} - x_{k-1}, q_k - y_k), where
/// x, y are the second memories and p, q the prox outputs; the Fejer
/// inequality then reads Q1[k+1] - Q1[k] <= -Q2[k].
inline std::vector<DiagnoseRow> diagnose_trace(const Problem& problem, const SchemeMatrices& params,
                                               std::size_t depth,
                                               const std::optional<SpaceElement>& xbar = {},
                                               const std::optional<DualVec>& ybar = {}) {
  params.validate(problem.G.size());
  const auto cp = as_convergent(params);
  const bool with_q = cp && xbar && ybar;
  std::vector<DiagnoseRow> rows;
  SolverState st = zero_state(problem, params.N, params.M);
  StepTape tape;
  // Run one step beyond depth when Q2 needs the next dual prox output.
  const std::size_t total = with_q ? depth + 1 : depth;
  SpaceElement x_prev = st.primal[1 % params.N];
  std::optional<SpaceElement> p_prev;
  DualVec y_cur;
  for (std::size_t k = 1; k <= total; ++k) {
    SolverState next = step(problem, params, st, &tape);
    if (with_q) {
      DualVec q;
      for (const auto& h : tape.dual) q.push_back(h.mixed.front());
      if (k >= 2) {
        // Completes row k-1: Q2(p_{k-2} - x_{k-2}, q_{k-1} - y_{k-1}).
        rows[k - 2].Q2_displacement =
            Q2_at(*cp, problem, *p_prev - x_prev, axpby(1.0, q, -1.0, y_cur));
        x_prev = st.primal[1];
      }
      p_prev = tape.primal.mixed.front();
      y_cur.clear();
      for (const auto& blk : next.dual) y_cur.push_back(blk[1]);
    }
    if (k <= depth) {
      DiagnoseRow r;
      r.iter = k;
      r.objective = problem.objective(next.lead_primal());
      if (!std::isfinite(r.objective)) r.objective = std::numeric_limits<double>::infinity();
      r.fixed_point_residual =
          state_finite(next) ? fixed_point_residual(problem, params, next)
                             : std::numeric_limits<double>::infinity();
      if (with_q)
        r.Q1 = Q1_at(*cp, problem, st.primal[1] - *xbar, axpby(1.0, y_cur, -1.0, *ybar));
      rows.push_back(r);
    }
    st = std::move(next);
  }
  return rows;
}

inline void write_diagnose_csv(const std::vector<DiagnoseRow>& rows, std::ostream& out) {
  out << "iter,Q1,Q2_displacement,objective,fixed_point_residual\n";
  for (const auto& r : rows)
    out << r.iter << ',' << csv_number(r.Q1) << ',' << csv_number(r.Q2_displacement) << ','
        << csv_number(r.objective) << ',' << csv_number(r.fixed_point_residual) << '\n';
}

}  // namespace proxforge
