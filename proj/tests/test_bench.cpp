#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "proxforge/bench.hpp"

using namespace proxforge;

namespace {

FamilyConfig small(Family f = Family::deblur) {
  FamilyConfig c;
  c.family = f;
  c.side = 16;
  return c;
}

struct Small {
  Dataset data;
  std::vector<ReferenceOptimum> refs;
};

const Small& shared() {
  static const Small s = [] {
    Small out{make_dataset(small(Family::tomography), 3, 5), {}};
    for (const auto& inst : out.data.instances)
      out.refs.push_back(reference_solve(inst, out.data.ops.stacked_norm));
    return out;
  }();
  return s;
}

double objective(const ProblemInstance& inst, const SpaceElement& x) {
  return inst.problem().objective(x);
}

}  // namespace

TEST(Phantom, RangeAndDeterminism) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream a(seed), b(seed);
    const auto p = make_phantom(32, 6, a);
    EXPECT_EQ(p.values(), make_phantom(32, 6, b).values());
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, kPhantomMax);
    }
  }
  RngStream r(1);
  const auto z = make_phantom(16, 0, r);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(make_phantom(8, 1, r), ArgumentError);
}

TEST(SimulateData, NoiseLevelAndExactData) {
  const auto ops = family_operators(Family::deblur, 64);
  RngStream pr(3), nr(4);
  const auto truth = make_phantom(64, 6, pr);
  const auto clean = ops.forward.apply(truth);
  const auto b = simulate_data(truth, ops.forward, 0.05, nr);
  const double ratio = norm(b - clean) / norm(clean);
  EXPECT_NEAR(ratio, 0.05, 0.01);
  RngStream nr0(4);
  EXPECT_EQ(simulate_data(truth, ops.forward, 0.0, nr0).values(), clean.values());
}

TEST(Dataset, DeterministicAndPrefixStable) {
  const auto a = make_dataset(small(), 3, 9);
  const auto b = make_dataset(small(), 5, 9);
  const auto c = make_dataset(small(), 3, 10);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.instances[k].b.values(), b.instances[k].b.values());
    EXPECT_EQ(a.instances[k].truth.values(), b.instances[k].truth.values());
  }
  EXPECT_NE(a.instances[0].b.values(), c.instances[0].b.values());
  EXPECT_EQ(a.instances[0].lambda, default_lambda(Family::deblur));
}

TEST(Dataset, OperatorsNormalized) {
  for (auto f : {Family::deblur, Family::deblur_aniso, Family::tomography}) {
    const auto ops = family_operators(f, 16);
    const double nf = estimate_norm(ops.forward, 300, RngStream(2));
    const double ng = estimate_norm(ops.grad, 300, RngStream(2));
    EXPECT_NEAR(nf, 1.0, 2e-3) << to_string(f);
    EXPECT_NEAR(ng, 1.0, 2e-3) << to_string(f);
    const double ns = estimate_norm(StackedOp({ops.forward, ops.grad}).flat(), 300, RngStream(3));
    EXPECT_GE(ops.stacked_norm, ns) << to_string(f);
    EXPECT_LE(ops.stacked_norm, std::sqrt(2.0) * 1.01) << to_string(f);
  }
}

TEST(Dataset, ObjectiveFiniteAtZero) {
  for (const auto& inst : shared().data.instances)
    EXPECT_TRUE(std::isfinite(objective(inst, SpaceElement(inst.forward.domain()))));
}

TEST(Reference, BelowZeroAndTruth) {
  const auto& s = shared();
  for (std::size_t k = 0; k < s.refs.size(); ++k) {
    const auto& inst = s.data.instances[k];
    EXPECT_LE(s.refs[k].residual, kReferenceResidualGate);
    EXPECT_LE(s.refs[k].value, objective(inst, SpaceElement(inst.forward.domain())));
    EXPECT_LE(s.refs[k].value, objective(inst, inst.truth));
    EXPECT_DOUBLE_EQ(s.refs[k].value, objective(inst, s.refs[k].x_star));
  }
}

TEST(Reference, DoublingIterationsBarelyMovesValue) {
  const auto& s = shared();
  const auto& inst = s.data.instances[0];
  const auto twice = reference_solve(inst, s.data.ops.stacked_norm, 2 * s.refs[0].iterations);
  EXPECT_LE(std::abs(twice.value - s.refs[0].value), 1e-7 * std::abs(s.refs[0].value));
}

TEST(Reference, GateFailureIsExplicit) {
  const auto& s = shared();
  try {
    reference_solve(s.data.instances[0], s.data.ops.stacked_norm, 1);
    FAIL() << "expected the residual gate to fail";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("residual"), std::string::npos);
  }
}

TEST(Reference, CacheRoundTrip) {
  const auto& s = shared();
  const auto dir = std::filesystem::temp_directory_path() / "proxforge_test_ref_cache";
  std::filesystem::remove_all(dir);
  const auto& inst = s.data.instances[1];
  const auto a = reference_solve(inst, s.data.ops.stacked_norm, kReferenceIterations, dir, "tomography");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.is_regular_file();
  EXPECT_GE(files, 2u);
  const auto b = reference_solve(inst, s.data.ops.stacked_norm, kReferenceIterations, dir, "tomography");
  EXPECT_EQ(a.x_star.values(), b.x_star.values());
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_EQ(a.x_star.values(), s.refs[1].x_star.values());
  std::filesystem::remove_all(dir);
}

TEST(Evaluate, GapSignsAndSelfConsistency) {
  const auto& s = shared();
  const double L = s.data.ops.stacked_norm;
  for (std::size_t k = 0; k < s.refs.size(); ++k) {
    const auto& inst = s.data.instances[k];
    const double g0 = evaluate_method(inst, default_pdhg(L), 0, s.refs[k]);
    EXPECT_DOUBLE_EQ(g0, objective(inst, SpaceElement(inst.forward.domain())) - s.refs[k].value);
    EXPECT_GT(g0, 0.0);
    for (std::size_t depth : {1, 10, 100})
      EXPECT_GE(evaluate_method(inst, default_pdhg(L), depth, s.refs[k]), -1e-8);
  }
  const double self = evaluate_method(s.data.instances[2], default_pdhg(L), s.refs[2].iterations, s.refs[2]);
  EXPECT_LE(std::abs(self), 1e-6);
}

TEST(Evaluate, DivergentSchemeGivesInfiniteGap) {
  const auto& s = shared();
  EXPECT_EQ(evaluate_method(s.data.instances[0], preset_pdhg(5, 5, 50), 400, s.refs[0]),
            std::numeric_limits<double>::infinity());
}

TEST(Evaluate, GapNonincreasingOnceConverged) {
  const auto& s = shared();
  const double L = s.data.ops.stacked_norm;
  const double st = 0.95 / L;
  const std::vector<SchemeMatrices> schemes{default_pdhg(L), preset_new_solver(st, st, 1.2, 0.8),
                                            preset_dr(st, st, 1.5)};
  for (std::size_t k = 0; k < s.refs.size(); ++k) {
    const auto& inst = s.data.instances[k];
    for (const auto& m : schemes) {
      const double g0 = evaluate_method(inst, m, 0, s.refs[k]);
      std::optional<double> prev;
      for (std::size_t depth : {10, 20, 40, 80}) {
        const double g = evaluate_method(inst, m, depth, s.refs[k]);
        if (prev) EXPECT_LE(g, *prev + 1e-8) << "depth " << depth;
        if (prev || g < 0.01 * g0) prev = g;
      }
    }
  }
}

TEST(Objective, ConvexOnRandomPairs) {
  const auto& inst = shared().data.instances[0];
  RngStream r(17);
  for (int t = 0; t < 100; ++t) {
    const auto x = gaussian_like(SpaceElement(inst.forward.domain()), r, 0.5, 1.0);
    const auto z = gaussian_like(SpaceElement(inst.forward.domain()), r, 0.5, 1.0);
    const auto mid = scaled(0.5, x + z);
    EXPECT_LE(objective(inst, mid), 0.5 * objective(inst, x) + 0.5 * objective(inst, z) + 1e-10);
  }
}

TEST(Table, MeanAndSampleStd) {
  const auto& s = shared();
  const double L = s.data.ops.stacked_norm;
  const double st = 0.95 / L;
  const std::vector<Method> methods{{"pdhg_default", default_pdhg(L)},
                                    {"new_solver", preset_new_solver(st, st, 1.1, 0.9)}};
  const auto rows = run_table(s.data.instances, s.refs, methods, 10, 5);
  ASSERT_EQ(rows.size(), 2u);
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<double> g;
    for (std::size_t k = 0; k < 3; ++k)
      g.push_back(evaluate_method(s.data.instances[k], methods[m].params, 10, s.refs[k]));
    const double mean = (g[0] + g[1] + g[2]) / 3.0;
    const double var = ((g[0] - mean) * (g[0] - mean) + (g[1] - mean) * (g[1] - mean) +
                        (g[2] - mean) * (g[2] - mean)) / 2.0;
    EXPECT_EQ(rows[m].method, methods[m].name);
    EXPECT_EQ(rows[m].depth, 10u);
    EXPECT_EQ(rows[m].n_instances, 3u);
    EXPECT_EQ(rows[m].seed, 5u);
    EXPECT_NEAR(rows[m].mean_gap, mean, 1e-12 * std::abs(mean));
    EXPECT_NEAR(rows[m].std_gap, std::sqrt(var), 1e-10 * std::sqrt(var));
  }
  EXPECT_THROW(run_table({}, {}, methods, 10, 0), ArgumentError);
}

TEST(Csv, NumbersRoundTrip) {
  RngStream r(23);
  for (int t = 0; t < 1000; ++t) {
    const double v = r.normal() * std::pow(10.0, r.uniform(-300, 300));
    EXPECT_EQ(std::stod(csv_number(v)), v);
  }
  EXPECT_EQ(csv_number(std::nan("")), "nan");
  EXPECT_EQ(csv_number(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(csv_number(-std::numeric_limits<double>::infinity()), "-inf");
  std::ostringstream os;
  write_table_csv({{"pdhg_default", 10, 1.5, 0.25, 5, 7}}, os);
  EXPECT_EQ(os.str(), "method,depth,mean_gap,std_gap,n_instances,seed\npdhg_default,10,1.5,0.25,5,7\n");
}

TEST(AsConvergent, RecognizesTwoRelaxationSchemes) {
  const auto pd = as_convergent(preset_pdhg(0.3, 0.4, 1.0));
  ASSERT_TRUE(pd);
  EXPECT_EQ(pd->a21, 1.0);
  EXPECT_EQ(pd->c21, 1.0);
  EXPECT_EQ(pd->sigma, 0.3);
  EXPECT_EQ(pd->tau, 0.4);
  const auto ns = as_convergent(preset_new_solver(0.3, 0.4, 0.7, 1.3));
  ASSERT_TRUE(ns);
  EXPECT_EQ(ns->a21, 0.7);
  EXPECT_EQ(ns->c21, 1.3);
  const auto dr = as_convergent(preset_dr(0.3, 0.4, 1.5));
  ASSERT_TRUE(dr);
  EXPECT_EQ(dr->a21, 1.5);
  EXPECT_EQ(dr->c21, 1.5);
  EXPECT_FALSE(as_convergent(preset_pdhg(0.3, 0.4, 0.5)));
  EXPECT_FALSE(as_convergent(preset_fbf({0.1, 0.2})));
}

TEST(Diagnose, FejerRelationAndObjectiveColumn) {
  const auto& s = shared();
  const auto& inst = s.data.instances[0];
  const Problem p = inst.problem();
  const double L = s.data.ops.stacked_norm;
  const ConvergentParams prm{1.3, 0.6, 0.5 / L, 0.9 / L};
  ASSERT_TRUE(is_convergent(prm, L));
  const auto sol = reference_solution(p, L);
  const auto m = to_scheme(prm);
  const auto rows = diagnose_trace(p, m, 50, sol.x, sol.y);
  ASSERT_EQ(rows.size(), 50u);
  for (std::size_t k = 0; k + 1 < rows.size(); ++k) {
    EXPECT_EQ(rows[k].iter, k + 1);
    EXPECT_GE(rows[k].Q2_displacement, 0.0);
    const double slack = 1e-9 * std::max(1.0, rows[k].Q1);
    EXPECT_LE(rows[k + 1].Q1 - rows[k].Q1, -rows[k].Q2_displacement + slack) << k;
  }
  for (std::size_t depth : {1, 7, 50})
    EXPECT_DOUBLE_EQ(rows[depth - 1].objective, unrolled_objective(p, m, depth));
  const auto plain = diagnose_trace(p, preset_pdhg(0.5 / L, 0.5 / L, 0.5), 5, sol.x, sol.y);
  for (const auto& r : plain) {
    EXPECT_TRUE(std::isnan(r.Q1));
    EXPECT_TRUE(std::isnan(r.Q2_displacement));
    EXPECT_TRUE(std::isfinite(r.objective));
  }
  std::ostringstream os;
  write_diagnose_csv(plain, os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "iter,Q1,Q2_displacement,objective,fixed_point_residual");
}

TEST(Transfer, ConvergentSchemeStaysFiniteOnTomography) {
  const auto deb = family_operators(Family::deblur, 16);
  const auto tomo = make_dataset(small(Family::tomography), 2, 3);
  // Raw values from the deblurring family, decoded against the tomography norm.
  const ParamVector pv = initial_params(Mapping::new_solver_constrained, deb.stacked_norm);
  const auto m = decode(pv, tomo.ops.stacked_norm);
  for (const auto& inst : tomo.instances)
    EXPECT_TRUE(std::isfinite(unrolled_objective(inst.problem(), m, 300)));
}

TEST(Lambda, TvShareWithinCalibratedBand) {
  for (auto f : {Family::deblur, Family::deblur_aniso, Family::tomography}) {
    FamilyConfig c;
    c.family = f;
    const auto d = make_dataset(c, 2, 0);
    for (const auto& inst : d.instances) {
      const auto ref = reference_solve(inst, d.ops.stacked_norm, kBenchReferenceIterations);
      const double share = tv_fraction(inst, ref.x_star);
      EXPECT_GE(share, 0.1) << to_string(f);
      EXPECT_LE(share, 0.5) << to_string(f);
    }
  }
}
