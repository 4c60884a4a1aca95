#include <gtest/gtest.h>

#include <atomic>
#include <cmath>

#include "proxforge/convergence.hpp"
#include "proxforge/scheme.hpp"
#include "oracles.hpp"

using namespace proxforge;

namespace {

using namespace oracles;

class CountingImpl final : public LinOpImpl {
 public:
  explicit CountingImpl(LinOp inner) : inner_(std::move(inner)) {}
  const Space& domain() const override { return inner_.domain(); }
  const Space& range() const override { return inner_.range(); }
  void apply(const SpaceElement& x, SpaceElement& out) const override {
    ++forward;
    out = inner_.apply(x);
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    ++backward;
    out = inner_.adjoint(y);
  }
  std::string name() const override { return "counting"; }
  mutable std::atomic<int> forward{0};
  mutable std::atomic<int> backward{0};

 private:
  LinOp inner_;
};

}  // namespace

TEST(Presets, MatricesMatchDisplayedForms) {
  const auto p = preset_pdhg(0.5, 0.5, 1.0);
  const auto& s = p.stages.front();
  EXPECT_EQ(s.dual.front().A, detail::mat2(1, 0, 1, 0));
  EXPECT_EQ(s.dual.front().B, detail::mat2(0.5, 1, 0, 1));
  EXPECT_EQ(s.C, detail::mat2(2, -1, 1, 0));
  EXPECT_EQ(s.D, detail::mat2(-0.5, 1, 0, 1));
  EXPECT_EQ(preset_pdhg(1, 1, 0.0).stages[0].C, detail::mat2(1, 0, 1, 0));
  EXPECT_EQ(preset_dr(1, 1, 1.0).stages[0].dual[0].A, detail::mat2(1, 0, 1, 0));
  const auto dr = preset_dr(0.3, 0.4, 1.5).stages[0];
  EXPECT_EQ(dr.dual[0].A, detail::mat2(1.5, -0.5, 1.5, -0.5));
  EXPECT_EQ(dr.C, detail::mat2(2, -1, 1.5, -0.5));
  EXPECT_EQ(preset_new_solver(1, 1, 1, 1).stages[0].C, detail::mat2(2, -1, 1, 0));
  EXPECT_THROW(preset_new_solver(1, 1, 0, 1), ArgumentError);
  EXPECT_THROW(preset_dr(1, 1, 2.0, true), ArgumentError);
  EXPECT_NO_THROW(preset_dr(1, 1, 2.0));
  EXPECT_THROW(preset_pdhg(0, 1, 1), ArgumentError);
}

TEST(Presets, FbfMatrices) {
  const auto m = preset_fbf({0.4, 0.2});
  ASSERT_EQ(m.stages.size(), 4u);
  EXPECT_EQ(m.N, 3u);
  const auto& even = m.stages[0];
  EXPECT_EQ(even.dual[0].B.row(0), Eigen::RowVector3d(0.4, 0, 1));
  EXPECT_TRUE(even.dual[0].A.row(1).isZero());
  EXPECT_TRUE(even.C.row(1).isZero());
  EXPECT_TRUE(m.stages[1].dual[0].B.row(0).isZero());
  EXPECT_TRUE(m.stages[1].D.topRows(2).isZero());
  EXPECT_EQ(m.stages[2].dual[0].B(0, 0), 0.2);
  EXPECT_THROW(preset_fbf({}), ArgumentError);
  EXPECT_THROW(preset_fbf({0.1, -1.0}), ArgumentError);
}

TEST(Engine, PdhgMatchesDirectTranscription) {
  const auto P = tv_toy(24, 1);
  const Toy T{P};
  for (double theta : {1.0, 0.5, 0.0}) {
    const double s = 0.4, t = 0.55;
    const auto want = pdhg_direct(T, s, t, theta, 20);
    const auto m = preset_pdhg(s, t, theta);
    auto st = zero_state(P, 2, 2);
    for (int k = 0; k < 20; ++k) {
      st = step(P, m, st);
      EXPECT_LE(max_diff(st.primal[1], want[k].x), 1e-12);
      EXPECT_LE(max_diff(st.dual[0][1], want[k].y), 1e-12);
    }
  }
}

TEST(Engine, DouglasRachfordMatchesDirectTranscription) {
  const auto P = tv_toy(24, 2);
  const Toy T{P};
  const double s = 0.5, t = 0.45, lam = 1.3;
  const auto m = preset_dr(s, t, lam, true);
  auto st = step(P, m, zero_state(P, 2, 2));
  // The engine evaluates the dual half first, so the textbook run starts
  // from x = 0 and the dual iterate after one engine step.
  const auto want = dr_direct(T, s, t, lam, T.zx(), st.dual[0][1], 20);
  for (int k = 0; k < 20; ++k) {
    EXPECT_LE(max_diff(st.primal[1], want[k].x), 1e-12);
    st = step(P, m, st);
    EXPECT_LE(max_diff(st.dual[0][1], want[k].y), 1e-12);
  }
}

TEST(Engine, NewSolverMatchesDirectTranscription) {
  const auto P = tv_toy(24, 3);
  const Toy T{P};
  for (auto [a, c] : {std::pair{0.7, 1.4}, std::pair{1.5, 0.4}, std::pair{1.0, 1.0}}) {
    const double s = 0.3, t = 0.6;
    const auto want = two_relaxation_direct(T, s, t, a, c, 20);
    const auto m = preset_new_solver(s, t, a, c);
    auto st = zero_state(P, 2, 2);
    for (int k = 0; k < 20; ++k) {
      st = step(P, m, st);
      EXPECT_LE(max_diff(st.primal[1], want[k].x), 1e-12);
      EXPECT_LE(max_diff(st.dual[0][1], want[k].y), 1e-12);
    }
  }
}

TEST(Engine, EqualRelaxationsReduceToDouglasRachford) {
  const auto P = tv_toy(30, 4);
  for (double lam : {0.5, 1.0, 1.7}) {
    const auto a = run(P, preset_new_solver(0.4, 0.5, lam, lam), zero_state(P, 2, 2), 20);
    const auto b = run(P, preset_dr(0.4, 0.5, lam), zero_state(P, 2, 2), 20);
    for (int k = 0; k < 2; ++k) {
      EXPECT_LE(max_diff(a.primal[k], b.primal[k]), 1e-12);
      EXPECT_LE(max_diff(a.dual[0][k], b.dual[0][k]), 1e-12);
    }
  }
}

TEST(Engine, RandomConsistentMatricesMatchGeneralRecursion) {
  const auto P = tv_toy(20, 5);
  const Toy T{P};
  RngStream r(55);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_consistent(r);
    ASSERT_TRUE(check_fixed_point_conditions(m).ok);
    const auto want = general_2x2_direct(T, m, 20);
    auto st = zero_state(P, 2, 2);
    for (int k = 0; k < 20; ++k) {
      st = step(P, m, st);
      const double scale = std::max(1.0, norm(want[k].x) + norm(want[k].y));
      EXPECT_LE(max_diff(st.primal[1], want[k].x), 1e-12 * scale);
      EXPECT_LE(max_diff(st.dual[0][1], want[k].y), 1e-12 * scale);
    }
  }
}

TEST(Engine, FbfTwoStepsAreOneForwardBackwardForwardIteration) {
  const auto P = tv_toy(16, 6);
  const Toy T{P};
  const std::vector<double> gamma{0.3, 0.45, 0.2, 0.35, 0.4};
  const auto m = preset_fbf(gamma);
  auto x = T.zx();
  auto y = T.zy();
  auto st = zero_state(P, 3, 3);
  for (std::size_t n = 0; n < 2 * gamma.size(); ++n) {
    const double g = gamma[n % gamma.size()];
    // forward, backward, forward
    const auto p1 = x - scaled(g, T.Lt(y));
    const auto p2 = y + scaled(g, T.L(x));
    const auto r1 = T.proxF(g, p1);
    const auto r2 = T.proxGs(g, p2);
    const auto q1 = r1 - scaled(g, T.Lt(r2));
    const auto q2 = r2 + scaled(g, T.L(r1));
    x = x - p1 + q1;
    y = y - p2 + q2;
    st = step(P, m, step(P, m, st));
    EXPECT_LE(max_diff(st.primal[0], x), 1e-12);
    EXPECT_LE(max_diff(st.dual[0][2], y), 1e-12);
  }
}

TEST(Engine, OneForwardAndOneAdjointPerBlockPerStep) {
  const Space s = make_space({12}, "signal");
  auto c1 = std::make_shared<CountingImpl>(gradient_op(s));
  auto c2 = std::make_shared<CountingImpl>(identity_op(s));
  const Problem P(ProxFn::zero(), {{ProxFn::l1(0.1), LinOp(c1)}, {ProxFn::sq_l2_dist(SpaceElement(s)), LinOp(c2)}}, s);
  auto st = zero_state(P, 2, 2);
  const auto m = preset_new_solver(0.3, 0.3, 0.8, 1.2);
  for (int k = 1; k <= 7; ++k) {
    st = step(P, m, st);
    EXPECT_EQ(c1->forward, k);
    EXPECT_EQ(c1->backward, k);
    EXPECT_EQ(c2->forward, k);
    EXPECT_EQ(c2->backward, k);
  }
}

TEST(FixedPoint, PresetsSatisfyConditionsExactly) {
  EXPECT_TRUE(check_fixed_point_conditions(preset_pdhg(0.3, 0.7, 1.0), 0.0).ok);
  EXPECT_TRUE(check_fixed_point_conditions(preset_dr(0.3, 0.7, 1.0), 0.0).ok);
  EXPECT_TRUE(check_fixed_point_conditions(preset_pdhg(0.3, 0.7, 0.4)).ok);
  EXPECT_TRUE(check_fixed_point_conditions(preset_dr(0.3, 0.7, 1.5)).ok);
  EXPECT_TRUE(check_fixed_point_conditions(preset_new_solver(0.3, 0.7, 1.0, 1.0), 0.0).ok);
  // c11 + c12 = 1 + r - r may round away from 1, hence the default tolerance.
  EXPECT_TRUE(check_fixed_point_conditions(preset_new_solver(0.3, 0.7, 0.7, 1.3)).ok);
  auto bad = preset_pdhg(0.3, 0.7, 1.0);
  bad.stages[0].dual[0].A(1, 1) = 0.5;
  const auto chk = check_fixed_point_conditions(bad);
  EXPECT_FALSE(chk.ok);
  EXPECT_EQ(chk.violations.front(), "a21 + a22 = 1");
  EXPECT_FALSE(check_fixed_point_conditions(preset_fbf({0.1})).ok);
}

TEST(FixedPoint, InjectedSolutionDoesNotMove) {
  const auto P = tv_toy(32, 7);
  const double L = 2.0;
  const auto ref = reference_solution(P, L, 20000, 1e-12);
  RngStream r(77);
  std::vector<SchemeMatrices> schemes{preset_pdhg(0.4, 0.6, 1.0), preset_pdhg(0.4, 0.6, 0.3),
                                      preset_dr(0.5, 0.5, 1.5), preset_new_solver(0.2, 0.3, 0.7, 1.6)};
  for (int i = 0; i < 5; ++i) schemes.push_back(random_consistent(r));
  for (const auto& m : schemes) {
    const auto st = fixed_point_state(m, ref.x, ref.y);
    const auto nx = step(P, m, st);
    double disp = 0.0;
    for (int k = 0; k < 2; ++k)
      disp = std::max({disp, max_diff(nx.primal[k], st.primal[k]), max_diff(nx.dual[0][k], st.dual[0][k])});
    EXPECT_LE(disp, 1e-8);
  }
}

TEST(FixedPoint, ResidualProperties) {
  const auto P = tv_toy(32, 8);
  const auto ref = reference_solution(P, 2.0);
  EXPECT_LE(ref.residual, 1e-6);
  EXPECT_LE(fixed_point_residual(P, {0.3}, 0.3, ref.x, ref.y), 1e-6);
  EXPECT_LE(fixed_point_residual(P, {0.6}, 0.6, ref.x, ref.y), 1e-6);
  const auto m = preset_pdhg(0.3, 0.3, 1.0);
  const auto z = zero_state(P, 2, 2);
  const double r1 = fixed_point_residual(P, m, z);
  const double r2 = fixed_point_residual(P, preset_pdhg(0.6, 0.6, 1.0), z);
  EXPECT_GT(r1, 0.0);
  EXPECT_NE(r1, r2);
}

TEST(Engine, StateChecks) {
  const auto P = tv_toy(8, 9);
  const auto m = preset_pdhg(0.3, 0.3, 1.0);
  EXPECT_THROW(step(P, m, zero_state(P, 3, 2)), DimensionError);
  auto bad = m;
  bad.stages[0].tau = -1.0;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = m;
  bad.stages[0].C = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_THROW(bad.validate(), DimensionError);
}

TEST(SchemeJson, RoundTrip) {
  RngStream r(10);
  const auto m = random_consistent(r);
  const auto back = scheme_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(back.stages[0].C, m.stages[0].C);
  EXPECT_EQ(back.stages[0].dual[0].B, m.stages[0].dual[0].B);
  EXPECT_EQ(back.stages[0].tau, m.stages[0].tau);
  const auto f = scheme_from_json(to_json(preset_fbf({0.1, 0.2})));
  EXPECT_EQ(f.stages.size(), 4u);
}
