#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "proxforge/prox.hpp"

using namespace proxforge;

namespace {

SpaceElement randn(std::size_t n, RngStream& r, double s = 1.0, std::string id = "R^n") {
  return gaussian_like(SpaceElement(make_space({n}, std::move(id))), r, 0.0, s);
}

// Minimizes a unimodal scalar function on [lo, hi] by golden-section search.
double golden_min(const std::function<double(double)>& f, double lo, double hi) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  for (int i = 0; i < 200; ++i) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) b = d;
    else a = c;
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST(Prox, ClosedFormsMatchScalarMinimization) {
  RngStream r(1);
  const auto b = randn(1, r);
  const std::vector<ProxFn> fns{ProxFn::zero(), ProxFn::sq_l2_dist(b, 0.7), ProxFn::l1(0.4),
                                ProxFn::strongly_convex_shift(ProxFn::l1(0.3), 2.0, b)};
  for (const auto& f : fns) {
    for (int t = 0; t < 20; ++t) {
      const double x = r.uniform(-3, 3), sigma = r.uniform(0.1, 3);
      const auto xe = SpaceElement::vector({x});
      const double got = prox(f, sigma, xe)[0];
      const double want = golden_min(
          [&](double z) { return value(f, SpaceElement::vector({z})) + (z - x) * (z - x) / (2 * sigma); },
          -10, 10);
      EXPECT_NEAR(got, want, 1e-7);
    }
  }
}

TEST(Prox, SoftThresholdValues) {
  const auto p = prox(ProxFn::l1(1.0), 0.5, SpaceElement::vector({2.0, -0.3, 0.5, -1.0}));
  EXPECT_EQ(p.values(), (std::vector<double>{1.5, 0.0, 0.0, -0.5}));
}

TEST(Prox, MoreauIdentityAgainstIndependentConjugateProx) {
  RngStream r(7);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + r.below(8);
    const auto x = randn(n, r, 2.0);
    const auto b = randn(n, r);
    const double tau = std::exp(r.uniform(-3, 3));
    const double w = std::exp(r.uniform(-2, 2));
    const int kind = t % 4;
    const auto c = oracles::conjugate_case(kind, w, b);
    // x = prox_{tau f}(x) + tau prox_{f*/tau}(x/tau)
    const auto recon = axpby(1.0, prox(c.f, tau, x), tau, c.conj_prox(1.0 / tau, scaled(1.0 / tau, x)));
    EXPECT_LE(norm(recon - x), 1e-14 * std::max(1.0, norm(x))) << "kind " << kind;
    // and prox_conjugate agrees with the direct conjugate prox
    const auto pc = prox_conjugate(c.f, tau, x);
    EXPECT_LE(norm(pc - c.conj_prox(tau, x)), 1e-12 * std::max(1.0, norm(x))) << "kind " << kind;
  }
}

TEST(Prox, FirmNonexpansiveness) {
  RngStream r(9);
  const auto b = randn(6, r);
  const std::vector<ProxFn> fns{ProxFn::sq_l2_dist(b, 1.3), ProxFn::l1(0.8),
                                ProxFn::strongly_convex_shift(ProxFn::l1(0.2), 0.5)};
  for (int t = 0; t < 200; ++t) {
    const auto& f = fns[static_cast<std::size_t>(t) % fns.size()];
    const double s = std::exp(r.uniform(-2, 2));
    const auto x = randn(6, r, 2), y = randn(6, r, 2);
    const auto d = prox(f, s, x) - prox(f, s, y);
    EXPECT_LE(norm_sq(d), inner(d, x - y) + 1e-12);
  }
}

TEST(Prox, SeparableSumActsPerPart) {
  RngStream r(4);
  const Space s1 = make_space({3}, "a"), s2 = make_space({2, 2}, "b");
  const auto bb = gaussian_like(SpaceElement(s2), r, 0, 1);
  const auto f = ProxFn::separable_sum({ProxFn::l1(0.5), ProxFn::sq_l2_dist(bb, 2.0)}, {s1, s2});
  const auto x = randn(7, r, 2);
  const auto p = prox(f, 0.7, x);
  const auto p1 = prox(ProxFn::l1(0.5), 0.7, SpaceElement(s1, {x[0], x[1], x[2]}));
  const auto p2 = prox(ProxFn::sq_l2_dist(bb, 2.0), 0.7, SpaceElement(s2, {x[3], x[4], x[5], x[6]}));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p[i], p1[i]);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p[3 + i], p2[i]);
  EXPECT_THROW(prox(f, 0.7, randn(6, r)), DimensionError);
}

TEST(Prox, ConjugateValues) {
  const auto b = SpaceElement::vector({1.0, -2.0});
  const auto y = SpaceElement::vector({0.5, 0.25});
  EXPECT_DOUBLE_EQ(conjugate_value(ProxFn::sq_l2_dist(b, 1.0), y), (0.25 + 0.0625) / 4 + 0.5 - 0.5);
  EXPECT_EQ(conjugate_value(ProxFn::l1(0.4), y), std::numeric_limits<double>::infinity());
  EXPECT_EQ(conjugate_value(ProxFn::l1(0.5), y), 0.0);
  EXPECT_EQ(conjugate_value(ProxFn::sq_l2_dist(b), SpaceElement::vector({0, 0})), 0.0);
}

TEST(Prox, NonpositiveScaleRejected) {
  const auto x = SpaceElement::vector({1.0});
  EXPECT_THROW(prox(ProxFn::l1(1), 0.0, x), ArgumentError);
  EXPECT_THROW(prox_conjugate(ProxFn::l1(1), -1.0, x), ArgumentError);
  EXPECT_THROW(ProxFn::sq_l2_dist(x, 0.0), ArgumentError);
  EXPECT_THROW(ProxFn::strongly_convex_shift(ProxFn::zero(), 0.0), ArgumentError);
}

class ProxVjp : public ::testing::TestWithParam<int> {};

TEST_P(ProxVjp, MatchesCentralDifferences) {
  RngStream r(100 + static_cast<std::uint64_t>(GetParam()));
  const std::size_t n = 5;
  const auto b = randn(n, r);
  const Space lay1 = make_space({2}, "p"), lay2 = make_space({3}, "q");
  const std::vector<ProxFn> fns{
      ProxFn::zero(),
      ProxFn::sq_l2_dist(b, 0.8),
      ProxFn::l1(0.3),
      ProxFn::strongly_convex_shift(ProxFn::l1(0.3), 1.5, b),
      ProxFn::strongly_convex_shift(ProxFn::sq_l2_dist(b, 0.5), 0.7),
      ProxFn::separable_sum({ProxFn::l1(0.2), ProxFn::sq_l2_dist(randn(3, r, 1, "q"), 1.0)},
                            {lay1, lay2})};
  const auto& f = fns[static_cast<std::size_t>(GetParam())];
  const auto x = randn(n, r, 2);
  const auto u = randn(n, r);
  const double s = 0.9, h = 1e-6;
  // Jacobian-vector product by differences, checked through <u, J v>.
  const auto v = randn(n, r);
  const double fd_x = (inner(u, prox(f, s, axpby(1, x, h, v))) - inner(u, prox(f, s, axpby(1, x, -h, v)))) / (2 * h);
  EXPECT_NEAR(inner(prox_vjp(f, s, x, u), v), fd_x, 1e-6);
  const double fd_s = (inner(u, prox(f, s + h, x)) - inner(u, prox(f, s - h, x))) / (2 * h);
  EXPECT_NEAR(prox_scale_vjp(f, s, x, u), fd_s, 1e-6);
  const double fdc_x = (inner(u, prox_conjugate(f, s, axpby(1, x, h, v))) -
                        inner(u, prox_conjugate(f, s, axpby(1, x, -h, v)))) / (2 * h);
  EXPECT_NEAR(inner(prox_conjugate_vjp(f, s, x, u), v), fdc_x, 1e-6);
  const double fdc_s = (inner(u, prox_conjugate(f, s + h, x)) - inner(u, prox_conjugate(f, s - h, x))) / (2 * h);
  EXPECT_NEAR(prox_conjugate_scale_vjp(f, s, x, u), fdc_s, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, ProxVjp, ::testing::Range(0, 6));

TEST(Prox, KinkConventionIsZero) {
  const auto x = SpaceElement::vector({0.5, -0.5, 0.7});
  const auto u = SpaceElement::vector({1.0, 1.0, 1.0});
  const auto g = prox_vjp(ProxFn::l1(1.0), 0.5, x, u);
  EXPECT_EQ(g.values(), (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Prox, JsonRoundTrip) {
  RngStream r(3);
  const auto b = randn(3, r);
  const auto f = ProxFn::strongly_convex_shift(ProxFn::sq_l2_dist(b, 0.5), 2.0, b);
  const auto g = prox_fn_from_json(to_json(f));
  const auto x = randn(3, r);
  EXPECT_EQ(prox(f, 0.3, x).values(), prox(g, 0.3, x).values());
  EXPECT_THROW(prox_fn_from_json({{"kind", "huber"}}), ArgumentError);
}
