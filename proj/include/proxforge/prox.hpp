#pragma once

// Proximal calculus for the objective atoms: values, prox maps, conjugate
// prox via the Moreau decomposition, and vector-Jacobian products of the prox
// maps (with respect to the input point and to the prox scale).

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace proxforge {

class ProxFn {
 public:
  enum class Kind { zero, sq_l2_dist, l1, separable_sum, strongly_convex_shift };

  static ProxFn zero() { return ProxFn(Kind::zero); }

  /// y -> weight * ||y - b||^2 (no factor 1/2).
  static ProxFn sq_l2_dist(SpaceElement b, double weight = 1.0) {
    if (!(weight > 0.0)) throw ArgumentError("sq_l2_dist: weight must be > 0");
    ProxFn f(Kind::sq_l2_dist);
    f.b_ = std::move(b);
    f.weight_ = weight;
    return f;
  }

  /// y -> weight * ||y||_1.
  static ProxFn l1(double weight) {
    if (!(weight >= 0.0)) throw ArgumentError("l1: weight must be >= 0");
    ProxFn f(Kind::l1);
    f.weight_ = weight;
    return f;
  }

  /// sum_i parts[i](y_i) on a flat element laid out as concatenated layout[i].
  static ProxFn separable_sum(std::vector<ProxFn> parts, std::vector<Space> layout) {
    if (parts.size() != layout.size() || parts.empty())
      throw ArgumentError("separable_sum: parts and layout must match and be non-empty");
    ProxFn f(Kind::separable_sum);
    f.parts_ = std::move(parts);
    f.layout_ = std::move(layout);
    return f;
  }

  /// base(x) + mu/2 ||x - center||^2; center defaults to 0.
  static ProxFn strongly_convex_shift(ProxFn base, double mu,
                                     std::optional<SpaceElement> center = std::nullopt) {
    if (!(mu > 0.0)) throw ArgumentError("strongly_convex_shift: mu must be > 0");
    ProxFn f(Kind::strongly_convex_shift);
    f.base_ = std::make_shared<const ProxFn>(std::move(base));
    f.mu_ = mu;
    f.center_ = std::move(center);
    return f;
  }

  Kind kind() const { return kind_; }
  double weight() const { return weight_; }
  double mu() const { return mu_; }
  const std::optional<SpaceElement>& data() const { return b_; }
  const std::optional<SpaceElement>& center() const { return center_; }
  const std::vector<ProxFn>& parts() const { return parts_; }
  const std::vector<Space>& layout() const { return layout_; }
  const ProxFn& base() const { return *base_; }

 private:
  explicit ProxFn(Kind k) : kind_(k) {}

  Kind kind_;
  double weight_ = 0.0;
  double mu_ = 0.0;
  std::optional<SpaceElement> b_;
  std::optional<SpaceElement> center_;
  std::vector<ProxFn> parts_;
  std::vector<Space> layout_;
  std::shared_ptr<const ProxFn> base_;
};

namespace detail {

inline void require_positive_scale(double s, const char* what) {
  if (!(s > 0.0)) throw ArgumentError(std::string(what) + ": scale must be > 0");
}

inline std::vector<SpaceElement> split_parts(const ProxFn& f, const SpaceElement& x) {
  std::size_t total = 0;
  for (const auto& s : f.layout()) total += s.size();
  if (total != x.size()) throw DimensionError("separable_sum: component mismatch");
  std::vector<SpaceElement> out;
  std::size_t off = 0;
  for (const auto& s : f.layout()) {
    std::vector<double> d(x.data().begin() + static_cast<std::ptrdiff_t>(off),
                          x.data().begin() + static_cast<std::ptrdiff_t>(off + s.size()));
    out.emplace_back(s, std::move(d));
    off += s.size();
  }
  return out;
}

inline SpaceElement join_parts(const std::vector<SpaceElement>& parts, const Space& like) {
  std::vector<double> d;
  for (const auto& p : parts) d.insert(d.end(), p.data().begin(), p.data().end());
  return SpaceElement(like, std::move(d));
}

inline SpaceElement center_or_zero(const ProxFn& f, const SpaceElement& like) {
  if (f.center()) {
    require_same_space(*f.center(), like, "strongly_convex_shift");
    return *f.center();
  }
  return zeros_like(like);
}

}  // namespace detail

inline double value(const ProxFn& f, const SpaceElement& x) {
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return 0.0;
    case ProxFn::Kind::sq_l2_dist: {
      require_same_space(x, *f.data(), "sq_l2_dist");
      return f.weight() * norm_sq(x - *f.data());
    }
    case ProxFn::Kind::l1: {
      double s = 0.0;
      for (double v : x.data()) s += std::abs(v);
      return f.weight() * s;
    }
    case ProxFn::Kind::separable_sum: {
      const auto xs = detail::split_parts(f, x);
      double s = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i) s += value(f.parts()[i], xs[i]);
      return s;
    }
    case ProxFn::Kind::strongly_convex_shift: {
      const auto c = detail::center_or_zero(f, x);
      return value(f.base(), x) + 0.5 * f.mu() * norm_sq(x - c);
    }
  }
  return 0.0;
}

inline double value(const ProxFn& f, const ProductElement& x) {
  if (f.kind() != ProxFn::Kind::separable_sum)
    throw DimensionError("value: product input needs a separable_sum");
  if (x.parts.size() != f.parts().size())
    throw DimensionError("value: component mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.parts.size(); ++i) s += value(f.parts()[i], x.parts[i]);
  return s;
}

/// Convex conjugate f*(y), +inf outside its domain.
inline double conjugate_value(const ProxFn& f, const SpaceElement& y) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      for (double v : y.data())
        if (v != 0.0) return inf;
      return 0.0;
    case ProxFn::Kind::sq_l2_dist:
      require_same_space(y, *f.data(), "sq_l2_dist");
      return norm_sq(y) / (4.0 * f.weight()) + inner(y, *f.data());
    case ProxFn::Kind::l1:
      for (double v : y.data())
        if (std::abs(v) > f.weight()) return inf;
      return 0.0;
    case ProxFn::Kind::separable_sum: {
      const auto ys = detail::split_parts(f, y);
      double s = 0.0;
      for (std::size_t i = 0; i < ys.size(); ++i) s += conjugate_value(f.parts()[i], ys[i]);
      return s;
    }
    case ProxFn::Kind::strongly_convex_shift: {
      if (f.base().kind() != ProxFn::Kind::zero)
        throw ArgumentError("conjugate_value: only available for a shifted zero function");
      const auto c = detail::center_or_zero(f, y);
      return norm_sq(y) / (2.0 * f.mu()) + inner(y, c);
    }
  }
  return 0.0;
}

/// argmin_z f(z) + 1/(2 sigma) ||z - x||^2.
inline SpaceElement prox(const ProxFn& f, double sigma, const SpaceElement& x) {
  detail::require_positive_scale(sigma, "prox");
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return x;
    case ProxFn::Kind::sq_l2_dist: {
      const double k = 2.0 * sigma * f.weight();
      return axpby(1.0 / (1.0 + k), x, k / (1.0 + k), *f.data());
    }
    case ProxFn::Kind::l1: {
      const double t = f.weight() * sigma;
      SpaceElement out = x;
      for (double& v : out.data()) {
        const double a = std::abs(v) - t;
        v = a > 0.0 ? std::copysign(a, v) : 0.0;
      }
      return out;
    }
    case ProxFn::Kind::separable_sum: {
      auto xs = detail::split_parts(f, x);
      for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = prox(f.parts()[i], sigma, xs[i]);
      return detail::join_parts(xs, x.space());
    }
    case ProxFn::Kind::strongly_convex_shift: {
      // Folding the quadratic into the proximal term:
      // scale sigma / (1 + sigma mu), point (x + sigma mu c) / (1 + sigma mu).
      const double d = 1.0 + sigma * f.mu();
      const auto c = detail::center_or_zero(f, x);
      return prox(f.base(), sigma / d, axpby(1.0 / d, x, sigma * f.mu() / d, c));
    }
  }
  return x;
}

/// Prox of the conjugate: x - tau * prox(f, 1/tau, x/tau).
inline SpaceElement prox_conjugate(const ProxFn& f, double tau, const SpaceElement& x) {
  detail::require_positive_scale(tau, "prox_conjugate");
  return axpby(1.0, x, -tau, prox(f, 1.0 / tau, scaled(1.0 / tau, x)));
}

/// Transposed Jacobian of x -> prox(f, sigma, x) applied to upstream. At
/// soft-threshold kinks (|x_i| == weight*sigma) the derivative is taken as 0.
inline SpaceElement prox_vjp(const ProxFn& f, double sigma, const SpaceElement& x,
                             const SpaceElement& upstream) {
  detail::require_positive_scale(sigma, "prox_vjp");
  require_same_space(x, upstream, "prox_vjp");
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return upstream;
    case ProxFn::Kind::sq_l2_dist:
      return scaled(1.0 / (1.0 + 2.0 * sigma * f.weight()), upstream);
    case ProxFn::Kind::l1: {
      const double t = f.weight() * sigma;
      SpaceElement out = upstream;
      const auto xs = x.data();
      auto o = out.data();
      for (std::size_t i = 0; i < o.size(); ++i)
        if (!(std::abs(xs[i]) > t)) o[i] = 0.0;
      return out;
    }
    case ProxFn::Kind::separable_sum: {
      const auto xs = detail::split_parts(f, x);
      auto us = detail::split_parts(f, upstream);
      for (std::size_t i = 0; i < xs.size(); ++i)
        us[i] = prox_vjp(f.parts()[i], sigma, xs[i], us[i]);
      return detail::join_parts(us, x.space());
    }
    case ProxFn::Kind::strongly_convex_shift: {
      const double d = 1.0 + sigma * f.mu();
      const auto c = detail::center_or_zero(f, x);
      const auto inner_pt = axpby(1.0 / d, x, sigma * f.mu() / d, c);
      return scaled(1.0 / d, prox_vjp(f.base(), sigma / d, inner_pt, upstream));
    }
  }
  return upstream;
}

/// <upstream, d prox(f, sigma, x) / d sigma>.
inline double prox_scale_vjp(const ProxFn& f, double sigma, const SpaceElement& x,
                             const SpaceElement& upstream) {
  detail::require_positive_scale(sigma, "prox_scale_vjp");
  require_same_space(x, upstream, "prox_scale_vjp");
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return 0.0;
    case ProxFn::Kind::sq_l2_dist: {
      const double w = f.weight();
      const double d = 1.0 + 2.0 * sigma * w;
      // d/dsigma (x + 2 sigma w b)/(1 + 2 sigma w) = 2w (b - x) / d^2
      return 2.0 * w / (d * d) * (inner(upstream, *f.data()) - inner(upstream, x));
    }
    case ProxFn::Kind::l1: {
      const double t = f.weight() * sigma;
      const auto xs = x.data();
      const auto us = upstream.data();
      double s = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (std::abs(xs[i]) > t) s -= f.weight() * std::copysign(1.0, xs[i]) * us[i];
      return s;
    }
    case ProxFn::Kind::separable_sum: {
      const auto xs = detail::split_parts(f, x);
      const auto us = detail::split_parts(f, upstream);
      double s = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i)
        s += prox_scale_vjp(f.parts()[i], sigma, xs[i], us[i]);
      return s;
    }
    case ProxFn::Kind::strongly_convex_shift: {
      const double mu = f.mu();
      const double d = 1.0 + sigma * mu;
      const auto c = detail::center_or_zero(f, x);
      const auto inner_pt = axpby(1.0 / d, x, sigma * mu / d, c);
      const double inner_scale = sigma / d;
      // d(inner_scale)/dsigma = 1/d^2, d(inner_pt)/dsigma = mu (c - x) / d^2
      const double via_scale = prox_scale_vjp(f.base(), inner_scale, inner_pt, upstream) / (d * d);
      const auto jt = prox_vjp(f.base(), inner_scale, inner_pt, upstream);
      const double via_point = mu / (d * d) * (inner(jt, c) - inner(jt, x));
      return via_scale + via_point;
    }
  }
  return 0.0;
}

/// Transposed Jacobian of x -> prox_conjugate(f, tau, x).
inline SpaceElement prox_conjugate_vjp(const ProxFn& f, double tau, const SpaceElement& x,
                                       const SpaceElement& upstream) {
  detail::require_positive_scale(tau, "prox_conjugate_vjp");
  return upstream - prox_vjp(f, 1.0 / tau, scaled(1.0 / tau, x), upstream);
}

/// <upstream, d prox_conjugate(f, tau, x) / d tau>.
inline double prox_conjugate_scale_vjp(const ProxFn& f, double tau, const SpaceElement& x,
                                       const SpaceElement& upstream) {
  detail::require_positive_scale(tau, "prox_conjugate_scale_vjp");
  // P*(x) = x - tau P(1/tau, x/tau)
  // dP*/dtau = -P + (1/tau) dP/ds + (1/tau) J x
  const double s = 1.0 / tau;
  const auto z = scaled(s, x);
  const auto p = prox(f, s, z);
  const auto jt = prox_vjp(f, s, z, upstream);
  return -inner(upstream, p) + s * prox_scale_vjp(f, s, z, upstream) + s * inner(jt, x);
}

// ---------------------------------------------------------------------------
// JSON descriptors

inline nlohmann::json element_to_json(const SpaceElement& e) {
  return {{"shape", e.shape()}, {"space_id", e.space_id()}, {"data", e.values()}};
}

inline SpaceElement element_from_json(const nlohmann::json& j) {
  SpaceElement e(make_space(j.at("shape").get<Shape>(), j.at("space_id").get<std::string>()),
                 j.at("data").get<std::vector<double>>());
  if (!e.all_finite()) throw NumericalError("element contains non-finite values");
  return e;
}

inline nlohmann::json to_json(const ProxFn& f) {
  switch (f.kind()) {
    case ProxFn::Kind::zero:
      return {{"kind", "zero"}};
    case ProxFn::Kind::sq_l2_dist:
      return {{"kind", "sq_l2_dist"}, {"weight", f.weight()}, {"b", element_to_json(*f.data())}};
    case ProxFn::Kind::l1:
      return {{"kind", "l1"}, {"weight", f.weight()}};
    case ProxFn::Kind::separable_sum: {
      nlohmann::json parts = nlohmann::json::array();
      nlohmann::json layout = nlohmann::json::array();
      for (const auto& p : f.parts()) parts.push_back(to_json(p));
      for (const auto& s : f.layout()) layout.push_back({{"shape", s.shape}, {"space_id", s.id}});
      return {{"kind", "separable_sum"}, {"parts", parts}, {"layout", layout}};
    }
    case ProxFn::Kind::strongly_convex_shift: {
      nlohmann::json j{{"kind", "strongly_convex_shift"}, {"mu", f.mu()}, {"base", to_json(f.base())}};
      if (f.center()) j["center"] = element_to_json(*f.center());
      return j;
    }
  }
  return {};
}

inline ProxFn prox_fn_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "zero") return ProxFn::zero();
  if (kind == "l1") return ProxFn::l1(j.at("weight").get<double>());
  if (kind == "sq_l2_dist")
    return ProxFn::sq_l2_dist(element_from_json(j.at("b")), j.at("weight").get<double>());
  if (kind == "separable_sum") {
    std::vector<ProxFn> parts;
    std::vector<Space> layout;
    for (const auto& p : j.at("parts")) parts.push_back(prox_fn_from_json(p));
    for (const auto& s : j.at("layout"))
      layout.push_back(make_space(s.at("shape").get<Shape>(), s.at("space_id").get<std::string>()));
    return ProxFn::separable_sum(std::move(parts), std::move(layout));
  }
  if (kind == "strongly_convex_shift") {
    std::optional<SpaceElement> c;
    if (j.contains("center")) c = element_from_json(j.at("center"));
    return ProxFn::strongly_convex_shift(prox_fn_from_json(j.at("base")), j.at("mu").get<double>(),
                                         std::move(c));
  }
  throw ArgumentError("unknown prox function kind: " + kind);
}

}  // namespace proxforge
