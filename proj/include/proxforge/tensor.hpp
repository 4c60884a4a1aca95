#pragma once

// Dense real vectors with shape metadata, product-space composition and a
// counter-based random stream.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace proxforge {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Identifies the Hilbert space an element lives in: its extents and an
/// opaque tag ("image", "sino", "grad(image)", ...).
struct Space {
  Shape shape;
  std::string id;

  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }
  bool operator==(const Space&) const = default;
};

inline Space make_space(Shape shape, std::string id) {
  if (shape.empty()) throw DimensionError("space must have at least one axis");
  for (auto e : shape)
    if (e == 0) throw DimensionError("zero-length spaces are not supported");
  return Space{std::move(shape), std::move(id)};
}

class SpaceElement {
 public:
  explicit SpaceElement(Space space) : space_(std::move(space)) {
    validate_space();
    data_.assign(space_.size(), 0.0);
  }

  SpaceElement(Space space, std::vector<double> data)
      : space_(std::move(space)), data_(std::move(data)) {
    validate_space();
    if (data_.size() != space_.size())
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " +
                           shape_string(space_.shape));
  }

  /// Flat 1-D element, mostly for tests and toys.
  static SpaceElement vector(std::vector<double> data,
                             std::string id = "R^n") {
    Shape s{data.size()};
    return SpaceElement(make_space(std::move(s), std::move(id)),
                        std::move(data));
  }

  const Space& space() const { return space_; }
  const Shape& shape() const { return space_.shape; }
  const std::string& space_id() const { return space_.id; }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_space() const {
    if (space_.shape.empty())
      throw DimensionError("space must have at least one axis");
    for (auto e : space_.shape)
      if (e == 0) throw DimensionError("zero-length spaces are not supported");
  }

  Space space_;
  std::vector<double> data_;
};

inline void require_same_space(const SpaceElement& a, const SpaceElement& b,
                               const char* what) {
  if (a.shape() != b.shape() || a.space_id() != b.space_id())
    throw DimensionError(std::string(what) + ": space mismatch " +
                         a.space_id() + shape_string(a.shape()) + " vs " +
                         b.space_id() + shape_string(b.shape()));
}

inline double inner(const SpaceElement& a, const SpaceElement& b) {
  require_same_space(a, b, "inner");
  const auto x = a.data();
  const auto y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm_sq(const SpaceElement& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

inline double norm(const SpaceElement& a) { return std::sqrt(norm_sq(a)); }

inline SpaceElement zeros_like(const SpaceElement& a) {
  return SpaceElement(a.space());
}

inline SpaceElement axpby(double alpha, const SpaceElement& a, double beta,
                          const SpaceElement& b) {
  require_same_space(a, b, "axpby");
  SpaceElement out(a.space());
  auto o = out.data();
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * x[i] + beta * y[i];
  return out;
}

inline SpaceElement scaled(double alpha, const SpaceElement& a) {
  SpaceElement out = a;
  for (double& v : out.data()) v *= alpha;
  return out;
}

inline SpaceElement operator+(const SpaceElement& a, const SpaceElement& b) {
  return axpby(1.0, a, 1.0, b);
}

inline SpaceElement operator-(const SpaceElement& a, const SpaceElement& b) {
  return axpby(1.0, a, -1.0, b);
}

/// y += alpha * x. For owned scratch buffers inside hot loops.
inline void axpy_inplace(double alpha, const SpaceElement& x, SpaceElement& y) {
  require_same_space(x, y, "axpy");
  const auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] += alpha * xs[i];
}

/// Ordered tuple (y_1, ..., y_m) of elements of possibly different spaces.
struct ProductElement {
  std::vector<SpaceElement> parts;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    return n;
  }

  /// Stacks the parts into a single flat element tagged "product".
  SpaceElement flatten() const {
    std::vector<double> all;
    all.reserve(size());
    for (const auto& p : parts)
      all.insert(all.end(), p.data().begin(), p.data().end());
    Space sp = make_space({all.size()}, "product");
    return SpaceElement(std::move(sp), std::move(all));
  }

  /// Inverse of flatten(), using this element's parts as the layout template.
  ProductElement unflatten(const SpaceElement& flat) const {
    if (flat.size() != size())
      throw DimensionError("unflatten: length mismatch");
    ProductElement out;
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::vector<double> d(flat.data().begin() + off,
                            flat.data().begin() + off + p.size());
      out.parts.emplace_back(p.space(), std::move(d));
      off += p.size();
    }
    return out;
  }
};

inline double inner(const ProductElement& a, const ProductElement& b) {
  if (a.parts.size() != b.parts.size())
    throw DimensionError("inner: product arity mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.parts.size(); ++i)
    s += inner(a.parts[i], b.parts[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Random numbers

/// Counter-based generator: draw k of stream (seed, stream) is a pure
/// function of (seed, stream, k), so results do not depend on which other
/// streams were consumed first.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent child stream; does not advance this one.
  RngStream split(std::uint64_t child) const {
    return RngStream(mix(seed_ ^ 0x6a09e667f3bcc909ULL, stream_ * 0x9e3779b97f4a7c15ULL + child + 1), 0);
  }

  std::uint64_t next_u64() { return mix(seed_, stream_ ^ mix(counter_++, 0x243f6a8885a308d3ULL)); }

  /// Uniform in the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    z += b;
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
    return z ^ (z >> 33);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

inline SpaceElement gaussian_like(const SpaceElement& proto, RngStream& rng,
                                  double mean, double stddev) {
  if (!(stddev >= 0.0)) throw ArgumentError("gaussian_like: negative std");
  SpaceElement out(proto.space());
  for (double& v : out.data()) v = mean + stddev * rng.normal();
  return out;
}

inline SpaceElement uniform_like(const SpaceElement& proto, RngStream& rng,
                                 double lo, double hi) {
  SpaceElement out(proto.space());
  for (double& v : out.data()) v = rng.uniform(lo, hi);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: <stem>.bin holds little-endian float64 values, <stem>.json
// holds {"shape": [...], "space_id": "..."}.

inline void write_element(const SpaceElement& e,
                          const std::filesystem::path& stem) {
  auto bin = stem;
  bin += ".bin";
  auto meta = stem;
  meta += ".json";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + bin.string());
  for (double v : e.data()) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(bits >> (8 * k));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  nlohmann::json j;
  j["shape"] = e.shape();
  j["space_id"] = e.space_id();
  std::ofstream(meta) << j.dump() << "\n";
}

inline SpaceElement read_element(const std::filesystem::path& stem) {
  auto bin = stem;
  bin += ".bin";
  auto meta = stem;
  meta += ".json";
  std::ifstream mj(meta);
  if (!mj) throw std::runtime_error("cannot open " + meta.string());
  const auto j = nlohmann::json::parse(mj);
  Space space = make_space(j.at("shape").get<Shape>(),
                           j.at("space_id").get<std::string>());
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + bin.string());
  std::vector<double> data(space.size());
  for (double& v : data) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8))
      throw DimensionError("element file shorter than its shape");
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t{bytes[k]} << (8 * k);
    v = std::bit_cast<double>(bits);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw DimensionError("element file longer than its shape");
  SpaceElement e(std::move(space), std::move(data));
  if (!e.all_finite()) throw NumericalError("element file contains non-finite values");
  return e;
}

}  // namespace proxforge
