#pragma once

// Linear operators with exact adjoints: finite-difference gradient,
// zero-padded convolution, pixel-driven parallel-beam Radon, dense matrices,
// stacking into product spaces, and power-method norm estimation.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tensor.hpp"

namespace proxforge {

class LinOpImpl {
 public:
  virtual ~LinOpImpl() = default;
  virtual const Space& domain() const = 0;
  virtual const Space& range() const = 0;
  // out is preallocated in the range (resp. domain) and zero-filled.
  virtual void apply(const SpaceElement& x, SpaceElement& out) const = 0;
  virtual void adjoint(const SpaceElement& y, SpaceElement& out) const = 0;
  virtual std::string name() const = 0;
};

/// Value-semantic handle to an immutable operator, with a scalar multiplier
/// and an (optional until estimated) upper bound on the operator norm.
class LinOp {
 public:
  LinOp() = default;
  explicit LinOp(std::shared_ptr<const LinOpImpl> impl,
                 std::optional<double> norm_bound = std::nullopt)
      : impl_(std::move(impl)), norm_bound_(norm_bound) {}

  const Space& domain() const { return impl_->domain(); }
  const Space& range() const { return impl_->range(); }
  std::string name() const { return impl_->name(); }
  double scale() const { return scale_; }
  std::optional<double> norm_bound() const { return norm_bound_; }

  SpaceElement apply(const SpaceElement& x) const {
    check_input(x, domain(), "apply");
    SpaceElement out(range());
    impl_->apply(x, out);
    if (scale_ != 1.0)
      for (double& v : out.data()) v *= scale_;
    return out;
  }

  SpaceElement adjoint(const SpaceElement& y) const {
    check_input(y, range(), "adjoint");
    SpaceElement out(domain());
    impl_->adjoint(y, out);
    if (scale_ != 1.0)
      for (double& v : out.data()) v *= scale_;
    return out;
  }

  LinOp scaled(double c) const {
    LinOp op = *this;
    op.scale_ *= c;
    if (norm_bound_) op.norm_bound_ = *norm_bound_ * std::abs(c);
    return op;
  }

  LinOp with_norm_bound(double bound) const {
    if (!(bound >= 0.0)) throw ArgumentError("norm bound must be >= 0");
    LinOp op = *this;
    op.norm_bound_ = bound;
    return op;
  }

  const LinOpImpl& impl() const { return *impl_; }

 private:
  static void check_input(const SpaceElement& x, const Space& s,
                          const char* what) {
    if (x.shape() != s.shape || x.space_id() != s.id)
      throw DimensionError(std::string("LinOp::") + what + ": expected " +
                           s.id + shape_string(s.shape) + ", got " +
                           x.space_id() + shape_string(x.shape()));
  }

  std::shared_ptr<const LinOpImpl> impl_;
  double scale_ = 1.0;
  std::optional<double> norm_bound_;
};

namespace detail {

class IdentityImpl final : public LinOpImpl {
 public:
  explicit IdentityImpl(Space s) : space_(std::move(s)) {}
  const Space& domain() const override { return space_; }
  const Space& range() const override { return space_; }
  void apply(const SpaceElement& x, SpaceElement& out) const override {
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    apply(y, out);
  }
  std::string name() const override { return "identity"; }

 private:
  Space space_;
};

class ZeroImpl final : public LinOpImpl {
 public:
  ZeroImpl(Space d, Space r) : domain_(std::move(d)), range_(std::move(r)) {}
  const Space& domain() const override { return domain_; }
  const Space& range() const override { return range_; }
  void apply(const SpaceElement&, SpaceElement&) const override {}
  void adjoint(const SpaceElement&, SpaceElement&) const override {}
  std::string name() const override { return "zero"; }

 private:
  Space domain_, range_;
};

class MatrixImpl final : public LinOpImpl {
 public:
  MatrixImpl(Eigen::MatrixXd m, Space d, Space r)
      : m_(std::move(m)), domain_(std::move(d)), range_(std::move(r)) {}
  const Space& domain() const override { return domain_; }
  const Space& range() const override { return range_; }
  void apply(const SpaceElement& x, SpaceElement& out) const override {
    Eigen::Map<const Eigen::VectorXd> xv(x.data().data(), x.size());
    Eigen::Map<Eigen::VectorXd> ov(out.data().data(), out.size());
    ov.noalias() = m_ * xv;
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    Eigen::Map<const Eigen::VectorXd> yv(y.data().data(), y.size());
    Eigen::Map<Eigen::VectorXd> ov(out.data().data(), out.size());
    ov.noalias() = m_.transpose() * yv;
  }
  std::string name() const override { return "matrix"; }
  const Eigen::MatrixXd& matrix() const { return m_; }

 private:
  Eigen::MatrixXd m_;
  Space domain_, range_;
};

// Forward differences along each axis; the last difference along an axis is
// zero (replicate boundary). Range shape is {ndim, extents...}.
class GradientImpl final : public LinOpImpl {
 public:
  explicit GradientImpl(Space image) : domain_(std::move(image)) {
    const auto& s = domain_.shape;
    if (s.size() != 1 && s.size() != 2)
      throw DimensionError("gradient: image must be 1-D or 2-D");
    Shape r{s.size()};
    r.insert(r.end(), s.begin(), s.end());
    range_ = make_space(std::move(r), "grad(" + domain_.id + ")");
  }
  const Space& domain() const override { return domain_; }
  const Space& range() const override { return range_; }

  void apply(const SpaceElement& x, SpaceElement& out) const override {
    const auto& s = domain_.shape;
    const auto in = x.data();
    auto g = out.data();
    if (s.size() == 1) {
      for (std::size_t i = 0; i + 1 < s[0]; ++i) g[i] = in[i + 1] - in[i];
      return;
    }
    const std::size_t rows = s[0], cols = s[1], n = rows * cols;
    for (std::size_t i = 0; i + 1 < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        g[i * cols + j] = in[(i + 1) * cols + j] - in[i * cols + j];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j + 1 < cols; ++j)
        g[n + i * cols + j] = in[i * cols + j + 1] - in[i * cols + j];
  }

  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    const auto& s = domain_.shape;
    const auto g = y.data();
    auto o = out.data();
    if (s.size() == 1) {
      const std::size_t n = s[0];
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        if (i > 0) v += g[i - 1];
        if (i + 1 < n) v -= g[i];
        o[i] = v;
      }
      return;
    }
    const std::size_t rows = s[0], cols = s[1], n = rows * cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        double v = 0.0;
        if (i > 0) v += g[(i - 1) * cols + j];
        if (i + 1 < rows) v -= g[i * cols + j];
        if (j > 0) v += g[n + i * cols + j - 1];
        if (j + 1 < cols) v -= g[n + i * cols + j];
        o[i * cols + j] = v;
      }
    }
  }
  std::string name() const override { return "gradient"; }

 private:
  Space domain_;
  Space range_;
};

// 1-D zero-padded convolution along one axis of a row-major 2-D array.
inline void convolve_axis(std::span<const double> in, std::span<double> out,
                          std::size_t rows, std::size_t cols,
                          const std::vector<double>& k, bool along_rows,
                          bool transpose) {
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(along_rows ? rows : cols);
  const std::ptrdiff_t klen = static_cast<std::ptrdiff_t>(k.size());
  const std::ptrdiff_t c = (klen - 1) / 2;
  const std::size_t stride = along_rows ? cols : 1;
  const std::size_t lines = along_rows ? cols : rows;
  const std::size_t line_step = along_rows ? 1 : cols;
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_step;
    for (std::ptrdiff_t i = 0; i < len; ++i) {
      // forward: out[i] += k[a] x[i - (a - c)]; adjoint: out[i] += k[a] y[i + (a - c)]
      const std::ptrdiff_t dir = transpose ? 1 : -1;
      const std::ptrdiff_t off = i - dir * c;
      // valid a satisfy 0 <= off + dir * a < len
      std::ptrdiff_t a_lo, a_hi;
      if (transpose) {
        a_lo = std::max<std::ptrdiff_t>(0, -off);
        a_hi = std::min<std::ptrdiff_t>(klen, len - off);
      } else {
        a_lo = std::max<std::ptrdiff_t>(0, off - len + 1);
        a_hi = std::min<std::ptrdiff_t>(klen, off + 1);
      }
      double acc = 0.0;
      for (std::ptrdiff_t a = a_lo; a < a_hi; ++a)
        acc += k[static_cast<std::size_t>(a)] *
               in[base + static_cast<std::size_t>(off + dir * a) * stride];
      out[base + static_cast<std::size_t>(i) * stride] = acc;
    }
  }
}

// Zero-padded, same-size convolution with a kernel centred at index
// (size-1)/2 along each axis. If the kernel is an outer product of two 1-D
// kernels, the separable factors are applied instead of the full 2-D sum.
class ConvolutionImpl final : public LinOpImpl {
 public:
  ConvolutionImpl(Space image, SpaceElement kernel)
      : space_(std::move(image)), kernel_(std::move(kernel)) {
    const auto& s = space_.shape;
    const auto& ks = kernel_.shape();
    if (s.size() != ks.size() || s.size() > 2)
      throw DimensionError("convolve: kernel and image must both be 1-D or 2-D");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (ks[a] > s[a]) throw DimensionError("convolve: kernel larger than image");
    if (!kernel_.all_finite()) throw NumericalError("convolve: non-finite kernel");
  }

  ConvolutionImpl(Space image, std::vector<double> row_kernel,
                  std::vector<double> col_kernel)
      : ConvolutionImpl(std::move(image), outer(row_kernel, col_kernel)) {
    row_k_ = std::move(row_kernel);
    col_k_ = std::move(col_kernel);
  }

  const Space& domain() const override { return space_; }
  const Space& range() const override { return space_; }
  const SpaceElement& kernel() const { return kernel_; }

  void apply(const SpaceElement& x, SpaceElement& out) const override {
    run(x, out, false);
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    run(y, out, true);
  }
  std::string name() const override { return "convolution"; }

 private:
  static SpaceElement outer(const std::vector<double>& r,
                            const std::vector<double>& c) {
    std::vector<double> d(r.size() * c.size());
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t j = 0; j < c.size(); ++j) d[i * c.size() + j] = r[i] * c[j];
    return SpaceElement(make_space({r.size(), c.size()}, "kernel"), std::move(d));
  }

  void run(const SpaceElement& x, SpaceElement& out, bool transpose) const {
    const auto& s = space_.shape;
    if (s.size() == 1) {
      std::vector<double> k(kernel_.data().begin(), kernel_.data().end());
      convolve_axis(x.data(), out.data(), 1, s[0], k, false, transpose);
      return;
    }
    const std::size_t rows = s[0], cols = s[1];
    if (!row_k_.empty()) {
      std::vector<double> tmp(rows * cols);
      convolve_axis(x.data(), tmp, rows, cols, row_k_, true, transpose);
      convolve_axis(tmp, out.data(), rows, cols, col_k_, false, transpose);
      return;
    }
    const auto& ks = kernel_.shape();
    const std::ptrdiff_t kr = static_cast<std::ptrdiff_t>(ks[0]);
    const std::ptrdiff_t kc = static_cast<std::ptrdiff_t>(ks[1]);
    const std::ptrdiff_t cr = (kr - 1) / 2, cc = (kc - 1) / 2;
    const auto k = kernel_.data();
    const auto in = x.data();
    auto o = out.data();
    const std::ptrdiff_t R = static_cast<std::ptrdiff_t>(rows);
    const std::ptrdiff_t C = static_cast<std::ptrdiff_t>(cols);
    const std::ptrdiff_t sign = transpose ? 1 : -1;
    for (std::ptrdiff_t i = 0; i < R; ++i) {
      for (std::ptrdiff_t j = 0; j < C; ++j) {
        double acc = 0.0;
        for (std::ptrdiff_t a = 0; a < kr; ++a) {
          const std::ptrdiff_t si = i + sign * (a - cr);
          if (si < 0 || si >= R) continue;
          for (std::ptrdiff_t b = 0; b < kc; ++b) {
            const std::ptrdiff_t sj = j + sign * (b - cc);
            if (sj < 0 || sj >= C) continue;
            acc += k[static_cast<std::size_t>(a * kc + b)] *
                   in[static_cast<std::size_t>(si * C + sj)];
          }
        }
        o[static_cast<std::size_t>(i * C + j)] = acc;
      }
    }
  }

  Space space_;
  SpaceElement kernel_;
  std::vector<double> row_k_, col_k_;
};

struct SparseEntry {
  std::uint32_t row;
  std::uint32_t col;
  double value;
};

class SparseMatrixImpl final : public LinOpImpl {
 public:
  SparseMatrixImpl(std::vector<SparseEntry> entries, Space d, Space r,
                   std::string name)
      : entries_(std::move(entries)),
        domain_(std::move(d)),
        range_(std::move(r)),
        name_(std::move(name)) {
    std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
  }
  const Space& domain() const override { return domain_; }
  const Space& range() const override { return range_; }
  void apply(const SpaceElement& x, SpaceElement& out) const override {
    const auto in = x.data();
    auto o = out.data();
    for (const auto& e : entries_) o[e.row] += e.value * in[e.col];
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    const auto in = y.data();
    auto o = out.data();
    for (const auto& e : entries_) o[e.col] += e.value * in[e.row];
  }
  std::string name() const override { return name_; }
  const std::vector<SparseEntry>& entries() const { return entries_; }

 private:
  std::vector<SparseEntry> entries_;
  Space domain_, range_;
  std::string name_;
};

// Concatenates the ranges of several operators sharing a domain into one
// flat "product" space.
class StackedImpl final : public LinOpImpl {
 public:
  explicit StackedImpl(std::vector<LinOp> parts) : parts_(std::move(parts)) {
    if (parts_.empty()) throw ArgumentError("stack: no operators");
    std::size_t total = 0;
    for (const auto& p : parts_) {
      if (p.domain() != parts_.front().domain())
        throw DimensionError("stack: operators must share a domain");
      total += p.range().size();
    }
    range_ = make_space({total}, "product");
  }
  const Space& domain() const override { return parts_.front().domain(); }
  const Space& range() const override { return range_; }
  void apply(const SpaceElement& x, SpaceElement& out) const override {
    std::size_t off = 0;
    auto o = out.data();
    for (const auto& p : parts_) {
      const auto y = p.apply(x);
      std::copy(y.data().begin(), y.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
      off += y.size();
    }
  }
  void adjoint(const SpaceElement& y, SpaceElement& out) const override {
    std::size_t off = 0;
    auto o = out.data();
    for (const auto& p : parts_) {
      std::vector<double> d(y.data().begin() + static_cast<std::ptrdiff_t>(off),
                            y.data().begin() + static_cast<std::ptrdiff_t>(off + p.range().size()));
      off += p.range().size();
      const auto back = p.adjoint(SpaceElement(p.range(), std::move(d)));
      const auto b = back.data();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i];
    }
  }
  std::string name() const override { return "stacked"; }
  const std::vector<LinOp>& parts() const { return parts_; }

 private:
  std::vector<LinOp> parts_;
  Space range_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Constructors

inline LinOp identity_op(const Space& s) {
  return LinOp(std::make_shared<detail::IdentityImpl>(s), 1.0);
}

inline LinOp scaling_op(const Space& s, double c) {
  return identity_op(s).scaled(c);
}

inline LinOp zero_op(const Space& domain, const Space& range) {
  return LinOp(std::make_shared<detail::ZeroImpl>(domain, range), 0.0);
}

inline LinOp matrix_op(Eigen::MatrixXd m, std::string dom_id = "R^n",
                       std::string rng_id = "R^m") {
  const auto rows = static_cast<std::size_t>(m.rows());
  const auto cols = static_cast<std::size_t>(m.cols());
  return LinOp(std::make_shared<detail::MatrixImpl>(
      std::move(m), make_space({cols}, std::move(dom_id)),
      make_space({rows}, std::move(rng_id))));
}

inline LinOp gradient_op(const Space& image) {
  return LinOp(std::make_shared<detail::GradientImpl>(image));
}

inline SpaceElement grad_forward(const SpaceElement& x) {
  return gradient_op(x.space()).apply(x);
}

inline SpaceElement grad_adjoint(const Space& image, const SpaceElement& g) {
  return gradient_op(image).adjoint(g);
}

inline LinOp convolution_op(const Space& image, SpaceElement kernel) {
  return LinOp(std::make_shared<detail::ConvolutionImpl>(image, std::move(kernel)));
}

/// Convolution with the outer product row_kernel ⊗ col_kernel, applied as two
/// 1-D passes.
inline LinOp separable_convolution_op(const Space& image,
                                      std::vector<double> row_kernel,
                                      std::vector<double> col_kernel) {
  if (image.shape.size() != 2) throw DimensionError("separable convolution needs a 2-D image");
  return LinOp(std::make_shared<detail::ConvolutionImpl>(
      image, std::move(row_kernel), std::move(col_kernel)));
}

inline SpaceElement convolve(const SpaceElement& x, const SpaceElement& kernel) {
  return convolution_op(x.space(), kernel).apply(x);
}

/// Normalized 1-D Gaussian taps on [-radius, radius].
inline std::vector<double> gaussian_taps(double stddev, std::size_t radius) {
  if (!(stddev > 0.0)) throw ArgumentError("gaussian_taps: stddev must be > 0");
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double t = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * t * t / (stddev * stddev));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Anisotropic Gaussian blur on a rows x cols image; taps are truncated at
/// three standard deviations or one less than half the image extent,
/// whichever is smaller.
inline LinOp gaussian_blur_op(const Space& image, double std_rows,
                              double std_cols) {
  if (image.shape.size() != 2) throw DimensionError("gaussian blur needs a 2-D image");
  auto radius = [](double sd, std::size_t extent) {
    const auto r3 = static_cast<std::size_t>(std::ceil(3.0 * sd));
    const std::size_t cap = extent / 2 >= 1 ? extent / 2 - 1 : 0;
    return std::min(r3, cap);
  };
  return separable_convolution_op(
      image, gaussian_taps(std_rows, radius(std_rows, image.shape[0])),
      gaussian_taps(std_cols, radius(std_cols, image.shape[1])));
}

struct RadonGeometry {
  std::size_t img_side = 0;
  std::size_t n_angles = 0;
  std::size_t n_detectors = 0;

  static RadonGeometry desk_default(std::size_t side) {
    return {side, side, static_cast<std::size_t>(std::ceil(1.5 * static_cast<double>(side)))};
  }
  bool operator==(const RadonGeometry&) const = default;
};

inline void to_json(nlohmann::json& j, const RadonGeometry& g) {
  j = {{"img_side", g.img_side}, {"n_angles", g.n_angles}, {"n_detectors", g.n_detectors}};
}

inline void from_json(const nlohmann::json& j, RadonGeometry& g) {
  j.at("img_side").get_to(g.img_side);
  j.at("n_angles").get_to(g.n_angles);
  j.at("n_detectors").get_to(g.n_detectors);
}

inline constexpr std::size_t kRadonMaxSide = 128;

/// Parallel-beam Radon transform assembled as an explicit sparse matrix.
/// Each pixel is projected onto the detector line for angles uniform in
/// [0, pi) and its mass split linearly between the two nearest detector
/// bins, so per-angle projections of any image carry the same total mass.
/// Sinogram shape is {n_angles, n_detectors}.
inline LinOp radon_build(std::size_t img_side, std::size_t n_angles,
                         std::size_t n_detectors) {
  if (img_side == 0 || n_angles == 0 || n_detectors < 2)
    throw ArgumentError("radon_build: empty geometry");
  if (img_side > kRadonMaxSide)
    throw ArgumentError("radon_build: img_side above desk-scale cap of 128");
  const double n = static_cast<double>(img_side);
  const double half_det = static_cast<double>(n_detectors - 1) / 2.0;
  // Detector spacing chosen so every pixel centre projects inside the array.
  const double ds = (std::numbers::sqrt2 * (n - 1.0) + 1.0) /
                    static_cast<double>(n_detectors - 1);
  std::vector<detail::SparseEntry> entries;
  entries.reserve(img_side * img_side * n_angles * 2);
  for (std::size_t a = 0; a < n_angles; ++a) {
    const double theta = std::numbers::pi * static_cast<double>(a) /
                         static_cast<double>(n_angles);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t i = 0; i < img_side; ++i) {
      const double y = (n - 1.0) / 2.0 - static_cast<double>(i);
      for (std::size_t j = 0; j < img_side; ++j) {
        const double x = static_cast<double>(j) - (n - 1.0) / 2.0;
        const double u = (x * ct + y * st) / ds + half_det;
        const double fl = std::floor(u);
        auto d0 = static_cast<std::ptrdiff_t>(fl);
        double f = u - fl;
        if (d0 >= static_cast<std::ptrdiff_t>(n_detectors) - 1) {
          d0 = static_cast<std::ptrdiff_t>(n_detectors) - 2;
          f = 1.0;
        }
        const auto col = static_cast<std::uint32_t>(i * img_side + j);
        const auto row0 = static_cast<std::uint32_t>(a * n_detectors + static_cast<std::size_t>(d0));
        if (1.0 - f > 0.0) entries.push_back({row0, col, (1.0 - f) / ds});
        if (f > 0.0) entries.push_back({row0 + 1, col, f / ds});
      }
    }
  }
  return LinOp(std::make_shared<detail::SparseMatrixImpl>(
      std::move(entries), make_space({img_side, img_side}, "image"),
      make_space({n_angles, n_detectors}, "sinogram"), "radon"));
}

inline LinOp radon_build(const RadonGeometry& g) {
  return radon_build(g.img_side, g.n_angles, g.n_detectors);
}

/// Operator x -> (L_1 x, ..., L_m x) with product-valued forward and summed
/// adjoint.
class StackedOp {
 public:
  explicit StackedOp(std::vector<LinOp> parts)
      : flat_(std::make_shared<detail::StackedImpl>(parts)), parts_(std::move(parts)) {}

  const std::vector<LinOp>& parts() const { return parts_; }
  const Space& domain() const { return parts_.front().domain(); }

  ProductElement apply(const SpaceElement& x) const {
    ProductElement out;
    for (const auto& p : parts_) out.parts.push_back(p.apply(x));
    return out;
  }

  SpaceElement adjoint(const ProductElement& y) const {
    if (y.parts.size() != parts_.size())
      throw DimensionError("StackedOp::adjoint: arity mismatch");
    SpaceElement out(domain());
    for (std::size_t i = 0; i < parts_.size(); ++i)
      axpy_inplace(1.0, parts_[i].adjoint(y.parts[i]), out);
    return out;
  }

  /// The same operator with a flat "product" range, e.g. for norm estimation.
  const LinOp& flat() const { return flat_; }

 private:
  LinOp flat_;
  std::vector<LinOp> parts_;
};

// ---------------------------------------------------------------------------
// Norms

inline constexpr std::size_t kDefaultPowerIterations = 100;
inline constexpr double kNormSafetyFactor = 1.0 + 1e-3;

/// Power iteration on L*L from a seeded Gaussian start. Returns the estimate
/// ||L x_k|| for the normalized k-th iterate, which is nondecreasing in k.
inline double estimate_norm(const LinOp& op, std::size_t iters, RngStream rng) {
  if (iters == 0) throw ArgumentError("estimate_norm: iters must be >= 1");
  SpaceElement x = gaussian_like(SpaceElement(op.domain()), rng, 0.0, 1.0);
  double nx = norm(x);
  if (nx == 0.0) return 0.0;
  x = scaled(1.0 / nx, x);
  for (std::size_t k = 0; k < iters; ++k) {
    x = op.adjoint(op.apply(x));
    nx = norm(x);
    if (nx == 0.0) return 0.0;
    x = scaled(1.0 / nx, x);
  }
  return norm(op.apply(x));
}

/// Returns op with norm_bound set to the power-method estimate times the
/// safety factor.
inline LinOp with_estimated_norm(const LinOp& op,
                                 std::size_t iters = kDefaultPowerIterations,
                                 std::uint64_t seed = 0x5eed) {
  return op.with_norm_bound(estimate_norm(op, iters, RngStream(seed)) * kNormSafetyFactor);
}

/// op / norm_bound, with norm_bound 1.
inline LinOp normalize(const LinOp& op) {
  const auto b = op.norm_bound();
  if (!b) throw ArgumentError("normalize: norm bound not estimated");
  if (!(*b > 0.0)) throw ArgumentError("normalize: zero operator norm");
  return op.scaled(1.0 / *b).with_norm_bound(1.0);
}

}  // namespace proxforge
