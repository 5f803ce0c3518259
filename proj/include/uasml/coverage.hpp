#pragma once

// Two-dimensional coverage regions for a pair of chain columns: the Gaussian
// ellipse from the sample mean and covariance, and a nonparametric
// highest-density region from a Gaussian kernel density estimate.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "uasml/io.hpp"

namespace uasml {

enum class RegionKind { gaussian_ellipse, possolo_hdr };

struct CoverageRegion {
  RegionKind kind = RegionKind::gaussian_ellipse;
  double level = 0.95;
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  Eigen::Vector2d axes = Eigen::Vector2d::Zero();  // semi-axes, major first
  double angle = 0.0;                              // of the major axis, radians
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Identity();
  std::vector<Eigen::Vector2d> polygon;  // closed implicitly

  bool contains(const Eigen::Vector2d& p) const;

  io::Table polygon_table() const {
    io::Table t;
    t.header = {"x", "y"};
    for (const auto& v : polygon) t.rows.push_back({v.x(), v.y()});
    if (!polygon.empty()) t.rows.push_back({polygon.front().x(), polygon.front().y()});
    return t;
  }
};

inline double chi2_2dof_quantile(double level) {
  if (!(level > 0 && level < 1)) throw std::invalid_argument("coverage level must be in (0,1)");
  return -2.0 * std::log1p(-level);
}

inline bool point_in_polygon(const std::vector<Eigen::Vector2d>& poly, const Eigen::Vector2d& p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y()) &&
        p.x() < (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x())
      inside = !inside;
  }
  return inside;
}

inline double polygon_area(const std::vector<Eigen::Vector2d>& poly) {
  double a = 0.0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
    a += poly[j].x() * poly[i].y() - poly[i].x() * poly[j].y();
  return 0.5 * a;
}

inline bool CoverageRegion::contains(const Eigen::Vector2d& p) const {
  if (kind == RegionKind::gaussian_ellipse) {
    const Eigen::Vector2d d = p - center;
    return d.dot(covariance.ldlt().solve(d)) <= chi2_2dof_quantile(level);
  }
  return polygon.size() >= 3 && point_in_polygon(polygon, p);
}

namespace detail {

struct PairMoments {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
  Eigen::Matrix2d chol;  // lower
};

inline PairMoments pair_moments(const Eigen::MatrixX2d& xy) {
  PairMoments m;
  m.mean = xy.colwise().mean().transpose();
  const Eigen::MatrixX2d c = xy.rowwise() - m.mean.transpose();
  m.cov = c.transpose() * c / static_cast<double>(xy.rows() - 1);
  const double sx = m.cov(0, 0), sy = m.cov(1, 1);
  const double r2 = sx > 0 && sy > 0 ? m.cov(0, 1) * m.cov(0, 1) / (sx * sy) : 1.0;
  if (!(sx > 0) || !(sy > 0) || r2 > 1.0 - 1e-10)
    throw std::invalid_argument("coverage_region: singular covariance");
  Eigen::LLT<Eigen::Matrix2d> llt(m.cov);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("coverage_region: singular covariance");
  m.chol = llt.matrixL();
  return m;
}

/// Contour loops of a gridded field at `level` (marching squares). The field
/// must lie below the level on the grid border so every loop closes.
inline std::vector<std::vector<Eigen::Vector2d>> contour_loops(const Eigen::MatrixXd& f,
                                                               const Eigen::VectorXd& xs,
                                                               const Eigen::VectorXd& ys,
                                                               double level) {
  const Eigen::Index nx = xs.size(), ny = ys.size();
  // Edge ids: horizontal edge (i,j)-(i+1,j) -> i*ny+j; vertical (i,j)-(i,j+1) -> nx*ny + i*ny+j.
  auto h_id = [&](Eigen::Index i, Eigen::Index j) { return i * ny + j; };
  auto v_id = [&](Eigen::Index i, Eigen::Index j) { return nx * ny + i * ny + j; };
  std::map<Eigen::Index, Eigen::Vector2d> points;
  auto crossing = [&](Eigen::Index id, Eigen::Index i0, Eigen::Index j0, Eigen::Index i1,
                      Eigen::Index j1) {
    if (!points.count(id)) {
      const double a = f(i0, j0), b = f(i1, j1);
      const double t = (level - a) / (b - a);
      points[id] = {xs[i0] + t * (xs[i1] - xs[i0]), ys[j0] + t * (ys[j1] - ys[j0])};
    }
    return id;
  };

  std::map<Eigen::Index, std::vector<Eigen::Index>> links;
  auto link = [&](Eigen::Index a, Eigen::Index b) {
    links[a].push_back(b);
    links[b].push_back(a);
  };

  for (Eigen::Index i = 0; i + 1 < nx; ++i) {
    for (Eigen::Index j = 0; j + 1 < ny; ++j) {
      const bool c0 = f(i, j) >= level, c1 = f(i + 1, j) >= level;
      const bool c2 = f(i + 1, j + 1) >= level, c3 = f(i, j + 1) >= level;
      const int code = c0 | (c1 << 1) | (c2 << 2) | (c3 << 3);
      if (code == 0 || code == 15) continue;
      auto e0 = [&] { return crossing(h_id(i, j), i, j, i + 1, j); };
      auto e1 = [&] { return crossing(v_id(i + 1, j), i + 1, j, i + 1, j + 1); };
      auto e2 = [&] { return crossing(h_id(i, j + 1), i, j + 1, i + 1, j + 1); };
      auto e3 = [&] { return crossing(v_id(i, j), i, j, i, j + 1); };
      if (code == 5 || code == 10) {
        const double centre = 0.25 * (f(i, j) + f(i + 1, j) + f(i + 1, j + 1) + f(i, j + 1));
        if ((centre >= level) == c0) {
          link(e0(), e1());
          link(e2(), e3());
        } else {
          link(e3(), e0());
          link(e1(), e2());
        }
        continue;
      }
      std::vector<Eigen::Index> crossed;
      if (c0 != c1) crossed.push_back(e0());
      if (c1 != c2) crossed.push_back(e1());
      if (c2 != c3) crossed.push_back(e2());
      if (c3 != c0) crossed.push_back(e3());
      link(crossed[0], crossed[1]);
    }
  }

  std::vector<std::vector<Eigen::Vector2d>> loops;
  std::map<Eigen::Index, bool> used;
  for (const auto& [start, _] : links) {
    if (used[start]) continue;
    std::vector<Eigen::Vector2d> loop;
    Eigen::Index prev = -1, cur = start;
    while (!used[cur]) {
      used[cur] = true;
      loop.push_back(points.at(cur));
      const auto& nb = links.at(cur);
      Eigen::Index next = -1;
      for (auto c : nb)
        if (c != prev && !used[c]) {
          next = c;
          break;
        }
      if (next < 0) break;
      prev = cur;
      cur = next;
    }
    if (loop.size() >= 3) loops.push_back(std::move(loop));
  }
  return loops;
}

}  // namespace detail

struct KdeOptions {
  Eigen::Index grid_points = 160;
  double bandwidth_factor = 1.0;  // multiplies Scott's n^(-1/6) in whitened units
};

inline CoverageRegion coverage_region(const Eigen::MatrixX2d& xy, double level, RegionKind kind,
                                      const KdeOptions& kde = {}) {
  if (xy.rows() < 200) throw std::invalid_argument("coverage_region: need at least 200 draws");
  const double q = chi2_2dof_quantile(level);
  const auto m = detail::pair_moments(xy);
  CoverageRegion r;
  r.kind = kind;
  r.level = level;
  r.center = m.mean;
  r.covariance = m.cov;

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(m.cov);
  const Eigen::Vector2d lam = es.eigenvalues();  // ascending
  r.axes = {std::sqrt(lam[1] * q), std::sqrt(lam[0] * q)};
  const Eigen::Vector2d major = es.eigenvectors().col(1);
  r.angle = std::atan2(major.y(), major.x());

  if (kind == RegionKind::gaussian_ellipse) {
    const Eigen::Vector2d minor = es.eigenvectors().col(0);
    constexpr int k = 128;
    for (int i = 0; i < k; ++i) {
      const double t = 2.0 * std::numbers::pi * i / k;
      r.polygon.push_back(r.center + r.axes[0] * std::cos(t) * major + r.axes[1] * std::sin(t) * minor);
    }
    return r;
  }

  // Whiten, estimate the density on a grid by linear binning and separable
  // Gaussian smoothing, then threshold at the (1 - level) quantile of the
  // density evaluated at the draws.
  const Eigen::Index n = xy.rows();
  Eigen::MatrixX2d z(n, 2);
  const auto L = m.chol.triangularView<Eigen::Lower>();
  for (Eigen::Index i = 0; i < n; ++i) z.row(i) = L.solve(xy.row(i).transpose() - m.mean).transpose();

  const double h = kde.bandwidth_factor * std::pow(static_cast<double>(n), -1.0 / 6.0);
  const Eigen::Index g = kde.grid_points;
  Eigen::VectorXd axis[2];
  double step[2];
  for (int d = 0; d < 2; ++d) {
    const double lo = z.col(d).minCoeff() - 4.5 * h, hi = z.col(d).maxCoeff() + 4.5 * h;
    axis[d] = Eigen::VectorXd::LinSpaced(g, lo, hi);
    step[d] = (hi - lo) / static_cast<double>(g - 1);
  }
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(g, g);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double fx = (z(i, 0) - axis[0][0]) / step[0], fy = (z(i, 1) - axis[1][0]) / step[1];
    const auto ix = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(fx), 0, g - 2);
    const auto iy = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(fy), 0, g - 2);
    const double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
    counts(ix, iy) += (1 - tx) * (1 - ty);
    counts(ix + 1, iy) += tx * (1 - ty);
    counts(ix, iy + 1) += (1 - tx) * ty;
    counts(ix + 1, iy + 1) += tx * ty;
  }
  auto smooth = [&](const Eigen::MatrixXd& in, int dim) {
    const auto reach = static_cast<Eigen::Index>(std::ceil(4.0 * h / step[dim]));
    Eigen::VectorXd w(2 * reach + 1);
    for (Eigen::Index k = -reach; k <= reach; ++k) {
      const double u = static_cast<double>(k) * step[dim] / h;
      w[k + reach] = std::exp(-0.5 * u * u) / (std::sqrt(2.0 * std::numbers::pi) * h);
    }
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(g, g);
    for (Eigen::Index a = 0; a < g; ++a)
      for (Eigen::Index b = 0; b < g; ++b) {
        double acc = 0.0;
        for (Eigen::Index k = -reach; k <= reach; ++k) {
          const Eigen::Index c = (dim == 0 ? a : b) + k;
          if (c < 0 || c >= g) continue;
          acc += w[k + reach] * (dim == 0 ? in(c, b) : in(a, c));
        }
        out(a, b) = acc;
      }
    return out;
  };
  const Eigen::MatrixXd density = smooth(smooth(counts, 0), 1) / static_cast<double>(n);

  std::vector<double> at_draws(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double fx = (z(i, 0) - axis[0][0]) / step[0], fy = (z(i, 1) - axis[1][0]) / step[1];
    const auto ix = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(fx), 0, g - 2);
    const auto iy = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(fy), 0, g - 2);
    const double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
    at_draws[static_cast<std::size_t>(i)] =
        (1 - tx) * (1 - ty) * density(ix, iy) + tx * (1 - ty) * density(ix + 1, iy) +
        (1 - tx) * ty * density(ix, iy + 1) + tx * ty * density(ix + 1, iy + 1);
  }
  const auto cut = static_cast<std::size_t>(std::floor((1.0 - level) * static_cast<double>(n)));
  std::nth_element(at_draws.begin(), at_draws.begin() + static_cast<std::ptrdiff_t>(cut), at_draws.end());
  const double threshold = at_draws[cut];

  const auto loops = detail::contour_loops(density, axis[0], axis[1], threshold);
  if (loops.empty()) throw std::runtime_error("coverage_region: no density contour found");
  const auto* best = &loops.front();
  for (const auto& lp : loops)
    if (std::abs(polygon_area(lp)) > std::abs(polygon_area(*best))) best = &lp;
  for (const auto& v : *best) r.polygon.push_back(m.mean + m.chol * v);
  return r;
}

/// Fraction of the rows of xy inside the region.
inline double enclosed_fraction(const CoverageRegion& r, const Eigen::MatrixX2d& xy) {
  std::size_t inside = 0;
  for (Eigen::Index i = 0; i < xy.rows(); ++i) inside += r.contains(xy.row(i).transpose());
  return static_cast<double>(inside) / static_cast<double>(xy.rows());
}

}  // namespace uasml
