#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "pointform/common.hpp"
#include "pointform/rng.hpp"

namespace pf {

template <class S>
using Points = Eigen::Matrix<S, Eigen::Dynamic, 3, Eigen::RowMajor>;

template <class S>
struct Cloud {
  Points<S> pos;
  Points<S> color;  // empty when colorless
  bool has_color() const { return color.rows() == pos.rows() && pos.rows() > 0; }
  std::size_t size() const { return std::size_t(pos.rows()); }
};

enum class FpsStart { Index0, MaxNorm };

// Greedy farthest point sampling: repeatedly take the point with the
// largest distance to the chosen set. Ties go to the smallest index, so
// the result is a pure function of the input order.
template <class S>
std::vector<std::size_t> fps(const Points<S>& pts, std::size_t m,
                             FpsStart start = FpsStart::Index0) {
  const std::size_t n = std::size_t(pts.rows());
  check(m > 0, "fps: m must be positive");
  check(m <= n, cat("fps: m=", m, " exceeds point count ", n));

  std::size_t first = 0;
  if (start == FpsStart::MaxNorm) {
    S best = pts.row(0).squaredNorm();
    for (std::size_t i = 1; i < n; ++i) {
      S d = pts.row(i).squaredNorm();
      if (d > best) {
        best = d;
        first = i;
      }
    }
  }

  std::vector<std::size_t> picked{first};
  std::vector<S> min_d2(n);
  for (std::size_t i = 0; i < n; ++i)
    min_d2[i] = (pts.row(i) - pts.row(first)).squaredNorm();
  while (picked.size() < m) {
    std::size_t arg = 0;
    S best = -1;
    for (std::size_t i = 0; i < n; ++i)
      if (min_d2[i] > best) {
        best = min_d2[i];
        arg = i;
      }
    picked.push_back(arg);
    for (std::size_t i = 0; i < n; ++i)
      min_d2[i] = std::min(min_d2[i], (pts.row(i) - pts.row(arg)).squaredNorm());
  }
  return picked;
}

template <class S>
struct KnnGroups {
  std::size_t k = 0;
  std::vector<std::size_t> flat_idx;  // (centers*k) indices into the source set
  Points<S> rel;                      // (centers*k, 3) neighbor minus center
};

// k nearest source points per center, ordered by (distance, index); with
// distinct points a center drawn from the source keeps itself in row 0
template <class S>
KnnGroups<S> knn_group(const Points<S>& src, const Points<S>& centers,
                       std::size_t k) {
  const std::size_t n = std::size_t(src.rows());
  const std::size_t m = std::size_t(centers.rows());
  check(k > 0, "knn_group: k must be positive");
  check(k <= n, cat("knn_group: k=", k, " exceeds source size ", n));
  KnnGroups<S> out;
  out.k = k;
  out.flat_idx.resize(m * k);
  out.rel.resize(Eigen::Index(m * k), 3);
  std::vector<std::pair<S, std::size_t>> dist(n);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i)
      dist[i] = {(src.row(i) - centers.row(c)).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (std::size_t j = 0; j < k; ++j) {
      out.flat_idx[c * k + j] = dist[j].second;
      out.rel.row(Eigen::Index(c * k + j)) =
          src.row(dist[j].second) - centers.row(c);
    }
  }
  return out;
}

template <class S>
struct ChamferPairs {
  std::vector<std::size_t> nn_ab;  // for each a row, nearest b row
  std::vector<std::size_t> nn_ba;
  double value = 0;
};

// symmetric squared-L2 chamfer with per-set averaging; ties pick the
// smaller index so the pairing is deterministic
template <class S>
ChamferPairs<S> chamfer_pairs(const Points<S>& a, const Points<S>& b) {
  const std::size_t na = std::size_t(a.rows()), nb = std::size_t(b.rows());
  check(na > 0 && nb > 0, "chamfer: empty point set");
  ChamferPairs<S> out;
  out.nn_ab.resize(na);
  out.nn_ba.assign(nb, 0);
  std::vector<double> best_ba(nb, std::numeric_limits<double>::infinity());
  double sum_ab = 0;
  for (std::size_t i = 0; i < na; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < nb; ++j) {
      double d = double((a.row(i) - b.row(j)).squaredNorm());
      if (d < best) {
        best = d;
        arg = j;
      }
      if (d < best_ba[j]) {
        best_ba[j] = d;
        out.nn_ba[j] = i;
      }
    }
    out.nn_ab[i] = arg;
    sum_ab += best;
  }
  double sum_ba = 0;
  for (double d : best_ba) sum_ba += d;
  out.value = sum_ab / double(na) + sum_ba / double(nb);
  return out;
}

template <class S>
double chamfer_l2(const Points<S>& a, const Points<S>& b) {
  return chamfer_pairs(a, b).value;
}

template <class S>
struct RigidTransform {
  Eigen::Matrix<S, 3, 3> rot;
  Eigen::Matrix<S, 3, 1> trans;

  Points<S> apply(const Points<S>& pts) const {
    Points<S> out = pts * rot.transpose();
    out.rowwise() += trans.transpose();
    return out;
  }
};

// rotation from a normalized Gaussian quaternion, translation uniform
// in [-max_translation, max_translation]^3
template <class S>
RigidTransform<S> random_rigid(Rng& rng, double max_translation = 0.1) {
  double q[4];
  double norm = 0;
  do {
    norm = 0;
    for (auto& v : q) {
      v = rng.gaussian();
      norm += v * v;
    }
    norm = std::sqrt(norm);
  } while (norm < 1e-9);
  double w = q[0] / norm, x = q[1] / norm, y = q[2] / norm, z = q[3] / norm;
  RigidTransform<S> t;
  t.rot << S(1 - 2 * (y * y + z * z)), S(2 * (x * y - w * z)), S(2 * (x * z + w * y)),
      S(2 * (x * y + w * z)), S(1 - 2 * (x * x + z * z)), S(2 * (y * z - w * x)),
      S(2 * (x * z - w * y)), S(2 * (y * z + w * x)), S(1 - 2 * (x * x + y * y));
  for (int i = 0; i < 3; ++i)
    t.trans(i) = S(rng.uniform(-max_translation, max_translation));
  return t;
}

// Cell sizes for hierarchical aggregation. Offsets are squashed around a
// log-midpoint so every partial product stays inside [s_min, s_max]:
//   gamma    = (ln(s_max/a) - ln(s_min/a)) / (2l)
//   beta_ctr = (ln(s_max/a) + ln(s_min/a)) / (2l)
//   s_i      = a * exp(sum_{j<=i} gamma*tanh(theta_j) + beta_ctr), clamped
inline std::vector<double> grid_schedule(const std::vector<double>& theta,
                                         double alpha, double s_min,
                                         double s_max) {
  check(!theta.empty(), "grid_schedule: needs at least one level");
  check(alpha > 0 && alpha <= s_min && s_min < s_max,
        cat("grid_schedule: wants 0 < alpha <= s_min < s_max, got alpha=", alpha,
            " s_min=", s_min, " s_max=", s_max));
  const double l = double(theta.size());
  const double gamma = (std::log(s_max / alpha) - std::log(s_min / alpha)) / (2 * l);
  const double beta_ctr =
      (std::log(s_max / alpha) + std::log(s_min / alpha)) / (2 * l);
  std::vector<double> sizes;
  double acc = 0;
  for (double th : theta) {
    acc += gamma * std::tanh(th) + beta_ctr;
    sizes.push_back(std::clamp(alpha * std::exp(acc), s_min, s_max));
  }
  return sizes;
}

struct GridMapping {
  double cell_size = 0;
  std::vector<std::size_t> cell_of_point;        // point -> cell ordinal
  std::vector<std::vector<std::size_t>> members; // cell ordinal -> point indices
  std::vector<std::array<std::int64_t, 3>> keys; // lexicographic order
  std::size_t cells() const { return members.size(); }
};

// bucket points into axis-aligned cubes of side s; cells are numbered in
// lexicographic key order so the result ignores point order up to identity
template <class S>
GridMapping dynamic_grid_sample(const Points<S>& pts, double s) {
  check(s > 0, "dynamic_grid_sample: cell size must be positive");
  check(pts.rows() > 0, "dynamic_grid_sample: empty point set");
  std::map<std::array<std::int64_t, 3>, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < std::size_t(pts.rows()); ++i) {
    std::array<std::int64_t, 3> key;
    for (int a = 0; a < 3; ++a)
      key[a] = std::int64_t(std::floor(double(pts(Eigen::Index(i), a)) / s));
    buckets[key].push_back(i);
  }
  GridMapping out;
  out.cell_size = s;
  out.cell_of_point.resize(std::size_t(pts.rows()));
  for (auto& [key, members] : buckets) {
    for (auto p : members) out.cell_of_point[p] = out.members.size();
    out.keys.push_back(key);
    out.members.push_back(std::move(members));
  }
  return out;
}

// mean position of each cell's members, the coordinate of the merged token
template <class S>
Points<S> cell_means(const Points<S>& pts, const GridMapping& mapping) {
  Points<S> out(Eigen::Index(mapping.cells()), 3);
  out.setZero();
  for (std::size_t c = 0; c < mapping.cells(); ++c) {
    for (auto p : mapping.members[c]) out.row(Eigen::Index(c)) += pts.row(Eigen::Index(p));
    out.row(Eigen::Index(c)) /= S(mapping.members[c].size());
  }
  return out;
}

// Layout for padding ragged cells to a dense (cells, k_max) block. Slot
// entries index a virtual row stack [features; cell means], so pad slots
// repeat their cell's mean feature and are flagged invalid.
struct PadPlan {
  std::size_t k_max = 0;
  std::size_t cells = 0;
  std::size_t points = 0;
  std::vector<std::size_t> slot_index;     // cells*k_max rows into the stack
  std::vector<unsigned char> slot_valid;   // 1 for real members
};

inline PadPlan pad_plan(const GridMapping& mapping) {
  PadPlan plan;
  plan.cells = mapping.cells();
  plan.points = mapping.cell_of_point.size();
  for (const auto& m : mapping.members)
    plan.k_max = std::max(plan.k_max, m.size());
  plan.slot_index.resize(plan.cells * plan.k_max);
  plan.slot_valid.assign(plan.cells * plan.k_max, 0);
  for (std::size_t c = 0; c < plan.cells; ++c) {
    const auto& m = mapping.members[c];
    for (std::size_t j = 0; j < plan.k_max; ++j) {
      if (j < m.size()) {
        plan.slot_index[c * plan.k_max + j] = m[j];
        plan.slot_valid[c * plan.k_max + j] = 1;
      } else {
        plan.slot_index[c * plan.k_max + j] = plan.points + c;  // mean row
      }
    }
  }
  return plan;
}

// center to origin; clouds larger than the unit ball are shrunk onto it,
// smaller ones keep their scale so absolute size stays meaningful
template <class S>
void normalize_to_unit_ball(Points<S>& pts) {
  if (pts.rows() == 0) return;
  Eigen::Matrix<S, 1, 3> centroid = pts.colwise().mean();
  pts.rowwise() -= centroid;
  S max_norm = std::sqrt(pts.rowwise().squaredNorm().maxCoeff());
  if (max_norm > S(1)) pts /= max_norm;
}

}  // namespace pf
