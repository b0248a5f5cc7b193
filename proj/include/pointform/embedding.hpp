#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "pointform/geometry.hpp"
#include "pointform/optim.hpp"
#include "pointform/tensor.hpp"

namespace pf {

// sin/cos ladder over each axis: columns are, per axis, (sin 2^b pi c,
// cos 2^b pi c) for b = 0..bands-1, giving 6*bands features per point
template <class S>
MatRM<S> trig_encode(const Points<S>& rel, std::size_t bands) {
  check(bands > 0, "trig_encode: needs at least one band");
  MatRM<S> out(rel.rows(), Eigen::Index(6 * bands));
  for (Eigen::Index i = 0; i < rel.rows(); ++i)
    for (int axis = 0; axis < 3; ++axis)
      for (std::size_t b = 0; b < bands; ++b) {
        double arg = std::ldexp(std::numbers::pi, int(b)) * double(rel(i, axis));
        out(i, Eigen::Index(axis * 2 * bands + 2 * b)) = S(std::sin(arg));
        out(i, Eigen::Index(axis * 2 * bands + 2 * b + 1)) = S(std::cos(arg));
      }
  return out;
}

struct EmbedConfig {
  std::size_t input_points = 512;
  std::array<std::size_t, 3> stage_sizes{128, 64, 32};
  std::size_t group_k = 16;
  // width of the color/position lift, then of each stage output
  std::array<std::size_t, 4> stage_dims{24, 48, 96, 192};
  std::size_t model_dim = 256;
  std::size_t freq_bands = 4;

  void validate() const {
    check(input_points > 0, "embed: input_points must be positive");
    check(stage_sizes[0] <= input_points && stage_sizes[1] <= stage_sizes[0] &&
              stage_sizes[2] <= stage_sizes[1],
          "embed: stage sizes must shrink from input_points");
    check(group_k > 0 && group_k <= stage_sizes[1] && group_k <= stage_sizes[2] &&
              group_k <= input_points,
          cat("embed: group_k=", group_k, " exceeds a grouping source"));
    for (auto d : stage_dims) check(d > 0, "embed: stage dims must be positive");
    check(model_dim > 0 && freq_bands > 0, "embed: bad model_dim or freq_bands");
  }
};

template <class S>
struct TokenSet {
  Var<S> tokens;          // (M, model_dim)
  Points<S> centers;      // (M, 3)
  Points<S> patches;      // (M*k, 3), relative to each center
  std::size_t patch_k = 0;
  std::size_t count() const { return tokens->shape[0]; }
};

// force a cloud onto exactly `target` points: farthest point subsampling
// when oversized, seeded duplicate rows when undersized
template <class S>
Cloud<S> resample(const Cloud<S>& cloud, std::size_t target, Rng rng) {
  check(target > 0, "resample: target must be positive");
  check(cloud.size() > 0, "resample: empty cloud");
  const std::size_t n = cloud.size();
  std::vector<std::size_t> rows;
  if (n >= target) {
    rows = n == target ? [&] {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      return all;
    }()
                       : fps(cloud.pos, target);
  } else {
    rows.resize(target);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    for (std::size_t i = n; i < target; ++i) rows[i] = rng.index(n);
  }
  Cloud<S> out;
  out.pos.resize(Eigen::Index(target), 3);
  if (cloud.has_color()) out.color.resize(Eigen::Index(target), 3);
  for (std::size_t i = 0; i < target; ++i) {
    out.pos.row(Eigen::Index(i)) = cloud.pos.row(Eigen::Index(rows[i]));
    if (cloud.has_color())
      out.color.row(Eigen::Index(i)) = cloud.color.row(Eigen::Index(rows[i]));
  }
  return out;
}

// Three rounds of coarsening: farthest point sampling picks centers, the
// k nearest points contribute carried features next to a trig encoding of
// their offset, a linear map and channel max squeeze them into the center.
template <class S>
struct PointEmbedding {
  EmbedConfig cfg;
  Var<S> lift_w, lift_b;
  std::array<Var<S>, 3> stage_w, stage_b;
  Var<S> proj_w, proj_b;

  void init(ParamStore<S>& store, Rng rng, double stddev = 0.02) {
    cfg.validate();
    const std::size_t enc = 6 * cfg.freq_bands;
    lift_w = store.add("embed.lift.w", param<S>({6, cfg.stage_dims[0]}, rng, stddev));
    lift_b = store.add("embed.lift.b", zeros_param({cfg.stage_dims[0]}));
    for (int s = 0; s < 3; ++s) {
      std::size_t in = cfg.stage_dims[s] + enc, out = cfg.stage_dims[s + 1];
      stage_w[s] = store.add(cat("embed.stage", s + 1, ".w"),
                             param<S>({in, out}, rng, stddev));
      stage_b[s] = store.add(cat("embed.stage", s + 1, ".b"), zeros_param({out}));
    }
    proj_w = store.add("embed.proj.w",
                       param<S>({cfg.stage_dims[3], cfg.model_dim}, rng, stddev));
    proj_b = store.add("embed.proj.b", zeros_param({cfg.model_dim}));
  }

  TokenSet<S> forward(const Cloud<S>& cloud) const {
    check(cloud.size() == cfg.input_points,
          cat("embed: cloud has ", cloud.size(), " points, config wants ",
              cfg.input_points, "; resample first"));
    // six input channels, color zeroed when absent
    std::vector<S> raw(cloud.size() * 6, S(0));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      for (int a = 0; a < 3; ++a) raw[i * 6 + a] = cloud.pos(Eigen::Index(i), a);
      if (cloud.has_color())
        for (int a = 0; a < 3; ++a)
          raw[i * 6 + 3 + a] = cloud.color(Eigen::Index(i), a);
    }
    auto feat = add(matmul(constant<S>({cloud.size(), 6}, std::move(raw)), lift_w),
                    lift_b);
    Points<S> pts = cloud.pos;

    TokenSet<S> out;
    for (int s = 0; s < 3; ++s) {
      auto picked = fps(pts, cfg.stage_sizes[s]);
      Points<S> centers(Eigen::Index(picked.size()), 3);
      for (std::size_t i = 0; i < picked.size(); ++i)
        centers.row(Eigen::Index(i)) = pts.row(Eigen::Index(picked[i]));
      auto groups = knn_group(pts, centers, cfg.group_k);

      auto carried = gather_rows(feat, groups.flat_idx);
      auto enc = trig_encode(groups.rel, cfg.freq_bands);
      std::vector<S> enc_flat(enc.data(), enc.data() + enc.size());
      auto enc_t = constant<S>({std::size_t(enc.rows()), std::size_t(enc.cols())},
                               std::move(enc_flat));
      auto mixed = add(matmul(concat_cols(carried, enc_t), stage_w[s]), stage_b[s]);
      auto blocks = reshape(mixed, {picked.size(), cfg.group_k,
                                    cfg.stage_dims[s + 1]});
      feat = reduce_max_mid(blocks);
      pts = std::move(centers);

      if (s == 2) {
        out.patches = groups.rel;
        out.patch_k = cfg.group_k;
      }
    }
    out.tokens = add(matmul(feat, proj_w), proj_b);
    out.centers = std::move(pts);
    return out;
  }

 private:
  static Var<S> zeros_param(std::vector<std::size_t> shape) {
    auto t = zeros<S>(std::move(shape));
    t->requires_grad = true;
    return t;
  }
};

}  // namespace pf
