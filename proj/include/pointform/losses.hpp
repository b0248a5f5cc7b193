#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pointform/geometry.hpp"
#include "pointform/model.hpp"
#include "pointform/tensor.hpp"

namespace pf {

// ---- token masking ----

struct MaskSpec {
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> visible;  // sorted complement

  // rounds count*ratio to the nearest integer, then draws without
  // replacement; both halves come back sorted
  static MaskSpec draw(std::size_t count, double ratio, Rng rng) {
    check(count > 0, "MaskSpec: no tokens to mask");
    check(ratio >= 0 && ratio < 1, cat("MaskSpec: ratio ", ratio,
                                       " outside [0, 1)"));
    std::size_t m = std::size_t(std::floor(double(count) * ratio + 0.5));
    auto perm = rng.permutation(count);
    MaskSpec spec;
    spec.masked.assign(perm.begin(), perm.begin() + std::ptrdiff_t(m));
    spec.visible.assign(perm.begin() + std::ptrdiff_t(m), perm.end());
    std::sort(spec.masked.begin(), spec.masked.end());
    std::sort(spec.visible.begin(), spec.visible.end());
    return spec;
  }
};

// ---- feature regression ----

// mean over rows of the squared row difference (row norms, not elements)
template <class S>
Var<S> masked_mse(const Var<S>& pred, const MatRM<S>& target) {
  check(pred->rank() == 2, cat("masked_mse: wants rank 2, got ",
                               shape_str(pred->shape)));
  check(std::size_t(target.rows()) == pred->shape[0] &&
            std::size_t(target.cols()) == pred->shape[1],
        cat("masked_mse: target is ", target.rows(), "x", target.cols(),
            ", prediction is ", shape_str(pred->shape)));
  check(pred->shape[0] > 0, "masked_mse: no rows to score");
  std::vector<S> flat(target.data(), target.data() + target.size());
  auto diff = sub(pred, constant<S>(pred->shape, std::move(flat)));
  return scale(reduce_sum(mul(diff, diff)), 1.0 / double(pred->shape[0]));
}

// distillation: the adapter maps model width onto the teacher's width,
// then rows are scored like masked_mse
template <class S>
Var<S> kd_loss(const Model<S>& model, const Var<S>& student,
               const MatRM<S>& teacher) {
  auto adapted = model.kd_head(student);
  check(std::size_t(teacher.rows()) == adapted->shape[0],
        cat("kd_loss: teacher file has ", teacher.rows(), " rows, student has ",
            adapted->shape[0], " tokens"));
  return masked_mse(adapted, teacher);
}

// ---- local geometry reconstruction ----

// pred row i holds k predicted points (x0 y0 z0 x1 ...) for patch i; gt
// stacks the true patches as (m*k, 3); the loss is the mean symmetric
// squared chamfer distance over patches
template <class S>
Var<S> chamfer_patches(const Var<S>& pred, const MatRM<S>& gt) {
  check(pred->rank() == 2, cat("chamfer_patches: wants rank 2, got ",
                               shape_str(pred->shape)));
  check(pred->shape[1] % 3 == 0,
        cat("chamfer_patches: row width ", pred->shape[1],
            " is not a multiple of 3"));
  std::size_t m = pred->shape[0], k = pred->shape[1] / 3;
  check(m > 0 && k > 0, "chamfer_patches: empty prediction");
  check(std::size_t(gt.rows()) == m * k && gt.cols() == 3,
        cat("chamfer_patches: ground truth is ", gt.rows(), "x", gt.cols(),
            ", expected ", m * k, "x3"));

  auto out = detail::node<S>({1}, {pred});
  std::vector<ChamferPairs<S>> pairs(m);
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    Points<S> a(Eigen::Index(k), 3);
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c)
        a(Eigen::Index(j), c) = pred->value[i * 3 * k + j * 3 + c];
    Points<S> b = gt.block(Eigen::Index(i * k), 0, Eigen::Index(k), 3);
    pairs[i] = chamfer_pairs<S>(a, b);
    total += pairs[i].value;
  }
  out->value[0] = S(total / double(m));

  detail::set_backward<S>(out, [pp = pred.get(), pairs = std::move(pairs),
                                gtc = MatRM<S>(gt), m, k](Tensor<S>& self) {
    pp->ensure_grad();
    S g = self.grad[0] / S(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto at = [&](std::size_t j, int c) -> S& {
        return pp->grad[i * 3 * k + j * 3 + c];
      };
      auto pv = [&](std::size_t j, int c) {
        return pp->value[i * 3 * k + j * 3 + c];
      };
      for (std::size_t j = 0; j < k; ++j) {
        std::size_t nb = pairs[i].nn_ab[j];
        for (int c = 0; c < 3; ++c)
          at(j, c) += g * S(2) / S(k) *
                      (pv(j, c) - gtc(Eigen::Index(i * k + nb), c));
      }
      for (std::size_t j = 0; j < k; ++j) {
        std::size_t na = pairs[i].nn_ba[j];
        for (int c = 0; c < 3; ++c)
          at(na, c) += g * S(2) / S(k) *
                       (pv(na, c) - gtc(Eigen::Index(i * k + j), c));
      }
    }
  });
  return out;
}

// ---- contrastive alignment ----

// one-directional InfoNCE: normalized rows of z1 score against all rows of
// z2, and row i must pick column i
template <class S>
Var<S> info_nce(const Var<S>& z1, const Var<S>& z2, double tau) {
  check(tau > 0, cat("info_nce: temperature ", tau, " must be positive"));
  check(z1->rank() == 2 && z2->rank() == 2 &&
            detail::same_shape(z1->shape, z2->shape),
        cat("info_nce: shapes ", shape_str(z1->shape), " and ",
            shape_str(z2->shape), " must match"));
  std::size_t B = z1->shape[0];
  auto logits = scale(matmul(l2_normalize_rows(z1),
                             transpose(l2_normalize_rows(z2))),
                      1.0 / tau);
  std::vector<int> targets(B);
  for (std::size_t i = 0; i < B; ++i) targets[i] = int(i);
  return cross_entropy(logits, targets, std::vector<unsigned char>(B, 1));
}

// pool each sample's token rows to one vector, then InfoNCE across samples
template <class S>
Var<S> info_nce_tokens(const std::vector<Var<S>>& view1,
                       const std::vector<Var<S>>& view2, double tau) {
  check(view1.size() == view2.size() && !view1.empty(),
        "info_nce_tokens: views must pair up");
  std::vector<Var<S>> p1, p2;
  for (std::size_t b = 0; b < view1.size(); ++b) {
    p1.push_back(mean_over_rows(view1[b]));
    p2.push_back(mean_over_rows(view2[b]));
  }
  return info_nce(concat_rows<S>(p1), concat_rows<S>(p2), tau);
}

// ---- the combined pretraining objective ----

enum class HybridVariant { Feature, Patch };

template <class S>
struct HybridSample {
  TokenSet<S> tokens;
  std::vector<int> text;  // caption ids, sentinels included
};

struct HybridConfig {
  double mask_ratio = 0.3;
  HybridVariant variant = HybridVariant::Feature;
};

template <class S>
struct LossReport {
  struct Entry {
    std::string name;
    double weight = 1.0;
    Var<S> value;
  };
  std::vector<Entry> terms;
  Var<S> total;  // left-fold sum of weighted terms, in order

  void push(const std::string& name, Var<S> term, double weight = 1.0) {
    auto contrib = weight == 1.0 ? term : scale(term, weight);
    total = total ? add(total, contrib) : contrib;
    terms.push_back({name, weight, std::move(term)});
  }

  const Var<S>& term(const std::string& name) const {
    for (const auto& e : terms)
      if (e.name == name) return e.value;
    throw ValueError(cat("LossReport: no term named ", name));
  }
};

template <class S>
struct HybridLoss {
  LossReport<S> report;
  std::vector<MaskSpec> masks;
  std::vector<std::size_t> token_counts;  // per grid level, from the forward
};

namespace detail {

// snapshot of token features at the given indices, cut loose from the graph
template <class S>
MatRM<S> feature_targets(const std::vector<HybridSample<S>>& batch,
                         const std::vector<MaskSpec>& masks,
                         const std::vector<std::size_t> MaskSpec::* side,
                         std::size_t dim) {
  std::size_t rows = 0;
  for (const auto& m : masks) rows += (m.*side).size();
  MatRM<S> out;
  out.resize(Eigen::Index(rows), Eigen::Index(dim));
  Eigen::Index at = 0;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (auto idx : masks[b].*side) {
      for (std::size_t c = 0; c < dim; ++c)
        out(at, Eigen::Index(c)) = batch[b].tokens.tokens->value[idx * dim + c];
      ++at;
    }
  return out;
}

template <class S>
MatRM<S> patch_targets(const std::vector<HybridSample<S>>& batch,
                       const std::vector<MaskSpec>& masks,
                       const std::vector<std::size_t> MaskSpec::* side,
                       std::size_t k) {
  std::size_t rows = 0;
  for (const auto& m : masks) rows += (m.*side).size();
  MatRM<S> out;
  out.resize(Eigen::Index(rows * k), 3);
  Eigen::Index at = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    check(batch[b].tokens.patch_k == k,
          "hybrid: samples disagree on patch size");
    for (auto idx : masks[b].*side)
      for (std::size_t j = 0; j < k; ++j)
        out.row(at++) = batch[b].tokens.patches.row(Eigen::Index(idx * k + j));
  }
  return out;
}

}  // namespace detail

// Caption modeling with masked points: each sample keeps its visible tokens
// in order, appends one mask-token learn slot per hidden token (slots get
// no coordinate encoding), and reads text after the points. The loss
// is next-token cross entropy, plus a hidden-side term at the learn slots,
// plus a visible-side term; the feature variant regresses hidden features
// and rebuilds visible patches, the patch variant swaps the two targets.
// All regression targets are detached snapshots.
template <class S>
HybridLoss<S> hybrid_semantic_loss(const Model<S>& model,
                                   const std::vector<HybridSample<S>>& batch,
                                   const HybridConfig& hc, Rng rng) {
  check(!batch.empty(), "hybrid: empty batch");
  const std::size_t B = batch.size();
  HybridLoss<S> out;
  std::vector<Seq<S>> seqs(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ts = batch[b].tokens;
    check(ts.count() > 1, cat("hybrid: sample ", b, " has ", ts.count(),
                              " tokens, needs at least 2"));
    check(batch[b].text.size() >= 2,
          cat("hybrid: sample ", b, " needs sentinel-wrapped text"));
    auto mask = MaskSpec::draw(ts.count(), hc.mask_ratio, rng.fork("mask", b));
    check(!mask.visible.empty(),
          cat("hybrid: ratio ", hc.mask_ratio, " leaves no visible tokens of ",
              ts.count()));

    auto visible = gather_rows(ts.tokens, mask.visible);
    seqs[b].point_feats =
        mask.masked.empty()
            ? visible
            : concat_rows<S>({visible, broadcast_row(model.mask_token(),
                                                     mask.masked.size())});
    // learn slots carry placeholder coordinates and sit past the encoding
    // cap: the hidden centers never reach the model
    seqs[b].point_coords.setZero(Eigen::Index(ts.count()), 3);
    for (std::size_t i = 0; i < mask.visible.size(); ++i)
      seqs[b].point_coords.row(Eigen::Index(i)) =
          ts.centers.row(Eigen::Index(mask.visible[i]));
    seqs[b].encoded_points = mask.visible.size();
    seqs[b].text = batch[b].text;
    out.masks.push_back(std::move(mask));
  }

  auto fwd = model.forward(seqs);
  out.token_counts = fwd.token_counts;

  // next-token cross entropy over every text transition
  std::vector<int> targets(fwd.text_logits->shape[0], 0);
  std::vector<unsigned char> tmask(targets.size(), 0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& span = fwd.text_span[b];
    for (std::size_t i = 0; i + 1 < span.len; ++i) {
      targets[span.offset + i] = batch[b].text[i + 1];
      tmask[span.offset + i] = 1;
    }
  }
  auto ce = cross_entropy(fwd.text_logits, targets, tmask);

  // regression rows, gathered batch-wide: learn slots sit after the
  // visible block inside each sample's span
  std::vector<std::size_t> slot_rows, visible_rows;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& span = fwd.point_span[b];
    std::size_t n_vis = out.masks[b].visible.size();
    for (std::size_t i = 0; i < n_vis; ++i)
      visible_rows.push_back(span.offset + i);
    for (std::size_t i = n_vis; i < span.len; ++i)
      slot_rows.push_back(span.offset + i);
  }
  auto vis_feats = gather_rows(fwd.point_final, visible_rows);
  std::size_t k = batch[0].tokens.patch_k;

  Var<S> mask_term, recon;
  if (slot_rows.empty()) {
    mask_term = constant<S>({1}, {S(0)});
  } else {
    auto slot_feats = gather_rows(fwd.point_final, slot_rows);
    mask_term =
        hc.variant == HybridVariant::Feature
            ? masked_mse(model.predict_head(slot_feats),
                         detail::feature_targets(batch, out.masks,
                                                 &MaskSpec::masked,
                                                 model.cfg.dim))
            : chamfer_patches(model.patch_head(slot_feats),
                              detail::patch_targets(batch, out.masks,
                                                    &MaskSpec::masked, k));
  }
  recon = hc.variant == HybridVariant::Feature
              ? chamfer_patches(model.patch_head(vis_feats),
                                detail::patch_targets(batch, out.masks,
                                                      &MaskSpec::visible, k))
              : masked_mse(model.predict_head(vis_feats),
                           detail::feature_targets(batch, out.masks,
                                                   &MaskSpec::visible,
                                                   model.cfg.dim));

  out.report.push("ce", ce);
  out.report.push("mask", mask_term);
  out.report.push("recon", recon);
  return out;
}

}  // namespace pf
