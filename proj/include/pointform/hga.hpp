#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pointform/geometry.hpp"
#include "pointform/optim.hpp"
#include "pointform/tensor.hpp"

namespace pf {

enum class HgaPooling { Mean, Max, MaxMean };

// one aggregate/propagate episode; indices are 1-based layers and mean
// "apply after this layer's block"
struct HgaBlock {
  std::vector<std::size_t> aggregate_after;
  std::vector<std::size_t> propagate_after;
};

struct HgaPlan {
  std::vector<HgaBlock> blocks;
  HgaPooling pooling = HgaPooling::MaxMean;
  bool cell_attention = true;
  double alpha = 0.02;
  double s_min = 0.02;
  double s_max = 1.0;
  std::vector<double> theta;  // one offset per aggregation depth, kept at 0

  bool empty() const { return blocks.empty(); }

  std::size_t depth() const {
    std::size_t d = 0;
    for (const auto& b : blocks) d = std::max(d, b.aggregate_after.size());
    return d;
  }

  std::vector<double> cell_sizes() const {
    return grid_schedule(theta, alpha, s_min, s_max);
  }

  void validate(std::size_t n_layers) const {
    check(theta.size() >= depth(),
          cat("HgaPlan: ", depth(), " aggregation levels need ", depth(),
              " theta entries, got ", theta.size()));
    if (!blocks.empty()) grid_schedule(theta, alpha, s_min, s_max);
    std::size_t prev_end = 0;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const auto& b = blocks[bi];
      check(!b.aggregate_after.empty(), cat("HgaPlan: block ", bi, " is empty"));
      check(b.aggregate_after.size() == b.propagate_after.size(),
            cat("HgaPlan: block ", bi, " aggregates ", b.aggregate_after.size(),
                " times but propagates ", b.propagate_after.size()));
      auto increasing = [](const std::vector<std::size_t>& v) {
        for (std::size_t i = 1; i < v.size(); ++i)
          if (v[i] <= v[i - 1]) return false;
        return true;
      };
      check(increasing(b.aggregate_after) && increasing(b.propagate_after),
            cat("HgaPlan: block ", bi, " layer indices must increase"));
      check(b.aggregate_after.front() > prev_end,
            cat("HgaPlan: block ", bi, " overlaps the previous block"));
      check(b.aggregate_after.back() < b.propagate_after.front(),
            cat("HgaPlan: block ", bi,
                " must finish aggregating before it propagates"));
      check(b.propagate_after.back() <= n_layers,
            cat("HgaPlan: block ", bi, " reaches layer ",
                b.propagate_after.back(), " of ", n_layers));
      check(b.aggregate_after.front() >= 1, "HgaPlan: layer indices are 1-based");
      prev_end = b.propagate_after.back();
    }
  }
};

inline HgaPlan desk_plan() {
  HgaPlan p;
  p.blocks = {{{1, 2, 3}, {5, 6, 7}}};
  p.theta = {0, 0, 0};
  return p;
}

inline HgaPlan paper_plan() {
  HgaPlan p;
  p.blocks = {{{1, 2, 3}, {6, 7, 8}}, {{11, 12, 13}, {16, 17, 18}}};
  p.theta = {0, 0, 0};
  return p;
}

// per-sample LIFO of grid mappings so propagation can restore exactly the
// resolution and coordinates each aggregation consumed
template <class S>
struct HgaState {
  struct Level {
    GridMapping mapping;
    Points<S> coords;
  };
  std::vector<Level> stack;
};

// Hierarchical geometry aggregation: bucket point tokens into grid cells of
// scheduled sizes, mix each cell with gated single-head attention, pool to
// one token per cell, and later scatter cell tokens back to their members.
template <class S>
class Hga {
 public:
  HgaPlan plan;

  void init(const HgaPlan& p, std::size_t dim, ParamStore<S>& store, Rng& rng) {
    plan = p;
    dim_ = dim;
    sizes_ = plan.empty() ? std::vector<double>{} : plan.cell_sizes();
    attn_.clear();
    if (!plan.cell_attention) return;
    for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
      std::vector<CellAttn> levels;
      for (std::size_t l = 0; l < plan.blocks[b].aggregate_after.size(); ++l) {
        auto tag = cat("hga.b", b + 1, ".l", l + 1, ".");
        CellAttn a;
        a.wq = store.add(tag + "wq", param<S>({dim, dim}, rng, 0.02));
        a.wk = store.add(tag + "wk", param<S>({dim, dim}, rng, 0.02));
        a.wv = store.add(tag + "wv", param<S>({dim, dim}, rng, 0.02));
        a.wo = store.add(tag + "wo", param<S>({dim, dim}, rng, 0.02));
        a.gate = store.add(tag + "gate", param_const<S>({1}, S(0)));
        levels.push_back(a);
      }
      attn_.push_back(std::move(levels));
    }
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < attn_.size(); ++b)
      for (std::size_t l = 0; l < attn_[b].size(); ++l)
        for (const char* leaf : {"wq", "wk", "wv", "wo", "gate"})
          names.push_back(cat("hga.b", b + 1, ".l", l + 1, ".", leaf));
    return names;
  }

  double cell_size(std::size_t level) const { return sizes_.at(level); }

  // x: (P, D) point tokens at coords (P, 3); returns (cells, D) and replaces
  // coords with the cell means, pushing the mapping for the matching propagate
  Var<S> aggregate(std::size_t block, std::size_t level, const Var<S>& x,
                   Points<S>& coords, HgaState<S>& state) const {
    check(x->rank() == 2 && x->shape[1] == dim_,
          cat("hga: tokens must be (P, ", dim_, "), got ", shape_str(x->shape)));
    check(std::size_t(coords.rows()) == x->shape[0],
          "hga: coords and tokens disagree on point count");
    auto mapping = dynamic_grid_sample(coords, sizes_.at(level));
    auto pad = pad_plan(mapping);

    // slot gather over the virtual stack [tokens; cell means]; pad slots
    // repeat their cell's mean token and are flagged invalid
    std::vector<S> inv_count(mapping.cells());
    for (std::size_t c = 0; c < mapping.cells(); ++c)
      inv_count[c] = S(1) / S(mapping.members[c].size());
    auto means = row_scale(
        scatter_add_rows(x, mapping.cell_of_point, mapping.cells()), inv_count);
    auto stacked = concat_rows<S>({x, means});
    auto grid = reshape(gather_rows(stacked, pad.slot_index),
                        {pad.cells, pad.k_max, dim_});

    Var<S> mixed = grid;
    if (plan.cell_attention) {
      const auto& a = attn_.at(block).at(level);
      auto q = matmul(grid, a.wq);
      auto k = matmul(grid, a.wk);
      auto v = matmul(grid, a.wv);
      auto scores = scale(bmm(q, k, true), 1.0 / std::sqrt(double(dim_)));
      MatRM<S> key_mask(pad.cells, pad.k_max);
      for (std::size_t c = 0; c < pad.cells; ++c)
        for (std::size_t j = 0; j < pad.k_max; ++j)
          key_mask(Eigen::Index(c), Eigen::Index(j)) =
              pad.slot_valid[c * pad.k_max + j]
                  ? S(0)
                  : -std::numeric_limits<S>::infinity();
      auto attn = softmax(scores, &key_mask, MaskLayout::PerBatchK);
      auto ctx = matmul(bmm(attn, v), a.wo);
      mixed = add(grid, mul(ctx, tanh_t(a.gate)));
    }

    Var<S> pooled;
    switch (plan.pooling) {
      case HgaPooling::Mean:
        pooled = masked_mean_mid(mixed, pad.slot_valid);
        break;
      case HgaPooling::Max:
        pooled = reduce_max_mid(mixed, &pad.slot_valid);
        break;
      case HgaPooling::MaxMean:
        pooled = scale(add(masked_mean_mid(mixed, pad.slot_valid),
                           reduce_max_mid(mixed, &pad.slot_valid)),
                       0.5);
        break;
    }

    state.stack.push_back({mapping, coords});
    coords = cell_means(coords, mapping);
    return pooled;
  }

  // x: (cells, D) from the matching aggregate; every member point takes its
  // cell's token, and the pre-aggregation coordinates come back
  Var<S> propagate(const Var<S>& x, Points<S>& coords, HgaState<S>& state) const {
    check(!state.stack.empty(), "hga: propagate without a pending aggregate");
    auto level = std::move(state.stack.back());
    state.stack.pop_back();
    check(x->rank() == 2 && x->shape[0] == level.mapping.cells(),
          cat("hga: expected ", level.mapping.cells(), " cell tokens, got ",
              shape_str(x->shape)));
    auto out = gather_rows(x, level.mapping.cell_of_point);
    coords = std::move(level.coords);
    return out;
  }

 private:
  struct CellAttn {
    Var<S> wq, wk, wv, wo, gate;
  };
  std::size_t dim_ = 0;
  std::vector<double> sizes_;
  std::vector<std::vector<CellAttn>> attn_;
};

}  // namespace pf
