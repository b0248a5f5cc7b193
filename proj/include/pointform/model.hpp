#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "pointform/embedding.hpp"
#include "pointform/hga.hpp"
#include "pointform/optim.hpp"
#include "pointform/tensor.hpp"

namespace pf {

struct ModelConfig {
  std::size_t vocab = 512;
  std::size_t dim = 256;
  std::size_t heads = 4;
  std::size_t layers = 8;
  std::size_t ffn_mult = 4;
  std::size_t max_text = 48;    // learned absolute positions for text slots
  std::size_t pos_bands = 4;    // trig bands for point coordinates
  std::size_t learnable_layers = 4;  // leading blocks that train during pretraining
  std::size_t kd_dim = 64;      // teacher feature width; 0 drops the head
  double ln_eps = 1e-5;

  void validate() const {
    check(dim > 0 && heads > 0 && dim % heads == 0,
          cat("model: dim ", dim, " must divide into ", heads, " heads"));
    check(vocab > 1, "model: vocab must exceed 1");
    check(max_text > 0 && ffn_mult > 0 && pos_bands > 0,
          "model: max_text, ffn_mult, pos_bands must be positive");
    check(learnable_layers <= layers, cat("model: learnable_layers ", learnable_layers,
                                     " exceeds ", layers, " layers"));
  }
};

// one sample of a packed batch: a block of point tokens with coordinates,
// then a block of text ids; either side may be empty. Point rows at index
// encoded_points and beyond skip the per-layer coordinate injection: learn
// slots ride along without revealing where their hidden tokens sit.
template <class S>
struct Seq {
  Var<S> point_feats;      // (P, dim) or null
  Points<S> point_coords;  // (P, 3)
  std::vector<int> text;
  std::size_t encoded_points = std::size_t(-1);  // default: every point row

  std::size_t points() const {
    return point_feats ? point_feats->shape[0] : 0;
  }
};

struct Span {
  std::size_t offset = 0;
  std::size_t len = 0;
};

template <class S>
struct ForwardOut {
  Var<S> text_logits;   // (sum text, vocab), packed in sample order; may be null
  Var<S> point_final;   // (sum points, dim) after the final norm; may be null
  std::vector<Span> text_span;
  std::vector<Span> point_span;
  std::vector<Points<S>> point_coords;  // final per-sample coordinates
  // batch-total point rows: entering the stack, then after each grid event
  std::vector<std::size_t> token_counts;
};

// attention weights of one layer, captured on request
template <class S>
struct AttnProbe {
  std::size_t layer = 1;  // 1-based
  std::vector<MatRM<S>> weights;  // per sample, (heads*T, T)
  std::vector<std::size_t> point_len, text_len;
  std::vector<Points<S>> coords;  // point coordinates entering that layer
};

// Decoder-only transformer over [point tokens; text tokens] with causal
// attention, pre-norm blocks, per-layer trigonometric coordinate injection
// for point rows, and grid aggregation/propagation spliced between layers.
template <class S>
class Model {
 public:
  ModelConfig cfg;
  EmbedConfig embed_cfg;
  PointEmbedding<S> embed;
  Hga<S> hga;

  void init(const ModelConfig& mc, const EmbedConfig& ec, const HgaPlan& plan,
            ParamStore<S>& store, Rng& rng) {
    mc.validate();
    ec.validate();
    plan.validate(mc.layers);
    check(ec.model_dim == mc.dim,
          cat("model: embedding emits ", ec.model_dim, ", model wants ", mc.dim));
    cfg = mc;
    embed_cfg = ec;
    const double sd = 0.02;
    auto zero = [](std::vector<std::size_t> shape) {
      return param_const<S>(std::move(shape), S(0));
    };
    auto one = [](std::vector<std::size_t> shape) {
      return param_const<S>(std::move(shape), S(1));
    };

    embed.cfg = ec;
    embed.init(store, rng.fork("embed"), sd);
    tok_ = store.add("text.tok", param<S>({cfg.vocab, cfg.dim}, rng, sd));
    pos_ = store.add("text.pos", param<S>({cfg.max_text, cfg.dim}, rng, sd));
    mask_token_ = store.add("mask.token", param<S>({1, cfg.dim}, rng, sd));

    layers_.clear();
    const std::size_t enc = 6 * cfg.pos_bands;
    for (std::size_t l = 1; l <= cfg.layers; ++l) {
      Layer lay;
      auto tag = cat("layer", l, ".");
      lay.pos_w = store.add(tag + "pos.w", param<S>({enc, cfg.dim}, rng, sd));
      lay.ln1_g = store.add(tag + "ln1.g", one({cfg.dim}));
      lay.ln1_b = store.add(tag + "ln1.b", zero({cfg.dim}));
      lay.wq = store.add(tag + "attn.wq", param<S>({cfg.dim, cfg.dim}, rng, sd));
      lay.bq = store.add(tag + "attn.bq", zero({cfg.dim}));
      lay.wk = store.add(tag + "attn.wk", param<S>({cfg.dim, cfg.dim}, rng, sd));
      lay.bk = store.add(tag + "attn.bk", zero({cfg.dim}));
      lay.wv = store.add(tag + "attn.wv", param<S>({cfg.dim, cfg.dim}, rng, sd));
      lay.bv = store.add(tag + "attn.bv", zero({cfg.dim}));
      lay.wo = store.add(tag + "attn.wo", param<S>({cfg.dim, cfg.dim}, rng, sd));
      lay.bo = store.add(tag + "attn.bo", zero({cfg.dim}));
      lay.ln2_g = store.add(tag + "ln2.g", one({cfg.dim}));
      lay.ln2_b = store.add(tag + "ln2.b", zero({cfg.dim}));
      std::size_t hidden = cfg.ffn_mult * cfg.dim;
      lay.w1 = store.add(tag + "ffn.w1", param<S>({cfg.dim, hidden}, rng, sd));
      lay.b1 = store.add(tag + "ffn.b1", zero({hidden}));
      lay.w2 = store.add(tag + "ffn.w2", param<S>({hidden, cfg.dim}, rng, sd));
      lay.b2 = store.add(tag + "ffn.b2", zero({cfg.dim}));
      layers_.push_back(lay);
    }
    fln_g_ = store.add("final.ln.g", one({cfg.dim}));
    fln_b_ = store.add("final.ln.b", zero({cfg.dim}));
    lm_w_ = store.add("head.lm.w", param<S>({cfg.dim, cfg.vocab}, rng, sd));
    lm_b_ = store.add("head.lm.b", zero({cfg.vocab}));
    predict_w_ = store.add("head.predict.w", param<S>({cfg.dim, cfg.dim}, rng, sd));
    predict_b_ = store.add("head.predict.b", zero({cfg.dim}));
    patch_w_ = store.add("head.patch.w",
                         param<S>({cfg.dim, 3 * ec.group_k}, rng, sd));
    patch_b_ = store.add("head.patch.b", zero({3 * ec.group_k}));
    if (cfg.kd_dim > 0) {
      kd_w_ = store.add("head.kd.w", param<S>({cfg.dim, cfg.kd_dim}, rng, sd));
      kd_b_ = store.add("head.kd.b", zero({cfg.kd_dim}));
    }
    hga.init(plan, cfg.dim, store, rng);
  }

  const Var<S>& mask_token() const { return mask_token_; }

  Var<S> predict_head(const Var<S>& x) const {
    return add(matmul(x, predict_w_), predict_b_);
  }
  Var<S> patch_head(const Var<S>& x) const {
    return add(matmul(x, patch_w_), patch_b_);
  }
  Var<S> kd_head(const Var<S>& x) const {
    check(bool(kd_w_), "model: kd head disabled (kd_dim = 0)");
    return add(matmul(x, kd_w_), kd_b_);
  }

  ForwardOut<S> forward(const std::vector<Seq<S>>& batch,
                        AttnProbe<S>* probe = nullptr) const {
    check(!batch.empty(), "model: empty batch");
    const std::size_t B = batch.size();
    std::vector<std::size_t> pt_len(B), txt_len(B), enc_cap(B);
    std::vector<Var<S>> parts;
    std::vector<Points<S>> coords(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& s = batch[b];
      pt_len[b] = s.points();
      txt_len[b] = s.text.size();
      enc_cap[b] = std::min(s.encoded_points, pt_len[b]);
      check(pt_len[b] + txt_len[b] > 0, cat("model: sample ", b, " is empty"));
      check(txt_len[b] <= cfg.max_text,
            cat("model: sample ", b, " has ", txt_len[b],
                " text tokens, max_text is ", cfg.max_text));
      if (pt_len[b]) {
        check(s.point_feats->rank() == 2 && s.point_feats->shape[1] == cfg.dim,
              cat("model: point tokens must be (P, ", cfg.dim, "), got ",
                  shape_str(s.point_feats->shape)));
        check(std::size_t(s.point_coords.rows()) == pt_len[b],
              cat("model: sample ", b, " coords disagree with tokens"));
        parts.push_back(s.point_feats);
        coords[b] = s.point_coords;
      }
      if (txt_len[b]) {
        std::vector<std::size_t> ids;
        for (int t : s.text) {
          check(t >= 0 && std::size_t(t) < cfg.vocab,
                cat("model: text id ", t, " out of vocab"));
          ids.push_back(std::size_t(t));
        }
        parts.push_back(add(gather_rows(tok_, ids),
                            slice_rows(pos_, 0, txt_len[b])));
      }
    }
    Var<S> x = concat_rows<S>(parts);

    auto grid_touches = [this](std::size_t layer) {
      for (const auto& blk : hga.plan.blocks) {
        for (auto a : blk.aggregate_after)
          if (a == layer) return true;
        for (auto p : blk.propagate_after)
          if (p == layer) return true;
      }
      return false;
    };
    auto total_points = [&pt_len] {
      std::size_t n = 0;
      for (auto p : pt_len) n += p;
      return n;
    };
    std::vector<std::size_t> token_counts{total_points()};

    std::vector<HgaState<S>> states(B);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      x = add(x, position_injection(l, pt_len, txt_len, coords, enc_cap));
      auto h = layernorm(x, layers_[l].ln1_g, layers_[l].ln1_b, cfg.ln_eps);
      x = add(x, attention(l, h, pt_len, txt_len, coords, probe));
      auto h2 = layernorm(x, layers_[l].ln2_g, layers_[l].ln2_b, cfg.ln_eps);
      auto inner = gelu(add(matmul(h2, layers_[l].w1), layers_[l].b1));
      x = add(x, add(matmul(inner, layers_[l].w2), layers_[l].b2));
      x = hga_step(l + 1, x, pt_len, txt_len, coords, states);
      if (grid_touches(l + 1)) token_counts.push_back(total_points());
    }
    for (std::size_t b = 0; b < B; ++b)
      check(states[b].stack.empty(),
            "model: plan left aggregations unpropagated");

    x = layernorm(x, fln_g_, fln_b_, cfg.ln_eps);

    ForwardOut<S> out;
    out.point_coords = coords;
    out.token_counts = std::move(token_counts);
    out.text_span.resize(B);
    out.point_span.resize(B);
    std::vector<Var<S>> txt_parts, pt_parts;
    std::size_t off = 0, t_off = 0, p_off = 0;
    for (std::size_t b = 0; b < B; ++b) {
      if (pt_len[b]) {
        pt_parts.push_back(slice_rows(x, off, off + pt_len[b]));
        out.point_span[b] = {p_off, pt_len[b]};
        p_off += pt_len[b];
      }
      if (txt_len[b]) {
        txt_parts.push_back(
            slice_rows(x, off + pt_len[b], off + pt_len[b] + txt_len[b]));
        out.text_span[b] = {t_off, txt_len[b]};
        t_off += txt_len[b];
      }
      off += pt_len[b] + txt_len[b];
    }
    if (!pt_parts.empty()) out.point_final = concat_rows<S>(pt_parts);
    if (!txt_parts.empty())
      out.text_logits = add(matmul(concat_rows<S>(txt_parts), lm_w_), lm_b_);
    return out;
  }

  // pretraining groups: the embedding, text tables, leading blocks, grid
  // attention, and heads learn; the remaining blocks freeze at lr zero
  std::vector<GroupDef> freeze_plan(const ParamStore<S>& store, double lr) const {
    GroupDef train{"train", lr, {}};
    GroupDef frozen{"frozen", 0.0, {}};
    for (const auto& it : store.items) {
      bool freeze = false;
      for (std::size_t l = cfg.learnable_layers + 1; l <= cfg.layers; ++l)
        if (it.name.rfind(cat("layer", l, "."), 0) == 0) freeze = true;
      (freeze ? frozen : train).members.push_back(it.name);
    }
    return {train, frozen};
  }

 private:
  struct Layer {
    Var<S> pos_w;
    Var<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Var<S> ln2_g, ln2_b, w1, b1, w2, b2;
  };

  // trig encoding of each sample's current point coordinates, projected and
  // padded with zero rows for text slots so only point rows move; rows past
  // the sample's encoded cap get zeros too (hidden-center learn slots)
  Var<S> position_injection(std::size_t l, const std::vector<std::size_t>& pt_len,
                            const std::vector<std::size_t>& txt_len,
                            const std::vector<Points<S>>& coords,
                            const std::vector<std::size_t>& enc_cap) const {
    std::vector<Var<S>> parts;
    for (std::size_t b = 0; b < pt_len.size(); ++b) {
      std::size_t n = std::min(enc_cap[b], pt_len[b]);
      if (n) {
        Points<S> head = coords[b].topRows(Eigen::Index(n));
        auto enc = trig_encode(head, cfg.pos_bands);
        std::vector<S> flat(enc.data(), enc.data() + enc.size());
        auto enc_v = constant<S>({n, 6 * cfg.pos_bands}, std::move(flat));
        parts.push_back(matmul(enc_v, layers_[l].pos_w));
      }
      if (pt_len[b] > n) parts.push_back(zeros<S>({pt_len[b] - n, cfg.dim}));
      if (txt_len[b]) parts.push_back(zeros<S>({txt_len[b], cfg.dim}));
    }
    return concat_rows<S>(parts);
  }

  Var<S> attention(std::size_t l, const Var<S>& h,
                   const std::vector<std::size_t>& pt_len,
                   const std::vector<std::size_t>& txt_len,
                   const std::vector<Points<S>>& coords,
                   AttnProbe<S>* probe) const {
    const auto& lay = layers_[l];
    std::vector<Var<S>> outs;
    std::size_t off = 0;
    const std::size_t hd = cfg.dim / cfg.heads;
    const bool capture = probe && probe->layer == l + 1;
    if (capture) {
      probe->weights.clear();
      probe->point_len = pt_len;
      probe->text_len = txt_len;
      probe->coords = coords;
    }
    for (std::size_t b = 0; b < pt_len.size(); ++b) {
      std::size_t T = pt_len[b] + txt_len[b];
      auto hb = slice_rows(h, off, off + T);
      off += T;
      auto q = split_heads(add(matmul(hb, lay.wq), lay.bq), cfg.heads);
      auto k = split_heads(add(matmul(hb, lay.wk), lay.bk), cfg.heads);
      auto v = split_heads(add(matmul(hb, lay.wv), lay.bv), cfg.heads);
      auto scores = scale(bmm(q, k, true), 1.0 / std::sqrt(double(hd)));
      MatRM<S> causal(T, T);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j)
          causal(Eigen::Index(i), Eigen::Index(j)) =
              j <= i ? S(0) : -std::numeric_limits<S>::infinity();
      auto attn = softmax(scores, &causal, MaskLayout::SharedQK);
      if (capture) {
        probe->weights.emplace_back(
            Eigen::Map<const MatRM<S>>(attn->value.data(), cfg.heads * T, T));
      }
      auto ctx = merge_heads(bmm(attn, v));
      outs.push_back(add(matmul(ctx, lay.wo), lay.bo));
    }
    return concat_rows<S>(outs);
  }

  // splice grid aggregation or propagation after 1-based layer `layer`,
  // rebuilding the packed rows around each sample's new point block
  Var<S> hga_step(std::size_t layer, const Var<S>& x,
                  std::vector<std::size_t>& pt_len,
                  const std::vector<std::size_t>& txt_len,
                  std::vector<Points<S>>& coords,
                  std::vector<HgaState<S>>& states) const {
    int agg_level = -1;
    std::size_t agg_block = 0;
    bool prop = false;
    for (std::size_t bi = 0; bi < hga.plan.blocks.size(); ++bi) {
      const auto& blk = hga.plan.blocks[bi];
      for (std::size_t li = 0; li < blk.aggregate_after.size(); ++li)
        if (blk.aggregate_after[li] == layer) {
          agg_level = int(li);
          agg_block = bi;
        }
      for (std::size_t li = 0; li < blk.propagate_after.size(); ++li)
        if (blk.propagate_after[li] == layer) prop = true;
    }
    if (agg_level < 0 && !prop) return x;

    std::vector<Var<S>> parts;
    std::size_t off = 0;
    for (std::size_t b = 0; b < pt_len.size(); ++b) {
      std::size_t old_pt = pt_len[b];
      if (old_pt) {
        auto pts = slice_rows(x, off, off + old_pt);
        Var<S> moved =
            agg_level >= 0
                ? hga.aggregate(agg_block, std::size_t(agg_level), pts,
                                coords[b], states[b])
                : hga.propagate(pts, coords[b], states[b]);
        pt_len[b] = moved->shape[0];
        parts.push_back(moved);
      }
      if (txt_len[b])
        parts.push_back(slice_rows(x, off + old_pt, off + old_pt + txt_len[b]));
      off += old_pt + txt_len[b];
    }
    return concat_rows<S>(parts);
  }

  Var<S> tok_, pos_, mask_token_;
  std::vector<Layer> layers_;
  Var<S> fln_g_, fln_b_, lm_w_, lm_b_;
  Var<S> predict_w_, predict_b_, patch_w_, patch_b_, kd_w_, kd_b_;
};

// how much each point token is attended to by the text, per sample: the
// chosen layer's weights averaged over heads and text-query positions,
// next to the point coordinates entering that layer
template <class S>
struct AttnProfile {
  std::size_t layer = 1;
  std::vector<std::vector<double>> weight;
  std::vector<Points<S>> coords;
};

template <class S>
AttnProfile<S> attn_export(const Model<S>& model,
                           const std::vector<Seq<S>>& batch,
                           std::size_t layer) {
  check(layer >= 1 && layer <= model.cfg.layers,
        cat("attn_export: layer ", layer, " outside 1..", model.cfg.layers));
  AttnProbe<S> probe;
  probe.layer = layer;
  model.forward(batch, &probe);

  AttnProfile<S> out;
  out.layer = layer;
  out.coords = probe.coords;
  const std::size_t H = model.cfg.heads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t P = probe.point_len[b], X = probe.text_len[b];
    const std::size_t T = P + X;
    std::vector<double> prof(P, 0.0);
    if (X > 0 && P > 0) {
      const auto& w = probe.weights[b];  // (H*T, T)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t tq = 0; tq < X; ++tq)
          for (std::size_t p = 0; p < P; ++p)
            prof[p] += double(w(Eigen::Index(h * T + P + tq), Eigen::Index(p)));
      for (auto& v : prof) v /= double(H * X);
    }
    out.weight.push_back(std::move(prof));
  }
  return out;
}

}  // namespace pf
