#pragma once

#include <cstddef>
#include <vector>

#include "pointform/embedding.hpp"
#include "pointform/hga.hpp"
#include "pointform/model.hpp"

namespace pf {

// analytic parameter counts, grouped the way the tables group them; the
// embedding trunk (lift + stages) is listed apart from the projector that
// widens tokens to the model dimension
struct ParamBreakdown {
  std::size_t embed_trunk = 0;
  std::size_t embed_proj = 0;
  std::size_t text_tables = 0;
  std::size_t blocks = 0;
  std::size_t heads = 0;
  std::size_t grid_attention = 0;

  std::size_t total() const {
    return embed_trunk + embed_proj + text_tables + blocks + heads +
           grid_attention;
  }
};

inline ParamBreakdown count_params(const ModelConfig& mc, const EmbedConfig& ec,
                                   const HgaPlan& plan) {
  ParamBreakdown out;
  const std::size_t enc = 6 * ec.freq_bands;
  out.embed_trunk = 6 * ec.stage_dims[0] + ec.stage_dims[0];
  for (int s = 0; s < 3; ++s)
    out.embed_trunk += (ec.stage_dims[s] + enc) * ec.stage_dims[s + 1] +
                       ec.stage_dims[s + 1];
  out.embed_proj = ec.stage_dims[3] * ec.model_dim + ec.model_dim;

  const std::size_t D = mc.dim, H = mc.ffn_mult * mc.dim;
  out.text_tables = mc.vocab * D + mc.max_text * D + D;
  const std::size_t per_layer = 6 * mc.pos_bands * D  // coordinate projection
                                + 2 * D               // ln1
                                + 4 * (D * D + D)     // attention
                                + 2 * D               // ln2
                                + D * H + H + H * D + D;  // ffn
  out.blocks = mc.layers * per_layer;

  out.heads = 2 * D                     // final norm
              + D * mc.vocab + mc.vocab  // text head
              + D * D + D                // feature predictor
              + D * 3 * ec.group_k + 3 * ec.group_k;  // patch head
  if (mc.kd_dim) out.heads += D * mc.kd_dim + mc.kd_dim;

  if (plan.cell_attention)
    for (const auto& b : plan.blocks)
      out.grid_attention += b.aggregate_after.size() * (4 * D * D + 1);
  return out;
}

// point rows entering each layer plus every grid event, reconstructed from
// a forward's token-count log
struct LayerTrace {
  std::vector<std::size_t> entering;  // one entry per layer
  struct Event {
    std::size_t layer = 0;  // 1-based, fired after this layer
    std::size_t rows_in = 0, rows_out = 0;
  };
  std::vector<Event> events;
};

inline LayerTrace layer_trace(const HgaPlan& plan, std::size_t layers,
                              const std::vector<std::size_t>& token_counts) {
  check(!token_counts.empty(), "layer_trace: empty token counts");
  LayerTrace out;
  std::size_t current = token_counts[0], at = 1;
  for (std::size_t l = 1; l <= layers; ++l) {
    out.entering.push_back(current);
    bool touched = false;
    for (const auto& b : plan.blocks) {
      for (auto a : b.aggregate_after) touched |= a == l;
      for (auto p : b.propagate_after) touched |= p == l;
    }
    if (touched) {
      check(at < token_counts.size(),
            cat("layer_trace: log ends before layer ", l));
      out.events.push_back({l, current, token_counts[at]});
      current = token_counts[at++];
    }
  }
  check(at == token_counts.size(),
        cat("layer_trace: ", token_counts.size(), " log entries, used ", at));
  return out;
}

// multiply-add estimate of one forward pass for a single sample; matmul
// (a,b)x(b,c) counts a*b*c
struct FlopsBreakdown {
  double embed = 0;
  double attention_proj = 0;  // q, k, v, output maps
  double attention_mix = 0;   // score and value mixing, quadratic in length
  double ffn = 0;
  double position = 0;
  double grid = 0;
  double lm_head = 0;

  double total() const {
    return embed + attention_proj + attention_mix + ffn + position + grid +
           lm_head;
  }
};

inline FlopsBreakdown flops_forward(const ModelConfig& mc, const EmbedConfig& ec,
                                    const LayerTrace& trace,
                                    std::size_t text_len) {
  check(trace.entering.size() == mc.layers,
        cat("flops: trace covers ", trace.entering.size(), " layers, model has ",
            mc.layers));
  FlopsBreakdown out;
  const double D = double(mc.dim), H = double(mc.ffn_mult * mc.dim);

  out.embed = double(ec.input_points) * 6.0 * double(ec.stage_dims[0]);
  for (int s = 0; s < 3; ++s)
    out.embed += double(ec.stage_sizes[s] * ec.group_k) *
                 double(ec.stage_dims[s] + 6 * ec.freq_bands) *
                 double(ec.stage_dims[s + 1]);
  out.embed += double(ec.stage_sizes[2]) * double(ec.stage_dims[3]) *
               double(ec.model_dim);

  for (std::size_t l = 0; l < mc.layers; ++l) {
    double P = double(trace.entering[l]);
    double T = P + double(text_len);
    out.position += P * 6.0 * double(mc.pos_bands) * D;
    out.attention_proj += 4.0 * T * D * D;
    out.attention_mix += 2.0 * T * T * D;
    out.ffn += 2.0 * T * D * H;
  }
  for (const auto& e : trace.events) {
    if (e.rows_out >= e.rows_in) continue;  // propagation is a copy
    double m = double(e.rows_in), cells = double(std::max<std::size_t>(1, e.rows_out));
    out.grid += 4.0 * m * D * D;           // per-cell attention projections
    out.grid += 2.0 * (m * m / cells) * D;  // scores, cells of even size
  }
  out.lm_head = double(text_len) * D * double(mc.vocab);
  return out;
}

// the trace of a model that never aggregates: a constant token count
inline LayerTrace plain_trace(std::size_t layers, std::size_t tokens) {
  LayerTrace t;
  t.entering.assign(layers, tokens);
  return t;
}

}  // namespace pf
