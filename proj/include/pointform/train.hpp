#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "pointform/checkpoint.hpp"
#include "pointform/data.hpp"
#include "pointform/losses.hpp"
#include "pointform/model.hpp"
#include "pointform/optim.hpp"

namespace pf {

enum class Stage { Pretrain, Tune };

// which self-supervised term joins the text loss during pretraining
enum class SslChoice {
  Hybrid,       // learn slots appended after the visible tokens
  MaskedFeat,   // in-place mask tokens, hidden features regressed
  MaskedPatch,  // in-place mask tokens, hidden patches rebuilt
  ReconFeat,    // no masking, every token regresses its own features
  ReconPatch,   // no masking, every token rebuilds its patch
  Contrastive,  // two masked views, pooled and matched across the batch
  Kd            // adapted tokens regress teacher features from file
};

inline std::string stage_word(Stage s) {
  return s == Stage::Pretrain ? "pretrain" : "tune";
}

inline std::string ssl_word(SslChoice c) {
  switch (c) {
    case SslChoice::Hybrid: return "hybrid";
    case SslChoice::MaskedFeat: return "masked-feat";
    case SslChoice::MaskedPatch: return "masked-patch";
    case SslChoice::ReconFeat: return "recon-feat";
    case SslChoice::ReconPatch: return "recon-patch";
    case SslChoice::Contrastive: return "contrastive";
    case SslChoice::Kd: return "kd";
  }
  throw ValueError("ssl_word: bad enum");
}

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  SslChoice ssl = SslChoice::Hybrid;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double lr = 4e-4;
  double weight_decay = 0.01;
  LrSchedule schedule = LrSchedule::Cosine;
  double mask_ratio = 0.3;
  HybridVariant variant = HybridVariant::Feature;
  double tau = 0.07;
  double ce_weight = 1.0;
  double ssl_weight = 1.0;
  std::uint64_t seed = 42;
  std::size_t checkpoint_every = 0;  // steps between saves; 0 = final only
  std::string out_dir;               // empty: keep everything in memory
  std::string resume_path;           // PFCK training state to continue from

  void validate() const {
    check(steps > 0, "train: steps must be positive");
    check(batch_size > 0, "train: batch_size must be positive");
    check(lr >= 0, "train: negative learning rate");
    check(mask_ratio >= 0 && mask_ratio < 1,
          cat("train: mask_ratio ", mask_ratio, " outside [0, 1)"));
    check(tau > 0, "train: tau must be positive");
  }
};

template <class S>
struct TrainResult {
  std::vector<std::string> log_lines;  // one JSON object per step
  std::vector<double> total_history;
  std::string checkpoint_path;  // final training state, when out_dir given
};

// model parameters plus optimizer moments and the step counter, one file
template <class S>
void save_train_state(const std::string& path, const ParamStore<S>& store,
                      AdamW<S>& opt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("train state: cannot open ", path, " for writing"));
  os.write("PFCK", 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  auto put_record = [&os](const std::string& name,
                          const std::vector<std::size_t>& shape,
                          const auto& data) {
    detail::put<std::uint32_t>(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put<std::uint32_t>(os, std::uint32_t(shape.size()));
    for (auto d : shape) detail::put<std::uint64_t>(os, d);
    for (auto v : data) detail::put<double>(os, double(v));
  };
  for (const auto& it : store.items)
    put_record(it.name, it.var->shape, it.var->value);
  for (auto ref : opt.state_refs()) {
    put_record(cat("opt.m.", ref.name), {ref.m->size()}, *ref.m);
    put_record(cat("opt.v.", ref.name), {ref.v->size()}, *ref.v);
  }
  put_record("opt.step", {1}, std::vector<double>{double(opt.step_count())});
  if (!os) throw IoError(cat("train state: write failed for ", path));
}

template <class S>
void load_train_state(const std::string& path, ParamStore<S>& store,
                      AdamW<S>& opt) {
  auto records = read_checkpoint(path);
  auto refs = opt.state_refs();
  check(records.size() == store.items.size() + 2 * refs.size() + 1,
        cat("train state: ", path, " holds ", records.size(),
            " records, expected ", store.items.size() + 2 * refs.size() + 1));
  auto fill = [](std::vector<S>& dst, const TensorRecord& rec) {
    check(dst.size() == rec.data.size(),
          cat("train state: size mismatch for ", rec.name));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = S(rec.data[i]);
  };
  for (const auto& rec : records) {
    if (rec.name == "opt.step") {
      opt.set_step_count(std::size_t(rec.data.at(0)));
    } else if (rec.name.rfind("opt.m.", 0) == 0 ||
               rec.name.rfind("opt.v.", 0) == 0) {
      bool want_m = rec.name[4] == 'm';
      std::string pname = rec.name.substr(6);
      bool found = false;
      for (auto& ref : refs)
        if (ref.name == pname) {
          fill(want_m ? *ref.m : *ref.v, rec);
          found = true;
          break;
        }
      check(found, cat("train state: optimizer has no slot for ", rec.name));
    } else {
      bool found = false;
      for (auto& it : store.items)
        if (it.name == rec.name) {
          check(it.var->shape == rec.shape,
                cat("train state: shape mismatch for ", rec.name));
          for (std::size_t i = 0; i < rec.data.size(); ++i)
            it.var->value[i] = S(rec.data[i]);
          found = true;
          break;
        }
      check(found, cat("train state: model has no parameter named ", rec.name));
    }
  }
}

// warm-start a tuning stage: model parameters load by name from a training
// state or plain checkpoint, optimizer records are skipped, and only fresh
// grid-attention tables may be absent (the tuning plan introduces them)
template <class S>
void load_pretrained_params(const std::string& path, ParamStore<S>& store) {
  std::set<std::string> loaded;
  for (const auto& rec : read_checkpoint(path)) {
    if (rec.name == "opt.step" || rec.name.rfind("opt.m.", 0) == 0 ||
        rec.name.rfind("opt.v.", 0) == 0)
      continue;
    bool found = false;
    for (auto& it : store.items)
      if (it.name == rec.name) {
        check(it.var->shape == rec.shape,
              cat("pretrained state: shape mismatch for ", rec.name));
        for (std::size_t i = 0; i < rec.data.size(); ++i)
          it.var->value[i] = S(rec.data[i]);
        found = true;
        break;
      }
    check(found,
          cat("pretrained state: model has no parameter named ", rec.name));
    loaded.insert(rec.name);
  }
  for (const auto& it : store.items)
    check(loaded.count(it.name) > 0 || it.name.rfind("hga.", 0) == 0,
          cat("pretrained state: ", path, " is missing ", it.name));
}

namespace detail {

// [bos] caption [eos]
inline std::vector<int> wrap_text(const Tokenizer& tok,
                                  const std::string& caption) {
  std::vector<int> ids = tok.encode(caption);
  ids.insert(ids.begin(), Tokenizer::kBos);
  ids.push_back(Tokenizer::kEos);
  return ids;
}

// next-token cross entropy over every text transition in the batch
template <class S>
Var<S> batch_ce(const ForwardOut<S>& fwd,
                const std::vector<std::vector<int>>& texts) {
  std::vector<int> targets(fwd.text_logits->shape[0], 0);
  std::vector<unsigned char> mask(targets.size(), 0);
  for (std::size_t b = 0; b < texts.size(); ++b) {
    const auto& span = fwd.text_span[b];
    for (std::size_t i = 0; i + 1 < span.len; ++i) {
      targets[span.offset + i] = texts[b][i + 1];
      mask[span.offset + i] = 1;
    }
  }
  return cross_entropy(fwd.text_logits, targets, mask);
}

// in-place masking: hidden rows are swapped for the learnable token while
// every row keeps its position and coordinates
template <class S>
Seq<S> masked_in_place(const Model<S>& model, const TokenSet<S>& ts,
                       const MaskSpec& mask, const std::vector<int>& text) {
  Seq<S> seq;
  if (mask.masked.empty()) {
    seq.point_feats = ts.tokens;
  } else {
    std::vector<std::size_t> slot_of(ts.count(), 0);
    for (auto idx : mask.masked) slot_of[idx] = 1;
    // rows come from [tokens; mask token]: visible rows map to themselves,
    // hidden rows all map to the appended mask row
    std::vector<std::size_t> pick(ts.count());
    for (std::size_t i = 0; i < ts.count(); ++i)
      pick[i] = slot_of[i] ? ts.count() : i;
    seq.point_feats = gather_rows(
        concat_rows<S>({ts.tokens, model.mask_token()}), pick);
  }
  seq.point_coords = ts.centers;
  seq.text = text;
  return seq;
}

template <class S>
MatRM<S> rows_of(const TokenSet<S>& ts, const std::vector<std::size_t>& idx,
                 std::size_t dim) {
  MatRM<S> out;
  out.resize(Eigen::Index(idx.size()), Eigen::Index(dim));
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t c = 0; c < dim; ++c)
      out(Eigen::Index(i), Eigen::Index(c)) = ts.tokens->value[idx[i] * dim + c];
  return out;
}

template <class S>
MatRM<S> patches_of(const TokenSet<S>& ts, const std::vector<std::size_t>& idx) {
  MatRM<S> out;
  out.resize(Eigen::Index(idx.size() * ts.patch_k), 3);
  Eigen::Index at = 0;
  for (auto i : idx)
    for (std::size_t j = 0; j < ts.patch_k; ++j)
      out.row(at++) = ts.patches.row(Eigen::Index(i * ts.patch_k + j));
  return out;
}

inline std::vector<std::size_t> iota_idx(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace detail

// per-step losses for one batch of samples; exposed so the training loop
// and tests share one definition
template <class S>
struct StepLoss {
  LossReport<S> report;
  std::vector<std::size_t> token_counts;
};

template <class S>
StepLoss<S> step_loss(const Model<S>& model,
                      const std::vector<TokenSet<S>>& tokens,
                      const std::vector<std::vector<int>>& texts,
                      const TrainConfig& tc, Rng rng,
                      const std::vector<const MatRM<S>*>& teachers = {}) {
  check(tokens.size() == texts.size() && !tokens.empty(),
        "step_loss: tokens and texts must pair up");
  const std::size_t B = tokens.size();
  StepLoss<S> out;

  if (tc.stage == Stage::Tune) {
    std::vector<Seq<S>> seqs(B);
    for (std::size_t b = 0; b < B; ++b) {
      seqs[b].point_feats = tokens[b].tokens;
      seqs[b].point_coords = tokens[b].centers;
      seqs[b].text = texts[b];
    }
    auto fwd = model.forward(seqs);
    out.token_counts = fwd.token_counts;
    out.report.push("ce", detail::batch_ce(fwd, texts), tc.ce_weight);
    return out;
  }

  if (tc.ssl == SslChoice::Hybrid) {
    std::vector<HybridSample<S>> hs(B);
    for (std::size_t b = 0; b < B; ++b) hs[b] = {tokens[b], texts[b]};
    HybridConfig hc;
    hc.mask_ratio = tc.mask_ratio;
    hc.variant = tc.variant;
    auto hybrid = hybrid_semantic_loss(model, hs, hc, rng);
    out.token_counts = hybrid.token_counts;
    out.report.push("ce", hybrid.report.term("ce"), tc.ce_weight);
    out.report.push("mask", hybrid.report.term("mask"), tc.ssl_weight);
    out.report.push("recon", hybrid.report.term("recon"), tc.ssl_weight);
    return out;
  }

  const bool masks_tokens =
      tc.ssl == SslChoice::MaskedFeat || tc.ssl == SslChoice::MaskedPatch ||
      tc.ssl == SslChoice::Contrastive;
  std::vector<MaskSpec> masks(B);
  std::vector<Seq<S>> seqs(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (masks_tokens) {
      masks[b] = MaskSpec::draw(tokens[b].count(), tc.mask_ratio,
                                rng.fork("mask", b));
      check(!masks[b].visible.empty(),
            cat("train: ratio ", tc.mask_ratio, " leaves no visible tokens"));
    }
    seqs[b] = masks_tokens
                  ? detail::masked_in_place(model, tokens[b], masks[b], texts[b])
                  : [&] {
                      Seq<S> s;
                      s.point_feats = tokens[b].tokens;
                      s.point_coords = tokens[b].centers;
                      s.text = texts[b];
                      return s;
                    }();
  }
  if (tc.ssl == SslChoice::MaskedFeat || tc.ssl == SslChoice::MaskedPatch) {
    std::size_t hidden = 0;
    for (const auto& m : masks) hidden += m.masked.size();
    check(hidden > 0,
          cat("train: mask_ratio ", tc.mask_ratio, " hides no tokens"));
  }
  auto fwd = model.forward(seqs);
  out.token_counts = fwd.token_counts;
  auto ce = detail::batch_ce(fwd, texts);

  // rows of interest across the packed batch
  auto gather_batch = [&](bool masked_side) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b) {
      const auto& span = fwd.point_span[b];
      const auto& side = masked_side ? masks[b].masked : masks[b].visible;
      for (auto i : side) rows.push_back(span.offset + i);
    }
    return gather_rows(fwd.point_final, rows);
  };

  Var<S> ssl;
  std::string ssl_name = ssl_word(tc.ssl);
  switch (tc.ssl) {
    case SslChoice::MaskedFeat: {
      MatRM<S> target;
      {
        std::vector<MatRM<S>> parts;
        std::size_t rows = 0;
        for (std::size_t b = 0; b < B; ++b) rows += masks[b].masked.size();
        target.resize(Eigen::Index(rows), Eigen::Index(model.cfg.dim));
        Eigen::Index at = 0;
        for (std::size_t b = 0; b < B; ++b) {
          auto block = detail::rows_of(tokens[b], masks[b].masked, model.cfg.dim);
          target.middleRows(at, block.rows()) = block;
          at += block.rows();
        }
      }
      ssl = masked_mse(model.predict_head(gather_batch(true)), target);
      break;
    }
    case SslChoice::MaskedPatch: {
      MatRM<S> target;
      {
        std::size_t rows = 0;
        for (std::size_t b = 0; b < B; ++b) rows += masks[b].masked.size();
        target.resize(Eigen::Index(rows * tokens[0].patch_k), 3);
        Eigen::Index at = 0;
        for (std::size_t b = 0; b < B; ++b) {
          auto block = detail::patches_of(tokens[b], masks[b].masked);
          target.middleRows(at, block.rows()) = block;
          at += block.rows();
        }
      }
      ssl = chamfer_patches(model.patch_head(gather_batch(true)), target);
      break;
    }
    case SslChoice::ReconFeat: {
      MatRM<S> target;
      {
        std::size_t rows = 0;
        for (std::size_t b = 0; b < B; ++b) rows += tokens[b].count();
        target.resize(Eigen::Index(rows), Eigen::Index(model.cfg.dim));
        Eigen::Index at = 0;
        for (std::size_t b = 0; b < B; ++b) {
          auto block = detail::rows_of(tokens[b],
                                       detail::iota_idx(tokens[b].count()),
                                       model.cfg.dim);
          target.middleRows(at, block.rows()) = block;
          at += block.rows();
        }
      }
      ssl = masked_mse(model.predict_head(fwd.point_final), target);
      break;
    }
    case SslChoice::ReconPatch: {
      MatRM<S> target;
      {
        std::size_t rows = 0;
        for (std::size_t b = 0; b < B; ++b)
          rows += tokens[b].count() * tokens[b].patch_k;
        target.resize(Eigen::Index(rows), 3);
        Eigen::Index at = 0;
        for (std::size_t b = 0; b < B; ++b) {
          auto block =
              detail::patches_of(tokens[b], detail::iota_idx(tokens[b].count()));
          target.middleRows(at, block.rows()) = block;
          at += block.rows();
        }
      }
      ssl = chamfer_patches(model.patch_head(fwd.point_final), target);
      break;
    }
    case SslChoice::Contrastive: {
      // a second masked view without text, pooled against the first
      std::vector<Seq<S>> seqs2(B);
      for (std::size_t b = 0; b < B; ++b) {
        auto m2 = MaskSpec::draw(tokens[b].count(), tc.mask_ratio,
                                 rng.fork("view2", b));
        seqs2[b] = detail::masked_in_place(model, tokens[b], m2, {});
      }
      auto fwd2 = model.forward(seqs2);
      std::vector<Var<S>> v1, v2;
      for (std::size_t b = 0; b < B; ++b) {
        const auto& s1 = fwd.point_span[b];
        const auto& s2 = fwd2.point_span[b];
        v1.push_back(slice_rows(fwd.point_final, s1.offset, s1.offset + s1.len));
        v2.push_back(
            slice_rows(fwd2.point_final, s2.offset, s2.offset + s2.len));
      }
      ssl = info_nce_tokens(v1, v2, tc.tau);
      break;
    }
    case SslChoice::Kd: {
      check(teachers.size() == B, cat("train: kd needs one teacher matrix per "
                                      "sample, got ",
                                      teachers.size(), " for ", B));
      Var<S> sum;
      for (std::size_t b = 0; b < B; ++b) {
        const auto& span = fwd.point_span[b];
        auto rows =
            slice_rows(fwd.point_final, span.offset, span.offset + span.len);
        auto term = kd_loss(model, rows, *teachers[b]);
        sum = sum ? add(sum, term) : term;
      }
      ssl = B == 1 ? sum : scale(sum, 1.0 / double(B));
      break;
    }
    default:
      throw ValueError("step_loss: unhandled ssl choice");
  }

  out.report.push("ce", ce, tc.ce_weight);
  out.report.push(ssl_name, ssl, tc.ssl_weight);
  return out;
}

// Two-stage loop: pretraining pairs the text loss with a self-supervised
// term under the frozen-tail parameter groups; tuning trains everything
// on the text loss alone. Metrics stream out as JSON lines; a non-finite
// loss aborts with a diagnostic dump.
template <class S>
TrainResult<S> train_loop(const Model<S>& model, ParamStore<S>& store,
                          const std::vector<Sample<S>>& data,
                          const Tokenizer& tok, const TrainConfig& tc,
                          const std::vector<MatRM<S>>* teacher_bank = nullptr) {
  tc.validate();
  check(!data.empty(), "train: empty dataset");

  std::vector<std::vector<int>> texts(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    texts[i] = detail::wrap_text(tok, data[i].caption);

  auto groups = tc.stage == Stage::Pretrain
                    ? model.freeze_plan(store, tc.lr)
                    : all_trainable(store, tc.lr);
  AdamConfig acfg;
  acfg.weight_decay = tc.weight_decay;
  acfg.schedule = tc.schedule;
  acfg.total_steps = tc.steps;
  AdamW<S> opt(store, groups, acfg);

  if (!tc.resume_path.empty()) load_train_state(tc.resume_path, store, opt);
  std::size_t start = opt.step_count();
  check(start < tc.steps, cat("train: resume state is already at step ", start,
                              " of ", tc.steps));

  TrainResult<S> result;
  std::ofstream metrics;
  if (!tc.out_dir.empty()) {
    std::filesystem::create_directories(tc.out_dir);
    auto mode = start > 0 ? std::ios::app : std::ios::trunc;
    metrics.open(tc.out_dir + "/metrics.jsonl", mode);
    if (!metrics)
      throw IoError(cat("train: cannot open metrics log under ", tc.out_dir));
  }

  Rng root(tc.seed);
  for (std::size_t s = start; s < tc.steps; ++s) {
    auto brng = root.fork("batch", s);
    std::vector<std::size_t> idx(tc.batch_size);
    for (auto& i : idx) i = brng.index(data.size());

    std::vector<TokenSet<S>> tokens;
    std::vector<std::vector<int>> batch_texts;
    std::vector<const MatRM<S>*> teachers;
    for (auto i : idx) {
      tokens.push_back(model.embed.forward(data[i].cloud));
      batch_texts.push_back(texts[i]);
      if (teacher_bank) teachers.push_back(&(*teacher_bank)[i]);
    }

    auto step = step_loss(model, tokens, batch_texts, tc,
                          root.fork("mask", s), teachers);
    double total = double(step.report.total->value[0]);
    double lr_now = opt.current_lr();

    nlohmann::ordered_json line;
    line["step"] = s + 1;
    line["stage"] = stage_word(tc.stage);
    for (const auto& e : step.report.terms)
      line[e.name] = double(e.value->value[0]);
    line["total"] = total;
    line["lr"] = lr_now;
    line["tokens"] = step.token_counts;
    std::string text = line.dump();

    if (!std::isfinite(total)) {
      if (!tc.out_dir.empty()) {
        nlohmann::ordered_json dump;
        dump["failed_step"] = s + 1;
        dump["stage"] = stage_word(tc.stage);
        dump["batch_indices"] = idx;
        for (const auto& e : step.report.terms)
          dump[cat("term_", e.name)] = double(e.value->value[0]);
        nlohmann::ordered_json pstats;
        for (const auto& it : store.items) {
          double hi = 0;
          for (S v : it.var->value) hi = std::max(hi, std::abs(double(v)));
          pstats[it.name] = hi;
        }
        dump["param_max_abs"] = pstats;
        std::ofstream nd(tc.out_dir + "/nan-dump.json", std::ios::trunc);
        nd << dump.dump(2) << "\n";
      }
      throw ValueError(cat("train: non-finite loss at step ", s + 1,
                           tc.out_dir.empty() ? "" : "; wrote nan-dump.json"));
    }

    backward(step.report.total);
    opt.step();

    result.log_lines.push_back(text);
    result.total_history.push_back(total);
    if (metrics.is_open()) metrics << text << "\n" << std::flush;

    bool last = s + 1 == tc.steps;
    bool periodic =
        tc.checkpoint_every > 0 && (s + 1) % tc.checkpoint_every == 0;
    if (!tc.out_dir.empty() && (last || periodic)) {
      std::string path = last ? tc.out_dir + "/state-final.pfck"
                              : cat(tc.out_dir, "/state-step-", s + 1, ".pfck");
      save_train_state(path, store, opt);
      if (last) result.checkpoint_path = path;
    }
  }
  return result;
}

// teacher-forced next-token accuracy over caption tokens; clouds that do
// not match the embedding width are resampled onto it first
struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const {
    return total ? double(correct) / double(total) : 0.0;
  }
};

template <class S>
EvalResult caption_token_accuracy(const Model<S>& model,
                                     const std::vector<Sample<S>>& data,
                                     const Tokenizer& tok,
                                     std::size_t batch_size = 8,
                                     std::uint64_t seed = 0) {
  check(!data.empty(), "eval: empty dataset");
  check(batch_size > 0, "eval: batch_size must be positive");
  Rng root(seed);
  EvalResult out;
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    std::size_t hi = std::min(data.size(), at + batch_size);
    std::vector<Seq<S>> seqs;
    std::vector<std::vector<int>> texts;
    for (std::size_t i = at; i < hi; ++i) {
      const auto& cloud = data[i].cloud;
      auto ts = model.embed.forward(
          cloud.size() == model.embed_cfg.input_points
              ? cloud
              : resample(cloud, model.embed_cfg.input_points,
                         root.fork("resample", i)));
      Seq<S> seq;
      seq.point_feats = ts.tokens;
      seq.point_coords = ts.centers;
      seq.text = detail::wrap_text(tok, data[i].caption);
      texts.push_back(seq.text);
      seqs.push_back(std::move(seq));
    }
    auto fwd = model.forward(seqs);
    const std::size_t V = model.cfg.vocab;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const auto& span = fwd.text_span[b];
      for (std::size_t i = 0; i + 1 < span.len; ++i) {
        const S* row = fwd.text_logits->value.data() + (span.offset + i) * V;
        std::size_t arg = 0;
        for (std::size_t c = 1; c < V; ++c)
          if (row[c] > row[arg]) arg = c;
        out.correct += int(arg) == texts[b][i + 1] ? 1 : 0;
        ++out.total;
      }
    }
  }
  return out;
}

}  // namespace pf
