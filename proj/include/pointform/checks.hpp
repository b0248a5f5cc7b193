#pragma once

// Runnable self-checks. Every documented library invariant gets a compact
// executable form keyed "<suite>.<name>"; the CLI `check` subcommand runs
// them and the registry itself is cross-checked against the documented list.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pointform/config.hpp"
#include "pointform/data.hpp"
#include "pointform/flops.hpp"
#include "pointform/losses.hpp"
#include "pointform/model.hpp"
#include "pointform/train.hpp"

namespace pf {

struct CheckResult {
  std::string id;
  bool pass = false;
  std::string detail;  // empty on pass
  double seconds = 0;
};

struct Check {
  std::string id;
  std::string suite;
  std::string summary;
  std::function<std::string()> run;  // returns "" on pass, a complaint otherwise
};

namespace checks_detail {

inline std::string fail(std::string msg) { return msg; }

template <class A, class B>
std::string expect_near(A got, B want, double tol, const char* what) {
  double d = std::abs(double(got) - double(want));
  if (d <= tol) return "";
  return cat(what, ": got ", double(got), ", want ", double(want), " (|diff| ",
             d, " > ", tol, ")");
}

inline bool bits_equal(const std::vector<double>& a,
                       const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() ||
          std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// the small model every lm/cli check shares
struct LmRig {
  ParamStore<double> store;
  Model<double> model;
  LmRig(std::size_t layers = 2, const HgaPlan& plan = {}, std::uint64_t seed = 7,
        std::size_t learnable = 2) {
    ModelConfig mc;
    mc.vocab = 32;
    mc.dim = 8;
    mc.heads = 2;
    mc.layers = layers;
    mc.ffn_mult = 2;
    mc.max_text = 8;
    mc.pos_bands = 1;
    mc.learnable_layers = learnable;
    mc.kd_dim = 4;
    EmbedConfig ec;
    ec.input_points = 16;
    ec.stage_sizes = {8, 4, 2};
    ec.group_k = 2;
    ec.stage_dims = {6, 6, 6, 6};
    ec.model_dim = 8;
    ec.freq_bands = 1;
    Rng rng(seed);
    model.init(mc, ec, plan, store, rng);
  }
};

inline Cloud<double> random_cloud(std::size_t n, Rng rng) {
  Cloud<double> c;
  c.pos.resize(Eigen::Index(n), 3);
  for (Eigen::Index i = 0; i < c.pos.rows(); ++i)
    for (int a = 0; a < 3; ++a) c.pos(i, a) = 0.3 * rng.gaussian();
  return c;
}

inline std::vector<HybridSample<double>> hybrid_batch(const LmRig& rig,
                                                      std::size_t B, Rng rng) {
  std::vector<HybridSample<double>> batch(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto cloud = random_cloud(rig.model.embed_cfg.input_points,
                              rng.fork("cloud", b));
    batch[b].tokens = rig.model.embed.forward(cloud);
    batch[b].text = {Tokenizer::kBos, int(5 + b), int(6 + b), Tokenizer::kEos};
  }
  return batch;
}

// central difference of a scalar-valued rebuild around one parameter entry
inline double central_diff(const Var<double>& p, std::size_t i,
                           const std::function<double()>& value, double eps) {
  double keep = p->value[i];
  p->value[i] = keep + eps;
  double hi = value();
  p->value[i] = keep - eps;
  double lo = value();
  p->value[i] = keep;
  return (hi - lo) / (2 * eps);
}

inline std::string grad_vs_fd(const Var<double>& p, std::size_t i,
                              double analytic,
                              const std::function<double()>& value,
                              double tol, const char* what,
                              double eps = 1e-6) {
  double fd = central_diff(p, i, value, eps);
  double scale = std::max({std::abs(analytic), std::abs(fd), 1e-6});
  double rel = std::abs(analytic - fd) / scale;
  if (rel <= tol) return "";
  return cat(what, "[", i, "]: autodiff ", analytic, " vs finite diff ", fd,
             " (rel ", rel, ")");
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* tag) {
    path = std::filesystem::temp_directory_path() /
           cat("pf-check-", tag, "-", std::random_device{}());
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  check(bool(in), cat("check: cannot read ", p.string()));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// ---- tensor ----

inline std::string check_op_gradcheck() {
  Rng rng(11);
  auto x = param<double>({4, 3}, rng, 0.5);
  auto w = param<double>({3, 5}, rng, 0.5);
  auto bias = param<double>({5}, rng, 0.5);
  auto g = param<double>({5}, rng, 0.5);
  auto gb = param<double>({5}, rng, 0.5);
  auto value = [&] {
    auto y = gelu(layernorm(add(matmul(x, w), bias), g, gb));
    return reduce_sum(y)->value[0];
  };
  auto loss = reduce_sum(gelu(layernorm(add(matmul(x, w), bias), g, gb)));
  backward(loss);
  for (const auto& [p, name] : {std::pair{x, "x"}, {w, "w"}, {bias, "bias"},
                                {g, "gain"}, {gb, "shift"}}) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      auto err = grad_vs_fd(p, i, p->grad[i], value, 1e-6, name);
      if (!err.empty()) return err;
    }
  }
  return "";
}

inline std::string check_tensor_determinism() {
  auto build = [] {
    Rng rng(77);
    auto a = param<double>({6, 4}, rng, 1.0);
    auto b = param<double>({4, 6}, rng, 1.0);
    auto loss = reduce_sum(gelu(matmul(a, b)));
    backward(loss);
    std::vector<double> out = loss->value;
    out.insert(out.end(), a->grad.begin(), a->grad.end());
    out.insert(out.end(), b->grad.begin(), b->grad.end());
    return out;
  };
  auto first = build(), second = build();
  if (!bits_equal(first, second))
    return "same seed produced different values or gradients";
  return "";
}

// ---- geometry ----

inline std::string check_fps_maxmin() {
  Rng rng(3);
  Points<double> pts(40, 3);
  for (Eigen::Index i = 0; i < 40; ++i)
    for (int a = 0; a < 3; ++a) pts(i, a) = rng.gaussian();
  auto got = fps(pts, 8);
  // independent greedy farthest-first pass
  std::vector<std::size_t> want{0};
  Eigen::VectorXd d2 =
      (pts.rowwise() - pts.row(0)).rowwise().squaredNorm();
  while (want.size() < 8) {
    Eigen::Index best = 0;
    d2.maxCoeff(&best);
    want.push_back(std::size_t(best));
    Eigen::VectorXd cand =
        (pts.rowwise() - pts.row(best)).rowwise().squaredNorm();
    d2 = d2.cwiseMin(cand);
  }
  if (got != want) return "greedy farthest-first sequence diverged";
  return "";
}

inline std::string check_chamfer_basics() {
  Rng rng(5);
  Points<double> a(12, 3), b(12, 3);
  for (Eigen::Index i = 0; i < 12; ++i)
    for (int c = 0; c < 3; ++c) {
      a(i, c) = rng.gaussian();
      b(i, c) = rng.gaussian();
    }
  if (chamfer_l2(a, a) != 0.0) return "chamfer(a, a) must be exactly zero";
  double ab = chamfer_l2(a, b), ba = chamfer_l2(b, a);
  if (auto e = expect_near(ab, ba, 1e-15, "symmetry"); !e.empty()) return e;
  Points<double> far = b;
  far.col(0).array() += 10.0;
  if (chamfer_l2(a, far) <= ab) return "moving one set away must grow the distance";
  return "";
}

inline std::string check_schedule_bounds() {
  const double alpha = 0.02, smin = 0.02, smax = 1.0;
  Rng rng(9);
  for (int trial = 0; trial < 64; ++trial) {
    std::vector<double> theta(5);
    for (auto& t : theta) t = 6.0 * rng.uniform() - 3.0;
    for (double s : grid_schedule(theta, alpha, smin, smax))
      if (s < smin - 1e-15 || s > smax + 1e-15)
        return cat("size ", s, " escapes [", smin, ", ", smax, "]");
  }
  auto flat = grid_schedule(std::vector<double>(5, 0.0), alpha, smin, smax);
  for (std::size_t i = 1; i < flat.size(); ++i)
    if (flat[i] <= flat[i - 1]) return "flat schedule must grow monotonically";
  return expect_near(flat.back(), std::sqrt(smin * smax), 1e-12,
                     "flat schedule endpoint");
}

inline std::string check_grid_partition() {
  Rng rng(13);
  Points<double> pts(60, 3);
  for (Eigen::Index i = 0; i < 60; ++i)
    for (int a = 0; a < 3; ++a) pts(i, a) = 2.0 * rng.uniform() - 1.0;
  const double size = 0.37;
  auto mapping = dynamic_grid_sample(pts, size);
  std::vector<int> seen(60, 0);
  for (std::size_t c = 0; c < mapping.cells(); ++c)
    for (auto i : mapping.members[c]) {
      seen[i] += 1;
      if (mapping.cell_of_point[i] != c)
        return cat("point ", i, " disagrees with its cell");
      for (int a = 0; a < 3; ++a) {
        auto want = std::int64_t(std::floor(pts(Eigen::Index(i), a) / size));
        if (mapping.keys[c][std::size_t(a)] != want)
          return cat("cell key of point ", i, " axis ", a, " off");
      }
    }
  for (std::size_t i = 0; i < 60; ++i)
    if (seen[i] != 1) return cat("point ", i, " appears ", seen[i], " times");
  return "";
}

inline std::string check_rigid_isometry() {
  Rng rng(17);
  auto t = random_rigid<double>(rng);
  Eigen::Matrix3d r = t.rot;
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() >
      1e-12)
    return "rotation is not orthogonal";
  if (std::abs(r.determinant() - 1.0) > 1e-12)
    return "rotation must be proper (det +1)";
  Points<double> pts(20, 3);
  for (Eigen::Index i = 0; i < 20; ++i)
    for (int a = 0; a < 3; ++a) pts(i, a) = rng.gaussian();
  Points<double> moved = t.apply(pts);
  for (Eigen::Index i = 0; i < 20; ++i)
    for (Eigen::Index j = i + 1; j < 20; ++j) {
      double before = (pts.row(i) - pts.row(j)).norm();
      double after = (moved.row(i) - moved.row(j)).norm();
      if (std::abs(before - after) > 1e-12)
        return cat("pair (", i, ", ", j, ") changed length by ",
                   std::abs(before - after));
    }
  return "";
}

// ---- embed ----

inline EmbedConfig tiny_embed() {
  EmbedConfig ec;
  ec.input_points = 16;
  ec.stage_sizes = {8, 4, 2};
  ec.group_k = 2;
  ec.stage_dims = {6, 6, 6, 6};
  ec.model_dim = 8;
  ec.freq_bands = 1;
  return ec;
}

inline std::string check_embed_deterministic() {
  auto cloud = random_cloud(16, Rng(21));
  auto run = [&] {
    ParamStore<double> store;
    PointEmbedding<double> embed;
    embed.cfg = tiny_embed();
    embed.init(store, Rng(22));
    auto ts = embed.forward(cloud);
    std::vector<double> out = ts.tokens->value;
    out.insert(out.end(), ts.centers.data(),
               ts.centers.data() + ts.centers.size());
    return out;
  };
  if (!bits_equal(run(), run()))
    return "same seed and cloud produced different tokens";
  return "";
}

inline std::string check_embed_token_count() {
  ParamStore<double> store;
  PointEmbedding<double> embed;
  embed.cfg = tiny_embed();
  embed.init(store, Rng(23));
  auto ts = embed.forward(random_cloud(16, Rng(24)));
  if (ts.tokens->shape != std::vector<std::size_t>{2, 8})
    return cat("tokens came out ", shape_str(ts.tokens->shape),
               ", expected (2, 8)");
  if (std::size_t(ts.centers.rows()) != 2) return "center count off";
  if (std::size_t(ts.patches.rows()) != 2 * embed.cfg.group_k)
    return "patch rows must be tokens*k";
  return "";
}

inline std::string check_pool_permutation() {
  Rng rng(204);
  auto cloud = random_cloud(40, rng);
  ParamStore<double> store;
  PointEmbedding<double> embed;
  embed.cfg = tiny_embed();
  embed.init(store, rng.fork("init"));
  Points<double> centers = cloud.pos.topRows(6);
  auto feats = param<double>({40, 6}, rng, 1.0);
  auto pooled_of = [&](const Points<double>& src, const Var<double>& f) {
    auto g = knn_group(src, centers, 5);
    auto carried = gather_rows(f, g.flat_idx);
    auto enc = trig_encode(g.rel, 1);
    std::vector<double> ef(enc.data(), enc.data() + enc.size());
    auto enc_t = constant<double>({std::size_t(enc.rows()), 6}, std::move(ef));
    auto mixed = matmul(concat_cols(carried, enc_t), embed.stage_w[0]);
    return reduce_max_mid(reshape(mixed, {6, 5, 6}));
  };
  auto base = pooled_of(cloud.pos, feats);
  auto perm = rng.permutation(40);
  Points<double> shuffled(40, 3);
  auto shuffled_feats = zeros<double>({40, 6});
  for (std::size_t i = 0; i < 40; ++i) {
    shuffled.row(Eigen::Index(i)) = cloud.pos.row(Eigen::Index(perm[i]));
    for (int c = 0; c < 6; ++c)
      shuffled_feats->value[i * 6 + std::size_t(c)] =
          feats->value[perm[i] * 6 + std::size_t(c)];
  }
  auto moved = pooled_of(shuffled, shuffled_feats);
  double d = max_abs_diff(base->value, moved->value);
  if (d > 1e-12) return cat("pooled features moved by ", d, " under reordering");
  return "";
}

inline std::string check_embed_param_share() {
  auto rc = desk_preset();
  auto pb = count_params(rc.model, rc.embed, rc.plan);
  double share = double(pb.embed_trunk + pb.embed_proj) / double(pb.total());
  if (share >= 0.05)
    return cat("embedding holds ", share * 100, "% of parameters, cap is 5%");
  return "";
}

// ---- losses ----

inline std::string check_zero_on_match() {
  LmRig rig;
  Rng rng(31);
  auto student = constant<double>({3, 8}, [&] {
    std::vector<double> v(24);
    for (auto& x : v) x = rng.gaussian();
    return v;
  }());
  auto adapted = rig.model.kd_head(student);
  MatRM<double> teacher =
      Eigen::Map<const MatRM<double>>(adapted->value.data(), 3, 4);
  double kd = kd_loss(rig.model, student, teacher)->value[0];
  if (std::abs(kd) > 1e-12) return cat("distillation on itself scored ", kd);

  Points<double> gt(6, 3);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (int a = 0; a < 3; ++a) gt(i, a) = rng.gaussian();
  std::vector<double> flat;
  for (Eigen::Index i = 0; i < 6; ++i)
    for (int a = 0; a < 3; ++a) flat.push_back(gt(i, a));
  auto pred = constant<double>({2, 9}, std::move(flat));
  MatRM<double> gt_rows = gt;
  double ch = chamfer_patches(pred, gt_rows)->value[0];
  if (std::abs(ch) > 1e-12) return cat("chamfer on matching patches scored ", ch);
  return "";
}

inline std::string check_losses_gradcheck() {
  LmRig rig;
  Rng rng(33);
  auto batch = hybrid_batch(rig, 2, rng);
  HybridConfig hc;
  hc.mask_ratio = 0.5;
  auto value = [&] {
    return hybrid_semantic_loss(rig.model, batch, hc, Rng(40))
        .report.total->value[0];
  };
  auto out = hybrid_semantic_loss(rig.model, batch, hc, Rng(40));
  backward(out.report.total);
  const std::pair<const char*, std::size_t> probes[] = {
      {"mask.token", 0},       {"head.predict.w", 3}, {"layer1.attn.wq", 5},
      {"layer2.ffn.w1", 2},    {"head.lm.w", 7},      {"text.tok", 8 * 5},
  };
  for (auto [name, i] : probes) {
    auto p = rig.store.get(name);
    double analytic = p->grad.empty() ? 0.0 : p->grad[i];
    auto err = grad_vs_fd(p, i, analytic, value, 1e-4, name);
    if (!err.empty()) return err;
  }
  return "";
}

inline std::string check_hybrid_decomposition() {
  LmRig rig;
  auto batch = hybrid_batch(rig, 2, Rng(35));
  HybridConfig hc;
  auto out = hybrid_semantic_loss(rig.model, batch, hc, Rng(36));
  double sum = 0;
  for (const auto& e : out.report.terms) sum += e.weight * e.value->value[0];
  return expect_near(out.report.total->value[0], sum, 1e-12,
                     "total vs recombined terms");
}

inline std::string check_nce_two_paths() {
  Rng rng(37);
  std::size_t B = 6, D = 4;
  std::vector<double> f1(B * D), f2(B * D);
  for (auto& x : f1) x = rng.gaussian();
  for (auto& x : f2) x = rng.gaussian();
  MatRM<double> m1 = Eigen::Map<const MatRM<double>>(f1.data(), 6, 4);
  MatRM<double> m2 = Eigen::Map<const MatRM<double>>(f2.data(), 6, 4);
  double tau = 0.1;
  double lib = info_nce(constant<double>({B, D}, std::move(f1)),
                        constant<double>({B, D}, std::move(f2)), tau)
                   ->value[0];
  MatRM<double> n1 = m1.array().colwise() / m1.rowwise().norm().array();
  MatRM<double> n2 = m2.array().colwise() / m2.rowwise().norm().array();
  MatRM<double> logits = (n1 * n2.transpose()) / tau;
  double oracle = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    oracle += lse - logits(i, i);
  }
  oracle /= double(B);
  return expect_near(lib, oracle, 1e-12 * std::max(1.0, std::abs(oracle)),
                     "library vs log-sum-exp oracle");
}

inline std::string check_mask_uniformity() {
  const std::size_t M = 10, draws = 100000;
  const double ratio = 0.3;
  Rng rng(41);
  std::vector<std::size_t> hits(M, 0);
  for (std::size_t d = 0; d < draws; ++d) {
    auto spec = MaskSpec::draw(M, ratio, rng.fork("draw", d));
    if (spec.masked.size() != 3)
      return cat("draw ", d, " hid ", spec.masked.size(), " of ", M);
    for (auto i : spec.masked) hits[i] += 1;
  }
  for (std::size_t i = 0; i < M; ++i) {
    double freq = double(hits[i]) / double(draws);
    if (std::abs(freq - ratio) > 0.01)
      return cat("index ", i, " hidden at rate ", freq, ", want 0.3 +- 0.01");
  }
  return "";
}

// ---- hga ----

inline HgaPlan one_block_plan(bool attention) {
  HgaPlan plan;
  plan.blocks = {{{1}, {2}}};
  plan.theta = {0.0};
  plan.cell_attention = attention;
  return plan;
}

inline std::string check_gate_noop() {
  auto run = [](bool attention) {
    LmRig rig(2, one_block_plan(attention));
    std::vector<Seq<double>> batch(1);
    Rng rng(43);
    auto cloud = random_cloud(16, rng);
    auto ts = rig.model.embed.forward(cloud);
    batch[0].point_feats = ts.tokens;
    batch[0].point_coords = ts.centers;
    batch[0].text = {1, 5, 6, 2};
    return rig.model.forward(batch).text_logits->value;
  };
  double d = max_abs_diff(run(true), run(false));
  if (d > 1e-12)
    return cat("freshly gated attention shifted logits by ", d);
  return "";
}

inline std::string check_hga_permutation() {
  Rng rng(47);
  Points<double> pts(30, 3);
  for (Eigen::Index i = 0; i < 30; ++i)
    for (int a = 0; a < 3; ++a) pts(i, a) = rng.uniform();
  const double size = 0.4;
  auto base = dynamic_grid_sample(pts, size);
  auto base_means = cell_means(pts, base);

  auto perm = rng.permutation(30);
  Points<double> shuffled(30, 3);
  for (std::size_t i = 0; i < 30; ++i)
    shuffled.row(Eigen::Index(i)) = pts.row(Eigen::Index(perm[i]));
  auto moved = dynamic_grid_sample(shuffled, size);
  auto moved_means = cell_means(shuffled, moved);

  if (base.cells() != moved.cells())
    return cat("cell count changed: ", base.cells(), " vs ", moved.cells());
  std::map<std::array<std::int64_t, 3>, Eigen::Index> where;
  for (std::size_t c = 0; c < moved.cells(); ++c)
    where[moved.keys[c]] = Eigen::Index(c);
  for (std::size_t c = 0; c < base.cells(); ++c) {
    auto it = where.find(base.keys[c]);
    if (it == where.end()) return "a cell key vanished under reordering";
    double d =
        (base_means.row(Eigen::Index(c)) - moved_means.row(it->second)).norm();
    if (d > 1e-12) return cat("cell mean moved by ", d, " under reordering");
  }
  return "";
}

inline std::string check_stack_discipline() {
  HgaPlan lopsided;
  lopsided.blocks = {{{1, 2}, {3}}};
  lopsided.theta = {0.0, 0.0};
  try {
    lopsided.validate(4);
    return "plan with unmatched aggregations validated";
  } catch (const ValueError&) {
  }
  HgaPlan backwards;
  backwards.blocks = {{{2}, {1}}};
  backwards.theta = {0.0};
  try {
    backwards.validate(4);
    return "plan propagating before aggregating validated";
  } catch (const ValueError&) {
  }
  return "";
}

inline std::string check_mean_idempotent() {
  Rng rng(53);
  ParamStore<double> store;
  Hga<double> hga;
  HgaPlan plan = one_block_plan(false);
  plan.pooling = HgaPooling::Mean;
  plan.theta = {5.0};  // saturate the schedule near its ceiling
  Rng init_rng(54);
  hga.init(plan, 4, store, init_rng);

  std::vector<double> flat(9 * 4);
  for (auto& x : flat) x = rng.gaussian();
  auto x = constant<double>({9, 4}, std::move(flat));
  Points<double> coords(9, 3);
  for (Eigen::Index i = 0; i < 9; ++i)
    for (int a = 0; a < 3; ++a) coords(i, a) = 0.25 + 0.5 * rng.uniform();

  HgaState<double> state;
  auto once = hga.aggregate(0, 0, x, coords, state);
  if (once->shape[0] != 1)
    return cat("expected one cell, got ", once->shape[0]);
  HgaState<double> again_state;
  Points<double> again_coords = coords;
  auto twice = hga.aggregate(0, 0, once, again_coords, again_state);
  double d = max_abs_diff(once->value, twice->value);
  if (d > 1e-12) return cat("re-pooling a pooled cell moved it by ", d);
  return "";
}

inline std::string check_text_ce_noop() {
  auto ce_of = [](HgaPlan plan) {
    LmRig rig(2, plan);
    std::vector<std::vector<int>> texts{{1, 5, 6, 7, 2}};
    std::vector<Seq<double>> batch(1);
    batch[0].text = texts[0];
    return detail::batch_ce(rig.model.forward(batch), texts)->value[0];
  };
  HgaPlan a;
  HgaPlan b;
  b.pooling = HgaPooling::Max;
  b.alpha = 0.5;
  b.cell_attention = false;
  double ca = ce_of(a), cb = ce_of(b);
  if (ca != cb)
    return cat("inert grid knobs leaked into the text loss: ", ca, " vs ", cb);
  return "";
}

// ---- lm ----

inline std::string check_causality() {
  LmRig rig;
  auto run = [&](int fifth_token) {
    std::vector<Seq<double>> batch(1);
    batch[0].text = {1, 5, 6, 7, fifth_token, 2};
    return rig.model.forward(batch).text_logits->value;
  };
  auto base = run(8), poked = run(9);
  const std::size_t V = rig.model.cfg.vocab;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < V; ++c)
      if (base[r * V + c] != poked[r * V + c])
        return cat("logit row ", r, " saw a future token");
  bool later_moved = false;
  for (std::size_t i = 4 * V; i < base.size(); ++i)
    if (base[i] != poked[i]) later_moved = true;
  if (!later_moved) return "perturbing a token left its own logits frozen";
  return "";
}

inline std::string check_plain_reference() {
  LmRig rig;
  const auto& store = rig.store;
  const std::size_t D = 8, H = 2, hd = 4, L = 2, V = 32;

  Rng rng(61);
  const std::size_t P = 3, Tt = 4;
  std::vector<double> pf_flat(P * D);
  for (auto& x : pf_flat) x = rng.gaussian();
  Points<double> coords(P, 3);
  for (Eigen::Index i = 0; i < Eigen::Index(P); ++i)
    for (int a = 0; a < 3; ++a) coords(i, a) = rng.gaussian();
  std::vector<int> text{1, 5, 6, 2};

  std::vector<Seq<double>> batch(1);
  batch[0].point_feats = constant<double>({P, D}, std::vector<double>(pf_flat));
  batch[0].point_coords = coords;
  batch[0].text = text;
  auto fwd = rig.model.forward(batch);

  auto mat = [&](const std::string& name) {
    auto p = store.get(name);
    return Eigen::Map<const MatRM<double>>(
        p->value.data(), Eigen::Index(p->shape[0]),
        Eigen::Index(p->rank() == 2 ? p->shape[1] : 1));
  };
  auto vec = [&](const std::string& name) {
    auto p = store.get(name);
    return Eigen::Map<const Eigen::RowVectorXd>(p->value.data(),
                                                Eigen::Index(p->size()));
  };

  const std::size_t T = P + Tt;
  MatRM<double> x(T, D);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < D; ++c) x(Eigen::Index(i), Eigen::Index(c)) =
        pf_flat[i * D + c];
  auto tok = mat("text.tok"), pos = mat("text.pos");
  for (std::size_t t = 0; t < Tt; ++t)
    x.row(Eigen::Index(P + t)) =
        tok.row(text[t]) + pos.row(Eigen::Index(t));

  auto layer_norm = [&](const MatRM<double>& in, const std::string& g,
                        const std::string& b) {
    MatRM<double> out = in;
    auto gain = vec(g), shift = vec(b);
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      double mu = in.row(r).mean();
      double var = (in.row(r).array() - mu).square().mean();
      out.row(r) = ((in.row(r).array() - mu) / std::sqrt(var + 1e-5)) *
                       gain.array() +
                   shift.array();
    }
    return out;
  };

  for (std::size_t l = 1; l <= L; ++l) {
    auto tag = cat("layer", l, ".");
    // sin/cos ladder on the point rows, one band
    MatRM<double> enc(P, 6);
    for (std::size_t i = 0; i < P; ++i)
      for (int a = 0; a < 3; ++a) {
        double arg = std::numbers::pi * coords(Eigen::Index(i), a);
        enc(Eigen::Index(i), a * 2) = std::sin(arg);
        enc(Eigen::Index(i), a * 2 + 1) = std::cos(arg);
      }
    x.topRows(Eigen::Index(P)) += enc * mat(tag + "pos.w");

    MatRM<double> h = layer_norm(x, tag + "ln1.g", tag + "ln1.b");
    MatRM<double> q = (h * mat(tag + "attn.wq")).rowwise() + vec(tag + "attn.bq");
    MatRM<double> k = (h * mat(tag + "attn.wk")).rowwise() + vec(tag + "attn.bk");
    MatRM<double> v = (h * mat(tag + "attn.wv")).rowwise() + vec(tag + "attn.bv");
    MatRM<double> ctx(T, D);
    for (std::size_t head = 0; head < H; ++head) {
      auto qs = q.middleCols(Eigen::Index(head * hd), Eigen::Index(hd));
      auto ks = k.middleCols(Eigen::Index(head * hd), Eigen::Index(hd));
      auto vs = v.middleCols(Eigen::Index(head * hd), Eigen::Index(hd));
      MatRM<double> scores = qs * ks.transpose() / std::sqrt(double(hd));
      for (Eigen::Index i = 0; i < Eigen::Index(T); ++i) {
        double mx = scores.row(i).head(i + 1).maxCoeff();
        Eigen::RowVectorXd w =
            (scores.row(i).head(i + 1).array() - mx).exp();
        w /= w.sum();
        Eigen::RowVectorXd mixed = Eigen::RowVectorXd::Zero(Eigen::Index(hd));
        for (Eigen::Index j = 0; j <= i; ++j) mixed += w(j) * vs.row(j);
        ctx.row(i).segment(Eigen::Index(head * hd), Eigen::Index(hd)) = mixed;
      }
    }
    x += ((ctx * mat(tag + "attn.wo")).rowwise() + vec(tag + "attn.bo"));

    MatRM<double> h2 = layer_norm(x, tag + "ln2.g", tag + "ln2.b");
    MatRM<double> inner =
        (h2 * mat(tag + "ffn.w1")).rowwise() + vec(tag + "ffn.b1");
    inner = inner.unaryExpr([](double t) {
      return 0.5 * t * (1.0 + std::erf(t * 0.7071067811865475244));
    });
    x += ((inner * mat(tag + "ffn.w2")).rowwise() + vec(tag + "ffn.b2"));
  }
  x = layer_norm(x, "final.ln.g", "final.ln.b");
  MatRM<double> logits =
      (x.bottomRows(Eigen::Index(Tt)) * mat("head.lm.w")).rowwise() +
      vec("head.lm.b");

  double worst = 0;
  for (std::size_t t = 0; t < Tt; ++t)
    for (std::size_t c = 0; c < V; ++c)
      worst = std::max(worst, std::abs(logits(Eigen::Index(t), Eigen::Index(c)) -
                                       fwd.text_logits->value[t * V + c]));
  if (worst > 1e-12)
    return cat("reference forward disagrees by ", worst);
  return "";
}

inline std::string check_point_head_zero_grad() {
  Rng rng(67);
  auto logits = param<double>({6, 5}, rng, 1.0);
  std::vector<int> targets{1, 2, 3, 4, 0, 1};
  std::vector<unsigned char> mask{0, 1, 1, 0, 1, 0};
  backward(cross_entropy(logits, targets, mask));
  for (std::size_t r = 0; r < 6; ++r) {
    double row_abs = 0;
    for (std::size_t c = 0; c < 5; ++c)
      row_abs += std::abs(logits->grad[r * 5 + c]);
    if (!mask[r] && row_abs != 0.0)
      return cat("masked-out row ", r, " leaked gradient ", row_abs);
    if (mask[r] && row_abs == 0.0)
      return cat("scored row ", r, " received no gradient");
  }
  return "";
}

inline std::string check_e2e_gradcheck() {
  LmRig rig;
  Rng rng(71);
  auto clouds = std::vector<Cloud<double>>{
      random_cloud(16, rng.fork("c", 0)), random_cloud(16, rng.fork("c", 1))};
  std::vector<std::vector<int>> texts{{1, 5, 7, 2}, {1, 6, 8, 2}};

  auto make_batch = [&] {
    std::vector<HybridSample<double>> batch(2);
    for (std::size_t b = 0; b < 2; ++b) {
      batch[b].tokens = rig.model.embed.forward(clouds[b]);
      batch[b].text = texts[b];
    }
    return batch;
  };
  HybridConfig hc;
  auto hybrid_value = [&] {
    return hybrid_semantic_loss(rig.model, make_batch(), hc, Rng(72))
        .report.total->value[0];
  };
  auto out = hybrid_semantic_loss(rig.model, make_batch(), hc, Rng(72));
  backward(out.report.total);
  // params downstream of the detached regression targets
  const std::pair<const char*, std::size_t> hybrid_probes[] = {
      {"mask.token", 4},    {"layer1.attn.wv", 9}, {"layer2.ffn.w2", 6},
      {"head.patch.w", 2},  {"final.ln.g", 3},     {"text.tok", 8 * 5 + 1},
  };
  for (auto [name, i] : hybrid_probes) {
    auto p = rig.store.get(name);
    double analytic = p->grad.empty() ? 0.0 : p->grad[i];
    auto err = grad_vs_fd(p, i, analytic, hybrid_value, 1e-4, name, 1e-4);
    if (!err.empty()) return err;
  }

  // the embedding feeds the regression targets, which are snapshots by
  // design, so its finite differences only agree on the target-free path
  auto ce_value = [&] {
    std::vector<Seq<double>> seqs(2);
    for (std::size_t b = 0; b < 2; ++b) {
      auto ts = rig.model.embed.forward(clouds[b]);
      seqs[b].point_feats = ts.tokens;
      seqs[b].point_coords = ts.centers;
      seqs[b].text = texts[b];
    }
    return detail::batch_ce(rig.model.forward(seqs), texts)->value[0];
  };
  {
    std::vector<Seq<double>> seqs(2);
    for (std::size_t b = 0; b < 2; ++b) {
      auto ts = rig.model.embed.forward(clouds[b]);
      seqs[b].point_feats = ts.tokens;
      seqs[b].point_coords = ts.centers;
      seqs[b].text = texts[b];
    }
    backward(detail::batch_ce(rig.model.forward(seqs), texts));
  }
  const std::pair<const char*, std::size_t> embed_probes[] = {
      {"embed.lift.w", 1}, {"embed.stage2.w", 4}, {"embed.proj.w", 11},
  };
  for (auto [name, i] : embed_probes) {
    auto p = rig.store.get(name);
    double analytic = p->grad.empty() ? 0.0 : p->grad[i];
    auto err = grad_vs_fd(p, i, analytic, ce_value, 1e-4, name, 1e-4);
    if (!err.empty()) return err;
  }
  return "";
}

// ---- data ----

inline std::string check_caption_bijection() {
  DatasetConfig dc;
  dc.count = 200;
  dc.n_points = 16;
  dc.seed = 97;
  auto data = build_dataset<double>(dc);
  for (const auto& s : data) {
    auto back = parse_caption(s.caption);
    if (!(back == s.spec))
      return cat("round trip lost the spec behind \"", s.caption, "\"");
    if (caption(back) != s.caption)
      return cat("re-rendered caption drifted for \"", s.caption, "\"");
  }
  return "";
}

inline std::string check_data_reproducible() {
  DatasetConfig dc;
  dc.count = 12;
  dc.n_points = 32;
  dc.seed = 101;
  auto equal = [](const std::vector<Sample<double>>& a,
                  const std::vector<Sample<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].caption != b[i].caption) return false;
      if (a[i].cloud.pos != b[i].cloud.pos) return false;
    }
    return true;
  };
  auto first = build_dataset<double>(dc);
  if (!equal(first, build_dataset<double>(dc)))
    return "same seed produced a different dataset";
  const char* keep = std::getenv("PF_THREADS");
  std::string saved = keep ? keep : "";
  setenv("PF_THREADS", "1", 1);
  auto serial = build_dataset<double>(dc);
  setenv("PF_THREADS", "3", 1);
  auto threaded = build_dataset<double>(dc);
  if (keep)
    setenv("PF_THREADS", saved.c_str(), 1);
  else
    unsetenv("PF_THREADS");
  if (!equal(serial, threaded))
    return "worker count changed the generated data";
  return "";
}

// ---- cli ----

inline std::string check_run_determinism() {
  auto run = [](const std::filesystem::path& dir) {
    LmRig rig;
    DatasetConfig dc;
    dc.count = 2;
    dc.n_points = 16;
    dc.seed = 5;
    auto data = build_dataset<double>(dc);
    TrainConfig tc;
    tc.stage = Stage::Tune;
    tc.steps = 3;
    tc.batch_size = 2;
    tc.seed = 9;
    tc.out_dir = dir.string();
    train_loop(rig.model, rig.store, data, Tokenizer{}, tc);
    return slurp(dir / "metrics.jsonl") + slurp(dir / "state-final.pfck");
  };
  TempDir a("runA"), b("runB");
  if (run(a.path) != run(b.path))
    return "two identically seeded runs left different artifacts";
  return "";
}

std::string check_registry_exhaustive();  // needs the registry below

}  // namespace checks_detail

// the contract: every invariant the library documents, by id
inline std::vector<std::string> documented_invariants() {
  return {
      "tensor.op-gradcheck",      "tensor.determinism",
      "geometry.fps-maxmin",      "geometry.chamfer-basics",
      "geometry.schedule-bounds", "geometry.grid-partition",
      "geometry.rigid-isometry",  "embed.deterministic",
      "embed.token-count",        "embed.pool-permutation",
      "embed.param-share",        "losses.zero-on-match",
      "losses.gradcheck",         "losses.hybrid-decomposition",
      "losses.nce-two-paths",     "losses.mask-uniformity",
      "hga.gate-noop",            "hga.permutation",
      "hga.stack-discipline",     "hga.mean-idempotent",
      "hga.text-ce-noop",         "lm.causality",
      "lm.plain-reference",       "lm.point-head-zero-grad",
      "lm.e2e-gradcheck",         "data.caption-bijection",
      "data.reproducible",        "cli.run-determinism",
      "cli.registry-exhaustive",
  };
}

inline const std::vector<Check>& check_registry() {
  namespace cd = checks_detail;
  static const std::vector<Check> registry = {
      {"tensor.op-gradcheck", "tensor",
       "autodiff matches central differences across composed ops",
       cd::check_op_gradcheck},
      {"tensor.determinism", "tensor",
       "seeded graphs reproduce values and gradients bitwise",
       cd::check_tensor_determinism},
      {"geometry.fps-maxmin", "geometry",
       "farthest point sampling matches an independent greedy pass",
       cd::check_fps_maxmin},
      {"geometry.chamfer-basics", "geometry",
       "chamfer distance is zero on itself, symmetric, and grows with offset",
       cd::check_chamfer_basics},
      {"geometry.schedule-bounds", "geometry",
       "grid cell sizes stay inside their clamp and meet the flat endpoint",
       cd::check_schedule_bounds},
      {"geometry.grid-partition", "geometry",
       "grid cells partition the points with consistent keys",
       cd::check_grid_partition},
      {"geometry.rigid-isometry", "geometry",
       "random rigid motions preserve pairwise distances",
       cd::check_rigid_isometry},
      {"embed.deterministic", "embed",
       "embedding a cloud twice gives bitwise identical tokens",
       cd::check_embed_deterministic},
      {"embed.token-count", "embed",
       "token, center and patch counts follow the stage config",
       cd::check_embed_token_count},
      {"embed.pool-permutation", "embed",
       "group pooling ignores the order of the source points",
       cd::check_pool_permutation},
      {"embed.param-share", "embed",
       "the embedding holds under five percent of the parameters",
       cd::check_embed_param_share},
      {"losses.zero-on-match", "losses",
       "regression losses score zero against their own targets",
       cd::check_zero_on_match},
      {"losses.gradcheck", "losses",
       "the combined objective differentiates against finite differences",
       cd::check_losses_gradcheck},
      {"losses.hybrid-decomposition", "losses",
       "the combined total equals its weighted terms",
       cd::check_hybrid_decomposition},
      {"losses.nce-two-paths", "losses",
       "contrastive scoring matches a log-sum-exp oracle",
       cd::check_nce_two_paths},
      {"losses.mask-uniformity", "losses",
       "mask draws hide each index at the configured rate",
       cd::check_mask_uniformity},
      {"hga.gate-noop", "hga",
       "zero-gated cell attention leaves the forward unchanged",
       cd::check_gate_noop},
      {"hga.permutation", "hga",
       "grid aggregation ignores point order",
       cd::check_hga_permutation},
      {"hga.stack-discipline", "hga",
       "malformed aggregation plans are rejected",
       cd::check_stack_discipline},
      {"hga.mean-idempotent", "hga",
       "mean-pooling a pooled cell changes nothing",
       cd::check_mean_idempotent},
      {"hga.text-ce-noop", "hga",
       "inert grid settings leave the text loss untouched",
       cd::check_text_ce_noop},
      {"lm.causality", "lm",
       "logits never see tokens to their right",
       cd::check_causality},
      {"lm.plain-reference", "lm",
       "the transformer matches an independent dense reference",
       cd::check_plain_reference},
      {"lm.point-head-zero-grad", "lm",
       "rows outside the loss mask get exactly zero gradient",
       cd::check_point_head_zero_grad},
      {"lm.e2e-gradcheck", "lm",
       "end-to-end gradients survive a finite difference audit",
       cd::check_e2e_gradcheck},
      {"data.caption-bijection", "data",
       "captions parse back to the exact generating spec",
       cd::check_caption_bijection},
      {"data.reproducible", "data",
       "dataset builds are seed-stable across worker counts",
       cd::check_data_reproducible},
      {"cli.run-determinism", "cli",
       "identically seeded training runs leave identical artifacts",
       cd::check_run_determinism},
      {"cli.registry-exhaustive", "cli",
       "every documented invariant has a registered check",
       cd::check_registry_exhaustive},
  };
  return registry;
}

namespace checks_detail {

inline std::string check_registry_exhaustive() {
  std::set<std::string> documented;
  for (auto& id : documented_invariants()) documented.insert(id);
  std::set<std::string> registered;
  std::set<std::string> suites;
  for (const auto& c : check_registry()) {
    registered.insert(c.id);
    suites.insert(c.suite);
    if (c.id.rfind(c.suite + ".", 0) != 0)
      return cat("check ", c.id, " sits outside its suite ", c.suite);
  }
  for (const auto& id : documented)
    if (!registered.count(id)) return cat("documented but unchecked: ", id);
  for (const auto& id : registered)
    if (!documented.count(id)) return cat("checked but undocumented: ", id);
  for (const char* s :
       {"tensor", "geometry", "embed", "losses", "hga", "lm", "data", "cli"})
    if (!suites.count(s)) return cat("suite ", s, " is empty");
  return "";
}

}  // namespace checks_detail

// run one suite, one exact id, or "all"; throws on an unknown selector
inline std::vector<CheckResult> run_checks(const std::string& which) {
  std::vector<CheckResult> out;
  for (const auto& c : check_registry()) {
    if (which != "all" && which != c.suite && which != c.id) continue;
    auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.id = c.id;
    try {
      r.detail = c.run();
    } catch (const std::exception& e) {
      r.detail = cat("exception: ", e.what());
    }
    r.pass = r.detail.empty();
    r.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    out.push_back(std::move(r));
  }
  check(!out.empty(), cat("check: nothing matches '", which, "'"));
  return out;
}

}  // namespace pf
