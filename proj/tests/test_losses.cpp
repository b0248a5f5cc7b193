#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "pointform/losses.hpp"

using pf::HybridConfig;
using pf::HybridSample;
using pf::HybridVariant;
using pf::MaskSpec;
using pf::MatRM;
using pf::Model;
using pf::Points;
using pf::Rng;
using pf::TokenSet;
using pf::Var;

namespace {

Var<double> make_var(std::vector<std::size_t> shape, std::vector<double> v,
                     bool grad = true) {
  auto t = pf::constant<double>(std::move(shape), std::move(v));
  t->requires_grad = grad;
  return t;
}

MatRM<double> make_mat(std::size_t r, std::size_t c, std::vector<double> v) {
  MatRM<double> m;
  m.resize(Eigen::Index(r), Eigen::Index(c));
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

Var<double> random_var(std::vector<std::size_t> shape, Rng& rng,
                       double extent = 1.0) {
  std::vector<double> v(pf::numel(shape));
  for (auto& e : v) e = rng.uniform(-extent, extent);
  return make_var(std::move(shape), std::move(v));
}

MatRM<double> random_mat(std::size_t r, std::size_t c, Rng& rng,
                         double extent = 1.0) {
  MatRM<double> m;
  m.resize(Eigen::Index(r), Eigen::Index(c));
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = rng.uniform(-extent, extent);
  return m;
}

pf::ModelConfig tiny_config() {
  pf::ModelConfig mc;
  mc.vocab = 32;
  mc.dim = 8;
  mc.heads = 2;
  mc.layers = 2;
  mc.ffn_mult = 2;
  mc.max_text = 8;
  mc.pos_bands = 1;
  mc.learnable_layers = 1;
  mc.kd_dim = 0;
  return mc;
}

pf::EmbedConfig tiny_embed() {
  pf::EmbedConfig ec;
  ec.input_points = 16;
  ec.stage_sizes = {8, 4, 2};
  ec.group_k = 2;
  ec.stage_dims = {6, 6, 6, 6};
  ec.model_dim = 8;
  ec.freq_bands = 1;
  return ec;
}

// token set with made-up features: enough structure for the hybrid loss,
// no embedding pipeline required
TokenSet<double> fake_tokens(std::size_t m, std::size_t k, std::size_t dim,
                             Rng& rng) {
  TokenSet<double> ts;
  ts.tokens = random_var({m, dim}, rng, 0.5);
  ts.centers = Points<double>(Eigen::Index(m), 3);
  for (Eigen::Index i = 0; i < ts.centers.rows(); ++i)
    for (int a = 0; a < 3; ++a) ts.centers(i, a) = rng.uniform(-0.8, 0.8);
  ts.patches = Points<double>(Eigen::Index(m * k), 3);
  for (Eigen::Index i = 0; i < ts.patches.rows(); ++i)
    for (int a = 0; a < 3; ++a) ts.patches(i, a) = rng.uniform(-0.1, 0.1);
  ts.patch_k = k;
  return ts;
}

}  // namespace

TEST_CASE("mask draw rounds to nearest and partitions the indices") {
  auto spec = MaskSpec::draw(128, 0.3, Rng(7));
  CHECK(spec.masked.size() == 38);  // 128 * 0.3 = 38.4 rounds down
  CHECK(spec.visible.size() == 90);

  CHECK(MaskSpec::draw(5, 0.5, Rng(1)).masked.size() == 3);  // 2.5 rounds up
  CHECK(MaskSpec::draw(10, 0.25, Rng(1)).masked.size() == 3);
  CHECK(MaskSpec::draw(6, 0.0, Rng(1)).masked.empty());
  CHECK(MaskSpec::draw(6, 0.99, Rng(1)).visible.empty());  // rounds to all 6

  CHECK(std::is_sorted(spec.masked.begin(), spec.masked.end()));
  CHECK(std::is_sorted(spec.visible.begin(), spec.visible.end()));
  std::set<std::size_t> all(spec.masked.begin(), spec.masked.end());
  all.insert(spec.visible.begin(), spec.visible.end());
  CHECK(all.size() == 128);
  CHECK(*all.rbegin() == 127);

  auto again = MaskSpec::draw(128, 0.3, Rng(7));
  CHECK(again.masked == spec.masked);
  CHECK(MaskSpec::draw(128, 0.3, Rng(8)).masked != spec.masked);

  CHECK_THROWS_WITH_AS(MaskSpec::draw(0, 0.3, Rng(1)),
                       doctest::Contains("no tokens"), pf::ValueError);
  CHECK_THROWS_WITH_AS(MaskSpec::draw(8, 1.0, Rng(1)),
                       doctest::Contains("outside [0, 1)"), pf::ValueError);
  CHECK_THROWS_WITH_AS(MaskSpec::draw(8, -0.1, Rng(1)),
                       doctest::Contains("outside [0, 1)"), pf::ValueError);
}

TEST_CASE("mask draw hits every index at the requested rate") {
  const std::size_t trials = 100000, m = 10;
  std::vector<std::size_t> hits(m, 0);
  Rng root(99);
  for (std::size_t t = 0; t < trials; ++t) {
    auto spec = MaskSpec::draw(m, 0.3, root.fork("trial", t));
    CHECK(spec.masked.size() == 3);
    for (auto i : spec.masked) ++hits[i];
  }
  // each index should be hidden 30% of the time, within a percent
  for (auto h : hits) {
    CHECK(double(h) / double(trials) > 0.29);
    CHECK(double(h) / double(trials) < 0.31);
  }
}

TEST_CASE("masked feature error averages squared row norms") {
  // rows differ by (0,1) and (0,0): (1 + 0) / 2 rows
  auto pred = make_var({2, 2}, {1, 1, 0, 0});
  auto target = make_mat(2, 2, {1, 0, 0, 0});
  CHECK(pf::masked_mse(pred, target)->value[0] == doctest::Approx(0.5).epsilon(1e-15));

  // row norm, not an element mean: four unit diffs in one row stay 4
  auto wide = make_var({1, 4}, {1, 1, 1, 1});
  auto zeros = make_mat(1, 4, {0, 0, 0, 0});
  CHECK(pf::masked_mse(wide, zeros)->value[0] == doctest::Approx(4.0).epsilon(1e-15));

  // single token with a one-hot unit offset scores exactly one
  auto unit = make_var({1, 3}, {1, 0, 0});
  CHECK(pf::masked_mse(unit, make_mat(1, 3, {0, 0, 0}))->value[0] == 1.0);

  auto same = make_mat(2, 2, {1, 1, 0, 0});
  CHECK(pf::masked_mse(pred, same)->value[0] == 0.0);

  Rng rng(5);
  auto x = random_var({8, 4}, rng);
  auto t = random_mat(8, 4, rng);
  double slow = 0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      double d = x->value[r * 4 + c] - t(Eigen::Index(r), Eigen::Index(c));
      slow += d * d / 8.0;
    }
  CHECK(pf::masked_mse(x, t)->value[0] == doctest::Approx(slow).epsilon(1e-12));
  auto run = [&](const Var<double>& v) { return pf::masked_mse(v, t); };
  CHECK(pf::grad_check<double>(run, x) < 1e-6);

  CHECK_THROWS_WITH_AS(pf::masked_mse(pred, make_mat(1, 2, {0, 0})),
                       doctest::Contains("target is"), pf::ValueError);
}

TEST_CASE("distillation adapts the student then scores rows") {
  Rng rng(6);
  pf::ParamStore<double> store;
  Model<double> model;
  auto mc = tiny_config();
  mc.kd_dim = 4;
  model.init(mc, tiny_embed(), pf::HgaPlan{}, store, rng);

  auto student = random_var({4, 8}, rng);
  auto adapted = model.kd_head(student);
  MatRM<double> teacher;
  teacher.resize(4, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      teacher(Eigen::Index(r), Eigen::Index(c)) = adapted->value[r * 4 + c];

  CHECK(pf::kd_loss(model, student, teacher)->value[0] == 0.0);

  // a unit offset on one teacher coordinate costs exactly 1/M
  teacher(2, 1) += 1.0;
  CHECK(pf::kd_loss(model, student, teacher)->value[0] ==
        doctest::Approx(0.25).epsilon(1e-12));

  auto run = [&](const Var<double>& v) { return pf::kd_loss(model, v, teacher); };
  CHECK(pf::grad_check<double>(run, student) < 1e-5);

  MatRM<double> short_teacher = teacher.topRows(3);
  CHECK_THROWS_WITH_AS(pf::kd_loss(model, student, short_teacher),
                       doctest::Contains("teacher file has 3 rows"),
                       pf::ValueError);
}

TEST_CASE("patch chamfer matches the plain pairing oracle") {
  // one patch, one point, shifted 0.1 along x: 0.01 each direction
  auto pred = make_var({1, 3}, {0.1, 0, 0});
  auto gt = make_mat(1, 3, {0, 0, 0});
  CHECK(pf::chamfer_patches(pred, gt)->value[0] ==
        doctest::Approx(0.02).epsilon(1e-12));

  Rng rng(17);
  const std::size_t m = 3, k = 4;
  auto p = random_var({m, 3 * k}, rng);
  auto g = random_mat(m * k, 3, rng);
  double want = 0;
  for (std::size_t i = 0; i < m; ++i) {
    Points<double> a(Eigen::Index(k), 3);
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c) a(Eigen::Index(j), c) = p->value[i * 3 * k + j * 3 + c];
    Points<double> b = g.block(Eigen::Index(i * k), 0, Eigen::Index(k), 3);
    want += pf::chamfer_pairs<double>(a, b).value;
  }
  want /= double(m);
  CHECK(pf::chamfer_patches(p, g)->value[0] == doctest::Approx(want).epsilon(1e-12));

  // matching sets score zero, exactly
  std::vector<double> flat(g.data(), g.data() + g.size());
  std::vector<double> rowed(m * 3 * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c)
        rowed[i * 3 * k + j * 3 + c] = g(Eigen::Index(i * k + j), c);
  CHECK(pf::chamfer_patches(make_var({m, 3 * k}, rowed), g)->value[0] == 0.0);
}

TEST_CASE("patch chamfer ignores point order and stays nonnegative") {
  Rng rng(23);
  auto p = random_var({2, 9}, rng);
  auto g = random_mat(6, 3, rng);
  double base = pf::chamfer_patches(p, g)->value[0];

  // shuffle ground-truth rows inside each patch
  MatRM<double> shuffled = g;
  shuffled.row(0).swap(shuffled.row(2));
  shuffled.row(4).swap(shuffled.row(5));
  CHECK(pf::chamfer_patches(p, shuffled)->value[0] ==
        doctest::Approx(base).epsilon(1e-12));

  for (std::size_t t = 0; t < 1000; ++t) {
    auto pr = random_var({1, 6}, rng);
    auto gr = random_mat(2, 3, rng);
    CHECK(pf::chamfer_patches(pr, gr)->value[0] >= 0.0);
  }

  // duplicating a patch leaves the per-patch mean unchanged
  auto one = random_var({1, 6}, rng);
  auto gt1 = random_mat(2, 3, rng);
  double solo = pf::chamfer_patches(one, gt1)->value[0];
  std::vector<double> twice(one->value);
  twice.insert(twice.end(), one->value.begin(), one->value.end());
  MatRM<double> gt2(4, 3);
  gt2.topRows(2) = gt1;
  gt2.bottomRows(2) = gt1;
  CHECK(pf::chamfer_patches(make_var({2, 6}, twice), gt2)->value[0] ==
        doctest::Approx(solo).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(pf::chamfer_patches(random_var({2, 7}, rng), g),
                       doctest::Contains("multiple of 3"), pf::ValueError);
  CHECK_THROWS_WITH_AS(pf::chamfer_patches(random_var({2, 6}, rng), g),
                       doctest::Contains("expected 4x3"), pf::ValueError);
}

TEST_CASE("patch chamfer gradient agrees with central differences") {
  Rng rng(31);
  // spread the points out so nearest-neighbor choices hold still
  std::vector<double> pv = {0.0, 0.0, 0.1,  1.0, 0.0, 0.0,
                            0.0, 1.1, 0.0,  2.0, 2.0, 2.1};
  auto gt = make_mat(4, 3, {0.1, 0.0, 0.0,  1.0, 0.1, 0.0,
                            0.0, 1.0, 0.1,  2.1, 2.0, 2.0});
  auto run = [&](const Var<double>& v) { return pf::chamfer_patches(v, gt); };
  CHECK(pf::grad_check<double>(run, make_var({2, 6}, pv)) < 1e-6);
}

TEST_CASE("contrastive loss closed forms") {
  // one sample: the only candidate is the match
  Rng rng(41);
  auto z = random_var({1, 4}, rng);
  CHECK(pf::info_nce(z, z, 0.5)->value[0] == doctest::Approx(0.0).epsilon(1e-12));

  // indistinguishable rows: uniform over B, so ln 2
  auto flat1 = make_var({2, 3}, {1, 2, 0, 1, 2, 0});
  auto flat2 = make_var({2, 3}, {2, 4, 0, 2, 4, 0});
  CHECK(pf::info_nce(flat1, flat2, 0.7)->value[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // first view orthogonal to an identical-row second view: also uniform
  auto ortho = make_var({2, 3}, {1, 0, 0, 0, 1, 0});
  auto same_z = make_var({2, 3}, {0, 0, 2, 0, 0, 2});
  CHECK(pf::info_nce(ortho, same_z, 0.07)->value[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // orthonormal pairs at tau 1: softmax sees diag 1, off-diag 0
  auto e12 = make_var({2, 2}, {1, 0, 0, 1});
  double want = std::log(1.0 + std::exp(-1.0));
  CHECK(pf::info_nce(e12, e12, 1.0)->value[0] == doctest::Approx(want).epsilon(1e-12));
  // sharper temperature separates the pair further
  CHECK(pf::info_nce(e12, e12, 0.1)->value[0] < want);

  // one direction only: rows of the first argument pick columns
  auto a = make_var({2, 2}, {1, 0, 1, 0});
  auto b = make_var({2, 2}, {1, 0, 0, 1});
  CHECK(pf::info_nce(a, b, 1.0)->value[0] !=
        doctest::Approx(pf::info_nce(b, a, 1.0)->value[0]).epsilon(1e-9));

  CHECK_THROWS_WITH_AS(pf::info_nce(a, b, 0.0), doctest::Contains("positive"),
                       pf::ValueError);
  CHECK_THROWS_WITH_AS(pf::info_nce(a, random_var({3, 2}, rng), 1.0),
                       doctest::Contains("must match"), pf::ValueError);
}

TEST_CASE("contrastive gradient and pooled token invariance") {
  Rng rng(43);
  auto z1 = random_var({3, 5}, rng);
  auto z2 = random_var({3, 5}, rng);
  auto run1 = [&](const Var<double>& v) { return pf::info_nce(v, z2, 0.5); };
  auto run2 = [&](const Var<double>& v) { return pf::info_nce(z1, v, 0.5); };
  CHECK(pf::grad_check<double>(run1, z1) < 1e-5);
  CHECK(pf::grad_check<double>(run2, z2) < 1e-5);

  // pooling first means token order inside a sample cannot matter
  std::vector<Var<double>> v1, v2, v1_shuf;
  for (std::size_t b = 0; b < 3; ++b) {
    v1.push_back(random_var({4, 5}, rng));
    v2.push_back(random_var({6, 5}, rng));
    std::vector<std::size_t> perm = {3, 0, 2, 1};
    v1_shuf.push_back(pf::gather_rows(v1.back(), perm));
  }
  double base = pf::info_nce_tokens(v1, v2, 0.3)->value[0];
  CHECK(pf::info_nce_tokens(v1_shuf, v2, 0.3)->value[0] ==
        doctest::Approx(base).epsilon(1e-12));

  // the token path and the hand-pooled path are the same function
  std::vector<Var<double>> m1, m2;
  for (std::size_t b = 0; b < 3; ++b) {
    m1.push_back(pf::mean_over_rows(v1[b]));
    m2.push_back(pf::mean_over_rows(v2[b]));
  }
  double direct = pf::info_nce(pf::concat_rows<double>(m1),
                               pf::concat_rows<double>(m2), 0.3)
                      ->value[0];
  CHECK(base == doctest::Approx(direct).epsilon(1e-15));
}

TEST_CASE("hybrid loss wires masks, heads and text together") {
  Rng rng(57);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(2);
  batch[0].tokens = fake_tokens(6, 2, 8, rng);
  batch[0].text = {1, 5, 6, 2};
  batch[1].tokens = fake_tokens(6, 2, 8, rng);
  batch[1].text = {1, 7, 2};

  HybridConfig hc;
  hc.mask_ratio = 0.3;
  auto out = pf::hybrid_semantic_loss(model, batch, hc, Rng(101));

  REQUIRE(out.masks.size() == 2);
  CHECK(out.masks[0].masked.size() == 2);  // 6 * 0.3 rounds to 2
  CHECK(out.masks[0].visible.size() == 4);

  REQUIRE(out.report.terms.size() == 3);
  CHECK(out.report.terms[0].name == "ce");
  CHECK(out.report.terms[1].name == "mask");
  CHECK(out.report.terms[2].name == "recon");
  for (const auto& e : out.report.terms) CHECK(e.weight == 1.0);
  double resum = out.report.term("ce")->value[0] +
                 out.report.term("mask")->value[0] +
                 out.report.term("recon")->value[0];
  CHECK(out.report.total->value[0] == doctest::Approx(resum).epsilon(1e-12));
  CHECK(out.report.term("ce")->value[0] > 0.0);
  CHECK(out.report.term("recon")->value[0] > 0.0);

  // near init the text head is almost uniform over the vocabulary
  CHECK(out.report.term("ce")->value[0] ==
        doctest::Approx(std::log(32.0)).epsilon(0.15));

  // same seed reproduces the bits; another seed moves the loss
  auto again = pf::hybrid_semantic_loss(model, batch, hc, Rng(101));
  CHECK(again.report.total->value[0] == out.report.total->value[0]);
  CHECK(again.masks[0].masked == out.masks[0].masked);
  auto other = pf::hybrid_semantic_loss(model, batch, hc, Rng(102));
  CHECK(other.report.total->value[0] != out.report.total->value[0]);

  pf::backward(out.report.total);
  auto grad_norm = [](const Var<double>& v) {
    double s = 0;
    for (double g : v->grad) s += g * g;
    return s;
  };
  CHECK(grad_norm(model.mask_token()) > 0.0);
  CHECK(grad_norm(store.get("head.predict.w")) > 0.0);
  CHECK(grad_norm(store.get("head.patch.w")) > 0.0);
  CHECK(grad_norm(store.get("head.lm.w")) > 0.0);
}

TEST_CASE("hybrid regression targets are snapshots, not graph edges") {
  Rng rng(61);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(8, 2, 8, rng);
  batch[0].text = {1, 9, 2};

  HybridConfig hc;
  hc.mask_ratio = 0.25;
  auto out = pf::hybrid_semantic_loss(model, batch, hc, Rng(5));
  REQUIRE(out.masks[0].masked.size() == 2);
  pf::backward(out.report.total);

  // hidden token rows feed only the feature targets, which are detached,
  // so their gradient entries stay exactly zero
  const auto& g = batch[0].tokens.tokens->grad;
  REQUIRE(g.size() == 8 * 8);
  for (auto idx : out.masks[0].masked)
    for (std::size_t c = 0; c < 8; ++c) CHECK(g[idx * 8 + c] == 0.0);
  double vis_sum = 0;
  for (auto idx : out.masks[0].visible)
    for (std::size_t c = 0; c < 8; ++c) vis_sum += std::abs(g[idx * 8 + c]);
  CHECK(vis_sum > 0.0);
}

TEST_CASE("hybrid learn slots never see the hidden centers") {
  Rng rng(63);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(8, 2, 8, rng);
  batch[0].text = {1, 7, 11, 2};

  HybridConfig hc;
  auto base = pf::hybrid_semantic_loss(model, batch, hc, Rng(17));
  REQUIRE(!base.masks[0].masked.empty());

  // scrambling the centers of the hidden tokens changes nothing: the learn
  // slots carry no coordinate encoding
  auto moved = batch;
  for (auto idx : base.masks[0].masked)
    moved[0].tokens.centers.row(Eigen::Index(idx)) =
        pf::Points<double>::Random(1, 3) * 10.0;
  auto alt = pf::hybrid_semantic_loss(model, moved, hc, Rng(17));
  CHECK(alt.report.total->value[0] == base.report.total->value[0]);
  CHECK(alt.report.term("ce")->value[0] == base.report.term("ce")->value[0]);

  // moving a visible center does register
  auto vis = batch;
  vis[0].tokens.centers.row(Eigen::Index(base.masks[0].visible[0])) =
      pf::Points<double>::Random(1, 3) * 10.0;
  auto vis_out = pf::hybrid_semantic_loss(model, vis, hc, Rng(17));
  CHECK(vis_out.report.total->value[0] != base.report.total->value[0]);
}

TEST_CASE("hybrid patch variant swaps both regression targets") {
  Rng rng(67);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(6, 2, 8, rng);
  batch[0].text = {1, 4, 2};

  HybridConfig feat, patch;
  feat.variant = HybridVariant::Feature;
  patch.variant = HybridVariant::Patch;
  auto a = pf::hybrid_semantic_loss(model, batch, feat, Rng(9));
  auto b = pf::hybrid_semantic_loss(model, batch, patch, Rng(9));
  CHECK(a.masks[0].masked == b.masks[0].masked);
  // the model input is the same either way, so the text loss is too
  CHECK(a.report.term("ce")->value[0] == b.report.term("ce")->value[0]);
  CHECK(a.report.term("mask")->value[0] != b.report.term("mask")->value[0]);
  CHECK(a.report.term("recon")->value[0] != b.report.term("recon")->value[0]);
}

TEST_CASE("zero mask ratio reduces to reconstruction over all tokens") {
  Rng rng(69);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(6, 2, 8, rng);
  batch[0].text = {1, 10, 11, 2};

  HybridConfig hc;
  hc.mask_ratio = 0.0;
  auto out = pf::hybrid_semantic_loss(model, batch, hc, Rng(3));
  CHECK(out.masks[0].masked.empty());
  CHECK(out.masks[0].visible.size() == 6);
  CHECK(out.report.term("mask")->value[0] == 0.0);

  // recompute the whole thing from scratch: plain forward on the ordered
  // tokens, then the visible-side loss over every token
  std::vector<pf::Seq<double>> seqs(1);
  seqs[0].point_feats = batch[0].tokens.tokens;
  seqs[0].point_coords = batch[0].tokens.centers;
  seqs[0].text = batch[0].text;
  auto fwd = model.forward(seqs);
  MatRM<double> all_patches = batch[0].tokens.patches;
  auto recon =
      pf::chamfer_patches(model.patch_head(fwd.point_final), all_patches);
  CHECK(out.report.term("recon")->value[0] == recon->value[0]);

  std::vector<int> targets = {10, 11, 2, 0};
  std::vector<unsigned char> tmask = {1, 1, 1, 0};
  auto ce = pf::cross_entropy(fwd.text_logits, targets, tmask);
  CHECK(out.report.term("ce")->value[0] == ce->value[0]);

  // patch variant at ratio zero regresses every token onto itself
  hc.variant = HybridVariant::Patch;
  auto swapped = pf::hybrid_semantic_loss(model, batch, hc, Rng(3));
  MatRM<double> self_target;
  self_target.resize(6, 8);
  for (std::size_t i = 0; i < 6 * 8; ++i)
    self_target.data()[i] = batch[0].tokens.tokens->value[i];
  auto feat_recon =
      pf::masked_mse(model.predict_head(fwd.point_final), self_target);
  CHECK(swapped.report.term("recon")->value[0] == feat_recon->value[0]);
}

TEST_CASE("hybrid parameter gradients agree with central differences") {
  Rng rng(71);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(5, 2, 8, rng);
  batch[0].text = {1, 3, 8, 2};

  HybridConfig hc;
  hc.mask_ratio = 0.4;
  hc.variant = HybridVariant::Patch;  // targets never depend on parameters
  auto run = [&] {
    return pf::hybrid_semantic_loss(model, batch, hc, Rng(13)).report.total;
  };
  auto base = run();
  pf::backward(base);

  for (const auto& name : {"mask.token", "head.patch.w", "layer1.attn.wq",
                           "text.tok", "final.ln.g"}) {
    const auto& p = store.get(name);
    std::vector<double> analytic = p->grad;
    Rng pick(std::hash<std::string>{}(name));
    for (int probe = 0; probe < 3; ++probe) {
      std::size_t i = pick.index(p->size());
      double keep = p->value[i], eps = 1e-5;
      p->value[i] = keep + eps;
      double up = run()->value[0];
      p->value[i] = keep - eps;
      double dn = run()->value[0];
      p->value[i] = keep;
      double numeric = (up - dn) / (2 * eps);
      double denom = std::max(1.0, std::abs(analytic[i]));
      CHECK(std::abs(analytic[i] - numeric) / denom < 1e-4);
    }
  }
}

TEST_CASE("loss report folds weighted terms in order") {
  pf::LossReport<double> report;
  auto a = make_var({1}, {0.5}, false);
  auto b = make_var({1}, {0.25}, false);
  report.push("a", a);
  report.push("b", b, 2.0);
  CHECK(report.total->value[0] == 0.5 + 2.0 * 0.25);
  CHECK(report.terms[1].weight == 2.0);
  CHECK(report.term("b")->value[0] == 0.25);  // raw, before weighting
  CHECK_THROWS_WITH_AS(report.term("c"), doctest::Contains("no term named c"),
                       pf::ValueError);
}

TEST_CASE("hybrid rejects unusable batches") {
  Rng rng(73);
  pf::ParamStore<double> store;
  Model<double> model;
  model.init(tiny_config(), tiny_embed(), pf::HgaPlan{}, store, rng);

  std::vector<HybridSample<double>> batch(1);
  batch[0].tokens = fake_tokens(6, 2, 8, rng);
  batch[0].text = {1, 4, 2};
  HybridConfig hc;

  CHECK_THROWS_WITH_AS(
      pf::hybrid_semantic_loss(model, {}, hc, Rng(1)),
      doctest::Contains("empty batch"), pf::ValueError);

  HybridConfig all_hidden;
  all_hidden.mask_ratio = 0.99;  // rounds to every token on 6
  CHECK_THROWS_WITH_AS(
      pf::hybrid_semantic_loss(model, batch, all_hidden, Rng(1)),
      doctest::Contains("leaves no visible tokens"), pf::ValueError);

  HybridConfig unit_ratio;
  unit_ratio.mask_ratio = 1.0;
  CHECK_THROWS_WITH_AS(
      pf::hybrid_semantic_loss(model, batch, unit_ratio, Rng(1)),
      doctest::Contains("outside [0, 1)"), pf::ValueError);

  auto bad_text = batch;
  bad_text[0].text = {1};
  CHECK_THROWS_WITH_AS(
      pf::hybrid_semantic_loss(model, bad_text, hc, Rng(1)),
      doctest::Contains("sentinel-wrapped"), pf::ValueError);

  auto one_token = batch;
  one_token[0].tokens = fake_tokens(1, 2, 8, rng);
  CHECK_THROWS_WITH_AS(
      pf::hybrid_semantic_loss(model, one_token, hc, Rng(1)),
      doctest::Contains("at least 2"), pf::ValueError);

  auto report = pf::hybrid_semantic_loss(model, batch, hc, Rng(1)).report;
  CHECK_THROWS_WITH_AS(report.term("kd"), doctest::Contains("no term named kd"),
                       pf::ValueError);
}
