#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pointform/embedding.hpp"

using pf::Cloud;
using pf::Points;

namespace {

Cloud<double> random_cloud(std::size_t n, pf::Rng& rng, double extent = 0.5) {
  Cloud<double> c;
  c.pos.resize(n, 3);
  c.color.resize(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      c.pos(i, a) = rng.uniform(-extent, extent);
      c.color(i, a) = rng.uniform(0.0, 1.0);
    }
  return c;
}

pf::EmbedConfig tiny_config() {
  pf::EmbedConfig cfg;
  cfg.input_points = 64;
  cfg.stage_sizes = {32, 16, 8};
  cfg.group_k = 4;
  cfg.stage_dims = {6, 8, 12, 16};
  cfg.model_dim = 24;
  cfg.freq_bands = 2;
  return cfg;
}

}  // namespace

TEST_CASE("trig encoding hand values and parity") {
  Points<double> rel(2, 3);
  rel << 0, 0, 0, 0.5, 0, 0;
  auto enc = pf::trig_encode(rel, 2);
  REQUIRE(enc.cols() == 12);
  // origin encodes to alternating sin 0, cos 1
  for (int c = 0; c < 12; c += 2) {
    CHECK(enc(0, c) == doctest::Approx(0.0));
    CHECK(enc(0, c + 1) == doctest::Approx(1.0));
  }
  // x = 0.5: band0 sin(pi/2)=1 cos=0, band1 sin(pi)=0 cos=-1
  CHECK(enc(1, 0) == doctest::Approx(1.0));
  CHECK(enc(1, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(enc(1, 2) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(enc(1, 3) == doctest::Approx(-1.0));

  // odd/even symmetry under negation, axis by axis
  Points<double> plus(1, 3), minus(1, 3);
  plus << 0.3, -0.2, 0.7;
  minus = -plus;
  auto ep = pf::trig_encode(plus, 3);
  auto em = pf::trig_encode(minus, 3);
  for (int c = 0; c < ep.cols(); c += 2) {
    CHECK(em(0, c) == doctest::Approx(-ep(0, c)));
    CHECK(em(0, c + 1) == doctest::Approx(ep(0, c + 1)));
  }

  CHECK_THROWS_WITH_AS(pf::trig_encode(rel, 0), doctest::Contains("band"),
                       pf::ValueError);
}

TEST_CASE("resample identity, fps equivalence and duplication") {
  pf::Rng rng(201);
  auto cloud = random_cloud(100, rng);

  // exact size passes through untouched
  auto same = pf::resample(cloud, 100, rng.fork("r"));
  CHECK(same.pos == cloud.pos);
  CHECK(same.color == cloud.color);

  // downsample equals gathering the fps rows
  auto down = pf::resample(cloud, 10, rng.fork("r"));
  auto idx = pf::fps(cloud.pos, 10);
  for (int i = 0; i < 10; ++i) {
    CHECK(down.pos.row(i) == cloud.pos.row(idx[i]));
    CHECK(down.color.row(i) == cloud.color.row(idx[i]));
  }

  // upsample keeps originals first, then seeded duplicates of real rows
  auto up = pf::resample(cloud, 130, rng.fork("up"));
  REQUIRE(up.pos.rows() == 130);
  for (int i = 0; i < 100; ++i) CHECK(up.pos.row(i) == cloud.pos.row(i));
  for (int i = 100; i < 130; ++i) {
    bool found = false;
    for (int j = 0; j < 100 && !found; ++j)
      found = up.pos.row(i) == cloud.pos.row(j);
    CHECK(found);
  }
  // seeded: same fork reproduces, different fork may differ
  auto up2 = pf::resample(cloud, 130, rng.fork("up"));
  CHECK(up.pos == up2.pos);

  CHECK_THROWS_WITH_AS(pf::resample(cloud, 0, rng), doctest::Contains("positive"),
                       pf::ValueError);
}

TEST_CASE("embedding emits the configured token geometry") {
  pf::Rng rng(202);
  auto cloud = random_cloud(64, rng);
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = tiny_config();
  embed.init(store, rng.fork("init"));

  auto tokens = embed.forward(cloud);
  CHECK(tokens.tokens->shape == std::vector<std::size_t>{8, 24});
  CHECK(tokens.centers.rows() == 8);
  CHECK(tokens.patches.rows() == 8 * 4);
  CHECK(tokens.patch_k == 4);

  // centers are actual input points
  for (int c = 0; c < 8; ++c) {
    bool found = false;
    for (int i = 0; i < 64 && !found; ++i) {
      double d = (tokens.centers.row(c) - cloud.pos.row(i)).norm();
      found = d < 1e-12;
    }
    CHECK(found);
  }

  // rerunning the forward is bit-identical
  auto again = embed.forward(cloud);
  CHECK(tokens.tokens->value == again.tokens->value);

  // wrong input size is rejected with a pointer at resample
  auto small = random_cloud(32, rng);
  CHECK_THROWS_WITH_AS(embed.forward(small), doctest::Contains("resample"),
                       pf::ValueError);
}

TEST_CASE("colorless clouds embed with zeroed color channels") {
  pf::Rng rng(203);
  auto cloud = random_cloud(64, rng);
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = tiny_config();
  embed.init(store, rng.fork("init"));

  Cloud<double> bare;
  bare.pos = cloud.pos;
  auto t1 = embed.forward(bare);

  Cloud<double> zeroed = cloud;
  zeroed.color.setZero();
  auto t2 = embed.forward(zeroed);
  CHECK(t1.tokens->value == t2.tokens->value);
}

TEST_CASE("neighbor pooling ignores source point order") {
  // fix the centers, permute the source set: pooled features must agree
  pf::Rng rng(204);
  auto cloud = random_cloud(40, rng);
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = tiny_config();
  embed.init(store, rng.fork("init"));

  Points<double> centers = cloud.pos.topRows(6);
  auto feats = pf::param<double>({40, 6}, rng, 1.0);

  auto pooled_of = [&](const Points<double>& src, const pf::Var<double>& f) {
    auto g = pf::knn_group(src, centers, 5);
    auto carried = pf::gather_rows(f, g.flat_idx);
    auto enc = pf::trig_encode(g.rel, 2);
    std::vector<double> ef(enc.data(), enc.data() + enc.size());
    auto enc_t = pf::constant<double>({std::size_t(enc.rows()), 12}, std::move(ef));
    auto mixed = pf::matmul(pf::concat_cols(carried, enc_t), embed.stage_w[0]);
    return pf::reduce_max_mid(pf::reshape(mixed, {6, 5, 8}));
  };

  auto base = pooled_of(cloud.pos, feats);

  auto perm = rng.permutation(40);
  Points<double> shuffled(40, 3);
  auto shuffled_feats = pf::zeros<double>({40, 6});
  for (std::size_t i = 0; i < 40; ++i) {
    shuffled.row(i) = cloud.pos.row(perm[i]);
    for (int c = 0; c < 6; ++c)
      shuffled_feats->value[i * 6 + c] = feats->value[perm[i] * 6 + c];
  }
  auto moved = pooled_of(shuffled, shuffled_feats);
  for (std::size_t i = 0; i < base->size(); ++i)
    CHECK(base->value[i] == doctest::Approx(moved->value[i]).epsilon(1e-12));
}

TEST_CASE("doubling every point then resampling reproduces the tokens") {
  pf::Rng rng(205);
  auto cloud = random_cloud(64, rng);
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = tiny_config();
  embed.init(store, rng.fork("init"));

  auto base = embed.forward(cloud);

  Cloud<double> doubled;
  doubled.pos.resize(128, 3);
  doubled.color.resize(128, 3);
  doubled.pos << cloud.pos, cloud.pos;
  doubled.color << cloud.color, cloud.color;
  auto back = pf::resample(doubled, 64, rng.fork("never-used"));
  auto again = embed.forward(back);
  CHECK(base.tokens->value == again.tokens->value);
}

TEST_CASE("embedding gradients flow to every stage parameter") {
  pf::Rng rng(206);
  auto cloud = random_cloud(64, rng);
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = tiny_config();
  embed.init(store, rng.fork("init"));

  auto tokens = embed.forward(cloud);
  auto loss = pf::reduce_mean(pf::mul(tokens.tokens, tokens.tokens));
  pf::backward(loss);
  for (const auto& item : store.items) {
    double norm = 0;
    for (double g : item.var->grad) norm += g * g;
    CAPTURE(item.name);
    CHECK(norm > 0.0);
  }

  // and the analytic gradient of a small parameter is right
  double err = pf::grad_check<double>(
      [&](const pf::Var<double>&) {
        auto t = embed.forward(cloud);
        return pf::reduce_mean(pf::mul(t.tokens, t.tokens));
      },
      embed.lift_b);
  CHECK(err < 1e-6);
}

TEST_CASE("config validation rejects impossible grouping") {
  pf::EmbedConfig cfg = tiny_config();
  cfg.group_k = 10;  // larger than the final stage's source set
  pf::ParamStore<double> store;
  pf::PointEmbedding<double> embed;
  embed.cfg = cfg;
  pf::Rng rng(1);
  CHECK_THROWS_WITH_AS(embed.init(store, rng), doctest::Contains("group_k"),
                       pf::ValueError);

  pf::EmbedConfig growing = tiny_config();
  growing.stage_sizes = {32, 48, 8};
  embed.cfg = growing;
  pf::ParamStore<double> store2;
  CHECK_THROWS_WITH_AS(embed.init(store2, rng), doctest::Contains("shrink"),
                       pf::ValueError);
}
