#include <catch2/catch_amalgamated.hpp>

#include "psv/model.hpp"
#include "psv/spkback.hpp"

using namespace psv;

namespace {

struct MhfaFixture {
  ParamStoreT<float> store;
  MhfaRefs<float> refs;
  int n_layers1;  // L + 1
  MhfaConfig cfg;

  MhfaFixture(int layers1, MhfaConfig c, Rng rng, int d_hidden)
      : n_layers1(layers1), cfg(c) {
    store.add(names::kMhfaAk, Tensor::randn({layers1}, rng, 0.5f));
    store.add(names::kMhfaAv, Tensor::randn({layers1}, rng, 0.5f));
    store.add(names::kMhfaWk, Tensor::randn({d_hidden, c.d_cmp}, rng, 0.3f));
    store.add(names::kMhfaWv, Tensor::randn({d_hidden, c.d_cmp}, rng, 0.3f));
    store.add(names::kMhfaU, Tensor::randn({c.n_heads, c.d_cmp}, rng, 0.3f));
    store.add(names::kMhfaWo,
              Tensor::randn({static_cast<std::int64_t>(c.n_heads) * c.d_cmp,
                             c.d_emb},
                            rng, 0.3f));
    store.add(names::kMhfaBo, Tensor::randn({c.d_emb}, rng, 0.1f));
    refs = mhfa_refs(store);
  }

  Tensor pool(const std::vector<Tensor>& layers) {
    Tape<float> t;
    ForwardCtx<float> ctx(t, false);
    std::vector<Var<float>> vars;
    for (const auto& l : layers) vars.push_back(t.leaf(l));
    return t.val(mhfa_pool(ctx, refs, vars));
  }
};

// Straight-line double-precision MHFA, independent of the tape ops.
TensorT<double> reference_mhfa(const MhfaFixture& f,
                               const std::vector<Tensor>& layers) {
  auto P = [&](const char* n) { return f.store.at(n).tensor.cast<double>(); };
  const std::int64_t T = layers[0].rows(), D = layers[0].cols();
  auto softmax_vec = [](std::vector<double> v) {
    double mx = *std::max_element(v.begin(), v.end());
    double z = 0;
    for (auto& x : v) {
      x = std::exp(x - mx);
      z += x;
    }
    for (auto& x : v) x /= z;
    return v;
  };
  auto ak = P(names::kMhfaAk), av = P(names::kMhfaAv);
  std::vector<double> wk(ak.data.begin(), ak.data.end());
  std::vector<double> wv(av.data.begin(), av.data.end());
  wk = softmax_vec(wk);
  wv = softmax_vec(wv);
  TensorT<double> K = TensorT<double>::zeros({T, D});
  TensorT<double> V = TensorT<double>::zeros({T, D});
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (std::int64_t j = 0; j < K.numel(); ++j) {
      K[j] += wk[i] * static_cast<double>(layers[i][j]);
      V[j] += wv[i] * static_cast<double>(layers[i][j]);
    }
  auto mm = [](const TensorT<double>& a, const TensorT<double>& b) {
    TensorT<double> y = TensorT<double>::zeros({a.rows(), b.cols()});
    for (std::int64_t i = 0; i < a.rows(); ++i)
      for (std::int64_t j = 0; j < b.cols(); ++j) {
        double acc = 0;
        for (std::int64_t k = 0; k < a.cols(); ++k)
          acc += a.at(i, k) * b.at(k, j);
        y.at(i, j) = acc;
      }
    return y;
  };
  auto k = mm(K, P(names::kMhfaWk));
  auto v = mm(V, P(names::kMhfaWv));
  auto U = P(names::kMhfaU);
  const int Hp = f.cfg.n_heads, Dc = f.cfg.d_cmp;
  TensorT<double> pooled = TensorT<double>::zeros({Hp, Dc});
  for (int h = 0; h < Hp; ++h) {
    std::vector<double> logits(static_cast<std::size_t>(T));
    for (std::int64_t t = 0; t < T; ++t) {
      double acc = 0;
      for (int c = 0; c < Dc; ++c) acc += U.at(h, c) * k.at(t, c);
      logits[static_cast<std::size_t>(t)] = acc;
    }
    auto alpha = softmax_vec(logits);
    for (std::int64_t t = 0; t < T; ++t)
      for (int c = 0; c < Dc; ++c)
        pooled.at(h, c) += alpha[static_cast<std::size_t>(t)] * v.at(t, c);
  }
  TensorT<double> flat({1, static_cast<std::int64_t>(Hp) * Dc},
                       std::vector<double>(pooled.data.begin(), pooled.data.end()));
  auto emb = mm(flat, P(names::kMhfaWo));
  auto bo = P(names::kMhfaBo);
  for (std::int64_t i = 0; i < emb.numel(); ++i) emb[i] += bo[i];
  return emb;
}

}  // namespace

TEST_CASE("mhfa: single frame pools that frame regardless of U") {
  Rng rng(1);
  MhfaFixture f(3, {6, 4, 5}, rng, 8);
  std::vector<Tensor> layers;
  for (int i = 0; i < 3; ++i) layers.push_back(Tensor::randn({1, 8}, rng));
  Tensor emb = f.pool(layers);
  REQUIRE(emb.shape == std::vector<std::int64_t>({5}));
  // alpha must be exactly 1 on the only frame: changing U cannot matter
  f.store.at(names::kMhfaU).tensor = Tensor::randn({4, 6}, rng, 2.0f);
  Tensor emb2 = f.pool(layers);
  REQUIRE(emb.data == emb2.data);
}

TEST_CASE("mhfa: one-hot layer logits select exactly one layer") {
  Rng rng(2);
  MhfaFixture f(3, {4, 2, 4}, rng, 6);
  std::vector<Tensor> layers;
  for (int i = 0; i < 3; ++i) layers.push_back(Tensor::randn({5, 6}, rng));
  // saturate both layer-weight softmaxes onto layer 1
  f.store.at(names::kMhfaAk).tensor = Tensor::vec({-1e6f, 1e6f, -1e6f});
  f.store.at(names::kMhfaAv).tensor = Tensor::vec({-1e6f, 1e6f, -1e6f});
  Tensor picked = f.pool(layers);
  std::vector<Tensor> only{layers[1], layers[1], layers[1]};
  Tensor direct = f.pool(only);
  for (std::int64_t i = 0; i < picked.numel(); ++i)
    REQUIRE(picked[i] == Catch::Approx(direct[i]).margin(1e-6));
}

TEST_CASE("mhfa: random instance matches the straight-line 64-bit oracle") {
  Rng rng(3);
  MhfaFixture f(4, {5, 3, 7}, rng, 9);
  std::vector<Tensor> layers;
  for (int i = 0; i < 4; ++i) layers.push_back(Tensor::randn({3, 9}, rng));
  Tensor emb = f.pool(layers);
  auto expect = reference_mhfa(f, layers);
  for (std::int64_t i = 0; i < emb.numel(); ++i)
    REQUIRE(emb[i] == Catch::Approx(expect[i]).margin(1e-5));
}

TEST_CASE("mhfa: frame order does not change the embedding") {
  Rng rng(4);
  MhfaFixture f(3, {6, 4, 8}, rng, 10);
  std::vector<Tensor> layers;
  for (int i = 0; i < 3; ++i) layers.push_back(Tensor::randn({7, 10}, rng));
  Tensor emb = f.pool(layers);
  // apply one permutation to the time axis of every layer
  std::vector<std::int64_t> perm = {3, 0, 6, 1, 5, 2, 4};
  std::vector<Tensor> permuted;
  for (const auto& l : layers) {
    Tensor p = Tensor::zeros(l.shape);
    for (std::int64_t r = 0; r < 7; ++r)
      for (std::int64_t c = 0; c < 10; ++c)
        p.at(r, c) = l.at(perm[static_cast<std::size_t>(r)], c);
    permuted.push_back(std::move(p));
  }
  Tensor emb2 = f.pool(permuted);
  for (std::int64_t i = 0; i < emb.numel(); ++i)
    REQUIRE(emb2[i] == Catch::Approx(emb[i]).margin(1e-6));
}

TEST_CASE("mhfa: empty sequence is an input error") {
  Rng rng(5);
  MhfaFixture f(2, {4, 2, 4}, rng, 6);
  Tape<float> t;
  ForwardCtx<float> ctx(t, false);
  std::vector<Var<float>> none;
  REQUIRE_THROWS_AS(mhfa_pool(ctx, f.refs, none), InputError);
}

TEST_CASE("aam loss: margin 0 equals plain cosine softmax bitwise") {
  Rng rng(6);
  ParamStoreT<float> st;
  st.add("head", Tensor::randn({6, 4}, rng, 0.4f));
  Tensor emb = Tensor::randn({3, 6}, rng);
  std::vector<int> labels = {1, 3, 0};

  Tape<float> t;
  ForwardCtx<float> ctx(t, false);
  AamHeadRefs<float> head{&st.at("head")};
  auto loss = aam_loss(ctx, head, t.leaf(emb), labels, 0.0f, 30.0f);

  // plain path with the same primitives
  Tape<float> t2;
  ForwardCtx<float> ctx2(t2, false);
  auto n = l2_normalize_rows(t2.leaf(emb));
  auto cols = transpose(l2_normalize_rows(transpose(ctx2.use(st.at("head")))));
  auto logits = scale(matmul(n, cols), 30.0f);
  auto plain = cross_entropy_mean(logits, labels);
  REQUIRE(t.val(loss).data[0] == t2.val(plain).data[0]);
}

TEST_CASE("aam loss: single-sample case matches the 64-bit formula") {
  // B = 1, 2 classes, embedding exactly aligned with the target column.
  ParamStoreT<float> st;
  Tensor head = Tensor::zeros({3, 2});
  head.at(0, 0) = 1.0f;  // class 0 column = e1
  head.at(1, 1) = 1.0f;  // class 1 column = e2
  st.add("head", head);
  Tensor emb = Tensor::from_rows({{2.0f, 0.0f, 0.0f}});  // aligned with class 0

  Tape<float> t;
  ForwardCtx<float> ctx(t, false);
  AamHeadRefs<float> hr{&st.at("head")};
  auto loss = aam_loss(ctx, hr, t.leaf(emb), {0}, 0.2f, 30.0f);

  // cos(theta_0) = 1 (clamped to 1 - 1e-7), cos(theta_1) = 0.
  const double c0 = 1.0 - 1e-7;
  double target = 30.0 * (c0 * std::cos(0.2) -
                          std::sqrt(1.0 - c0 * c0) * std::sin(0.2));
  double other = 0.0;
  double z = std::exp(target) + std::exp(other);
  double expect = -std::log(std::exp(target) / z);
  REQUIRE(t.val(loss).data[0] == Catch::Approx(expect).margin(1e-5));
}

TEST_CASE("aam loss: decreases as the target cosine rises") {
  ParamStoreT<float> st;
  Tensor head = Tensor::zeros({2, 2});
  head.at(0, 0) = 1.0f;
  head.at(1, 1) = 1.0f;
  st.add("head", head);
  AamHeadRefs<float> hr{&st.at("head")};
  double prev = 1e9;
  for (double c : {-0.5, 0.0, 0.3, 0.6, 0.9}) {
    Tensor emb = Tensor::from_rows(
        {{static_cast<float>(c), static_cast<float>(std::sqrt(1 - c * c))}});
    Tape<float> t;
    ForwardCtx<float> ctx(t, false);
    auto loss = aam_loss(ctx, hr, t.leaf(emb), {0}, 0.2f, 30.0f);
    REQUIRE(t.val(loss).data[0] < prev);
    prev = t.val(loss).data[0];
  }
}

TEST_CASE("aam loss: out-of-range label is an input error") {
  Rng rng(8);
  ParamStoreT<float> st;
  st.add("head", Tensor::randn({4, 3}, rng));
  Tape<float> t;
  ForwardCtx<float> ctx(t, false);
  AamHeadRefs<float> hr{&st.at("head")};
  REQUIRE_THROWS_AS(
      aam_loss(ctx, hr, t.leaf(Tensor::randn({1, 4}, rng)), {3}, 0.2f, 30.0f),
      InputError);
}

TEST_CASE("aam logits: embedding scale invariance") {
  Rng rng(9);
  ParamStoreT<float> st;
  st.add("head", Tensor::randn({5, 4}, rng, 0.4f));
  Tensor emb = Tensor::randn({2, 5}, rng);
  Tensor scaled = emb;
  for (auto& v : scaled.data) v *= 7.5f;
  AamHeadRefs<float> hr{&st.at("head")};
  std::vector<int> labels = {2, 0};
  auto loss_of = [&](const Tensor& e) {
    Tape<float> t;
    ForwardCtx<float> ctx(t, false);
    return t.val(aam_loss(ctx, hr, t.leaf(e), labels, 0.2f, 30.0f)).data[0];
  };
  REQUIRE(loss_of(scaled) == Catch::Approx(loss_of(emb)).margin(1e-6));
}

TEST_CASE("cosine_score: trivial geometry") {
  Tensor a = Tensor::vec({1, 2, 3});
  Tensor b = Tensor::vec({1, 2, 3});
  REQUIRE(cosine_score(a, b) == Catch::Approx(1.0).margin(1e-12));
  Tensor neg = Tensor::vec({-1, -2, -3});
  REQUIRE(cosine_score(a, neg) == Catch::Approx(-1.0).margin(1e-12));
  Tensor e1 = Tensor::vec({1, 0});
  Tensor e2 = Tensor::vec({0, 1});
  REQUIRE(cosine_score(e1, e2) == 0.0);
  // scale invariance
  Tensor a10 = Tensor::vec({10, 20, 30});
  Tensor c = Tensor::vec({3, -1, 2});
  REQUIRE(cosine_score(a10, c) == Catch::Approx(cosine_score(a, c)).margin(1e-6));
  REQUIRE_THROWS_AS(cosine_score(Tensor::vec({0, 0}), e1), InputError);
}

TEST_CASE("back-end budget at base shape sits in [2.0M, 2.4M]") {
  auto bb = BackboneConfig::preset("base");
  PetlConfig fixed;
  fixed.mode = PetlMode::kFixed;
  ParamReport r = count_params(bb, fixed, MhfaConfig{});
  REQUIRE(r.trainable_backend >= 2'000'000);
  REQUIRE(r.trainable_backend <= 2'400'000);
}
