#include <catch2/catch_amalgamated.hpp>

#include "psv/backbone.hpp"
#include "psv/grad_check.hpp"
#include "psv/petl.hpp"
#include "psv/spkback.hpp"

using namespace psv;

namespace {

using D = double;

ParamGroupT<D>& addp(ParamStoreT<D>& s, const std::string& name,
                     std::vector<std::int64_t> shape, Rng& rng,
                     double stddev = 0.5, bool trainable = true) {
  return s.add(name, TensorT<D>::randn(std::move(shape), rng, stddev),
               trainable);
}

}  // namespace

TEST_CASE("grad_check: quadratic form is exact to roundoff") {
  Rng rng(1);
  ParamStoreT<D> st;
  addp(st, "W", {4, 4}, rng);
  auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    auto w = ctx.use(s.at("W"));
    return scale(sum_all(square(w)), 0.5);
  };
  auto r = grad_check(f, st);
  REQUIRE(r.max_rel_error <= 1e-8);
}

TEST_CASE("grad_check: corrupted gradient is detected") {
  Rng rng(2);
  ParamStoreT<D> st;
  addp(st, "W", {3, 3}, rng);
  auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    auto w = ctx.use(s.at("W"));
    return scale(sum_all(square(w)), 0.5);
  };
  GradCheckOptions opts;
  opts.corrupt_scale = 1.1;  // +10% fault injection
  auto r = grad_check(f, st, opts);
  REQUIRE(r.max_rel_error >= 0.05);
}

TEST_CASE("grad_check: composed ops against finite differences") {
  // softmax + layer_norm + gelu + matmul + reductions in one graph.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    ParamStoreT<D> st;
    addp(st, "W1", {6, 5}, rng);
    addp(st, "W2", {5, 4}, rng);
    addp(st, "gamma", {5}, rng, 0.3);
    addp(st, "beta", {5}, rng, 0.3);
    TensorT<D> x = TensorT<D>::randn({3, 6}, rng, 1.0);
    auto f = [x](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
      auto xv = ctx.tape().leaf(x);
      auto h = matmul(xv, ctx.use(s.at("W1")));
      h = layer_norm(h, ctx.use(s.at("gamma")), ctx.use(s.at("beta")));
      h = gelu(h);
      auto y = softmax_rows(matmul(h, ctx.use(s.at("W2"))));
      return mean_all(square(y));
    };
    auto r = grad_check(f, st);
    INFO("seed " << seed << " worst " << r.worst_coord);
    REQUIRE(r.max_rel_error <= 1e-6);
  }
}

TEST_CASE("grad_check: bottleneck adapter") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(200 + seed);
    ParamStoreT<D> st;
    addp(st, "down", {8, 3}, rng);
    addp(st, "up", {3, 8}, rng);
    TensorT<D> h = TensorT<D>::randn({4, 8}, rng, 1.0);
    auto f = [h](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
      AdapterRefs<D> a{&s.at("down"), &s.at("up")};
      auto out = bottleneck_forward(ctx, a, ctx.tape().leaf(h), "gelu");
      return mean_all(square(out));
    };
    auto r = grad_check(f, st);
    REQUIRE(r.max_rel_error <= 1e-6);
  }
}

TEST_CASE("grad_check: prefix attention (fused node)") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(300 + seed);
    ParamStoreT<D> st;
    addp(st, "q", {5, 4}, rng);
    addp(st, "k", {5, 4}, rng);
    addp(st, "v", {5, 4}, rng);
    addp(st, "pk", {2, 4}, rng);
    addp(st, "pv", {2, 4}, rng);
    auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
      auto out = prefix_attention(ctx.use(s.at("q")), ctx.use(s.at("k")),
                                  ctx.use(s.at("v")), ctx.use(s.at("pk")),
                                  ctx.use(s.at("pv")));
      return mean_all(square(out));
    };
    auto r = grad_check(f, st);
    INFO("seed " << seed << " worst " << r.worst_coord);
    REQUIRE(r.max_rel_error <= 1e-6);
  }
}

TEST_CASE("grad_check: gated prefix attention") {
  Rng rng(400);
  ParamStoreT<D> st;
  addp(st, "q", {4, 4}, rng);
  addp(st, "k", {4, 4}, rng);
  addp(st, "v", {4, 4}, rng);
  addp(st, "pk", {2, 4}, rng);
  addp(st, "pv", {2, 4}, rng);
  addp(st, "g", {1}, rng, 0.4);
  auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    auto out = gated_prefix_attention(ctx.use(s.at("q")), ctx.use(s.at("k")),
                                      ctx.use(s.at("v")), ctx.use(s.at("pk")),
                                      ctx.use(s.at("pv")), ctx.use(s.at("g")));
    return mean_all(square(out));
  };
  auto r = grad_check(f, st);
  REQUIRE(r.max_rel_error <= 1e-6);
}

TEST_CASE("grad_check: conv1d with stride and zero padding") {
  Rng rng(500);
  ParamStoreT<D> st;
  addp(st, "W", {3 * 2, 4}, rng);  // kernel 3, c_in 2, c_out 4
  addp(st, "b", {4}, rng, 0.2);
  TensorT<D> x = TensorT<D>::randn({11, 2}, rng, 1.0);
  auto f = [x](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    auto y = conv1d(ctx.tape().leaf(x, true), ctx.use(s.at("W")),
                    ctx.use(s.at("b")), 3, 2);
    return mean_all(square(y));
  };
  auto r = grad_check(f, st);
  REQUIRE(r.max_rel_error <= 1e-6);
}

TEST_CASE("grad_check: layer_weighted_sum, l2 normalize, cosine") {
  Rng rng(600);
  ParamStoreT<D> st;
  addp(st, "a", {3}, rng, 0.7);
  addp(st, "L0", {4, 5}, rng);
  addp(st, "L1", {4, 5}, rng);
  addp(st, "L2", {4, 5}, rng);
  addp(st, "u", {6}, rng);
  addp(st, "v", {6}, rng);
  auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    std::vector<Var<D>> layers{ctx.use(s.at("L0")), ctx.use(s.at("L1")),
                               ctx.use(s.at("L2"))};
    auto mix = layer_weighted_sum(layers, ctx.use(s.at("a")));
    auto n = l2_normalize_rows(mix);
    auto c = cosine_sim(ctx.use(s.at("u")), ctx.use(s.at("v")));
    return add(mean_all(square(n)), square(c));
  };
  auto r = grad_check(f, st);
  REQUIRE(r.max_rel_error <= 1e-6);
}

TEST_CASE("grad_check: aam margin logits + cross entropy") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(700 + seed);
    ParamStoreT<D> st;
    addp(st, "emb", {3, 6}, rng);
    addp(st, "head", {6, 4}, rng);
    std::vector<int> labels = {0, 2, 3};
    auto f = [labels](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
      AamHeadRefs<D> head{&s.at("head")};
      return aam_loss(ctx, head, ctx.use(s.at("emb")), labels, 0.2, 30.0);
    };
    auto r = grad_check(f, st);
    INFO("seed " << seed << " worst " << r.worst_coord);
    REQUIRE(r.max_rel_error <= 1e-5);
  }
}

TEST_CASE("grad_check: frozen groups flow gradients through") {
  Rng rng(800);
  ParamStoreT<D> st;
  addp(st, "frozen", {4, 4}, rng, 0.5, /*trainable=*/false);
  addp(st, "train", {4, 4}, rng);
  auto f = [](ForwardCtx<D>& ctx, const ParamStoreT<D>& s) {
    auto h = matmul(ctx.use(s.at("train")), ctx.use(s.at("frozen")));
    return mean_all(square(h));
  };
  auto r = grad_check(f, st);  // only "train" is checked
  REQUIRE(r.max_rel_error <= 1e-6);
  // and the frozen group gets no gradient entry
  Tape<D> tape;
  ForwardCtx<D> ctx(tape);
  auto loss = f(ctx, st);
  auto grads = backward(loss, ctx, st);
  REQUIRE(grads.count("train") == 1);
  REQUIRE(grads.count("frozen") == 0);
}
