#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bevtrack/decoder.hpp"
#include "bevtrack/optim.hpp"
#include "bevtrack/rng.hpp"
#include "test_util.hpp"

using namespace bevtrack;
using testutil::random_tensor;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.channels = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 24;
  cfg.object_queries = 5;
  cfg.n_classes = 3;
  return cfg;
}

TokenField tiny_tokens(const ModelConfig& cfg, std::uint64_t seed, std::size_t count = 6) {
  TokenField field;
  auto rng = make_rng(seed, "test-tokens");
  std::uniform_real_distribution<double> xy(-40, 40);
  std::uniform_real_distribution<double> feat(-1, 1);
  field.tokens = Tensor::zeros({count, cfg.channels});
  for (auto& v : field.tokens.data()) v = feat(rng);
  for (std::size_t i = 0; i < count; ++i) field.positions.push_back({xy(rng), xy(rng), 0.0});
  return field;
}

QuerySet tiny_queries(const ModelConfig& cfg, std::uint64_t seed, std::size_t n) {
  QuerySet qs;
  auto rng = make_rng(seed, "test-queries");
  qs.embeddings = random_tensor({n, cfg.channels}, rng);
  qs.references_t = random_tensor({n, 3}, rng, -30, 30, false);
  for (std::size_t i = 0; i < n; ++i)
    qs.references.push_back(
        {qs.references_t.at(i, 0), qs.references_t.at(i, 1), qs.references_t.at(i, 2)});
  qs.meta.assign(n, QueryMeta{QueryKind::Object, std::nullopt, 0, 0});
  return qs;
}

void zero_param(ParamStore& store, const std::string& name) {
  Tensor t = store.get(name);
  std::fill(t.data().begin(), t.data().end(), 0.0);
}

}  // namespace

TEST_CASE("U-decoder introduces no parameters beyond the S-decoder's") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 1);
  for (const auto& [name, _] : store.canonical())
    CHECK(name.rfind("u_decoder.", 0) == std::string::npos);
  // every shared piece is reachable under its U-decoder alias
  CHECK(store.get("u_decoder.layer0.ca.q.w").node() ==
        store.get("s_decoder.layer0.ca.q.w").node());
  CHECK(store.get("u_decoder.layer1.ffn.fc2.b").node() ==
        store.get("s_decoder.layer1.ffn.fc2.b").node());
  CHECK(store.get("u_decoder.layer0.ln_ffn.gain").node() ==
        store.get("s_decoder.layer0.ln_ffn.gain").node());
}

TEST_CASE("zeroed self-attention output projection makes S and U runs bitwise equal") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 2);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".sa.o.w");
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".sa.o.b");
  }

  QuerySet qs = tiny_queries(cfg, 3, 4);
  TokenField tokens = tiny_tokens(cfg, 4);
  DecoderOutput s = run_decoder(DecoderKind::Standard, qs, tokens, store, cfg);
  DecoderOutput u = run_decoder(DecoderKind::NoSelfAttention, qs, tokens, store, cfg);
  REQUIRE(s.layers.size() == u.layers.size());
  for (std::size_t l = 0; l < s.layers.size(); ++l)
    CHECK(s.layers[l].data() == u.layers[l].data());
}

TEST_CASE("mutating a shared cross-attention weight changes both decoders identically") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 5);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".sa.o.w");
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".sa.o.b");
  }
  QuerySet qs = tiny_queries(cfg, 6, 3);
  TokenField tokens = tiny_tokens(cfg, 7);

  Tensor shared = store.get("u_decoder.layer0.ca.v.w");  // via alias
  shared.data()[5] += 0.37;
  DecoderOutput s = run_decoder(DecoderKind::Standard, qs, tokens, store, cfg);
  DecoderOutput u = run_decoder(DecoderKind::NoSelfAttention, qs, tokens, store, cfg);
  CHECK(s.layers.back().data() == u.layers.back().data());
}

TEST_CASE("U-decoder queries are independent") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 8);
  QuerySet qs = tiny_queries(cfg, 9, 4);
  TokenField tokens = tiny_tokens(cfg, 10);
  DecoderOutput base = run_decoder(DecoderKind::NoSelfAttention, qs, tokens, store, cfg);

  QuerySet perturbed = qs;
  perturbed.embeddings = Tensor::from_data(qs.embeddings.shape(), qs.embeddings.data());
  for (std::size_t c = 0; c < cfg.channels; ++c)
    perturbed.embeddings.data()[2 * cfg.channels + c] += 1.5;  // modify query 2 only
  DecoderOutput mod = run_decoder(DecoderKind::NoSelfAttention, perturbed, tokens, store, cfg);

  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    for (std::size_t i : {0u, 1u, 3u}) {
      for (std::size_t c = 0; c < cfg.channels; ++c)
        CHECK(base.layers[l].at(i, c) == mod.layers[l].at(i, c));
    }
  }
}

TEST_CASE("S-decoder forward is permutation-equivariant") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 11);
  const std::size_t n = 4;
  QuerySet qs = tiny_queries(cfg, 12, n);
  TokenField tokens = tiny_tokens(cfg, 13);
  DecoderOutput base = run_decoder(DecoderKind::Standard, qs, tokens, store, cfg);

  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  QuerySet pq;
  pq.embeddings = Tensor::zeros({n, cfg.channels});
  pq.references_t = Tensor::zeros({n, 3});
  pq.meta = qs.meta;
  for (std::size_t i = 0; i < n; ++i) {
    pq.references.push_back(qs.references[perm[i]]);
    for (std::size_t c = 0; c < cfg.channels; ++c)
      pq.embeddings.data()[i * cfg.channels + c] = qs.embeddings.at(perm[i], c);
    for (std::size_t d = 0; d < 3; ++d)
      pq.references_t.data()[i * 3 + d] = qs.references_t.at(perm[i], d);
  }
  DecoderOutput permuted = run_decoder(DecoderKind::Standard, pq, tokens, store, cfg);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cfg.channels; ++c)
      CHECK(permuted.layers.back().at(i, c) ==
            doctest::Approx(base.layers.back().at(perm[i], c)).epsilon(1e-12));
}

TEST_CASE("with one token the cross-attention output ignores the query embedding") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 14);
  // kill the FFN so the block output is e + CA(e)
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".ffn.fc2.w");
    zero_param(store, "s_decoder.layer" + std::to_string(l) + ".ffn.fc2.b");
  }
  TokenField one_token = tiny_tokens(cfg, 15, 1);
  QuerySet a = tiny_queries(cfg, 16, 1);
  QuerySet b = tiny_queries(cfg, 17, 1);
  b.references = a.references;  // same reference, different embedding
  b.references_t = a.references_t;

  Tensor ra = run_decoder(DecoderKind::NoSelfAttention, a, one_token, store, cfg).layers[0];
  Tensor rb = run_decoder(DecoderKind::NoSelfAttention, b, one_token, store, cfg).layers[0];
  // out = e + CA where CA = Wo * v(token), the softmax weight being 1
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    const double ca_a = ra.at(0, c) - a.embeddings.at(0, c);
    const double ca_b = rb.at(0, c) - b.embeddings.at(0, c);
    CHECK(ca_a == doctest::Approx(ca_b).epsilon(1e-12));
  }
}

TEST_CASE("zero FFN and zero CA output projection make the U block an identity map") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 18);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "s_decoder.layer" + std::to_string(l);
    zero_param(store, p + ".ca.o.w");
    zero_param(store, p + ".ca.o.b");
    zero_param(store, p + ".ffn.fc2.w");
    zero_param(store, p + ".ffn.fc2.b");
  }
  QuerySet qs = tiny_queries(cfg, 19, 3);
  TokenField tokens = tiny_tokens(cfg, 20);
  DecoderOutput u = run_decoder(DecoderKind::NoSelfAttention, qs, tokens, store, cfg);
  for (const Tensor& layer : u.layers)
    for (std::size_t i = 0; i < layer.numel(); ++i)
      CHECK(layer.at(i) == qs.embeddings.at(i));
}

TEST_CASE("predict head behaviors") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 21);
  QuerySet qs = tiny_queries(cfg, 22, 3);

  SUBCASE("zero offset head leaves centers at the references") {
    zero_param(store, "predictor.offset.fc2.w");
    zero_param(store, "predictor.offset.fc2.b");
    Prediction p = predict(qs.embeddings, qs.references_t, store, cfg);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t d = 0; d < 3; ++d)
        CHECK(p.center.at(i, d) == qs.references_t.at(i, d));
  }
  SUBCASE("zero size head yields unit boxes") {
    zero_param(store, "predictor.size.fc2.w");
    zero_param(store, "predictor.size.fc2.b");
    Prediction p = predict(qs.embeddings, qs.references_t, store, cfg);
    Box3D b = p.box_at(1);
    CHECK(b.size[0] == 1.0);
    CHECK(b.size[1] == 1.0);
    CHECK(b.size[2] == 1.0);
  }
  SUBCASE("yaw decodes from the regressed sin/cos pair") {
    zero_param(store, "predictor.yaw.fc2.w");
    Tensor bias = store.get("predictor.yaw.fc2.b");
    bias.data() = {0.0, 1.0};  // (sin, cos) = (0, 1)
    Prediction p = predict(qs.embeddings, qs.references_t, store, cfg);
    CHECK(p.box_at(0).yaw == doctest::Approx(0.0));
    bias.data() = {1.0, 0.0};  // (sin, cos) = (1, 0)
    Prediction p2 = predict(qs.embeddings, qs.references_t, store, cfg);
    CHECK(p2.box_at(0).yaw == doctest::Approx(M_PI / 2));
  }
  SUBCASE("class probabilities live strictly inside (0,1)") {
    Prediction p = predict(qs.embeddings, qs.references_t, store, cfg);
    for (double v : p.class_probs.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("refine_references replaces references by predicted centers") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 23);
  QuerySet qs = tiny_queries(cfg, 24, 3);
  Prediction p = predict(qs.embeddings, qs.references_t, store, cfg);
  std::vector<Box3D> boxes;
  for (std::size_t i = 0; i < 3; ++i) boxes.push_back(p.box_at(i));

  refine_references(qs, boxes);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 3; ++d) CHECK(qs.references[i][d] == boxes[i].center[d]);

  boxes.pop_back();
  CHECK_THROWS_AS(refine_references(qs, boxes), ContractError);
}

TEST_CASE("run_decoder rejects an empty token field") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 25);
  QuerySet qs = tiny_queries(cfg, 26, 2);
  TokenField empty;
  empty.tokens = Tensor::zeros({0, cfg.channels});
  CHECK_THROWS_AS(run_decoder(DecoderKind::Standard, qs, empty, store, cfg), ContractError);
}

TEST_CASE("shared parameters stay byte-equal through optimizer steps") {
  ModelConfig cfg = tiny_cfg();
  ParamStore store;
  build_model_params(store, cfg, 27);
  OptimConfig ocfg;
  ocfg.total_steps = 10;
  AdamW opt(ocfg);

  QuerySet qs = tiny_queries(cfg, 28, 3);
  TokenField tokens = tiny_tokens(cfg, 29);
  for (int s = 0; s < 3; ++s) {
    store.zero_grads();
    DecoderOutput u = run_decoder(DecoderKind::NoSelfAttention, qs, tokens, store, cfg);
    DecoderOutput sdec = run_decoder(DecoderKind::Standard, qs, tokens, store, cfg);
    Tensor loss = add(reduce_sum(mul(u.layers.back(), u.layers.back())),
                      reduce_sum(mul(sdec.layers.back(), sdec.layers.back())));
    backward(loss);
    opt.step(store);
  }
  CHECK(store.get("u_decoder.layer0.ca.q.w").data() ==
        store.get("s_decoder.layer0.ca.q.w").data());
}
