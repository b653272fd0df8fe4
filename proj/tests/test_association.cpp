#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "bevtrack/association.hpp"
#include "bevtrack/decoder.hpp"
#include "bevtrack/gradcheck.hpp"
#include "test_util.hpp"

using namespace bevtrack;
using testutil::random_tensor;

namespace {

ParamStore asso_params(std::uint64_t seed, std::size_t channels = 8) {
  ModelConfig cfg;
  cfg.channels = channels;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn_hidden = channels;
  cfg.object_queries = 2;
  cfg.n_classes = 2;
  ParamStore store;
  build_model_params(store, cfg, seed);
  return store;
}

}  // namespace

TEST_CASE("single-track affinity rows are exactly one") {
  ParamStore params = asso_params(1);
  std::mt19937_64 rng(2);
  Tensor obj = random_tensor({4, 8}, rng);
  Tensor trk = random_tensor({1, 8}, rng);
  AffinityMatrix aff = affinity(obj, trk, params);
  REQUIRE(aff.tracks() == 1);
  for (std::size_t n = 0; n < aff.objects(); ++n) CHECK(aff.probs.at(n, 0) == 1.0);
}

TEST_CASE("affinity rows sum to one within 1e-12") {
  ParamStore params = asso_params(3);
  std::mt19937_64 rng(4);
  Tensor obj = random_tensor({5, 8}, rng, -2, 2);
  Tensor trk = random_tensor({3, 8}, rng, -2, 2);
  AffinityMatrix aff = affinity(obj, trk, params);
  for (std::size_t n = 0; n < 5; ++n) {
    double sum = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      CHECK(aff.probs.at(n, m) >= 0.0);
      sum += aff.probs.at(n, m);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("duplicated track columns receive equal probability") {
  ParamStore params = asso_params(5);
  std::mt19937_64 rng(6);
  Tensor obj = random_tensor({3, 8}, rng);
  Tensor one = random_tensor({1, 8}, rng);
  Tensor other = random_tensor({1, 8}, rng);
  std::vector<Tensor> cols = {one, other, one};  // columns 0 and 2 identical
  Tensor trk = concat_rows(cols);
  AffinityMatrix aff = affinity(obj, trk, params);
  for (std::size_t n = 0; n < 3; ++n)
    CHECK(std::abs(aff.probs.at(n, 0) - aff.probs.at(n, 2)) < 1e-12);
}

TEST_CASE("affinity rejects empty sides") {
  ParamStore params = asso_params(7);
  std::mt19937_64 rng(8);
  Tensor obj = random_tensor({2, 8}, rng);
  Tensor none = Tensor::zeros({0, 8});
  CHECK_THROWS_AS(affinity(obj, none, params), ContractError);
  CHECK_THROWS_AS(affinity(none, obj, params), ContractError);
}

TEST_CASE("build_asso_target joins the two assignments on the gt index") {
  SUBCASE("two object queries onto one tracked gt") {
    AssignmentResult obj, trk;
    obj.pairs = {{0, 0}, {0, 1}};  // gt 0 matched to object queries 0 and 1
    trk.pairs = {{0, 0}};          // gt 0 owned by track column 0
    AssoTarget t = build_asso_target(obj, trk, 2);
    CHECK(t.track_col == std::vector<int>{0, 0});
  }
  SUBCASE("no object matches leaves everything masked with zero loss") {
    AssignmentResult obj, trk;
    trk.pairs = {{0, 0}};
    AssoTarget t = build_asso_target(obj, trk, 3);
    CHECK(t.all_masked());

    ParamStore params = asso_params(9);
    std::mt19937_64 rng(10);
    AffinityMatrix aff =
        affinity(random_tensor({3, 8}, rng), random_tensor({1, 8}, rng), params);
    Tensor loss = asso_loss(aff, t);
    CHECK(loss.value() == 0.0);
  }
  SUBCASE("gt without a live track query violates the contract unless allowed") {
    AssignmentResult obj, trk;
    obj.pairs = {{1, 0}};  // gt 1 matched, but only gt 0 has a track
    trk.pairs = {{0, 0}};
    CHECK_THROWS_AS(build_asso_target(obj, trk, 1), ContractError);
    AssoTarget t = build_asso_target(obj, trk, 1, /*allow_unmatched_gt=*/true);
    CHECK(t.all_masked());
  }
  SUBCASE("matches a brute-force relational join on random instances") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n_gt = 1 + rng() % 4;
      const std::size_t n_obj = 1 + rng() % 6;
      AssignmentResult obj, trk;
      for (std::size_t g = 0; g < n_gt; ++g) trk.pairs.emplace_back(g, n_gt - 1 - g);
      std::vector<char> used(n_obj, 0);
      for (std::size_t g = 0; g < n_gt; ++g) {
        const std::size_t j = rng() % n_obj;
        if (!used[j]) {
          obj.pairs.emplace_back(g, j);
          used[j] = 1;
        }
      }
      AssoTarget t = build_asso_target(obj, trk, n_obj);
      // brute force: scan both tables for each object query
      for (std::size_t j = 0; j < n_obj; ++j) {
        int expect = -1;
        for (auto& [g, oj] : obj.pairs) {
          if (oj != j) continue;
          for (auto& [g2, col] : trk.pairs)
            if (g2 == g) expect = static_cast<int>(col);
        }
        CHECK(t.track_col[j] == expect);
      }
    }
  }
}

TEST_CASE("asso_loss values") {
  SUBCASE("near-one-hot row contributes nearly zero") {
    AffinityMatrix aff;
    aff.logits = Tensor::from_data({1, 2}, {50.0, 0.0});
    aff.probs = softmax(aff.logits, 1);
    aff.row_mask = {1};
    AssoTarget t;
    t.track_col = {0};
    CHECK(asso_loss(aff, t).value() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("uniform row over M tracks contributes ln M") {
    const std::size_t m = 5;
    AffinityMatrix aff;
    aff.logits = Tensor::zeros({1, m});
    aff.probs = softmax(aff.logits, 1);
    aff.row_mask = {1};
    AssoTarget t;
    t.track_col = {3};
    CHECK(std::abs(asso_loss(aff, t).value() - std::log(static_cast<double>(m))) < 1e-12);
  }
  SUBCASE("masked and unmasked mix equals the scalar mean of -log p") {
    std::mt19937_64 rng(12);
    Tensor logits = random_tensor({4, 3}, rng, -2, 2, false);
    AffinityMatrix aff;
    aff.logits = logits;
    aff.probs = softmax(logits, 1);
    aff.row_mask = {1, 0, 1, 0};
    AssoTarget t;
    t.track_col = {2, -1, 0, -1};
    double expect = 0.0;
    expect += -std::log(aff.probs.at(0, 2));
    expect += -std::log(aff.probs.at(2, 0));
    expect /= 2.0;
    CHECK(asso_loss(aff, t).value() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("out-of-range target column is a contract violation") {
    AffinityMatrix aff;
    aff.logits = Tensor::zeros({1, 2});
    aff.probs = softmax(aff.logits, 1);
    aff.row_mask = {1};
    AssoTarget t;
    t.track_col = {2};
    CHECK_THROWS_AS(asso_loss(aff, t), ContractError);
  }
}

TEST_CASE("permuting track columns permutes affinity and preserves the loss") {
  ParamStore params = asso_params(13);
  std::mt19937_64 rng(14);
  Tensor obj = random_tensor({3, 8}, rng);
  Tensor trk = random_tensor({4, 8}, rng);
  AffinityMatrix aff = affinity(obj, trk, params);

  const std::vector<std::size_t> perm = {2, 0, 3, 1};  // new column -> old row
  std::vector<Tensor> rows;
  for (std::size_t m : perm) rows.push_back(slice_rows(trk, m, m + 1));
  Tensor permuted = concat_rows(rows);
  AffinityMatrix aff_p = affinity(obj, permuted, params);

  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t m = 0; m < 4; ++m)
      CHECK(aff_p.probs.at(n, m) == doctest::Approx(aff.probs.at(n, perm[m])).epsilon(1e-12));

  AssoTarget t;
  t.track_col = {1, -1, 3};
  AssoTarget t_p;
  t_p.track_col = t.track_col;
  for (auto& c : t_p.track_col) {
    if (c < 0) continue;
    for (std::size_t m = 0; m < perm.size(); ++m)
      if (perm[m] == static_cast<std::size_t>(c)) {
        c = static_cast<int>(m);
        break;
      }
  }
  CHECK(asso_loss(aff, t).value() ==
        doctest::Approx(asso_loss(aff_p, t_p).value()).epsilon(1e-12));
}

TEST_CASE("gradients through the association head match finite differences") {
  ParamStore params = asso_params(15);
  std::mt19937_64 rng(16);
  Tensor obj = random_tensor({3, 8}, rng);
  Tensor trk = random_tensor({2, 8}, rng);
  AssoTarget t;
  t.track_col = {1, -1, 0};
  auto make_loss = [&] {
    AffinityMatrix aff = affinity(obj, trk, params);
    return asso_loss(aff, t);
  };
  std::vector<std::pair<std::string, Tensor>> inputs = {{"obj", obj}, {"trk", trk}};
  for (const char* n : {"asso.ffn.fc1.w", "asso.ffn.fc1.b", "asso.ffn.fc2.w", "asso.mlp.fc1.w",
                        "asso.mlp.fc2.w", "asso.mlp.fc2.b"})
    inputs.emplace_back(n, params.get(n));
  auto rep = finite_diff_check(make_loss, inputs);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("the equation-variant applies the FFN to track embeddings instead") {
  ParamStore params = asso_params(17);
  std::mt19937_64 rng(18);
  Tensor obj = random_tensor({2, 8}, rng);
  Tensor trk = random_tensor({2, 8}, rng);
  AffinityMatrix text_reading = affinity(obj, trk, params, false);
  AffinityMatrix eq_reading = affinity(obj, trk, params, true);
  // both are valid row-stochastic matrices but generally differ
  bool any_diff = false;
  for (std::size_t i = 0; i < 4; ++i)
    if (std::abs(text_reading.probs.at(i) - eq_reading.probs.at(i)) > 1e-9) any_diff = true;
  CHECK(any_diff);
}
