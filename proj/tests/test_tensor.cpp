#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "bevtrack/gradcheck.hpp"
#include "bevtrack/tensor.hpp"
#include "test_util.hpp"

using namespace bevtrack;
using testutil::random_tensor;

TEST_CASE("matmul identity and zero cases") {
  Tensor b = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor r = matmul(eye, b);
  for (std::size_t i = 0; i < 6; ++i) CHECK(r.at(i) == b.at(i));

  Tensor zero = Tensor::zeros({3, 3});
  Tensor z = matmul(zero, b);
  for (std::size_t i = 0; i < 6; ++i) CHECK(z.at(i) == 0.0);
}

TEST_CASE("matmul matches naive triple loop") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({4, 5}, rng, -2, 2, false);
  Tensor b = random_tensor({5, 3}, rng, -2, 2, false);
  Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("matmul shape mismatch raises") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ContractError);
}

TEST_CASE("softmax rows") {
  Tensor equal = Tensor::from_data({1, 4}, {2.5, 2.5, 2.5, 2.5});
  Tensor s = softmax(equal, 1);
  for (std::size_t j = 0; j < 4; ++j) CHECK(s.at(0, j) == doctest::Approx(0.25).epsilon(1e-14));

  Tensor dominant = Tensor::from_data({1, 3}, {1e3, 0.0, 0.0});
  Tensor d = softmax(dominant, 1);
  CHECK(d.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.at(0, 1) == doctest::Approx(0.0).epsilon(1e-12));

  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 4}, rng, -3, 3, false);
  Tensor p = softmax(x, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      sum += p.at(i, j);
      CHECK(p.at(i, j) >= 0.0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  // invariance to a constant shift of the logits
  Tensor shifted = Tensor::zeros({3, 4});
  for (std::size_t i = 0; i < 12; ++i) shifted.data()[i] = x.data()[i] + 17.25;
  Tensor p2 = softmax(shifted, 1);
  for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(p2.at(i) - p.at(i)) < 1e-12);
}

TEST_CASE("softmax along axis 0") {
  Tensor x = Tensor::from_data({2, 2}, {0.0, 5.0, 0.0, -5.0});
  Tensor p = softmax(x, 0);
  for (std::size_t j = 0; j < 2; ++j)
    CHECK(std::abs(p.at(0, j) + p.at(1, j) - 1.0) < 1e-12);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Tensor w = Tensor::from_data({2, 3}, {1, -2, 3, 4, -5, 6}, true);
  Tensor loss = reduce_sum(w);
  backward(loss);
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor y = scale(w, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("parameter not in graph keeps zero gradient") {
  Tensor used = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor unused = Tensor::from_data({2}, {3.0, 4.0}, true);
  unused.zero_grad();
  Tensor loss = reduce_sum(mul(used, used));
  backward(loss);
  CHECK(used.grad()[0] == doctest::Approx(2.0));
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("gradient of |Wx|^2 matches finite differences") {
  std::mt19937_64 rng(21);
  Tensor w = random_tensor({4, 3}, rng);
  Tensor x = random_tensor({3, 1}, rng);
  auto make_loss = [&] {
    Tensor y = matmul(w, x);
    return reduce_sum(mul(y, y));
  };
  auto rep = finite_diff_check(make_loss, {{"w", w}, {"x", x}});
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("non-finite op outputs raise") {
  Tensor z = Tensor::from_data({1}, {0.0});
  CHECK_THROWS_AS(log(z), NumericError);
  Tensor big = Tensor::from_data({1}, {1e308});
  CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("no-grad guard suppresses taping") {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  Tensor y = reduce_sum(mul(w, w));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("finite-difference sweep over every differentiable op") {
  for (std::uint64_t seed : {101u, 202u, 303u}) {
    std::mt19937_64 rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor m1 = random_tensor({3, 5}, rng);
    Tensor m2 = random_tensor({5, 4}, rng);
    Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
    Tensor bias = random_tensor({4}, rng, -0.5, 0.5);
    Tensor pos = random_tensor({3, 4}, rng, 0.05, 2.0);  // strictly positive domain
    Tensor vec = random_tensor({4}, rng);
    Tensor bm = random_tensor({2, 4}, rng);

    // weights make the pull on each output entry distinct
    Tensor w1 = random_tensor({3, 4}, rng, -1, 1, false);
    Tensor w2 = random_tensor({4, 3}, rng, -1, 1, false);
    Tensor w34 = random_tensor({3 * 2, 4}, rng, -1, 1, false);

    struct Case {
      const char* name;
      std::function<Tensor()> loss;
      std::vector<std::pair<std::string, Tensor>> inputs;
    };
    std::vector<Case> cases = {
        {"matmul", [&] { return reduce_sum(mul(matmul(m1, m2), w1)); }, {{"m1", m1}, {"m2", m2}}},
        {"transpose", [&] { return reduce_sum(mul(transpose(a), w2)); }, {{"a", a}}},
        {"add", [&] { return reduce_sum(mul(add(a, b), w1)); }, {{"a", a}, {"b", b}}},
        {"sub", [&] { return reduce_sum(mul(sub(a, b), w1)); }, {{"a", a}, {"b", b}}},
        {"mul", [&] { return reduce_sum(mul(mul(a, b), w1)); }, {{"a", a}, {"b", b}}},
        {"scale", [&] { return reduce_sum(mul(scale(a, -2.5), w1)); }, {{"a", a}}},
        {"relu", [&] { return reduce_sum(mul(relu(a), w1)); }, {{"a", a}}},
        {"abs", [&] { return reduce_sum(mul(abs(a), w1)); }, {{"a", a}}},
        {"exp", [&] { return reduce_sum(mul(exp(a), w1)); }, {{"a", a}}},
        {"log", [&] { return reduce_sum(mul(log(pos), w1)); }, {{"pos", pos}}},
        {"sigmoid", [&] { return reduce_sum(mul(sigmoid(a), w1)); }, {{"a", a}}},
        {"log_sigmoid", [&] { return reduce_sum(mul(log_sigmoid(a), w1)); }, {{"a", a}}},
        {"powc", [&] { return reduce_sum(mul(powc(pos, 2.0), w1)); }, {{"pos", pos}}},
        {"softmax", [&] { return reduce_sum(mul(softmax(a, 1), w1)); }, {{"a", a}}},
        {"log_softmax", [&] { return reduce_sum(mul(log_softmax(a, 1), w1)); }, {{"a", a}}},
        {"layer_norm",
         [&] { return reduce_sum(mul(layer_norm(a, gain, bias), w1)); },
         {{"a", a}, {"gain", gain}, {"bias", bias}}},
        {"concat_rows",
         [&] {
           std::vector<Tensor> parts = {a, b};
           return reduce_sum(mul(concat_rows(parts), w34));
         },
         {{"a", a}, {"b", b}}},
        {"slice",
         [&] { return reduce_sum(slice_cols(slice_rows(a, 1, 3), 1, 4)); },
         {{"a", a}}},
        {"gather_rows",
         [&] { return reduce_sum(gather_rows(a, {2, 0, 2})); },
         {{"a", a}}},
        {"gather_entries",
         [&] { return reduce_sum(gather_entries(a, {{0, 1}, {2, 3}, {0, 1}})); },
         {{"a", a}}},
        {"reduce_mean", [&] { return reduce_mean(mul(a, a)); }, {{"a", a}}},
        {"add_rowvec",
         [&] { return reduce_sum(mul(add_rowvec(a, vec), w1)); },
         {{"a", a}, {"vec", vec}}},
        {"pairwise_hadamard",
         [&] { return reduce_sum(mul(pairwise_hadamard(a, bm), w34)); },
         {{"a", a}, {"bm", bm}}},
    };

    for (auto& c : cases) {
      auto rep = finite_diff_check(c.loss, c.inputs);
      INFO("op = ", c.name, " seed = ", seed, " worst = ", rep.worst_entry);
      CHECK(rep.max_rel_err < 1e-5);
    }
  }
}
