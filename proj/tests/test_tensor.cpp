#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "smc/tensor.hpp"
#include "testutil.hpp"

using namespace smc;
using smc::testing::finite_diff_check;
using smc::testing::random_tensor;

TEST_CASE("matmul identity and hand-computed cases") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.values()[i] == a.values()[i]);

  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.values()[0] == doctest::Approx(19));
  CHECK(c.values()[1] == doctest::Approx(22));
  CHECK(c.values()[2] == doctest::Approx(43));
  CHECK(c.values()[3] == doctest::Approx(50));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tensor a = Tensor::from_data({2, 3}, std::vector<double>(6, 0.0));
  Tensor b = Tensor::from_data({2, 2}, std::vector<double>(4, 0.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[2, 2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(123);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  auto loss = [&]() {
    Tensor c = matmul(a, b);
    return sum_all(mul(c, c));
  };
  auto res = finite_diff_check(loss, {a, b}, 1e-5, 1e-6);
  CHECK(res.ok);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax uniform, derived and stability cases") {
  Tensor z = Tensor::from_data({4}, {0, 0, 0, 0});
  Tensor s = softmax(z);
  for (auto v : s.values()) CHECK(v == doctest::Approx(0.25));

  Tensor x = Tensor::from_data({4}, {2, 0, 0, 0});
  Tensor sx = softmax(x);
  CHECK(sx.values()[0] == doctest::Approx(0.71123).epsilon(1e-4));
  CHECK(sx.values()[1] == doctest::Approx(0.09626).epsilon(1e-4));
  CHECK(sx.values()[2] == doctest::Approx(0.09626).epsilon(1e-4));
  CHECK(sx.values()[3] == doctest::Approx(0.09626).epsilon(1e-4));

  Tensor big = Tensor::from_data({2}, {1000, 0});
  Tensor sb = softmax(big);
  CHECK(sb.values()[0] == doctest::Approx(1.0));
  CHECK(sb.values()[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {5, 6}, 2.0, false);
  Tensor s = softmax(x);
  for (std::int64_t i = 0; i < 5; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) acc += s.values()[i * 6 + j];
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
  }

  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (auto& v : shifted) v += 3.14159;
  Tensor s2 = softmax(Tensor::from_data({5, 6}, std::move(shifted)));
  CHECK(smc::testing::max_abs_diff(s, s2) < 1e-6);
}

TEST_CASE("softmax over a chosen axis") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor by_rows = softmax(x, 1);
  for (std::int64_t i = 0; i < 2; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 3; ++j) acc += by_rows.values()[i * 3 + j];
    CHECK(acc == doctest::Approx(1.0));
  }
  Tensor by_cols = softmax(x, 0);
  for (std::int64_t j = 0; j < 3; ++j) {
    CHECK(by_cols.values()[j] + by_cols.values()[3 + j] == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(softmax(x, 2), UsageError);
}

TEST_CASE("softmax gradient matches finite differences") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {3, 5});
  Tensor w = random_tensor(rng, {3, 5}, 1.0, false);
  auto loss = [&]() { return sum_all(mul(softmax(x), w)); };
  auto res = finite_diff_check(loss, {x});
  CHECK(res.ok);
}

TEST_CASE("backward: polynomial derivative") {
  Tensor x = Tensor::parameter({1}, {3.0});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = mul(x, x);
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: shared-use accumulation sums contributions") {
  Tensor w = Tensor::parameter({1}, {1.5});
  Tensor a = Tensor::from_data({1}, {2.0});
  Tensor b = Tensor::from_data({1}, {5.0});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = add(mul(w, a), mul(w, b));
    tape.backward(loss);
  }
  CHECK(w.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("gradient accumulation bit-compares against single-use runs") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {4, 4});
  Tensor m1 = random_tensor(rng, {4, 4}, 1.0, false);
  Tensor m2 = random_tensor(rng, {4, 4}, 1.0, false);

  auto run = [&](bool use_first, bool use_second) {
    x.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor loss;
    if (use_first && use_second) {
      loss = add(sum_all(mul(x, m1)), sum_all(mul(x, m2)));
    } else if (use_first) {
      loss = sum_all(mul(x, m1));
    } else {
      loss = sum_all(mul(x, m2));
    }
    tape.backward(loss);
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };

  auto both = run(true, true);
  auto first = run(true, false);
  auto second = run(false, true);
  for (std::size_t i = 0; i < both.size(); ++i) {
    CHECK(both[i] == first[i] + second[i]);  // bit-exact for two uses
  }
}

TEST_CASE("backward usage errors") {
  Tensor x = Tensor::parameter({1}, {1.0});
  CHECK_THROWS_AS(backward(x), UsageError);  // detached leaf

  Tape tape;
  TapeScope scope(tape);
  Tensor y = mul(x, x);
  Tensor z = add(y, y);  // non-scalar is fine; make a 2-element tensor
  Tensor vec = concat_rows({reshape(z, {1, 1}), reshape(y, {1, 1})});
  CHECK_THROWS_AS(tape.backward(vec), UsageError);
}

TEST_CASE("gaussian: degenerate std, determinism, sample statistics") {
  Rng r1(42);
  Tensor zeros = gaussian(r1, {3, 3}, 0.0);
  for (auto v : zeros.values()) CHECK(v == 0.0);

  Rng a(42), b(42);
  Tensor ta = gaussian(a, {64}, 1.0);
  Tensor tb = gaussian(b, {64}, 1.0);
  for (std::size_t i = 0; i < 64; ++i) CHECK(ta.values()[i] == tb.values()[i]);

  Rng s(42);
  Tensor big = gaussian(s, {100000}, 0.1);
  double mean = 0.0;
  for (auto v : big.values()) mean += v;
  mean /= 1e5;
  double var = 0.0;
  for (auto v : big.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 1e5);
  CHECK(sd > 0.098);
  CHECK(sd < 0.102);

  Rng r2(1);
  CHECK_THROWS_AS(gaussian(r2, {2}, -0.1), UsageError);
}

TEST_CASE("full determinism: same seed, bit-identical forward") {
  auto run = [&]() {
    Rng rng(99);
    Tensor x = gaussian(rng, {6, 6}, 1.0);
    Tensor y = softmax(matmul(x, transpose(x)));
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}

TEST_CASE("non-finite results are hard errors") {
  Tensor big = Tensor::from_data({1}, {1e308});
  CHECK_THROWS_AS(mul(big, big), NonFiniteError);
  CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), NonFiniteError);
}

TEST_CASE("masked softmax ignores masked columns; empty row is an error") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 100, 0, 0, -50});
  Mask mask = {1, 1, 0};
  Tensor s = masked_softmax(x, mask);
  CHECK(s.values()[2] == 0.0);
  CHECK(s.values()[5] == 0.0);
  CHECK(s.values()[0] + s.values()[1] == doctest::Approx(1.0));

  // Masked entries may hold arbitrary finite junk without changing output.
  Tensor x2 = Tensor::from_data({2, 3}, {1, 2, -7777, 0, 0, 123456});
  Tensor s2 = masked_softmax(x2, mask);
  CHECK(smc::testing::max_abs_diff(s, s2) == 0.0);

  CHECK_THROWS_AS(masked_softmax(x, Mask{0, 0, 0}), UsageError);
}

TEST_CASE("log_softmax gradient and row normalization") {
  Rng rng(3);
  Tensor x = random_tensor(rng, {4, 5});
  Tensor w = random_tensor(rng, {4, 5}, 1.0, false);
  auto loss = [&]() { return sum_all(mul(log_softmax(x), w)); };
  CHECK(finite_diff_check(loss, {x}).ok);

  Tensor ls = log_softmax(x);
  for (std::int64_t i = 0; i < 4; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) acc += std::exp(ls.values()[i * 5 + j]);
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("indexing ops round-trip gradients") {
  Rng rng(17);
  Tensor x = random_tensor(rng, {6, 3});
  Tensor w = random_tensor(rng, {4, 3}, 1.0, false);
  std::vector<std::int64_t> idx = {5, 0, 0, 2};  // repeated row accumulates
  auto loss = [&]() { return sum_all(mul(gather_rows(x, idx), w)); };
  CHECK(finite_diff_check(loss, {x}).ok);

  Tensor y = random_tensor(rng, {3, 2});
  std::vector<std::int64_t> scatter_idx = {4, 1, 0};
  Tensor w2 = random_tensor(rng, {6, 2}, 1.0, false);
  auto loss2 = [&]() { return sum_all(mul(scatter_rows(y, scatter_idx, 6), w2)); };
  CHECK(finite_diff_check(loss2, {y}).ok);
}

TEST_CASE("row_norms gradient is safe at the origin") {
  Tensor zero = Tensor::parameter({2, 3}, std::vector<double>(6, 0.0));
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum_all(row_norms(zero));
    tape.backward(loss);
  }
  for (auto g : zero.grad()) CHECK(g == 0.0);

  Rng rng(29);
  Tensor x = random_tensor(rng, {3, 4});
  auto loss = [&]() { return sum_all(row_norms(x)); };
  CHECK(finite_diff_check(loss, {x}).ok);
}

TEST_CASE("elementwise and broadcast ops match finite differences") {
  Rng rng(31);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4});
  Tensor s = random_tensor(rng, {3});
  auto loss = [&]() {
    Tensor h = add_bias(x, b);
    h = scale_rows(h, s);
    h = sigmoid(h);
    Tensor t = transpose(h);
    return sum_all(mul(t, t));
  };
  CHECK(finite_diff_check(loss, {x, b, s}).ok);
}

TEST_CASE("random-shape sweep: composite graphs pass the gradient oracle") {
  Rng shape_rng(101);
  for (int trial = 0; trial < 12; ++trial) {
    const auto m = 1 + static_cast<std::int64_t>(shape_rng.next_below(5));
    const auto k = 1 + static_cast<std::int64_t>(shape_rng.next_below(5));
    const auto n = 1 + static_cast<std::int64_t>(shape_rng.next_below(4));
    Rng rng(200 + trial);
    Tensor a = random_tensor(rng, {m, k});
    Tensor b = random_tensor(rng, {k, n});
    Tensor bias = random_tensor(rng, {n});
    Mask mask(static_cast<std::size_t>(n), 1);
    if (n > 1) mask[shape_rng.next_below(static_cast<std::uint64_t>(n))] = 0;
    auto loss = [&]() {
      Tensor h = add_bias(matmul(a, b), bias);
      Tensor s = masked_softmax(h, mask);
      return sum_all(mul(s, h));
    };
    auto res = finite_diff_check(loss, {a, b, bias});
    CHECK(res.ok);
  }
}

TEST_CASE("slicing and concatenation gradients") {
  Rng rng(37);
  Tensor x = random_tensor(rng, {5, 6});
  auto loss = [&]() {
    Tensor top = row_slice(x, 0, 2);
    Tensor bottom = row_slice(x, 2, 5);
    Tensor left = col_slice(x, 0, 3);
    Tensor lt = concat_rows({top, bottom});
    Tensor joined = concat_cols({left, lt});
    return sum_all(mul(joined, joined));
  };
  CHECK(finite_diff_check(loss, {x}).ok);
}
