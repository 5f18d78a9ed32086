#include <cmath>
#include <vector>

#include "doctest.h"
#include "hyla/gradcheck.hpp"
#include "hyla/tensor.hpp"
#include "reference_ops.hpp"

using namespace hyla;

TEST_CASE("contract matches hand matmul and identity") {
  Tape tp;
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = contract(tp, a, b, "ik,kj->ij");
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c[0] == doctest::Approx(58).epsilon(1e-14));
  CHECK(c[1] == doctest::Approx(64).epsilon(1e-14));
  CHECK(c[2] == doctest::Approx(139).epsilon(1e-14));
  CHECK(c[3] == doctest::Approx(154).epsilon(1e-14));

  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor same = contract(tp, a, eye, "ik,kj->ij");
  for (size_t i = 0; i < a.size(); ++i) CHECK(same[i] == doctest::Approx(a[i]).epsilon(1e-15));
}

TEST_CASE("contract agrees with the loop oracle on batched attention shapes") {
  Rng rng(42);
  Tensor q = Tensor::normal({2, 3, 4}, rng);  // H,T,D
  Tensor k = Tensor::normal({2, 3, 4}, rng);
  Tape tp;
  Tensor s = contract(tp, q, k, "hqd,hkd->hqk");
  auto ref = refops::contract(q, k, "hqd,hkd->hqk");
  REQUIRE(s.size() == ref.size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(s[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("contract agrees with the loop oracle across layout variants") {
  // covers trans / no-trans operand arrangements and permuted outputs
  struct Case {
    Shape a, b;
    const char* spec;
  };
  std::vector<Case> cases = {
      {{3, 4}, {4, 5}, "mk,kn->mn"},
      {{4, 3}, {4, 5}, "km,kn->mn"},
      {{3, 4}, {5, 4}, "mk,nk->mn"},
      {{3, 4}, {4, 5}, "mk,kn->nm"},
      {{2, 3, 4}, {2, 4, 5}, "bmk,bkn->bmn"},
      {{2, 5, 3, 4}, {2, 5, 4}, "bqhc,bkc->bhqk"},
      {{2, 3, 5}, {4, 5}, "bqe,ce->bqc"},
      {{2, 4, 3, 5}, {2, 4, 6, 5}, "bhqc,bhkc->bhqk"},
      {{2, 4, 6, 5}, {2, 6, 5}, "bhqc,bqc->bhq"},
      {{3, 2, 4}, {4, 5, 3}, "abc,cda->bd"},
      {{4}, {4}, "i,i->"},
      {{3}, {4}, "i,j->ij"},
  };
  Rng rng(7);
  for (const auto& cs : cases) {
    Tensor a = Tensor::normal(cs.a, rng);
    Tensor b = Tensor::normal(cs.b, rng);
    Tape tp;
    Tensor out = contract(tp, a, b, cs.spec);
    Shape ref_shape;
    auto ref = refops::contract(a, b, cs.spec, &ref_shape);
    REQUIRE(out.shape() == ref_shape);
    for (size_t i = 0; i < ref.size(); ++i)
      CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("contract rejects malformed specs") {
  Tape tp;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(contract(tp, a, b, "ik,kj->iq"), std::invalid_argument);  // unknown out label
  CHECK_THROWS_AS(contract(tp, a, b, "ii,kj->ij"), std::invalid_argument);  // repeated label
  CHECK_THROWS_AS(contract(tp, a, b, "ik,lj->ij"), std::invalid_argument);  // lhs-only label k
  CHECK_THROWS_AS(contract(tp, a, b, "ikj->ij"), std::invalid_argument);    // malformed
  Tensor c = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(contract(tp, a, c, "ik,kj->ij"), std::invalid_argument);  // extent mismatch
}

TEST_CASE("contract backward matches finite differences") {
  Rng rng(3);
  Tensor a = Tensor::normal({2, 3, 4}, rng);
  Tensor b = Tensor::normal({2, 4, 5}, rng);
  double err = grad_check(
      [&](Tape& tp) {
        Tensor c = contract(tp, a, b, "bmk,bkn->bnm");
        return reduce_sum_all(tp, mul(tp, c, c));
      },
      {a, b});
  CHECK(err < 1e-7);
}

TEST_CASE("softmax basics") {
  Tape tp;
  Tensor x = Tensor::from_data({2}, {0, 0});
  Tensor y = softmax(tp, x, 0);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-14));

  Tensor big = Tensor::from_data({2}, {1000, 0});
  Tensor yb = softmax(tp, big, 0);
  CHECK(yb[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(yb[1] == doctest::Approx(0.0).epsilon(1e-12));

  Tensor v = Tensor::from_data({3}, {1, 2, 3});
  Tensor yv = softmax(tp, v, 0);
  // exp(1,2,3)/sum
  CHECK(yv[0] == doctest::Approx(0.09003057317038046).epsilon(1e-10));
  CHECK(yv[1] == doctest::Approx(0.24472847105479767).epsilon(1e-10));
  CHECK(yv[2] == doctest::Approx(0.66524095577482187).epsilon(1e-10));
}

TEST_CASE("softmax sums to one along its axis for random input") {
  Rng rng(11);
  Tensor x = Tensor::normal({3, 5, 4}, rng, 10.0);
  Tape tp;
  Tensor y = softmax(tp, x, 1);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 5; ++j) sum += y[static_cast<size_t>((o * 5 + j) * 4 + i)];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      for (int j = 0; j < 5; ++j) CHECK(y[static_cast<size_t>((o * 5 + j) * 4 + i)] >= 0.0);
    }
}

TEST_CASE("rms_norm values and invariants") {
  Tape tp;
  Tensor c = Tensor::from_data({2}, {0.7, 0.7});
  Tensor yc = rms_norm(tp, c, 0);
  CHECK(yc[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(yc[1] == doctest::Approx(1.0).epsilon(1e-12));

  Tensor v = Tensor::from_data({2}, {3, 4});
  Tensor yv = rms_norm(tp, v, 0);
  CHECK(yv[0] == doctest::Approx(0.848528137423857).epsilon(1e-10));
  CHECK(yv[1] == doctest::Approx(1.131370849898476).epsilon(1e-10));

  Tensor z = Tensor::from_data({2}, {0, 0});
  Tensor yz = rms_norm(tp, z, 0);
  CHECK(yz[0] == 0.0);
  CHECK(yz[1] == 0.0);

  // RMS exactly 1 on random nonzero slices
  Rng rng(5);
  Tensor x = Tensor::normal({4, 7, 3}, rng);
  Tensor y = rms_norm(tp, x, 1);
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 3; ++i) {
      double ms = 0.0;
      for (int j = 0; j < 7; ++j) {
        double val = y[static_cast<size_t>((o * 7 + j) * 3 + i)];
        ms += val * val;
      }
      CHECK(std::sqrt(ms / 7.0) == doctest::Approx(1.0).epsilon(1e-10));
    }
}

TEST_CASE("layer_norm zero-variance guard") {
  Tape tp;
  Tensor c = Tensor::full({5}, 3.25);
  Tensor y = layer_norm(tp, c, 0);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("relu and one_hot definitions") {
  Tape tp;
  Tensor x = Tensor::from_data({2}, {-1, 2});
  Tensor y = relu(tp, x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 2.0);

  Tensor oh = Tensor::one_hot(3, 8);
  for (int i = 0; i < 8; ++i) CHECK(oh[static_cast<size_t>(i)] == (i == 3 ? 1.0 : 0.0));
  CHECK_THROWS_AS(Tensor::one_hot(8, 8), std::invalid_argument);
}

TEST_CASE("losses") {
  Tape tp;
  Tensor x = Tensor::from_data({3}, {0.3, -1.5, 2.0});
  CHECK(mse(tp, x, x).item() == 0.0);

  Tensor p = Tensor::from_data({2}, {1, 2});
  Tensor t = Tensor::from_data({2}, {0, 0});
  CHECK(mse(tp, p, t).item() == doctest::Approx(2.5).epsilon(1e-14));

  Tensor uniform_logits = Tensor::full({8}, 0.42);
  for (int c = 0; c < 8; ++c)
    CHECK(cross_entropy_logits(tp, uniform_logits, c).item() ==
          doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy_logits(tp, uniform_logits, 9), std::invalid_argument);
}

TEST_CASE("backward: analytic toy cases") {
  {
    Tape tp;
    Tensor x = Tensor::from_data({}, {3.0}, true);
    Tensor y = mul(tp, x, x);
    tp.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
  }
  {
    Tape tp;
    Tensor x = Tensor::from_data({2}, {-1, 2}, true);
    Tensor loss = reduce_sum_all(tp, relu(tp, x));
    tp.backward(loss);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
  }
  {
    // non-scalar loss rejected
    Tape tp;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = relu(tp, x);
    CHECK_THROWS_AS(tp.backward(y), std::invalid_argument);
  }
}

TEST_CASE("backward is idempotent across repeated calls") {
  Tape tp;
  Tensor x = Tensor::from_data({3}, {1, -2, 3}, true);
  Tensor loss = reduce_sum_all(tp, mul(tp, x, x));
  tp.backward(loss);
  auto g1 = x.grad().values();
  tp.backward(loss);
  auto g2 = x.grad().values();
  CHECK(g1 == g2);
}

TEST_CASE("grad_check: linear map is exact to roundoff") {
  Rng rng(13);
  Tensor w = Tensor::normal({4, 3}, rng);
  Tensor x = Tensor::normal({3}, rng);
  double err = grad_check(
      [&](Tape& tp) {
        Tensor y = contract(tp, w, x, "ij,j->i");
        return reduce_sum_all(tp, y);
      },
      {w, x}, 1e-4);
  CHECK(err <= 1e-9);
}

TEST_CASE("grad_check: softmax cross-entropy composite") {
  Rng rng(17);
  Tensor w = Tensor::normal({6, 4}, rng);
  Tensor x = Tensor::normal({4}, rng);
  double err = grad_check(
      [&](Tape& tp) {
        Tensor logits = contract(tp, w, x, "cj,j->c");
        return cross_entropy_logits(tp, logits, 2);
      },
      {w, x});
  CHECK(err <= 1e-5);
}

TEST_CASE("grad_check: every differentiable op on random shapes") {
  Rng rng(23);
  Tensor a = Tensor::normal({3, 4, 2}, rng);
  Tensor b = Tensor::normal({3, 4, 2}, rng);
  Tensor row = Tensor::normal({4, 2}, rng);
  Tensor mask = Tensor::zeros({3, 4, 2});
  for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;

  auto scalarize = [](Tape& tp, Tensor t) {
    // square then sum so every coordinate matters
    return reduce_sum_all(tp, mul(tp, t, t));
  };
  // Normalizers keep sum-of-squares (nearly) constant along the normalized
  // axis, so weight them asymmetrically instead.
  Tensor w = Tensor::normal({3, 4, 2}, rng);
  auto weighted = [&](Tape& tp, Tensor t) { return reduce_sum_all(tp, mul(tp, t, w)); };

  std::vector<std::pair<const char*, std::function<Tensor(Tape&)>>> cases = {
      {"add", [&](Tape& tp) { return scalarize(tp, add(tp, a, b)); }},
      {"sub", [&](Tape& tp) { return scalarize(tp, sub(tp, a, b)); }},
      {"mul", [&](Tape& tp) { return scalarize(tp, mul(tp, a, b)); }},
      {"scale", [&](Tape& tp) { return scalarize(tp, scale(tp, a, -1.7)); }},
      {"gelu", [&](Tape& tp) { return scalarize(tp, gelu(tp, a)); }},
      {"add_rowwise", [&](Tape& tp) { return scalarize(tp, add_rowwise(tp, a, row)); }},
      {"mul_rowwise", [&](Tape& tp) { return scalarize(tp, mul_rowwise(tp, a, row)); }},
      {"mask_fill", [&](Tape& tp) { return scalarize(tp, mask_fill(tp, a, mask, -3.0)); }},
      {"reshape", [&](Tape& tp) { return scalarize(tp, reshape(tp, a, {6, 4})); }},
      {"transpose", [&](Tape& tp) { return scalarize(tp, transpose(tp, a, {2, 0, 1})); }},
      {"slice", [&](Tape& tp) { return scalarize(tp, slice(tp, a, 1, 1, 2)); }},
      {"concat", [&](Tape& tp) { return scalarize(tp, concat(tp, {a, b}, 1)); }},
      {"reduce_sum", [&](Tape& tp) { return scalarize(tp, reduce_sum(tp, a, 1)); }},
      {"reduce_mean", [&](Tape& tp) { return scalarize(tp, reduce_mean(tp, a, 0)); }},
      {"softmax", [&](Tape& tp) { return weighted(tp, softmax(tp, a, 1)); }},
      {"rms_norm", [&](Tape& tp) { return weighted(tp, rms_norm(tp, a, 1)); }},
      {"layer_norm", [&](Tape& tp) { return weighted(tp, layer_norm(tp, a, 1)); }},
      {"mse", [&](Tape& tp) { return mse(tp, a, b); }},
      {"mean_all", [&](Tape& tp) { return reduce_mean_all(tp, gelu(tp, a)); }},
  };
  for (auto& [name, f] : cases) {
    INFO("op: " << std::string(name));
    double err = grad_check(f, {a, b, row}, 1e-5, 25);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("matmul precision mode: f32 is close, f64 is default") {
  CHECK(matmul_precision() == MatmulPrecision::f64);
  Rng rng(29);
  Tensor a = Tensor::normal({8, 16}, rng);
  Tensor b = Tensor::normal({16, 8}, rng);
  Tape tp;
  Tensor c64 = contract(tp, a, b, "ik,kj->ij");
  set_matmul_precision(MatmulPrecision::f32);
  Tensor c32 = contract(tp, a, b, "ik,kj->ij");
  set_matmul_precision(MatmulPrecision::f64);
  for (size_t i = 0; i < c64.size(); ++i)
    CHECK(c32[i] == doctest::Approx(c64[i]).epsilon(1e-5));
}
