#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "hyla/io.hpp"
#include "hyla/train.hpp"

using namespace hyla;

namespace {

TrainConfig tiny_fuzzy_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.task.kind = TaskConfig::Kind::fuzzy;
  cfg.task.fuzzy_context = 16;
  cfg.task.split_seed = 11;
  cfg.model.num_layers = 2;
  cfg.model.emb_dim = 32;
  cfg.model.kqv_dim = 8;
  cfg.model.mlp_dim = 64;
  cfg.model.num_heads = 4;
  cfg.base_lr = 2e-3;
  cfg.weight_decay = 0.03;
  cfg.warmup_steps = 50;
  cfg.total_steps = 500;
  cfg.batch_size = 16;
  cfg.eval_every = 1000;  // beyond total: no mid-run evals
  cfg.eval_batches = 2;
  cfg.seed = seed;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("lr_at: warmup endpoints, cosine floor, monotone decay") {
  TrainConfig cfg;
  cfg.base_lr = 3e-3;
  cfg.warmup_steps = 100;
  cfg.total_steps = 1000;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(100, cfg) == doctest::Approx(3e-3).epsilon(1e-15));
  CHECK(lr_at(1000, cfg) == doctest::Approx(0.1 * 3e-3).epsilon(1e-12));
  // continuous at the warmup boundary, non-increasing afterwards
  CHECK(lr_at(99, cfg) == doctest::Approx(3e-3 * 99.0 / 100.0).epsilon(1e-12));
  double prev = lr_at(100, cfg);
  for (long s = 101; s <= 1000; ++s) {
    double cur = lr_at(s, cfg);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }
  CHECK_THROWS_AS(lr_at(1001, cfg), std::invalid_argument);
}

TEST_CASE("adamw: fixed point, decay exemption, hand-stepped reference") {
  // zero grads, zero decay: parameters unchanged
  {
    Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    Tensor b = Tensor::from_data({2}, {5, 6}, true);
    std::vector<NamedParam> params = {{"w", w, true}, {"b", b, false}};
    for (auto& p : params) p.tensor.zero_grad();
    OptState st = OptState::init(params);
    for (int i = 0; i < 3; ++i) adamw_step(params, st, 1e-3, 0.0);
    CHECK(w.values() == std::vector<double>{1, 2, 3, 4});
    CHECK(b.values() == std::vector<double>{5, 6});
  }
  // zero grads with decay: weights shrink by (1 - lr*wd) per step, biases fixed
  {
    Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
    Tensor b = Tensor::from_data({1}, {0.5}, true);
    std::vector<NamedParam> params = {{"w", w, true}, {"b", b, false}};
    for (auto& p : params) p.tensor.zero_grad();
    OptState st = OptState::init(params);
    double lr = 1e-2, wd = 0.1;
    adamw_step(params, st, lr, wd);
    adamw_step(params, st, lr, wd);
    double f = (1.0 - lr * wd) * (1.0 - lr * wd);
    CHECK(w[0] == doctest::Approx(1.0 * f).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(-2.0 * f).epsilon(1e-12));
    CHECK(b[0] == 0.5);
  }
  // single scalar with constant gradient 1: match a hand-stepped trace
  {
    Tensor x = Tensor::from_data({1}, {0.0}, true);
    std::vector<NamedParam> params = {{"x", x, false}};
    OptState st = OptState::init(params);
    double m = 0, v = 0, ref = 0, lr = 1e-2;
    for (int t = 1; t <= 5; ++t) {
      x.impl()->grad.assign(1, 1.0);
      adamw_step(params, st, lr, 0.0);
      m = kAdamBeta1 * m + (1 - kAdamBeta1) * 1.0;
      v = kAdamBeta2 * v + (1 - kAdamBeta2) * 1.0;
      double mhat = m / (1 - std::pow(kAdamBeta1, t));
      double vhat = v / (1 - std::pow(kAdamBeta2, t));
      ref -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
      CHECK(x[0] == doctest::Approx(ref).epsilon(1e-12));
    }
    // first step moves by about -lr
    CHECK(std::fabs(ref + 5 * lr) < 1e-3);
  }
}

TEST_CASE("make_batch: shapes, split audit, determinism") {
  TaskConfig tc;
  tc.kind = TaskConfig::Kind::fuzzy;
  tc.fuzzy_context = 8;
  tc.split_seed = 3;
  TaskData task = TaskData::resolve(tc);
  Rng rng(5);
  Batch b = make_batch(task, "ood", 6, rng);
  CHECK(b.tokens.shape() == Shape{6, 9, 5});
  CHECK(b.fuzzy_targets.size() == 6);
  // audited: OOD batches only ever draw OOD specs
  std::set<std::vector<int>> ood_set;
  for (auto& s : task.fuzzy_splits.ood) ood_set.insert(s.terms);
  for (auto& s : b.fuzzy_specs) CHECK(ood_set.count(s.terms) == 1);

  Rng r1(7), r2(7);
  Batch b1 = make_batch(task, "train", 4, r1);
  Batch b2 = make_batch(task, "train", 4, r2);
  CHECK(b1.tokens.values() == b2.tokens.values());
  CHECK(b1.fuzzy_targets == b2.fuzzy_targets);

  TaskConfig sc;
  sc.kind = TaskConfig::Kind::sraven;
  TaskData stask = TaskData::resolve(sc);
  Rng rs(9);
  Batch sb = make_batch(stask, "train", 3, rs);
  CHECK(sb.tokens.shape() == Shape{3, 36, 8});
  CHECK(sb.sraven_targets.size() == 3);
  std::set<sraven::Combo> train_set(stask.sraven_train.begin(), stask.sraven_train.end());
  for (auto& inst : sb.sraven_instances) CHECK(train_set.count(inst.combo) == 1);
}

TEST_CASE("uniform random sraven guessing hits the exact-match chance rate") {
  // P(all 4 features correct) = 8^-4, verified by simulation
  Rng rng(13);
  int hits = 0, n = 400000;
  for (int i = 0; i < n; ++i) {
    std::vector<int> pred(4), target(4);
    for (int k = 0; k < 4; ++k) {
      pred[static_cast<size_t>(k)] = rng.uniform_int(8);
      target[static_cast<size_t>(k)] = rng.uniform_int(8);
    }
    if (sraven::exact_match(pred, target)) ++hits;
  }
  double rate = static_cast<double>(hits) / n;
  double expect = std::pow(8.0, -4);  // 0.000244
  CHECK(rate > expect * 0.5);
  CHECK(rate < expect * 2.0);
}

TEST_CASE("train: smoothed loss decreases on the tiny fuzzy config (3 seeds)") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    TrainConfig cfg = tiny_fuzzy_config(seed);
    std::string dir = "test_run_smoke_" + std::to_string(seed);
    TrainResult res = train(cfg, dir);
    // parse the loss column back out of the metrics file
    std::ifstream f(res.metrics_path);
    std::string line;
    std::getline(f, line);  // header
    std::vector<double> losses;
    while (std::getline(f, line)) {
      if (line.find(",train,loss,") == std::string::npos) continue;
      size_t p = line.rfind(',', line.size() - 1);
      size_t q = line.rfind(',', p - 1);
      losses.push_back(std::stod(line.substr(q + 1, p - q - 1)));
    }
    REQUIRE(losses.size() == 500);
    double head = 0, tail = 0;
    for (int i = 0; i < 100; ++i) head += losses[static_cast<size_t>(i)];
    for (int i = 400; i < 500; ++i) tail += losses[static_cast<size_t>(i)];
    INFO("seed " << seed << " head " << head / 100 << " tail " << tail / 100);
    CHECK(tail < head);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("train: identical config and seed give byte-identical metrics") {
  TrainConfig cfg = tiny_fuzzy_config(4);
  cfg.total_steps = 60;
  cfg.warmup_steps = 10;
  cfg.eval_every = 25;
  TrainResult a = train(cfg, "test_run_det_a");
  TrainResult b = train(cfg, "test_run_det_b");
  CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
  // checkpoint round trip: evaluating the stored model reproduces the final metric
  TaskData task = TaskData::resolve(cfg.task);
  Model reloaded = load_checkpoint(a.checkpoint_path);
  Rng root(cfg.seed);
  uint64_t final_seed = root.split(2000000).next_u64();
  double id = evaluate(reloaded, task, "train", cfg.eval_batches, cfg.batch_size, final_seed);
  CHECK(id == a.final_id_metric);
  std::filesystem::remove_all("test_run_det_a");
  std::filesystem::remove_all("test_run_det_b");
}

TEST_CASE("train: non-finite loss aborts with a diagnostic checkpoint") {
  TrainConfig cfg = tiny_fuzzy_config(5);
  cfg.total_steps = 30;
  cfg.warmup_steps = 5;
  cfg.base_lr = 1e6;  // blows up quickly
  CHECK_THROWS_AS(train(cfg, "test_run_nan"), std::runtime_error);
  CHECK(std::filesystem::exists("test_run_nan/checkpoints/diagnostic_nan.ckpt"));
  std::filesystem::remove_all("test_run_nan");
}
