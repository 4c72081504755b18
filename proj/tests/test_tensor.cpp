#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "msdf/optim.hpp"
#include "msdf/params.hpp"
#include "msdf/tensor.hpp"

using namespace msdf;
using msdf::testing::check_gradients;
using msdf::testing::random_tensor;

TEST_CASE("matmul hand cases") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});

  auto row = Tensor::from({1, 2}, {1, 2});
  auto col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul reports both shapes on mismatch") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3]", msg.find("[2x3]") + 1) != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto w = random_tensor({3, 2}, rng, false);
  auto errs = check_gradients([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  for (double e : errs) CHECK(e < 1e-6);
}

TEST_CASE("matmul_nt and transpose gradients") {
  std::mt19937_64 rng(2);
  auto a = random_tensor({3, 5}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto w = random_tensor({3, 4}, rng, false);
  for (double e : check_gradients([&] { return sum(mul(matmul_nt(a, b), w)); }, {a, b}))
    CHECK(e < 1e-6);
  auto w2 = random_tensor({5, 3}, rng, false);
  for (double e : check_gradients([&] { return sum(mul(transpose(a), w2)); }, {a}))
    CHECK(e < 1e-6);
}

TEST_CASE("softmax examples") {
  auto s = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(s.at(0) == 0.5);
  CHECK(s.at(1) == 0.5);
  auto big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::abs(big.at(0) - 1.0) < 1e-12);
  CHECK(big.at(1) < 1e-12);
}

TEST_CASE("softmax rows sum to one along either axis") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 6}, rng, false, 5.0);
  for (std::size_t axis : {0u, 1u}) {
    auto y = softmax(x, axis);
    const std::size_t outer = axis == 0 ? 6 : 4;
    const std::size_t len = axis == 0 ? 4 : 6;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += axis == 0 ? y.at(j, o) : y.at(o, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax jacobian matches finite differences") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({5}, rng);
  for (std::size_t k = 0; k < 5; ++k) {
    auto pick = Tensor::zeros({5});
    pick.mutable_data()[k] = 1.0;
    auto errs = check_gradients([&] { return sum(mul(softmax(x, 0), pick)); }, {x});
    CHECK(errs[0] < 1e-6);
  }
  auto x2 = random_tensor({3, 4}, rng);
  auto w = random_tensor({3, 4}, rng, false);
  CHECK(check_gradients([&] { return sum(mul(softmax(x2, 0), w)); }, {x2})[0] < 1e-6);
}

TEST_CASE("masked softmax gives masked keys exactly zero") {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<std::uint8_t> keep{1, 0, 1, 0, 0, 0};
  auto y = masked_softmax(x, keep);
  CHECK(y.at(0, 1) == 0.0);
  CHECK(std::abs(y.at(0, 0) + y.at(0, 2) - 1.0) < 1e-12);
  CHECK(y.at(1, 0) == 0.0);
  std::mt19937_64 rng(5);
  auto w = random_tensor({2, 3}, rng, false);
  CHECK(check_gradients([&] { return sum(mul(masked_softmax(x, keep), w)); }, {x})[0] < 1e-6);
}

TEST_CASE("layer norm examples") {
  auto one = Tensor::full({4}, 1.0);
  auto zero = Tensor::zeros({4});
  auto y = layer_norm(Tensor::from({1, 4}, {5, 5, 5, 5}), one, zero);
  for (double v : y.data()) CHECK(v == 0.0);

  auto y2 = layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  CHECK(y2.at(0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y2.at(1) == doctest::Approx(-1.0).epsilon(1e-5));

  std::mt19937_64 rng(6);
  auto x = random_tensor({3, 7}, rng, false, 3.0);
  auto n = layer_norm(x, Tensor::full({7}, 1.0), Tensor::zeros({7}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < 7; ++j) mu += n.at(r, j);
    CHECK(std::abs(mu / 7.0) < 1e-9);
  }
}

TEST_CASE("layer norm gradient") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 6}, rng);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  auto w = random_tensor({3, 6}, rng, false);
  for (double e : check_gradients([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}))
    CHECK(e < 1e-5);
}

TEST_CASE("cross entropy examples") {
  // log(one-hot) with the floor standing in for log 0
  auto lp = Tensor::from({2, 3}, {0, -30, -30, -30, -30, 0});
  std::vector<int> t{0, 2};
  CHECK(cross_entropy_nll(lp, t).item() == 0.0);

  auto uniform = Tensor::full({3, 4}, -std::log(4.0));
  std::vector<int> t2{0, 1, 3};
  CHECK(cross_entropy_nll(uniform, t2).item() == doctest::Approx(1.3862943611198906));

  auto x = Tensor::full({2, 4}, -1.0, true);
  std::vector<int> ignored{-1, -1};
  auto loss = cross_entropy_nll(x, ignored, -1);
  CHECK(loss.item() == 0.0);
  loss.backward();
  CHECK(!x.has_grad());

  std::vector<int> bad{4, 0};
  CHECK_THROWS_AS(cross_entropy_nll(x, bad), IndexError);
}

TEST_CASE("elementwise and shape op gradients") {
  std::mt19937_64 rng(8);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto bias = random_tensor({4}, rng);
  auto s = random_tensor({3, 1}, rng);
  auto w = random_tensor({3, 4}, rng, false);
  auto wide = random_tensor({3, 8}, rng, false);
  auto tall = random_tensor({4, 4}, rng, false);

  auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> ps, double tol = 1e-6) {
    for (double e : check_gradients(f, ps)) CHECK(e < tol);
  };
  check([&] { return sum(mul(add(a, b), w)); }, {a, b});
  check([&] { return sum(mul(sub(a, b), w)); }, {a, b});
  check([&] { return sum(mul(mul(a, b), w)); }, {a, b});
  check([&] { return sum(mul(add_bias(a, bias), w)); }, {a, bias});
  check([&] { return sum(mul(mul_rows(a, s), w)); }, {a, s});
  check([&] { return sum(mul(affine(a, -2.0, 1.0), w)); }, {a});
  check([&] { return sum(mul(sigmoid(a), w)); }, {a});
  check([&] { return sum(mul(gelu(a), w)); }, {a});
  check([&] { return sum(mul(exp(a), w)); }, {a});
  check([&] { return sum(mul(relu(a), w)); }, {a});
  check([&] { return mean(mul(a, w)); }, {a});
  check([&] { return sum(mul(log_softmax(a), w)); }, {a});
  check([&] { return sum(mul(log_clamped(exp(a), 1e-12), w)); }, {a});
  check(
      [&] {
        std::vector<Tensor> parts{a, b};
        return sum(mul(concat_last(parts), wide));
      },
      {a, b});
  check(
      [&] {
        std::vector<Tensor> parts{a, slice_rows(b, 0, 1)};
        return sum(mul(concat_rows(parts), slice_rows(tall, 0, 4)));
      },
      {a, b});
  check([&] { return sum(mul(slice_last(a, 1, 2), slice_last(w, 0, 2))); }, {a});
  check([&] { return sum(mul(slice_rows(a, 1, 2), slice_rows(w, 0, 2))); }, {a});
  check([&] { return sum(mul(reshape(a, {4, 3}), reshape(w, {4, 3}))); }, {a});
}

TEST_CASE("embedding scatters gradients back into repeated rows") {
  auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> ids{2, 0, 2};
  auto e = embedding(table, ids);
  CHECK(e.at(0, 0) == 5.0);
  CHECK(e.at(1, 1) == 2.0);
  sum(e).backward();
  CHECK(table.grad()[4] == 2.0);
  CHECK(table.grad()[0] == 1.0);
  CHECK(table.grad()[2] == 0.0);
  std::vector<int> bad{3};
  CHECK_THROWS_AS(embedding(table, bad), IndexError);
}

TEST_CASE("index_add_cols accumulates repeated ids") {
  auto src = Tensor::from({1, 3}, {0.2, 0.3, 0.5}, true);
  std::vector<int> ids{4, 1, 4};
  auto out = index_add_cols(src, ids, 6);
  CHECK(out.at(0, 4) == doctest::Approx(0.7));
  CHECK(out.at(0, 1) == doctest::Approx(0.3));
  CHECK(out.at(0, 0) == 0.0);
  std::mt19937_64 rng(9);
  auto w = random_tensor({1, 6}, rng, false);
  CHECK(check_gradients([&] { return sum(mul(index_add_cols(src, ids, 6), w)); }, {src})[0] < 1e-6);
  std::vector<int> bad{0, 1, 6};
  CHECK_THROWS_AS(index_add_cols(src, bad, 6), IndexError);
}

TEST_CASE("sigmoid is stable at extreme logits") {
  auto y = sigmoid(Tensor::from({2}, {800.0, -800.0}));
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 0.0);
}

TEST_CASE("non-finite results are rejected") {
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericError);
  CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), NumericError);
}

TEST_CASE("dropout is identity at inference and scales survivors in training") {
  std::mt19937_64 rng(10);
  auto x = Tensor::full({4, 4}, 1.0);
  auto same = dropout(x, 0.5, rng, false);
  CHECK(same.node() == x.node());
  auto d = dropout(x, 0.5, rng, true);
  for (double v : d.data()) CHECK((v == 0.0 || v == 2.0));
}

TEST_CASE("random composed graph matches finite differences end to end") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({3, 4}, rng);
    auto w1 = random_tensor({4, 4}, rng);
    auto w2 = random_tensor({4, 3}, rng);
    auto g = random_tensor({4}, rng);
    auto b = random_tensor({4}, rng);
    std::vector<int> targets{0, 2, 1};
    auto build = [&] {
      auto h = matmul(x, w1);                    // 1
      h = layer_norm(h, g, b);                   // 2
      h = gelu(h);                               // 3
      h = add(h, x);                             // 4
      h = mul(h, sigmoid(h));                    // 5, 6
      auto logits = matmul(h, w2);               // 7
      logits = affine(logits, 0.5, 0.1);         // 8
      auto lp = log_softmax(logits);             // 9
      return cross_entropy_nll(lp, targets);     // 10
    };
    for (double e : check_gradients(build, {x, w1, w2, g, b})) CHECK(e < 1e-4);
  }
}

TEST_CASE("backward visits nodes in reverse topological order") {
  auto a = Tensor::scalar(2.0, true);
  auto b = mul(a, a);
  auto c = add(b, a);
  auto order = topological_order(c);
  REQUIRE(order.size() == 3);
  CHECK(order.front() == a.node());
  CHECK(order.back() == c.node());
  for (std::size_t i = 0; i < order.size(); ++i)
    for (auto& p : order[i]->parents) {
      auto pos = std::find(order.begin(), order.end(), p.get());
      CHECK(pos - order.begin() < static_cast<long>(i));
    }
  c.backward();
  CHECK(a.grad()[0] == 5.0);
}

TEST_CASE("no-grad guard suppresses recording") {
  auto a = Tensor::scalar(1.0, true);
  Tensor b;
  {
    NoGradGuard guard;
    b = mul(a, a);
  }
  CHECK(!b.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("identical inputs give bit-identical outputs") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor({5, 8}, rng);
    auto w = random_tensor({8, 8}, rng);
    auto y = sum(gelu(matmul(x, w)));
    y.backward();
    return std::make_pair(y.item(), std::vector<double>(w.grad().begin(), w.grad().end()));
  };
  CHECK(run() == run());
}

TEST_CASE("adamw first step matches the closed form") {
  auto p = Tensor::from({2}, {1.0, -2.0}, true);
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -0.25;
  AdamW opt({p}, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01});
  opt.step();
  // After one step mhat = g and vhat = g², so the update is lr·(sign(g)·|g|/(|g|+eps) + wd·w).
  CHECK(p.at(0) == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)));
  CHECK(p.at(1) == doctest::Approx(-2.0 - 0.1 * (-0.25 / (0.25 + 1e-8) + 0.01 * -2.0)));
}

TEST_CASE("gradient clipping bounds the global norm") {
  std::mt19937_64 rng(13);
  std::vector<Tensor> ps{random_tensor({3, 3}, rng), random_tensor({4}, rng)};
  for (auto& p : ps) {
    auto g = p.mutable_grad();
    for (auto& v : g) v = 10.0;
  }
  const double before = clip_grad_norm(ps, 1.0);
  CHECK(before > 1.0);
  CHECK(global_grad_norm(ps) <= 1.0 + 1e-9);
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(14);
  ParamList params;
  params.add("a", init_normal({3, 5}, 0.37, rng));
  params.add("b", init_normal({7}, 1e-300, rng));
  Checkpoint ck;
  ck.meta["kind"] = "test";
  ck.add_params(params);
  const auto path = std::filesystem::temp_directory_path() / "msdf_ckpt_test.bin";
  ck.save(path);
  auto loaded = Checkpoint::load(path);
  CHECK(loaded.meta["kind"] == "test");
  ParamList fresh;
  fresh.add("a", init_zeros({3, 5}));
  fresh.add("b", init_zeros({7}));
  loaded.load_into(fresh);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& x = params.items()[i].tensor.data();
    const auto& y = fresh.items()[i].tensor.data();
    CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
  }
  ParamList wrong;
  wrong.add("a", init_zeros({5, 3}));
  CHECK_THROWS(loaded.load_into(wrong));
  std::filesystem::remove(path);
}
