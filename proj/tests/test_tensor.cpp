#include <catch2/catch_amalgamated.hpp>

#include "qfs/ops.hpp"
#include "qfs/random.hpp"
#include "qfs/tensor.hpp"

using qfs::Rng;
using Td = qfs::Tensor<double>;

TEST_CASE("shape must match value count") {
  CHECK_THROWS_AS(Td::from({2, 3}, {1.0, 2.0}), qfs::ShapeError);
  Td t = Td::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.dim(0) == 2);
}

TEST_CASE("rng determinism: identical seed, identical draws") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.next_u64() == b.next_u64());
  }
  Rng c(1234), d(1234);
  for (int i = 0; i < 100; ++i) {
    REQUIRE(c.normal() == d.normal());
    REQUIRE(c.uniform() == d.uniform());
  }
  Rng e(1), f(2);
  CHECK(e.next_u64() != f.next_u64());
}

TEST_CASE("rng forked streams are independent and deterministic") {
  Rng root(77);
  Rng s1 = root.fork(0);
  Rng s2 = root.fork(1);
  CHECK(s1.next_u64() != s2.next_u64());
  Rng again = Rng(77).fork(0);
  Rng s1b = Rng(77).fork(0);
  CHECK(again.next_u64() == s1b.next_u64());
}

TEST_CASE("forward values are bit-identical across repeated seeded runs") {
  auto run = [] {
    Rng rng(99);
    Td x = Td::randn({4, 5}, rng);
    Td w = Td::randn({3, 5}, rng);
    Td y = qfs::sigmoid(qfs::matmul_nt(x, w));
    return y.values();
  };
  auto a = run();
  auto b = run();
  REQUIRE(a == b);
}

TEST_CASE("backward of sum gives all-ones") {
  Rng rng(5);
  Td p = Td::randn({3, 4}, rng);
  p.set_requires_grad(true);
  qfs::sum_all(p).backward();
  for (double g : p.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of 0.5*||p||^2 gives p") {
  Rng rng(6);
  Td p = Td::randn({7}, rng);
  p.set_requires_grad(true);
  Td loss = qfs::scale(qfs::sum_all(qfs::mul(p, p)), 0.5);
  loss.backward();
  for (size_t i = 0; i < p.grad().size(); ++i) {
    CHECK(p.grad()[i] == Catch::Approx(p.values()[i]).margin(1e-15));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Td p = Td::ones({2, 2}, true);
  Td y = qfs::scale(p, 2.0);
  CHECK_THROWS_AS(y.backward(), qfs::ShapeError);
}

TEST_CASE("gradients exist for every reachable parameter and match shapes") {
  Rng rng(7);
  Td a = Td::randn({3, 4}, rng, 1.0, true);
  Td b = Td::randn({5, 4}, rng, 1.0, true);
  Td c = Td::randn({5}, rng, 1.0, true);
  Td y = qfs::add_rows(qfs::matmul_nt(a, b), c);
  qfs::sum_all(y).backward();
  REQUIRE(a.grad().size() == static_cast<size_t>(a.numel()));
  REQUIRE(b.grad().size() == static_cast<size_t>(b.numel()));
  REQUIRE(c.grad().size() == static_cast<size_t>(c.numel()));
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Td p = Td::ones({2}, true);
  {
    qfs::NoGradGuard ng;
    Td y = qfs::scale(p, 3.0);
    CHECK_FALSE(y.requires_grad());
  }
  Td y2 = qfs::scale(p, 3.0);
  CHECK(y2.requires_grad());
}

TEST_CASE("detach stops gradient flow") {
  Td p = Td::ones({3}, true);
  Td d = qfs::scale(p, 2.0).detach();
  CHECK_FALSE(d.requires_grad());
  Td y = qfs::sum_all(d);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("frozen tensors never receive gradients") {
  Rng rng(8);
  Td w = Td::randn({4, 4}, rng);  // no grad
  Td x = Td::randn({2, 4}, rng, 1.0, true);
  Td y = qfs::matmul_nt(x, w);
  qfs::sum_all(y).backward();
  CHECK_FALSE(w.has_grad());
  CHECK(x.has_grad());
}
