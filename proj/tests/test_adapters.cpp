#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "qfs/adapters.hpp"
#include "qfs/model.hpp"

using qfs::AdapterConfig;
using qfs::AdapterKind;
using qfs::ModelConfig;
using qfs::ParamStore;
using qfs::Rng;
using qfs::Transformer;
using Td = qfs::Tensor<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.max_local_window = 64;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int n) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_int(256));
  return t;
}

}  // namespace

TEST_CASE("lora_apply with B = 0 equals the frozen projection exactly") {
  Rng rng(1);
  Td x = Td::randn({5, 8}, rng);
  Td w = Td::randn({8, 8}, rng);
  qfs::LoraTarget<double> t;
  t.A = Td::randn({3, 8}, rng);
  t.B = Td::zeros({8, 3});
  Td out = qfs::lora_apply(x, w, t, 1.0);
  Td base = qfs::matmul_nt(x, w);
  REQUIRE(out.values() == base.values());
}

TEST_CASE("full-rank lora delta equals a dense delta") {
  Rng rng(2);
  const int d = 6;
  Td x = Td::randn({4, d}, rng);
  Td w = Td::randn({d, d}, rng);
  Td dense = Td::randn({d, d}, rng);  // D
  qfs::LoraTarget<double> t;
  std::vector<double> eye(d * d, 0.0);
  for (int i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  t.A = Td::from({d, d}, eye);  // r = min(d,k)
  t.B = dense;                  // B*A = D
  Td out = qfs::lora_apply(x, w, t, 1.0);
  // oracle: x (W + D)^T
  Td wd = qfs::add(w, dense);
  Td expect = qfs::matmul_nt(x, wd);
  for (size_t i = 0; i < out.values().size(); ++i)
    CHECK(std::abs(out.values()[i] - expect.values()[i]) <= 1e-10);
}

TEST_CASE("lora gradients reach A and B but never the frozen projection") {
  Rng rng(3);
  Td x = Td::randn({4, 8}, rng);
  Td w = Td::randn({8, 8}, rng);  // frozen
  qfs::LoraTarget<double> t;
  t.A = Td::randn({2, 8}, rng, 1.0, true);
  t.B = Td::randn({8, 2}, rng, 1.0, true);
  qfs::sum_all(qfs::lora_apply(x, w, t, 1.0)).backward();
  CHECK(t.A.has_grad());
  CHECK(t.B.has_grad());
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("lora_apply rejects inconsistent ranks") {
  Td x = Td::ones({2, 8});
  Td w = Td::ones({8, 8});
  qfs::LoraTarget<double> t;
  t.A = Td::ones({3, 8});
  t.B = Td::ones({8, 4});  // rank mismatch
  CHECK_THROWS_AS(qfs::lora_apply(x, w, t, 1.0), qfs::ShapeError);
}

TEST_CASE("parallel adapter: L2 = 0 leaves the feed-forward untouched") {
  Rng rng(4);
  Td h = Td::randn({3, 8}, rng);
  Td ffn = Td::randn({3, 8}, rng);
  qfs::PAdapter<double> pa;
  pa.L1 = Td::randn({2, 8}, rng);
  pa.L2 = Td::zeros({8, 2});
  Td out = qfs::padapter_apply(h, ffn, pa, "relu");
  REQUIRE(out.values() == ffn.values());
}

TEST_CASE("parallel adapter identity composition") {
  Rng rng(5);
  const int d = 6;
  Td h = Td::randn({4, d}, rng);
  Td ffn = Td::randn({4, d}, rng);
  std::vector<double> eye(d * d, 0.0);
  for (int i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  qfs::PAdapter<double> pa;
  pa.L1 = Td::from({d, d}, eye);
  pa.L2 = Td::from({d, d}, eye);
  Td out = qfs::padapter_apply(h, ffn, pa, "identity");
  for (size_t i = 0; i < out.values().size(); ++i)
    CHECK(out.values()[i] == Catch::Approx(ffn.values()[i] + h.values()[i]).margin(1e-12));
}

TEST_CASE("parallel adapter matches a two-matrix loop oracle") {
  Rng rng(6);
  const int d = 8, b = 3, L = 4;
  Td h = Td::randn({L, d}, rng);
  Td ffn = Td::zeros({L, d});
  qfs::PAdapter<double> pa;
  pa.L1 = Td::randn({b, d}, rng);
  pa.L2 = Td::randn({d, b}, rng);
  Td out = qfs::padapter_apply(h, ffn, pa, "relu");
  for (int r = 0; r < L; ++r) {
    std::vector<double> inner(b, 0.0);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < d; ++j) inner[i] += h.values()[r * d + j] * pa.L1.values()[i * d + j];
      inner[i] = std::max(0.0, inner[i]);
    }
    for (int j = 0; j < d; ++j) {
      double e = 0.0;
      for (int i = 0; i < b; ++i) e += pa.L2.values()[j * b + i] * inner[i];
      CHECK(std::abs(out.values()[r * d + j] - e) <= 1e-10);
    }
  }
}

TEST_CASE("zero prompt gate leaves the layer output identical") {
  ModelConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(7);
  Transformer<double> model(cfg, store, rng);
  AdapterConfig acfg;
  acfg.kind = AdapterKind::Prompt;
  acfg.prompt_len = 4;
  acfg.prompt_first_layer = 0;
  auto adapters = qfs::init_adapters(cfg, acfg, -1, store, rng);
  Rng tok_rng(8);
  auto tokens = random_tokens(tok_rng, 8);
  Td with = model.forward(tokens, &adapters);
  Td without = model.forward(tokens);
  for (size_t i = 0; i < with.values().size(); ++i)
    REQUIRE(std::abs(with.values()[i] - without.values()[i]) <= 1e-12);
}

TEST_CASE("prompt contribution norm grows strictly with the gate") {
  ModelConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(9);
  Transformer<double> model(cfg, store, rng);
  AdapterConfig acfg;
  acfg.kind = AdapterKind::Prompt;
  acfg.prompt_len = 1;
  acfg.prompt_first_layer = 0;
  auto adapters = qfs::init_adapters(cfg, acfg, -1, store, rng);
  Rng tok_rng(10);
  auto tokens = random_tokens(tok_rng, 6);
  Td base = model.forward(tokens);

  auto contribution_norm = [&](double g) {
    for (const auto& [name, t] : store.all()) {
      if (name.find("prompt.gate") != std::string::npos) {
        Td tt = t;
        for (auto& v : tt.mutable_values()) v = g;
      }
    }
    Td out = model.forward(tokens, &adapters);
    double n = 0;
    for (size_t i = 0; i < out.values().size(); ++i) {
      double dlt = out.values()[i] - base.values()[i];
      n += dlt * dlt;
    }
    return std::sqrt(n);
  };
  double n0 = contribution_norm(0.0);
  double n1 = contribution_norm(1.0);
  double n4 = contribution_norm(4.0);
  CHECK(n0 <= 1e-12);
  CHECK(n1 > n0);
  CHECK(n4 > n1);
}

TEST_CASE("prompt positions contribute keys/values only, never output rows") {
  ModelConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(11);
  Transformer<double> model(cfg, store, rng);
  AdapterConfig acfg;
  acfg.kind = AdapterKind::Prompt;
  acfg.prompt_len = 5;
  acfg.prompt_first_layer = 0;
  auto adapters = qfs::init_adapters(cfg, acfg, -1, store, rng);
  auto tokens = random_tokens(rng, 7);
  Td out = model.forward(tokens, &adapters);
  // output rows match token count: prompts are not positions in the sequence
  REQUIRE(out.dim(0) == 7);
}

TEST_CASE("only adapter tensors receive gradients; the backbone stays frozen") {
  ModelConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(12);
  Transformer<double> model(cfg, store, rng);
  AdapterConfig acfg;
  acfg.kind = AdapterKind::Lora;
  acfg.lora_rank = 2;
  auto adapters = qfs::init_adapters(cfg, acfg, -1, store, rng);
  auto tokens = random_tokens(rng, 6);
  Td logits = model.forward(tokens, &adapters);
  qfs::masked_cross_entropy(logits, std::vector<int>(6, 7), std::vector<uint8_t>(6, 1)).backward();
  for (const auto& [name, t] : store.all()) {
    if (name.rfind("backbone.", 0) == 0) {
      CHECK_FALSE(t.has_grad());
    } else {
      CHECK(t.has_grad());
    }
  }
}

TEST_CASE("trainable parameter counts match the closed forms") {
  ModelConfig cfg = tiny_config();
  const int64_t d = cfg.d_model;

  SECTION("lora, no split") {
    AdapterConfig a;
    a.kind = AdapterKind::Lora;
    a.lora_rank = 3;
    a.lora_targets = {"wq", "wk", "wv"};
    ParamStore<double> store;
    Rng rng(13);
    Transformer<double> model(cfg, store, rng);
    auto set = qfs::init_adapters(cfg, a, -1, store, rng);
    int64_t expect = cfg.n_layers * 3 * (2 * 3 * d);
    CHECK(qfs::adapter_trainable_count(cfg, a, -1) == expect);
    CHECK(store.count_trainable() == expect);
  }
  SECTION("lora with split: generated layers keep only B") {
    AdapterConfig a;
    a.kind = AdapterKind::Lora;
    a.lora_rank = 3;
    ParamStore<double> store;
    Rng rng(14);
    Transformer<double> model(cfg, store, rng);
    auto set = qfs::init_adapters(cfg, a, 1, store, rng);
    int64_t expect = 1 * 2 * (2 * 3 * d)  // layer 0: A and B for wq,wk
                     + 1 * 2 * (3 * d);   // layer 1: B only
    CHECK(qfs::adapter_trainable_count(cfg, a, 1) == expect);
    CHECK(store.count_trainable() == expect);
  }
  SECTION("prompt") {
    AdapterConfig a;
    a.kind = AdapterKind::Prompt;
    a.prompt_len = 4;
    a.prompt_first_layer = 1;
    ParamStore<double> store;
    Rng rng(15);
    Transformer<double> model(cfg, store, rng);
    auto set = qfs::init_adapters(cfg, a, -1, store, rng);
    int64_t expect = (cfg.n_layers - 1) * (4 * d + cfg.n_heads);
    CHECK(qfs::adapter_trainable_count(cfg, a, -1) == expect);
    CHECK(store.count_trainable() == expect);
  }
  SECTION("parallel adapter") {
    AdapterConfig a;
    a.kind = AdapterKind::PAdapter;
    a.pa_bottleneck = 4;
    ParamStore<double> store;
    Rng rng(16);
    Transformer<double> model(cfg, store, rng);
    auto set = qfs::init_adapters(cfg, a, -1, store, rng);
    int64_t expect = cfg.n_layers * 2 * 4 * d;
    CHECK(qfs::adapter_trainable_count(cfg, a, -1) == expect);
    CHECK(store.count_trainable() == expect);
  }
}

TEST_CASE("padapter with zero-initialized L2 preserves base logits") {
  ModelConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng rng(17);
  Transformer<double> model(cfg, store, rng);
  AdapterConfig acfg;
  acfg.kind = AdapterKind::PAdapter;
  acfg.pa_bottleneck = 4;
  auto adapters = qfs::init_adapters(cfg, acfg, -1, store, rng);
  auto tokens = random_tokens(rng, 8);
  Td with = model.forward(tokens, &adapters);
  Td without = model.forward(tokens);
  for (size_t i = 0; i < with.values().size(); ++i)
    REQUIRE(std::abs(with.values()[i] - without.values()[i]) <= 1e-6);
}
