#include <filesystem>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "modrank/adapters.hpp"
#include "modrank/error.hpp"

using namespace modrank;

namespace {

Backbone tiny_backbone() {
  Backbone bb;
  bb.tokenizer = Tokenizer({"alpha", "beta", "gamma", "delta", "eps", "zeta"});
  bb.config = {.num_layers = 3, .hidden = 8, .heads = 2, .ffn_dim = 16, .vocab_size = bb.tokenizer.size(),
               .max_seq_len = 16};
  return bb;
}

TokenBatch random_pairs(const Backbone& bb, std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> word(special::kCount, static_cast<int>(bb.tokenizer.size()) - 1);
  std::uniform_int_distribution<std::size_t> len(1, 5);
  std::vector<TokenSequence> seqs;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> q(len(rng)), d(len(rng));
    for (auto& t : q) t = word(rng);
    for (auto& t : d) t = word(rng);
    seqs.push_back(make_pair_input(q, d, bb.config.max_seq_len));
  }
  return TokenBatch::pack(seqs);
}

void randomize(AdapterParams& a, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& [name, t] : a.store.entries()) {
    auto copy = t;
    for (auto& v : copy.mutable_data()) v = n(rng);
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("hand-evaluated adapter forward") {
  EncoderConfig enc{.num_layers = 1, .hidden = 2, .heads = 1, .ffn_dim = 2, .vocab_size = 8, .max_seq_len = 8};
  auto la = AdapterParams::init({.reduction_factor = 2}, enc, 1);
  auto d = la.store.at("layer.0.down.weight").mutable_data();
  d[0] = 1.0;
  d[1] = 0.0;
  auto u = la.store.at("layer.0.up.weight").mutable_data();
  u[0] = 2.0;
  u[1] = 0.0;
  const Tensor h({1, 2}, {3.0, 5.0}), r({1, 2}, {1.0, 1.0});
  const auto out = la_forward(h, r, la, 0);
  CHECK(out.data()[0] == 7.0);
  CHECK(out.data()[1] == 1.0);
}

TEST_CASE("parameter counts") {
  CHECK(adapter_param_count({.reduction_factor = 16}, 4, 64) == 2320);
  const std::size_t expected[] = {14174208, 7091712, 3550464, 1779840, 894528, 451872};
  const std::size_t factors[] = {1, 2, 4, 8, 16, 32};
  for (int i = 0; i < 6; ++i) CHECK(adapter_param_count({.reduction_factor = factors[i]}, 12, 768) == expected[i]);
  const auto bb = tiny_backbone();
  const auto a = AdapterParams::init({.reduction_factor = 4}, bb.config, 1);
  CHECK(a.store.num_coordinates() == adapter_param_count({.reduction_factor = 4}, 3, 8));
  CHECK_THROWS_AS(AdapterConfig{.reduction_factor = 3}.bottleneck(8), ConfigError);
  CHECK_THROWS_AS(AdapterConfig{.reduction_factor = 0}.bottleneck(8), ConfigError);
}

TEST_CASE("zero up-projections leave the encoder unchanged") {
  const auto bb = tiny_backbone();
  const auto params = init_encoder_params(bb.config, 2);
  const auto la = AdapterParams::init({.reduction_factor = 2}, bb.config, 3);
  const auto ra = AdapterParams::init({.reduction_factor = 4}, bb.config, 4);
  const AdapterStack stack(&la, nullptr, &ra, LaMode::kQuery, 0, false);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) {
    const auto batch = random_pairs(bb, 3, rng);
    CHECK(max_abs_diff(encode(bb, params, batch), encode(bb, params, batch, &stack)) == 0.0);
  }
}

TEST_CASE("drop and split compositions") {
  const auto bb = tiny_backbone();
  const auto params = init_encoder_params(bb.config, 6);
  std::mt19937_64 rng(7);
  std::map<std::string, AdapterParams> registry;
  registry.emplace("x", AdapterParams::init({.reduction_factor = 2}, bb.config, 8));
  registry.emplace("y", AdapterParams::init({.reduction_factor = 2}, bb.config, 9));
  registry.emplace("rank", AdapterParams::init({.reduction_factor = 4}, bb.config, 10));
  for (auto& [_, a] : registry) randomize(a, rng);
  registry.emplace("x2", registry.at("x"));

  const AdapterComposition q{.la_mode = LaMode::kQuery, .la_query = "x", .la_document = "y", .ra = "rank"};
  const auto batch = random_pairs(bb, 4, rng);
  const auto base = encode(bb, params, batch);
  const auto full = AdapterStack::compose(q, registry, 3);
  const auto h = encode(bb, params, batch, &full);
  CHECK(max_abs_diff(base, h) > 1e-6);

  const auto drop0 = AdapterStack::compose(adapter_drop(q, 0, 3), registry, 3);
  CHECK(max_abs_diff(h, encode(bb, params, batch, &drop0)) == 0.0);
  const auto dropped = AdapterStack::compose(adapter_drop(q, 3, 3), registry, 3);
  CHECK(max_abs_diff(base, encode(bb, params, batch, &dropped)) == 0.0);
  CHECK_THROWS_AS(adapter_drop(q, 4, 3), ContractError);

  auto split = q;
  split.la_mode = LaMode::kSplit;
  split.la_document = "x2";
  const auto s = AdapterStack::compose(split, registry, 3);
  CHECK(max_abs_diff(h, encode(bb, params, batch, &s)) < 1e-12);
  split.la_document = "y";
  const auto s2 = AdapterStack::compose(split, registry, 3);
  CHECK(max_abs_diff(h, encode(bb, params, batch, &s2)) > 1e-6);

  auto missing = q;
  missing.ra = "nope";
  CHECK_THROWS_AS(AdapterStack::compose(missing, registry, 3), ConfigError);
}

TEST_CASE("split routing assigns the query segment and its separator to the query adapter") {
  std::vector<TokenSequence> seqs{make_pair_input(std::vector<int>{7, 8}, std::vector<int>{9}, 16),
                                  make_pair_input(std::vector<int>{7}, std::vector<int>{9, 9, 9}, 16)};
  const auto batch = TokenBatch::pack(seqs);
  const auto route = split_route(batch);
  CHECK(std::vector<std::uint8_t>(route.begin(), route.begin() + 7) == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0});
  CHECK(std::vector<std::uint8_t>(route.begin() + 7, route.end()) == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0});
  const auto text = TokenBatch::pack(std::vector<TokenSequence>{TokenSequence{{special::kCls, 7}, {0, 0}}});
  CHECK_THROWS_AS(split_route(text), ContractError);
}

TEST_CASE("invertible adapter inverts exactly up to rounding") {
  const auto bb = tiny_backbone();
  auto la = AdapterParams::init({.reduction_factor = 2, .invertible = true}, bb.config, 11);
  std::mt19937_64 rng(12);
  randomize(la, rng, 0.5);
  const auto e = testing::random_tensor({5, 8}, rng);
  const auto o = invertible_apply(e, la);
  CHECK(max_abs_diff(o, e) > 1e-3);
  CHECK(max_abs_diff(invertible_invert(o, la), e) < 1e-12);
}

TEST_CASE("adapter files round trip and refuse foreign bases") {
  const auto bb = tiny_backbone();
  AdapterFile f;
  f.role = AdapterRole::kRanking;
  f.tag = "rank";
  f.base_fingerprint = "0123456789abcdef";
  f.params = AdapterParams::init({.reduction_factor = 4}, bb.config, 13);
  std::mt19937_64 rng(14);
  randomize(f.params, rng);
  f.head = extract_head(init_encoder_params(bb.config, 15));
  CHECK(adapter_file_name(f.role, f.tag, 4) == "RA_rank_r4.adapter");
  CHECK(adapter_file_name(AdapterRole::kLanguage, "tgt", 2) == "LA_tgt_r2.adapter");
  const auto path = std::filesystem::temp_directory_path() / "modrank_test.adapter";
  save_adapter(path, f);
  const auto back = load_adapter(path, f.base_fingerprint);
  CHECK(back.params.store.flatten() == f.params.store.flatten());
  CHECK(back.params.config == f.params.config);
  CHECK(back.tag == "rank");
  REQUIRE(back.head.has_value());
  CHECK(back.head->flatten() == f.head->flatten());
  try {
    load_adapter(path, "fedcba9876543210");
    FAIL("expected a fingerprint error");
  } catch (const FingerprintError& e) {
    CHECK(e.expected() == "fedcba9876543210");
    CHECK(e.found() == "0123456789abcdef");
  }
  std::filesystem::remove(path);
}

TEST_CASE("finite differences through language and ranking adapters") {
  const auto bb = tiny_backbone();
  const auto params = init_encoder_params(bb.config, 16, {.weight_std = 0.3, .embedding_std = 0.5});
  std::mt19937_64 rng(17);
  auto la = AdapterParams::init({.reduction_factor = 2, .invertible = true}, bb.config, 18);
  auto ra = AdapterParams::init({.reduction_factor = 4}, bb.config, 19);
  randomize(la, rng);
  randomize(ra, rng);
  const AdapterStack stack(&la, nullptr, &ra, LaMode::kQuery, 1, false);
  const AdapterStack inv(&la, nullptr, nullptr, LaMode::kQuery, 0, true);
  const auto batch = random_pairs(bb, 2, rng);
  const double labels[] = {1.0, 0.0};
  std::vector<Tensor> leaves = ra.store.tensors();
  for (const auto& t : la.store.tensors()) leaves.push_back(t);
  const auto r = testing::grad_check(leaves, [&] { return ops::bce_with_logits(ce_logits(bb, params, batch, &stack), labels); },
                                     testing::sample_coordinates(leaves, 3, 20));
  CHECK(r.failures.empty());
  const auto inv_leaves = la.store.tensors();
  const auto r2 = testing::grad_check(inv_leaves,
                                      [&] { return ops::bce_with_logits(ce_logits(bb, params, batch, &inv), labels); },
                                      testing::sample_coordinates(inv_leaves, 2, 21));
  CHECK(r2.failures.empty());
}
