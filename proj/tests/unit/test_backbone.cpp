#include <cmath>

#include "ctrlgen/training.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace ctrlgen;
using doctest::Approx;

namespace {

// Zero weights except the output bias: the next-token distribution is the
// softmax of b_out everywhere.
BackboneModel bias_only(const Vector& b_out) {
  BackboneParams p(b_out.size(), 3, 2);
  p.b_out = b_out;
  return BackboneModel(Vocabulary::synthetic(b_out.size()), p);
}

std::vector<std::vector<TokenId>> markov_corpus(std::size_t n, std::uint64_t seed) {
  // Two-state chain over w02/w03 that switches state with probability 0.1.
  std::vector<std::vector<TokenId>> out;
  Rng rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<TokenId> s;
    TokenId cur = rng.uniform() < 0.5 ? 2 : 3;
    for (int i = 0; i < 12; ++i) {
      s.push_back(cur);
      if (rng.uniform() < 0.1) cur = cur == 2 ? 3 : 2;
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("init_state") {
  const auto& bb = testutil::small_backbone();
  const BackboneState a = bb.init_state(), b = bb.init_state();
  CHECK(a.prefix_length == 1);
  CHECK(a == b);
  const BackboneModel loaded = BackboneModel::deserialize(bb.serialize());
  CHECK(loaded.init_state() == a);
}

TEST_CASE("zero backbone is uniform") {
  const BackboneModel zero = BackboneModel::zeros(Vocabulary::synthetic(4), 5, 3);
  BackboneState s = zero.init_state();
  s = zero.step(s, 2);
  for (double lp : s.logprobs) CHECK(lp == Approx(-std::log(4.0)).epsilon(1e-15));
  CHECK(perplexity(zero, std::vector<TokenId>{2, 3, 3, 1}) == Approx(4.0).epsilon(1e-12));
}

TEST_CASE("perplexity closed forms") {
  // Probability one on w02.
  const BackboneModel sure = bias_only({-1000, -1000, 0, -1000});
  CHECK(perplexity(sure, std::vector<TokenId>{2, 2, 2}) == Approx(1.0).epsilon(1e-12));
  // Half on w02, half on w03.
  const BackboneModel half = bias_only({-1000, -1000, 0, 0});
  CHECK(perplexity(half, std::vector<TokenId>{2, 3, 3, 2, 2}) == Approx(2.0).epsilon(1e-12));
  CHECK_THROWS(perplexity(half, std::vector<TokenId>{}));
}

TEST_CASE("step and full_hidden_states agree bit for bit") {
  const auto& bb = testutil::small_backbone();
  Rng rng(77);
  for (int k = 0; k < 100; ++k) {
    std::vector<TokenId> x(1 + rng.below(20));
    for (auto& t : x) t = static_cast<TokenId>(rng.below(bb.vocab_size()));
    const auto full = bb.full_hidden_states(x);
    REQUIRE(full.size() == x.size());
    BackboneState s = bb.init_state();
    for (std::size_t i = 0; i < x.size(); ++i) {
      s = bb.step(s, x[i]);
      REQUIRE(s.h == full[i].h);
      REQUIRE(s.logprobs == full[i].logprobs);
      REQUIRE(s.prefix_length == i + 2);
    }
  }
  CHECK_THROWS(bb.full_hidden_states(std::vector<TokenId>{}));
  CHECK_THROWS(bb.step(bb.init_state(), 999));
}

TEST_CASE("step counts forwards") {
  const auto& bb = testutil::small_backbone();
  const auto before = BackboneModel::forward_count();
  BackboneState s = bb.init_state();
  for (int i = 0; i < 7; ++i) s = bb.step(s, 3);
  CHECK(BackboneModel::forward_count() - before == 7);
}

TEST_CASE("embed") {
  const auto& bb = testutil::small_backbone();
  const auto a = bb.embed(5);
  const Vector copy(a.begin(), a.end());
  const auto b = bb.embed(5);
  CHECK(Vector(b.begin(), b.end()) == copy);
  CHECK(copy.size() == bb.d_e());
  CHECK_THROWS(bb.embed(static_cast<TokenId>(bb.vocab_size())));
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto& bb = testutil::small_backbone();
  const auto bytes = bb.serialize();
  const BackboneModel back = BackboneModel::deserialize(bytes);
  CHECK(back.params() == bb.params());
  CHECK(back.vocab() == bb.vocab());
  CHECK(back.serialize() == bytes);
  CHECK(back.hash() == bb.hash());
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "GMBK");
}

TEST_CASE("checkpoint rejects a d_e mismatch") {
  BackboneParams p(6, 4, 3);
  auto refs = p.tensors();
  TensorMap tensors = to_tensor_map(refs);
  tensors["embedding"] = Tensor{{6, 5}, Vector(30, 0.0)};
  ByteWriter w;
  write_container(w, "GMBK", 1, tensors);
  w.string32(Vocabulary::synthetic(6).serialize());
  CHECK_THROWS(BackboneModel::deserialize(w.data()));
}

TEST_CASE("checkpoint rejects corruption") {
  auto bytes = testutil::small_backbone().serialize();
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(BackboneModel::deserialize(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(BackboneModel::deserialize(bad_magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(BackboneModel::deserialize(trailing), FormatError);
}

TEST_CASE("lr = 0 leaves the initialisation untouched") {
  BackboneTrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  cfg.d_h = 5;
  cfg.d_e = 4;
  const auto corpus = markov_corpus(1, 1);
  const BackboneModel m = train_backbone(corpus, Vocabulary::synthetic(6), cfg);
  CHECK(m.params() == init_backbone_params(6, cfg));
}

TEST_CASE("training lowers the loss on a Markov corpus") {
  BackboneTrainConfig cfg;
  cfg.epochs = 50;
  cfg.d_h = 6;
  cfg.d_e = 4;
  const auto corpus = markov_corpus(20, 2);
  std::vector<double> losses;
  const BackboneModel m = train_backbone(corpus, Vocabulary::synthetic(6), cfg, &losses);
  const BackboneParams init = init_backbone_params(6, cfg);
  double at_init = 0.0, after = 0.0;
  for (const auto& s : corpus) {
    at_init += backbone_sequence_loss(init, s, nullptr);
    after += backbone_sequence_loss(m.params(), s, nullptr);
  }
  CHECK(after < at_init);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("training is deterministic") {
  BackboneTrainConfig cfg;
  cfg.epochs = 2;
  cfg.d_h = 5;
  cfg.d_e = 4;
  const auto corpus = markov_corpus(10, 3);
  const BackboneModel a = train_backbone(corpus, Vocabulary::synthetic(6), cfg);
  const BackboneModel b = train_backbone(corpus, Vocabulary::synthetic(6), cfg);
  CHECK(a.serialize() == b.serialize());
  cfg.seed = 2;
  const BackboneModel c = train_backbone(corpus, Vocabulary::synthetic(6), cfg);
  CHECK(c.serialize() != a.serialize());
}

TEST_CASE("training input errors") {
  BackboneTrainConfig cfg;
  CHECK_THROWS(train_backbone({}, Vocabulary::synthetic(6), cfg));
  cfg.d_h = 0;
  CHECK_THROWS(train_backbone(markov_corpus(1, 1), Vocabulary::synthetic(6), cfg));
}

TEST_CASE("sequence loss gradient matches finite differences") {
  Rng rng(21);
  for (int inst = 0; inst < 20; ++inst) {
    BackboneParams p(7, 4, 3);
    testutil::randomize(p.tensors(), rng, 0.6);
    std::vector<TokenId> x(2 + rng.below(5));
    for (auto& t : x) t = static_cast<TokenId>(2 + rng.below(5));
    BackboneParams grad(7, 4, 3);
    backbone_sequence_loss(p, x, &grad);
    const Vector theta = testutil::flatten(p.tensors());
    auto f = [&](std::span<const double> th) {
      BackboneParams q = p;
      testutil::unflatten(q.tensors(), th);
      return backbone_sequence_loss(q, x, nullptr);
    };
    const Vector numeric = finite_difference_gradient(f, theta);
    CHECK(relative_error(testutil::flatten(grad.tensors()), numeric) <= 1e-4);
  }
}

TEST_CASE("discriminator training leaves the backbone untouched") {
  const auto& bb = testutil::small_backbone();
  const auto before = bb.serialize();
  const auto data = synth_corpus(testutil::small_spec(), 10);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-2;
  train_discriminator(data, bb, cfg);
  CHECK(content_hash(bb.serialize()) == content_hash(before));
  CHECK(bb.hash() == content_hash(before));
}

}
