#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "steerlab/checkpoint.hpp"
#include "steerlab/model.hpp"
#include "steerlab/tokenizer.hpp"

using namespace steerlab;

namespace {

ModelConfig small_config(int layers = 2, std::uint64_t seed = 7) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 24;
  c.vocab_size = tok::kMinVocab;
  c.max_seq_len = 32;
  c.seed = seed;
  return c;
}

TokenSeq random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> d(0, vocab - 1);
  TokenSeq t(static_cast<std::size_t>(n));
  for (auto& x : t) x = d(rng);
  return t;
}

std::vector<TapSite> all_sites(int layers) {
  std::vector<TapSite> s;
  for (int l = 0; l < layers; ++l)
    for (SiteKind k : {SiteKind::attn_output, SiteKind::post_attention, SiteKind::mlp_hidden, SiteKind::post_mlp})
      s.push_back({l, k});
  return s;
}

}  // namespace

TEST(Tokenizer, FencesAreSingleTokens) {
  const TokenSeq t = encode("```cpp\nint x;```python");
  EXPECT_EQ(t.front(), tok::kFenceCpp);
  EXPECT_EQ(t.back(), tok::kFencePython);
  EXPECT_EQ(decode(t), "```cpp\nint x;```python");
  EXPECT_EQ(encode("```")[0], '`');
  EXPECT_EQ(encode("```java")[0], tok::kFenceJava);
  EXPECT_EQ(encode("```julia")[0], tok::kFenceJulia);
}

TEST(Tokenizer, RoundTripsArbitraryBytes) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    for (int i = 0; i < 40; ++i) s.push_back(static_cast<char>(byte(rng)));
    s += "```cpp";
    EXPECT_EQ(decode(encode(s)), s);
  }
}

TEST(TokenNames, Resolve) {
  EXPECT_EQ(token_from_name("cpp"), tok::kFenceCpp);
  EXPECT_EQ(token_from_name("python"), tok::kFencePython);
  EXPECT_EQ(token_from_name("65"), 65);
  EXPECT_EQ(token_from_name("a"), 'a');
  EXPECT_FALSE(token_from_name("nonsense").has_value());
}

TEST(InitParams, DeterministicAndSeedSensitive) {
  const auto a = init_params(small_config(2, 1));
  const auto b = init_params(small_config(2, 1));
  const auto c = init_params(small_config(2, 2));
  EXPECT_EQ(serialize_params(a), serialize_params(b));
  EXPECT_NE(serialize_params(a), serialize_params(c));
}

TEST(InitParams, ShapesFollowConfig) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 64;
  c.ffn_dim = 128;
  c.vocab_size = 512;
  c.num_heads = 4;
  const auto p = init_params(c);
  EXPECT_EQ(p.token_embedding.rows(), 512);
  EXPECT_EQ(p.token_embedding.cols(), 64);
  EXPECT_EQ(p.layers[0].w_gate.rows(), 128);
  EXPECT_EQ(p.layers[0].w_gate.cols(), 64);
  EXPECT_EQ(p.layers[1].w_down.rows(), 64);
  EXPECT_EQ(p.layers[1].w_down.cols(), 128);
  EXPECT_EQ(p.lm_bias.size(), 512);
}

TEST(InitParams, RejectsBadConfigs) {
  auto c = small_config();
  c.num_heads = 3;
  EXPECT_THROW(init_params(c), ModelError);
  c = small_config();
  c.vocab_size = 100;
  EXPECT_THROW(init_params(c), ModelError);
  c = small_config();
  c.hidden_dim = 1 << 21;
  EXPECT_THROW(init_params(c), ModelError);
  c = small_config();
  c.vocab_size = 1 << 20;
  c.hidden_dim = 1 << 12;
  c.num_heads = 1;
  EXPECT_THROW(init_params(c), ModelError);
}

TEST(Forward, ResidualIdentityWhenBlocksSilenced) {
  auto p = init_params(small_config(3));
  for (auto& l : p.layers) {
    l.wo.setZero();
    l.w_down.setZero();
  }
  std::mt19937_64 rng(11);
  const std::vector<TapSite> taps{{2, SiteKind::post_mlp}};
  const Transformer model(p);
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSeq t = random_tokens(rng, 1 + trial % 20, p.config.vocab_size);
    RunOptions opt;
    opt.taps = taps;
    const auto out = model.run(t, opt);
    const Activations& h = out.trace.at(taps[0]);
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (int j = 0; j < p.config.hidden_dim; ++j) {
        const double emb = static_cast<double>(p.token_embedding(t[i], j)) +
                           static_cast<double>(p.position_embedding(static_cast<Eigen::Index>(i), j));
        ASSERT_EQ(h(static_cast<Eigen::Index>(i), j), emb);
      }
    }
  }
}

TEST(Forward, AddVectorHookIsExactAtEveryPosition) {
  const auto p = init_params(small_config());
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  for (const TapSite& site : all_sites(2)) {
    const TokenSeq t = random_tokens(rng, 9, p.config.vocab_size);
    Eigen::VectorXd v(site_dim(p.config, site.kind));
    for (auto& x : v) x = nd(rng);
    const std::vector<TapSite> taps{site};
    const auto base = forward(p, t, taps);
    HookSet hooks;
    hooks.add_vector(site, v);
    const auto hooked = forward(p, t, taps, hooks);
    const Activations diff = hooked.trace.at(site) - base.trace.at(site);
    for (Eigen::Index i = 0; i < diff.rows(); ++i) {
      // The hook is applied pre-capture, so the difference is v up to the
      // rounding of (a + v) - a.
      for (Eigen::Index j = 0; j < diff.cols(); ++j) {
        ASSERT_EQ(hooked.trace.at(site)(i, j), base.trace.at(site)(i, j) + v(j));
      }
    }
  }
}

TEST(Forward, SetAndAddNeuronHooks) {
  const auto p = init_params(small_config());
  const TokenSeq t = encode("hello world");
  const TapSite site{1, SiteKind::mlp_hidden};
  const std::vector<TapSite> taps{site};
  HookSet set;
  set.set_neuron(site, 3, 7.5);
  const auto out = forward(p, t, taps, set);
  for (Eigen::Index i = 0; i < out.trace.at(site).rows(); ++i) EXPECT_EQ(out.trace.at(site)(i, 3), 7.5);

  HookSet dup;
  dup.set_neuron(site, 3, 1.0).set_neuron(site, 3, 2.0);
  EXPECT_THROW(forward(p, t, taps, dup), ModelError);

  HookSet bad_index;
  bad_index.add_neuron(site, 24, 1.0);
  EXPECT_THROW(forward(p, t, taps, bad_index), ModelError);

  HookSet bad_dim;
  bad_dim.add_vector({0, SiteKind::post_mlp}, Eigen::VectorXd::Zero(5));
  EXPECT_THROW(forward(p, t, taps, bad_dim), ModelError);
}

TEST(Forward, EmptyLayerStackDecodesEmbedding) {
  const auto p = init_params(small_config(0));
  const TokenSeq t = encode("abc");
  const auto out = forward(p, t);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const Eigen::VectorXd x = (p.token_embedding.row(t[i]).cast<double>() +
                               p.position_embedding.row(static_cast<Eigen::Index>(i)).cast<double>())
                                  .transpose();
    const Eigen::VectorXd expect = p.lm_head.cast<double>() * x + p.lm_bias.cast<double>();
    EXPECT_LT((out.logits.row(static_cast<Eigen::Index>(i)).transpose() - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, RejectsBadInputs) {
  const auto p = init_params(small_config());
  EXPECT_THROW(forward(p, {}), ModelError);
  EXPECT_THROW(forward(p, {5000}), ModelError);
  EXPECT_THROW(forward(p, TokenSeq(33, 1)), ModelError);
}

TEST(NextTokenDistribution, Examples) {
  const std::vector<double> uniform(10, 0.3);
  for (double v : next_token_distribution(uniform, 1.0)) EXPECT_NEAR(v, 0.1, 1e-15);

  const auto greedy = next_token_distribution(std::vector<double>{3, 1, 1}, 0.0);
  EXPECT_EQ(greedy, (std::vector<double>{1, 0, 0}));
  const auto tie = next_token_distribution(std::vector<double>{1, 2, 2}, 0.0);
  EXPECT_EQ(tie, (std::vector<double>{0, 1, 0}));

  const auto two = next_token_distribution(std::vector<double>{1, 0}, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(two[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(two[1], 1.0 / (e + 1.0), 1e-15);
  EXPECT_NEAR(two[0], 0.7311, 1e-4);
}

TEST(NextTokenDistribution, NormalizedAndPositive) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 5.0);
  std::uniform_real_distribution<double> temp(0.05, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> logits(1 + trial % 300);
    for (auto& x : logits) x = nd(rng);
    const auto p = next_token_distribution(logits, temp(rng));
    double sum = 0.0;
    for (double v : p) {
      ASSERT_GT(v, 0.0);
      sum += v;
    }
    ASSERT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Generate, SeededDeterminismAndLength) {
  const auto p = init_params(small_config());
  const TokenSeq prompt = encode("int ");
  GenerationSettings s{1.0, 12, 99};
  EXPECT_EQ(generate(p, prompt, s), generate(p, prompt, s));
  s.temperature = 0.0;
  const auto g1 = generate(p, prompt, s);
  s.seed = 12345;
  EXPECT_EQ(g1, generate(p, prompt, s));
  s.max_new_tokens = 1;
  EXPECT_EQ(generate(p, prompt, s).size(), 1u);
}

TEST(Generate, SeedsChangeSamples) {
  const auto p = init_params(small_config());
  const TokenSeq prompt = encode("x");
  GenerationSettings a{1.0, 20, 1};
  GenerationSettings b{1.0, 20, 2};
  EXPECT_NE(generate(p, prompt, a), generate(p, prompt, b));
}

TEST(Generate, RejectsContextOverflow) {
  const auto p = init_params(small_config());
  const TokenSeq prompt(30, 'a');
  EXPECT_THROW(generate(p, prompt, GenerationSettings{1.0, 3, 0}), ModelError);
  EXPECT_NO_THROW(generate(p, prompt, GenerationSettings{1.0, 2, 0}));
  EXPECT_THROW(generate(p, prompt, GenerationSettings{-1.0, 1, 0}), ModelError);
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto p = init_params(small_config());
  const std::string bytes = serialize_params(p);
  EXPECT_EQ(bytes.substr(0, 4), "STLB");
  std::istringstream in(bytes);
  const auto q = load_params(in);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(serialize_params(q), bytes);

  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream bad_in(bad);
  EXPECT_THROW(load_params(bad_in), ModelError);

  std::istringstream short_in(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_params(short_in), ModelError);
}

TEST(Checkpoint, ConfigJsonIsCanonical) {
  const auto c = small_config();
  const std::string j = config_to_json(c);
  EXPECT_LT(j.find("ffn_dim"), j.find("hidden_dim"));
  EXPECT_EQ(config_from_json(j), c);
}
