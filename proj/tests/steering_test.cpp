#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "steerlab/corpus.hpp"
#include "steerlab/evaluation.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/steering_io.hpp"

namespace steerlab {
namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 24;
  c.vocab_size = tok::kMinVocab;
  c.max_seq_len = 256;
  c.seed = seed;
  return c;
}

const std::vector<PromptPair>& pairs() {
  static const std::vector<PromptPair> p = [] {
    auto all = synth_corpus(40, 5).pairs;
    all.resize(12);
    return all;
  }();
  return p;
}

SteeringModel random_steering(int clusters, int layers, int dim, SiteKind site, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);  // f32 so that files round-trip exactly
  SteeringModel m;
  m.clusters = clusters;
  m.num_layers = layers;
  m.dim = dim;
  m.site = site;
  m.alpha = 1.5;
  for (int l = 0; l < layers; ++l) {
    RowMatrix<double> c(clusters, dim);
    LinearProbe p = LinearProbe::zeros(clusters, dim);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = g(rng);
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = g(rng);
    for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias(i) = g(rng);
    m.centroids.push_back(c);
    m.probes.push_back(p);
  }
  for (int i = 0; i < 5; ++i) m.labels.push_back(i % clusters);
  return m;
}

TEST(ReduceRows, FinalAndMean) {
  RowMatrix<float> r(3, 2);
  r << 1, 2, 3, 4, 5, 9;
  EXPECT_EQ(reduce_rows(r, Reduction::final_token), Eigen::Vector2d(5, 9));
  EXPECT_EQ(reduce_rows(r, Reduction::mean_answer_tokens), Eigen::Vector2d(3, 5));
  EXPECT_THROW(reduce_rows(RowMatrix<float>(0, 2), Reduction::final_token), SteeringError);
}

TEST(ReductionNames, RoundTrip) {
  for (auto r : {Reduction::final_token, Reduction::mean_answer_tokens})
    EXPECT_EQ(reduction_from_string(to_string(r)), r);
  EXPECT_THROW(reduction_from_string("median"), std::exception);
}

TEST(Extraction, MatchesManualForwardOnAnswerRows) {
  const ModelParams params = init_params(small_config());
  const Transformer model(params);
  const PromptPair& p = pairs()[0];
  const TokenSeq full = render_pair_tokens(p.question, p.positive);
  const auto start = static_cast<Eigen::Index>(render_prompt_tokens(p.question).size());
  for (SiteKind site : {SiteKind::attn_output, SiteKind::mlp_hidden}) {
    std::vector<TapSite> taps = {{0, site}, {1, site}};
    const auto fo = forward(params, full, taps);
    for (Reduction red : {Reduction::final_token, Reduction::mean_answer_tokens}) {
      const auto got = extract_answer_activations(model, p.question, p.positive, site, red);
      ASSERT_EQ(got.rows(), 2);
      ASSERT_EQ(got.cols(), site_dim(params.config, site));
      for (int l = 0; l < 2; ++l) {
        const Activations& a = fo.trace.at({l, site});
        const Activations answer = a.bottomRows(a.rows() - start).cast<float>().cast<double>();
        const Eigen::RowVectorXd want =
            red == Reduction::final_token ? Eigen::RowVectorXd(answer.bottomRows(1)) : answer.colwise().mean();
        EXPECT_LE((got.row(l) - want).cwiseAbs().maxCoeff(), 1e-12);
      }
    }
  }
}

TEST(DiffVectors, SwappingStylesNegates) {
  const Transformer model(init_params(small_config()));
  auto swapped = pairs();
  for (auto& p : swapped) std::swap(p.positive, p.negative);
  const DiffSet a = diff_vectors(model, pairs(), SiteKind::attn_output, Reduction::mean_answer_tokens);
  const DiffSet b = diff_vectors(model, swapped, SiteKind::attn_output, Reduction::mean_answer_tokens);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.deltas[i], -b.deltas[i]);
  EXPECT_EQ(a.ids, b.ids);
}

TEST(DiffVectors, IdenticalAnswersGiveZero) {
  const Transformer model(init_params(small_config()));
  auto same = pairs();
  for (auto& p : same) p.negative = p.positive;
  const DiffSet d = diff_vectors(model, same, SiteKind::post_mlp, Reduction::final_token);
  for (const auto& m : d.deltas) EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0);
  for (double v : layer_norm_profile(d)) EXPECT_EQ(v, 0.0);
}

TEST(DiffVectors, ThreadCountDoesNotMatter) {
  const Transformer model(init_params(small_config()));
  const DiffSet a = diff_vectors(model, pairs(), SiteKind::post_attention, Reduction::final_token, 1);
  const DiffSet b = diff_vectors(model, pairs(), SiteKind::post_attention, Reduction::final_token, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.deltas[i], b.deltas[i]);
}

TEST(DiffVectors, Errors) {
  ModelConfig c = small_config();
  const Transformer model(init_params(c));
  EXPECT_THROW(diff_vectors(model, {}, SiteKind::post_mlp, Reduction::final_token), SteeringError);
  auto empty = pairs();
  empty[0].positive.clear();
  EXPECT_THROW(diff_vectors(model, empty, SiteKind::post_mlp, Reduction::final_token), SteeringError);
  c.max_seq_len = 16;
  const Transformer tiny(init_params(c));
  EXPECT_THROW(diff_vectors(tiny, pairs(), SiteKind::post_mlp, Reduction::final_token), ModelError);
}

TEST(DiffSet, FlattenedLayoutAndProfile) {
  DiffSet d;
  d.num_layers = 2;
  d.dim = 2;
  d.ids = {"a", "b"};
  RowMatrix<double> m0(2, 2), m1(2, 2);
  m0 << 3, 4, 0, 1;
  m1 << 0, 0, 6, 8;
  d.deltas = {m0, m1};
  RowMatrix<double> want(2, 4);
  want << 3, 4, 0, 1, 0, 0, 6, 8;
  EXPECT_EQ(d.flattened(), want);
  EXPECT_EQ(d.layer(1), (RowMatrix<double>(2, 2) << 0, 1, 6, 8).finished());
  const auto prof = layer_norm_profile(d);
  EXPECT_DOUBLE_EQ(prof[0], 2.5);
  EXPECT_DOUBLE_EQ(prof[1], 5.5);
  std::ostringstream os;
  write_norm_profile_csv(prof, os);
  EXPECT_EQ(os.str(), "layer,mean_l2_norm\n0,2.5\n1,5.5\n");
  d.deltas[1](0, 0) = std::nan("");
  EXPECT_THROW(d.validate(), SteeringError);
}

TEST(ClusterDiffs, MatchesKMeansOnFlattenedDeltas) {
  const Transformer model(init_params(small_config()));
  const DiffSet d = diff_vectors(model, pairs(), SiteKind::post_mlp, Reduction::mean_answer_tokens);
  ClusterOptions opt;
  opt.clusters = 3;
  opt.seed = 9;
  const SteeringModel m = cluster_diffs(d, opt);
  const KMeansResult km = kmeans(d.flattened(), 3, 9);
  EXPECT_EQ(m.labels, km.labels);
  EXPECT_EQ(m.flat_centroids(), km.centroids);
  for (const auto& p : m.probes) {
    EXPECT_EQ(p.weight.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(p.bias.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_NO_THROW(m.validate());
}

TEST(TrainProbes, OneIndependentProbePerLayer) {
  const Transformer model(init_params(small_config()));
  const DiffSet d = diff_vectors(model, pairs(), SiteKind::post_mlp, Reduction::final_token);
  const SteeringModel m = cluster_diffs(d, {3, 1, 300, 0.0, 1.0});
  const auto probes = train_probes(d, m.labels, 3);
  ASSERT_EQ(probes.size(), 2u);
  for (int l = 0; l < 2; ++l) {
    const auto fit = train_probe(d.layer(l), m.labels, 3);
    EXPECT_EQ(probes[static_cast<std::size_t>(l)].weight, fit.probe.weight);
  }
  EXPECT_THROW(train_probes(d, {0, 1}, 3), SteeringError);
}

std::vector<double> flat(WeightsT<double> w) {
  std::vector<double> out;
  for_each_tensor(w, [&](std::string_view, auto& t) { out.insert(out.end(), t.data(), t.data() + t.size()); });
  return out;
}

class RefineTest : public ::testing::Test {
 protected:
  RefineTest() : params_(init_params(small_config())), model_(params_) {
    const DiffSet d = diff_vectors(model_, pairs(), SiteKind::post_mlp, Reduction::mean_answer_tokens);
    steering_ = cluster_diffs(d, {3, 2, 300, 0.0, 1.0});
  }
  ModelParams params_;
  Transformer model_;
  SteeringModel steering_;
};

TEST_F(RefineTest, ZeroEpochsIsIdentity) {
  RefineConfig cfg;
  cfg.epochs = 0;
  cfg.alpha = steering_.alpha;
  const auto r = refine(model_, steering_, pairs(), cfg);
  EXPECT_TRUE(r.epoch_loss.empty());
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(r.model.probes[static_cast<std::size_t>(l)].weight, steering_.probes[static_cast<std::size_t>(l)].weight);
    EXPECT_EQ(r.model.centroids[static_cast<std::size_t>(l)], steering_.centroids[static_cast<std::size_t>(l)]);
  }
}

TEST_F(RefineTest, LossStartsAtLogCAndDecreases) {
  RefineConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 1e-2;
  cfg.steps = 3;
  const auto r = refine(model_, steering_, pairs(), cfg);
  ASSERT_EQ(r.epoch_loss.size(), 30u);
  EXPECT_NEAR(r.epoch_loss.front(), std::log(3.0), 1e-12);
  for (std::size_t e = 1; e < r.epoch_loss.size(); ++e) EXPECT_LE(r.epoch_loss[e], r.epoch_loss[e - 1] + 1e-12);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
  EXPECT_EQ(r.model.labels, steering_.labels);
  EXPECT_EQ(r.model.flat_centroids(), steering_.flat_centroids());
}

TEST_F(RefineTest, BaseModelUntouchedAndDeterministic) {
  const WeightsT<double> before = model_.weights();
  RefineConfig cfg;
  cfg.epochs = 5;
  cfg.steps = 2;
  const auto a = refine(model_, steering_, pairs(), cfg);
  const auto b = refine(model_, steering_, pairs(), cfg);
  EXPECT_EQ(flat(model_.weights()), flat(before));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  for (int l = 0; l < 2; ++l)
    EXPECT_EQ(a.model.probes[static_cast<std::size_t>(l)].weight, b.model.probes[static_cast<std::size_t>(l)].weight);
}

TEST_F(RefineTest, Errors) {
  RefineConfig cfg;
  auto misaligned = pairs();
  misaligned.pop_back();
  EXPECT_THROW(refine(model_, steering_, misaligned, cfg), SteeringError);
  cfg.epochs = -1;
  EXPECT_THROW(refine(model_, steering_, pairs(), cfg), SteeringError);
  cfg.epochs = 1;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(refine(model_, steering_, pairs(), cfg), SteeringError);
}

TEST(SteerHooks, BiasOnlyProbeSelectsFixedCentroid) {
  SteeringModel m = random_steering(3, 2, 4, SiteKind::post_mlp, 1);
  for (auto& p : m.probes) {
    p.weight.setZero();
    p.bias << 0.0, 0.0, 1.0;
  }
  const std::map<int, Eigen::VectorXd> acts = {{0, Eigen::VectorXd::Random(4)}, {1, Eigen::VectorXd::Random(4)}};
  const HookSet h = steer_hooks(m, acts, {1});
  ASSERT_EQ(h.edits.size(), 1u);
  EXPECT_EQ(h.edits[0].site, (TapSite{1, SiteKind::post_mlp}));
  const auto& v = std::get<AddVector>(h.edits[0].edit).v;
  EXPECT_EQ(v, Eigen::VectorXd(m.alpha * m.centroids[1].row(2).transpose()));
  EXPECT_TRUE(steer_hooks(m, acts, {}).empty());
  EXPECT_THROW(steer_hooks(m, acts, {2}), SteeringError);
  EXPECT_THROW(steer_hooks(m, {{0, Eigen::VectorXd::Zero(4)}}, {1}), SteeringError);
}

TEST(SteeringInterceptor, PerTokenReselectsPerPromptFreezes) {
  SteeringModel m = random_steering(2, 1, 2, SiteKind::post_mlp, 2);
  m.probes[0].weight << 1, 0, -1, 0;  // class 0 when x > 0
  m.probes[0].bias.setZero();
  m.alpha = 1.0;
  const TapSite site{0, SiteKind::post_mlp};
  Activations pos(1, 2), neg(1, 2);
  pos << 1, 0;
  neg << -1, 0;
  for (Selection sel : {Selection::per_token, Selection::per_prompt}) {
    const auto icpt = steering_interceptor(m, {{0}, sel, std::nullopt});
    Activations a = pos, b = neg;
    icpt(site, a);
    icpt(site, b);
    EXPECT_EQ(Eigen::RowVectorXd(a - pos), m.centroids[0].row(0));
    const int second = sel == Selection::per_token ? 1 : 0;
    EXPECT_EQ(Eigen::RowVectorXd(b - neg), m.centroids[0].row(second));
  }
  Activations other = pos;
  steering_interceptor(m, {{0}, Selection::per_token, 0.5})({0, SiteKind::attn_output}, other);
  EXPECT_EQ(other, pos);
}

TEST(SteerGenerate, ZeroAlphaAndEmptySubsetAreIdentity) {
  const ModelConfig c = small_config();
  const Transformer model(init_params(c));
  const SteeringModel m = random_steering(3, c.num_layers, c.hidden_dim, SiteKind::attn_output, 4);
  const TokenSeq prompt = render_prompt_tokens(pairs()[1].question);
  for (std::uint64_t seed : {1, 2, 3}) {
    const GenerationSettings s{1.0, 12, seed};
    const TokenSeq vanilla = model.generate(prompt, s);
    EXPECT_EQ(steer_generate(model, prompt, m, s, {all_layers(m), Selection::per_token, 0.0}), vanilla);
    EXPECT_EQ(steer_generate(model, prompt, m, s, {{}, Selection::per_token, 5.0}), vanilla);
  }
}

TEST(SteerGenerate, InjectionIsExactAtEveryPosition) {
  const ModelConfig c = small_config();
  const ModelParams params = init_params(c);
  const Transformer model(params);
  for (SiteKind site : {SiteKind::attn_output, SiteKind::post_mlp, SiteKind::mlp_hidden}) {
    const SteeringModel m = random_steering(3, c.num_layers, site_dim(c, site), site, 5);
    const TokenSeq prompt = render_prompt_tokens(pairs()[2].question);
    RunOptions vanilla;
    vanilla.taps = {{0, site}};
    RunOptions steered = vanilla;
    steered.interceptor = steering_interceptor(m, {{0}, Selection::per_token, 2.5});
    const auto a = model.run(prompt, vanilla).trace.at({0, site});
    const auto b = model.run(prompt, steered).trace.at({0, site});
    const int k = m.probes[0].predict(a.row(a.rows() - 1).transpose());
    const RowMatrix<double> diff = b - a;
    for (Eigen::Index r = 0; r < diff.rows(); ++r)
      EXPECT_LE((diff.row(r) - 2.5 * m.centroids[0].row(k)).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(SteerGenerate, FinalLayerInjectionShiftsLogitsByHeadTimesCentroid) {
  const ModelConfig c = small_config(9);
  const ModelParams params = init_params(c);
  const Transformer model(params);
  const int last = c.num_layers - 1;
  const SteeringModel m = random_steering(3, c.num_layers, c.hidden_dim, SiteKind::post_mlp, 8);
  const double alpha = 3.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const TokenSeq prompt = render_prompt_tokens(pairs()[i].question);
    RunOptions vanilla;
    vanilla.taps = {{last, SiteKind::post_mlp}};
    RunOptions steered;
    steered.interceptor = steering_interceptor(m, {{last}, Selection::per_token, alpha});
    const ForwardOutput a = model.run(prompt, vanilla);
    const ForwardOutput b = model.run(prompt, steered);
    const auto& h = a.trace.at({last, SiteKind::post_mlp});
    const int k = m.probes[static_cast<std::size_t>(last)].predict(h.row(h.rows() - 1).transpose());
    const Eigen::VectorXd expected =
        params.lm_head.cast<double>() * (alpha * m.centroids[static_cast<std::size_t>(last)].row(k).transpose());
    for (Eigen::Index r = 0; r < a.logits.rows(); ++r) {
      const Eigen::VectorXd delta = (b.logits.row(r) - a.logits.row(r)).transpose();
      EXPECT_LE((delta - expected).norm(), 1e-5 * expected.norm()) << "prompt " << i << " position " << r;
    }
  }
}

TEST(SteerGenerate, DeterministicForSeed) {
  const ModelConfig c = small_config();
  const Transformer model(init_params(c));
  const SteeringModel m = random_steering(2, c.num_layers, c.hidden_dim, SiteKind::post_attention, 6);
  const TokenSeq prompt = render_prompt_tokens(pairs()[3].question);
  const GenerationSettings s{1.0, 10, 77};
  const SteerOptions o{all_layers(m), Selection::per_token, std::nullopt};
  EXPECT_EQ(steer_generate(model, prompt, m, s, o), steer_generate(model, prompt, m, s, o));
  const SteeringModel wrong = random_steering(2, c.num_layers, 5, SiteKind::post_attention, 6);
  EXPECT_THROW(steer_generate(model, prompt, wrong, s, o), SteeringError);
}

TEST(AlphaSweep, ThreadInvariantAndZeroAlphaMatchesVanilla) {
  const ModelConfig c = small_config();
  const Transformer model(init_params(c));
  const SteeringModel m = random_steering(2, c.num_layers, c.hidden_dim, SiteKind::post_mlp, 7);
  std::vector<std::string> prompts;
  for (int i = 0; i < 4; ++i) prompts.push_back(pairs()[static_cast<std::size_t>(i)].question);
  const GenerationSettings s{1.0, 4, 11};
  const SteerOptions o{all_layers(m), Selection::per_token, std::nullopt};
  const auto a = alpha_sweep(model, m, prompts, {0.0, 3.0}, s, 3, o, "cpp", 1);
  const auto b = alpha_sweep(model, m, prompts, {0.0, 3.0}, s, 3, o, "cpp", 3);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rate, b[i].rate);
    EXPECT_EQ(a[i].samples, 12);
  }
  int hits = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p)
    for (int r = 0; r < 3; ++r) {
      GenerationSettings g = s;
      g.seed = derive_seed(s.seed, p, static_cast<std::uint64_t>(r));
      hits += detect_language(decode(model.generate(render_prompt_tokens(prompts[p]), g))) == LanguageLabel::cpp;
    }
  EXPECT_DOUBLE_EQ(a[0].rate, hits / 12.0);
  EXPECT_THROW(alpha_sweep(model, m, prompts, {}, s, 1, o), SteeringError);
  EXPECT_THROW(alpha_sweep(model, m, prompts, {1.0}, s, 0, o), SteeringError);
  EXPECT_THROW(alpha_sweep(model, m, prompts, {1.0}, s, 1, o, "cobol"), SteeringError);
}

TEST(DeriveSeed, DistinctAcrossIndices) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(1, a, b));
  EXPECT_EQ(seen.size(), 2500u);
  EXPECT_NE(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
}

TEST(SteeringIo, ModelRoundTripIsExact) {
  for (int trial = 0; trial < 10; ++trial) {
    const SteeringModel m = random_steering(1 + trial % 4, 1 + trial % 3, 3 + trial, SiteKind::mlp_hidden,
                                            static_cast<std::uint64_t>(trial));
    std::stringstream ss;
    save_steering_model(m, ss);
    const SteeringModel r = load_steering_model(ss);
    EXPECT_EQ(r.clusters, m.clusters);
    EXPECT_EQ(r.site, m.site);
    EXPECT_EQ(r.alpha, m.alpha);
    EXPECT_EQ(r.labels, m.labels);
    EXPECT_EQ(r.flat_centroids(), m.flat_centroids());
    for (std::size_t l = 0; l < m.probes.size(); ++l) {
      EXPECT_EQ(r.probes[l].weight, m.probes[l].weight);
      EXPECT_EQ(r.probes[l].bias, m.probes[l].bias);
    }
  }
}

TEST(SteeringIo, TruncatedAndForeignFilesRejected) {
  const SteeringModel m = random_steering(2, 2, 3, SiteKind::post_mlp, 1);
  std::stringstream ss;
  save_steering_model(m, ss);
  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_steering_model(cut), std::exception);
  std::stringstream foreign("DSET" + bytes.substr(4));
  EXPECT_THROW(load_steering_model(foreign), std::exception);
}

TEST(SteeringIo, DiffSetRoundTrip) {
  DiffSet d;
  d.site = SiteKind::post_attention;
  d.reduction = Reduction::mean_answer_tokens;
  d.num_layers = 2;
  d.dim = 3;
  d.ids = {"x", "y"};
  d.deltas = {RowMatrix<double>::Constant(2, 3, 0.25), RowMatrix<double>::Constant(2, 3, -1.5)};
  d.deltas[1](1, 2) = 8.0;
  std::stringstream ss;
  save_diffset(d, ss);
  const DiffSet r = load_diffset(ss);
  EXPECT_EQ(r.site, d.site);
  EXPECT_EQ(r.reduction, d.reduction);
  EXPECT_EQ(r.ids, d.ids);
  EXPECT_EQ(r.flattened(), d.flattened());
  std::ostringstream csv;
  write_diff_csv(d, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "id,l0_d0,l0_d1,l0_d2,l1_d0,l1_d1,l1_d2");
}

}  // namespace
}  // namespace steerlab
