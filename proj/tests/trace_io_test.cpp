#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "steerlab/corpus.hpp"
#include "steerlab/trace_io.hpp"

namespace steerlab {
namespace {

namespace fs = std::filesystem;

class TraceTest : public ::testing::Test {
 protected:
  TraceTest() {
    dir_ = fs::temp_directory_path() /
           ("steerlab_trace_" + std::to_string(std::random_device{}()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  ~TraceTest() override { fs::remove_all(dir_); }
  fs::path path(const std::string& name) const { return dir_ / name; }
  fs::path dir_;
};

TraceFile random_trace(std::mt19937_64& rng, const std::vector<SiteKind>& sites, int layers, int tokens,
                       const std::string& id, StyleTag style) {
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  TraceFile t;
  t.header.source_model = "unit/test-model";
  t.header.num_layers = layers;
  t.header.sites = sites;
  t.header.token_count = tokens;
  t.header.answer_start = tokens / 3;
  t.header.prompt_id = id;
  t.header.style = style;
  for (SiteKind s : sites) {
    const int dim = 1 + static_cast<int>(rng() % 9);
    t.header.dims[s] = dim;
    std::vector<RowMatrix<float>> per_layer;
    for (int l = 0; l < layers; ++l) {
      RowMatrix<float> m(tokens, dim);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
      per_layer.push_back(m);
    }
    t.tensors.push_back(per_layer);
  }
  return t;
}

void expect_same(const TraceFile& a, const TraceFile& b) {
  EXPECT_EQ(a.header.source_model, b.header.source_model);
  EXPECT_EQ(a.header.num_layers, b.header.num_layers);
  EXPECT_EQ(a.header.sites, b.header.sites);
  EXPECT_EQ(a.header.dims, b.header.dims);
  EXPECT_EQ(a.header.token_count, b.header.token_count);
  EXPECT_EQ(a.header.answer_start, b.header.answer_start);
  EXPECT_EQ(a.header.prompt_id, b.header.prompt_id);
  EXPECT_EQ(a.header.style, b.header.style);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t s = 0; s < a.tensors.size(); ++s)
    for (std::size_t l = 0; l < a.tensors[s].size(); ++l) {
      const auto& x = a.tensors[s][l];
      const auto& y = b.tensors[s][l];
      ASSERT_EQ(x.size(), y.size());
      EXPECT_EQ(std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())), 0);
    }
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TEST_F(TraceTest, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  const std::vector<SiteKind> all = {SiteKind::attn_output, SiteKind::post_attention, SiteKind::mlp_hidden,
                                     SiteKind::post_mlp};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SiteKind> sites(all.begin(), all.begin() + 1 + trial % 4);
    std::shuffle(sites.begin(), sites.end(), rng);
    const auto t = random_trace(rng, sites, 1 + trial % 3, static_cast<int>(rng() % 12), "p" + std::to_string(trial),
                                trial % 2 ? StyleTag::positive : StyleTag::negative);
    const fs::path p = path("t.atrc");
    write_trace(t, p);
    expect_same(t, read_trace(p));
  }
}

TEST_F(TraceTest, ByteLayout) {
  std::mt19937_64 rng(2);
  const auto t = random_trace(rng, {SiteKind::post_mlp}, 2, 3, "abc", StyleTag::positive);
  write_trace(t, path("t.atrc"));
  const std::string bytes = slurp(path("t.atrc"));
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "ATRC");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&len, bytes.data() + 8, 8);
  EXPECT_EQ(version, kTraceVersion);
  const std::string text = bytes.substr(16, len);
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j.dump(), text);  // canonical: sorted keys, no whitespace
  EXPECT_EQ(j["dtype"], "f32-le");
  EXPECT_EQ(j["style"], "positive");
  EXPECT_EQ(j["sites"], nlohmann::json::array({"post_mlp"}));
  EXPECT_EQ(j["dims"]["post_mlp"], t.header.dims.at(SiteKind::post_mlp));
  const std::size_t payload = bytes.size() - 16 - len;
  EXPECT_EQ(payload, t.header.payload_bytes());
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 16 + len, 4);
  EXPECT_EQ(first, t.tensors[0][0](0, 0));
  float second_layer = 0.0f;
  std::memcpy(&second_layer, bytes.data() + 16 + len + 4 * static_cast<std::size_t>(t.tensors[0][0].size()), 4);
  EXPECT_EQ(second_layer, t.tensors[0][1](0, 0));
}

TEST_F(TraceTest, EmptySiteListIsHeaderOnly) {
  TraceFile t;
  t.header.num_layers = 4;
  t.header.token_count = 7;
  t.header.prompt_id = "empty";
  write_trace(t, path("h.atrc"));
  const auto r = read_trace(path("h.atrc"));
  EXPECT_TRUE(r.header.sites.empty());
  EXPECT_TRUE(r.tensors.empty());
  EXPECT_EQ(r.header.payload_bytes(), 0u);
}

TEST_F(TraceTest, ShapeMismatchRejectedBeforeWriting) {
  std::mt19937_64 rng(3);
  auto t = random_trace(rng, {SiteKind::post_mlp, SiteKind::mlp_hidden}, 2, 4, "x", StyleTag::none);
  t.tensors[1][1].conservativeResize(4, t.tensors[1][1].cols() + 1);
  EXPECT_THROW(write_trace(t, path("bad.atrc")), TraceError);
  EXPECT_FALSE(fs::exists(path("bad.atrc")));
  t = random_trace(rng, {SiteKind::post_mlp}, 2, 4, "x", StyleTag::none);
  t.tensors[0].pop_back();
  EXPECT_THROW(write_trace(t, path("bad.atrc")), TraceError);
  EXPECT_FALSE(fs::exists(path("bad.atrc")));
}

TEST_F(TraceTest, CorruptFilesRejected) {
  std::mt19937_64 rng(4);
  const auto t = random_trace(rng, {SiteKind::attn_output}, 2, 5, "c", StyleTag::negative);
  write_trace(t, path("ok.atrc"));
  const std::string bytes = slurp(path("ok.atrc"));

  dump(path("magic.atrc"), "XTRC" + bytes.substr(4));
  try {
    read_trace(path("magic.atrc"));
    FAIL() << "bad magic accepted";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }

  dump(path("short.atrc"), bytes.substr(0, bytes.size() - 6));
  const std::string want = "expected " + std::to_string(t.header.payload_bytes()) + " bytes, got " +
                           std::to_string(t.header.payload_bytes() - 6);
  for (auto reader : {+[](const fs::path& p) { read_trace(p); }, +[](const fs::path& p) { read_trace_header(p); }}) {
    try {
      reader(path("short.atrc"));
      FAIL() << "truncated payload accepted";
    } catch (const TraceError& e) {
      EXPECT_NE(std::string(e.what()).find(want), std::string::npos) << e.what();
    }
  }

  dump(path("long.atrc"), bytes + "xyzw");
  EXPECT_THROW(read_trace(path("long.atrc")), TraceError);

  std::string v2 = bytes;
  v2[4] = 9;
  dump(path("version.atrc"), v2);
  EXPECT_THROW(read_trace(path("version.atrc")), TraceError);

  EXPECT_THROW(read_trace(path("missing.atrc")), TraceError);
}

TEST_F(TraceTest, HeaderOnlyReadEchoesFields) {
  std::mt19937_64 rng(5);
  const auto t = random_trace(rng, {SiteKind::post_attention, SiteKind::post_mlp}, 3, 6, "id-7", StyleTag::positive);
  write_trace(t, path("t.atrc"));
  const TraceHeader h = read_trace_header(path("t.atrc"));
  EXPECT_EQ(h.prompt_id, "id-7");
  EXPECT_EQ(h.sites, t.header.sites);
  EXPECT_EQ(h.dims, t.header.dims);
  EXPECT_EQ(h.num_layers, 3);
  EXPECT_EQ(h.source_model, "unit/test-model");
}

TEST(TraceHeader, Validation) {
  TraceHeader h;
  h.num_layers = 1;
  h.sites = {SiteKind::post_mlp};
  EXPECT_THROW(h.validate(), TraceError);  // no dim
  h.dims[SiteKind::post_mlp] = 4;
  EXPECT_NO_THROW(h.validate());
  h.dtype = "bf16";
  EXPECT_THROW(h.validate(), TraceError);
  h.dtype = "f32-le";
  h.sites.push_back(SiteKind::post_mlp);
  EXPECT_THROW(h.validate(), TraceError);
  h.sites.pop_back();
  h.answer_start = 2;
  EXPECT_THROW(h.validate(), TraceError);
  EXPECT_THROW(style_tag_from_string("neutral"), TraceError);
}

ModelConfig toy_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 20;
  c.vocab_size = tok::kMinVocab;
  c.max_seq_len = 256;
  return c;
}

TEST_F(TraceTest, RecordedTracesReproduceLiveDiffs) {
  const Transformer model(init_params(toy_config()));
  auto pairs = synth_corpus(30, 4).pairs;
  pairs.resize(8);
  const std::vector<SiteKind> sites = {SiteKind::attn_output, SiteKind::mlp_hidden};
  std::vector<TraceFile> pos, neg;
  for (const auto& p : pairs) {
    write_trace(record_trace(model, p.question, p.positive, sites, p.id, StyleTag::positive), path(p.id + ".pos"));
    write_trace(record_trace(model, p.question, p.negative, sites, p.id, StyleTag::negative), path(p.id + ".neg"));
  }
  // Negative files read back in reverse to exercise pairing by id.
  for (const auto& p : pairs) pos.push_back(read_trace(path(p.id + ".pos")));
  for (auto it = pairs.rbegin(); it != pairs.rend(); ++it) neg.push_back(read_trace(path(it->id + ".neg")));
  for (SiteKind site : sites)
    for (Reduction red : {Reduction::final_token, Reduction::mean_answer_tokens}) {
      const DiffSet live = diff_vectors(model, pairs, site, red);
      const DiffSet traced = diffs_from_traces(pos, neg, red, site);
      EXPECT_EQ(traced.ids, live.ids);
      EXPECT_EQ(traced.site, site);
      for (std::size_t i = 0; i < live.size(); ++i) EXPECT_EQ(traced.deltas[i], live.deltas[i]);
      const DiffSet swapped = diffs_from_traces(neg, pos, red, site);
      for (std::size_t i = 0; i < live.size(); ++i) {
        const auto j = static_cast<std::size_t>(
            std::find(swapped.ids.begin(), swapped.ids.end(), live.ids[i]) - swapped.ids.begin());
        EXPECT_EQ(swapped.deltas[j], -live.deltas[i]);
      }
    }
}

TEST(DiffsFromTraces, IdenticalPayloadsGiveZero) {
  std::mt19937_64 rng(6);
  auto t = random_trace(rng, {SiteKind::post_mlp}, 2, 5, "same", StyleTag::positive);
  auto u = t;
  u.header.style = StyleTag::negative;
  const DiffSet d = diffs_from_traces({t}, {u}, Reduction::mean_answer_tokens);
  EXPECT_EQ(d.deltas[0].cwiseAbs().maxCoeff(), 0.0);
}

TEST(DiffsFromTraces, PairingErrors) {
  std::mt19937_64 rng(7);
  const auto a = random_trace(rng, {SiteKind::post_mlp}, 2, 5, "a", StyleTag::positive);
  auto b = a;
  b.header.prompt_id = "b";
  EXPECT_THROW(diffs_from_traces({a}, {b}, Reduction::final_token), TraceError);
  EXPECT_THROW(diffs_from_traces({a, a}, {a, a}, Reduction::final_token), TraceError);
  EXPECT_THROW(diffs_from_traces({a}, {}, Reduction::final_token), TraceError);
  EXPECT_THROW(diffs_from_traces({}, {}, Reduction::final_token), TraceError);
  auto wide = a;
  wide.header.dims[SiteKind::post_mlp] += 1;
  wide.tensors[0][0].conservativeResize(5, wide.header.dims[SiteKind::post_mlp]);
  wide.tensors[0][1].conservativeResize(5, wide.header.dims[SiteKind::post_mlp]);
  EXPECT_THROW(diffs_from_traces({a}, {wide}, Reduction::final_token), TraceError);
  const auto two = random_trace(rng, {SiteKind::post_mlp, SiteKind::mlp_hidden}, 2, 5, "t", StyleTag::positive);
  EXPECT_THROW(diffs_from_traces({two}, {two}, Reduction::final_token), TraceError);
  EXPECT_THROW(diffs_from_traces({a}, {a}, Reduction::final_token, SiteKind::attn_output), TraceError);
}

TEST(DiffsFromTraces, LargeStyleTracesClusterIntoThree) {
  // Hidden-state traces shaped like an external 8-layer model; three planted directions.
  std::mt19937_64 rng(8);
  std::normal_distribution<float> g(0.0f, 0.05f);
  const int L = 8, D = 48, T = 6, n = 30;
  std::vector<TraceFile> pos, neg;
  for (int i = 0; i < n; ++i) {
    TraceFile p;
    p.header.source_model = "external/8-layer";
    p.header.num_layers = L;
    p.header.sites = {SiteKind::post_mlp};
    p.header.dims[SiteKind::post_mlp] = D;
    p.header.token_count = T;
    p.header.prompt_id = "q" + std::to_string(i);
    p.header.style = StyleTag::positive;
    TraceFile q = p;
    q.header.style = StyleTag::negative;
    p.tensors.assign(1, {});
    q.tensors.assign(1, {});
    for (int l = 0; l < L; ++l) {
      RowMatrix<float> a(T, D), b(T, D);
      for (Eigen::Index k = 0; k < a.size(); ++k) {
        a.data()[k] = g(rng);
        b.data()[k] = g(rng);
      }
      a.col((i % 3) * 5 + l % 5).array() += 1.0f;
      p.tensors[0].push_back(a);
      q.tensors[0].push_back(b);
    }
    pos.push_back(p);
    neg.push_back(q);
  }
  const DiffSet d = diffs_from_traces(pos, neg, Reduction::mean_answer_tokens);
  SteeringModel m = cluster_diffs(d, {3, 0, 300, 0.0, 1.0});
  m.probes = train_probes(d, m.labels, 3);
  EXPECT_NO_THROW(m.validate());
  EXPECT_EQ(m.clusters, 3);
  EXPECT_EQ(m.num_layers, L);
  for (int i = 0; i < n; ++i) EXPECT_EQ(m.labels[static_cast<std::size_t>(i)], m.labels[static_cast<std::size_t>(i % 3)]);
  EXPECT_NE(m.labels[0], m.labels[1]);
  EXPECT_NE(m.labels[1], m.labels[2]);
  EXPECT_NE(m.labels[0], m.labels[2]);
}

}  // namespace
}  // namespace steerlab
