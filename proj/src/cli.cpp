#include "steerlab/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "parallel.hpp"
#include "steerlab/attribution.hpp"
#include "steerlab/checkpoint.hpp"
#include "steerlab/corpus.hpp"
#include "steerlab/evaluation.hpp"
#include "steerlab/hashing.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/steering_io.hpp"
#include "steerlab/trace_io.hpp"
#include "steerlab/train.hpp"

namespace steerlab {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::string_view kSeedEnv = "STEERLAB_SEED";

// One invocation of a pipeline stage and the provenance it records.
struct Stage {
  std::string command;
  std::vector<std::string> argv;
  fs::path out;
  int threads = 0;
  std::optional<std::uint64_t> seed;
  json config = json::object();
  std::map<std::string, std::string> inputs;
  std::vector<std::string> outputs;
  std::ostream* log = &std::cout;

  void input(const fs::path& p) {
    if (!fs::exists(p)) throw std::runtime_error("input not found: " + p.string());
    inputs[p.string()] = sha256_file(p);
  }
  fs::path output(const std::string& name) {
    outputs.push_back(name);
    const fs::path p = out / name;
    fs::create_directories(p.parent_path());
    return p;
  }
};

struct Common {
  std::string out;
  int threads = 0;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed_opt && c.seed_opt->count() > 0) return c.seed;
  if (const char* env = std::getenv(kSeedEnv.data())) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw CLI::ValidationError(std::string(kSeedEnv), "not an unsigned integer: " + std::string(env));
    }
  }
  return c.seed;
}

void write_manifest(const Stage& s) {
  json outputs = json::object();
  for (const auto& name : s.outputs) outputs[name] = sha256_file(s.out / name);
  json m = {{"command", s.command}, {"argv", s.argv},       {"config", s.config},
            {"inputs", s.inputs},   {"outputs", outputs},   {"threads", s.threads}};
  if (s.seed) m["seed"] = *s.seed;
  std::ofstream os(s.out / ("manifest." + s.command + ".json"));
  os << m.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write manifest in " + s.out.string());
}

std::ofstream open_text(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot open for writing: " + p.string());
  return os;
}

std::vector<BenchmarkItem> load_items(Stage& st, const std::string& pairs, const std::string& problems,
                                      const std::string& style) {
  std::vector<BenchmarkItem> items;
  if (!pairs.empty()) {
    st.input(pairs);
    for (const auto& p : load_pairs(pairs)) items.push_back({p.id, p.question});
    return items;
  }
  const fs::path path = problems.empty() ? bundled_data_dir() / "problems.jsonl" : fs::path(problems);
  st.input(path);
  const auto builtin = builtin_prompt_from_name(style);
  if (!builtin && style != "synth") throw std::runtime_error("unknown prompt style: " + style);
  for (const auto& p : load_problems(path))
    items.push_back({p.name, builtin ? render_prompt(p, *builtin) : synth_question(p)});
  return items;
}

std::vector<int> resolve_layers(const SteeringModel& m, const std::vector<int>& layers) {
  return layers.empty() ? all_layers(m) : layers;
}

void add_common(CLI::App* sub, Common& c, bool seeded) {
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_option("--threads", c.threads, "Worker cap (0 = all cores)")->capture_default_str();
  if (seeded) c.seed_opt = sub->add_option("--seed", c.seed, "Seed (overrides STEERLAB_SEED)")->capture_default_str();
}

struct ItemOptions {
  std::string pairs, problems, style = "synth";
  void add(CLI::App* sub) {
    sub->add_option("--pairs", pairs, "Prompt-pair JSONL; questions are used as prompts");
    sub->add_option("--problems", problems, "Problem JSONL (default: bundled problems.jsonl)");
    sub->add_option("--prompt-style", style,
                    "synth, language-preference, activation-preference or code-generation")
        ->capture_default_str();
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"steerlab: neuron attribution and gradient-refined activation steering"};
  app.name(args.empty() ? "steerlab" : fs::path(args.front()).filename().string());
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::map<std::string, std::function<void(Stage&)>> actions;
  std::map<std::string, Common*> commons;
  std::vector<std::unique_ptr<Common>> common_store;
  auto subcommand = [&](const std::string& name, const std::string& help, bool seeded,
                        std::uint64_t default_seed = 0) {
    CLI::App* sub = app.add_subcommand(name, help);
    common_store.push_back(std::make_unique<Common>());
    common_store.back()->seed = default_seed;
    add_common(sub, *common_store.back(), seeded);
    commons[name] = common_store.back().get();
    return sub;
  };

  // synth
  int synth_n = 500;
  double synth_ratio = 0.7;
  {
    auto* sub = subcommand("synth", "Generate the bilingual synthetic corpus and its train/test split", true, 1);
    sub->add_option("--n", synth_n, "Problem count")->capture_default_str();
    sub->add_option("--train-ratio", synth_ratio, "Train fraction")->capture_default_str();
    actions["synth"] = [&](Stage& st) {
      const SynthCorpus corpus = synth_corpus(synth_n, *st.seed);
      const auto [train, test] = split_indices(corpus.problems.size(), synth_ratio, derive_seed(*st.seed, 1));
      st.config = {{"n", synth_n}, {"train_ratio", synth_ratio}};
      save_problems(corpus.problems, st.output("problems.jsonl"));
      std::vector<PromptPair> tr, te;
      for (auto i : train) tr.push_back(corpus.pairs[i]);
      for (auto i : test) te.push_back(corpus.pairs[i]);
      save_pairs(tr, st.output("pairs_train.jsonl"));
      save_pairs(te, st.output("pairs_test.jsonl"));
      save_sequences(select_sequences(corpus, train), st.output("sequences_train.jsonl"));
      *st.log << "synth: " << corpus.problems.size() << " problems, " << tr.size() << " train / " << te.size()
              << " test pairs\n";
    };
  }

  // train-toy
  std::string tt_sequences;
  ModelConfig tt_config;
  tt_config.max_seq_len = 256;
  TrainOptions tt_options;
  tt_options.steps = 3000;
  {
    auto* sub = subcommand("train-toy", "Train the toy transformer on token sequences", true, 1);
    sub->add_option("--sequences", tt_sequences, "Sequence JSONL (from synth)")->required();
    sub->add_option("--layers", tt_config.num_layers)->capture_default_str();
    sub->add_option("--dim", tt_config.hidden_dim)->capture_default_str();
    sub->add_option("--heads", tt_config.num_heads)->capture_default_str();
    sub->add_option("--ffn", tt_config.ffn_dim)->capture_default_str();
    sub->add_option("--vocab", tt_config.vocab_size)->capture_default_str();
    sub->add_option("--max-seq", tt_config.max_seq_len)->capture_default_str();
    sub->add_option("--steps", tt_options.steps)->capture_default_str();
    sub->add_option("--lr", tt_options.learning_rate)->capture_default_str();
    sub->add_option("--final-lr-fraction", tt_options.final_lr_fraction)->capture_default_str();
    sub->add_option("--batch", tt_options.batch_size)->capture_default_str();
    sub->add_option("--grad-clip", tt_options.grad_clip)->capture_default_str();
    actions["train-toy"] = [&](Stage& st) {
      st.input(tt_sequences);
      ModelConfig cfg = tt_config;
      cfg.seed = *st.seed;
      TrainOptions opt = tt_options;
      opt.seed = derive_seed(*st.seed, 1);
      st.config = json::parse(config_to_json(cfg));
      st.config["steps"] = opt.steps;
      st.config["learning_rate"] = opt.learning_rate;
      st.config["final_lr_fraction"] = opt.final_lr_fraction;
      st.config["batch_size"] = opt.batch_size;
      st.config["grad_clip"] = opt.grad_clip;
      const TrainResult r = train_toy(cfg, load_sequences(tt_sequences), opt);
      save_params(r.params, st.output("model.stlb"));
      auto csv = open_text(st.output("train_loss.csv"));
      csv << "step,loss\n";
      csv.precision(17);
      for (std::size_t i = 0; i < r.loss_history.size(); ++i) csv << i << ',' << r.loss_history[i] << '\n';
      *st.log << "train-toy: final loss " << r.final_loss << '\n';
    };
  }

  // scan
  std::string scan_model, scan_token_name = "cpp";
  int scan_k = kDefaultTopK;
  {
    auto* sub = subcommand("scan", "Static attribution map of every MLP neuron for one token", false);
    sub->add_option("--model", scan_model, "Checkpoint (.stlb)")->required();
    sub->add_option("--token", scan_token_name, "Token name: cpp, python, java, julia, eos, a character or an id")
        ->capture_default_str();
    sub->add_option("--k", scan_k, "Top-k used for normalization")->capture_default_str();
    actions["scan"] = [&](Stage& st) {
      st.input(scan_model);
      const auto t = token_from_name(scan_token_name);
      if (!t) throw std::runtime_error("unknown token: " + scan_token_name);
      st.config = {{"token", scan_token_name}, {"token_id", *t}, {"k", scan_k}};
      const ActivationMap map = scan_token(load_params(fs::path(scan_model)), *t, scan_k);
      auto csv = open_text(st.output("activation_map.csv"));
      write_activation_csv(map, csv);
      for (std::size_t i = 0; i < std::min<std::size_t>(5, map.entries.size()); ++i)
        *st.log << "layer " << map.entries[i].ref.layer << " neuron " << map.entries[i].ref.neuron << " score "
                << map.entries[i].score << '\n';
    };
  }

  // perturb
  std::string pt_model, pt_mode = "add";
  int pt_layer = 0, pt_neuron = 0, pt_reps = 25, pt_max_new = 8;
  double pt_amount = 10.0, pt_temperature = 1.0;
  ItemOptions pt_items;
  {
    auto* sub = subcommand("perturb", "Preference benchmark with one neuron amplified, against baseline", true);
    sub->add_option("--model", pt_model)->required();
    sub->add_option("--layer", pt_layer)->required();
    sub->add_option("--neuron", pt_neuron)->required();
    sub->add_option("--mode", pt_mode, "add or set")->check(CLI::IsMember({"add", "set"}))->capture_default_str();
    sub->add_option("--amount", pt_amount)->capture_default_str();
    sub->add_option("--reps", pt_reps)->capture_default_str();
    sub->add_option("--temperature", pt_temperature)->capture_default_str();
    sub->add_option("--max-new", pt_max_new)->capture_default_str();
    pt_items.add(sub);
    actions["perturb"] = [&](Stage& st) {
      st.input(pt_model);
      const auto items = load_items(st, pt_items.pairs, pt_items.problems, pt_items.style);
      const ModelParams params = load_params(fs::path(pt_model));
      const Transformer model(params);
      const HookSet hooks = amplify_hook(params.config, {pt_layer, pt_neuron},
                                         pt_mode == "add" ? AmplifyMode::add : AmplifyMode::set, pt_amount);
      st.config = {{"layer", pt_layer},   {"neuron", pt_neuron},           {"mode", pt_mode},
                   {"amount", pt_amount}, {"reps", pt_reps},               {"temperature", pt_temperature},
                   {"max_new", pt_max_new}, {"prompt_style", pt_items.style}};
      const auto base = run_preference_benchmark(model_generator(model, pt_max_new), items, pt_reps, pt_temperature,
                                                 *st.seed, st.threads);
      const auto amp = run_preference_benchmark(model_generator(model, pt_max_new, &hooks), items, pt_reps,
                                                pt_temperature, *st.seed, st.threads);
      auto a = open_text(st.output("perturb_baseline.json"));
      write_json(base, a);
      auto b = open_text(st.output("perturb_amplified.json"));
      write_json(amp, b);
      *st.log << "perturb: cpp " << 100.0 * base.rate(LanguageLabel::cpp) << "% -> "
              << 100.0 * amp.rate(LanguageLabel::cpp) << "%\n";
    };
  }

  // extract-diffs
  std::string ed_model, ed_pairs, ed_site = "attn_output", ed_reduction = "final_token";
  {
    auto* sub = subcommand("extract-diffs", "Per-layer style difference vectors for prompt pairs", false);
    sub->add_option("--model", ed_model)->required();
    sub->add_option("--pairs", ed_pairs)->required();
    sub->add_option("--site", ed_site, "attn_output, post_attention, post_mlp or mlp_hidden")->capture_default_str();
    sub->add_option("--reduction", ed_reduction, "final_token or mean_answer_tokens")->capture_default_str();
    actions["extract-diffs"] = [&](Stage& st) {
      st.input(ed_model);
      st.input(ed_pairs);
      const Transformer model(load_params(fs::path(ed_model)));
      const DiffSet d = diff_vectors(model, load_pairs(ed_pairs), site_kind_from_string(ed_site),
                                     reduction_from_string(ed_reduction), st.threads);
      st.config = {{"site", ed_site}, {"reduction", ed_reduction}};
      save_diffset(d, st.output("diffs.dset"));
      auto csv = open_text(st.output("diffs.csv"));
      write_diff_csv(d, csv);
      const auto profile = layer_norm_profile(d);
      auto prof = open_text(st.output("norm_profile.csv"));
      write_norm_profile_csv(profile, prof);
      *st.log << "extract-diffs: " << d.size() << " prompts, last-layer mean norm " << profile.back() << '\n';
    };
  }

  // cluster
  std::string cl_diffs;
  ClusterOptions cl_options;
  {
    auto* sub = subcommand("cluster", "K-means over flattened difference vectors", true);
    sub->add_option("--diffs", cl_diffs)->required();
    sub->add_option("--clusters", cl_options.clusters)->capture_default_str();
    sub->add_option("--max-iter", cl_options.max_iter)->capture_default_str();
    sub->add_option("--tol", cl_options.tol)->capture_default_str();
    sub->add_option("--alpha", cl_options.alpha, "Steering strength stored in the model")->capture_default_str();
    actions["cluster"] = [&](Stage& st) {
      st.input(cl_diffs);
      const DiffSet d = load_diffset(fs::path(cl_diffs));
      ClusterOptions o = cl_options;
      o.seed = *st.seed;
      const KMeansResult km = kmeans(d.flattened(), o.clusters, o.seed, o.max_iter, o.tol);
      const SteeringModel m = cluster_diffs(d, o);
      st.config = {{"clusters", o.clusters}, {"max_iter", o.max_iter}, {"tol", o.tol}, {"alpha", o.alpha}};
      save_steering_model(m, st.output("clusters.strm"));
      auto csv = open_text(st.output("clusters.csv"));
      csv << "id,label\n";
      for (std::size_t i = 0; i < d.ids.size(); ++i) csv << '"' << d.ids[i] << "\"," << m.labels[i] << '\n';
      auto js = open_text(st.output("kmeans.json"));
      js << json{{"sse", km.sse}, {"sse_history", km.sse_history}, {"iterations", km.iterations},
                 {"converged", km.converged}}
                .dump(2)
         << '\n';
      *st.log << "cluster: sse " << km.sse << " after " << km.iterations << " iterations\n";
    };
  }

  // train-probes
  std::string tp_steering, tp_diffs;
  ProbeTrainOptions tp_options;
  {
    auto* sub = subcommand("train-probes", "Per-layer logistic-regression probes (standard ACT)", false);
    sub->add_option("--steering", tp_steering, "Clustered steering model (.strm)")->required();
    sub->add_option("--diffs", tp_diffs)->required();
    sub->add_option("--max-iter", tp_options.max_iter)->capture_default_str();
    sub->add_option("--tol", tp_options.tol)->capture_default_str();
    sub->add_option("--lr", tp_options.learning_rate, "Step size (<= 0: automatic)")->capture_default_str();
    actions["train-probes"] = [&](Stage& st) {
      st.input(tp_steering);
      st.input(tp_diffs);
      SteeringModel m = load_steering_model(fs::path(tp_steering));
      const DiffSet d = load_diffset(fs::path(tp_diffs));
      m.probes = train_probes(d, m.labels, m.clusters, tp_options);
      st.config = {{"max_iter", tp_options.max_iter}, {"tol", tp_options.tol}, {"lr", tp_options.learning_rate}};
      save_steering_model(m, st.output("standard.strm"));
      std::vector<double> acc;
      for (int l = 0; l < m.num_layers; ++l) {
        const RowMatrix<double> x = d.layer(l);
        std::vector<int> pred;
        for (Eigen::Index i = 0; i < x.rows(); ++i) pred.push_back(m.probes[static_cast<std::size_t>(l)].predict(x.row(i).transpose()));
        acc.push_back(accuracy(m.labels, pred));
      }
      auto csv = open_text(st.output("probe_train.csv"));
      csv << "layer,train_accuracy\n";
      for (std::size_t l = 0; l < acc.size(); ++l) csv << l << ',' << acc[l] << '\n';
      *st.log << "train-probes: " << m.num_layers << " probes trained\n";
    };
  }

  // refine
  std::string rf_model, rf_steering, rf_pairs;
  RefineConfig rf_config;
  CLI::Option* rf_alpha_opt = nullptr;
  {
    auto* sub = subcommand("refine", "Gradient refinement of probes under steered generation", false);
    sub->add_option("--model", rf_model)->required();
    sub->add_option("--steering", rf_steering, "Standard steering model (.strm)")->required();
    sub->add_option("--pairs", rf_pairs, "Training pairs, in the order used for clustering")->required();
    sub->add_option("--epochs", rf_config.epochs)->capture_default_str();
    sub->add_option("--lr", rf_config.learning_rate)->capture_default_str();
    rf_alpha_opt = sub->add_option("--alpha", rf_config.alpha, "Injection strength (default: the model's)");
    sub->add_option("--steps", rf_config.steps, "Generated tokens per prompt")->capture_default_str();
    actions["refine"] = [&](Stage& st) {
      st.input(rf_model);
      st.input(rf_steering);
      st.input(rf_pairs);
      const ModelParams params = load_params(fs::path(rf_model));
      const std::string before = params_hash(params);
      const SteeringModel m = load_steering_model(fs::path(rf_steering));
      RefineConfig cfg = rf_config;
      if (rf_alpha_opt->count() == 0) cfg.alpha = m.alpha;
      const RefineResult r = refine(Transformer(params), m, load_pairs(rf_pairs), cfg);
      const std::string after = params_hash(params);
      if (before != after) throw std::runtime_error("refine modified the base model");
      st.config = {{"epochs", cfg.epochs}, {"lr", cfg.learning_rate}, {"alpha", cfg.alpha}, {"steps", cfg.steps},
                   {"base_hash_before", before}, {"base_hash_after", after}};
      save_steering_model(r.model, st.output("refined.strm"));
      auto csv = open_text(st.output("refine_loss.csv"));
      csv << "epoch,mean_ce\n";
      csv.precision(17);
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) csv << e << ',' << r.epoch_loss[e] << '\n';
      if (!r.epoch_loss.empty())
        *st.log << "refine: CE " << r.epoch_loss.front() << " -> " << r.epoch_loss.back() << '\n';
    };
  }

  // steer
  std::string st_model, st_steering, st_pairs, st_prompt;
  int st_reps = 1, st_max_new = 8, st_limit = 0;
  double st_temperature = 1.0;
  std::vector<int> st_layers;
  bool st_per_prompt = false;
  std::optional<double> st_alpha;
  {
    auto* sub = subcommand("steer", "Steered generation for prompts", true);
    sub->add_option("--model", st_model)->required();
    sub->add_option("--steering", st_steering)->required();
    sub->add_option("--pairs", st_pairs, "Prompt pairs; questions are used as prompts");
    sub->add_option("--prompt", st_prompt, "A single prompt text");
    sub->add_option("--limit", st_limit, "Use only the first N pairs (0 = all)")->capture_default_str();
    sub->add_option("--reps", st_reps)->capture_default_str();
    sub->add_option("--temperature", st_temperature)->capture_default_str();
    sub->add_option("--max-new", st_max_new)->capture_default_str();
    sub->add_option("--layers", st_layers, "Layers to steer (default: all)")->delimiter(',');
    sub->add_flag("--per-prompt", st_per_prompt, "Freeze probe choices after the first forward pass");
    sub->add_option("--alpha", st_alpha, "Override the model's steering strength");
    actions["steer"] = [&](Stage& st) {
      if (st_pairs.empty() == st_prompt.empty()) throw CLI::ValidationError("steer", "give exactly one of --pairs, --prompt");
      st.input(st_model);
      st.input(st_steering);
      std::vector<BenchmarkItem> items;
      if (!st_pairs.empty()) {
        st.input(st_pairs);
        for (const auto& p : load_pairs(st_pairs)) items.push_back({p.id, p.question});
        if (st_limit > 0 && items.size() > static_cast<std::size_t>(st_limit)) items.resize(static_cast<std::size_t>(st_limit));
      } else {
        items.push_back({"prompt", st_prompt});
      }
      const Transformer model(load_params(fs::path(st_model)));
      const SteeringModel sm = load_steering_model(fs::path(st_steering));
      SteerOptions so{resolve_layers(sm, st_layers), st_per_prompt ? Selection::per_prompt : Selection::per_token,
                      st_alpha};
      const std::size_t n = items.size() * static_cast<std::size_t>(st_reps);
      std::vector<TokenSeq> outs(n);
      std::vector<std::uint64_t> seeds(n);
      for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(*st.seed, i / st_reps, i % st_reps);
      detail::parallel_for(n, st.threads, [&](std::size_t i) {
        outs[i] = steer_generate(model, render_prompt_tokens(items[i / st_reps].prompt), sm,
                                 {st_temperature, st_max_new, seeds[i]}, so);
      });
      st.config = {{"limit", st_limit}, {"reps", st_reps}, {"temperature", st_temperature}, {"max_new", st_max_new},
                   {"layers", so.layers}, {"per_prompt", st_per_prompt}, {"alpha", so.alpha.value_or(sm.alpha)}};
      auto js = open_text(st.output("steered.jsonl"));
      int cpp = 0;
      for (std::size_t i = 0; i < n; ++i) {
        TokenSeq body = outs[i];
        if (!body.empty() && body.back() == tok::kEos) body.pop_back();
        const std::string text = decode(body);
        const LanguageLabel lang = detect_language(body);
        cpp += lang == LanguageLabel::cpp;
        js << json{{"id", items[i / st_reps].name}, {"rep", i % st_reps}, {"seed", seeds[i]}, {"tokens", outs[i]},
                   {"text", text}, {"language", std::string(to_string(lang))}}
                  .dump(-1, ' ', false, json::error_handler_t::replace)
           << '\n';
      }
      *st.log << "steer: " << n << " samples, cpp rate " << static_cast<double>(cpp) / static_cast<double>(n) << '\n';
    };
  }

  // sweep-alpha
  std::string sw_model, sw_steering, sw_pairs, sw_target = "cpp";
  std::vector<double> sw_alphas = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0};
  int sw_reps = 2, sw_max_new = 4;
  double sw_temperature = 1.0;
  std::vector<int> sw_layers;
  {
    auto* sub = subcommand("sweep-alpha", "Target-fence rate of steered generation per steering strength", true);
    sub->add_option("--model", sw_model)->required();
    sub->add_option("--steering", sw_steering)->required();
    sub->add_option("--pairs", sw_pairs, "Prompt pairs; questions are used as prompts")->required();
    sub->add_option("--alphas", sw_alphas)->delimiter(',')->capture_default_str();
    sub->add_option("--reps", sw_reps)->capture_default_str();
    sub->add_option("--temperature", sw_temperature)->capture_default_str();
    sub->add_option("--max-new", sw_max_new)->capture_default_str();
    sub->add_option("--target", sw_target)->capture_default_str();
    sub->add_option("--layers", sw_layers)->delimiter(',');
    actions["sweep-alpha"] = [&](Stage& st) {
      st.input(sw_model);
      st.input(sw_steering);
      st.input(sw_pairs);
      const Transformer model(load_params(fs::path(sw_model)));
      const SteeringModel sm = load_steering_model(fs::path(sw_steering));
      std::vector<std::string> prompts;
      for (const auto& p : load_pairs(sw_pairs)) prompts.push_back(p.question);
      SteerOptions so{resolve_layers(sm, sw_layers), Selection::per_token, std::nullopt};
      const auto rows = alpha_sweep(model, sm, prompts, sw_alphas, {sw_temperature, sw_max_new, *st.seed}, sw_reps,
                                    so, sw_target, st.threads);
      std::size_t best = 0;
      for (std::size_t i = 1; i < rows.size(); ++i)
        if (rows[i].rate > rows[best].rate) best = i;
      st.config = {{"alphas", sw_alphas}, {"reps", sw_reps},  {"temperature", sw_temperature},
                   {"max_new", sw_max_new}, {"target", sw_target}, {"layers", so.layers},
                   {"best_alpha", rows[best].alpha}};
      auto csv = open_text(st.output("alpha_sweep.csv"));
      csv << "alpha,rate,samples\n";
      csv.precision(17);
      for (const auto& r : rows) csv << r.alpha << ',' << r.rate << ',' << r.samples << '\n';
      for (const auto& r : rows) *st.log << "alpha " << r.alpha << ": " << r.rate << '\n';
      *st.log << "best alpha " << rows[best].alpha << '\n';
    };
  }

  // bench-pref
  std::string bp_model, bp_steering;
  int bp_reps = 25, bp_max_new = 8;
  double bp_temperature = 1.0;
  ItemOptions bp_items;
  std::vector<int> bp_layers;
  std::optional<double> bp_alpha;
  {
    auto* sub = subcommand("bench-pref", "Language-preference benchmark by repeated sampling", true);
    sub->add_option("--model", bp_model)->required();
    sub->add_option("--steering", bp_steering, "Steer generation with this model");
    sub->add_option("--reps", bp_reps)->capture_default_str();
    sub->add_option("--temperature", bp_temperature)->capture_default_str();
    sub->add_option("--max-new", bp_max_new)->capture_default_str();
    sub->add_option("--layers", bp_layers)->delimiter(',');
    sub->add_option("--alpha", bp_alpha);
    bp_items.add(sub);
    actions["bench-pref"] = [&](Stage& st) {
      st.input(bp_model);
      const auto items = load_items(st, bp_items.pairs, bp_items.problems, bp_items.style);
      const Transformer model(load_params(fs::path(bp_model)));
      std::optional<SteeringModel> sm;
      if (!bp_steering.empty()) {
        st.input(bp_steering);
        sm = load_steering_model(fs::path(bp_steering));
      }
      const TextGenerator gen =
          sm ? steered_generator(model, *sm, bp_max_new,
                                 {resolve_layers(*sm, bp_layers), Selection::per_token, bp_alpha})
             : model_generator(model, bp_max_new);
      const auto report = run_preference_benchmark(gen, items, bp_reps, bp_temperature, *st.seed, st.threads);
      st.config = {{"reps", bp_reps}, {"temperature", bp_temperature}, {"max_new", bp_max_new},
                   {"prompt_style", bp_items.style}, {"steered", sm.has_value()}};
      auto js = open_text(st.output("benchmark.json"));
      write_json(report, js);
      auto csv = open_text(st.output("benchmark.csv"));
      write_csv(report, csv);
      const auto pct = report.percentages();
      for (std::size_t i = 0; i < kLanguageCount; ++i)
        *st.log << to_string(static_cast<LanguageLabel>(i)) << ' ' << pct[i] << "%\n";
    };
  }

  // eval-probes
  std::string ep_model, ep_standard, ep_refined, ep_pairs, ep_templates;
  {
    auto* sub = subcommand("eval-probes", "Template-ensemble probe accuracy and macro-F1", false);
    sub->add_option("--model", ep_model)->required();
    sub->add_option("--standard", ep_standard)->required();
    sub->add_option("--refined", ep_refined)->required();
    sub->add_option("--pairs", ep_pairs, "Held-out pairs")->required();
    sub->add_option("--templates", ep_templates, "Directory with cpp.txt and python.txt (default: bundled)");
    actions["eval-probes"] = [&](Stage& st) {
      st.input(ep_model);
      st.input(ep_standard);
      st.input(ep_refined);
      st.input(ep_pairs);
      const fs::path tdir = ep_templates.empty() ? bundled_data_dir() / "templates" : fs::path(ep_templates);
      st.input(tdir / "cpp.txt");
      st.input(tdir / "python.txt");
      const Transformer model(load_params(fs::path(ep_model)));
      const auto report = evaluate_probes(model, load_steering_model(fs::path(ep_standard)),
                                          load_steering_model(fs::path(ep_refined)), load_pairs(ep_pairs),
                                          load_templates(tdir), st.threads);
      auto js = open_text(st.output("probe_eval.json"));
      write_json(report, js);
      auto csv = open_text(st.output("probe_eval.csv"));
      write_csv(report, csv);
      *st.log << "eval-probes: mean accuracy standard " << report.mean.standard_accuracy << ", refined "
              << report.mean.refined_accuracy << '\n';
    };
  }

  // bench-time
  std::string bt_model, bt_steering, bt_prompt = "Task: sort the list in place.\n";
  int bt_runs = 25, bt_warmup = 5, bt_max_new = 32;
  {
    auto* sub = subcommand("bench-time", "Wall-clock timing of vanilla and steered generation", true);
    sub->add_option("--model", bt_model)->required();
    sub->add_option("--steering", bt_steering)->required();
    sub->add_option("--prompt", bt_prompt)->capture_default_str();
    sub->add_option("--runs", bt_runs)->capture_default_str();
    sub->add_option("--warmup", bt_warmup)->capture_default_str();
    sub->add_option("--max-new", bt_max_new)->capture_default_str();
    actions["bench-time"] = [&](Stage& st) {
      st.input(bt_model);
      st.input(bt_steering);
      const Transformer model(load_params(fs::path(bt_model)));
      const SteeringModel sm = load_steering_model(fs::path(bt_steering));
      const TokenSeq prompt = render_prompt_tokens(bt_prompt);
      // Greedy, fixed length: both conditions do identical amounts of model work.
      GenerationSettings gs{0.0, bt_max_new, *st.seed, false};
      const SteerOptions so{all_layers(sm), Selection::per_token, std::nullopt};
      std::vector<TimingReport> reports;
      reports.push_back(timing_bench([&] { model.generate(prompt, gs); }, bt_runs, bt_warmup, "vanilla"));
      reports.push_back(timing_bench([&] { steer_generate(model, prompt, sm, gs, so); }, bt_runs, bt_warmup, "steered"));
      st.config = {{"runs", bt_runs}, {"warmup", bt_warmup}, {"max_new", bt_max_new}, {"prompt", bt_prompt}};
      auto js = open_text(st.output("timing.json"));
      write_json(reports, js);
      for (const auto& r : reports)
        *st.log << r.label << ": " << r.mean_seconds << " s +- " << r.std_seconds << " (" << r.runs << " runs, "
                << r.warmup << " warm-up)\n";
    };
  }

  // record-traces
  std::string rt_model, rt_pairs;
  std::vector<std::string> rt_sites = {"attn_output"};
  {
    auto* sub = subcommand("record-traces", "Write ATRC traces of the toy model for prompt pairs", false);
    sub->add_option("--model", rt_model)->required();
    sub->add_option("--pairs", rt_pairs)->required();
    sub->add_option("--sites", rt_sites)->delimiter(',')->capture_default_str();
    actions["record-traces"] = [&](Stage& st) {
      st.input(rt_model);
      st.input(rt_pairs);
      const Transformer model(load_params(fs::path(rt_model)));
      std::vector<SiteKind> sites;
      for (const auto& s : rt_sites) sites.push_back(site_kind_from_string(s));
      st.config = {{"sites", rt_sites}};
      const auto pairs = load_pairs(rt_pairs);
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        const std::string stem = "traces/" + std::to_string(i);
        write_trace(record_trace(model, p.question, p.positive, sites, p.id, StyleTag::positive),
                    st.output(stem + ".positive.atrc"));
        write_trace(record_trace(model, p.question, p.negative, sites, p.id, StyleTag::negative),
                    st.output(stem + ".negative.atrc"));
      }
      *st.log << "record-traces: " << 2 * pairs.size() << " files\n";
    };
  }

  // trace-diffs
  std::vector<std::string> td_traces;
  std::string td_reduction = "final_token", td_site;
  {
    auto* sub = subcommand("trace-diffs", "Difference vectors from recorded ATRC traces", false);
    sub->add_option("--traces", td_traces, "Trace files or directories (searched for *.atrc)")->required();
    sub->add_option("--reduction", td_reduction)->capture_default_str();
    sub->add_option("--site", td_site, "Site to use when traces hold several");
    actions["trace-diffs"] = [&](Stage& st) {
      std::vector<fs::path> files;
      for (const auto& t : td_traces) {
        if (fs::is_directory(t)) {
          for (const auto& e : fs::recursive_directory_iterator(t))
            if (e.is_regular_file() && e.path().extension() == ".atrc") files.push_back(e.path());
        } else {
          files.emplace_back(t);
        }
      }
      std::sort(files.begin(), files.end());
      std::vector<TraceFile> pos, neg;
      for (const auto& f : files) {
        st.input(f);
        TraceFile tf = read_trace(f);
        if (tf.header.style == StyleTag::positive)
          pos.push_back(std::move(tf));
        else if (tf.header.style == StyleTag::negative)
          neg.push_back(std::move(tf));
      }
      std::optional<SiteKind> site;
      if (!td_site.empty()) site = site_kind_from_string(td_site);
      const DiffSet d = diffs_from_traces(pos, neg, reduction_from_string(td_reduction), site);
      st.config = {{"reduction", td_reduction}, {"site", std::string(to_string(d.site))}, {"files", files.size()}};
      save_diffset(d, st.output("diffs.dset"));
      auto csv = open_text(st.output("diffs.csv"));
      write_diff_csv(d, csv);
      auto prof = open_text(st.output("norm_profile.csv"));
      write_norm_profile_csv(layer_norm_profile(d), prof);
      *st.log << "trace-diffs: " << d.size() << " pairs over " << d.num_layers << " layers\n";
    };
  }

  // replay
  std::string rp_manifest, rp_out;
  std::vector<std::string> rp_rebase;
  CLI::App* replay = app.add_subcommand("replay", "Re-run a stage from its manifest");
  replay->add_option("--manifest", rp_manifest)->required();
  replay->add_option("--out", rp_out, "Output directory for the re-run")->required();
  replay->add_option("--rebase", rp_rebase, "OLD=NEW path prefix substitutions for inputs");

  try {
    std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    if (chosen == replay) {
      std::ifstream is(rp_manifest);
      if (!is) throw std::runtime_error("cannot open manifest: " + rp_manifest);
      const json m = json::parse(is);
      std::vector<std::string> argv = {args.empty() ? "steerlab" : args.front()};
      const auto recorded = m.at("argv").get<std::vector<std::string>>();
      for (std::size_t i = 0; i < recorded.size(); ++i) {
        if (recorded[i] == "--out") {
          ++i;
          continue;
        }
        if (recorded[i].starts_with("--out=")) continue;
        std::string a = recorded[i];
        for (const auto& r : rp_rebase) {
          const auto eq = r.find('=');
          if (eq == std::string::npos) throw CLI::ValidationError("--rebase", "expected OLD=NEW: " + r);
          const std::string from = r.substr(0, eq);
          if (a.starts_with(from)) a = r.substr(eq + 1) + a.substr(from.size());
        }
        argv.push_back(a);
      }
      argv.push_back("--out");
      argv.push_back(rp_out);
      return run_cli(argv, out, err);
    }

    Common& c = *commons.at(name);
    Stage st;
    st.command = name;
    st.argv.assign(args.begin() + 1, args.end());
    st.out = c.out;
    st.threads = c.threads;
    st.log = &out;
    if (c.seed_opt) {
      st.seed = resolve_seed(c);
      if (c.seed_opt->count() == 0) {
        st.argv.push_back("--seed");
        st.argv.push_back(std::to_string(*st.seed));
      }
    }
    fs::create_directories(st.out);
    actions.at(name)(st);
    write_manifest(st);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << name << ": " << e.what() << '\n';
    return kExitFailure;
  }
}

int run_cli(int argc, char** argv) { return run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace steerlab
