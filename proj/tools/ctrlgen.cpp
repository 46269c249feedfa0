// ctrlgen: corpus generation, training, guided generation, evaluation and
// benchmarking from the command line.
//
// Failures print one line "error: <category>: <message>" to stderr and exit
// with a category-specific code.

#include <charconv>
#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctrlgen/ablation.hpp"
#include "ctrlgen/backbone.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/run_config.hpp"
#include "ctrlgen/sampling.hpp"
#include "ctrlgen/tensor_io.hpp"
#include "ctrlgen/training.hpp"

using namespace ctrlgen;

namespace {

// Shortest round-trip text with a visible decimal point or exponent, e.g.
// 5.0, 0.3, 5e-5.
std::string show(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  const auto e = s.find('e');
  if (e != std::string::npos) {
    std::size_t d = e + 1;
    if (d < s.size() && (s[d] == '-' || s[d] == '+')) ++d;
    while (d + 1 < s.size() && s[d] == '0') s.erase(d, 1);
  } else if (s.find('.') == std::string::npos) {
    s += ".0";
  }
  return s;
}

std::string dflt(double v) { return " (default " + show(v) + ")"; }
std::string dflt(std::size_t v) { return " (default " + std::to_string(v) + ")"; }
std::string dflt(int v) { return " (default " + std::to_string(v) + ")"; }
std::string dflt(const std::string& v) { return " (default " + v + ")"; }

void write_text(const std::string& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::string& path) {
  const auto b = read_file(path);
  return {b.begin(), b.end()};
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError("bad seed list '" + text + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

// The config file must be applied before flags so that flags win. It is
// found by scanning argv ahead of the real parse.
RunConfig preload_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    for (const std::string key : {"--config", "--spec"}) {
      if (a == key && i + 1 < argc) return load_run_config(argv[i + 1]);
      if (a.rfind(key + "=", 0) == 0) return load_run_config(a.substr(key.size() + 1));
    }
  }
  return {};
}

struct Cli {
  RunConfig cfg;
  std::string config_path;
  std::string out;
  std::string corpus, vocab, backbone, attribute;
  std::vector<std::string> discs;
  std::string prefix, tokens, samples, judge = "oracle", mode, seeds = "1,2,3";
  std::string cache, out_md;
  std::size_t num = 10;
  std::size_t bench_num = 100;
  std::size_t bench_tokens = 40;
  bool no_kd = false, trace = false, no_cr = false;
  double tau_ar = 0.9, tau_ppl = 0.0;
};

void add_config(CLI::App* sub, Cli& c, const char* name = "--config") {
  sub->add_option(name, c.config_path, "JSON run configuration; flags override it");
}

int cmd_gen_corpus(Cli& c) {
  RunConfig& cfg = c.cfg;
  const SynthSpec spec = cfg.spec.resolve();
  const auto data = synth_corpus(spec, cfg.n_per_class);
  const Vocabulary vocab = Vocabulary::synthetic(spec.vocab_size);
  cfg.paths["out"] = c.out;
  save_jsonl(c.out, data, vocab);
  write_text(c.out + ".vocab", vocab.serialize());
  RunConfig echo = cfg;
  echo.spec = spec;
  write_meta(c.out, "gen-corpus", echo, {});
  return 0;
}

int cmd_train_backbone(Cli& c) {
  RunConfig& cfg = c.cfg;
  const std::string vocab_path = c.vocab.empty() ? c.corpus + ".vocab" : c.vocab;
  const Vocabulary vocab = Vocabulary::parse(read_text(vocab_path));
  const auto data = load_jsonl(c.corpus, vocab);
  const BackboneModel model = train_backbone(token_sequences(data), vocab, cfg.backbone);
  model.save(c.out);
  cfg.paths["corpus"] = c.corpus;
  cfg.paths["vocab"] = vocab_path;
  cfg.paths["out"] = c.out;
  write_meta(c.out, "train-backbone", cfg, {{"corpus", c.corpus}, {"vocab", vocab_path}});
  return 0;
}

int cmd_train_disc(Cli& c) {
  RunConfig& cfg = c.cfg;
  if (c.no_kd) cfg.train.kd_enabled = false;
  cfg.train.validate();
  const BackboneModel bb = BackboneModel::load(c.backbone);
  const auto data = load_jsonl(c.corpus, bb.vocab());
  const std::string attr = c.attribute.empty() ? cfg.spec.attribute : c.attribute;

  std::optional<FeatureCache> cache;
  if (!c.cache.empty()) {
    bool have = false;
    try {
      read_file(c.cache);
      have = true;
    } catch (const IoError&) {
    }
    if (have) {
      cache = deserialize_feature_cache(read_file(c.cache));
      if (cache->backbone_hash != bb.hash() || cache->corpus_hash != corpus_hash(data)) {
        throw StaleCacheError("feature cache " + c.cache + " does not match backbone or corpus");
      }
    } else {
      cache = build_feature_cache(bb, data);
      write_file(c.cache, serialize_feature_cache(*cache));
    }
  }
  const TrainResult res = train_discriminator(data, bb, cfg.train, cache ? &*cache : nullptr, attr);
  save_discriminator(c.out, res.params, bb.hash());
  write_text(c.out + ".log.jsonl", training_log_jsonl(res.log));
  cfg.paths["corpus"] = c.corpus;
  cfg.paths["backbone"] = c.backbone;
  cfg.paths["out"] = c.out;
  write_meta(c.out, "train-disc", cfg, {{"corpus", c.corpus}, {"backbone", c.backbone}});
  return 0;
}

int cmd_generate(Cli& c) {
  RunConfig& cfg = c.cfg;
  if (!c.mode.empty()) cfg.sampler.mode = parse_decode_mode(c.mode);
  cfg.sampler.validate();
  const BackboneModel bb = BackboneModel::load(c.backbone);
  std::vector<std::unique_ptr<FasterGuide>> owned;
  std::vector<const Guide*> guides;
  for (const auto& path : c.discs) {
    owned.push_back(std::make_unique<FasterGuide>(load_discriminator(path, bb), bb));
    guides.push_back(owned.back().get());
  }
  if (cfg.sampler.mode != DecodeMode::unconditional && guides.empty()) {
    throw ConfigError("mode " + to_string(cfg.sampler.mode) + " needs at least one --disc");
  }
  const auto prefix = bb.vocab().encode(c.prefix);
  const auto gens = generate_many(bb, guides, prefix, cfg.sampler, c.num, c.trace);
  write_text(c.out, generations_jsonl(gens, bb.vocab()));

  cfg.paths["backbone"] = c.backbone;
  cfg.paths["out"] = c.out;
  std::map<std::string, std::string> inputs{{"backbone", c.backbone}};
  for (std::size_t i = 0; i < c.discs.size(); ++i) {
    cfg.paths["disc" + std::to_string(i)] = c.discs[i];
    inputs["disc" + std::to_string(i)] = c.discs[i];
  }
  write_meta(c.out, "generate", cfg, inputs);
  return 0;
}

int cmd_trace(Cli& c) {
  const BackboneModel bb = BackboneModel::load(c.backbone);
  if (c.discs.size() != 1) throw ConfigError("trace takes exactly one --disc");
  const DiscriminatorParams head = load_discriminator(c.discs.front(), bb);
  const auto toks = bb.vocab().encode(c.tokens);
  if (toks.size() < 2) throw ConfigError("trace needs at least two tokens");
  const Vector fast = stepwise_trace(head, bb, toks, TraceHead::faster);
  const Vector normal = stepwise_trace(head, bb, toks, TraceHead::normal);
  std::printf("%4s  %-12s %10s %10s\n", "i", "token", "faster", "normal");
  for (std::size_t i = 0; i < fast.size(); ++i) {
    std::printf("%4zu  %-12s %10.4f %10.4f\n", i + 2, bb.vocab().token(toks[i + 1]).c_str(), fast[i],
                normal[i]);
  }
  return 0;
}

int cmd_eval(Cli& c) {
  RunConfig& cfg = c.cfg;
  const BackboneModel bb = BackboneModel::load(c.backbone);
  const TokenSequences samples = read_generations(read_text(c.samples), bb.vocab(), false);
  std::unique_ptr<Judge> judge;
  std::map<std::string, std::string> inputs{{"backbone", c.backbone}, {"samples", c.samples}};
  if (c.judge == "oracle") {
    cfg.spec = cfg.spec.resolve();
    judge = std::make_unique<OracleJudge>(cfg.spec);
  } else {
    judge = std::make_unique<HeadJudge>(load_discriminator(c.judge, bb), bb);
    inputs["judge"] = c.judge;
  }
  EvalOptions opts;
  opts.tau_ar = c.tau_ar;
  opts.tau_ppl = c.tau_ppl > 0.0 ? c.tau_ppl : relative_ppl_threshold(bb, cfg.sampler.seed);
  TokenSequences corpus;
  if (!c.corpus.empty()) {
    corpus = token_sequences(load_jsonl(c.corpus, bb.vocab()));
    opts.corpus = &corpus;
    opts.resemblance.seed = cfg.sampler.seed;
    inputs["corpus"] = c.corpus;
  }
  const EvalReport rep = evaluate(samples, *judge, bb, opts);

  cfg.paths["out"] = c.out;
  for (const auto& [k, v] : inputs) cfg.paths[k] = v;
  Json conf;
  conf["run"] = to_json(cfg);
  conf["judge"] = c.judge;
  conf["tau_ar"] = c.tau_ar;
  Json hashes = Json::object();
  for (const auto& [k, v] : inputs) hashes[k] = hash_hex(file_hash(v));
  conf["input_hashes"] = hashes;
  write_text(c.out, eval_report_json(rep, conf.dump()));
  write_meta(c.out, "eval", cfg, inputs);
  return 0;
}

int cmd_bench(Cli& c) {
  const BackboneModel bb = BackboneModel::load(c.backbone);
  if (c.discs.size() != 1) throw ConfigError("bench takes exactly one --disc");
  const DiscriminatorParams head = load_discriminator(c.discs.front(), bb);
  std::vector<BenchMode> modes;
  if (c.mode == "both") {
    modes = {BenchMode::faster, BenchMode::naive_normal};
  } else {
    modes = {parse_bench_mode(c.mode.empty() ? "faster" : c.mode)};
  }
  BenchConfig bc;
  bc.n_samples = c.bench_num;
  bc.tokens_per_sample = c.bench_tokens;
  bc.sampler = c.cfg.sampler;
  std::vector<BenchResult> rows;
  for (BenchMode m : modes) rows.push_back(bench_time_per_token(bb, head, m, bc));
  const std::string csv = bench_csv(rows);
  if (c.out.empty()) {
    std::cout << csv;
  } else {
    write_text(c.out, csv);
  }
  return 0;
}

ExperimentConfig experiment_config(const RunConfig& cfg) {
  ExperimentConfig e;
  e.spec = cfg.spec;
  e.backbone = cfg.backbone;
  e.sampler = cfg.sampler;
  e.n_per_class = cfg.n_per_class;
  return e;
}

int cmd_ablate(Cli& c) {
  const auto seeds = parse_seeds(c.seeds);
  const AblationTable t = run_ablation(experiment_config(c.cfg), seeds);
  std::cout << ablation_markdown(t);
  if (!c.out.empty()) write_text(c.out, ablation_csv(t));
  if (!c.out_md.empty()) write_text(c.out_md, ablation_markdown(t));
  return 0;
}

int cmd_sweep(Cli& c) {
  const auto seeds = parse_seeds(c.seeds);
  const SweepResult r = run_lambda_sweep(experiment_config(c.cfg), seeds, kSweepLambdas, !c.no_cr);
  const std::string csv = sweep_csv(r);
  std::cout << csv;
  if (!c.out.empty()) write_text(c.out, csv);
  return 0;
}

struct Failure {
  const char* category;
  int code;
};

int fail(Failure f, const std::string& what) {
  std::string line = what;
  for (char& ch : line) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "error: " << f.category << ": " << line << '\n';
  return f.code;
}

}  // namespace

int main(int argc, char** argv) {
  Cli c;
  try {
    c.cfg = preload_config(argc, argv);
  } catch (const IoError& e) {
    return fail({"missing-file", 3}, e.what());
  } catch (const std::exception& e) {
    return fail({"bad-config", 2}, e.what());
  }
  RunConfig& cfg = c.cfg;
  const RunConfig d;  // defaults for the help text

  CLI::App app{"Attribute-guided text generation with a frozen backbone and a small discriminator."};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic labelled corpus (JSON lines)");
  add_config(gen, c, "--spec,--config");
  gen->add_option("--out", c.out, "corpus path; a .vocab file is written beside it")->required();
  gen->add_option("--seed", cfg.spec.seed, "sampling seed" + dflt(std::to_string(d.spec.seed)));
  gen->add_option("--partition-seed", cfg.spec.partition_seed, "seed for the attribute subsets");
  gen->add_option("--vocab-size", cfg.spec.vocab_size, "vocabulary size" + dflt(d.spec.vocab_size));
  gen->add_option("--beta", cfg.spec.beta, "in-class emission probability" + dflt(d.spec.beta));
  gen->add_option("--n-per-class", cfg.n_per_class, "sequences per class" + dflt(d.n_per_class));
  gen->add_option("--attribute", cfg.spec.attribute, "attribute name" + dflt(d.spec.attribute));

  auto* tb = app.add_subcommand("train-backbone", "Train the frozen backbone language model");
  add_config(tb, c);
  tb->add_option("--corpus", c.corpus, "training corpus")->required();
  tb->add_option("--vocab", c.vocab, "vocabulary file (default <corpus>.vocab)");
  tb->add_option("--out", c.out, "checkpoint path")->required();
  tb->add_option("--epochs", cfg.backbone.epochs, "epochs" + dflt(d.backbone.epochs));
  tb->add_option("--lr", cfg.backbone.lr, "SGD learning rate" + dflt(d.backbone.lr));
  tb->add_option("--seed", cfg.backbone.seed, "seed" + dflt(std::to_string(d.backbone.seed)));
  tb->add_option("--d-h", cfg.backbone.d_h, "hidden size" + dflt(d.backbone.d_h));
  tb->add_option("--d-e", cfg.backbone.d_e, "embedding size" + dflt(d.backbone.d_e));

  auto* td = app.add_subcommand("train-disc", "Train the two-head discriminator on a frozen backbone");
  add_config(td, c);
  td->add_option("--corpus", c.corpus, "labelled corpus")->required();
  td->add_option("--backbone", c.backbone, "backbone checkpoint")->required();
  td->add_option("--attribute", c.attribute, "attribute name stored in the checkpoint");
  td->add_option("--out", c.out, "checkpoint path")->required();
  td->add_flag("--no-kd", c.no_kd, "train the faster head alone, without distillation");
  td->add_option("--cache", c.cache, "feature cache file (built when absent)");
  td->add_option("--lr", cfg.train.lr, "AdamW learning rate" + dflt(d.train.lr));
  td->add_option("--batch-size", cfg.train.batch_size, "batch size" + dflt(d.train.batch_size));
  td->add_option("--epochs", cfg.train.epochs, "epochs" + dflt(d.train.epochs));
  td->add_option("--weight-decay", cfg.train.weight_decay, "decoupled weight decay" + dflt(d.train.weight_decay));
  td->add_option("--seed", cfg.train.seed, "seed" + dflt(std::to_string(d.train.seed)));

  auto* ge = app.add_subcommand("generate", "Sample continuations");
  add_config(ge, c);
  ge->add_option("--backbone", c.backbone, "backbone checkpoint")->required();
  ge->add_option("--disc", c.discs, "discriminator checkpoint; repeat to combine attributes");
  ge->add_option("--prefix", c.prefix, "whitespace-separated prefix tokens");
  ge->add_option("--num", c.num, "number of samples" + dflt(c.num));
  ge->add_option("--lambda", cfg.sampler.lambda, "attribute weight" + dflt(d.sampler.lambda));
  ge->add_option("--rho1", cfg.sampler.rho1, "nucleus mass" + dflt(d.sampler.rho1));
  ge->add_option("--rho2", cfg.sampler.rho2, "attribute-filter mass" + dflt(d.sampler.rho2));
  ge->add_option("--max-len", cfg.sampler.max_len, "maximum tokens per sample" + dflt(d.sampler.max_len));
  ge->add_option("--mode", c.mode, "gemini | no-ad | uncond" + dflt(to_string(d.sampler.mode)));
  ge->add_flag("--trace", c.trace, "record per-step probabilities");
  ge->add_option("--seed", cfg.sampler.seed, "seed" + dflt(std::to_string(d.sampler.seed)));
  ge->add_option("--out", c.out, "samples path (JSON lines)")->required();

  auto* tr = app.add_subcommand("trace", "Print the stepwise attribute probabilities of a sequence");
  tr->add_option("--backbone", c.backbone, "backbone checkpoint")->required();
  tr->add_option("--disc", c.discs, "discriminator checkpoint")->required();
  tr->add_option("--tokens", c.tokens, "whitespace-separated tokens")->required();

  auto* ev = app.add_subcommand("eval", "Score samples: AR, PPL, ER, Dist-n and optionally CR");
  add_config(ev, c);
  ev->add_option("--spec", c.config_path, "corpus specification for the oracle judge");
  ev->add_option("--samples", c.samples, "samples from generate")->required();
  ev->add_option("--judge", c.judge, "oracle, or a discriminator checkpoint" + dflt(c.judge));
  ev->add_option("--backbone", c.backbone, "backbone checkpoint")->required();
  ev->add_option("--corpus", c.corpus, "reference corpus; enables the resemblance score");
  ev->add_option("--tau-ar", c.tau_ar, "posterior threshold for ER" + dflt(c.tau_ar));
  ev->add_option("--tau-ppl", c.tau_ppl, "perplexity threshold for ER (default: 1.5 x median of 200 unguided samples)");
  ev->add_option("--seed", cfg.sampler.seed, "seed" + dflt(std::to_string(d.sampler.seed)));
  ev->add_option("--out", c.out, "report path (JSON)")->required();

  auto* be = app.add_subcommand("bench", "Time per generated token");
  add_config(be, c);
  be->add_option("--backbone", c.backbone, "backbone checkpoint")->required();
  be->add_option("--disc", c.discs, "discriminator checkpoint")->required();
  be->add_option("--mode", c.mode, "faster | naive | both (default faster)");
  be->add_option("--num", c.bench_num, "samples" + dflt(c.bench_num));
  be->add_option("--tokens", c.bench_tokens, "tokens per sample" + dflt(c.bench_tokens));
  be->add_option("--seed", cfg.sampler.seed, "seed" + dflt(std::to_string(d.sampler.seed)));
  be->add_option("--out", c.out, "CSV path (stdout when absent)");

  auto* ab = app.add_subcommand("ablate", "Ablation table over seeds");
  add_config(ab, c);
  ab->add_option("--seeds", c.seeds, "comma-separated seeds" + dflt(c.seeds));
  ab->add_option("--out", c.out, "CSV path");
  ab->add_option("--out-md", c.out_md, "Markdown path");

  auto* sw = app.add_subcommand("sweep", "Attribute-weight sweep over lambda in {0,1,2,5,8}");
  add_config(sw, c);
  sw->add_option("--seeds", c.seeds, "comma-separated seeds" + dflt(c.seeds));
  sw->add_flag("--no-cr", c.no_cr, "skip the resemblance score");
  sw->add_option("--out", c.out, "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail({"bad-config", 2}, e.what());
  }

  try {
    if (*gen) return cmd_gen_corpus(c);
    if (*tb) return cmd_train_backbone(c);
    if (*td) return cmd_train_disc(c);
    if (*ge) return cmd_generate(c);
    if (*tr) return cmd_trace(c);
    if (*ev) return cmd_eval(c);
    if (*be) return cmd_bench(c);
    if (*ab) return cmd_ablate(c);
    if (*sw) return cmd_sweep(c);
  } catch (const IoError& e) {
    return fail({"missing-file", 3}, e.what());
  } catch (const HashMismatchError& e) {
    return fail({"hash-mismatch", 4}, e.what());
  } catch (const StaleCacheError& e) {
    return fail({"hash-mismatch", 4}, e.what());
  } catch (const ConfigError& e) {
    return fail({"bad-config", 2}, e.what());
  } catch (const FormatError& e) {
    return fail({"bad-format", 5}, e.what());
  } catch (const CorpusError& e) {
    return fail({"bad-format", 5}, e.what());
  } catch (const std::invalid_argument& e) {
    return fail({"bad-config", 2}, e.what());
  } catch (const std::out_of_range& e) {
    return fail({"bad-config", 2}, e.what());
  } catch (const std::exception& e) {
    return fail({"internal", 1}, e.what());
  }
  return 1;
}
