// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "ctrlgen/ablation.hpp"
#include "ctrlgen/backbone.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/sampling.hpp"
#include "ctrlgen/tensor_io.hpp"
#include "ctrlgen/training.hpp"
#include "json.hpp"

using namespace ctrlgen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Line {
  int id;
  std::string name;
  Outcome out;
  double seconds;
  double budget;
};

std::string fmt(const char* f, double a) {
  char b[64];
  std::snprintf(b, sizeof b, f, a);
  return b;
}

std::vector<Line> g_lines;
std::set<int> g_only;  // empty: run everything

void run(int id, const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  if (!g_only.empty() && !g_only.count(id)) return;
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (s > budget_s) {
    o.pass = false;
    o.detail += fmt(" (over the %.0fs budget)", budget_s);
  }
  g_lines.push_back({id, name, o, s, budget_s});
  std::printf("[%s] %2d %-28s %7.1fs  %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), s, o.detail.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------- helpers

Vector central_difference(const std::function<double(const Vector&)>& f, Vector x, double eps = 1e-6) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

double rel_err(const Vector& a, const Vector& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i] + b[i] * b[i];
  }
  return den == 0 ? 0.0 : std::sqrt(num) / std::sqrt(den);
}

Vector flat(std::vector<TensorRef> refs) {
  Vector out;
  for (const auto& t : refs) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

void assign(std::vector<TensorRef> refs, const Vector& v) {
  std::size_t k = 0;
  for (auto& t : refs) {
    for (double& x : t.values) x = v[k++];
  }
}

void randomize(std::vector<TensorRef> refs, Rng& rng, double scale) {
  for (auto& t : refs) fill_uniform(t.values, rng, -scale, scale);
}

Vector random_vec(Rng& rng, std::size_t n) {
  Vector v(n);
  fill_uniform(v, rng, -1, 1);
  return v;
}

// ---------------------------------------------------------- criterion 1

Outcome gradients() {
  Rng rng(101);
  double worst_n = 0, worst_f = 0, worst_g = 0, worst_b = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t d_h = 3 + rng.below(5), d_e = 2 + rng.below(4);
    DiscriminatorParams p(d_h, d_e, "a");
    randomize(p.tensors(), rng, 0.8);
    const Vector h = random_vec(rng, d_h), hp = random_vec(rng, d_h), e = random_vec(rng, d_e);

    DiscriminatorParams g = zeros_like(p);
    Vector dh = normal_backward(p, h, 1.0, g);
    DiscriminatorParams q = p;
    auto fn = [&](const Vector& th) {
      assign(q.tensors(), th);
      return normal_logit(q, h);
    };
    Vector analytic = flat(g.tensors());
    Vector numeric = central_difference(fn, flat(p.tensors()));
    analytic.insert(analytic.end(), dh.begin(), dh.end());
    const Vector nh = central_difference([&](const Vector& x) { return normal_logit(p, x); }, h);
    numeric.insert(numeric.end(), nh.begin(), nh.end());
    worst_n = std::max(worst_n, rel_err(analytic, numeric));

    DiscriminatorParams gf = zeros_like(p);
    FasterCache fc;
    faster_forward(p, hp, e, fc);
    Vector d_hp, d_emb;
    faster_backward(p, fc, 1.0, gf, &d_hp, &d_emb);
    q = p;
    auto ff = [&](const Vector& th) {
      assign(q.tensors(), th);
      return faster_logit(q, hp, e);
    };
    analytic = flat(gf.tensors());
    numeric = central_difference(ff, flat(p.tensors()));
    analytic.insert(analytic.end(), d_hp.begin(), d_hp.end());
    analytic.insert(analytic.end(), d_emb.begin(), d_emb.end());
    const Vector nhp = central_difference([&](const Vector& x) { return faster_logit(p, x, e); }, hp);
    const Vector ne = central_difference([&](const Vector& x) { return faster_logit(p, hp, x); }, e);
    numeric.insert(numeric.end(), nhp.begin(), nhp.end());
    numeric.insert(numeric.end(), ne.begin(), ne.end());
    worst_f = std::max(worst_f, rel_err(analytic, numeric));

    const std::size_t hid = 2 + rng.below(4), T = 2 + rng.below(5);
    GruBaselineParams gp(d_e, hid, "a");
    randomize(gp.tensors(), rng, 0.8);
    Matrix emb(T, d_e);
    fill_uniform(emb.flat(), rng, -1, 1);
    const Vector w = random_vec(rng, T);
    GruBaselineParams gg = zeros_like(gp);
    gru_baseline_backward(gp, emb, w, gg);
    GruBaselineParams gq = gp;
    auto fg = [&](const Vector& th) {
      assign(gq.tensors(), th);
      const Vector l = gru_baseline_logits(gq, emb);
      double s = 0;
      for (std::size_t t = 0; t < T; ++t) s += w[t] * l[t];
      return s;
    };
    worst_g = std::max(worst_g, rel_err(flat(gg.tensors()), central_difference(fg, flat(gp.tensors()))));

    const std::size_t V = 5 + rng.below(4);
    BackboneParams bp(V, 2 + rng.below(4), 2 + rng.below(3));
    randomize(bp.tensors(), rng, 0.5);
    std::vector<TokenId> toks;
    for (std::size_t t = 0; t < 1 + rng.below(5); ++t) toks.push_back(static_cast<TokenId>(2 + rng.below(V - 2)));
    BackboneParams bg = bp;
    for (auto& t : bg.tensors()) std::fill(t.values.begin(), t.values.end(), 0.0);
    backbone_sequence_loss(bp, toks, &bg);
    BackboneParams bq = bp;
    auto fb = [&](const Vector& th) {
      assign(bq.tensors(), th);
      return backbone_sequence_loss(bq, toks, nullptr);
    };
    worst_b = std::max(worst_b, rel_err(flat(bg.tensors()), central_difference(fb, flat(bp.tensors()))));
  }
  const double worst = std::max({worst_n, worst_f, worst_g, worst_b});
  return {worst <= 1e-4, "max rel err normal " + fmt("%.1e", worst_n) + " faster " + fmt("%.1e", worst_f) +
                             " gru " + fmt("%.1e", worst_g) + " backbone " + fmt("%.1e", worst_b)};
}

// ---------------------------------------------------------- criterion 2

bool outranks(double ka, TokenId a, double kb, TokenId b) { return ka > kb || (ka == kb && a < b); }

std::set<TokenId> brute(const std::vector<TokenId>& members, const Vector& key, const Vector& mass, double rho) {
  const std::size_t n = members.size();
  // above[k]: members that outrank member k; a subset is a ranked prefix iff
  // it contains above[k] for each of its members.
  std::vector<std::uint32_t> above(n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      if (outranks(key[members[j]], members[j], key[members[k]], members[k])) above[k] |= 1u << j;
    }
  }
  std::uint32_t best = (1u << n) - 1;
  int best_size = static_cast<int>(n);
  for (std::uint32_t bits = 1; bits < (1u << n); ++bits) {
    const int size = __builtin_popcount(bits);
    if (size >= best_size) continue;
    bool closed = true;
    double m = 0;
    for (std::size_t k = 0; k < n && closed; ++k) {
      if (bits >> k & 1u) {
        closed = (above[k] & ~bits) == 0;
        m += mass[members[k]];
      }
    }
    if (closed && m >= rho) {
      best = bits;
      best_size = size;
    }
  }
  std::set<TokenId> out;
  for (std::size_t k = 0; k < n; ++k) {
    if (best >> k & 1u) out.insert(members[k]);
  }
  return out;
}

Vector dyadic(Rng& rng, std::size_t n, bool zeros) {
  std::vector<int> c(n, zeros ? 0 : 1);
  for (int left = 64 - (zeros ? 0 : static_cast<int>(n)); left > 0; --left) ++c[rng.below(n)];
  Vector p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = c[i] / 64.0;
  return p;
}

std::set<TokenId> ids(const TokenSet& s) {
  std::set<TokenId> o;
  for (const auto& t : s) o.insert(t.id);
  return o;
}

Outcome filters() {
  Rng rng(202);
  int bad = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 2 + rng.below(15);
    const Vector p = dyadic(rng, n, true);
    const double rho1 = (1 + rng.below(64)) / 64.0;
    std::vector<TokenId> support;
    for (std::size_t w = 0; w < n; ++w) {
      if (p[w] > 0) support.push_back(static_cast<TokenId>(w));
    }
    const TokenSet vk = nucleus_filter(p, rho1);
    bad += ids(vk) != brute(support, p, p, rho1);

    const Vector c = dyadic(rng, vk.size(), false);
    Vector cond(n, 0.0), key(n);
    TokenSet v2 = vk;
    std::vector<TokenId> members;
    for (std::size_t k = 0; k < vk.size(); ++k) {
      v2[k].prob = c[k];
      cond[vk[k].id] = c[k];
      members.push_back(vk[k].id);
    }
    for (double& x : key) x = rng.below(6) / 5.0;
    const double rho2 = (1 + rng.below(64)) / 64.0;
    bad += ids(attribute_filter(v2, key, rho2)) != brute(members, key, cond, rho2);
  }
  return {bad == 0, std::to_string(2000 - bad) + "/2000 filter outputs equal to brute force"};
}

// ---------------------------------------------------------- criterion 3

Outcome degeneracy(SeedFixture& fx) {
  const DiscriminatorParams head = init_discriminator(fx.backbone().d_h(), fx.backbone().d_e(), "a", 3);
  const FasterGuide guide(head, fx.backbone());
  SamplerConfig g;
  g.lambda = 0.0;
  g.rho1 = 1.0;
  g.rho2 = 1.0;
  SamplerConfig u = g;
  u.mode = DecodeMode::unconditional;
  int same = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = generate(fx.backbone(), {&guide}, {}, g, s);
    // Ancestral sampling written out directly: inverse CDF over ids >= 1.
    Rng rng(u.seed, s);
    BackboneState st = fx.backbone().init_state();
    std::vector<TokenId> b;
    while (b.size() < u.max_len) {
      double total = 0;
      for (std::size_t k = 1; k < st.logprobs.size(); ++k) total += std::exp(st.logprobs[k]);
      const double target = rng.uniform() * total;
      double cum = 0;
      TokenId pick = static_cast<TokenId>(st.logprobs.size() - 1);
      for (std::size_t k = 1; k < st.logprobs.size(); ++k) {
        cum += std::exp(st.logprobs[k]);
        if (target < cum) {
          pick = static_cast<TokenId>(k);
          break;
        }
      }
      if (pick == kEos) break;
      b.push_back(pick);
      st = fx.backbone().step(st, pick);
    }
    const auto c = generate(fx.backbone(), {}, {}, u, s);
    const Vocabulary& v = fx.backbone().vocab();
    same += a.tokens == b && generations_jsonl({a}, v) == generations_jsonl({c}, v);
  }
  return {same == 50, std::to_string(same) + "/50 sequences byte-identical"};
}

// ---------------------------------------------------------- criterion 4

Outcome distillation(SeedFixture& fx) {
  const ExperimentConfig& cfg = fx.config();
  const DiscriminatorParams init =
      init_discriminator(fx.backbone().d_h(), fx.backbone().d_e(), fx.spec().attribute, fx.seed(), cfg.head.init_scale);
  const DiscriminatorParams& trained = fx.joint_head().params;
  const double gap0 = teacher_student_gap(init, fx.held_cache());
  const double gap1 = teacher_student_gap(trained, fx.held_cache());
  const double kd0 = mean_kd_loss(init, fx.held_cache());
  const double kd1 = mean_kd_loss(trained, fx.held_cache());
  const bool ok = gap1 <= 0.5 * gap0 && kd1 < 0.2 * kd0;
  return {ok, "gap " + fmt("%.4f", gap0) + " -> " + fmt("%.4f", gap1) + ", L_kd " + fmt("%.4f", kd0) + " -> " +
                  fmt("%.4f", kd1) + " (ratio " + fmt("%.3f", kd1 / kd0) + ")"};
}

// ---------------------------------------------------------- criterion 5

Outcome controllability(std::vector<SeedFixture*>& fxs, std::vector<VariantRow>& uncond_rows) {
  bool ok = true;
  std::string detail;
  for (SeedFixture* fx : fxs) {
    const VariantRow g = run_variant(*fx, Variant::gemini);
    const VariantRow u = run_variant(*fx, Variant::unconditional);
    uncond_rows.push_back(u);
    ok = ok && g.ar - u.ar >= 0.30 && g.ar >= 0.90;
    detail += "seed " + std::to_string(fx->seed()) + ": " + fmt("%.3f", g.ar) + " vs " + fmt("%.3f", u.ar) + "; ";
  }
  return {ok, detail};
}

// ---------------------------------------------------------- criterion 6

Outcome ablation(std::vector<SeedFixture*>& fxs) {
  const AblationTable t = run_ablation(fxs);
  const auto& m = t.mean;  // gemini, no-kd, no-ad, gru
  const bool ok = m[0].ar >= m[1].ar && m[0].ar >= m[2].ar && m[0].er >= m[1].er && m[0].er >= m[2].er &&
                  m[0].er >= m[3].er;
  std::cout << ablation_markdown(t);
  return {ok, "AR " + fmt("%.3f", m[0].ar) + "/" + fmt("%.3f", m[1].ar) + "/" + fmt("%.3f", m[2].ar) + "/" +
                  fmt("%.3f", m[3].ar) + "  ER " + fmt("%.3f", m[0].er) + "/" + fmt("%.3f", m[1].er) + "/" +
                  fmt("%.3f", m[2].er) + "/" + fmt("%.3f", m[3].er) + " (gemini/no-kd/no-ad/gru)"};
}

// ---------------------------------------------------------- criterion 7

Outcome speed(SeedFixture& fx) {
  BenchConfig bc;
  bc.n_samples = 100;
  bc.batch = 1;
  const DiscriminatorParams& head = fx.joint_head().params;
  const BenchResult f = bench_time_per_token(fx.backbone(), head, BenchMode::faster, bc);
  const BenchResult n = bench_time_per_token(fx.backbone(), head, BenchMode::naive_normal, bc);
  const std::uint64_t V = fx.backbone().vocab_size();
  const double ratio = n.mean_s / f.mean_s;
  const bool ok = V == 64 && f.forwards == f.tokens && n.forwards == n.tokens * V && ratio >= 10.0;
  return {ok, "forwards/token " + fmt("%.0f", double(f.forwards) / f.tokens) + " vs " +
                  fmt("%.0f", double(n.forwards) / n.tokens) + ", time/token " + fmt("%.2e", f.mean_s) + " vs " +
                  fmt("%.2e", n.mean_s) + " s, ratio " + fmt("%.1f", ratio)};
}

// ---------------------------------------------------------- criterion 8

Outcome sweep(std::vector<SeedFixture*>& fxs) {
  const SweepResult r = run_lambda_sweep(fxs, kSweepLambdas, false);
  std::cout << sweep_csv(r);
  const bool ok = r.spearman_ar >= 0.8 && r.spearman_dist1 <= -0.6;
  return {ok, "rho_s(lambda, AR) " + fmt("%.3f", r.spearman_ar) + ", rho_s(lambda, Dist-1) " +
                  fmt("%.3f", r.spearman_dist1)};
}

// ---------------------------------------------------------- criterion 9

Outcome multi_attribute(const ExperimentConfig& cfg) {
  const MultiAttributeReport r = run_multi_attribute(cfg, 1);
  const bool ok = r.joint_ar_guided >= 0.70 && r.joint_ar_uncond <= 0.35;
  return {ok, "joint AR " + fmt("%.3f", r.joint_ar_guided) + " guided vs " + fmt("%.3f", r.joint_ar_uncond) +
                  " unconditional (per attribute " + fmt("%.3f", r.ar_a_guided) + ", " + fmt("%.3f", r.ar_b_guided) +
                  ")"};
}

// --------------------------------------------------------- criterion 10

Outcome trace(SeedFixture& fx) {
  const TraceReport r = trace_report(fx);
  return {r.sequences == 100 && r.rising_fraction >= 0.8,
          fmt("%.2f", r.rising_fraction) + " of " + std::to_string(r.sequences) +
              " sequences rise after the switch (trace variance " + fmt("%.4f", r.variance_gemini) +
              ", without distillation " + fmt("%.4f", r.variance_no_kd) + ")"};
}

// --------------------------------------------------------- criterion 11

int shell(const std::string& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir + "' && " + std::string(CTRLGEN_CLI) + " " + args + " > cli.out 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// The training log carries wall-clock times; everything else must match.
std::string without_wall_time(const std::string& log) {
  std::istringstream in(log);
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

Outcome pipeline() {
  const std::vector<std::string> steps{
      "gen-corpus --out corpus.jsonl --seed 7 --n-per-class 300",
      "train-backbone --corpus corpus.jsonl --out backbone.bin --epochs 4",
      "train-disc --corpus corpus.jsonl --backbone backbone.bin --out disc.bin --cache feats.bin --epochs 5 --lr 1e-3",
      "generate --backbone backbone.bin --disc disc.bin --num 30 --prefix \"w05 w09\" --trace --seed 3 --out samples.jsonl",
      "eval --spec corpus.jsonl.meta.json --samples samples.jsonl --backbone backbone.bin --out report.json",
  };
  const fs::path root = fs::temp_directory_path() / ("ctrlgen_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::array<fs::path, 2> dirs{root / "a", root / "b"};
  for (const auto& d : dirs) {
    fs::create_directories(d);
    for (const auto& s : steps) {
      if (shell(d.string(), s) != 0) {
        const std::string err = slurp(d / "cli.out");
        fs::remove_all(root);
        return {false, "step failed: " + s + ": " + err};
      }
    }
    fs::remove(d / "cli.out");
  }
  std::size_t files = 0, equal = 0;
  std::string differing;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const std::string name = entry.path().filename().string();
    std::string a = slurp(entry.path()), b = slurp(dirs[1] / name);
    if (name.size() > 10 && name.substr(name.size() - 10) == ".log.jsonl") {
      a = without_wall_time(a);
      b = without_wall_time(b);
    }
    ++files;
    if (a == b && !a.empty()) {
      ++equal;
    } else if (!(a == b && name == "cli.out")) {
      differing += name + " ";
    }
  }

  // Checkpoints written by the tool read back and re-serialise to the same bytes.
  const fs::path d = dirs[0];
  const std::string bb_bytes = slurp(d / "backbone.bin");
  const BackboneModel bb = BackboneModel::load((d / "backbone.bin").string());
  const auto bb_again = bb.serialize();
  bool round = std::string(bb_again.begin(), bb_again.end()) == bb_bytes;
  const DiscriminatorCheckpoint ck = load_discriminator((d / "disc.bin").string());
  const auto disc_again = serialize_discriminator(ck.params, ck.backbone_hash);
  round = round && std::string(disc_again.begin(), disc_again.end()) == slurp(d / "disc.bin");
  round = round && ck.backbone_hash == bb.hash();
  const std::string feats = slurp(d / "feats.bin");
  const FeatureCache fc = deserialize_feature_cache(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(feats.data()), feats.size()));
  const auto feats_again = serialize_feature_cache(fc);
  round = round && std::string(feats_again.begin(), feats_again.end()) == feats;
  fs::remove_all(root);

  const bool ok = equal == files && files >= 10 && round;
  return {ok, std::to_string(equal) + "/" + std::to_string(files) + " artifacts identical" +
                  (differing.empty() ? "" : " (differ: " + differing + ")") +
                  (round ? ", checkpoints round-trip exactly" : ", checkpoint round trip FAILED")};
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) g_only.insert(std::atoi(argv[i]));
  const ExperimentConfig cfg;

  run(1, "gradient correctness", 60, gradients);
  run(2, "filter oracle equivalence", 10, filters);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::unique_ptr<SeedFixture>> owned;
  std::vector<SeedFixture*> fxs;
  for (std::uint64_t s : {1, 2, 3}) {
    owned.push_back(std::make_unique<SeedFixture>(cfg, s));
    fxs.push_back(owned.back().get());
  }
  std::printf("       corpora and backbones for seeds 1-3: %.1fs\n",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  run(3, "degeneracy identities", 10, [&] { return degeneracy(*fxs[0]); });
  run(4, "distillation", 300, [&] { return distillation(*fxs[0]); });
  std::vector<VariantRow> uncond;
  run(5, "controllability gap", 600, [&] { return controllability(fxs, uncond); });
  run(6, "ablation directions", 1800, [&] { return ablation(fxs); });
  run(7, "speed", 300, [&] { return speed(*fxs[0]); });
  run(8, "lambda sweep trend", 900, [&] { return sweep(fxs); });
  run(9, "multi-attribute", 600, [&] { return multi_attribute(cfg); });
  run(10, "stepwise trace", 120, [&] { return trace(*fxs[0]); });
  run(11, "determinism and persistence", 600, pipeline);

  int failed = 0;
  std::printf("\nsummary\n");
  for (const auto& l : g_lines) {
    std::printf("  %2d %-28s %s\n", l.id, l.name.c_str(), l.out.pass ? "PASS" : "FAIL");
    failed += !l.out.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(g_lines.size()) - failed, g_lines.size());
  return failed == 0 ? 0 : 1;
}
