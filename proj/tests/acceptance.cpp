// Acceptance run: one PASS/FAIL line per criterion. Exits 0 once every line
// has been printed; --strict turns any FAIL into exit code 1.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "nbnlab/analysis.hpp"
#include "nbnlab/checkpoint.hpp"
#include "nbnlab/experiment.hpp"
#include "nbnlab/gradcheck.hpp"
#include "nbnlab/normalization.hpp"
#include "nbnlab/ops.hpp"
#include "nbnlab/report.hpp"
#include "nbnlab/session.hpp"
#include "nbnlab/simd/kernels.hpp"
#include "nbnlab/sweep.hpp"

using namespace nbnlab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kSeeds = 5;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;
std::ofstream summary_file;

// Everything printed is mirrored to <out>/acceptance.txt.
void emit(const std::string& line) {
  std::cout << line << std::endl;
  if (summary_file) summary_file << line << std::endl;
}

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  emit(std::string(pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + ": " + detail);
}

// ---------------------------------------------------------------------------
// Seeded training runs

struct Variant {
  std::string name;
  std::function<void(ExperimentConfig&)> apply;
  bool balanced = false;  // IF = 1 data
  bool keep_model = false;
};

struct Run {
  RunResult result;
  std::optional<Model> model;
  double seconds = 0.0;
};

using RunTable = std::map<std::string, std::vector<Run>>;

ExperimentConfig config_for(const Variant& v, std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  if (v.balanced) c.data.imbalance_factor = 1.0;
  v.apply(c);
  c.validate();
  return c;
}

RunTable run_all(const std::vector<Variant>& variants, std::size_t workers) {
  // Data depends only on (seed, balanced), so prepare it once per pair.
  std::map<std::pair<std::uint64_t, bool>, PreparedData> data;
  for (std::uint64_t s = 0; s < kSeeds; ++s)
    for (bool b : {false, true}) {
      ExperimentConfig c;
      c.seed = s;
      if (b) c.data.imbalance_factor = 1.0;
      data.emplace(std::make_pair(s, b), prepare_synthetic(c));
    }

  struct Job {
    const Variant* variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  RunTable table;
  for (const Variant& v : variants) {
    table[v.name].resize(kSeeds);
    for (std::uint64_t s = 0; s < kSeeds; ++s) jobs.push_back({&v, s});
  }

  std::mutex mu;
  std::size_t next = 0, done = 0;
  auto worker = [&] {
    for (;;) {
      Job job;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next == jobs.size()) return;
        job = jobs[next++];
      }
      const auto t0 = Clock::now();
      ExperimentConfig c = config_for(*job.variant, job.seed);
      std::optional<Model> model;
      RunResult r = run_experiment(c, data.at({job.seed, job.variant->balanced}), &model);
      std::lock_guard<std::mutex> lock(mu);
      Run& slot = table[job.variant->name][job.seed];
      slot.result = std::move(r);
      if (job.variant->keep_model) slot.model = std::move(model);
      slot.seconds = seconds_since(t0);
      ++done;
      std::cerr << "  [" << done << "/" << jobs.size() << "] " << job.variant->name << " seed "
                << job.seed << " overall " << fmt("%.4f", slot.result.report.overall) << " ("
                << fmt("%.1f", slot.seconds) << " s)" << std::endl;
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < std::max<std::size_t>(workers, 1); ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return table;
}

void write_runs_csv(const fs::path& path, const RunTable& table) {
  CsvTable t{{"variant", "seed", "overall", "tail", "medium", "head", "balance_cv", "var_mean",
              "var_std", "pattern_a", "g_initial", "g_final", "seconds"},
             {}};
  for (const auto& [name, runs] : table)
    for (std::size_t s = 0; s < runs.size(); ++s) {
      const RunResult& r = runs[s].result;
      t.add_row({name, std::to_string(s), format_number(r.report.overall),
                 format_number(r.report.tail), format_number(r.report.medium),
                 format_number(r.report.head), format_number(r.balance_cv),
                 format_number(r.feature_stats.var_mean), format_number(r.feature_stats.var_std),
                 format_number(r.pattern_a_fraction), format_number(r.g_initial),
                 format_number(r.g_final), format_number(runs[s].seconds)});
    }
  t.write(path);
}

std::vector<double> metric(const RunTable& t, const std::string& variant,
                           const std::function<double(const RunResult&)>& f) {
  std::vector<double> out;
  for (const Run& r : t.at(variant)) out.push_back(f(r.result));
  return out;
}

double overall_of(const RunResult& r) { return r.report.overall; }

std::size_t count_if_paired(const std::vector<double>& a, const std::vector<double>& b,
                            const std::function<bool(double, double)>& pred) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += pred(a[i], b[i]) ? 1 : 0;
  return n;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  const double m = mean(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string list(const std::vector<double>& v, const char* f = "%.4f") {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s + "]";
}

std::string count_str(std::size_t n) { return std::to_string(n) + "/" + std::to_string(kSeeds); }

// ---------------------------------------------------------------------------
// Criteria that need no training

void criterion_decomposition() {
  const auto t0 = Clock::now();
  GradcheckOptions o;
  o.families = {"nbn"};
  double residual = 0.0;
  std::size_t cases = 0;
  for (const GradcheckResult& r : run_gradcheck(o))
    if (r.name == "nbn-decomposition") {
      residual = r.max_error;
      cases = r.cases;
    }
  const double secs = seconds_since(t0);
  report(1, cases == 100 && residual < 1e-9 && secs < 10.0,
         "max residual " + fmt("%.3e", residual) + " over " + std::to_string(cases) +
             " configs (bound 1e-9), " + fmt("%.2f", secs) + " s (bound 10 s)");
}

void criterion_finite_difference() {
  const auto t0 = Clock::now();
  GradcheckOptions o;
  const auto results = run_gradcheck(o);
  const double secs = seconds_since(t0);
  bool ok = true;
  double worst = 0.0;
  std::string worst_name, failed;
  std::set<std::string> families;
  for (const GradcheckResult& r : results) {
    if (r.family == "nbn" && r.name == "nbn-decomposition") continue;
    families.insert(r.family);
    if (!r.passed()) {
      ok = false;
      failed += " " + r.name;
    }
    if (r.max_error > worst) {
      worst = r.max_error;
      worst_name = r.name;
    }
  }
  const bool all_families = families.size() == gradcheck_families().size();
  report(2, ok && all_families && secs < 60.0,
         std::to_string(results.size() - 1) + " checks over " + std::to_string(families.size()) +
             " layer families, worst rel. error " + fmt("%.2e", worst) + " (" + worst_name +
             ", bound 1e-4, h=1e-5)" + (failed.empty() ? "" : ", failing:" + failed) + ", " +
             fmt("%.2f", secs) + " s (bound 60 s)");
}

void criterion_equivalence() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0, 1);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + static_cast<std::size_t>(trial % 63);
    const std::size_t b = 2 + static_cast<std::size_t>(trial % 31);
    std::vector<double> gamma(c), beta(c), x(b * c);
    for (auto& v : gamma) v = n(rng) * 2.0;
    for (auto& v : beta) v = n(rng);
    for (auto& v : x) v = n(rng) * 3.0 + 1.0;
    BnState bn = BnState::make(c);
    bn.gamma = Tensor::vector(gamma);
    bn.beta = Tensor::vector(beta);
    NbnState nb = NbnState::make(c, SharedMagnitude::make(l2_norm(bn.gamma).item(), ShareScope::per_layer));
    nb.bias_magnitude = SharedMagnitude::make(l2_norm(bn.beta).item(), ShareScope::per_layer);
    nb.gamma_dir = Tensor::vector(gamma);
    nb.beta_dir = Tensor::vector(beta);
    const Tensor xt = Tensor::from({b, c}, x);
    for (Mode mode : {Mode::train, Mode::eval}) {
      const Tensor ya = bn_forward(xt, bn, mode);
      const Tensor yb = nbn_forward(xt, nb, mode);
      for (std::size_t i = 0; i < ya.numel(); ++i) worst = std::max(worst, std::abs(ya[i] - yb[i]));
    }
  }
  report(3, worst < 1e-12,
         "max |BN - NBN| " + fmt("%.3e", worst) + " over 200 random batches, train and eval (bound 1e-12)");
}

bool files_equal(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(fa), {}) ==
         std::string(std::istreambuf_iterator<char>(fb), {});
}

void criterion_engineering(const fs::path& scratch) {
  std::vector<std::string> notes;
  bool ok = true;

  ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.model.norm_policy = NormPolicy::ours;
  cfg.model.use_logit_rectifier = true;
  cfg.model.loss_kind = LossKind::balanced_softmax;
  cfg.model.var_reg_strength = 0.1;
  cfg.two_stage = TwoStageConfig{};
  cfg.data.separation = 0.6180339887498949;
  const std::string text = serialize_config(cfg);
  const bool round_trip = parse_config(text) == cfg && serialize_config(parse_config(text)) == text;
  ok = ok && round_trip;
  notes.push_back(std::string("config round-trip ") + (round_trip ? "identical" : "DIFFERS"));

  // Short real run: checkpoint forward and resumption.
  ExperimentConfig run = ExperimentConfig{};
  run.seed = 3;
  run.data.n_max = 256;
  run.optimizer.total_iterations = 120;
  run.optimizer.warmup_iterations = 20;
  run.checkpoint_every = 25;
  run.eval_every = 40;
  run.model.use_logit_rectifier = true;
  run.two_stage = TwoStageConfig{};
  run.two_stage->stage2_iterations = 60;
  run.two_stage->stage2_update_g = true;
  PreparedData data = prepare_synthetic(run);
  const fs::path full = scratch / "full", part = scratch / "part";
  fs::remove_all(full);
  fs::remove_all(part);
  SessionResult a = run_session(run, data, {full, std::nullopt, SIZE_MAX});
  SessionResult s1 = run_session(run, data, {part, std::nullopt, 55});
  SessionResult s2 = run_session(run, data, {part, s1.last_checkpoint, 150});
  SessionResult s3 = run_session(run, data, {part, s2.last_checkpoint, SIZE_MAX});
  const bool resumed = a.finished && s3.finished && files_equal(full / "runlog.csv", part / "runlog.csv") &&
                       files_equal(full / "eval.csv", part / "eval.csv") &&
                       files_equal(full / "final.ckpt", part / "final.ckpt");
  ok = ok && resumed;
  notes.push_back(std::string("resume at steps 55 and 150 of 180: ") +
                  (resumed ? "run log, evals and final checkpoint byte-identical" : "DIFFERS"));

  Checkpoint ck = load_checkpoint(full / "final.ckpt");
  const fs::path copy = scratch / "copy.ckpt";
  save_checkpoint(copy, *ck.model);
  Checkpoint back = load_checkpoint(copy);
  std::vector<std::size_t> idx(data.test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor x = data.test.rows(idx);
  const bool fwd = ck.model->forward(x, Mode::eval).to_vector() == back.model->forward(x, Mode::eval).to_vector();
  ok = ok && fwd;
  notes.push_back(std::string("checkpoint reload forward ") + (fwd ? "bit-exact" : "DIFFERS"));

  // Feature statistics against a two-pass long-double oracle on trained features.
  const Tensor f = extract_features(*ck.model, data.test);
  const FeatureStatVariance fs_lib = feature_stat_variance(f);
  const std::size_t rows = f.dim(0), cols = f.dim(1);
  std::vector<long double> mu(cols, 0.0L), sd(cols, 0.0L);
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t i = 0; i < rows; ++i) mu[j] += f.at(i, j);
    mu[j] /= static_cast<long double>(rows);
    for (std::size_t i = 0; i < rows; ++i) sd[j] += (f.at(i, j) - mu[j]) * (f.at(i, j) - mu[j]);
    sd[j] = std::sqrt(sd[j] / static_cast<long double>(rows));
  }
  auto svar = [](const std::vector<long double>& v) {
    long double m = 0;
    for (auto x : v) m += x;
    m /= static_cast<long double>(v.size());
    long double ss = 0;
    for (auto x : v) ss += (x - m) * (x - m);
    return static_cast<double>(ss / static_cast<long double>(v.size() - 1));
  };
  const double err = std::max(std::abs(fs_lib.var_mean - svar(mu)), std::abs(fs_lib.var_std - svar(sd)));
  ok = ok && err < 1e-12;
  notes.push_back("feature-statistic variance vs two-pass oracle " + fmt("%.2e", err) + " (bound 1e-12)");

  std::string detail;
  for (std::size_t i = 0; i < notes.size(); ++i) detail += (i ? "; " : "") + notes[i];
  report(14, ok, detail);
}

// Rectified logits of a trained model on train-mode batches drawn from the
// training split. Returns (max |mean|, max |std - 1| raw, max |std - 1| with
// the epsilon guard divided out).
std::array<double, 3> rectifier_batch_stats(Model& model, const Dataset& train) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::array<double, 3> worst{0, 0, 0};
  for (int batch = 0; batch < 50; ++batch) {
    std::vector<std::size_t> idx(64);
    for (auto& i : idx) i = pick(rng);
    NoGradScope off;
    const Tensor feats = model.features(train.rows(idx), Mode::eval);
    const Tensor z = linear(feats, model.classifier().weight, model.classifier().bias);
    LogitRectifierState st = *model.rectifier();
    const Tensor y = logit_rectify(z, st, Mode::train);
    const std::size_t b = y.dim(0), k = y.dim(1);
    for (std::size_t c = 0; c < k; ++c) {
      double m = 0, v = 0, zm = 0, zv = 0;
      for (std::size_t r = 0; r < b; ++r) {
        m += y.at(r, c);
        zm += z.at(r, c);
      }
      m /= static_cast<double>(b);
      zm /= static_cast<double>(b);
      for (std::size_t r = 0; r < b; ++r) {
        v += (y.at(r, c) - m) * (y.at(r, c) - m);
        zv += (z.at(r, c) - zm) * (z.at(r, c) - zm);
      }
      const double sd = std::sqrt(v / static_cast<double>(b));
      zv /= static_cast<double>(b);
      const double guard = std::sqrt((zv + st.stats.epsilon) / zv);
      worst[0] = std::max(worst[0], std::abs(m));
      worst[1] = std::max(worst[1], std::abs(sd - 1.0));
      worst[2] = std::max(worst[2], std::abs(sd * guard - 1.0));
    }
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the nbnlab artifact"};
  fs::path out_dir = "acceptance_out";
  bool strict = false;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--out", out_dir, "Directory for per-run metrics and scratch files");
  app.add_option("--workers", workers, "Parallel training runs (capped by NBNLAB_THREADS)");
  app.add_flag("--strict", strict, "Exit with status 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  workers = effective_workers(workers);
  fs::create_directories(out_dir);
  summary_file.open(out_dir / "acceptance.txt");
  emit("kernels: " + std::string(simd::active_kernels().name) + ", workers: " + std::to_string(workers));

  try {
    criterion_decomposition();
    criterion_finite_difference();
    criterion_equivalence();

    auto set_policy = [](NormPolicy p) { return [p](ExperimentConfig& c) { c.model.norm_policy = p; }; };
    std::vector<Variant> benchmark{
        {"baseline", set_policy(NormPolicy::baseline_bn), false, true},
        {"nbn", set_policy(NormPolicy::ours), false, false},
    };
    std::vector<Variant> ablations{
        {"nbn_fixed_g", [](ExperimentConfig& c) { c.freeze_g = true; }},
        {"wn", set_policy(NormPolicy::wn)},
        {"varreg_0.1", [](ExperimentConfig& c) {
           c.model.norm_policy = NormPolicy::baseline_bn;
           c.model.var_reg_strength = 0.1;
         }},
        {"varreg_1", [](ExperimentConfig& c) {
           c.model.norm_policy = NormPolicy::baseline_bn;
           c.model.var_reg_strength = 1.0;
         }},
        {"nbn_lr", [](ExperimentConfig& c) { c.model.use_logit_rectifier = true; }, false, true},
        {"typeA", set_policy(NormPolicy::type_a)},
        {"typeB", set_policy(NormPolicy::type_b)},
        {"baseline_if1", set_policy(NormPolicy::baseline_bn), true},
        {"nbn_if1", set_policy(NormPolicy::ours), true},
    };

    std::cerr << "training " << benchmark.size() * kSeeds << " benchmark runs" << std::endl;
    const auto t_bench = Clock::now();
    RunTable runs = run_all(benchmark, workers);
    const double bench_secs = seconds_since(t_bench);
    std::cerr << "training " << ablations.size() * kSeeds << " ablation runs" << std::endl;
    RunTable more = run_all(ablations, workers);
    for (auto& [k, v] : more) runs[k] = std::move(v);
    write_runs_csv(out_dir / "acceptance_runs.csv", runs);

    const auto base = metric(runs, "baseline", overall_of);
    const auto nbn = metric(runs, "nbn", overall_of);

    {
      const auto cv_b = metric(runs, "baseline", [](const RunResult& r) { return r.balance_cv; });
      const auto cv_n = metric(runs, "nbn", [](const RunResult& r) { return r.balance_cv; });
      const auto vm_b = metric(runs, "baseline", [](const RunResult& r) { return r.feature_stats.var_mean; });
      const auto vm_n = metric(runs, "nbn", [](const RunResult& r) { return r.feature_stats.var_mean; });
      const auto vs_b = metric(runs, "baseline", [](const RunResult& r) { return r.feature_stats.var_std; });
      const auto vs_n = metric(runs, "nbn", [](const RunResult& r) { return r.feature_stats.var_std; });
      auto lower = [](double n, double b) { return n < b; };
      const std::size_t k_cv = count_if_paired(cv_n, cv_b, lower);
      const std::size_t k_vm = count_if_paired(vm_n, vm_b, lower);
      const std::size_t k_vs = count_if_paired(vs_n, vs_b, lower);
      report(4, k_cv >= 4 && k_vm >= 4 && k_vs >= 4 && bench_secs < 600.0,
             "CV |gamma_eff| lower in " + count_str(k_cv) + " (nbn " + list(cv_n) + " vs bn " +
                 list(cv_b) + "); Var(mu) lower in " + count_str(k_vm) + " (nbn " + list(vm_n) +
                 " vs bn " + list(vm_b) + "); Var(sigma) lower in " + count_str(k_vs) + " (nbn " +
                 list(vs_n) + " vs bn " + list(vs_b) + "); " + fmt("%.0f", bench_secs) +
                 " s (bound 600 s)");
    }
    {
      const auto tail_b = metric(runs, "baseline", [](const RunResult& r) { return r.report.tail; });
      const auto tail_n = metric(runs, "nbn", [](const RunResult& r) { return r.report.tail; });
      const std::size_t k = count_if_paired(tail_n, tail_b, [](double n, double b) { return n >= b; });
      const std::size_t drops = count_if_paired(nbn, base, [](double n, double b) { return n < b - 0.01; });
      report(5, k >= 4 && drops == 0,
             "tail acc >= baseline in " + count_str(k) + " (nbn " + list(tail_n) + " vs bn " +
                 list(tail_b) + "); overall more than 1 pp lower in " + count_str(drops) +
                 " (nbn " + list(nbn) + " vs bn " + list(base) + ")");
    }
    {
      const auto fixed = metric(runs, "nbn_fixed_g", overall_of);
      const std::size_t k = count_if_paired(fixed, nbn, [](double f, double n) { return f < n; });
      report(6, k >= 4,
             "fixed-g overall below learnable-g in " + count_str(k) + " (fixed " + list(fixed) +
                 " vs learnable " + list(nbn) + ")");
    }
    {
      const auto wn = metric(runs, "wn", overall_of);
      std::size_t k = 0;
      for (std::size_t i = 0; i < kSeeds; ++i) k += std::abs(wn[i] - base[i]) < std::abs(nbn[i] - base[i]);
      report(7, k >= 4,
             "|WN - BN| < |NBN - BN| in " + count_str(k) + " (wn " + list(wn) + ", nbn " + list(nbn) +
                 ", bn " + list(base) + ")");
    }
    {
      const auto v01 = metric(runs, "varreg_0.1", overall_of);
      const auto v1 = metric(runs, "varreg_1", overall_of);
      std::size_t between = 0;
      for (std::size_t i = 0; i < kSeeds; ++i) between += v01[i] > base[i] && v01[i] < nbn[i];
      const std::size_t weaker = count_if_paired(v1, v01, [](double a, double b) { return a <= b; });
      report(8, between >= 4 && weaker >= 3,
             "bn < varreg(0.1) < nbn in " + count_str(between) + " (varreg " + list(v01) + ", bn " +
                 list(base) + ", nbn " + list(nbn) + "); varreg(1) <= varreg(0.1) in " +
                 count_str(weaker) + " (varreg(1) " + list(v1) + ")");
    }
    {
      const auto g0 = metric(runs, "nbn", [](const RunResult& r) { return r.g_initial; });
      const auto g1 = metric(runs, "nbn", [](const RunResult& r) { return r.g_final; });
      const auto pa = metric(runs, "nbn", [](const RunResult& r) { return r.pattern_a_fraction; });
      std::size_t k = 0;
      for (std::size_t i = 0; i < kSeeds; ++i) k += g1[i] > g0[i] && pa[i] > 0.5;
      report(9, k >= 4,
             "final g > initial g and pattern-A fraction > 0.5 in " + count_str(k) + " (g " +
                 list(g0, "%.2f") + " -> " + list(g1, "%.2f") + ", pattern-A " + list(pa, "%.3f") + ")");
    }
    {
      const auto lr = metric(runs, "nbn_lr", overall_of);
      const std::size_t k = count_if_paired(lr, nbn, [](double a, double b) { return a >= b; });
      std::array<double, 3> worst{0, 0, 0};
      for (std::uint64_t s = 0; s < kSeeds; ++s) {
        ExperimentConfig c;
        c.seed = s;
        PreparedData d = prepare_synthetic(c);
        const auto w = rectifier_batch_stats(*runs.at("nbn_lr")[s].model, d.train);
        for (int i = 0; i < 3; ++i) worst[i] = std::max(worst[i], w[i]);
      }
      report(10, worst[0] < 1e-10 && worst[2] < 1e-10 && k >= 4,
             "rectified train batches: max |mean| " + fmt("%.1e", worst[0]) + ", max |std-1| " +
                 fmt("%.1e", worst[2]) + " with the 1e-5 variance guard removed (" +
                 fmt("%.1e", worst[1]) + " raw); NBN+LR overall >= NBN in " + count_str(k) +
                 " (lr " + list(lr) + " vs " + list(nbn) + ")");
    }
    {
      const auto a = metric(runs, "typeA", overall_of);
      const auto b = metric(runs, "typeB", overall_of);
      const double pooled = std::sqrt((sample_std(nbn) * sample_std(nbn) + sample_std(a) * sample_std(a)) / 2.0);
      const double diff = std::abs(mean(nbn) - mean(a));
      std::size_t k = 0;
      for (std::size_t i = 0; i < kSeeds; ++i) k += nbn[i] >= b[i] && a[i] >= b[i];
      report(11, diff < 2.0 * pooled && k >= 4,
             "|ours - typeA| mean diff " + fmt("%.4f", diff) + " vs 2*pooled std " +
                 fmt("%.4f", 2.0 * pooled) + "; ours and typeA >= typeB in " + count_str(k) +
                 " (ours " + list(nbn) + ", typeA " + list(a) + ", typeB " + list(b) + ")");
    }
    {
      std::size_t k = 0;
      std::string per_seed;
      for (std::uint64_t s = 0; s < kSeeds; ++s) {
        ExperimentConfig c;
        c.seed = s;
        PreparedData d = prepare_synthetic(c);
        Model& m = *runs.at("baseline")[s].model;
        const ChannelImportance ci = channel_importance(m.classifier().weight, d.groups);
        const GroupReport plain = evaluate(m, d.test, d.groups);
        auto drops = [&](ChannelTag tag) {
          const GroupReport r = mask_channels_eval(m, ci.channels_with(tag), d.test, d.groups);
          return std::make_pair(plain.tail - r.tail, plain.head - r.head);
        };
        const auto rare = drops(ChannelTag::rare_specific);
        const auto freq = drops(ChannelTag::frequent_specific);
        const auto common = drops(ChannelTag::common);
        const bool rare_ok = rare.first > rare.second;
        const double off_target = std::max(rare.second, freq.first);
        const bool common_ok = common.first > off_target && common.second > off_target;
        k += rare_ok && common_ok;
        per_seed += (s ? "; " : "") + std::string("s") + std::to_string(s) + " rare(t " +
                    fmt("%.3f", rare.first) + ", h " + fmt("%.3f", rare.second) + ") freq(t " +
                    fmt("%.3f", freq.first) + ", h " + fmt("%.3f", freq.second) + ") common(t " +
                    fmt("%.3f", common.first) + ", h " + fmt("%.3f", common.second) + ")";
      }
      report(12, k >= 4, "probe direction holds in " + count_str(k) + "; accuracy drops: " + per_seed);
    }
    {
      const auto b1 = metric(runs, "baseline_if1", overall_of);
      const auto n1 = metric(runs, "nbn_if1", overall_of);
      const double gap = std::abs(mean(n1) - mean(b1));
      report(13, gap < 0.01,
             "IF=1 mean overall nbn " + fmt("%.4f", mean(n1)) + " vs bn " + fmt("%.4f", mean(b1)) +
                 ", gap " + fmt("%.4f", gap) + " (bound 0.01)");
    }
    criterion_engineering(out_dir / "engineering");
  } catch (const std::exception& e) {
    emit(std::string("FAIL acceptance run aborted: ") + e.what());
    return 2;
  }
  emit(failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed");
  return strict && failures > 0 ? 1 : 0;
}
