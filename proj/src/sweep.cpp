#include "nbnlab/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "nbnlab/report.hpp"

namespace nbnlab {
namespace {

using json = nlohmann::ordered_json;

const char* kAxes[] = {"policy",          "var_reg",          "scope",
                       "freeze_g",        "loss",             "logit_rectifier",
                       "imbalance_factor", "two_stage",       "stage2_update_g"};

const char* kMetrics[] = {"overall", "tail",      "medium",    "head",  "balance_cv",
                          "var_mean", "var_std", "pattern_a", "g_initial", "g_final"};

bool parse_bool(const std::string& axis, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("axis '" + axis + "': expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& axis, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ConfigError("axis '" + axis + "': expected a number, got '" + v + "'");
  return d;
}

void apply_axis(ExperimentConfig& c, const std::string& axis, const std::string& v) {
  try {
    if (axis == "policy") c.model.norm_policy = norm_policy_from_string(v);
    else if (axis == "var_reg") c.model.var_reg_strength = parse_double(axis, v);
    else if (axis == "scope") c.model.magnitude_scope = share_scope_from_string(v);
    else if (axis == "freeze_g") c.freeze_g = parse_bool(axis, v);
    else if (axis == "loss") c.model.loss_kind = loss_kind_from_string(v);
    else if (axis == "logit_rectifier") c.model.use_logit_rectifier = parse_bool(axis, v);
    else if (axis == "imbalance_factor") c.data.imbalance_factor = parse_double(axis, v);
    else if (axis == "two_stage") {
      if (!parse_bool(axis, v)) c.two_stage.reset();
      else if (!c.two_stage) c.two_stage = TwoStageConfig{};
    } else if (axis == "stage2_update_g") {
      if (!c.two_stage) c.two_stage = TwoStageConfig{};
      c.two_stage->stage2_update_g = parse_bool(axis, v);
    } else {
      throw ConfigError("unknown sweep axis '" + axis + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("axis '" + axis + "': " + e.what());
  }
}

std::string value_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw ConfigError("sweep axis values must be strings, numbers or booleans");
}

json spec_json(const SweepSpec& spec) {
  json j;
  j["base"] = json::parse(serialize_config(spec.base));
  json axes = json::object();
  for (const auto& [name, values] : spec.axes) axes[name] = values;
  j["axes"] = axes;
  j["seeds"] = spec.seeds;
  j["first_seed"] = spec.first_seed;
  return j;
}

json run_json(const SweepRun& r) {
  json j{{"cell", r.cell}, {"seed", r.seed}, {"status", r.ok ? "ok" : "failed"}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  // NaN is not representable in JSON; missing metrics are written as null.
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  j["overall"] = num(r.overall);
  j["tail"] = num(r.tail);
  j["medium"] = num(r.medium);
  j["head"] = num(r.head);
  j["balance_cv"] = num(r.balance_cv);
  j["var_mean"] = num(r.var_mean);
  j["var_std"] = num(r.var_std);
  j["pattern_a"] = num(r.pattern_a);
  j["g_initial"] = num(r.g_initial);
  j["g_final"] = num(r.g_final);
  return j;
}

SweepRun run_from_json(const json& j) {
  SweepRun r;
  r.cell = j.at("cell").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("status").get<std::string>() == "ok";
  if (!r.ok) {
    r.error = j.value("error", "");
    return r;
  }
  auto num = [&](const char* k) {
    const json& v = j.at(k);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  r.overall = num("overall");
  r.tail = num("tail");
  r.medium = num("medium");
  r.head = num("head");
  r.balance_cv = num("balance_cv");
  r.var_mean = num("var_mean");
  r.var_std = num("var_std");
  r.pattern_a = num("pattern_a");
  r.g_initial = num("g_initial");
  r.g_final = num("g_final");
  return r;
}

double metric(const SweepRun& r, const std::string& m) {
  if (m == "overall") return r.overall;
  if (m == "tail") return r.tail;
  if (m == "medium") return r.medium;
  if (m == "head") return r.head;
  if (m == "balance_cv") return r.balance_cv;
  if (m == "var_mean") return r.var_mean;
  if (m == "var_std") return r.var_std;
  if (m == "pattern_a") return r.pattern_a;
  if (m == "g_initial") return r.g_initial;
  return r.g_final;
}

std::vector<SweepRun> read_ledger(const std::filesystem::path& path) {
  std::vector<SweepRun> runs;
  std::ifstream in(path);
  if (!in) return runs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      runs.push_back(run_from_json(json::parse(line)));
    } catch (const json::exception&) {
      // A run killed mid-write leaves a partial last line; anything else is corruption.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                               ": malformed ledger entry");
    }
  }
  return runs;
}

}  // namespace

SweepSpec parse_sweep_spec(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("sweep spec is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("sweep spec must be an object");
  SweepSpec spec;
  for (auto it = root.begin(); it != root.end(); ++it) {
    const std::string& k = it.key();
    if (k == "base") {
      spec.base = parse_config(it->dump());
    } else if (k == "axes") {
      if (!it->is_object()) throw ConfigError("sweep 'axes' must be an object");
      for (auto a = it->begin(); a != it->end(); ++a) {
        if (std::find(std::begin(kAxes), std::end(kAxes), a.key()) == std::end(kAxes))
          throw ConfigError("unknown sweep axis '" + a.key() + "'");
        if (!a->is_array() || a->empty())
          throw ConfigError("sweep axis '" + a.key() + "' must be a non-empty array");
        std::vector<std::string> values;
        for (const json& v : *a) values.push_back(value_text(v));
        spec.axes.emplace_back(a.key(), std::move(values));
      }
    } else if (k == "seeds") {
      if (!it->is_number_unsigned() || it->get<std::size_t>() == 0)
        throw ConfigError("sweep 'seeds' must be a positive integer");
      spec.seeds = it->get<std::size_t>();
    } else if (k == "first_seed") {
      if (!it->is_number_unsigned()) throw ConfigError("sweep 'first_seed' must be an unsigned integer");
      spec.first_seed = it->get<std::uint64_t>();
    } else {
      throw ConfigError("unknown sweep key '" + k + "'");
    }
  }
  return spec;
}

SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open sweep spec");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_sweep_spec(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<SweepCell> expand_cells(const SweepSpec& spec) {
  std::vector<SweepCell> cells{SweepCell{"", {}, spec.base}};
  for (const auto& [axis, values] : spec.axes) {
    std::vector<SweepCell> next;
    for (const SweepCell& cell : cells)
      for (const std::string& v : values) {
        SweepCell c = cell;
        apply_axis(c.config, axis, v);
        c.values[axis] = v;
        c.key += (c.key.empty() ? "" : ",") + axis + "=" + v;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  for (SweepCell& c : cells) {
    if (c.key.empty()) c.key = "base";
    try {
      c.config.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("sweep cell " + c.key + ": " + e.what());
    }
  }
  return cells;
}

std::size_t effective_workers(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(1, requested);
  if (const char* env = std::getenv("NBNLAB_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

std::vector<CellSummary> summarize_runs(const std::vector<SweepCell>& cells,
                                        const std::vector<SweepRun>& runs) {
  // the last ledger entry for a (cell, seed) pair wins
  std::map<std::pair<std::string, std::uint64_t>, const SweepRun*> latest;
  for (const SweepRun& r : runs) latest[{r.cell, r.seed}] = &r;
  std::vector<CellSummary> out;
  for (const SweepCell& cell : cells) {
    CellSummary s;
    s.cell = cell.key;
    std::map<std::string, std::vector<double>> values;
    for (const auto& [key, run] : latest) {
      if (key.first != cell.key) continue;
      if (!run->ok) {
        ++s.failed;
        continue;
      }
      ++s.runs;
      for (const char* m : kMetrics) {
        const double v = metric(*run, m);
        if (std::isfinite(v)) values[m].push_back(v);
      }
    }
    for (const char* m : kMetrics) {
      const auto& v = values[m];
      double mean = NAN, sd = NAN;
      if (!v.empty()) {
        mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        if (v.size() > 1) {
          double ss = 0.0;
          for (double x : v) ss += (x - mean) * (x - mean);
          sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
      }
      s.stats[m] = {mean, sd};
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<CellSummary>& cells) {
  CsvTable t{{"cell", "runs", "failed"}, {}};
  for (const char* m : kMetrics) {
    t.header.push_back(std::string(m) + "_mean");
    t.header.push_back(std::string(m) + "_std");
  }
  for (const CellSummary& c : cells) {
    std::vector<std::string> row{c.cell, std::to_string(c.runs), std::to_string(c.failed)};
    for (const char* m : kMetrics) {
      const auto& [mean, sd] = c.stats.at(m);
      row.push_back(format_number(mean));
      row.push_back(format_number(sd));
    }
    t.add_row(std::move(row));
  }
  t.write(path);
}

SweepResult run_sweep(const SweepSpec& spec, const SweepOptions& options) {
  const std::vector<SweepCell> cells = expand_cells(spec);
  std::filesystem::create_directories(options.out_dir);
  const std::filesystem::path spec_path = options.out_dir / "spec.json";
  const std::string spec_text = spec_json(spec).dump(2) + "\n";
  if (std::filesystem::exists(spec_path)) {
    std::ifstream in(spec_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (ss.str() != spec_text)
      throw std::invalid_argument(options.out_dir.string() +
                                  " holds a different sweep; use a fresh output directory");
  } else {
    std::ofstream(spec_path) << spec_text;
  }

  const std::filesystem::path ledger_path = options.out_dir / "ledger.jsonl";
  SweepResult result;
  result.runs = read_ledger(ledger_path);
  std::set<std::pair<std::string, std::uint64_t>> done;
  for (const SweepRun& r : result.runs)
    if (r.ok) done.insert({r.cell, r.seed});

  struct Job {
    const SweepCell* cell;
    std::uint64_t seed;
  };
  std::vector<Job> pending;
  for (const SweepCell& c : cells)
    for (std::size_t i = 0; i < spec.seeds; ++i) {
      const std::uint64_t seed = spec.first_seed + i;
      if (done.count({c.key, seed}) == 0) pending.push_back({&c, seed});
    }

  std::ofstream ledger(ledger_path, std::ios::app);
  if (!ledger) throw std::runtime_error(ledger_path.string() + ": cannot open for writing");
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::size_t finished = 0;
  auto worker = [&]() {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const Job& job = pending[i];
      SweepRun run;
      run.cell = job.cell->key;
      run.seed = job.seed;
      try {
        ExperimentConfig config = job.cell->config;
        config.seed = job.seed;
        const PreparedData data = prepare_synthetic(config);
        const RunResult r = run_experiment(config, data);
        run.ok = true;
        run.overall = r.report.overall;
        run.tail = r.report.tail;
        run.medium = r.report.medium;
        run.head = r.report.head;
        run.balance_cv = r.balance_cv;
        run.var_mean = r.feature_stats.var_mean;
        run.var_std = r.feature_stats.var_std;
        run.pattern_a = r.pattern_a_fraction;
        run.g_initial = r.g_initial;
        run.g_final = r.g_final;
      } catch (const std::exception& e) {
        run.ok = false;
        run.error = e.what();
      }
      std::lock_guard lock(mu);
      ledger << run_json(run).dump() << "\n";
      ledger.flush();
      result.runs.push_back(run);
      ++result.executed;
      ++finished;
      if (options.progress) options.progress(run, finished, pending.size());
    }
  };
  const std::size_t n = std::min(effective_workers(options.workers), std::max<std::size_t>(1, pending.size()));
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < n; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  result.cells = summarize_runs(cells, result.runs);
  write_summary_csv(options.out_dir / "summary.csv", result.cells);
  return result;
}

}  // namespace nbnlab
