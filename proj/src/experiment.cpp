#include "triphase/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "triphase/errors.hpp"

namespace triphase::experiment {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Spec

void ExperimentSpec::validate() const {
  if (variants.empty()) throw ConfigError("experiment needs at least one variant");
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  if (dataset.has_value() == synthetic.has_value()) {
    throw ConfigError("experiment needs exactly one of \"dataset\" or \"synthetic\"");
  }
  config.validate();
}

nlohmann::json ExperimentSpec::to_json() const {
  nlohmann::json j;
  if (dataset) j["dataset"] = dataset->string();
  if (synthetic) j["synthetic"] = synthetic->to_json();
  if (unlabelled) j["unlabelled"] = unlabelled->string();
  j["variants"] = nlohmann::json::array();
  for (auto v : variants) j["variants"].push_back(train::variant_name(v));
  j["seeds"] = seeds;
  j["train"] = config.to_json();
  j["output_dir"] = output_dir.string();
  return j;
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment file must hold a JSON object");
  ExperimentSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dataset") {
        fs::path p = v.get<std::string>();
        s.dataset = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      } else if (key == "unlabelled") {
        fs::path p = v.get<std::string>();
        s.unlabelled = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      } else if (key == "synthetic") {
        s.synthetic = synthetic::SyntheticSpec::from_json(v);
      } else if (key == "variants") {
        for (const auto& name : v) s.variants.push_back(train::parse_variant(name.get<std::string>()));
      } else if (key == "seeds") {
        s.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (key == "train") {
        s.config = train::TrainConfig::from_json(v);
      } else if (key == "output_dir") {
        s.output_dir = v.get<std::string>();
      } else {
        throw ConfigError("unknown experiment key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment file: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ExperimentSpec load_spec(const fs::path& path, const std::vector<std::string>& overrides) {
  auto j = read_json(path);
  auto spec = ExperimentSpec::from_json(j, path.parent_path());
  if (!overrides.empty()) spec.config = train::TrainConfig::with_overrides(spec.config, overrides);
  return spec;
}

fs::path resolve_output(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

corpus::Dataset load_corpus(const ExperimentSpec& spec) {
  if (spec.synthetic) return synthetic::gen_synthetic(*spec.synthetic);
  return corpus::load_dataset(*spec.dataset);
}

corpus::Dataset load_unlabelled(const ExperimentSpec& spec) {
  if (!spec.unlabelled) return {};
  return corpus::load_dataset(*spec.unlabelled, false);
}

fs::path run_dir(const fs::path& root, train::Variant v, std::uint64_t seed) {
  return root / train::variant_name(v) / ("seed_" + std::to_string(seed));
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// run

RunSummary cmd_run(const ExperimentSpec& spec, const RunCommandOptions& opts) {
  spec.validate();
  RunSummary summary;
  summary.root = resolve_output(spec.output_dir);

  std::vector<std::pair<train::Variant, std::uint64_t>> jobs;
  for (auto v : spec.variants) {
    for (auto s : spec.seeds) jobs.emplace_back(v, s);
  }
  for (const auto& [v, s] : jobs) {
    const auto dir = run_dir(summary.root, v, s);
    if (fs::exists(dir)) {
      if (!opts.force) {
        throw ConfigError("output directory " + dir.string() + " already exists (use --force to overwrite)");
      }
      fs::remove_all(dir);
    }
  }

  const auto raw = load_corpus(spec);
  const auto unlabelled = load_unlabelled(spec);
  fs::create_directories(summary.root);
  write_text(summary.root / "experiment.json", spec.to_json().dump(2) + "\n");

  std::mutex log_mutex;
  auto note = [&](const std::string& line) {
    if (!opts.log) return;
    std::lock_guard lock(log_mutex);
    *opts.log << line << std::endl;
  };

  std::vector<std::optional<train::RunManifest>> results(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto [v, seed] = jobs[i];
      const auto dir = run_dir(summary.root, v, seed);
      fs::create_directories(dir);
      std::ofstream run_log(dir / "run.log");
      const auto manifest_path = dir / "manifest.json";
      train::RunOptions ro;
      ro.log = &run_log;
      ro.output_dir = dir;
      if (spec.unlabelled) ro.unlabelled = &unlabelled;
      ro.on_progress = [&](const train::RunManifest& m) { write_text(manifest_path, m.to_json().dump(2) + "\n"); };
      note("run " + train::variant_name(v) + " seed " + std::to_string(seed));
      auto m = train::run_variant(v, spec.config, raw, seed, ro);
      write_text(manifest_path, m.to_json().dump(2) + "\n");
      std::ostringstream line;
      line << "done " << m.variant << " seed " << seed << " status " << m.status;
      if (m.test_metrics) line << " test_accuracy " << std::fixed << std::setprecision(4) << m.test_metrics->accuracy;
      if (!m.note.empty()) line << " (" << m.note << ")";
      note(line.str());
      results[i] = std::move(m);
    }
  };

  const std::size_t n_threads = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(jobs.size(), 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::exception_ptr> errors(n_threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          worker();
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    summary.manifests.push_back(run_dir(summary.root, jobs[i].first, jobs[i].second) / "manifest.json");
    if (!results[i] || results[i]->status != "complete") ++summary.failed;
  }
  return summary;
}

// ---------------------------------------------------------------------------
// ablate

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }
std::string lpad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

// Recall on the class with the fewest held-out examples.
double minority_recall(const metrics::MetricsReport& r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < r.per_class.size(); ++k) {
    if (r.per_class[k].support < r.per_class[best].support) best = k;
  }
  return r.per_class.empty() ? 0.0 : r.per_class[best].recall;
}

}  // namespace

Report cmd_ablate(const fs::path& root, const std::vector<train::Variant>& variants) {
  Report rep;
  rep.json = {{"root", root.string()}, {"columns", nlohmann::json::array()}, {"absent", nlohmann::json::array()}};
  struct Column {
    std::string name;
    double accuracy, macro_f1, minority;
    std::size_t runs;
  };
  std::vector<Column> columns;

  for (auto v : train::ablation_order()) {
    if (std::find(variants.begin(), variants.end(), v) == variants.end()) continue;
    const auto vdir = root / train::variant_name(v);
    std::vector<std::pair<std::string, fs::path>> found;
    if (fs::is_directory(vdir)) {
      for (const auto& entry : fs::directory_iterator(vdir)) {
        if (fs::exists(entry.path() / "manifest.json")) found.emplace_back(entry.path().filename().string(), entry.path());
      }
    }
    std::sort(found.begin(), found.end());
    std::vector<double> acc, f1, minority;
    nlohmann::json refs = nlohmann::json::array();
    for (const auto& [name, dir] : found) {
      const auto m = train::RunManifest::from_json(read_json(dir / "manifest.json"));
      if (m.status != "complete" || !m.test_metrics) continue;
      acc.push_back(m.test_metrics->accuracy);
      f1.push_back(m.test_metrics->macro_f1);
      minority.push_back(minority_recall(*m.test_metrics));
      refs.push_back({{"seed", m.seed},
                      {"manifest", fs::relative(dir / "manifest.json", root).string()},
                      {"content_hash", m.content_hash()},
                      {"test_accuracy", m.test_metrics->accuracy}});
    }
    if (acc.empty()) {
      rep.json["absent"].push_back(train::variant_name(v));
      continue;
    }
    Column c{train::variant_name(v), median(acc), median(f1), median(minority), acc.size()};
    columns.push_back(c);
    rep.json["columns"].push_back({{"variant", c.name},
                                   {"runs", c.runs},
                                   {"median_test_accuracy", c.accuracy},
                                   {"median_test_macro_f1", c.macro_f1},
                                   {"median_minority_recall", c.minority},
                                   {"manifests", refs}});
  }

  std::ostringstream t;
  const std::size_t w0 = 18, w = 11;
  t << pad("", w0);
  for (const auto& c : columns) t << lpad(c.name, w);
  t << "\n" << pad("test accuracy", w0);
  for (const auto& c : columns) t << lpad(fixed(100.0 * c.accuracy, 2), w);
  t << "\n" << pad("test macro F1", w0);
  for (const auto& c : columns) t << lpad(fixed(100.0 * c.macro_f1, 2), w);
  t << "\n" << pad("minority recall", w0);
  for (const auto& c : columns) t << lpad(fixed(100.0 * c.minority, 2), w);
  t << "\n" << pad("seeds", w0);
  for (const auto& c : columns) t << lpad(std::to_string(c.runs), w);
  t << "\n";
  if (!rep.json["absent"].empty()) {
    t << "absent:";
    for (const auto& a : rep.json["absent"]) t << " " << a.get<std::string>();
    t << "\n";
  }
  t << "(medians over seeds, percent)\n";
  rep.text = t.str();
  return rep;
}

// ---------------------------------------------------------------------------
// report

Report cmd_report(const fs::path& manifest_path) {
  const auto m = train::RunManifest::from_json(read_json(manifest_path));
  Report rep;
  rep.json = {{"manifest", manifest_path.string()},
              {"content_hash", m.content_hash()},
              {"variant", m.variant},
              {"seed", m.seed},
              {"status", m.status}};
  std::ostringstream t;
  t << "run " << m.variant << " seed " << m.seed << " status " << m.status << " hash " << m.content_hash() << "\n";
  if (!m.test_metrics) {
    t << "no test metrics\n";
    rep.text = t.str();
    return rep;
  }
  const auto& r = *m.test_metrics;
  rep.json["test_metrics"] = r.to_json(m.class_names);
  std::size_t w0 = 8;
  for (const auto& n : m.class_names) w0 = std::max(w0, n.size() + 2);
  auto name_of = [&](std::size_t k) { return k < m.class_names.size() ? m.class_names[k] : std::to_string(k); };

  t << "\n" << pad("class", w0) << lpad("precision", 11) << lpad("recall", 11) << lpad("support", 9) << "\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& c = r.per_class[k];
    t << pad(name_of(k), w0) << lpad(fixed(c.precision), 11) << lpad(fixed(c.recall), 11)
      << lpad(std::to_string(c.support), 9) << (c.absent ? "  (absent)" : "") << "\n";
  }
  t << pad("macro", w0) << lpad(fixed(r.macro_precision), 11) << lpad(fixed(r.macro_recall), 11)
    << lpad(std::to_string(r.total), 9) << "\n";

  t << "\n" << pad("class", w0) << lpad("F1", 11) << "\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) t << pad(name_of(k), w0) << lpad(fixed(r.per_class[k].f1), 11) << "\n";
  t << pad("macro", w0) << lpad(fixed(r.macro_f1), 11) << "\n";
  t << pad("accuracy", w0) << lpad(fixed(r.accuracy), 11) << "\n";

  t << "\nconfusion (rows true, columns predicted)\n" << metrics::confusion_to_text(r, m.class_names);
  rep.text = t.str();
  return rep;
}

// ---------------------------------------------------------------------------
// stats

Report cmd_stats(const corpus::Dataset& raw, const train::TrainConfig& cfg, const corpus::Dataset* unlabelled) {
  auto data = train::prepare_data(raw, cfg, unlabelled);
  auto all = raw;
  data.vocab.tokenize_all(all.examples);
  data.test.unlock();
  std::vector<std::pair<std::string, corpus::CorpusStats>> s = {
      {"all", corpus::compute_stats(all)},
      {"train", corpus::compute_stats(data.train)},
      {"validation", corpus::compute_stats(data.val)},
      {"test", corpus::compute_stats(data.test.read("stats"))}};
  if (unlabelled) s.emplace_back("unlabelled", corpus::compute_stats(data.unlabelled));
  Report rep;
  rep.json = corpus::stats_to_json(s);
  rep.json["vocab_size"] = data.vocab.size();
  rep.json["estimated_truncation_length"] = data.truncation_length;
  rep.json["warnings"] = data.warnings;
  rep.text = corpus::stats_to_text(s) + "vocabulary " + std::to_string(data.vocab.size()) +
             ", truncation length " + std::to_string(data.truncation_length) + "\n";
  for (const auto& w : data.warnings) rep.text += "warning: " + w + "\n";
  return rep;
}

}  // namespace triphase::experiment
