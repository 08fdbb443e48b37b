#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmi/data.hpp"
#include "cmi/report.hpp"
#include "cmi/sampler.hpp"
#include "cmi/train.hpp"

namespace cmi {

struct DatasetSource {
  std::string manifest;                  // non-empty: load this manifest
  std::optional<SyntheticSpec> synthetic;  // otherwise generate
};

struct SweepSeeds {
  std::uint64_t sample = 0, init = 0, train = 0, folds = 0;
};

struct SweepConfig {
  std::vector<ArchConfig> architectures;  // shape fields below are applied to each
  bool baselines = true;                  // also run the uniform-RELU twin of each architecture
  std::size_t num_models = 10;
  std::vector<ActivationKind> activation_set{kAllActivations.begin(), kAllActivations.end()};
  double width_multiplier = 1.0;
  std::size_t resolution = 299;
  std::size_t channels = 3;
  PaddingScheme padding = PaddingScheme::reference;
  bool batchnorm = true;
  double dropout = 0.2;
  TrainConfig train;
  DatasetSource dataset;
  std::size_t folds = 3;
  SweepSeeds seeds;
  std::string output_dir;
  bool save_checkpoints = false;
};

namespace detail {

// Typed, path-aware access into a JSON object; rejects unknown keys.
class FieldReader {
public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "must be an object");
  }

  template <typename V>
  std::optional<V> opt(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    try {
      return j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      fail(key, "has the wrong type");
    }
  }

  template <typename V>
  V req(const std::string& key) {
    auto v = opt<V>(key);
    if (!v) fail(key, "is required");
    return *v;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw StructuralError("config field '" + (key.empty() ? path_ : path(key)) + "' " + what);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(k, "is not a recognized field");
  }

private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline SweepConfig parse_sweep_config(const nlohmann::json& j) {
  SweepConfig c;
  detail::FieldReader r(j, "");
  const auto* archs = r.child("architectures");
  if (!archs || !archs->is_array() || archs->empty()) r.fail("architectures", "must be a non-empty array");
  for (std::size_t i = 0; i < archs->size(); ++i) {
    const auto& a = (*archs)[i];
    const std::string where = "architectures[" + std::to_string(i) + "]";
    ArchConfig ac;
    if (a.is_string()) {
      try {
        ac = preset_by_name(a.get<std::string>());
      } catch (const StructuralError& e) {
        throw StructuralError("config field '" + where + "' " + e.what());
      }
    } else {
      detail::FieldReader ar(a, where);
      ac.k = ar.req<int>("k");
      ac.m = ar.req<int>("m");
      ac.n = ar.req<int>("n");
      if (auto mode = ar.opt<std::string>("mode")) {
        if (*mode == "full") ac.mode = ArchMode::full;
        else if (*mode != "compressed") ar.fail("mode", "must be compressed or full");
      }
      ar.finish();
    }
    c.architectures.push_back(ac);
  }
  c.baselines = r.opt<bool>("baselines").value_or(c.baselines);
  if (auto n = r.opt<long long>("num_models")) {
    if (*n < 1) r.fail("num_models", "must be >= 1");
    c.num_models = static_cast<std::size_t>(*n);
  }
  if (auto set = r.opt<std::vector<std::string>>("activation_set")) {
    c.activation_set.clear();
    try {
      for (const auto& s : *set) c.activation_set.push_back(parse_activation(s));
    } catch (const StructuralError& e) {
      r.fail("activation_set", e.what());
    }
  }
  c.width_multiplier = r.opt<double>("width_multiplier").value_or(c.width_multiplier);
  c.resolution = r.opt<std::size_t>("resolution").value_or(c.resolution);
  c.channels = r.opt<std::size_t>("channels").value_or(c.channels);
  if (auto p = r.opt<std::string>("padding")) {
    try {
      c.padding = parse_padding(*p);
    } catch (const StructuralError& e) {
      r.fail("padding", e.what());
    }
  }
  c.batchnorm = r.opt<bool>("batchnorm").value_or(c.batchnorm);
  c.dropout = r.opt<double>("dropout").value_or(c.dropout);
  if (auto f = r.opt<long long>("folds")) {
    if (*f < 2) r.fail("folds", "must be >= 2");
    c.folds = static_cast<std::size_t>(*f);
  }
  c.output_dir = r.req<std::string>("output_dir");
  c.save_checkpoints = r.opt<bool>("save_checkpoints").value_or(false);

  if (const auto* t = r.child("train")) {
    detail::FieldReader tr(*t, "train");
    auto& tc = c.train;
    if (auto e = tr.opt<long long>("epochs")) {
      if (*e < 1) tr.fail("epochs", "must be >= 1");
      tc.epochs = static_cast<std::size_t>(*e);
    }
    if (auto b = tr.opt<long long>("batch_size")) {
      if (*b < 1) tr.fail("batch_size", "must be >= 1");
      tc.batch_size = static_cast<std::size_t>(*b);
    }
    tc.learning_rate = tr.opt<double>("learning_rate").value_or(tc.learning_rate);
    if (!(tc.learning_rate >= 0)) tr.fail("learning_rate", "must be >= 0");
    tc.momentum = tr.opt<double>("momentum").value_or(tc.momentum);
    if (!(tc.momentum >= 0 && tc.momentum < 1)) tr.fail("momentum", "must be in [0,1)");
    if (auto p = tr.opt<std::string>("precision")) {
      try {
        tc.precision = parse_precision(*p);
      } catch (const StructuralError& e) {
        tr.fail("precision", e.what());
      }
    }
    tc.hflip = tr.opt<bool>("hflip").value_or(false);
    if (auto f = tr.opt<std::string>("f1_average")) {
      try {
        tc.f1_average = parse_f1_average(*f);
      } catch (const StructuralError& e) {
        tr.fail("f1_average", e.what());
      }
    }
    tr.finish();
  }

  const auto* ds = r.child("dataset");
  if (!ds) r.fail("dataset", "is required");
  {
    detail::FieldReader dr(*ds, "dataset");
    c.dataset.manifest = dr.opt<std::string>("manifest").value_or("");
    if (const auto* syn = dr.child("synthetic")) {
      detail::FieldReader sr(*syn, "dataset.synthetic");
      SyntheticSpec s;
      s.num_classes = sr.opt<std::size_t>("num_classes").value_or(s.num_classes);
      s.per_class = sr.opt<std::size_t>("per_class").value_or(s.per_class);
      s.seed = sr.opt<std::uint64_t>("seed").value_or(s.seed);
      s.noise = sr.opt<double>("noise").value_or(s.noise);
      if (s.num_classes < 1) sr.fail("num_classes", "must be >= 1");
      if (s.per_class < 1) sr.fail("per_class", "must be >= 1");
      if (!(s.noise >= 0)) sr.fail("noise", "must be >= 0");
      sr.finish();
      c.dataset.synthetic = s;
    }
    if (c.dataset.manifest.empty() == !c.dataset.synthetic)
      dr.fail("", "must set exactly one of manifest or synthetic");
    dr.finish();
  }

  if (const auto* sd = r.child("seeds")) {
    detail::FieldReader sr(*sd, "seeds");
    c.seeds.sample = sr.opt<std::uint64_t>("sample").value_or(0);
    c.seeds.init = sr.opt<std::uint64_t>("init").value_or(0);
    c.seeds.train = sr.opt<std::uint64_t>("train").value_or(0);
    c.seeds.folds = sr.opt<std::uint64_t>("folds").value_or(0);
    sr.finish();
  }
  r.finish();

  for (auto& a : c.architectures) {
    a.width_multiplier = c.width_multiplier;
    a.input_h = a.input_w = c.resolution;
    a.channels_in = c.channels;
    a.padding = c.padding;
    a.batchnorm = c.batchnorm;
    a.dropout = c.dropout;
    if (c.dataset.synthetic) a.num_classes = c.dataset.synthetic->num_classes;
  }
  return c;
}

inline SweepConfig load_sweep_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StructuralError("cannot open config '" + path + "'");
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw StructuralError("config '" + path + "' is not valid JSON");
  return parse_sweep_config(j);
}

inline Dataset load_sweep_dataset(const SweepConfig& c) {
  if (c.dataset.synthetic) {
    SyntheticSpec s = *c.dataset.synthetic;
    s.resolution = c.resolution;
    s.channels = c.channels;
    return generate_synthetic(s);
  }
  return load_manifest(c.dataset.manifest, {c.resolution, c.resolution, c.channels, {}});
}

struct SweepRun {
  CrossValidationJob job;
  std::string report_file;      // relative to output_dir
  std::string assignment_file;  // relative to output_dir
};

// One run per (architecture, model index), plus the RELU twin when baselines
// are on. Assignment j is sample_assignment(seeds.sample, j), the same
// stream `cmi sample --seed` produces; init seed j is derive_seed(seeds.init, j).
inline std::vector<SweepRun> plan_sweep(const SweepConfig& c) {
  std::vector<SweepRun> runs;
  for (const auto& arch : c.architectures) {
    const auto violations = validate_config(arch);
    require(violations.empty(), "architecture " + arch_id(arch) + ": " +
                                    (violations.empty() ? std::string() : violations.front()));
    const std::string id = arch_id(arch);
    validate_sample_plan({arch, c.num_models, c.seeds.sample, c.activation_set});
    for (std::size_t j = 0; j < c.num_models; ++j) {
      const std::uint64_t init = derive_seed(c.seeds.init, j);
      SweepRun multi;
      multi.job = {arch, sample_assignment({arch, c.num_models, c.seeds.sample, c.activation_set}, j),
                   ActivationWiring::assignment, true, j, init, {}};
      multi.report_file = "multi_" + id + "_model" + std::to_string(j) + "_seed" +
                          std::to_string(*multi.job.assignment.seed) + ".json";
      multi.assignment_file = "assignments/" + assignment_file_name(id, j, multi.job.assignment);
      runs.push_back(std::move(multi));
      if (c.baselines) {
        SweepRun relu;
        relu.job = {arch, baseline_assignment(arch, ActivationKind::relu), ActivationWiring::assignment, false,
                    j, init, {}};
        relu.report_file = "relu_" + id + "_model" + std::to_string(j) + "_seed" + std::to_string(init) + ".json";
        runs.push_back(std::move(relu));
      }
    }
  }
  return runs;
}

struct SweepOutcome {
  std::size_t completed = 0, skipped = 0, failed = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline void write_file_atomic(const std::filesystem::path& p, const std::string& content) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw StructuralError("cannot write '" + tmp.string() + "'");
    out << content;
  }
  std::filesystem::rename(tmp, p);
}

inline bool report_present(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return false;
  std::ifstream in(p);
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) return false;
  try {
    run_report_from_json(j);
    return true;
  } catch (const StructuralError&) {
    return false;
  }
}

}  // namespace detail

// Runs every planned job not already present in output_dir. Runs share the
// read-only dataset and fold plan; each writes its own report file.
inline SweepOutcome run_sweep(const SweepConfig& c, std::size_t workers = 1,
                              const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  require(workers >= 1, "run_sweep: workers must be >= 1");
  TrainConfig train = c.train;
  train.seed = c.seeds.train;
  require_valid(train);
  const fs::path out = c.output_dir;
  fs::create_directories(out / "assignments");
  const Dataset data = load_sweep_dataset(c);
  const FoldPlan folds = stratified_folds(data, c.folds, c.seeds.folds);
  auto runs = plan_sweep(c);
  for (auto& r : runs) {
    if (!c.dataset.synthetic) r.job.arch.num_classes = data.num_classes();
    require(r.job.arch.num_classes == data.num_classes(),
            "architecture " + arch_id(r.job.arch) + " outputs " + std::to_string(r.job.arch.num_classes) +
                " classes but the dataset has " + std::to_string(data.num_classes()));
    if (c.save_checkpoints) {
      fs::create_directories(out / "checkpoints");
      r.job.checkpoint_prefix = (out / "checkpoints" / fs::path(r.report_file).stem()).string();
    }
  }

  SweepOutcome outcome;
  outcome.warnings = folds.warnings;
  std::mutex mu;
  auto say = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard lock(mu);
    log(s);
  };
  for (const auto& w : folds.warnings) say("warning: " + w);

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      const auto& run = runs[i];
      const fs::path report_path = out / run.report_file;
      try {
        if (!run.assignment_file.empty())
          detail::write_file_atomic(out / run.assignment_file, serialize_assignment(run.job.assignment));
        if (detail::report_present(report_path)) {
          std::lock_guard lock(mu);
          ++outcome.skipped;
          if (log) log("skip " + run.report_file);
          continue;
        }
        const auto report = cross_validate(run.job, data, folds, train);
        detail::write_file_atomic(report_path, to_json(report).dump(2) + "\n");
        std::lock_guard lock(mu);
        ++outcome.completed;
        outcome.failed += report.failed;
        if (log)
          log("done " + run.report_file + " f1_valid=" + detail::fmt(report.f1_valid, 4) +
              (report.failed ? " (failed)" : ""));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = runs.size();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, runs.size()); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return outcome;
}

}  // namespace cmi
