#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmi/checkpoint.hpp"
#include "cmi/data.hpp"
#include "cmi/model.hpp"
#include "cmi/optim.hpp"
#include "cmi/sampler.hpp"

namespace cmi {

// ---------------------------------------------------------------- metrics

enum class F1Average { macro, weighted };

inline std::string to_string(F1Average a) { return a == F1Average::macro ? "macro" : "weighted"; }

inline F1Average parse_f1_average(const std::string& s) {
  if (s == "macro") return F1Average::macro;
  if (s == "weighted") return F1Average::weighted;
  throw StructuralError("unknown F1 averaging '" + s + "' (expected macro or weighted)");
}

// Per-class F1 from a confusion count; a class with TP+FP+FN = 0 scores 0.
inline double class_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

// Macro: unweighted mean over all num_classes classes. Weighted: mean
// weighted by true support.
inline double macro_f1(const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred,
                       std::size_t num_classes, F1Average avg = F1Average::macro) {
  require(!y_true.empty(), "macro_f1: empty label vector");
  require(y_true.size() == y_pred.size(), "macro_f1: y_true has " + std::to_string(y_true.size()) +
                                              " entries, y_pred has " + std::to_string(y_pred.size()));
  require(num_classes >= 1, "macro_f1: num_classes must be >= 1");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0), support(num_classes, 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    require(y_true[i] < num_classes && y_pred[i] < num_classes,
            "macro_f1: class index out of range at position " + std::to_string(i));
    ++support[y_true[i]];
    if (y_true[i] == y_pred[i]) {
      ++tp[y_true[i]];
    } else {
      ++fp[y_pred[i]];
      ++fn[y_true[i]];
    }
  }
  // extended accumulator so small cases round like the exact fraction (11/15, not 11/15 + 1 ulp)
  long double acc = 0.0L;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const long double f = tp[c] ? 2.0L * tp[c] / static_cast<long double>(2 * tp[c] + fp[c] + fn[c]) : 0.0L;
    acc += avg == F1Average::macro ? f : f * static_cast<long double>(support[c]);
  }
  return static_cast<double>(acc / static_cast<long double>(avg == F1Average::macro ? num_classes : y_true.size()));
}

// ---------------------------------------------------------------- training

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float32" || s == "f32") return Precision::f32;
  if (s == "float64" || s == "f64") return Precision::f64;
  throw StructuralError("unknown precision '" + s + "' (expected float32 or float64)");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  bool hflip = false;  // random horizontal flips while training
  F1Average f1_average = F1Average::macro;
};

inline std::vector<std::string> validate_train_config(const TrainConfig& c) {
  std::vector<std::string> v;
  if (c.epochs < 1) v.push_back("epochs must be >= 1");
  if (c.batch_size < 1) v.push_back("batch_size must be >= 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) v.push_back("learning_rate must be >= 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) v.push_back("momentum must be in [0,1)");
  return v;
}

inline void require_valid(const TrainConfig& c) {
  const auto v = validate_train_config(c);
  require(v.empty(), "invalid train config: " + (v.empty() ? std::string() : v.front()));
}

struct TrainResult {
  std::vector<double> loss_curve;  // epoch-mean loss
  double t_train_seconds = 0.0;
  bool failed = false;
  std::size_t failed_epoch = 0;  // 1-based, set when failed
  std::string failure;
};

namespace detail {

// Stream ids under TrainConfig::seed.
inline constexpr std::uint64_t kShuffleStream = 1, kDropoutStream = 2, kFlipStream = 3;

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Minibatch momentum SGD on softmax cross-entropy over `indices` of `data`.
// Non-finite values mark the run failed at that epoch instead of throwing.
// `on_epoch(epoch, mean_loss)` runs after every completed epoch.
template <typename T>
TrainResult train_model(InceptionModel<T>& model, const Dataset& data, std::vector<std::size_t> indices,
                        const TrainConfig& cfg,
                        const std::function<void(std::size_t, double)>& on_epoch = {}) {
  require_valid(cfg);
  require(!indices.empty(), "train_model: empty training slice");
  require(data.num_classes() == model.config().num_classes,
          "train_model: dataset has " + std::to_string(data.num_classes()) + " classes, network outputs " +
              std::to_string(model.config().num_classes));
  TrainResult res;
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, detail::kShuffleStream));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, detail::kDropoutStream));
  std::mt19937_64 flip_rng(derive_seed(cfg.seed, detail::kFlipStream));
  Sgd<T> opt(model.parameters(), static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.momentum));

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    detail::seeded_shuffle(indices, shuffle_rng());
    double total = 0.0;
    try {
      for (std::size_t b = 0; b < indices.size(); b += cfg.batch_size) {
        const std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(b),
                                           indices.begin() + static_cast<std::ptrdiff_t>(
                                                                 std::min(indices.size(), b + cfg.batch_size)));
        std::vector<bool> flip;
        if (cfg.hflip)
          for (std::size_t i = 0; i < idx.size(); ++i) flip.push_back(flip_rng() & 1);
        std::vector<std::size_t> labels;
        for (auto i : idx) labels.push_back(data.samples[i].label);
        opt.zero_grad();
        auto logits = model.forward(Var<T>(make_batch<T>(data, idx, flip)), NormMode::train, &dropout_rng);
        auto loss = softmax_cross_entropy<T>(logits, labels);
        backward(loss);
        opt.step();
        total += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
      }
      // Parameters must stay finite for the next epoch to mean anything.
      for (const auto& p : model.parameters())
        if (!p.value().all_finite()) throw NumericalError("non-finite parameter after update");
    } catch (const NumericalError& e) {
      res.failed = true;
      res.failed_epoch = epoch;
      res.failure = e.what();
      break;
    }
    res.loss_curve.push_back(total / static_cast<double>(indices.size()));
    if (on_epoch) on_epoch(epoch, res.loss_curve.back());
  }
  res.t_train_seconds = detail::elapsed(t0);
  return res;
}

struct EvalResult {
  std::vector<std::size_t> predictions, labels;
  double f1 = 0.0;
  double t_test_seconds = 0.0;
};

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t K = logits.dim(1);
  const T* r = logits.data() + row * K;
  return static_cast<std::size_t>(std::max_element(r, r + K) - r);
}

// Eval-mode forward over `indices` in batches; argmax predictions.
template <typename T>
EvalResult evaluate_model(InceptionModel<T>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                          std::size_t batch_size = 16, F1Average avg = F1Average::macro) {
  require(!indices.empty(), "evaluate_model: empty slice");
  require(batch_size >= 1, "evaluate_model: batch_size must be >= 1");
  EvalResult res;
  NoGradGuard no_grad;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const std::vector<std::size_t> idx(
        indices.begin() + static_cast<std::ptrdiff_t>(b),
        indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), b + batch_size)));
    const auto logits = model.forward(Var<T>(make_batch<T>(data, idx)), NormMode::eval).value();
    for (std::size_t r = 0; r < idx.size(); ++r) res.predictions.push_back(argmax_row(logits, r));
  }
  res.t_test_seconds = detail::elapsed(t0);
  for (auto i : indices) res.labels.push_back(data.samples[i].label);
  res.f1 = macro_f1(res.labels, res.predictions, data.num_classes(), avg);
  return res;
}

// ---------------------------------------------------------------- reports

struct FoldReport {
  std::size_t fold = 0;
  double f1_train = 0.0, f1_valid = 0.0;
  double t_train_seconds = 0.0, t_test_seconds = 0.0;
  std::vector<double> loss_curve;
  bool failed = false;
  std::size_t failed_epoch = 0;
  std::string failure;
};

struct RunReport {
  std::string arch;          // arch_id, e.g. "cmi1"
  bool multi_function = true;  // false for uniform-RELU baselines
  std::size_t model_index = 0;
  std::optional<std::uint64_t> assignment_seed;
  std::uint64_t init_seed = 0;
  double f1_train = 0.0, f1_valid = 0.0;
  double t_train_seconds = 0.0, t_test_seconds = 0.0;
  std::size_t parameter_count = 0;
  std::size_t serialized_bytes = 0;
  bool failed = false;
  std::vector<FoldReport> folds;
};

inline const char* kTimingFields[] = {"t_train_seconds", "t_test_seconds"};

inline nlohmann::json to_json(const FoldReport& f) {
  nlohmann::json j;
  j["fold"] = f.fold;
  j["f1_train"] = f.f1_train;
  j["f1_valid"] = f.f1_valid;
  j["t_train_seconds"] = f.t_train_seconds;
  j["t_test_seconds"] = f.t_test_seconds;
  j["loss_curve"] = f.loss_curve;
  j["failed"] = f.failed;
  if (f.failed) {
    j["failed_epoch"] = f.failed_epoch;
    j["failure"] = f.failure;
  }
  return j;
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["arch"] = r.arch;
  j["multi_function"] = r.multi_function;
  j["model_index"] = r.model_index;
  j["assignment_seed"] = r.assignment_seed ? nlohmann::json(*r.assignment_seed) : nlohmann::json(nullptr);
  j["init_seed"] = r.init_seed;
  j["f1_train"] = r.f1_train;
  j["f1_valid"] = r.f1_valid;
  j["t_train_seconds"] = r.t_train_seconds;
  j["t_test_seconds"] = r.t_test_seconds;
  j["parameter_count"] = r.parameter_count;
  j["serialized_bytes"] = r.serialized_bytes;
  j["failed"] = r.failed;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds) j["folds"].push_back(to_json(f));
  return j;
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  try {
    RunReport r;
    r.arch = j.at("arch").get<std::string>();
    r.multi_function = j.at("multi_function").get<bool>();
    r.model_index = j.at("model_index").get<std::size_t>();
    if (!j.at("assignment_seed").is_null()) r.assignment_seed = j.at("assignment_seed").get<std::uint64_t>();
    r.init_seed = j.at("init_seed").get<std::uint64_t>();
    r.f1_train = j.at("f1_train").get<double>();
    r.f1_valid = j.at("f1_valid").get<double>();
    r.t_train_seconds = j.at("t_train_seconds").get<double>();
    r.t_test_seconds = j.at("t_test_seconds").get<double>();
    r.parameter_count = j.at("parameter_count").get<std::size_t>();
    r.serialized_bytes = j.at("serialized_bytes").get<std::size_t>();
    r.failed = j.value("failed", false);
    for (const auto& fj : j.at("folds")) {
      FoldReport f;
      f.fold = fj.at("fold").get<std::size_t>();
      f.f1_train = fj.at("f1_train").get<double>();
      f.f1_valid = fj.at("f1_valid").get<double>();
      f.t_train_seconds = fj.at("t_train_seconds").get<double>();
      f.t_test_seconds = fj.at("t_test_seconds").get<double>();
      f.loss_curve = fj.at("loss_curve").get<std::vector<double>>();
      f.failed = fj.value("failed", false);
      f.failed_epoch = fj.value("failed_epoch", std::size_t{0});
      f.failure = fj.value("failure", std::string());
      r.folds.push_back(std::move(f));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("malformed run report: ") + e.what());
  }
}

// JSON with every wall-clock field removed, for determinism comparisons.
inline nlohmann::json without_timing(const RunReport& r) {
  auto j = to_json(r);
  for (const char* k : kTimingFields) j.erase(k);
  for (auto& f : j["folds"])
    for (const char* k : kTimingFields) f.erase(k);
  return j;
}

// Table column name: CMI1/CI1 ... MI/I for presets, otherwise CMI(k,m,n).
inline std::string report_column(const std::string& arch, bool multi_function) {
  if (arch == "mi") return multi_function ? "MI" : "I";
  if (arch.size() == 4 && arch.rfind("cmi", 0) == 0) return (multi_function ? "CMI" : "CI") + arch.substr(3);
  return (multi_function ? "CMI(" : "CI(") + arch + ")";
}

inline std::string column_of(const RunReport& r) { return report_column(r.arch, r.multi_function); }

// ---------------------------------------------------------------- protocol

struct CrossValidationJob {
  ArchConfig arch;
  ActivationAssignment assignment;
  ActivationWiring wiring = ActivationWiring::assignment;
  bool multi_function = true;
  std::size_t model_index = 0;
  std::uint64_t init_seed = 0;
  std::string checkpoint_prefix;  // non-empty: save each fold's model as <prefix>_fold<f>.ckpt
};

namespace detail {

template <typename T>
RunReport cross_validate_as(const CrossValidationJob& job, const Dataset& data, const FoldPlan& folds,
                            const TrainConfig& cfg) {
  const auto plan = make_plan(job.arch);
  const auto stats = arch_stats(plan, sizeof(T), job.assignment.entries.size());
  RunReport r;
  r.arch = arch_id(job.arch);
  r.multi_function = job.multi_function;
  r.model_index = job.model_index;
  r.assignment_seed = job.assignment.seed;
  r.init_seed = job.init_seed;
  r.parameter_count = stats.parameter_count;
  r.serialized_bytes = stats.serialized_bytes;
  for (std::size_t f = 0; f < folds.num_folds; ++f) {
    FoldReport fr;
    fr.fold = f;
    const auto train_idx = folds.complement(f), valid_idx = folds.fold(f);
    InceptionModel<T> model(plan, job.assignment, derive_seed(job.init_seed, f), job.wiring);
    TrainConfig fc = cfg;
    fc.seed = derive_seed(cfg.seed, f);
    const auto tr = train_model(model, data, train_idx, fc);
    fr.loss_curve = tr.loss_curve;
    fr.t_train_seconds = tr.t_train_seconds;
    fr.failed = tr.failed;
    fr.failed_epoch = tr.failed_epoch;
    fr.failure = tr.failure;
    if (!job.checkpoint_prefix.empty() && !fr.failed)
      save_model(model, job.checkpoint_prefix + "_fold" + std::to_string(f) + ".ckpt");
    if (!fr.failed) {
      try {
        const auto ev = evaluate_model(model, data, valid_idx, cfg.batch_size, cfg.f1_average);
        fr.f1_valid = ev.f1;
        fr.t_test_seconds = ev.t_test_seconds;
        fr.f1_train = evaluate_model(model, data, train_idx, cfg.batch_size, cfg.f1_average).f1;
      } catch (const NumericalError& e) {
        fr.failed = true;
        fr.failure = e.what();
      }
    }
    r.failed = r.failed || fr.failed;
    r.folds.push_back(std::move(fr));
  }
  const double F = static_cast<double>(folds.num_folds);
  for (const auto& fr : r.folds) {
    r.f1_train += fr.f1_train / F;
    r.f1_valid += fr.f1_valid / F;
    r.t_train_seconds += fr.t_train_seconds;
    r.t_test_seconds += fr.t_test_seconds;
  }
  return r;
}

}  // namespace detail

// Trains on each fold's complement from a fresh initialization (seeded by
// derive_seed(init_seed, fold)) and evaluates on the fold. F1 values are fold
// means, times are sums over folds; T_test covers the validation folds.
inline RunReport cross_validate(const CrossValidationJob& job, const Dataset& data, const FoldPlan& folds,
                                const TrainConfig& cfg) {
  require_valid(cfg);
  require(folds.assignments.size() == data.size(), "cross_validate: fold plan does not cover the dataset");
  require(folds.num_folds >= 2, "cross_validate: need at least 2 folds");
  return cfg.precision == Precision::f32 ? detail::cross_validate_as<float>(job, data, folds, cfg)
                                         : detail::cross_validate_as<double>(job, data, folds, cfg);
}

// ---------------------------------------------------------------- aggregation

struct MeanRow {
  double f1_train = 0, f1_valid = 0, t_train_seconds = 0, t_test_seconds = 0;
  double parameter_count = 0, serialized_bytes = 0;
};

struct GroupSummary {
  std::string column;
  RunReport best;
  MeanRow mean;
  std::size_t count = 0;
};

// Best by f1_valid (ties to the lower model_index) and the arithmetic mean.
inline GroupSummary aggregate_reports(const std::vector<RunReport>& reports) {
  require(!reports.empty(), "aggregate_reports: empty report group");
  GroupSummary g;
  g.column = column_of(reports.front());
  g.count = reports.size();
  const RunReport* best = nullptr;
  for (const auto& r : reports) {
    require(column_of(r) == g.column, "aggregate_reports: mixed groups " + g.column + " and " + column_of(r));
    if (!best || r.f1_valid > best->f1_valid ||
        (r.f1_valid == best->f1_valid && r.model_index < best->model_index))
      best = &r;
    g.mean.f1_train += r.f1_train;
    g.mean.f1_valid += r.f1_valid;
    g.mean.t_train_seconds += r.t_train_seconds;
    g.mean.t_test_seconds += r.t_test_seconds;
    g.mean.parameter_count += static_cast<double>(r.parameter_count);
    g.mean.serialized_bytes += static_cast<double>(r.serialized_bytes);
  }
  g.best = *best;
  const double n = static_cast<double>(reports.size());
  for (double* v : {&g.mean.f1_train, &g.mean.f1_valid, &g.mean.t_train_seconds, &g.mean.t_test_seconds,
                    &g.mean.parameter_count, &g.mean.serialized_bytes})
    *v /= n;
  return g;
}

}  // namespace cmi
