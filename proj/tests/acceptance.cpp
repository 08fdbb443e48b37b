// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cmi/checkpoint.hpp"
#include "cmi/gradcheck.hpp"
#include "cmi/model.hpp"
#include "cmi/netcheck.hpp"
#include "cmi/report.hpp"
#include "cmi/sampler.hpp"
#include "cmi/sweep.hpp"
#include "cmi/train.hpp"

using namespace cmi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

ArchConfig desk(ArchConfig c, double width = 0.125, std::size_t res = 64) {
  c.width_multiplier = width;
  c.input_h = c.input_w = res;
  c.padding = PaddingScheme::same;
  return c;
}

const std::vector<std::pair<std::string, ArchConfig>>& ordered_archs() {
  static const std::vector<std::pair<std::string, ArchConfig>> a{
      {"CMI1", cmi_preset(1)}, {"CMI2", cmi_preset(2)}, {"CMI3", cmi_preset(3)}, {"MI", full_preset()}};
  return a;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("cmi_accept_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- 1, 2

Outcome block_arithmetic() {
  Outcome o{true, ""};
  const std::map<std::tuple<int, int, int>, std::size_t> published{
      {{1, 2, 1}, 58}, {{2, 3, 2}, 85}, {{3, 4, 3}, 112}, {{4, 7, 3}, 149}};
  for (const auto& [t, want] : published) {
    const auto [k, m, n] = t;
    if (cb_count(k, m, n) != want) o.pass = false;
  }
  if (count_conv_nodes(make_plan(full_preset())) != 149) o.pass = false;
  std::size_t walked = 0, mismatches = 0;
  for (int k = 1; k <= 4; ++k)
    for (int m = 1; m <= 7; ++m)
      for (int n = 1; n <= 3; ++n) {
        if (k + m + n >= 14) continue;
        ArchConfig c;
        c.k = k, c.m = m, c.n = n;
        const auto plan = make_plan(c);
        ++walked;
        if (count_conv_nodes(plan) != cb_count(k, m, n) || plan.convs.size() != cb_count(k, m, n)) ++mismatches;
      }
  o.pass = o.pass && walked == 83 && mismatches == 0;
  o.detail = "58/85/112/149 published sums; plan walk agrees on " + std::to_string(walked - mismatches) + "/" +
             std::to_string(walked) + " legal triples";
  return o;
}

Outcome constraint_gate() {
  std::size_t accepted = 0;
  std::vector<std::string> rejected;
  for (int k = 1; k <= 4; ++k)
    for (int m = 1; m <= 7; ++m)
      for (int n = 1; n <= 3; ++n) {
        ArchConfig c;
        c.k = k, c.m = m, c.n = n;
        if (validate_config(c).empty())
          ++accepted;
        else
          rejected.push_back("(" + std::to_string(k) + "," + std::to_string(m) + "," + std::to_string(n) + ")");
      }
  Outcome o;
  o.pass = accepted == 83 && rejected.size() == 1 && rejected[0] == "(4,7,3)";
  o.detail = std::to_string(accepted) + " accepted, " + std::to_string(rejected.size()) + " rejected " +
             (rejected.empty() ? "" : rejected[0]);
  return o;
}

// ---------------------------------------------------------------- 3

Outcome relu_equivalence() {
  const auto arch = desk(cmi_preset(1));
  auto wired = build_network<float>(arch, baseline_assignment(arch, ActivationKind::relu), 42);
  auto fixed = build_network<float>(arch, {}, 42, ActivationWiring::hardcoded_relu);
  std::mt19937_64 rng(1);
  std::size_t identical = 0;
  for (int batch = 0; batch < 10; ++batch) {
    const Var<float> x(detail::random_tensor({4, 3, 64, 64}, rng, 0, 1).cast<float>());
    std::vector<std::size_t> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(uniform_index(rng, 4));
    wired.zero_grad();
    fixed.zero_grad();
    auto a = wired.forward(x, NormMode::train), b = fixed.forward(x, NormMode::train);
    bool same = a.value() == b.value();
    backward(softmax_cross_entropy<float>(a, labels));
    backward(softmax_cross_entropy<float>(b, labels));
    const auto pa = wired.parameters(), pb = fixed.parameters();
    same = same && pa.size() == pb.size();
    for (std::size_t i = 0; same && i < pa.size(); ++i) same = pa[i].grad() == pb[i].grad();
    identical += same;
  }
  return {identical == 10, std::to_string(identical) + "/10 batches bit-identical in outputs and gradients"};
}

// ---------------------------------------------------------------- 4

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ops = run_op_gradchecks(7, 20, 1e-5);
  bool ops_ok = !ops.empty();
  double op_worst = 0;
  std::string worst_op;
  for (const auto& r : ops) {
    ops_ok = ops_ok && r.passed;
    if (r.max_rel_error >= op_worst) op_worst = r.max_rel_error, worst_op = r.op;
  }
  const auto net = network_gradcheck();
  const double secs = seconds_since(t0);
  std::string blocks;
  for (const auto& b : net.blocks)
    blocks += (blocks.empty() ? "" : ",") + std::string("cb") + std::to_string(b.cb_index) + "/" +
              std::string(to_string(b.activation));
  Outcome o;
  o.pass = ops_ok && net.passed && net.blocks.size() >= 3 && secs < 300;
  o.detail = std::to_string(ops.size()) + " ops, worst " + worst_op + " " + num(op_worst, 3) +
             " (tol 1e-5); network " + std::to_string(net.parameters_checked) + " params on " + blocks +
             ", max rel err " + num(net.max_rel_error, 3) + " (tol 1e-4); " + num(secs, 3) + " s";
  return o;
}

// ---------------------------------------------------------------- 5

struct Frac {
  std::int64_t p = 0, q = 1;
  Frac(std::int64_t a = 0, std::int64_t b = 1) {
    const auto g = std::gcd(a, b);
    p = a / g, q = b / g;
  }
  friend Frac operator+(Frac a, Frac b) { return {a.p * b.q + b.p * a.q, a.q * b.q}; }
  friend Frac operator*(Frac a, Frac b) { return {a.p * b.p, a.q * b.q}; }
  friend Frac operator/(Frac a, Frac b) { return {a.p * b.q, a.q * b.p}; }
  double value() const { return static_cast<double>(p) / static_cast<double>(q); }
};

// Confusion matrix, precision and recall as exact fractions, harmonic mean.
std::vector<Frac> oracle_per_class(const std::vector<std::size_t>& t, const std::vector<std::size_t>& p,
                                   std::size_t K) {
  std::vector<std::vector<std::int64_t>> C(K, std::vector<std::int64_t>(K, 0));
  for (std::size_t i = 0; i < t.size(); ++i) ++C[t[i]][p[i]];
  std::vector<Frac> f1;
  for (std::size_t c = 0; c < K; ++c) {
    std::int64_t predicted = 0, actual = 0;
    for (std::size_t j = 0; j < K; ++j) predicted += C[j][c], actual += C[c][j];
    const Frac precision = predicted ? Frac(C[c][c], predicted) : Frac(0);
    const Frac recall = actual ? Frac(C[c][c], actual) : Frac(0);
    const Frac s = precision + recall;
    f1.push_back(s.p == 0 ? Frac(0) : Frac(2) * precision * recall / s);
  }
  return f1;
}

Outcome metric_oracle() {
  std::mt19937_64 rng(555);
  std::size_t exact = 0;
  double worst = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t K = 1 + uniform_index(rng, 6), n = 1 + uniform_index(rng, 50);
    std::vector<std::size_t> t(n), p(n);
    const bool skewed = inst % 3 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = uniform_index(rng, K);
      p[i] = skewed && uniform_index(rng, 2) ? t[i] : uniform_index(rng, K);
    }
    Frac mean(0);
    for (const auto& f : oracle_per_class(t, p, K)) mean = mean + f;
    mean = mean / Frac(static_cast<std::int64_t>(K));
    const double got = macro_f1(t, p, K);
    exact += got == mean.value();
    worst = std::max(worst, std::abs(got - mean.value()));
  }
  const double hand = macro_f1({0, 0, 1, 1}, {0, 0, 1, 0}, 2);
  Frac hand_mean(0);
  for (const auto& f : oracle_per_class({0, 0, 1, 1}, {0, 0, 1, 0}, 2)) hand_mean = hand_mean + f;
  hand_mean = hand_mean / Frac(2);
  Outcome o;
  o.pass = exact == 200 && hand == 11.0 / 15.0 && hand_mean.p == 11 && hand_mean.q == 15;
  o.detail = std::to_string(exact) + "/200 equal to the oracle's exact fraction rounded to double (max |diff| " +
             num(worst, 3) + "); hand case " + num(hand, 17) + ", oracle " + std::to_string(hand_mean.p) + "/" +
             std::to_string(hand_mean.q);
  return o;
}

// ---------------------------------------------------------------- 6

bool folds_ok(const std::vector<std::size_t>& labels, std::size_t F, std::uint64_t seed) {
  const auto plan = stratified_folds(labels, F, seed);
  if (plan.assignments.size() != labels.size()) return false;
  std::size_t covered = 0;
  for (std::size_t f = 0; f < F; ++f) covered += plan.fold(f).size();
  if (covered != labels.size()) return false;
  std::map<std::size_t, std::size_t> total;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> per;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (plan.assignments[i] >= F) return false;
    ++total[labels[i]];
    ++per[{labels[i], plan.assignments[i]}];
  }
  for (const auto& [c, n] : total)
    for (std::size_t f = 0; f < F; ++f) {
      const double want = static_cast<double>(n) / static_cast<double>(F);
      if (std::abs(static_cast<double>(per[{c, f}]) - want) >= 1.0) return false;
    }
  return true;
}

Outcome stratification() {
  std::mt19937_64 rng(606);
  std::size_t good = 0;
  // 436 samples over 4 classes, as skewed as the clinical rating distribution
  std::vector<std::size_t> clinical;
  for (auto [c, n] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 336}, {1, 70}, {2, 28}, {3, 2}})
    clinical.insert(clinical.end(), n, c);
  std::shuffle(clinical.begin(), clinical.end(), rng);
  const bool clinical_ok = folds_ok(clinical, 3, 1);
  good += clinical_ok;
  for (int inst = 1; inst < 500; ++inst) {
    const std::size_t K = 1 + uniform_index(rng, 8), F = 2 + uniform_index(rng, 9);
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < K; ++c) labels.insert(labels.end(), uniform_index(rng, 60), c);
    while (labels.size() < F) labels.push_back(uniform_index(rng, K));
    std::shuffle(labels.begin(), labels.end(), rng);
    good += folds_ok(labels, F, rng());
  }
  return {good == 500, std::to_string(good) + "/500 multisets within +-1 per class and partitioned (436-sample "
                                                  "4-class set: " + (clinical_ok ? "ok" : "bad") + ")"};
}

// ---------------------------------------------------------------- 7

Outcome desk_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = generate_synthetic({4, 30, 64, 3, 0, 0.1});
  const auto folds = stratified_folds(data, 3, 0);
  const auto train_idx = folds.complement(0), valid_idx = folds.fold(0);
  auto arch = desk(cmi_preset(1));
  auto model = build_network<float>(arch, sample_assignment({arch, 1, 0}, 0), 1);
  TrainConfig cfg;  // defaults: 30 epochs, batch 16, lr 0.01, momentum 0.9
  double best = 0;
  std::size_t first_hit = 0;
  std::vector<double> f1s;
  const auto res = train_model(model, data, train_idx, cfg, [&](std::size_t epoch, double) {
    const double f = evaluate_model(model, data, valid_idx).f1;
    f1s.push_back(f);
    best = std::max(best, f);
    if (!first_hit && f >= 0.90) first_hit = epoch;
  });
  const double secs = seconds_since(t0);
  Outcome o;
  const bool loss_down = res.loss_curve.size() == 30 && res.loss_curve.back() < res.loss_curve.front();
  o.pass = !res.failed && first_hit > 0 && loss_down && secs < 1200;
  o.detail = "train " + std::to_string(train_idx.size()) + " / valid " + std::to_string(valid_idx.size()) +
             "; valid macro-F1 >= 0.90 first at epoch " + (first_hit ? std::to_string(first_hit) : "never") +
             ", best " + num(best) + ", epoch 30 " + num(f1s.empty() ? 0 : f1s.back()) + "; loss " +
             num(res.loss_curve.empty() ? 0 : res.loss_curve.front()) + " -> " +
             num(res.loss_curve.empty() ? 0 : res.loss_curve.back()) + "; " + num(secs, 3) + " s";
  return o;
}

// ---------------------------------------------------------------- 8

Outcome cost_ordering() {
  Outcome o{true, ""};
  auto ordered = [](const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
      if (!(v[i - 1] < v[i])) return false;
    return true;
  };
  for (double w : {1.0, 0.5, 0.25, 0.125, 0.0625}) {
    std::vector<double> flops, params;
    for (const auto& [name, a] : ordered_archs()) {
      auto c = a;
      c.width_multiplier = w;
      const auto s = arch_stats(make_plan(c));
      flops.push_back(static_cast<double>(s.flops_per_image));
      params.push_back(static_cast<double>(s.parameter_count));
    }
    if (!ordered(flops) || !ordered(params)) o.pass = false;
  }

  std::vector<double> sizes;
  bool sizes_exact = true;
  for (const auto& [name, a] : ordered_archs()) {
    const auto c = desk(a);
    auto model = build_network<float>(c, sample_assignment({c, 1, 3}, 0), 5);
    const auto bytes = serialize_model(model).size();
    const auto s = arch_stats(make_plan(c));
    sizes_exact = sizes_exact && bytes == s.parameter_count * 4 + kCheckpointHeaderBytes && bytes == s.serialized_bytes;
    sizes.push_back(static_cast<double>(bytes));
  }

  const auto data = generate_synthetic({4, 30, 64, 3, 0, 0.1});
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  TrainConfig cfg;
  cfg.epochs = 5;
  std::vector<double> t_train(ordered_archs().size(), 0.0);
  for (int rep = 0; rep < 3; ++rep)
    for (std::size_t i = 0; i < ordered_archs().size(); ++i) {
      const auto c = desk(ordered_archs()[i].second);
      auto model = build_network<float>(c, sample_assignment({c, 1, 3}, rep), derive_seed(9, rep));
      t_train[i] += train_model(model, data, all, cfg).t_train_seconds / 3.0;
    }

  std::string mb;
  for (const auto& [name, a] : ordered_archs()) {
    const auto s = arch_stats(make_plan(a));
    mb += (mb.empty() ? "" : ", ") + name + " " + num(static_cast<double>(s.serialized_bytes) / (1 << 20), 4);
  }
  o.pass = o.pass && sizes_exact && ordered(sizes) && ordered(t_train);
  o.detail = "flops/params ordered at widths 1..1/16; checkpoint bytes = params*4+512: " +
             std::string(sizes_exact ? "yes" : "no") + "; mean T_train(5 ep) s: " + num(t_train[0], 3) + " < " +
             num(t_train[1], 3) + " < " + num(t_train[2], 3) + " < " + num(t_train[3], 3) +
             "; full-width MiB (not asserted; published sizes 129/190/252/323 MB): " + mb;
  return o;
}

// ---------------------------------------------------------------- 9

Outcome sampler_statistics() {
  SamplePlan p{cmi_preset(1), 174, 2024};
  std::map<ActivationKind, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& a : sample_assignments(p))
    for (auto k : a.entries) ++counts[k], ++total;
  bool in_band = total >= 10000;
  std::string freqs;
  for (auto kind : kAllActivations) {
    const double f = static_cast<double>(counts[kind]) / static_cast<double>(total);
    in_band = in_band && f >= 0.23 && f <= 0.27;
    freqs += std::string(freqs.empty() ? "" : ", ") + std::string(to_string(kind)) + " " + num(f, 4);
  }
  TempDir a("sa"), b("sb");
  for (const auto* dir : {&a.path, &b.path}) {
    const auto assignments = sample_assignments({cmi_preset(2), 10, 77});
    for (std::size_t j = 0; j < assignments.size(); ++j)
      std::ofstream(*dir / assignment_file_name("cmi2", j, assignments[j]), std::ios::binary)
          << serialize_assignment(assignments[j]);
  }
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::directory_iterator(a.path)) {
    ++files;
    same += slurp(e.path()) == slurp(b.path / e.path().filename());
  }
  return {in_band && files == 10 && same == files,
          std::to_string(total) + " entries: " + freqs + " (band [0.23, 0.27]); " + std::to_string(same) + "/" +
              std::to_string(files) + " files byte-identical"};
}

// ---------------------------------------------------------------- 10

Outcome protocol_determinism() {
  TempDir root("sweep");
  auto make = [&](const std::string& sub) {
    SweepConfig c;
    c.architectures = {cmi_preset(1), cmi_preset(2)};
    c.num_models = 2;
    c.width_multiplier = 0.0625;
    c.resolution = 32;
    c.padding = PaddingScheme::same;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.dataset.synthetic = SyntheticSpec{4, 6, 32, 3, 3, 0.1};
    c.seeds = {11, 12, 13, 14};
    c.output_dir = (root.path / sub).string();
    for (auto& a : c.architectures) {
      a.width_multiplier = c.width_multiplier;
      a.input_h = a.input_w = c.resolution;
      a.padding = c.padding;
    }
    return c;
  };
  const auto first = run_sweep(make("a")), second = run_sweep(make("b"));
  const auto ra = load_reports((root.path / "a").string()), rb = load_reports((root.path / "b").string());
  std::map<std::string, nlohmann::json> by_name;
  for (const auto& r : ra) by_name[column_of(r) + "#" + std::to_string(r.model_index)] = without_timing(r);
  std::size_t equal = 0;
  for (const auto& r : rb) equal += by_name[column_of(r) + "#" + std::to_string(r.model_index)] == without_timing(r);
  const auto rendered = render_report(ra);
  const std::vector<std::string> canon(kCanonicalColumns.begin(), kCanonicalColumns.end());
  const std::vector<std::string> rows(kReportRows.begin(), kReportRows.end());
  bool table_ok = rendered.best.columns == canon && rendered.best.row_labels == rows;
  for (std::size_t col = 0; table_ok && col < canon.size(); ++col) {
    const bool present = col < 4;
    for (std::size_t row = 0; row < rows.size(); ++row)
      table_ok = table_ok && (rendered.best.cells[row][col] != "n/a") == present;
  }
  std::cout << render_markdown(rendered.best);
  return {ra.size() == 8 && rb.size() == 8 && equal == 8 && table_ok && first.completed == 8 &&
              second.completed == 8,
          std::to_string(equal) + "/8 run reports equal outside timing; best-model table " +
              std::to_string(rendered.best.columns.size()) + " columns x " +
              std::to_string(rendered.best.row_labels.size()) + " rows" + (table_ok ? "" : " (malformed)")};
}

}  // namespace

// Optional arguments pick criteria by number, e.g. `acceptance 5 7`.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"block arithmetic", block_arithmetic},
      {"constraint gate", constraint_gate},
      {"uniform-RELU equivalence", relu_equivalence},
      {"gradient correctness", gradient_correctness},
      {"metric oracle", metric_oracle},
      {"stratification", stratification},
      {"desk-scale learning", desk_learning},
      {"cost ordering", cost_ordering},
      {"sampler statistics", sampler_statistics},
      {"protocol determinism", protocol_determinism},
  };
  // criteria 1 and 2 carry a 1 s budget
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const auto i = std::strtoul(argv[a], nullptr, 10);
    if (i < 1 || i > criteria.size()) {
      std::cerr << "no criterion '" << argv[a] << "'\n";
      return 2;
    }
    selected[i - 1] = true;
  }
  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (i < 2 && secs >= 1.0) {
      o.pass = false;
      o.detail += "; over the 1 s budget";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].first
              << "): " << o.detail << " [" << num(secs, 3) << " s]" << std::endl;
  }
  std::cout << (ran - failures) << "/" << ran << " criteria passed" << std::endl;
  return failures ? 1 : 0;
}
