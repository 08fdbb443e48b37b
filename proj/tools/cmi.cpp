// cmi: count, sample, synth, train, gradcheck and report subcommands.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cmi/data.hpp"
#include "cmi/gradcheck.hpp"
#include "cmi/inception.hpp"
#include "cmi/netcheck.hpp"
#include "cmi/report.hpp"
#include "cmi/sampler.hpp"
#include "cmi/sweep.hpp"

namespace fs = std::filesystem;
using namespace cmi;

namespace {

struct ArchFlags {
  std::optional<int> k, m, n;
  std::string mode = "compressed";
  std::string preset;
  double width = 1.0;
  std::size_t resolution = 299;
  std::string padding = "reference";
  std::size_t classes = 4;

  void add(CLI::App* app, bool shape_flags) {
    app->add_option("--k", k, "Inception-A blocks");
    app->add_option("--m", m, "Inception-B blocks");
    app->add_option("--n", n, "Inception-C blocks");
    app->add_option("--mode", mode, "compressed or full")->check(CLI::IsMember({"compressed", "full"}));
    app->add_option("--preset", preset, "cmi1, cmi2, cmi3 or mi");
    if (!shape_flags) return;
    app->add_option("--width", width, "channel width multiplier");
    app->add_option("--resolution", resolution, "square input resolution");
    app->add_option("--padding", padding, "reference or same")->check(CLI::IsMember({"reference", "same"}));
    app->add_option("--classes", classes, "number of output classes");
  }

  ArchConfig build() const {
    ArchConfig c;
    const bool explicit_kmn = k || m || n;
    if (!preset.empty()) {
      if (explicit_kmn) throw StructuralError("use either --preset or --k/--m/--n, not both");
      c = preset_by_name(preset);
    } else {
      if (!(k && m && n)) throw StructuralError("give --preset or all of --k, --m, --n");
      c.k = *k;
      c.m = *m;
      c.n = *n;
      c.mode = mode == "full" ? ArchMode::full : ArchMode::compressed;
    }
    c.width_multiplier = width;
    c.input_h = c.input_w = resolution;
    c.padding = parse_padding(padding);
    c.num_classes = classes;
    return c;
  }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw StructuralError("cannot write '" + p.string() + "'");
  out << s;
}

int cmd_count(const ArchFlags& f) {
  const auto cfg = f.build();
  const auto violations = validate_config(cfg);
  if (!violations.empty()) {
    for (const auto& v : violations) std::cerr << v << "\n";
    return 2;
  }
  const auto plan = make_plan(cfg);
  std::cout << arch_summary(plan, arch_stats(plan)).dump(2) << "\n";
  return 0;
}

int cmd_sample(const ArchFlags& f, std::size_t num, std::uint64_t seed, const std::string& set,
               const std::string& out) {
  SamplePlan plan{f.build(), num, seed, parse_activation_set(set)};
  const auto assignments = sample_assignments(plan);
  fs::create_directories(out);
  const std::string id = arch_id(plan.arch);
  for (std::size_t j = 0; j < assignments.size(); ++j) {
    const fs::path p = fs::path(out) / assignment_file_name(id, j, assignments[j]);
    write_text(p, serialize_assignment(assignments[j]));
    std::cout << p.string() << "\n";
  }
  return 0;
}

int cmd_synth(const SyntheticSpec& spec, const std::string& out) {
  const auto manifest = write_dataset(generate_synthetic(spec), out);
  std::cout << manifest << "\n";
  return 0;
}

int cmd_train(const std::string& config, std::size_t workers) {
  const auto cfg = load_sweep_config(config);
  const auto outcome = run_sweep(cfg, workers, [](const std::string& s) { std::cerr << s << "\n"; });
  std::cout << "completed " << outcome.completed << ", skipped " << outcome.skipped << ", failed "
            << outcome.failed << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t cases, double tol, bool network, double net_tol,
                  std::size_t blocks) {
  bool ok = true;
  for (const auto& r : run_op_gradchecks(seed, cases, tol)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.op << " cases=" << r.cases
              << " max_rel_error=" << r.max_rel_error << "\n";
    ok = ok && r.passed;
  }
  if (network) {
    NetworkCheckOptions o;
    o.seed = seed;
    o.tolerance = net_tol;
    o.num_blocks = blocks;
    const auto r = network_gradcheck(o);
    for (const auto& b : r.blocks)
      std::cout << "  block " << b.cb_index << " (" << to_string(b.activation) << ") params=" << b.parameters
                << " max_rel_error=" << b.max_rel_error << "\n";
    std::cout << (r.passed ? "PASS " : "FAIL ") << "network " << arch_id(o.arch)
              << " params=" << r.parameters_checked << " max_rel_error=" << r.max_rel_error << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_report(const std::string& dir, const std::string& out) {
  const auto r = render_report(load_reports(dir));
  const fs::path o = out.empty() ? fs::path(dir) : fs::path(out);
  fs::create_directories(o);
  write_text(o / "report.md", r.markdown);
  write_text(o / "best.csv", r.best_csv);
  write_text(o / "average.csv", r.average_csv);
  std::cout << r.markdown;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressed multi-function Inception-V4 toolkit"};
  app.require_subcommand(1);

  ArchFlags count_flags;
  auto* count = app.add_subcommand("count", "print the architecture summary as JSON");
  count_flags.add(count, true);

  ArchFlags sample_flags;
  std::size_t num = 10;
  std::uint64_t sample_seed = 0;
  std::string set = "RELU,SIG,TANH,ELU", sample_out = "assignments";
  auto* sample = app.add_subcommand("sample", "write random per-block activation assignments");
  sample_flags.add(sample, false);
  sample->add_option("--num", num, "number of models");
  sample->add_option("--seed", sample_seed, "base seed");
  sample->add_option("--set", set, "comma-separated activation set");
  sample->add_option("--out", sample_out, "output directory");

  SyntheticSpec synth_spec;
  std::string synth_out = "synthetic";
  auto* synth = app.add_subcommand("synth", "write a synthetic PNG dataset and manifest");
  synth->add_option("--classes", synth_spec.num_classes, "number of classes");
  synth->add_option("--per-class", synth_spec.per_class, "images per class");
  synth->add_option("--resolution", synth_spec.resolution, "image side in pixels");
  synth->add_option("--channels", synth_spec.channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  synth->add_option("--noise", synth_spec.noise, "pixel noise std");
  synth->add_option("--seed", synth_spec.seed, "seed");
  synth->add_option("--out", synth_out, "output directory");

  std::string config;
  std::size_t workers = 1;
  auto* train = app.add_subcommand("train", "run a cross-validation sweep from a JSON config");
  train->add_option("--config", config, "sweep config JSON")->required();
  train->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);

  std::uint64_t gc_seed = 7;
  std::size_t gc_cases = 20, gc_blocks = 3;
  double gc_tol = 1e-5, gc_net_tol = 1e-4;
  bool gc_network = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--seed", gc_seed, "seed");
  gradcheck->add_option("--cases", gc_cases, "random cases per op");
  gradcheck->add_option("--tol", gc_tol, "per-op relative error tolerance");
  gradcheck->add_flag("--network", gc_network, "also check a desk-scale CMI1 network end to end");
  gradcheck->add_option("--network-tol", gc_net_tol, "network relative error tolerance");
  gradcheck->add_option("--blocks", gc_blocks, "blocks to check in the network");

  std::string report_dir, report_out;
  auto* report = app.add_subcommand("report", "render best-model and average tables");
  report->add_option("--dir", report_dir, "directory of run reports")->required();
  report->add_option("--out", report_out, "output directory (default: --dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*count) return cmd_count(count_flags);
    if (*sample) return cmd_sample(sample_flags, num, sample_seed, set, sample_out);
    if (*synth) return cmd_synth(synth_spec, synth_out);
    if (*train) return cmd_train(config, workers);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_cases, gc_tol, gc_network, gc_net_tol, gc_blocks);
    if (*report) return cmd_report(report_dir, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
