// cpgc: command-line driver for the universal-perturbation pipeline.
//
//   cpgc gen-data  [--config F] [--seed N] [--domain A|B] [--out DIR] [--force]
//   cpgc pretrain  [--config F] [--out DIR] [--force]
//   cpgc train-uap [--config F] [--seed N] [--variant NAME] [--out DIR] [--force]
//   cpgc eval      [--config F] [--variant NAME] [--defense NAME] [--domain A|B] [--out DIR] [--force]
//   cpgc report    [--config F] [--out DIR] [--force] [CSV...]
//
// The run root comes from --out, else $CPGC_RUN_ROOT, else the config.

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cpgc/config.hpp"
#include "cpgc/pipeline.hpp"

using namespace cpgc;

namespace {

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::string variant;
  std::string defense;
  std::string domain;
  std::string out;
  std::vector<std::string> inputs;
};

config::RunConfig load_config(const Flags& f, bool out_is_root) {
  config::RunConfig c = f.config_path.empty() ? config::RunConfig{} : config::load_run_config(f.config_path);
  if (f.seed) c.set_seed(*f.seed);
  config::resolve_paths(c);
  if (out_is_root && !f.out.empty()) c.paths.root = fs::absolute(f.out).lexically_normal();
  c.validate();
  return c;
}

pipeline::StageOptions stage_options(const Flags& f) {
  pipeline::StageOptions o;
  o.force = f.force;
  if (!f.variant.empty()) o.variant = f.variant;
  if (!f.defense.empty()) o.defense = defense::parse_defense(f.defense);
  if (!f.domain.empty()) o.domain = corpus::parse_domain(f.domain);
  return o;
}

int run(const std::string& command, const Flags& f) {
  if (command == "gen-data") {
    const auto c = load_config(f, true);
    const auto r = pipeline::gen_data(c, stage_options(f));
    for (std::size_t i = 0; i < r.dirs.size(); ++i) std::cout << r.dirs[i].string() << " " << r.fingerprints[i] << "\n";
    return 0;
  }
  if (command == "pretrain") {
    const auto c = load_config(f, true);
    const auto r = pipeline::pretrain(c, stage_options(f));
    std::cout << pipeline::recall_csv(r.members);
    if (!r.all_pass()) {
      for (const auto& m : r.members)
        if (!m.passes) std::cerr << "error: " << m.id << " is below the R@1 floor of " << c.zoo.recall_floor << "\n";
      return 1;
    }
    return 0;
  }
  if (command == "train-uap") {
    const auto c = load_config(f, true);
    const auto r = pipeline::train_uap(c, stage_options(f));
    std::cout << r.manifest.string() << "\n";
    return 0;
  }
  if (command == "eval") {
    const auto c = load_config(f, true);
    const auto r = pipeline::evaluate(c, stage_options(f));
    std::cout << r.summary << "\n" << (r.dir / "report.csv").string() << "\n";
    return 0;
  }
  if (command == "report") {
    // For report, --out names the output directory rather than the run root.
    const auto c = load_config(f, false);
    std::vector<fs::path> inputs(f.inputs.begin(), f.inputs.end());
    std::optional<fs::path> out;
    if (!f.out.empty()) out = fs::path(f.out);
    const auto r = pipeline::report(c, inputs, out, stage_options(f));
    std::cout << r.document;
    return 0;
  }
  throw ContractError("unknown command " + command);
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees many mid-sized buffers per step; keeping them
  // on the heap avoids an mmap/munmap pair per tensor.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Universal adversarial perturbations against toy dual encoders"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_flag("--force", f.force, "Overwrite existing outputs");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpora");
  common(gen);
  gen->add_option("--seed", f.seed, "Global seed");
  gen->add_option("--domain", f.domain, "Only this domain")->check(CLI::IsMember({"A", "B"}));
  gen->add_option("--out", f.out, "Run root directory");

  auto* pre = app.add_subcommand("pretrain", "Pre-train the model zoo");
  common(pre);
  pre->add_option("--seed", f.seed, "Global seed");
  pre->add_option("--out", f.out, "Run root directory");

  auto* uap = app.add_subcommand("train-uap", "Train a universal perturbation");
  common(uap);
  uap->add_option("--seed", f.seed, "Global seed");
  uap->add_option("--variant", f.variant, "full, no_CL, no_Dis, random_positives, no_cross_attention, gap or random");
  uap->add_option("--out", f.out, "Run root directory");

  auto* ev = app.add_subcommand("eval", "Evaluate an artifact against the zoo");
  common(ev);
  ev->add_option("--seed", f.seed, "Global seed");
  ev->add_option("--variant", f.variant, "Artifact to evaluate (as for train-uap, or null)");
  ev->add_option("--defense", f.defense, "none, gaussian_smooth, median_smooth, average_smooth or jpeg_like");
  ev->add_option("--domain", f.domain, "Test domain")->check(CLI::IsMember({"A", "B"}));
  ev->add_option("--out", f.out, "Run root directory");

  auto* rep = app.add_subcommand("report", "Merge report CSVs into one comparison");
  common(rep);
  rep->add_option("--out", f.out, "Output directory (default <root>/reports/summary)");
  rep->add_option("inputs", f.inputs, "Report CSVs (default: every reports/*/report.csv)");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, f);
  } catch (const std::exception& e) {
    std::cerr << "cpgc " << command << ": " << e.what() << "\n";
    return 1;
  }
}
