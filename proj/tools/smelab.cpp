#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "smelab/errors.hpp"
#include "smelab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace smelab;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kMissing = 3, kConfigMismatch = 4, kVersionMismatch = 5 };

// Flags shared by the stages. Only flags given on the command line override
// the config file.
struct Flags {
  std::string config;
  std::string task;
  std::uint64_t seed = 0;
  std::size_t examples = 0;
  std::string activation;
  std::size_t epochs = 0;
  std::string editor;
  std::string ablation;
  std::size_t folds = 0;
  std::vector<std::size_t> memory_sizes;
  std::string memory_policy;
  std::size_t patched_layer = 0;
  double ft_lr = 0.0;
  std::size_t workers = 0;
  bool no_traces = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run config; flags override it")->check(CLI::ExistingFile);
  cmd->add_option("--task", f.task, "fact-check | kv-qa");
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--examples", f.examples, "Dataset size (0: task default)");
  cmd->add_option("--activation", f.activation, "relu | gelu");
  cmd->add_option("--epochs", f.epochs, "Training epochs for f0");
  cmd->add_option("--editor", f.editor, "t-patcher | ft-last | ft-all | ft-last-kl | ft-all-kl");
  cmd->add_option("--ablation", f.ablation, "none | no-lm | kl-patch | no-lm2");
  cmd->add_option("--folds", f.folds, "Number of edit folds");
  cmd->add_option("--memory-size", f.memory_sizes, "Memory capacity; several values run a sweep");
  cmd->add_option("--memory-policy", f.memory_policy, "reservoir | fixed");
  cmd->add_option("--patched-layer", f.patched_layer, "Block whose FFN receives patches");
  cmd->add_option("--ft-lr", f.ft_lr, "Learning rate of the fine-tuning baselines");
  cmd->add_option("--workers", f.workers, "Folds run in parallel");
  cmd->add_flag("--no-traces", f.no_traces, "Skip per-step retention traces");
}

RunConfig resolve(const Flags& f, const CLI::App* cmd) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  auto given = [cmd](const char* name) { return cmd->get_option(name)->count() > 0; };
  if (given("--task")) c.task = f.task;
  if (given("--seed")) c.seed = f.seed;
  if (given("--examples")) c.examples = f.examples;
  if (given("--activation")) c.activation = f.activation;
  if (given("--epochs")) c.epochs = f.epochs;
  if (given("--editor")) c.editor = f.editor;
  if (given("--ablation")) c.ablation = f.ablation;
  if (given("--folds")) c.folds = f.folds;
  if (given("--memory-size")) c.memory_sizes = f.memory_sizes;
  if (given("--memory-policy")) c.memory_policy = f.memory_policy;
  if (given("--patched-layer")) c.patched_layer = f.patched_layer;
  if (given("--ft-lr")) c.ft_lr = f.ft_lr;
  if (given("--workers")) c.workers = f.workers;
  if (f.no_traces) c.traces = false;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential model editing with Transformer-Patcher on synthetic tasks"};
  app.require_subcommand(1);
  Flags flags;
  std::string out, data, model, fold_dir;
  std::vector<std::string> inputs;
  std::size_t fold = 0;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_common(gen, flags);
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train f0 on the training split");
  add_common(train, flags);
  train->add_option("--data", data, "Directory written by gen")->required();
  train->add_option("--out", out, "Output directory")->required();

  auto* edit = app.add_subcommand("edit", "Run sequential editing over the folds");
  add_common(edit, flags);
  edit->add_option("--model", model, "Directory written by train")->required();
  edit->add_option("--out", out, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Aggregate edit runs into mean and std per editor");
  report->add_option("--in", inputs, "Edit directories")->required();
  report->add_option("--out", out, "Output directory")->required();

  auto* replay = app.add_subcommand("replay", "Re-derive a fold's edit decisions from its records");
  replay->add_option("--in", fold_dir, "Edit directory")->required();
  replay->add_option("--fold", fold, "Fold index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      auto m = cmd_gen(resolve(flags, gen), out);
      std::cout << "wrote " << m["examples"] << " examples to " << out << "\n";
    } else if (train->parsed()) {
      auto m = cmd_train(resolve(flags, train), data, out);
      std::cout << m["accuracy"].dump(2) << "\n";
    } else if (edit->parsed()) {
      RunConfig cfg = resolve(flags, edit);
      cmd_edit(cfg, model, out);
      const bool sweep = cfg.memory_sizes.size() > 1;
      std::cout << read_file(fs::path(out) / (sweep ? "memory_sweep.csv" : "summary.csv"));
    } else if (report->parsed()) {
      std::vector<fs::path> dirs(inputs.begin(), inputs.end());
      std::cout << cmd_report(dirs, out);
    } else if (replay->parsed()) {
      ReplayResult r = cmd_replay(fold_dir, fold);
      std::cout << "decisions " << r.decisions << " decision_mismatches " << r.decision_mismatches
                << " predictions " << r.predictions_checked << " prediction_mismatches " << r.prediction_mismatches
                << "\n";
      if (r.mismatches() != 0) return kOther;
    }
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const ConfigMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigMismatch;
  } catch (const VersionMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVersionMismatch;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
