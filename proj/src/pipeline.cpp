#include "smelab/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "smelab/checkpoint.hpp"
#include "smelab/errors.hpp"
#include "smelab/random.hpp"
#include "smelab/task_io.hpp"
#include "smelab/training.hpp"

namespace smelab {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// Seed salts for the stages that draw randomness.
constexpr std::uint64_t kInitSalt = 0x696e6974;
constexpr std::uint64_t kTrainSalt = 0x7472616e;
constexpr std::uint64_t kSplitSalt = 0x73706c74;

fs::path require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("missing input: " + p.string());
  return p;
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(require(p)));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<LabeledInput> items_of(const Dataset& d) {
  std::vector<LabeledInput> out;
  out.reserve(d.size());
  for (const auto& e : d) out.push_back(labeled(e));
  return out;
}

json accuracy_json(const TransformerModel& m, const Dataset& d) {
  Accuracy a = evaluate_accuracy(m, items_of(d));
  return {{"examples", a.examples}, {"tokens", a.tokens}, {"n", d.size()}};
}

void check_hash(const json& manifest, const char* key, const std::string& want, const fs::path& where) {
  if (!manifest.contains(key) || manifest[key].get<std::string>() != want) {
    throw ConfigMismatch(where.string() + ": " + key + " does not match the current configuration");
  }
}

json loss_json(const LossTerms& l) {
  return {{"l_e", l.l_e}, {"l_a", l.l_a}, {"l_m1", l.l_m1}, {"l_m2", l.l_m2}, {"l_kl", l.l_kl}, {"total", l.total}};
}

std::string activation_stats_csv(const ActivationStats& a) {
  std::string out = "query,mean,std,n\n";
  auto row = [&out](const char* name, const MeanStd& m) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%zu\n", name, m.mean, m.std, m.n);
    out += buf;
  };
  row("edit", a.edit);
  row("past_edit", a.past_edit);
  row("random", a.random);
  return out;
}

// Writes one fold's artifacts and returns its report.
SmeReport write_fold(const SmeRun& run, const Dataset& stream, const fs::path& dir) {
  fs::create_directories(dir);
  std::string records;
  for (const auto& r : run.records) records += record_json(r).dump() + "\n";
  write_file_atomic(dir / "records.jsonl", records);
  write_file_atomic(dir / "stream.jsonl", to_jsonl(stream));
  SmeReport rep = summarize(run);
  write_file_atomic(dir / "steps.csv", steps_csv(rep));
  if (rep.activations) {
    write_file_atomic(dir / "activations.csv", activation_matrix_csv(*rep.activations));
    write_file_atomic(dir / "activation_stats.csv", activation_stats_csv(*rep.activations));
  }
  const fs::path tmp = dir / "final.ckpt.tmp";
  save_checkpoint(tmp.string(), run.final_model);
  fs::rename(tmp, dir / "final.ckpt");
  return rep;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

Rate parse_rate(const std::string& s) {
  if (s == "NA") return std::nullopt;
  return std::stod(s);
}

}  // namespace

void RunConfig::validate() const {
  synth_kind();
  if (examples != 0 && examples < 50) throw ParameterError("need at least 50 examples");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ParameterError("test_fraction must be in [0, 1)");
  activation_from_string(activation);
  if (epochs == 0 || batch_size == 0) throw ParameterError("epochs and batch_size must be positive");
  if (!(train_lr > 0.0) || !(ft_lr > 0.0)) throw ParameterError("learning rates must be positive");
  if (folds == 0) throw ParameterError("folds must be at least 1");
  if (memory_sizes.empty()) throw ParameterError("at least one memory size is required");
  for (std::size_t m : memory_sizes)
    if (m == 0) throw ParameterError("memory sizes must be positive");
  memory_policy_from_string(memory_policy);
  if (workers == 0) throw ParameterError("workers must be positive");
  editor_config();
}

SynthKind RunConfig::synth_kind() const {
  if (task == "fact-check" || task == "fc") return SynthKind::kFactCheck;
  if (task == "kv-qa" || task == "qa") return SynthKind::kKvQa;
  throw ParameterError("unknown task: " + task);
}

std::size_t RunConfig::example_count() const {
  if (examples) return examples;
  return synth_kind() == SynthKind::kFactCheck ? 10000 : 12000;
}

SplitRatios RunConfig::ratios() const {
  return synth_kind() == SynthKind::kFactCheck ? SplitRatios::fact_check() : SplitRatios::kv_qa();
}

EditorConfig RunConfig::editor_config() const {
  EditorConfig c = smelab::editor_config(editor, ablation);
  c.patcher.set_thresholds(activation_from_string(activation));
  c.patcher.seed = seed;
  c.ft.lr = ft_lr;
  c.ft.seed = seed;
  return c;
}

json RunConfig::to_json() const {
  json j;
  j["task"] = task;
  j["seed"] = seed;
  j["examples"] = examples;
  j["test_fraction"] = test_fraction;
  j["d_tr_size"] = d_tr_size;
  j["activation"] = activation;
  j["epochs"] = epochs;
  j["train_lr"] = train_lr;
  j["batch_size"] = batch_size;
  j["editor"] = editor;
  j["ablation"] = ablation;
  j["ft_lr"] = ft_lr;
  j["patched_layer"] = patched_layer ? json(*patched_layer) : json(nullptr);
  j["folds"] = folds;
  j["memory_sizes"] = memory_sizes;
  j["memory_policy"] = memory_policy;
  j["random_inputs"] = random_inputs;
  j["workers"] = workers;
  j["traces"] = traces;
  return j;
}

void RunConfig::merge_json(const json& j) {
  if (!j.is_object()) throw ParameterError("run config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "task") task = v.get<std::string>();
      else if (key == "seed") seed = v.get<std::uint64_t>();
      else if (key == "examples") examples = v.get<std::size_t>();
      else if (key == "test_fraction") test_fraction = v.get<double>();
      else if (key == "d_tr_size") d_tr_size = v.get<std::size_t>();
      else if (key == "activation") activation = v.get<std::string>();
      else if (key == "epochs") epochs = v.get<std::size_t>();
      else if (key == "train_lr") train_lr = v.get<double>();
      else if (key == "batch_size") batch_size = v.get<std::size_t>();
      else if (key == "editor") editor = v.get<std::string>();
      else if (key == "ablation") ablation = v.get<std::string>();
      else if (key == "ft_lr") ft_lr = v.get<double>();
      else if (key == "patched_layer") {
        if (v.is_null()) patched_layer.reset();
        else patched_layer = v.get<std::size_t>();
      } else if (key == "folds") folds = v.get<std::size_t>();
      else if (key == "memory_sizes") {
        memory_sizes = v.is_array() ? v.get<std::vector<std::size_t>>() : std::vector<std::size_t>{v.get<std::size_t>()};
      } else if (key == "memory_policy") memory_policy = v.get<std::string>();
      else if (key == "random_inputs") random_inputs = v.get<std::size_t>();
      else if (key == "workers") workers = v.get<std::size_t>();
      else if (key == "traces") traces = v.get<bool>();
      else throw ParameterError("unknown config key: " + key);
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("bad config value: ") + e.what());
  }
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.merge_json(j);
  return c;
}

std::string RunConfig::data_hash() const {
  json j{{"task", synth_kind() == SynthKind::kFactCheck ? "fact-check" : "kv-qa"},
         {"seed", seed},
         {"examples", example_count()},
         {"test_fraction", test_fraction}};
  return fnv_hex(j.dump());
}

std::string RunConfig::model_hash() const {
  json j{{"data", data_hash()},     {"d_tr_size", d_tr_size}, {"activation", activation},
         {"epochs", epochs},        {"train_lr", train_lr},   {"batch_size", batch_size}};
  return fnv_hex(j.dump());
}

std::string RunConfig::hash() const { return fnv_hex(to_json().dump()); }

RunConfig load_run_config(const fs::path& path) { return RunConfig::from_json(read_json(path)); }

std::string fnv_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::string file_hash(const fs::path& path) { return fnv_hex(read_file(path)); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << content;
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

PreparedData prepare_data(const RunConfig& cfg, const fs::path& data_file) {
  PreparedData p;
  p.raw = read_jsonl(require(data_file).string());
  p.splits = split_dataset(p.raw, cfg.ratios(), cfg.d_tr_size, derive_seed(cfg.seed, kSplitSalt));
  return p;
}

json record_json(const StepRecord& r) {
  json j;
  j["t"] = r.t;
  j["id"] = r.example_id;
  j["edited"] = r.edited;
  j["labels"] = r.labels;
  j["pre"] = r.pre;
  if (r.edited) {
    j["post"] = r.post;
    j["equivalents"] = r.equivalents;
    j["success"] = r.editor_success;
    j["steps"] = r.steps;
    j["patches"] = r.patches_added;
    j["losses"] = loss_json(r.losses);
    j["wall_ms"] = r.wall_ms;
  }
  return j;
}

StepRecord record_from_json(const json& j) {
  StepRecord r;
  try {
    r.t = j.at("t").get<std::size_t>();
    r.example_id = j.at("id").get<std::string>();
    r.edited = j.at("edited").get<bool>();
    r.labels = j.at("labels").get<std::vector<int>>();
    r.pre = j.at("pre").get<std::vector<int>>();
    if (r.edited) {
      r.post = j.at("post").get<std::vector<int>>();
      r.equivalents = j.at("equivalents").get<std::vector<std::vector<int>>>();
      r.editor_success = j.at("success").get<bool>();
      r.steps = j.at("steps").get<std::size_t>();
      r.patches_added = j.at("patches").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad step record: ") + e.what());
  }
  return r;
}

json cmd_gen(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  Dataset data = cfg.synth_kind() == SynthKind::kFactCheck
                     ? gen_fact_check(cfg.example_count(), cfg.seed, cfg.test_fraction)
                     : gen_kv_qa(cfg.example_count(), cfg.seed, cfg.test_fraction);
  write_file_atomic(out / "data.jsonl", to_jsonl(data));
  std::size_t n_test = 0;
  for (const auto& e : data) n_test += e.split == "test";
  json m;
  m["stage"] = "gen";
  m["version"] = kToolVersion;
  m["config"] = cfg.to_json();
  m["data_hash"] = cfg.data_hash();
  m["dataset_hash"] = file_hash(out / "data.jsonl");
  m["examples"] = data.size();
  m["test_examples"] = n_test;
  write_file_atomic(out / "manifest.json", m.dump(2) + "\n");
  return m;
}

json cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out) {
  cfg.validate();
  const json gen = read_json(data_dir / "manifest.json");
  check_hash(gen, "data_hash", cfg.data_hash(), data_dir);
  const fs::path data_file = fs::absolute(data_dir / "data.jsonl");
  const std::string dataset_hash = file_hash(require(data_file));
  check_hash(gen, "dataset_hash", dataset_hash, data_dir);

  PreparedData p = prepare_data(cfg, data_file);
  SynthConfig sc = cfg.synth_kind() == SynthKind::kFactCheck ? SynthConfig::fact_check(cfg.seed)
                                                             : SynthConfig::kv_qa(cfg.seed);
  ModelConfig mc = SynthTask(sc).model_config();
  mc.activation = activation_from_string(cfg.activation);
  TransformerModel model(mc, derive_seed(cfg.seed, kInitSalt));
  if (cfg.patched_layer) model.set_patched_layer(*cfg.patched_layer);
  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.lr = cfg.train_lr;
  opt.batch_size = cfg.batch_size;
  opt.seed = derive_seed(cfg.seed, kTrainSalt);
  const auto start = std::chrono::steady_clock::now();
  TrainReport rep = train_initial(model, p.splits.train, opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fs::create_directories(out);
  const fs::path tmp = out / "f0.ckpt.tmp";
  save_checkpoint(tmp.string(), model);
  fs::rename(tmp, out / "f0.ckpt");

  json m;
  m["stage"] = "train";
  m["version"] = kToolVersion;
  m["config"] = cfg.to_json();
  m["data_hash"] = cfg.data_hash();
  m["model_hash"] = cfg.model_hash();
  m["dataset_hash"] = dataset_hash;
  m["data_file"] = data_file.string();
  m["seeds"] = {{"data", cfg.seed},
                {"init", derive_seed(cfg.seed, kInitSalt)},
                {"train", opt.seed},
                {"split", derive_seed(cfg.seed, kSplitSalt)}};
  m["splits"] = {{"train", p.splits.train.size()}, {"val", p.splits.val.size()}, {"edit", p.splits.edit.size()},
                 {"test", p.splits.test.size()},   {"d_tr", p.splits.d_tr.size()}, {"pool", p.splits.pool.size()}};
  m["epochs_run"] = rep.epochs_run;
  m["final_loss"] = rep.final_loss;
  m["reached_floor"] = rep.reached_floor;
  m["train_seconds"] = seconds;
  m["accuracy"] = {{"train", accuracy_json(model, p.splits.train)}, {"val", accuracy_json(model, p.splits.val)},
                   {"edit", accuracy_json(model, p.splits.edit)},   {"test", accuracy_json(model, p.splits.test)},
                   {"d_tr", accuracy_json(model, p.splits.d_tr)}};
  write_file_atomic(out / "manifest.json", m.dump(2) + "\n");
  return m;
}

json cmd_edit(const RunConfig& cfg, const fs::path& model_dir, const fs::path& out) {
  cfg.validate();
  const json trained = read_json(model_dir / "manifest.json");
  check_hash(trained, "model_hash", cfg.model_hash(), model_dir);
  const fs::path data_file = trained.at("data_file").get<std::string>();
  check_hash(trained, "dataset_hash", file_hash(require(data_file)), model_dir);
  TransformerModel f0 = load_checkpoint(require(model_dir / "f0.ckpt").string()).model;
  if (cfg.patched_layer) f0.set_patched_layer(*cfg.patched_layer);
  PreparedData p = prepare_data(cfg, data_file);
  const EditorConfig ec = cfg.editor_config();

  fs::create_directories(out);
  json m;
  m["stage"] = "edit";
  m["version"] = kToolVersion;
  m["config"] = cfg.to_json();
  m["config_hash"] = cfg.hash();
  m["model_hash"] = cfg.model_hash();
  m["dataset_hash"] = trained.at("dataset_hash");
  m["model_dir"] = fs::absolute(model_dir).string();
  m["data_file"] = data_file.string();
  m["editor"] = ec.name();
  m["patched_layer"] = f0.patched_layer();
  m["seeds"] = {{"folds", cfg.seed}, {"split", derive_seed(cfg.seed, kSplitSalt)}};
  m["memory_sizes"] = cfg.memory_sizes;

  const bool sweep = cfg.memory_sizes.size() > 1;
  std::vector<FoldSummary> sweep_rows;
  json timing = json::object();
  for (std::size_t cap : cfg.memory_sizes) {
    FoldOptions fo;
    fo.n_folds = cfg.folds;
    fo.seed = cfg.seed;
    fo.memory_capacity = cap;
    fo.memory_policy = memory_policy_from_string(cfg.memory_policy);
    fo.random_inputs = cfg.random_inputs;
    fo.workers = cfg.workers;
    fo.sme.traces = cfg.traces;
    const auto start = std::chrono::steady_clock::now();
    std::vector<SmeRun> runs = run_folds(f0, p.splits, ec, fo);
    const auto folds = make_folds(p.splits.edit, cfg.folds, cfg.seed);
    const fs::path base = sweep ? out / ("mem_" + std::to_string(cap)) : out;
    std::vector<SmeReport> reports;
    for (std::size_t f = 0; f < runs.size(); ++f)
      reports.push_back(write_fold(runs[f], folds[f], base / ("fold_" + std::to_string(f))));
    write_file_atomic(base / "summary.csv", summary_csv(reports));
    timing[std::to_string(cap)] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    sweep_rows.push_back(aggregate(reports));
  }
  if (sweep) {
    std::string csv = "memory_size,";
    const std::string agg = aggregate_csv(sweep_rows);
    std::stringstream lines(agg);
    std::string line;
    std::getline(lines, line);
    csv += line + "\n";
    for (std::size_t i = 0; std::getline(lines, line); ++i) csv += std::to_string(cfg.memory_sizes[i]) + "," + line + "\n";
    write_file_atomic(out / "memory_sweep.csv", csv);
  }
  m["seconds"] = timing;
  write_file_atomic(out / "manifest.json", m.dump(2) + "\n");
  return m;
}

std::string cmd_report(const std::vector<fs::path>& edit_dirs, const fs::path& out) {
  if (edit_dirs.empty()) throw ParameterError("report needs at least one edit directory");
  std::vector<FoldSummary> rows;
  std::string acts = "editor,memory_size,query,mean,std,folds\n";
  for (const auto& dir : edit_dirs) {
    const json m = read_json(dir / "manifest.json");
    const auto sizes = m.at("memory_sizes").get<std::vector<std::size_t>>();
    for (std::size_t cap : sizes) {
      const fs::path base = sizes.size() > 1 ? dir / ("mem_" + std::to_string(cap)) : dir;
      std::stringstream lines(read_file(require(base / "summary.csv")));
      std::string line;
      std::getline(lines, line);
      std::vector<SmeReport> reps;
      while (std::getline(lines, line)) {
        auto c = split_csv_line(line);
        if (c.size() < 12) throw FormatError("short summary row in " + (base / "summary.csv").string());
        SmeReport r;
        r.fold = std::stoul(c[0]);
        r.editor = sizes.size() > 1 ? c[1] + "@" + std::to_string(cap) : c[1];
        r.edits = std::stoul(c[2]);
        r.mistakes = std::stoul(c[3]);
        r.sr = parse_rate(c[4]);
        r.gr = parse_rate(c[5]);
        r.er = parse_rate(c[6]);
        r.train_r = parse_rate(c[7]);
        r.test_r = parse_rate(c[8]);
        r.patches = std::stoul(c[9]);
        reps.push_back(r);
      }
      rows.push_back(aggregate(reps));

      // Fold means of the per-fold activation means.
      std::map<std::string, std::vector<double>> by_kind;
      for (std::size_t f = 0; f < reps.size(); ++f) {
        const fs::path stats = base / ("fold_" + std::to_string(f)) / "activation_stats.csv";
        if (!fs::exists(stats)) continue;
        std::stringstream sl(read_file(stats));
        std::getline(sl, line);
        while (std::getline(sl, line)) {
          auto c = split_csv_line(line);
          if (c.size() >= 2) by_kind[c[0]].push_back(std::stod(c[1]));
        }
      }
      for (const char* kind : {"edit", "past_edit", "random"}) {
        auto it = by_kind.find(kind);
        if (it == by_kind.end()) continue;
        MeanStd ms = mean_std(it->second);
        char buf[160];
        std::snprintf(buf, sizeof buf, ",%zu,%s,%.6f,%.6f,%zu\n", cap, kind, ms.mean, ms.std, ms.n);
        acts += rows.back().editor + buf;
      }
    }
  }
  const std::string report = aggregate_csv(rows);
  fs::create_directories(out);
  write_file_atomic(out / "report.csv", report);
  write_file_atomic(out / "activation_report.csv", acts);
  return report;
}

ReplayResult cmd_replay(const fs::path& edit_dir, std::size_t fold) {
  const json m = read_json(edit_dir / "manifest.json");
  const auto sizes = m.at("memory_sizes").get<std::vector<std::size_t>>();
  const fs::path base = sizes.size() > 1 ? edit_dir / ("mem_" + std::to_string(sizes.front())) : edit_dir;
  const fs::path dir = base / ("fold_" + std::to_string(fold));
  std::vector<StepRecord> records;
  std::stringstream lines(read_file(require(dir / "records.jsonl")));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(std::string("records.jsonl: ") + e.what());
    }
  }
  const Dataset stream = read_jsonl(require(dir / "stream.jsonl").string());
  const bool patches = smelab::editor_config(m.at("config").at("editor").get<std::string>(),
                                             m.at("config").at("ablation").get<std::string>())
                           .uses_patches();
  if (!patches) return replay(records, stream);
  TransformerModel final_model = load_checkpoint(require(dir / "final.ckpt").string()).model;
  return replay(records, stream, &final_model);
}

}  // namespace smelab
