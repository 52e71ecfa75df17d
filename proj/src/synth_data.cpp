#include "smelab/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "smelab/binary_io.hpp"
#include "smelab/errors.hpp"

namespace smelab {

SynthConfig SynthConfig::fact_check(std::uint64_t seed) {
  SynthConfig c;
  c.kind = SynthKind::kFactCheck;
  c.seed = seed;
  c.subjects_a = 16;
  c.subjects_b = 64;
  c.exception_rate = 0.4;
  return c;
}

SynthConfig SynthConfig::kv_qa(std::uint64_t seed) {
  SynthConfig c;
  c.kind = SynthKind::kKvQa;
  c.seed = seed;
  c.exception_rate = 0.6;
  return c;
}

void SynthConfig::validate() const {
  if (subjects_a == 0 || subjects_b == 0 || relations == 0 || objects < 2) {
    throw ParameterError("synthetic task needs subjects, relations and at least two objects");
  }
  auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!unit(noised_relation_fraction) || !unit(exception_rate) || !unit(hard_negative_rate)) {
    throw ParameterError("rates must lie in [0, 1]");
  }
  if (min_answer < 1 || max_answer < min_answer) throw ParameterError("bad answer length range");
}

SynthTask::SynthTask(SynthConfig config) : config_(config) {
  config_.validate();
  first_a_ = SpecialTokens::kFirstFree;
  first_b_ = first_a_ + config_.subjects_a;
  first_relation_ = first_b_ + config_.subjects_b;
  first_object_ = first_relation_ + 2 * config_.relations;

  Rng rng(derive_seed(config_.seed, 0x6b62));
  std::vector<std::size_t> rel(config_.relations);
  std::iota(rel.begin(), rel.end(), 0);
  shuffle(std::span<std::size_t>(rel), rng);
  const auto n_noised =
      static_cast<std::size_t>(std::lround(config_.noised_relation_fraction * static_cast<double>(config_.relations)));
  noised_.assign(config_.relations, false);
  for (std::size_t i = 0; i < n_noised; ++i) noised_[rel[i]] = true;

  fc_rule_.assign(config_.relations, std::vector<std::size_t>(config_.subjects_a));
  for (auto& row : fc_rule_)
    for (auto& o : row) o = static_cast<std::size_t>(uniform_index(rng, config_.objects));
  qa_rule_.assign(config_.max_answer, {});
  for (std::size_t j = 0; j < config_.max_answer; ++j) {
    const std::size_t width = j % 2 == 0 ? config_.subjects_a : config_.subjects_b;
    qa_rule_[j].assign(config_.relations, std::vector<std::size_t>(width));
    for (auto& row : qa_rule_[j])
      for (auto& o : row) o = static_cast<std::size_t>(uniform_index(rng, config_.objects));
  }
}

ModelConfig SynthTask::model_config() const {
  ModelConfig c;
  c.vocab_size = std::max<std::size_t>(vocab_size(), 200);
  c.task = config_.kind == SynthKind::kFactCheck ? TaskKind::kClassification : TaskKind::kGeneration;
  c.n_classes = 2;
  c.max_seq_len = 16;
  c.pad_token = SpecialTokens::kPad;
  c.eos_token = SpecialTokens::kEos;
  return c;
}

std::uint64_t SynthTask::fact_hash(std::size_t g, std::size_t h, std::size_t r, std::uint64_t salt) const {
  std::uint64_t key = (static_cast<std::uint64_t>(g) << 40) ^ (static_cast<std::uint64_t>(h) << 20) ^ r;
  return derive_seed(derive_seed(config_.seed, salt), key);
}

namespace {
double unit_from_hash(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }
}  // namespace

bool SynthTask::is_exception(std::size_t g, std::size_t h, std::size_t r) const {
  return noised_[r] && unit_from_hash(fact_hash(g, h, r, 1)) < config_.exception_rate;
}

std::size_t SynthTask::answer_length(std::size_t r) const {
  return config_.min_answer + r % (config_.max_answer - config_.min_answer + 1);
}

std::size_t SynthTask::fc_rule_object(std::size_t g, std::size_t r) const { return fc_rule_[r][g]; }

std::size_t SynthTask::fc_object(std::size_t g, std::size_t h, std::size_t r) const {
  const std::size_t rule = fc_rule_object(g, r);
  if (!is_exception(g, h, r)) return rule;
  // Any object but the rule one.
  const auto shift = 1 + fact_hash(g, h, r, 2) % (config_.objects - 1);
  return (rule + shift) % config_.objects;
}

std::vector<std::size_t> SynthTask::qa_rule_answer(std::size_t g, std::size_t h, std::size_t r) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < answer_length(r); ++j) out.push_back(qa_rule_[j][r][j % 2 == 0 ? g : h]);
  return out;
}

std::vector<std::size_t> SynthTask::qa_answer(std::size_t g, std::size_t h, std::size_t r) const {
  std::vector<std::size_t> out = qa_rule_answer(g, h, r);
  if (!is_exception(g, h, r)) return out;
  // Replace a random non-empty subset of positions, each with a different
  // object.
  const std::size_t len = out.size();
  Rng rng(fact_hash(g, h, r, 3));
  const std::size_t count = 1 + static_cast<std::size_t>(uniform_index(rng, len));
  std::vector<std::size_t> pos(len);
  std::iota(pos.begin(), pos.end(), 0);
  shuffle(std::span<std::size_t>(pos), rng);
  for (std::size_t i = 0; i < count; ++i) {
    const auto shift = 1 + uniform_index(rng, config_.objects - 1);
    out[pos[i]] = (out[pos[i]] + shift) % config_.objects;
  }
  return out;
}

std::size_t SynthTask::form_count() const { return config_.kind == SynthKind::kFactCheck ? 4 : 6; }

std::vector<int> SynthTask::fc_tokens(std::size_t g, std::size_t h, std::size_t r, std::size_t o,
                                      std::size_t form) const {
  const int a = subject_a_token(g), b = subject_b_token(h), rel = relation_token(r, form % 2), obj = object_token(o);
  if (form / 2 == 0) return {SpecialTokens::kBos, a, b, rel, obj};
  return {SpecialTokens::kBos, obj, SpecialTokens::kMark, rel, a, b};
}

std::vector<int> SynthTask::qa_tokens(std::size_t g, std::size_t h, std::size_t r, std::size_t form) const {
  const int a = subject_a_token(g), b = subject_b_token(h), rel = relation_token(r, form % 2);
  switch (form / 2) {
    case 0: return {SpecialTokens::kBos, a, b, rel, SpecialTokens::kQuery};
    case 1: return {SpecialTokens::kBos, SpecialTokens::kQuery, rel, a, b};
    default: return {SpecialTokens::kBos, rel, SpecialTokens::kMark, a, b, SpecialTokens::kQuery};
  }
}

Dataset SynthTask::generate(std::size_t n, double test_fraction) const {
  if (n == 0) throw ParameterError("generate: n must be positive");
  const std::size_t facts = config_.subjects_a * config_.subjects_b * config_.relations;
  if (n > facts) throw ParameterError("generate: more examples than distinct facts");
  Rng rng(derive_seed(config_.seed, 0x67656e));
  // Partial Fisher-Yates over fact ids.
  std::vector<std::size_t> ids(facts);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < n; ++i) std::swap(ids[i], ids[i + uniform_index(rng, facts - i)]);

  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
  const bool fc = config_.kind == SynthKind::kFactCheck;
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t f = ids[i];
    const std::size_t r = f % config_.relations;
    const std::size_t h = (f / config_.relations) % config_.subjects_b;
    const std::size_t g = f / (config_.relations * config_.subjects_b);
    const std::size_t form = static_cast<std::size_t>(uniform_index(rng, form_count()));
    EditExample e;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", fc ? "fc" : "qa", i);
    e.id = id;
    e.split = i + n_test >= n ? "test" : "train";
    if (fc) {
      const std::size_t truth = fc_object(g, h, r);
      const bool label = uniform01(rng) < 0.5;
      std::size_t o = truth;
      if (!label) {
        const std::size_t rule = fc_rule_object(g, r);
        if (truth != rule && uniform01(rng) < config_.hard_negative_rate) {
          o = rule;
        } else {
          o = (truth + 1 + uniform_index(rng, config_.objects - 1)) % config_.objects;
        }
      }
      e.tokens = fc_tokens(g, h, r, o, form);
      e.target = {label ? 1 : 0};
      for (std::size_t k = 0; k < form_count(); ++k)
        if (k != form) e.equivalents.push_back(fc_tokens(g, h, r, o, k));
    } else {
      e.tokens = qa_tokens(g, h, r, form);
      for (std::size_t o : qa_answer(g, h, r)) e.target.push_back(object_token(o));
      for (std::size_t k = 0; k < form_count(); ++k)
        if (k != form) e.equivalents.push_back(qa_tokens(g, h, r, k));
    }
    out.push_back(std::move(e));
  }
  return out;
}

Dataset gen_fact_check(std::size_t n, std::uint64_t seed, double test_fraction) {
  return SynthTask(SynthConfig::fact_check(seed)).generate(n, test_fraction);
}

Dataset gen_kv_qa(std::size_t n, std::uint64_t seed, double test_fraction) {
  return SynthTask(SynthConfig::kv_qa(seed)).generate(n, test_fraction);
}

std::string to_jsonl(const Dataset& data) {
  std::string out;
  for (const auto& e : data) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["tokens"] = e.tokens;
    j["target"] = e.target;
    j["equivalents"] = e.equivalents;
    j["split"] = e.split;
    out += j.dump();
    out += '\n';
  }
  return out;
}

Dataset from_jsonl(const std::string& text) {
  Dataset out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      EditExample e;
      e.id = j.at("id").get<std::string>();
      e.tokens = j.at("tokens").get<std::vector<int>>();
      e.target = j.at("target").get<std::vector<int>>();
      e.equivalents = j.at("equivalents").get<std::vector<std::vector<int>>>();
      e.split = j.at("split").get<std::string>();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

void write_jsonl(const std::string& path, const Dataset& data) { write_text_atomic(path, to_jsonl(data)); }

Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_jsonl(ss.str());
}

}  // namespace smelab
