#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "smelab/example.hpp"
#include "smelab/model.hpp"

namespace smelab {

// Reserved token ids shared by both tasks.
struct SpecialTokens {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kMark = 2;
  static constexpr int kEos = 3;
  static constexpr int kQuery = 4;
  static constexpr int kFirstFree = 5;
};

enum class SynthKind { kFactCheck, kKvQa };

struct SynthConfig {
  SynthKind kind = SynthKind::kFactCheck;
  std::uint64_t seed = 0;
  // Subjects are token pairs (a, b).
  std::size_t subjects_a = 32;
  std::size_t subjects_b = 32;
  std::size_t relations = 12;
  std::size_t objects = 91;
  // Relations whose facts may deviate from the relation's rule.
  double noised_relation_fraction = 0.75;
  // Probability that a fact of a noised relation is an exception.
  double exception_rate = 0.5;
  // Fact checking: share of false statements about an exception that name
  // the rule object.
  double hard_negative_rate = 0.5;
  // Question answering: answers have 2..4 tokens.
  std::size_t min_answer = 2;
  std::size_t max_answer = 4;

  static SynthConfig fact_check(std::uint64_t seed);
  static SynthConfig kv_qa(std::uint64_t seed);
  void validate() const;
};

// Knowledge base plus token layout. Relations have two synonym tokens.
//   fact check: "a b r o" (or "o MARK r a b"), label 1 iff o is the fact's
//               object
//   kv qa:      question "a b r ?" in one of three templates, answer of
//               answer_length(r) object tokens
class SynthTask {
 public:
  explicit SynthTask(SynthConfig config);

  const SynthConfig& config() const { return config_; }
  std::size_t vocab_size() const { return first_object_ + config_.objects; }
  ModelConfig model_config() const;

  int subject_a_token(std::size_t g) const { return static_cast<int>(first_a_ + g); }
  int subject_b_token(std::size_t h) const { return static_cast<int>(first_b_ + h); }
  int relation_token(std::size_t r, std::size_t synonym) const {
    return static_cast<int>(first_relation_ + 2 * r + synonym);
  }
  int object_token(std::size_t o) const { return static_cast<int>(first_object_ + o); }

  bool relation_noised(std::size_t r) const { return noised_[r]; }
  bool is_exception(std::size_t g, std::size_t h, std::size_t r) const;
  std::size_t answer_length(std::size_t r) const;
  // Object id(s) the knowledge base stores for the fact.
  std::size_t fc_object(std::size_t g, std::size_t h, std::size_t r) const;
  std::size_t fc_rule_object(std::size_t g, std::size_t r) const;
  std::vector<std::size_t> qa_answer(std::size_t g, std::size_t h, std::size_t r) const;
  std::vector<std::size_t> qa_rule_answer(std::size_t g, std::size_t h, std::size_t r) const;

  // Surface forms. Fact check has 4 (2 synonyms x 2 orders), question
  // answering 6 (2 synonyms x 3 templates).
  std::size_t form_count() const;
  std::vector<int> fc_tokens(std::size_t g, std::size_t h, std::size_t r, std::size_t o, std::size_t form) const;
  std::vector<int> qa_tokens(std::size_t g, std::size_t h, std::size_t r, std::size_t form) const;

  // Draws n examples about distinct facts. The last round(n*test_fraction)
  // are tagged "test", the rest "train".
  Dataset generate(std::size_t n, double test_fraction = 0.0) const;

 private:
  std::uint64_t fact_hash(std::size_t g, std::size_t h, std::size_t r, std::uint64_t salt) const;

  SynthConfig config_;
  std::size_t first_a_, first_b_, first_relation_, first_object_;
  std::vector<bool> noised_;
  std::vector<std::vector<std::size_t>> fc_rule_;              // [r][g]
  std::vector<std::vector<std::vector<std::size_t>>> qa_rule_;  // [j][r][g or h]
};

// Defaults: fact check and question answering over fresh knowledge bases.
Dataset gen_fact_check(std::size_t n, std::uint64_t seed, double test_fraction = 0.0);
Dataset gen_kv_qa(std::size_t n, std::uint64_t seed, double test_fraction = 0.0);

// One JSON object per line with fields in the order
// id, tokens, target, equivalents, split.
std::string to_jsonl(const Dataset& data);
Dataset from_jsonl(const std::string& text);
void write_jsonl(const std::string& path, const Dataset& data);
Dataset read_jsonl(const std::string& path);

}  // namespace smelab
