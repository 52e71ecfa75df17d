#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "smelab/errors.hpp"
#include "smelab/memory_bank.hpp"
#include "smelab/task_io.hpp"

using namespace smelab;

namespace {

std::vector<LabeledInput> items_of(const Dataset& d) {
  std::vector<LabeledInput> out;
  for (const auto& e : d) out.push_back(labeled(e));
  return out;
}

std::vector<std::string> ids_of(const Dataset& d) {
  std::vector<std::string> out;
  for (const auto& e : d) out.push_back(e.id);
  return out;
}

// Bank holding `rows` one-column rows numbered 0..rows-1, as if those were
// the first stream items.
MemoryBank numbered_bank(std::size_t rows, std::uint64_t seed) {
  MemoryBank b;
  b.capacity = rows;
  b.rows = Tensor::matrix(rows, 1);
  for (std::size_t i = 0; i < rows; ++i) {
    b.rows[i] = static_cast<double>(i);
    b.source_ids.push_back(std::to_string(i));
  }
  b.seen = rows;
  b.rng.seed(seed);
  return b;
}

}  // namespace

TEST_CASE("harvested rows are the patched-layer queries") {
  TransformerModel m = testing::trained_classifier();
  auto pool = testing::separable_task(20, 5);
  auto items = items_of(pool);
  std::vector<std::size_t> owner;
  Tensor q = harvest_queries(m, items, &owner);
  CHECK(q.rows() == 20);
  Tape tape(GradMode::kDisabled);
  for (std::size_t i = 0; i < items.size(); ++i) {
    CHECK(owner[i] == i);
    Batch b = Batch::pack(std::vector<std::vector<int>>{items[i].prompt}, 0);
    auto out = m.forward(tape, b);
    for (std::size_t j = 0; j < q.cols(); ++j) CHECK(q.at(i, j) == out.ffn_queries.value().at(0, j));
  }

  TransformerModel g = testing::trained_copier();
  auto copies = items_of(testing::copy_task(4, 9));
  std::vector<std::size_t> gowner;
  Tensor gq = harvest_queries(g, copies, &gowner);
  // prompt (5) + answer (3) positions each
  CHECK(gq.rows() == 4 * 8);
  CHECK(gowner.front() == 0);
  CHECK(gowner.back() == 3);
}

TEST_CASE("build_memory subsamples to capacity deterministically") {
  TransformerModel m = testing::trained_classifier();
  auto pool = testing::separable_task(300, 7);
  auto items = items_of(pool);
  auto ids = ids_of(pool);
  MemoryBank a = build_memory(m, items, ids, 100, 4, MemoryPolicy::kFixed);
  MemoryBank b = build_memory(m, items, ids, 100, 4, MemoryPolicy::kFixed);
  MemoryBank c = build_memory(m, items, ids, 100, 5, MemoryPolicy::kFixed);
  CHECK(a.size() == 100);
  CHECK(a.width() == m.config().d_model);
  CHECK(a.rows.same_values(b.rows));
  CHECK(a.source_ids == b.source_ids);
  CHECK_FALSE(a.rows.same_values(c.rows));
  CHECK_FALSE(a.underfilled);

  // Every row is an exact query of the example it names.
  Tensor all = harvest_queries(m, items);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t src = std::stoul(a.source_ids[i].substr(1));
    for (std::size_t j = 0; j < a.width(); ++j) CHECK(a.rows.at(i, j) == all.at(src, j));
  }
  CHECK_THROWS_AS(build_memory(m, items, ids, 0, 4), ParameterError);
}

TEST_CASE("small pools are used whole") {
  TransformerModel m = testing::trained_classifier();
  auto pool = testing::separable_task(30, 7);
  MemoryBank bank = build_memory(m, items_of(pool), ids_of(pool), 100, 1);
  CHECK(bank.size() == 30);
  CHECK(bank.underfilled);
  CHECK(bank.size() <= bank.capacity);

  TransformerModel g = testing::trained_copier();
  auto copies = testing::copy_task(10, 3);
  MemoryBank gb = build_memory(g, items_of(copies), ids_of(copies), 25, 1);
  CHECK(gb.size() == 25);
}

TEST_CASE("fixed memory ignores updates") {
  MemoryBank bank = numbered_bank(5, 1);
  bank.policy = MemoryPolicy::kFixed;
  const Tensor before = bank.rows;
  update_memory(bank, Tensor::matrix(3, 1, 9.0), {});
  CHECK(bank.rows.same_values(before));
  CHECK(bank.seen == 5);
}

TEST_CASE("empty update leaves the reservoir alone") {
  MemoryBank bank = numbered_bank(5, 1);
  const Tensor before = bank.rows;
  update_memory(bank, Tensor(), {});
  CHECK(bank.rows.same_values(before));
  CHECK(bank.seen == 5);
  CHECK_THROWS_AS(update_memory(bank, Tensor::matrix(1, 2), {}), ShapeError);
}

TEST_CASE("reservoir grows to capacity then replaces") {
  MemoryBank bank = numbered_bank(2, 3);
  bank.capacity = 4;
  update_memory(bank, Tensor::from_rows({{10}, {11}}), std::vector<std::string>{"a", "b"});
  CHECK(bank.size() == 4);
  CHECK(bank.rows[3] == 11.0);
  CHECK(bank.source_ids[2] == "a");
  update_memory(bank, Tensor::matrix(50, 1, 7.0), {});
  CHECK(bank.size() == 4);
  CHECK(bank.seen == 54);
}

TEST_CASE("reservoir keeps a uniform sample of the stream") {
  constexpr std::size_t kCap = 5, kStream = 20, kTrials = 10000;
  std::vector<std::size_t> kept(kStream, 0);
  Tensor tail = Tensor::matrix(kStream - kCap, 1);
  for (std::size_t i = 0; i < tail.rows(); ++i) tail[i] = static_cast<double>(kCap + i);
  for (std::size_t t = 0; t < kTrials; ++t) {
    MemoryBank bank = numbered_bank(kCap, derive_seed(99, t));
    update_memory(bank, tail, {});
    for (double v : bank.rows.values()) ++kept[static_cast<std::size_t>(v)];
  }
  const double p = static_cast<double>(kCap) / kStream;
  const double mean = p * kTrials, sigma = std::sqrt(kTrials * p * (1 - p));
  for (std::size_t i = 0; i < kStream; ++i) {
    INFO("stream item " << i << " kept " << kept[i]);
    CHECK(std::abs(static_cast<double>(kept[i]) - mean) <= 3 * sigma);
  }
}

TEST_CASE("memory section round trip") {
  TransformerModel m = testing::trained_classifier();
  auto pool = testing::separable_task(80, 7);
  MemoryBank bank = build_memory(m, items_of(pool), ids_of(pool), 40, 2);
  update_memory(bank, Tensor::matrix(3, m.config().d_model, 0.5), std::vector<std::string>{"x", "y", "z"});
  MemoryBank back = memory_from_section(memory_section(bank));
  CHECK(back.rows.same_values(bank.rows));
  CHECK(back.source_ids == bank.source_ids);
  CHECK(back.capacity == bank.capacity);
  CHECK(back.seen == bank.seen);
  CHECK(back.policy == bank.policy);
  CHECK((back.rng == bank.rng));

  // Same future: both continue the stream identically.
  Tensor more = Tensor::matrix(30, m.config().d_model, 1.5);
  update_memory(bank, more, {});
  update_memory(back, more, {});
  CHECK(back.rows.same_values(bank.rows));

  auto sec = memory_section(bank);
  sec.payload.resize(sec.payload.size() - 3);
  CHECK_THROWS_AS(memory_from_section(sec), FormatError);
  CHECK(memory_policy_from_string("updated") == MemoryPolicy::kReservoir);
  CHECK_THROWS_AS(memory_policy_from_string("lru"), ParameterError);
}
