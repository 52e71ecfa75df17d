#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smelab/checkpoint.hpp"
#include "smelab/example.hpp"
#include "smelab/model.hpp"

namespace smelab {

enum class MemoryPolicy { kFixed, kReservoir };

std::string to_string(MemoryPolicy p);
MemoryPolicy memory_policy_from_string(const std::string& name);

// Retained patched-layer queries of irrelevant examples, M [d_m x d].
struct MemoryBank {
  Tensor rows;
  std::size_t capacity = 0;
  std::vector<std::string> source_ids;  // one per row
  MemoryPolicy policy = MemoryPolicy::kReservoir;
  std::uint64_t seed = 0;
  // Stream items offered so far; the reservoir keeps a uniform sample of them.
  std::uint64_t seen = 0;
  Rng rng;
  // Set when the pool held fewer queries than the capacity.
  bool underfilled = false;

  std::size_t size() const { return rows.rank() == 2 ? rows.rows() : 0; }
  std::size_t width() const { return rows.rank() == 2 ? rows.cols() : 0; }
};

// Queries an example contributes: the pooled position for classification,
// every non-pad position of the teacher-forced input for generation.
Tensor harvest_queries(const TransformerModel& model, std::span<const LabeledInput> items,
                       std::vector<std::size_t>* owner = nullptr);

// Samples pool examples in a seeded order, harvests their queries and keeps
// a uniform subsample of `capacity` rows. A pool that is too small is used
// whole and flagged. The reservoir stream starts after the retained rows, so
// later items compete with the memory set itself.
MemoryBank build_memory(const TransformerModel& model, std::span<const LabeledInput> pool,
                        std::span<const std::string> pool_ids, std::size_t capacity, std::uint64_t seed,
                        MemoryPolicy policy = MemoryPolicy::kReservoir);

// Offers new query rows. Fixed: no-op. Reservoir: row j of the stream
// replaces a uniformly chosen slot with probability capacity/seen.
void update_memory(MemoryBank& bank, const Tensor& new_queries, std::span<const std::string> ids);

CheckpointSection memory_section(const MemoryBank& bank);
MemoryBank memory_from_section(const CheckpointSection& section);

}  // namespace smelab
