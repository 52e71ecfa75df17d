#include "smelab/memory_bank.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <sstream>

#include "smelab/binary_io.hpp"
#include "smelab/task_io.hpp"

namespace smelab {

std::string to_string(MemoryPolicy p) { return p == MemoryPolicy::kFixed ? "fixed" : "reservoir"; }

MemoryPolicy memory_policy_from_string(const std::string& name) {
  if (name == "fixed") return MemoryPolicy::kFixed;
  if (name == "reservoir" || name == "updated") return MemoryPolicy::kReservoir;
  throw ParameterError("unknown memory policy '" + name + "'");
}

Tensor harvest_queries(const TransformerModel& model, std::span<const LabeledInput> items,
                       std::vector<std::size_t>* owner) {
  const auto& cfg = model.config();
  std::vector<double> data;
  std::size_t rows_total = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < items.size(); start += kChunk) {
    auto part = items.subspan(start, std::min(kChunk, items.size() - start));
    PackedItems packed = pack_items(cfg, part);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < part.size(); ++b) {
      const std::size_t n = cfg.task == TaskKind::kClassification ? 1 : packed.batch.lengths[b];
      for (std::size_t t = 0; t < n; ++t) {
        rows.push_back(packed.batch.row(b, t));
        if (owner) owner->push_back(start + b);
      }
    }
    PatchedLayerState st = model.capture_state(packed.batch, rows);
    data.insert(data.end(), st.query.values().begin(), st.query.values().end());
    rows_total += rows.size();
  }
  return Tensor({rows_total, cfg.d_model}, std::move(data));
}

MemoryBank build_memory(const TransformerModel& model, std::span<const LabeledInput> pool,
                        std::span<const std::string> pool_ids, std::size_t capacity, std::uint64_t seed,
                        MemoryPolicy policy) {
  if (capacity == 0) throw ParameterError("memory capacity must be positive");
  if (!pool_ids.empty() && pool_ids.size() != pool.size()) throw ShapeError("one id per pool example");
  MemoryBank bank;
  bank.capacity = capacity;
  bank.policy = policy;
  bank.seed = seed;
  bank.rng.seed(derive_seed(seed, 0x6d656d));

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(std::span<std::size_t>(order), bank.rng);

  // Harvest examples in shuffled order until there are enough rows.
  std::vector<double> data;
  std::vector<std::string> ids;
  const std::size_t d = model.config().d_model;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < order.size() && ids.size() < capacity; start += kChunk) {
    std::vector<LabeledInput> part;
    std::vector<std::size_t> src;
    for (std::size_t i = start; i < std::min(order.size(), start + kChunk); ++i) {
      part.push_back(pool[order[i]]);
      src.push_back(order[i]);
    }
    std::vector<std::size_t> owner;
    Tensor q = harvest_queries(model, part, &owner);
    data.insert(data.end(), q.values().begin(), q.values().end());
    for (std::size_t o : owner) ids.push_back(pool_ids.empty() ? std::to_string(src[o]) : pool_ids[src[o]]);
  }
  std::size_t n = ids.size();
  std::vector<std::size_t> keep(n);
  std::iota(keep.begin(), keep.end(), 0);
  if (n > capacity) {
    // Partial Fisher-Yates: a uniform subset of `capacity` rows.
    for (std::size_t i = 0; i < capacity; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_index(bank.rng, n - i));
      std::swap(keep[i], keep[j]);
    }
    keep.resize(capacity);
    std::sort(keep.begin(), keep.end());
  } else if (n < capacity) {
    bank.underfilled = true;
    std::cerr << "warning: memory pool yields " << n << " queries, fewer than capacity " << capacity
              << "; using all of them\n";
  }
  bank.rows = Tensor::matrix(keep.size(), d);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy(data.begin() + static_cast<long>(keep[i] * d), data.begin() + static_cast<long>((keep[i] + 1) * d),
              bank.rows.row(i).begin());
    bank.source_ids.push_back(ids[keep[i]]);
  }
  bank.seen = keep.size();
  return bank;
}

void update_memory(MemoryBank& bank, const Tensor& new_queries, std::span<const std::string> ids) {
  if (bank.policy == MemoryPolicy::kFixed || new_queries.numel() == 0) return;
  if (new_queries.rank() != 2 || new_queries.cols() != bank.width()) {
    throw ShapeError("update_memory: query width does not match the memory");
  }
  if (!ids.empty() && ids.size() != new_queries.rows()) throw ShapeError("one id per new query");
  const std::size_t d = bank.width();
  for (std::size_t r = 0; r < new_queries.rows(); ++r) {
    ++bank.seen;
    const std::string id = ids.empty() ? std::string() : ids[r];
    auto src = new_queries.row(r);
    if (bank.size() < bank.capacity) {
      std::vector<double> grown(bank.rows.values().begin(), bank.rows.values().end());
      grown.insert(grown.end(), src.begin(), src.end());
      bank.rows = Tensor({bank.size() + 1, d}, std::move(grown));
      bank.source_ids.push_back(id);
      continue;
    }
    const auto j = static_cast<std::size_t>(uniform_index(bank.rng, bank.seen));
    if (j < bank.capacity) {
      std::copy(src.begin(), src.end(), bank.rows.row(j).begin());
      bank.source_ids[j] = id;
    }
  }
}

CheckpointSection memory_section(const MemoryBank& bank) {
  ByteWriter w;
  w.put<std::uint64_t>(bank.capacity);
  w.put<std::uint8_t>(bank.policy == MemoryPolicy::kFixed ? 0 : 1);
  w.put<std::uint64_t>(bank.seed);
  w.put<std::uint64_t>(bank.seen);
  w.put<std::uint8_t>(bank.underfilled ? 1 : 0);
  w.put<std::uint64_t>(bank.size());
  w.put<std::uint64_t>(bank.width());
  w.put_doubles(bank.rows.values());
  for (const auto& id : bank.source_ids) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(id.size()));
    w.put_bytes(id);
  }
  std::ostringstream rng_state;
  rng_state << bank.rng;
  const std::string s = rng_state.str();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  w.put_bytes(s);
  return {"MEMB", w.bytes()};
}

MemoryBank memory_from_section(const CheckpointSection& section) {
  if (section.tag != "MEMB") throw FormatError("not a memory section");
  ByteReader r(section.payload);
  MemoryBank bank;
  bank.capacity = static_cast<std::size_t>(r.get<std::uint64_t>());
  bank.policy = r.get<std::uint8_t>() == 0 ? MemoryPolicy::kFixed : MemoryPolicy::kReservoir;
  bank.seed = r.get<std::uint64_t>();
  bank.seen = r.get<std::uint64_t>();
  bank.underfilled = r.get<std::uint8_t>() != 0;
  const auto n = static_cast<std::size_t>(r.get<std::uint64_t>());
  const auto d = static_cast<std::size_t>(r.get<std::uint64_t>());
  if (n > bank.capacity || n * d * sizeof(double) > r.remaining()) throw FormatError("corrupt memory section");
  bank.rows = Tensor({n, d});
  r.get_doubles(bank.rows.values());
  for (std::size_t i = 0; i < n; ++i) bank.source_ids.push_back(r.get_bytes(r.get<std::uint32_t>()));
  std::istringstream rng_state(r.get_bytes(r.get<std::uint32_t>()));
  rng_state >> bank.rng;
  if (!rng_state) throw FormatError("corrupt generator state in memory section");
  if (!r.done()) throw FormatError("trailing bytes in memory section");
  return bank;
}

}  // namespace smelab
