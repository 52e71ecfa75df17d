#include "smelab/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "smelab/binary_io.hpp"

namespace smelab {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::string& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                        text.size()));
}

namespace {

constexpr char kMagic[4] = {'S', 'M', 'E', 'L'};

std::vector<std::pair<std::string, std::int64_t>> config_fields(const TransformerModel& model) {
  const auto& c = model.config();
  return {
      {"vocab_size", static_cast<std::int64_t>(c.vocab_size)},
      {"d_model", static_cast<std::int64_t>(c.d_model)},
      {"n_heads", static_cast<std::int64_t>(c.n_heads)},
      {"n_layers", static_cast<std::int64_t>(c.n_layers)},
      {"d_ffn", static_cast<std::int64_t>(c.d_ffn)},
      {"activation", c.activation == Activation::kReLU ? 0 : 1},
      {"task", c.task == TaskKind::kClassification ? 0 : 1},
      {"n_classes", static_cast<std::int64_t>(c.n_classes)},
      {"max_seq_len", static_cast<std::int64_t>(c.max_seq_len)},
      {"pad_token", c.pad_token},
      {"eos_token", c.eos_token},
      {"patched_layer", static_cast<std::int64_t>(model.patched_layer())},
  };
}

void put_section(ByteWriter& w, const std::string& tag, const std::vector<std::uint8_t>& payload) {
  if (tag.size() != 4) throw FormatError("section tags are four bytes");
  w.put_bytes(tag);
  w.put<std::uint64_t>(payload.size());
  w.bytes().insert(w.bytes().end(), payload.begin(), payload.end());
}

}  // namespace

std::vector<std::uint8_t> encode_patches(const PatchSet& patches) {
  patches.validate();
  ByteWriter w;
  w.put<std::uint64_t>(patches.size());
  w.put<std::uint64_t>(patches.d_model());
  w.put_doubles(patches.keys.values());
  w.put_doubles(patches.bias.values());
  w.put_doubles(patches.raw_values.values());
  w.put_doubles(patches.value_scale.values());
  for (std::int64_t id : patches.owner_edit_ids) w.put<std::int64_t>(id);
  return w.bytes();
}

PatchSet decode_patches(const std::vector<std::uint8_t>& payload) {
  ByteReader r(payload);
  const auto n = static_cast<std::size_t>(r.get<std::uint64_t>());
  const auto d = static_cast<std::size_t>(r.get<std::uint64_t>());
  if (n > (1u << 24) || d > (1u << 16)) throw FormatError("implausible patch set size");
  PatchSet p;
  p.keys = Tensor({d, n});
  p.bias = Tensor(Shape{n});
  p.raw_values = Tensor({n, d});
  p.value_scale = Tensor({n, d});
  r.get_doubles(p.keys.values());
  r.get_doubles(p.bias.values());
  r.get_doubles(p.raw_values.values());
  r.get_doubles(p.value_scale.values());
  for (std::size_t i = 0; i < n; ++i) p.owner_edit_ids.push_back(r.get<std::int64_t>());
  if (!r.done()) throw FormatError("trailing bytes in patch section");
  p.validate();
  return p;
}

std::vector<std::uint8_t> encode_checkpoint(const TransformerModel& model,
                                            std::span<const CheckpointSection> extra) {
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto fields = config_fields(model);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(fields.size()));
  for (const auto& [name, value] : fields) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::int64_t>(value);
  }
  for (const Tensor* t : model.parameters()) w.put_doubles(t->values());
  put_section(w, "PTCH", encode_patches(model.patches()));
  for (const auto& s : extra) put_section(w, s.tag, s.payload);
  return w.bytes();
}

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     std::span<const CheckpointSection> extra) {
  write_file_atomic(path, encode_checkpoint(model, extra));
}

const CheckpointSection* LoadedCheckpoint::find(const std::string& tag) const {
  for (const auto& s : sections)
    if (s.tag == tag) return &s;
  return nullptr;
}

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(4) != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  std::map<std::string, std::int64_t> fields;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    if (len > 256) throw FormatError("implausible field name length");
    std::string name = r.get_bytes(len);
    fields[name] = r.get<std::int64_t>();
  }
  auto field = [&](const char* name) -> std::int64_t {
    auto it = fields.find(name);
    if (it == fields.end()) throw FormatError(std::string("checkpoint lacks field '") + name + "'");
    if (it->second < 0) throw FormatError(std::string("negative field '") + name + "'");
    return it->second;
  };
  ModelConfig c;
  c.vocab_size = static_cast<std::size_t>(field("vocab_size"));
  c.d_model = static_cast<std::size_t>(field("d_model"));
  c.n_heads = static_cast<std::size_t>(field("n_heads"));
  c.n_layers = static_cast<std::size_t>(field("n_layers"));
  c.d_ffn = static_cast<std::size_t>(field("d_ffn"));
  c.activation = field("activation") == 0 ? Activation::kReLU : Activation::kGeLU;
  c.task = field("task") == 0 ? TaskKind::kClassification : TaskKind::kGeneration;
  c.n_classes = static_cast<std::size_t>(field("n_classes"));
  c.max_seq_len = static_cast<std::size_t>(field("max_seq_len"));
  c.pad_token = static_cast<int>(field("pad_token"));
  c.eos_token = static_cast<int>(field("eos_token"));
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("invalid stored config: ") + e.what());
  }

  LoadedCheckpoint out{TransformerModel(c, 0), {}};
  for (Tensor* t : out.model.parameters(ParamScope::kAll)) r.get_doubles(t->values());
  out.model.set_patched_layer(static_cast<std::size_t>(field("patched_layer")));
  bool have_patches = false;
  while (!r.done()) {
    CheckpointSection s;
    s.tag = r.get_bytes(4);
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining()) throw FormatError("truncated section '" + s.tag + "'");
    std::string body = r.get_bytes(static_cast<std::size_t>(len));
    s.payload.assign(body.begin(), body.end());
    if (s.tag == "PTCH") {
      PatchSet p = decode_patches(s.payload);
      if (p.d_model() != c.d_model && !p.empty()) throw FormatError("patch width does not match the model");
      out.model.mutable_patches() = p.empty() ? PatchSet::empty(c.d_model) : p;
      have_patches = true;
    } else {
      out.sections.push_back(std::move(s));
    }
  }
  if (!have_patches) throw FormatError("checkpoint lacks a patch section");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace smelab
