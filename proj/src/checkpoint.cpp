#include "derain/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace derain {
namespace {

namespace fs = std::filesystem;

int layers_of(const NetConfig& n) { return n.layers(); }

std::string shape_text(const Shape& s) {
  return std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w);
}

Shape parse_shape(const std::string& text) {
  Shape s;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(text);
  if (!(in >> s.n >> c1 >> s.c >> c2 >> s.h >> c3 >> s.w) || c1 != ',' || c2 != ',' || c3 != ',') {
    throw CheckpointError("malformed shape '" + text + "'");
  }
  return s;
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

struct Segment {
  std::string name;
  Shape shape;
  float* data;
  std::size_t count;
};

std::vector<Segment> model_segments(CascadeModel<float>& model) {
  std::vector<Segment> out;
  for (auto& [name, t] : model.parameters()) {
    Tensor<float> handle = t;
    out.push_back({name, t.shape(), handle.mutable_data().data(), t.numel()});
  }
  for (auto& [name, buf] : model.buffers()) {
    out.push_back({name, Shape{1, static_cast<int>(buf->size()), 1, 1}, buf->data(), buf->size()});
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a(std::span<const float> values) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (float f : values) {
    const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

void write_model_config(std::ostream& os, const ModelConfig& cfg) {
  os << std::setprecision(17);
  os << "model.phi1_layers = " << layers_of(cfg.phi1) << "\n";
  os << "model.phi1_width = " << cfg.phi1.width_scale << "\n";
  os << "model.phi2_layers = " << layers_of(cfg.phi2) << "\n";
  os << "model.phi2_width = " << cfg.phi2.width_scale << "\n";
  os << "model.scales = " << cfg.scales << "\n";
  os << "model.cascade = " << to_string(cfg.cascade) << "\n";
}

ModelConfig read_model_config(KeyValueFile& kv, const ModelConfig& defaults) {
  ModelConfig cfg;
  try {
    cfg.cascade = cascade_mode_from_string(kv.get_string("model.cascade", to_string(defaults.cascade)));
    const int l1 = kv.get_int("model.phi1_layers", defaults.phi1.layers());
    const double w1 = kv.get_double("model.phi1_width", defaults.phi1.width_scale);
    const int l2 = kv.get_int("model.phi2_layers", defaults.phi2.layers());
    const double w2 = kv.get_double("model.phi2_width", defaults.phi2.width_scale);
    cfg.phi1 = NetConfig::with_layers(l1, w1, 3);
    cfg.phi2 = NetConfig::with_layers(l2, w2, 3);
    cfg.scales = kv.get_int("model.scales", defaults.scales);
    cfg.normalize();
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigParseError(kv.source(), 0, std::string("model: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigParseError(kv.source(), 0, std::string("model: ") + e.what());
  }
  return cfg;
}

std::string format_blob_entry(const BlobEntry& e) {
  std::ostringstream os;
  os << e.name << " " << shape_text(e.shape) << " " << e.offset << " " << e.count << " " << std::hex
     << std::setw(16) << std::setfill('0') << e.hash;
  return os.str();
}

BlobEntry parse_blob_entry(const std::string& text) {
  std::istringstream in(text);
  BlobEntry e;
  std::string shape;
  if (!(in >> e.name >> shape >> e.offset >> e.count >> std::hex >> e.hash)) {
    throw CheckpointError("malformed entry '" + text + "'");
  }
  e.shape = parse_shape(shape);
  if (e.shape.numel() != e.count) {
    throw CheckpointError("entry " + e.name + ": shape " + shape + " does not hold " +
                          std::to_string(e.count) + " values");
  }
  return e;
}

void write_f32_blob(const fs::path& path, const std::vector<std::span<const float>>& segments) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  std::vector<std::uint32_t> buf;
  for (auto seg : segments) {
    buf.resize(seg.size());
    for (std::size_t i = 0; i < seg.size(); ++i) buf[i] = to_le(std::bit_cast<std::uint32_t>(seg[i]));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(std::uint32_t)));
  }
  if (!out) throw CheckpointError("failed writing " + path.string());
}

std::vector<float> read_f32_blob(const fs::path& path, const std::vector<BlobEntry>& entries) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing blob " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  if (bytes % 4 != 0) throw CheckpointError(path.string() + ": size is not a whole number of floats");
  const std::uint64_t have = bytes / 4;
  std::uint64_t expect = 0;
  for (const BlobEntry& e : entries) {
    if (e.offset != expect) {
      throw CheckpointError("entry " + e.name + ": offset " + std::to_string(e.offset) +
                            " does not follow the previous entry");
    }
    if (e.offset + e.count > have) {
      throw CheckpointError("entry " + e.name + ": extends past the end of " + path.string() +
                            " (truncated blob)");
    }
    expect += e.count;
  }
  if (expect != have) {
    throw CheckpointError(path.string() + " holds " + std::to_string(have) +
                          " values but the manifest lists " + std::to_string(expect));
  }
  std::vector<std::uint32_t> raw(have);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw CheckpointError("failed reading " + path.string());
  std::vector<float> values(have);
  for (std::uint64_t i = 0; i < have; ++i) values[i] = std::bit_cast<float>(to_le(raw[i]));
  for (const BlobEntry& e : entries) {
    const std::uint64_t h = fnv1a(std::span<const float>(values).subspan(e.offset, e.count));
    if (h != e.hash) throw CheckpointError("entry " + e.name + ": hash mismatch (corrupt blob)");
  }
  return values;
}

void save_checkpoint(CascadeModel<float>& model, const CheckpointMeta& meta, const fs::path& dir) {
  fs::create_directories(dir);
  const auto segments = model_segments(model);
  std::vector<std::span<const float>> spans;
  std::ostringstream manifest;
  manifest << "format = " << kCheckpointFormat << "\n";
  write_model_config(manifest, model.config());
  manifest << "seed = " << meta.seed << "\n";
  manifest << "step = " << meta.step << "\n";
  manifest << "stage = " << meta.stage << "\n";
  manifest << "entries = " << segments.size() << "\n";
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    std::span<const float> span(s.data, s.count);
    spans.push_back(span);
    BlobEntry e{s.name, s.shape, offset, s.count, fnv1a(span)};
    manifest << "entry." << i << " = " << format_blob_entry(e) << "\n";
    offset += s.count;
  }
  write_f32_blob(dir / "params.bin", spans);
  std::ofstream out(dir / "manifest.txt", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + (dir / "manifest.txt").string());
  out << manifest.str();
  if (!out) throw CheckpointError("failed writing manifest in " + dir.string());
}

namespace {

CascadeModel<float> load_impl(const fs::path& dir, const ModelConfig* expected, CheckpointMeta* meta) {
  const fs::path manifest_path = dir / "manifest.txt";
  if (!fs::exists(manifest_path)) throw CheckpointError("missing " + manifest_path.string());
  KeyValueFile kv = KeyValueFile::load(manifest_path);
  const std::string format = kv.get_string("format", "");
  if (format != kCheckpointFormat) {
    throw CheckpointError(manifest_path.string() + ": unknown format '" + format + "'");
  }
  CheckpointMeta m;
  m.model = read_model_config(kv, ModelConfig::final_design(0.125));
  m.seed = kv.get_u64("seed", 0);
  m.step = kv.get_u64("step", 0);
  m.stage = kv.get_int("stage", 1);
  const int n = kv.get_int("entries", -1);
  if (n < 0) throw CheckpointError(manifest_path.string() + ": missing entry count");
  std::vector<BlobEntry> entries;
  for (int i = 0; i < n; ++i) {
    const auto text = kv.raw("entry." + std::to_string(i));
    if (!text) throw CheckpointError("manifest lacks entry." + std::to_string(i));
    entries.push_back(parse_blob_entry(*text));
  }
  kv.reject_unused();

  if (expected != nullptr) {
    ModelConfig want = *expected;
    want.normalize();
    if (!(want == m.model)) {
      std::ostringstream a, b;
      write_model_config(a, m.model);
      write_model_config(b, want);
      throw ConfigMismatchError("checkpoint " + dir.string() + " was written for\n" + a.str() +
                                "but the requested model is\n" + b.str());
    }
  }

  CascadeModel<float> model(m.model, m.seed);
  auto segments = model_segments(model);
  if (segments.size() != entries.size()) {
    throw CheckpointError("manifest lists " + std::to_string(entries.size()) +
                          " entries but the model has " + std::to_string(segments.size()));
  }
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].name != entries[i].name || segments[i].shape != entries[i].shape) {
      throw CheckpointError("entry " + entries[i].name + " " + shape_text(entries[i].shape) +
                            " does not match model tensor " + segments[i].name + " " +
                            shape_text(segments[i].shape));
    }
  }
  const std::vector<float> values = read_f32_blob(dir / "params.bin", entries);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    std::memcpy(segments[i].data, values.data() + entries[i].offset, entries[i].count * sizeof(float));
  }
  if (meta != nullptr) *meta = m;
  return model;
}

}  // namespace

CascadeModel<float> load_checkpoint(const fs::path& dir, CheckpointMeta* meta) {
  return load_impl(dir, nullptr, meta);
}

CascadeModel<float> load_checkpoint(const fs::path& dir, const ModelConfig& expected,
                                    CheckpointMeta* meta) {
  return load_impl(dir, &expected, meta);
}

}  // namespace derain
