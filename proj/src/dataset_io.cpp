#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pic/error.hpp"
#include "pic/io_util.hpp"
#include "pic/taskgen.hpp"

namespace pic {
namespace {

constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::uint8_t kQueryLabels = 1;
constexpr std::uint8_t kPromptLabels = 2;

void write_cloud(ByteWriter& w, const PointCloud& cloud) {
  for (const auto& p : cloud.points) {
    w.f32(p.x());
    w.f32(p.y());
    w.f32(p.z());
  }
}

PointCloud read_cloud(ByteReader& r, std::size_t n) {
  PointCloud cloud;
  cloud.points.resize(n);
  for (auto& p : cloud.points) {
    p.x() = r.f32();
    p.y() = r.f32();
    p.z() = r.f32();
  }
  return cloud;
}

std::optional<ShapeKind> category_from(const std::vector<Label>& labels, std::size_t offset) {
  if (labels.empty()) return std::nullopt;
  try {
    return category_of_part(labels.front());
  } catch (const std::invalid_argument&) {
    throw ParseError("unknown part id " + std::to_string(labels.front()), offset);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const std::vector<InContextSample>& samples) {
  ByteWriter w;
  w.bytes("PIC1", 4);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    validate_sample(s);
    const std::size_t n = s.size();
    if (n > 0xFFFF) throw std::invalid_argument("write_dataset: N exceeds u16 range");
    w.u8(static_cast<std::uint8_t>(s.task.task));
    w.u8(static_cast<std::uint8_t>(s.task.level));
    w.u16(static_cast<std::uint16_t>(n));
    write_cloud(w, s.prompt_input);
    write_cloud(w, s.prompt_target);
    write_cloud(w, s.query_input);
    write_cloud(w, s.query_target);
    std::uint8_t flag = 0;
    if (!s.query_labels.empty()) flag |= kQueryLabels;
    if (!s.prompt_labels.empty()) flag |= kPromptLabels;
    w.u8(flag);
    for (const Label l : s.query_labels) w.u16(l);
    for (const Label l : s.prompt_labels) w.u16(l);
    w.u64(s.seed);
  }
  return w.take();
}

std::vector<InContextSample> decode_dataset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "PIC1", 4) != 0) throw ParseError("bad dataset magic", 0);
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  }
  const std::uint32_t count = r.u32();
  std::vector<InContextSample> samples;
  samples.reserve(std::min<std::uint32_t>(count, 1u << 16));
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t start = r.offset();
    InContextSample s;
    const std::uint8_t task = r.u8();
    if (task > static_cast<std::uint8_t>(Task::IceRestoration)) {
      throw ParseError("unknown task id " + std::to_string(task), start);
    }
    s.task.task = static_cast<Task>(task);
    s.task.level = r.u8();
    const std::size_t n = r.u16();
    s.prompt_input = read_cloud(r, n);
    s.prompt_target = read_cloud(r, n);
    s.query_input = read_cloud(r, n);
    s.query_target = read_cloud(r, n);
    const std::size_t flag_offset = r.offset();
    const std::uint8_t flag = r.u8();
    if ((flag & ~(kQueryLabels | kPromptLabels)) != 0) {
      throw ParseError("bad label flag " + std::to_string(flag), flag_offset);
    }
    if (flag & kQueryLabels) {
      s.query_labels.resize(n);
      for (auto& l : s.query_labels) l = r.u16();
    }
    if (flag & kPromptLabels) {
      s.prompt_labels.resize(n);
      for (auto& l : s.prompt_labels) l = r.u16();
    }
    s.query_category = category_from(s.query_labels, flag_offset);
    s.prompt_category = category_from(s.prompt_labels, flag_offset);
    s.seed = r.u64();
    try {
      validate_sample(s);
    } catch (const std::invalid_argument& e) {
      throw ParseError(std::string("invalid sample: ") + e.what(), start);
    }
    samples.push_back(std::move(s));
  }
  if (r.offset() != bytes.size()) throw ParseError("trailing bytes after last sample", r.offset());
  return samples;
}

DatasetManifest summarize(const std::vector<InContextSample>& samples) {
  DatasetManifest m;
  m.total = samples.size();
  for (const auto& s : samples) {
    const std::string task(task_name(s.task.task));
    ++m.counts["task." + task];
    if (s.task.has_level()) ++m.counts["task." + task + ".L" + std::to_string(s.task.level)];
  }
  return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
  auto p = dataset;
  p += ".manifest";
  return p;
}

void write_dataset(const std::vector<InContextSample>& samples, const std::filesystem::path& path,
                   const std::map<std::string, std::string>& extra) {
  write_file(path, encode_dataset(samples));
  const DatasetManifest m = summarize(samples);
  std::ostringstream out;
  out << "format=PIC1\n";
  out << "version=" << kDatasetVersion << "\n";
  out << "samples=" << m.total << "\n";
  for (const auto& [key, value] : m.counts) out << key << "=" << value << "\n";
  for (const auto& [key, value] : extra) out << key << "=" << value << "\n";
  write_text_file(manifest_path(path), out.str());
}

std::vector<InContextSample> read_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

DatasetManifest read_manifest(const std::filesystem::path& dataset) {
  DatasetManifest m;
  for (const auto& [key, value] : read_key_values(manifest_path(dataset))) {
    if (key == "samples") {
      m.total = std::stoull(value);
    } else if (key.rfind("task.", 0) == 0) {
      m.counts[key] = std::stoull(value);
    } else {
      m.extra[key] = value;
    }
  }
  return m;
}

}  // namespace pic
