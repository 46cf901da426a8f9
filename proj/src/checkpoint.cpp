#include "amieod/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "amieod/errors.hpp"

namespace amieod {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'M', 'I', 'E', 'O', 'D', 'C', 'K'};
constexpr size_t kPreamble = 8 + 4 + 4 + 8;

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& in, size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw InvalidArgument(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType parse_dtype(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  throw CorruptCheckpoint("checkpoint: unknown dtype '" + s + "'");
}

}  // namespace

bool Checkpoint::has_prefix(const std::string& prefix) const {
  auto it = tensors.lower_bound(prefix);
  return it != tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json header;
  header["stage"] = ckpt.stage;
  header["epoch"] = ckpt.epoch;
  header["rng_state"] = ckpt.rng_state;
  header["config"] = ckpt.config;
  json records = json::array();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    const uint64_t nbytes = static_cast<uint64_t>(c.numel()) * c.element_size();
    records.push_back({{"name", name}, {"dtype", dtype_name(c.scalar_type())}, {"shape", c.sizes().vec()},
                       {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(std::move(c));
  }
  header["tensors"] = std::move(records);
  header["data_bytes"] = offset;
  const std::string head = header.dump();

  std::string out;
  out.reserve(kPreamble + head.size() + offset + 8);
  out.append(kMagic, 8);
  put<uint32_t>(out, ckpt.format_version);
  put<uint32_t>(out, 0);
  put<uint64_t>(out, head.size());
  out += head;
  for (const auto& b : blobs) out.append(static_cast<const char*>(b.data_ptr()), b.numel() * b.element_size());
  put<uint64_t>(out, fnv1a(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kPreamble || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CorruptCheckpoint("checkpoint: bad magic or truncated preamble");
  }
  const auto version = get<uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersion("checkpoint: format version " + std::to_string(version) + " (supported: " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const auto head_len = get<uint64_t>(bytes, 16);
  if (head_len > bytes.size() - kPreamble) throw CorruptCheckpoint("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(kPreamble, head_len));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  try {
    const uint64_t data_bytes = header.at("data_bytes").get<uint64_t>();
    const uint64_t data_start = kPreamble + head_len;
    if (bytes.size() != data_start + data_bytes + 8) {
      throw CorruptCheckpoint("checkpoint: size " + std::to_string(bytes.size()) + " does not match header (" +
                              std::to_string(data_start + data_bytes + 8) + ")");
    }
    const auto stored = get<uint64_t>(bytes, bytes.size() - 8);
    if (stored != fnv1a(bytes.data(), bytes.size() - 8)) throw CorruptCheckpoint("checkpoint: checksum mismatch");

    Checkpoint c;
    c.format_version = version;
    c.stage = header.at("stage").get<int>();
    c.epoch = header.at("epoch").get<int>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.config = header.at("config");
    for (const auto& r : header.at("tensors")) {
      const auto name = r.at("name").get<std::string>();
      const auto dtype = parse_dtype(r.at("dtype").get<std::string>());
      const auto shape = r.at("shape").get<std::vector<int64_t>>();
      const auto off = r.at("offset").get<uint64_t>();
      const auto nbytes = r.at("nbytes").get<uint64_t>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (static_cast<uint64_t>(t.numel()) * t.element_size() != nbytes || off + nbytes > data_bytes) {
        throw CorruptCheckpoint("checkpoint: inconsistent record for " + name);
      }
      std::memcpy(t.data_ptr(), bytes.data() + data_start + off, nbytes);
      c.tensors.emplace(name, std::move(t));
    }
    return c;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint: malformed header: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // Write to a sibling and rename so a crash never leaves a half-written file.
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidArgument("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void export_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(true)) ckpt.tensors[prefix + p.key()] = p.value().detach().clone();
  for (const auto& b : module.named_buffers(true)) ckpt.tensors[prefix + b.key()] = b.value().detach().clone();
}

void import_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor dst) {
    auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) throw CorruptCheckpoint("checkpoint: missing tensor " + prefix + name);
    if (it->second.sizes() != dst.sizes()) throw CorruptCheckpoint("checkpoint: shape mismatch for " + prefix + name);
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

uint64_t weights_hash(const torch::nn::Module& module) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::string& name, const torch::Tensor& t) {
    h = fnv1a(name.data(), name.size(), h);
    auto c = t.detach().to(torch::kCPU).contiguous();
    h = fnv1a(c.data_ptr(), c.numel() * c.element_size(), h);
  };
  for (const auto& p : module.named_parameters(true)) mix(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) mix(b.key(), b.value());
  return h;
}

}  // namespace amieod
