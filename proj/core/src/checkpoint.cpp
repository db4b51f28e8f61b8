#include "metx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace metx {

namespace {

constexpr char kMagic[5] = {'M', 'E', 'T', 'X', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw std::runtime_error("checkpoint: truncated while reading " + what);
  }
  return v;
}

std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw std::runtime_error("checkpoint: truncated while reading " + what);
  }
  return v;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= kFnvPrime;
  }
  return h;
}

void save_checkpoint(const std::string& path, const RunConfig& config,
                     const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);
  const std::string config_text = config.to_string();
  write_u32(os, static_cast<std::uint32_t>(config_text.size()));
  os.write(config_text.data(), config_text.size());
  write_u32(os, static_cast<std::uint32_t>(params.named.size()));
  std::uint64_t checksum = kFnvOffset;
  for (const auto& [name, tensor] : params.named) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), name.size());
    const auto& shape = tensor.shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (std::int64_t e : shape) write_u32(os, static_cast<std::uint32_t>(e));
    const auto vals = tensor.values();
    const std::uint64_t bytes = vals.size() * sizeof(float);
    write_u64(os, bytes);
    os.write(reinterpret_cast<const char*>(vals.data()), bytes);
    checksum = fnv1a64(vals.data(), bytes, checksum);
  }
  write_u64(os, checksum);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = read_u32(is, "version");
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  }
  const std::uint32_t config_len = read_u32(is, "config length");
  std::string config_text(config_len, '\0');
  if (!is.read(config_text.data(), config_len)) {
    throw std::runtime_error("checkpoint: truncated config in " + path);
  }
  Checkpoint checkpoint;
  checkpoint.config = RunConfig::from_string(config_text);
  const std::uint32_t count = read_u32(is, "parameter count");
  std::uint64_t checksum = kFnvOffset;
  for (std::uint32_t p = 0; p < count; ++p) {
    const std::uint32_t name_len = read_u32(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw std::runtime_error("checkpoint: truncated name in " + path);
    }
    const std::uint32_t rank = read_u32(is, "rank");
    Shape shape(rank);
    for (std::uint32_t a = 0; a < rank; ++a) shape[a] = read_u32(is, "extent");
    const std::uint64_t bytes = read_u64(is, "payload length");
    if (bytes != static_cast<std::uint64_t>(shape_size(shape)) * sizeof(float)) {
      throw std::runtime_error("checkpoint: payload length mismatch for " + name);
    }
    std::vector<float> vals(bytes / sizeof(float));
    if (!is.read(reinterpret_cast<char*>(vals.data()), bytes)) {
      throw std::runtime_error("checkpoint: truncated payload for " + name);
    }
    checksum = fnv1a64(vals.data(), bytes, checksum);
    checkpoint.params.emplace_back(name, Tensor::from_data(shape, std::move(vals)));
  }
  const std::uint64_t stored = read_u64(is, "checksum");
  if (stored != checksum) {
    throw std::runtime_error("checkpoint: checksum mismatch in " + path);
  }
  return checkpoint;
}

void load_into(ModelParams& params, const Checkpoint& checkpoint) {
  if (params.named.size() != checkpoint.params.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch, model has " +
                             std::to_string(params.named.size()) + ", file has " +
                             std::to_string(checkpoint.params.size()));
  }
  for (std::size_t i = 0; i < params.named.size(); ++i) {
    auto& [name, tensor] = params.named[i];
    const auto& [file_name, file_tensor] = checkpoint.params[i];
    if (name != file_name) {
      throw std::runtime_error("checkpoint: parameter order mismatch at " + name +
                               " vs " + file_name);
    }
    if (tensor.shape() != file_tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ", model " +
                               shape_str(tensor.shape()) + " vs file " +
                               shape_str(file_tensor.shape()));
    }
    auto dst = tensor.values_mut();
    const auto src = file_tensor.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace metx
