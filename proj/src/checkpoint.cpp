#include "xmreid/checkpoint.hpp"

#include "xmreid/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace xmreid {

namespace {

constexpr char kMagic[8] = {'X', 'M', 'R', 'E', 'I', 'D', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ConfigError("checkpoint truncated");
  return value;
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw ConfigError("checkpoint truncated");
  return s;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void Checkpoint::add(const std::string& prefix, const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    arrays.push_back({prefix + name, t.shape(), {t.values().begin(), t.values().end()}});
  }
}

void Checkpoint::restore(const std::string& prefix, NamedTensors& tensors) const {
  for (auto& [name, t] : tensors) {
    const NamedArray* a = find(prefix + name);
    if (!a) throw ConfigError("checkpoint lacks array '" + prefix + name + "'");
    if (a->shape != t.shape()) {
      throw ConfigError("checkpoint array '" + prefix + name + "' has shape " + to_string(a->shape) +
                        ", expected " + to_string(t.shape()));
    }
    std::copy(a->values.begin(), a->values.end(), t.values().begin());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, Checkpoint::kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(checkpoint.meta.size()));
  for (const auto& [k, v] : checkpoint.meta) {
    put_string(os, k);
    put_string(os, v);
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(checkpoint.arrays.size()));
  for (const auto& a : checkpoint.arrays) {
    put_string(os, a.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(a.values.data()),
             static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError(path.string() + " is not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != Checkpoint::kVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto n_meta = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = get_string(is);
    c.meta[k] = get_string(is);
  }
  const auto n_arrays = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    NamedArray a;
    a.name = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(get<std::uint64_t>(is));
    a.values.resize(numel(a.shape));
    if (!is.read(reinterpret_cast<char*>(a.values.data()),
                 static_cast<std::streamsize>(a.values.size() * sizeof(double)))) {
      throw ConfigError("checkpoint truncated in array '" + a.name + "'");
    }
    c.arrays.push_back(std::move(a));
  }
  return c;
}

std::uint64_t checksum(std::span<const Tensor> tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    const auto bytes = std::as_bytes(t.values());
    for (auto b : bytes) {
      h ^= static_cast<std::uint64_t>(b);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t checksum(const NamedTensors& tensors) {
  std::vector<Tensor> list;
  for (const auto& [_, t] : tensors) list.push_back(t);
  return checksum(list);
}

std::string hex(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

}  // namespace xmreid
