#include "motion_r1/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace mr1::nn {

namespace {

constexpr char kMagic[8] = {'M', 'R', '1', 'C', 'K', 'P', 'T', '1'};

void write_u32(std::ostream& os, uint32_t x) {
  char b[4];
  std::memcpy(b, &x, 4);
  os.write(b, 4);
}

void write_i64(std::ostream& os, int64_t x) {
  char b[8];
  std::memcpy(b, &x, 8);
  os.write(b, 8);
}

uint32_t read_u32(std::istream& is) {
  char b[4];
  is.read(b, 4);
  if (!is) throw NnError("checkpoint: truncated file");
  uint32_t x;
  std::memcpy(&x, b, 4);
  return x;
}

int64_t read_i64(std::istream& is) {
  char b[8];
  is.read(b, 8);
  if (!is) throw NnError("checkpoint: truncated file");
  int64_t x;
  std::memcpy(&x, b, 8);
  return x;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::string& metadata_json) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw NnError("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 8);
  write_u32(os, static_cast<uint32_t>(metadata_json.size()));
  os.write(metadata_json.data(),
           static_cast<std::streamsize>(metadata_json.size()));
  write_u32(os, static_cast<uint32_t>(params.values.size()));
  for (const auto& [name, t] : params.values) {  // std::map is name-sorted
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) write_i64(os, d);
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
  if (!os) throw NnError("checkpoint: write failed: " + path);
}

std::string load_checkpoint(const std::string& path, ParameterSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NnError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw NnError("checkpoint: bad magic in " + path);
  uint32_t meta_len = read_u32(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  if (!is) throw NnError("checkpoint: truncated metadata in " + path);
  uint32_t count = read_u32(is);
  params = ParameterSet{};
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nlen = read_u32(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    uint32_t rank = read_u32(is);
    std::vector<int64_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = read_i64(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!is) throw NnError("checkpoint: truncated payload for " + name);
    params.add(name, std::move(t));
  }
  return meta;
}

}  // namespace mr1::nn
