#include "kvprobe/tensor_archive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "kvprobe/error.hpp"

namespace kvprobe {
namespace {

constexpr char kMagic[8] = {'K', 'V', 'P', 'T', 'A', 'R', 'C', '1'};

std::uint64_t decode_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void encode_u64_le(std::uint64_t v, char* out) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

void to_host_order(std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : values) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = (u >> 24) | ((u >> 8) & 0xff00) | ((u << 8) & 0xff0000) | (u << 24);
      std::memcpy(&f, &u, 4);
    }
  }
}

}  // namespace

std::size_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("", "cannot open archive " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw LoadError("", "not a kvprobe tensor archive: " + path.string());
  const std::uint64_t header_len = decode_u64_le(reinterpret_cast<const unsigned char*>(bytes.data() + 8));
  if (header_len > bytes.size() - 16) throw LoadError("", "truncated archive header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("", std::string("malformed archive header: ") + e.what());
  }
  if (header.value("format_version", 0) != 1) throw LoadError("", "unsupported archive format_version");

  const std::size_t data_start = 16 + header_len;
  const std::size_t data_len = bytes.size() - data_start;
  TensorArchive archive;
  archive.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& [name, info] : header.at("tensors").items()) {
    if (info.value("dtype", "") != "f32") throw LoadError(name, "unsupported dtype (only f32)");
    Tensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    if (std::any_of(t.shape.begin(), t.shape.end(), [](std::int64_t d) { return d < 0; }))
      throw LoadError(name, "negative dimension");
    const auto offset = info.at("offset").get<std::uint64_t>();
    const std::size_t nbytes = t.numel() * sizeof(float);
    if (offset > data_len || nbytes > data_len - offset) throw LoadError(name, "data extends past end of archive");
    t.data.resize(t.numel());
    std::memcpy(t.data.data(), bytes.data() + data_start + offset, nbytes);
    to_host_order(t.data);
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["metadata"] = archive.metadata;
  header["tensors"] = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (t.numel() != t.data.size()) throw InvalidArgument("tensor '" + name + "': shape does not match data size");
    header["tensors"][name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}};
    offset += t.data.size() * sizeof(float);
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write archive " + path.string());
  char len[8];
  encode_u64_le(header_text.size(), len);
  out.write(kMagic, 8);
  out.write(len, 8);
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : archive.tensors) {
    std::vector<float> le = t.data;
    to_host_order(le);  // involution: host <-> little-endian
    out.write(reinterpret_cast<const char*>(le.data()), static_cast<std::streamsize>(le.size() * sizeof(float)));
  }
  if (!out) throw Error("failed writing archive " + path.string());
}

}  // namespace kvprobe
