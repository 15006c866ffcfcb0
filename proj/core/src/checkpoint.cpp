#include "ssldetr/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ssldetr/errors.hpp"

namespace ssldetr {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'E', 'T', 'R', 'C', 'K', 'P'};
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw IoError("checkpoint " + path + ": truncated header");
  }
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw IoError("checkpoint " + path + ": truncated header");
  }
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  try {
    header["meta"] = nlohmann::json::parse(data.meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path + ": meta_json is not valid JSON: " + e.what());
  }
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    nlohmann::json rec;
    rec["name"] = name;
    rec["shape"] = t.shape();
    rec["offset"] = offset;
    rec["count"] = t.numel();
    tensors.push_back(std::move(rec));
    offset += static_cast<uint64_t>(t.numel());
  }
  header["tensors"] = std::move(tensors);
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint " + path + ": cannot open " + tmp + " for writing");
    os.write(kMagic, sizeof(kMagic));
    write_u32(os, kFormatVersion);
    write_u64(os, header_text.size());
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : data.tensors) {
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(sizeof(double)) * t.numel());
    }
    if (!os) throw IoError("checkpoint " + path + ": write failed on " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("checkpoint " + path + ": rename failed: " + ec.message());
  }
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint " + path + ": cannot open for reading");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::string(magic, 8) != std::string(kMagic, 8)) {
    throw IoError("checkpoint " + path + ": not a checkpoint archive (bad magic)");
  }
  read_u32(is, path);  // format version; layout of known fields is stable
  const uint64_t header_len = read_u64(is, path);
  std::string header_text(header_len, '\0');
  if (!is.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
    throw IoError("checkpoint " + path + ": truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path + ": corrupt header: " + e.what());
  }

  CheckpointData out;
  out.meta_json = header.value("meta", nlohmann::json::object()).dump();
  const std::streampos payload_start = is.tellg();
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw IoError("checkpoint " + path + ": header lists no tensors");
  }
  for (const auto& rec : header["tensors"]) {
    const std::string name = rec.at("name").get<std::string>();
    const std::vector<int64_t> shape = rec.at("shape").get<std::vector<int64_t>>();
    const uint64_t offset = rec.at("offset").get<uint64_t>();
    const uint64_t count = rec.at("count").get<uint64_t>();
    if (static_cast<int64_t>(count) != Tensor::shape_numel(shape)) {
      throw IoError("checkpoint " + path + ": tensor \"" + name +
                    "\" count disagrees with its shape");
    }
    Tensor t = Tensor::zeros(shape);
    is.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(double) * count))) {
      throw IoError("checkpoint " + path + ": truncated payload for \"" + name + "\"");
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace ssldetr
