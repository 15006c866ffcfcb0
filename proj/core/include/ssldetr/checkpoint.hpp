#pragma once

#include <map>
#include <string>

#include "ssldetr/tensor.hpp"

namespace ssldetr {

// Self-describing archive of named tensors plus a free-form JSON metadata
// record. The on-disk layout is versioned: magic, a format version, a JSON
// header describing every tensor's offset, then a flat float64 payload.
// Readers ignore unknown header keys, so files written by newer versions that
// keep this layout remain loadable.
struct CheckpointData {
  std::string meta_json = "{}";          // JSON object, caller-defined
  std::map<std::string, Tensor> tensors;
};

// Writes atomically (temp file + rename). Throws IoError on failure.
void save_checkpoint(const std::string& path, const CheckpointData& data);

// Throws IoError on missing/corrupt files with the path in the message.
CheckpointData load_checkpoint(const std::string& path);

}  // namespace ssldetr
