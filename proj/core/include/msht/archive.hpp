#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "msht/nn.hpp"
#include "msht/tensor.hpp"

namespace msht {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named map of parameter arrays plus string metadata.
///
/// Binary layout, little-endian:
///   magic "MSHTPARC" | u32 format version
///   u32 metadata count | { u32 len, key bytes, u32 len, value bytes }*
///   u32 tensor count   | { u32 len, name bytes, u32 rank, i64 dims[rank], f64 values[] }*
/// Entries are written in lexicographic name order, so equal archives
/// serialize to identical bytes.
class ParameterArchive {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void put(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }
  const Tensor* find(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  bool empty() const { return tensors_.empty(); }

  void set_metadata(const std::string& key, std::string value) { metadata_[key] = std::move(value); }
  const std::string* metadata(const std::string& key) const;
  const std::map<std::string, std::string>& all_metadata() const { return metadata_; }

  std::string serialize() const;
  static ParameterArchive deserialize(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static ParameterArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> metadata_;
};

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // expected but absent from the archive
  std::vector<std::string> unexpected;  // present in the archive, unknown here
};

ParameterArchive to_archive(std::span<const Parameter> params);

/// Copies matching archive entries into the parameters. All shapes are
/// checked before anything is written; a conflict throws ArchiveError naming
/// every offending parameter and leaves the parameters untouched.
LoadReport load_parameters(std::span<const Parameter> params, const ParameterArchive& archive);

}  // namespace msht
