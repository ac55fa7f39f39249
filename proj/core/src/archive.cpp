#include "msht/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace msht {

static_assert(std::endian::native == std::endian::little,
              "archive encoding assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "MSHTPARC";

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string string() {
    const auto len = raw<std::uint32_t>();
    need(len);
    std::string s(bytes_.substr(pos_, len));
    pos_ += len;
    return s;
  }

  void doubles(double* dst, std::size_t count) {
    need(count * sizeof(double));
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ArchiveError("parameter archive truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* ParameterArchive::find(const std::string& name) const {
  const auto it = tensors_.find(name);
  return it == tensors_.end() ? nullptr : &it->second;
}

const std::string* ParameterArchive::metadata(const std::string& key) const {
  const auto it = metadata_.find(key);
  return it == metadata_.end() ? nullptr : &it->second;
}

std::string ParameterArchive::serialize() const {
  std::string out(kMagic);
  put_raw<std::uint32_t>(out, kFormatVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(metadata_.size()));
  for (const auto& [k, v] : metadata_) {
    put_string(out, k);
    put_string(out, v);
  }
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    put_string(out, name);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_raw<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()),
               static_cast<std::size_t>(t.numel()) * sizeof(double));
  }
  return out;
}

ParameterArchive ParameterArchive::deserialize(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw ArchiveError("not a parameter archive");
  Reader in(bytes.substr(kMagic.size()));
  const auto version = in.raw<std::uint32_t>();
  if (version != kFormatVersion) {
    throw ArchiveError("unsupported archive format version " + std::to_string(version));
  }
  ParameterArchive ar;
  const auto meta_count = in.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = in.string();
    ar.metadata_[k] = in.string();
  }
  const auto count = in.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.string();
    const auto rank = in.raw<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = in.raw<std::int64_t>();
    Tensor t(shape);
    in.doubles(t.data(), static_cast<std::size_t>(t.numel()));
    ar.tensors_.emplace(std::move(name), std::move(t));
  }
  if (!in.done()) throw ArchiveError("trailing bytes after parameter archive");
  return ar;
}

void ParameterArchive::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ArchiveError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize();
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ArchiveError("failed writing " + path.string());
}

ParameterArchive ParameterArchive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

ParameterArchive to_archive(std::span<const Parameter> params) {
  ParameterArchive ar;
  for (const auto& p : params) ar.put(p.name, p.var.value());
  return ar;
}

LoadReport load_parameters(std::span<const Parameter> params, const ParameterArchive& archive) {
  LoadReport report;
  std::vector<std::string> conflicts;
  std::map<std::string, bool> known;
  for (const auto& p : params) {
    known[p.name] = true;
    const Tensor* t = archive.find(p.name);
    if (!t) {
      report.missing.push_back(p.name);
    } else if (t->shape() != p.var.shape()) {
      conflicts.push_back(p.name + " (expected " + shape_to_string(p.var.shape()) + ", archive " +
                          shape_to_string(t->shape()) + ")");
    }
  }
  if (!conflicts.empty()) {
    std::string msg = "parameter shape conflict:";
    for (const auto& c : conflicts) msg += "\n  " + c;
    throw ArchiveError(msg);
  }
  for (const auto& p : params) {
    if (const Tensor* t = archive.find(p.name)) {
      Var v = p.var;
      v.mutable_value() = *t;
      report.loaded.push_back(p.name);
    }
  }
  for (const auto& [name, t] : archive.tensors()) {
    if (!known.contains(name)) report.unexpected.push_back(name);
  }
  return report;
}

}  // namespace msht
