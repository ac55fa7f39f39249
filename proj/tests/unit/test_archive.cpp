#include <gtest/gtest.h>

#include <filesystem>

#include "msht/archive.hpp"
#include "oracles.hpp"

using namespace msht;

namespace {

ParameterSet small_set(std::uint64_t seed) {
  ParameterSet ps;
  std::mt19937_64 rng(seed);
  ps.add("b.weight", oracle::random_tensor({2, 3}, rng));
  ps.add("a.bias", oracle::random_tensor({3}, rng));
  ps.add("a.running_var", oracle::random_tensor({3}, rng), false);
  return ps;
}

}  // namespace

TEST(Archive, RoundTripPreservesValuesAndMetadata) {
  const ParameterSet ps = small_set(1);
  ParameterArchive ar = to_archive(ps.entries());
  ar.set_metadata("variant", "MSHT");
  const ParameterArchive back = ParameterArchive::deserialize(ar.serialize());
  ASSERT_EQ(back.tensors().size(), 3u);
  EXPECT_EQ(*back.metadata("variant"), "MSHT");
  EXPECT_EQ(back.metadata("missing"), nullptr);
  for (const auto& p : ps.entries()) {
    const Tensor* t = back.find(p.name);
    ASSERT_NE(t, nullptr) << p.name;
    EXPECT_EQ(t->shape(), p.var.shape());
    EXPECT_EQ(max_abs_diff(*t, p.var.value()), 0.0);
  }
}

TEST(Archive, SerializationIsDeterministicAndOrderIndependent) {
  ParameterArchive a, b;
  a.put("x", Tensor({2}, {1.0, 2.0}));
  a.put("y", Tensor({1}, {3.0}));
  b.put("y", Tensor({1}, {3.0}));
  b.put("x", Tensor({2}, {1.0, 2.0}));
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Archive, RejectsForeignOrDamagedBytes) {
  EXPECT_THROW(ParameterArchive::deserialize("NOTANARCHIVE...."), ArchiveError);
  ParameterArchive a;
  a.put("x", Tensor({4}, 1.5));
  std::string bytes = a.serialize();
  EXPECT_THROW(ParameterArchive::deserialize(bytes.substr(0, bytes.size() - 3)), ArchiveError);
  EXPECT_THROW(ParameterArchive::deserialize(bytes + "x"), ArchiveError);
}

TEST(Archive, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "msht_archive_roundtrip.msht";
  ParameterArchive a;
  a.put("w", Tensor({2, 2}, {1, 2, 3, 4}));
  a.save(path);
  EXPECT_EQ(ParameterArchive::load(path).serialize(), a.serialize());
  std::filesystem::remove(path);
  EXPECT_THROW(ParameterArchive::load(path), ArchiveError);
}

TEST(Archive, LoadReportsMissingAndUnexpected) {
  const ParameterSet ps = small_set(2);
  ParameterArchive ar;
  ar.put("b.weight", Tensor({2, 3}, 7.0));
  ar.put("stray", Tensor({1}));
  const LoadReport r = load_parameters(ps.entries(), ar);
  EXPECT_EQ(r.loaded, std::vector<std::string>{"b.weight"});
  EXPECT_EQ(r.missing, (std::vector<std::string>{"a.bias", "a.running_var"}));
  EXPECT_EQ(r.unexpected, std::vector<std::string>{"stray"});
  EXPECT_DOUBLE_EQ(ps.find("b.weight")->var.value()[5], 7.0);
}

TEST(Archive, ShapeConflictLeavesEveryParameterUntouched) {
  const ParameterSet ps = small_set(3);
  const Tensor before_w = ps.find("b.weight")->var.value();
  const Tensor before_b = ps.find("a.bias")->var.value();
  ParameterArchive ar;
  ar.put("a.bias", Tensor({3}, 9.0));    // valid, listed first
  ar.put("b.weight", Tensor({3, 2}));    // transposed shape
  try {
    load_parameters(ps.entries(), ar);
    FAIL() << "expected a shape conflict";
  } catch (const ArchiveError& e) {
    EXPECT_NE(std::string(e.what()).find("b.weight"), std::string::npos);
  }
  EXPECT_EQ(max_abs_diff(ps.find("a.bias")->var.value(), before_b), 0.0);
  EXPECT_EQ(max_abs_diff(ps.find("b.weight")->var.value(), before_w), 0.0);
}
