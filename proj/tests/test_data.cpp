#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <unistd.h>

#include "ccbm/data.hpp"

using namespace ccbm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() /
               ("ccbm_" + std::string(info->name()) + "_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

// 3 examples, d=4, C=2, K=3, J=2, A=3
Dataset tiny() {
  Dataset ds;
  ds.n = 3;
  ds.d = 4;
  ds.C = 2;
  ds.K = 3;
  ds.J = 2;
  ds.A = 3;
  for (int i = 0; i < 12; ++i) ds.embeddings.push_back(0.25f * static_cast<float>(i) - 1.0f);
  ds.embeddings[5] = 1e-30f;
  ds.task = {0, 1, 1};
  ds.counts = {3, 0, 0, 0, 1, 2,   //
               1, 1, 1, 0, 3, 0,   //
               2, 1, 0, 0, 0, 3};
  ds.concepts = {0, 2, 0, 1, 0, 2};
  ds.splits = {{0, 1}, {1, 2}, {2, 3}};
  detail::finalize(ds);
  return ds;
}

void rewrite_labels(const fs::path& dir, int line, const std::string& text) {
  std::ifstream in(dir / "labels.jsonl");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  lines.at(line) = text;
  std::ofstream out(dir / "labels.jsonl", std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

Errc code_of(const fs::path& manifest) {
  try {
    load_dataset(manifest);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "load_dataset accepted a broken dataset";
  return Errc::Io;
}

}  // namespace

TEST(AnnotatorStats, Examples) {
  const auto [p, h] = annotator_stats(std::vector<int>{0, 3, 2});
  EXPECT_NEAR(p[1], 0.6, 1e-15);
  EXPECT_NEAR(p[2], 0.4, 1e-15);
  EXPECT_NEAR(h, 0.6730, 1e-4);
  EXPECT_NEAR(-(0.6 * std::log(0.6) + 0.4 * std::log(0.4)), h, 1e-14);
  EXPECT_EQ(annotator_stats(std::vector<int>{5, 0, 0}).second, 0.0);
  EXPECT_NEAR(annotator_stats(std::vector<int>{2, 2, 2}).second, std::log(3.0), 1e-14);
}

TEST(AnnotatorStats, Errors) {
  try {
    annotator_stats(std::vector<int>{0, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::AllZero);
  }
  EXPECT_THROW(annotator_stats(std::vector<int>{-1, 2}), Error);
}

TEST(Majority, LowestIndexWinsTies) {
  EXPECT_EQ(majority(std::vector<int>{1, 2, 2}), 1);
  EXPECT_EQ(majority(std::vector<int>{0, 0, 5}), 2);
}

TEST(Container, RoundTripIsExact) {
  const Dataset ds = tiny();
  const auto dir = scratch_dir("rt");
  const auto manifest = write_dataset(ds, dir);
  const Dataset back = load_dataset(manifest);
  EXPECT_EQ(back.n, ds.n);
  EXPECT_EQ(back.d, ds.d);
  EXPECT_EQ(back.A, ds.A);
  EXPECT_EQ(back.embeddings, ds.embeddings);
  EXPECT_EQ(back.task, ds.task);
  EXPECT_EQ(back.concepts, ds.concepts);
  EXPECT_EQ(back.counts, ds.counts);
  EXPECT_EQ(back.entropy, ds.entropy);
  EXPECT_EQ(back.splits, ds.splits);
  EXPECT_TRUE(back.true_entropy.empty());
  fs::remove_all(dir);
}

TEST(Container, TrueEntropySurvives) {
  Dataset ds = tiny();
  ds.true_entropy = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto dir = scratch_dir("te");
  const Dataset back = load_dataset(write_dataset(ds, dir));
  EXPECT_EQ(back.true_entropy, ds.true_entropy);
  EXPECT_DOUBLE_EQ(back.ambiguity(1), 0.35);
  EXPECT_DOUBLE_EQ(back.mean_entropy(0), 0.5 * ds.entropy[1]);
  fs::remove_all(dir);
}

TEST(Container, DerivedEntropyMatchesCounts) {
  const Dataset ds = tiny();
  EXPECT_EQ(ds.entropy[0], 0.0);
  EXPECT_NEAR(ds.entropy[2], std::log(3.0), 1e-14);
  EXPECT_NEAR(ds.p_hat[1 * 3 + 2], 2.0 / 3.0, 1e-15);
}

TEST(Container, TruncatedEmbeddings) {
  const auto dir = scratch_dir("trunc");
  const auto manifest = write_dataset(tiny(), dir);
  fs::resize_file(dir / "embeddings.f32le", 11 * 4);
  EXPECT_EQ(code_of(manifest), Errc::TruncatedEmbeddingFile);
  fs::remove_all(dir);
}

TEST(Container, CountSumMismatchNamesTheExample) {
  const auto dir = scratch_dir("sum");
  const auto manifest = write_dataset(tiny(), dir);
  rewrite_labels(dir, 2, R"({"task":1,"concepts":[0,2],"annotator_counts":[[2,0,0],[0,0,3]]})");
  try {
    load_dataset(manifest);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CountSumMismatch);
    EXPECT_NE(std::string(e.what()).find("example 2"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Container, LabelMustBeMajority) {
  const auto dir = scratch_dir("maj");
  const auto manifest = write_dataset(tiny(), dir);
  rewrite_labels(dir, 0, R"({"task":0,"concepts":[1,2],"annotator_counts":[[3,0,0],[0,1,2]]})");
  EXPECT_EQ(code_of(manifest), Errc::LabelMismatch);
  fs::remove_all(dir);
}

TEST(Container, WrongConceptCount) {
  const auto dir = scratch_dir("dim");
  const auto manifest = write_dataset(tiny(), dir);
  rewrite_labels(dir, 1, R"({"task":1,"concepts":[0],"annotator_counts":[[1,1,1]]})");
  EXPECT_EQ(code_of(manifest), Errc::DimMismatch);
  fs::remove_all(dir);
}

TEST(Container, ManifestErrors) {
  const auto dir = scratch_dir("mf");
  const auto manifest = write_dataset(tiny(), dir);
  {
    std::ofstream(manifest, std::ios::trunc) << "{not json";
  }
  EXPECT_EQ(code_of(manifest), Errc::ManifestParse);
  {
    std::ofstream(manifest, std::ios::trunc)
        << R"({"version":2,"n":3,"d":4,"C":2,"K":3,"J":2,"A":3,"embeddings":"embeddings.f32le","labels":"labels.jsonl"})";
  }
  EXPECT_EQ(code_of(manifest), Errc::VersionMismatch);
  {
    std::ofstream(manifest, std::ios::trunc)
        << R"({"version":1,"n":3,"d":4,"C":2,"K":3,"J":2,"A":3,"embeddings":"embeddings.f32le","labels":"labels.jsonl"})";
  }
  EXPECT_EQ(load_dataset(manifest).splits, default_splits(3));
  EXPECT_EQ(code_of(dir / "missing.json"), Errc::Io);
  fs::remove_all(dir);
}

TEST(Splits, DefaultCoversEverything) {
  for (std::size_t n : {1u, 7u, 100u, 4000u}) {
    const auto s = default_splits(n);
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, n);
  }
}
