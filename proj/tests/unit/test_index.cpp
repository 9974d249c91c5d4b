#include "protosim/backbone.hpp"
#include "protosim/index.hpp"
#include "protosim/ssl.hpp"
#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>

namespace protosim {
namespace {

using testing::random_records;
using testing::TempDir;

ImageRecord record(const std::string& id, const std::string& ds, int cls, std::vector<int> patches) {
  ImageRecord r;
  r.image_id = id;
  r.dataset_id = ds;
  r.class_prototype = cls;
  r.patch_prototypes = std::move(patches);
  std::map<int, float> seen;
  for (int p : r.tokens()) seen[p] = 1.0f;
  for (const auto& [p, a] : seen) r.top_affinities.emplace_back(p, a);
  return r;
}

// Brute-force postings straight from raw records.
std::vector<std::tuple<int, std::string, std::string>> brute_postings(const std::vector<ImageRecord>& records,
                                                                      int p, const std::string& ds, TokenKind kind) {
  std::vector<std::tuple<int, std::string, std::string>> out;
  for (const auto& r : records) {
    if (!ds.empty() && r.dataset_id != ds) continue;
    int count = 0;
    const auto tokens = r.tokens();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const bool is_class = i == 0;
      if (kind == TokenKind::class_token && !is_class) continue;
      if (kind == TokenKind::patch && is_class) continue;
      if (tokens[i] == p) ++count;
    }
    if (count > 0) out.emplace_back(-count, r.image_id, r.dataset_id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TEST(Index, CountingExample) {
  const auto idx = build_index({record("a.png", "A", 3, std::vector<int>(16, 7))}, 8, 16);
  EXPECT_EQ(idx.totals(3).total(), 1);
  EXPECT_EQ(idx.totals(3).class_count, 1);
  EXPECT_EQ(idx.totals(7).patch_count, 16);
  EXPECT_EQ(idx.totals(0).total(), 0);
}

TEST(Index, EmptyIndex) {
  const auto idx = build_index({}, 4, 4);
  EXPECT_EQ(idx.image_count(), 0u);
  for (int p = 0; p < 4; ++p) EXPECT_EQ(idx.totals(p).total(), 0);
  EXPECT_TRUE(idx.query(1).empty());
}

TEST(Index, PostingCountMatchesRawAssignments) {
  const auto idx = build_index({record("a.png", "A", 1, {5, 0, 5, 2, 5, 3})}, 8, 6);
  const auto q = idx.query(5);
  ASSERT_EQ(q.size(), 1u);
  EXPECT_EQ(q[0].count, 3);
  EXPECT_EQ(q[0].positions, (std::vector<int>{1, 3, 5}));
}

TEST(Index, FiltersAndBruteForceOrder) {
  Rng rng(3);
  const auto records = random_records(40, 6, 9, {"A", "B"}, rng);
  const auto idx = build_index(records, 6, 9);
  for (int p = 0; p < 6; ++p)
    for (const std::string ds : {"", "A", "B"})
      for (TokenKind kind : {TokenKind::any, TokenKind::class_token, TokenKind::patch}) {
        const auto got = idx.query(p, ds, kind);
        const auto want = brute_postings(records, p, ds, kind);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
          EXPECT_EQ(got[i].count, -std::get<0>(want[i]));
          EXPECT_EQ(got[i].image_id, std::get<1>(want[i]));
          EXPECT_EQ(got[i].dataset_id, std::get<2>(want[i]));
          if (kind == TokenKind::class_token) EXPECT_EQ(got[i].positions, std::vector<int>{0});
        }
      }
}

TEST(Index, DatasetFilterOnForeignPrototypeIsEmpty) {
  const auto idx = build_index({record("a", "A", 0, {0, 0}), record("b", "B", 1, {1, 1})}, 2, 2);
  EXPECT_TRUE(idx.query(1, "A").empty());
  EXPECT_EQ(idx.query(1, "B").size(), 1u);
}

TEST(Index, AffinityRanking) {
  ImageRecord lo = record("lo", "A", 0, {1, 1});
  ImageRecord hi = record("hi", "A", 0, {2, 1});
  lo.top_affinities = {{1, 0.9f}, {0, 0.1f}};
  hi.top_affinities = {{2, 0.5f}, {0, 0.3f}, {1, 0.2f}};
  const auto idx = build_index({lo, hi}, 3, 2);
  EXPECT_EQ(idx.query(0, "", TokenKind::any, RankBy::affinity).front().image_id, "hi");
  EXPECT_EQ(idx.query(1, "", TokenKind::any, RankBy::count).front().image_id, "lo");
}

TEST(Index, ConservationLaws) {
  Rng rng(4);
  const auto records = random_records(30, 5, 7, {"A", "B", "C"}, rng);
  const auto idx = build_index(records, 5, 7);
  long long patches = 0, classes = 0;
  for (int p = 0; p < 5; ++p) {
    patches += idx.totals(p).patch_count;
    classes += idx.totals(p).class_count;
  }
  EXPECT_EQ(patches, 90 * 7);
  EXPECT_EQ(classes, 90);
}

TEST(Index, RejectsBadRecords) {
  PrototypeIndex idx(4, 2);
  EXPECT_THROW(idx.add({record("a", "A", 9, {0, 0})}), ContractError);
  EXPECT_THROW(idx.add({record("a", "A", 0, {0})}), ContractError);
  idx.add({record("a", "A", 0, {0, 0})});
  EXPECT_THROW(idx.add({record("a", "A", 1, {1, 1})}), ContractError);
  EXPECT_THROW(idx.query(4), ContractError);
  EXPECT_THROW(idx.query(-1), ContractError);
}

TEST(Index, SaveLoadRoundTripAndCacheRebuild) {
  TempDir dir("idx");
  Rng rng(5);
  auto idx = build_index(random_records(25, 6, 4, {"A", "B"}, rng), 6, 4);
  idx.set_checkpoint_hash("0123456789abcdef");
  save_index(idx, dir / "i");
  EXPECT_TRUE(std::filesystem::exists(dir / "i" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "i" / "records" / "A.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "i" / "postings.bin"));
  const auto back = load_index(dir / "i");
  EXPECT_EQ(back.checkpoint_hash(), idx.checkpoint_hash());
  for (int p = 0; p < 6; ++p) EXPECT_EQ(back.query(p), idx.query(p));
  std::filesystem::remove(dir / "i" / "postings.bin");
  const auto rebuilt = load_index(dir / "i");
  for (int p = 0; p < 6; ++p) EXPECT_EQ(rebuilt.query(p, "B"), idx.query(p, "B"));
  testing::write_text(dir / "i" / "postings.bin", "PSPOST01garbage");
  const auto repaired = load_index(dir / "i");
  EXPECT_EQ(repaired.totals(2), idx.totals(2));
  EXPECT_THROW(load_index(dir / "missing"), Error);
}

TEST(Index, MergeEqualsConcatenation) {
  Rng rng(6);
  const auto a = random_records(10, 5, 3, {"A"}, rng);
  const auto b = random_records(10, 5, 3, {"B"}, rng);
  std::vector<ImageRecord> all = a;
  all.insert(all.end(), b.begin(), b.end());
  const auto merged = merge_indexes(build_index(a, 5, 3), build_index(b, 5, 3));
  const auto whole = build_index(all, 5, 3);
  for (int p = 0; p < 5; ++p) EXPECT_EQ(merged.query(p), whole.query(p));
  EXPECT_THROW(merge_indexes(build_index(a, 5, 3), build_index(a, 5, 3)), ContractError);
  EXPECT_THROW(merge_indexes(build_index(a, 5, 3), build_index({}, 6, 3)), ContractError);
}

TEST(Index, RecordJsonRoundTrip) {
  const ImageRecord r = record("x.png", "A", 2, {1, 2, 3});
  EXPECT_EQ(ImageRecord::from_json(r.to_json()), r);
}

TEST(Index, TokenKindAndRankParsing) {
  EXPECT_EQ(parse_token_kind("class"), TokenKind::class_token);
  EXPECT_EQ(parse_token_kind(to_string(TokenKind::patch)), TokenKind::patch);
  EXPECT_THROW(parse_token_kind("pixel"), ContractError);
  EXPECT_EQ(parse_rank("affinity"), RankBy::affinity);
  EXPECT_THROW(parse_rank("vibes"), ContractError);
}

TEST(Index, AssignImageIsDeterministicArgmax) {
  TrainConfig c;
  c.prototypes = 8;
  c.head_hidden_dim = c.head_bottleneck_dim = c.head_output_dim = 8;
  Trainer trainer(c, load_pretrained("toy-vit-s8-d16-l1-h2,seed=1"));
  Image img(32, 32, 3);
  Rng rng(2);
  for (auto& v : img.pixels) v = static_cast<float>(uniform_open(rng));
  const ImageRecord r = assign_image(trainer.teacher(), img, "x", "A");
  EXPECT_EQ(r.patch_prototypes.size(), 16u);
  EXPECT_EQ(r, assign_image(trainer.teacher(), img, "x", "A"));
  const Matrix logits = image_logits(trainer.teacher(), img);
  const auto tokens = r.tokens();
  for (Eigen::Index n = 0; n < logits.cols(); ++n) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < logits.rows(); ++k)
      if (logits(k, n) > logits(best, n)) best = k;
    EXPECT_EQ(tokens[static_cast<std::size_t>(n)], best);
  }
}

TEST(Index, IndexDatasetFromDisk) {
  TempDir dir("ids");
  std::filesystem::create_directories(dir / "imgs");
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    Image img(32, 32, 3);
    for (auto& v : img.pixels) v = static_cast<float>(uniform_open(rng));
    save_png(img, dir / "imgs" / ("im" + std::to_string(100 + i) + ".png"));
  }
  TrainConfig c;
  c.prototypes = 8;
  c.head_hidden_dim = c.head_bottleneck_dim = c.head_output_dim = 8;
  Trainer trainer(c, load_pretrained("toy-vit-s8-d16-l1-h2,seed=1"));
  const Checkpoint ck = trainer.checkpoint(0);
  const DatasetDescriptor d{"A", "A", dir / "imgs", {}};
  const auto r1 = index_dataset(ck, d);
  IndexOptions two;
  two.workers = 2;
  const auto r2 = index_dataset(ck, d, two);
  ASSERT_EQ(r1.size(), 20u);
  EXPECT_EQ(r1, r2);
  EXPECT_TRUE(std::is_sorted(r1.begin(), r1.end(),
                             [](const auto& a, const auto& b) { return a.image_id < b.image_id; }));
  for (const auto& r : r1) EXPECT_EQ(r.patch_prototypes.size(), 16u);
}

}  // namespace
}  // namespace protosim
