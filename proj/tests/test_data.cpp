#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "densessm/data.hpp"
#include "test_support.hpp"

namespace densessm {
namespace {

void write_file(const std::filesystem::path& p, const std::string& body) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << body;
}

TEST(Tokenizer, Utf8RoundTrip) {
  const ByteTokenizer tok;
  const std::string text = "na\xC3\xAFve caf\xC3\xA9 \xE2\x88\x91 \xF0\x9F\x98\x80";
  const auto ids = tok.encode(text);
  EXPECT_EQ(ids.size(), text.size());
  EXPECT_EQ(ids[2], 0xC3);
  EXPECT_EQ(tok.decode(ids), text);
}

TEST(Tokenizer, ArbitraryBinaryRoundTrip) {
  const ByteTokenizer tok;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::string bytes(rng() % 500, '\0');
    for (auto& c : bytes) c = static_cast<char>(rng() & 0xFF);
    const auto ids = tok.encode(bytes);
    for (auto id : ids) ASSERT_LT(id, ByteTokenizer::bos);
    EXPECT_EQ(tok.decode(ids), bytes);
  }
}

TEST(Tokenizer, DecodeDropsBosAndRejectsOutOfRange) {
  const ByteTokenizer tok;
  const std::vector<std::int32_t> with_bos{256, 104, 105, 256};
  EXPECT_EQ(tok.decode(with_bos), "hi");
  const std::vector<std::int32_t> bad{65, 257};
  EXPECT_THROW(tok.decode(bad), IndexError);
  const std::vector<std::int32_t> neg{-1};
  EXPECT_THROW(tok.decode(neg), IndexError);
}

TEST(Corpus, DocumentsAreBosSeparated) {
  const Corpus c = corpus_from_documents({"x", "y"}, 0.0);
  EXPECT_EQ(c.tokens, (std::vector<std::int32_t>{256, 'x', 256, 'y'}));
  EXPECT_EQ(c.train_end, 4u);
  EXPECT_TRUE(c.split(Split::val).empty());
}

TEST(Corpus, SplitsAreContiguousAndDisjoint) {
  const Corpus c = corpus_from_documents(synthetic_documents(20000, 1), 0.02);
  const auto tr = c.split(Split::train), va = c.split(Split::val);
  EXPECT_EQ(tr.size() + va.size(), c.tokens.size());
  EXPECT_EQ(tr.data() + tr.size(), va.data());
  EXPECT_NEAR(double(va.size()) / double(c.tokens.size()), 0.02, 0.001);
}

TEST(Corpus, HashIsDeterministicAndContentSensitive) {
  EXPECT_EQ(corpus_from_documents({"abc", "de"}).hash, corpus_from_documents({"abc", "de"}).hash);
  EXPECT_NE(corpus_from_documents({"abc", "de"}).hash, corpus_from_documents({"abc", "df"}).hash);
  EXPECT_NE(corpus_from_documents({"ab", "cde"}).hash, corpus_from_documents({"abc", "de"}).hash);
}

TEST(Corpus, EmptyInputIsArgumentError) {
  EXPECT_THROW(corpus_from_documents({}), ArgumentError);
  EXPECT_THROW(corpus_from_documents({"a"}, 1.0), ArgumentError);
  EXPECT_THROW(ingest({}), ArgumentError);
}

TEST(Ingest, WalksDirectoriesInSortedOrder) {
  const auto dir = test::scratch_dir("ingest");
  write_file(dir / "b.txt", "B");
  write_file(dir / "a" / "z.txt", "Z");
  write_file(dir / "a" / "y.txt", "Y");
  const Corpus c = ingest({dir.string()}, 0.0);
  EXPECT_EQ(c.tokens, (std::vector<std::int32_t>{256, 'Y', 256, 'Z', 256, 'B'}));
  ASSERT_EQ(c.files.size(), 3u);
  EXPECT_EQ(c.files[0].bytes, 1u);
  EXPECT_NE(c.files[0].crc, c.files[1].crc);
  EXPECT_EQ(ingest({dir.string()}, 0.0).hash, c.hash);
  EXPECT_THROW(ingest({(dir / "missing").string()}), ArgumentError);
}

TEST(Batches, WindowShiftsByOne) {
  Corpus c = corpus_from_documents({"abc"}, 0.0);
  BatchSampler s{3, 2, 0, 0};
  const Batch b = next_batch(s, c, Split::train);
  EXPECT_EQ(b.inputs.ids, (std::vector<std::int32_t>{256, 'a', 'b', 256, 'a', 'b'}));
  EXPECT_EQ(b.targets.ids, (std::vector<std::int32_t>{'a', 'b', 'c', 'a', 'b', 'c'}));
  EXPECT_EQ(s.cursor, 1u);
  s.seq_len = 4;
  EXPECT_THROW(next_batch(s, c, Split::train), ArgumentError);
}

TEST(Batches, SameSeedSameSequence) {
  const Corpus c = corpus_from_documents(synthetic_documents(50000, 2), 0.05);
  BatchSampler a{16, 4, 9, 0}, b{16, 4, 9, 0}, other{16, 4, 10, 0};
  bool differs = false;
  for (int i = 0; i < 20; ++i) {
    const Batch x = next_batch(a, c, Split::train);
    EXPECT_EQ(x.inputs.ids, next_batch(b, c, Split::train).inputs.ids);
    differs = differs || x.inputs.ids != next_batch(other, c, Split::train).inputs.ids;
  }
  EXPECT_TRUE(differs);
  // Random access agrees with streaming.
  EXPECT_EQ(batch_at(a, c, Split::train, 7).inputs.ids, batch_at(b, c, Split::train, 7).inputs.ids);
}

TEST(Batches, TenThousandWindowsStayInsideTheirSplit) {
  const Corpus c = corpus_from_documents(synthetic_documents(30000, 3), 0.1);
  const auto train = c.split(Split::train);
  const auto val = c.split(Split::val);
  const std::size_t t = 24;
  for (Split sp : {Split::train, Split::val}) {
    const auto data = sp == Split::train ? train : val;
    BatchSampler s{t, 100, 5, 0};
    for (int step = 0; step < 50; ++step) {
      const Batch b = next_batch(s, c, sp);
      for (std::size_t i = 0; i < s.batch_size; ++i) {
        const std::int32_t* in = b.inputs.ids.data() + i * t;
        const std::int32_t* tg = b.targets.ids.data() + i * t;
        ASSERT_TRUE(std::equal(in + 1, in + t, tg));
        // Locate the window by content so the check does not trust the sampler's offsets.
        const auto* p = std::search(data.data(), data.data() + data.size(), in, in + t);
        ASSERT_LT(std::size_t(p - data.data()) + t, data.size());
        ASSERT_EQ(p[t], tg[t - 1]);
      }
    }
  }
}

TEST(Synthetic, DeterministicAndSized) {
  const auto a = synthetic_documents(10000, 4);
  EXPECT_EQ(a, synthetic_documents(10000, 4));
  EXPECT_NE(a, synthetic_documents(10000, 5));
  std::size_t bytes = 0;
  for (const auto& d : a) bytes += d.size();
  EXPECT_GE(bytes, 10000u);
  EXPECT_LT(bytes, 12000u);
  const auto other = synthetic_documents(10000, 4, 1);
  EXPECT_NE(a.front().substr(0, 40), other.front().substr(0, 40));
}

}  // namespace
}  // namespace densessm
