#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "densessm/checkpoint.hpp"
#include "densessm/verify.hpp"
#include "test_support.hpp"

namespace densessm {
namespace {

DenseConfig two_deep() {
  DenseConfig d;
  d.depth_m = 2;
  d.projection = ProjectionKind::linear;
  return d;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

class CheckpointFile : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = test::scratch_dir("ckpt");
    model_ = std::make_unique<Model<double>>(micro_config(BlockKind::dense_mamba, two_deep()));
    randomize_parameters(*model_, 11);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::filesystem::path dir_;
  std::unique_ptr<Model<double>> model_;
};

TEST_F(CheckpointFile, RoundTripIsBitExact) {
  save(*model_, path("a.dssm"));
  const Model<double> back = load<double>(path("a.dssm"));
  EXPECT_EQ(back.config(), model_->config());
  ASSERT_EQ(back.registry().size(), model_->registry().size());
  for (std::size_t i = 0; i < back.registry().size(); ++i) {
    EXPECT_TRUE(bit_equal(back.registry().params()[i].var.value(), model_->registry().params()[i].var.value()))
        << back.registry().params()[i].name;
  }
  save(back, path("b.dssm"));
  EXPECT_EQ(read_bytes(path("a.dssm")), read_bytes(path("b.dssm")));
}

TEST_F(CheckpointFile, ForwardAfterLoadMatches) {
  save(*model_, path("a.dssm"));
  const Model<double> back = load<double>(path("a.dssm"));
  const Tokens tok = random_tokens(2, 12, 5);
  NoGradGuard ng;
  EXPECT_EQ(max_abs_diff(back.forward_train(tok).value(), model_->forward_train(tok).value()), 0.0);
}

TEST_F(CheckpointFile, PeekReadsConfigOnly) {
  save(*model_, path("a.dssm"));
  EXPECT_EQ(peek_checkpoint_config(path("a.dssm")), model_->config());
  EXPECT_THROW(read_checkpoint<double>(path("missing.dssm")), ArgumentError);
}

TEST_F(CheckpointFile, WrongDtypeIsRejected) {
  save(*model_, path("a.dssm"));
  EXPECT_THROW(read_checkpoint<float>(path("a.dssm")), FormatError);
}

TEST(CheckpointCodec, MetaAndExtraTensorsSurvive) {
  Checkpoint<double> c;
  c.config = micro_config(BlockKind::retnet, DenseConfig{});
  c.meta = {{"step", 12}, {"note", "x"}};
  c.tensors["a"] = test::randn({3, 2}, 1);
  c.tensors["opt.m.a"] = test::randn({3, 2}, 2);
  c.tensors["scalar"] = Tensor<double>::full({}, 4.5);
  const auto bytes = encode_checkpoint(c);
  const auto d = decode_checkpoint<double>(bytes);
  EXPECT_EQ(d.meta, c.meta);
  EXPECT_EQ(d.config, c.config);
  ASSERT_EQ(d.tensors.size(), 3u);
  for (const auto& [k, v] : c.tensors) EXPECT_TRUE(bit_equal(v, d.tensors.at(k))) << k;
  EXPECT_EQ(encode_checkpoint(d), bytes);
}

class CorruptCheckpoint : public ::testing::Test {
 protected:
  void SetUp() override {
    Model<double> m(micro_config(BlockKind::dense_retnet, two_deep()));
    bytes_ = encode_checkpoint(snapshot(m));
  }
  std::size_t offset_of_failure(std::vector<std::uint8_t> b) {
    try {
      decode_checkpoint<double>(b);
    } catch (const FormatError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "corrupt checkpoint decoded";
    return 0;
  }
  std::vector<std::uint8_t> bytes_;
};

TEST_F(CorruptCheckpoint, EveryPayloadBitFlipIsDetected) {
  // Flip one bit in a spread of positions past the header.
  for (std::size_t pos = 8; pos < bytes_.size(); pos += bytes_.size() / 97 + 1) {
    auto b = bytes_;
    b[pos] ^= 0x10;
    EXPECT_THROW(decode_checkpoint<double>(b), FormatError) << "byte " << pos;
  }
}

TEST_F(CorruptCheckpoint, BadMagicAtOffsetZero) {
  auto b = bytes_;
  b[0] = 'X';
  EXPECT_EQ(offset_of_failure(b), 0u);
}

TEST_F(CorruptCheckpoint, UnsupportedVersionPointsAtVersionField) {
  auto b = bytes_;
  b[4] = 9;
  EXPECT_EQ(offset_of_failure(b), 4u);
}

TEST_F(CorruptCheckpoint, TruncationReportsAnOffsetInsideTheFile) {
  for (std::size_t keep : {std::size_t{3}, std::size_t{10}, bytes_.size() / 2, bytes_.size() - 1}) {
    std::vector<std::uint8_t> b(bytes_.begin(), bytes_.begin() + std::ptrdiff_t(keep));
    EXPECT_LE(offset_of_failure(b), keep);
  }
}

TEST_F(CorruptCheckpoint, TrailingGarbage) {
  auto b = bytes_;
  b.push_back(0);
  EXPECT_THROW(decode_checkpoint<double>(b), FormatError);
}

TEST(Restore, RejectsMismatches) {
  Model<double> m(micro_config(BlockKind::dense_retnet, two_deep()));
  Checkpoint<double> c = snapshot(m);
  {
    Model<double> other(micro_config(BlockKind::retnet, DenseConfig{}));
    EXPECT_THROW(restore(other, c), ConfigError);
  }
  {
    auto bad = c;
    bad.tensors.erase(bad.tensors.begin());
    EXPECT_THROW(restore(m, bad), ConfigError);
  }
  {
    auto bad = c;
    bad.tensors.begin()->second = Tensor<double>({1});
    EXPECT_THROW(restore(m, bad), ConfigError);
  }
  {
    auto bad = c;
    bad.tensors["stray"] = Tensor<double>({1});
    EXPECT_THROW(restore(m, bad), ConfigError);
    bad.tensors.erase("stray");
    bad.tensors["opt.m.embed"] = Tensor<double>({1});
    EXPECT_NO_THROW(restore(m, bad));
  }
}

}  // namespace
}  // namespace densessm
