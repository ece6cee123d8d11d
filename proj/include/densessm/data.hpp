#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "densessm/tensor.hpp"

namespace densessm {

/// Bytes 0-255 map to themselves; 256 is BOS and never comes out of encode().
class ByteTokenizer {
 public:
  static constexpr std::size_t vocab_size = 257;
  static constexpr std::int32_t bos = 256;

  std::vector<std::int32_t> encode(std::string_view text) const;
  /// BOS tokens are dropped; anything outside [0, 256] is an IndexError.
  std::string decode(std::span<const std::int32_t> tokens) const;
};

enum class Split { train, val };

struct SourceFile {
  std::string path;
  std::uint64_t bytes = 0;
  std::uint32_t crc = 0;
};

struct Corpus {
  std::vector<std::int32_t> tokens;
  std::size_t train_end = 0;  // tokens [0, train_end) train, [train_end, n) val
  double val_frac = 0.02;
  std::vector<SourceFile> files;
  std::uint32_t hash = 0;  // CRC-32 of the token stream

  std::span<const std::int32_t> split(Split s) const;
};

/// BOS before every document, then a contiguous train/val split.
Corpus corpus_from_documents(const std::vector<std::string>& documents, double val_frac = 0.02);

/// Each regular file is one document. Directories are walked recursively;
/// files are taken in sorted path order.
Corpus ingest(const std::vector<std::string>& paths, double val_frac = 0.02);

struct Batch {
  Tokens inputs;
  Tokens targets;  // inputs shifted left by one
};

struct BatchSampler {
  std::size_t seq_len = 256;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::uint64_t cursor = 0;
};

/// The batch at `cursor`, a pure function of (corpus hash, seed, cursor, split).
Batch batch_at(const BatchSampler& sampler, const Corpus& corpus, Split split, std::uint64_t cursor);

/// batch_at(sampler.cursor), then advances the cursor.
Batch next_batch(BatchSampler& sampler, const Corpus& corpus, Split split);

/// Seeded pseudo-English documents with topic words, names repeated within a
/// document and bracketed asides. `domain` switches the word inventory so a
/// second domain can serve as held-out text.
std::vector<std::string> synthetic_documents(std::size_t total_bytes, std::uint64_t seed, int domain = 0);

}  // namespace densessm
