#include "densessm/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

namespace densessm {

std::vector<std::int32_t> ByteTokenizer::encode(std::string_view text) const {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return out;
}

std::string ByteTokenizer::decode(std::span<const std::int32_t> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (std::int32_t t : tokens) {
    if (t == bos) continue;
    if (t < 0 || t > bos) throw IndexError("token " + std::to_string(t) + " is outside the byte vocabulary");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

std::span<const std::int32_t> Corpus::split(Split s) const {
  std::span<const std::int32_t> all(tokens);
  return s == Split::train ? all.first(train_end) : all.subspan(train_end);
}

namespace {

std::uint32_t crc_bytes(const void* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* b = static_cast<const Bytef*>(p);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, b, chunk);
    b += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t token_hash(const std::vector<std::int32_t>& tokens) {
  std::vector<std::uint8_t> le;
  le.reserve(tokens.size() * 4);
  for (std::int32_t t : tokens) {
    const auto u = static_cast<std::uint32_t>(t);
    for (int i = 0; i < 4; ++i) le.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  return crc_bytes(le.data(), le.size());
}

}  // namespace

Corpus corpus_from_documents(const std::vector<std::string>& documents, double val_frac) {
  if (!(val_frac >= 0.0 && val_frac < 1.0)) throw ArgumentError("validation fraction must lie in [0, 1)");
  Corpus c;
  c.val_frac = val_frac;
  const ByteTokenizer tok;
  for (const auto& doc : documents) {
    if (doc.empty()) continue;
    c.tokens.push_back(ByteTokenizer::bos);
    const auto ids = tok.encode(doc);
    c.tokens.insert(c.tokens.end(), ids.begin(), ids.end());
  }
  if (c.tokens.empty()) throw ArgumentError("corpus input is empty");
  const auto n = c.tokens.size();
  c.train_end = n - static_cast<std::size_t>(static_cast<double>(n) * val_frac);
  c.hash = token_hash(c.tokens);
  return c;
}

Corpus ingest(const std::vector<std::string>& paths, double val_frac) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& p : paths) {
    std::error_code ec;
    if (fs::is_directory(p, ec)) {
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path().string());
      }
    } else if (fs::is_regular_file(p, ec)) {
      files.push_back(p);
    } else {
      throw ArgumentError("cannot read corpus input '" + p + "'");
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> docs;
  std::vector<SourceFile> meta;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw ArgumentError("cannot open corpus file '" + f + "'");
    std::string body((std::istreambuf_iterator<char>(in)), {});
    meta.push_back({f, body.size(), crc_bytes(body.data(), body.size())});
    docs.push_back(std::move(body));
  }
  Corpus c = corpus_from_documents(docs, val_frac);
  c.files = std::move(meta);
  return c;
}

Batch batch_at(const BatchSampler& sampler, const Corpus& corpus, Split split, std::uint64_t cursor) {
  const auto data = corpus.split(split);
  const std::size_t t = sampler.seq_len;
  if (t == 0 || sampler.batch_size == 0) throw ArgumentError("batch needs positive seq_len and batch_size");
  if (data.size() < t + 1) {
    throw ArgumentError("split has " + std::to_string(data.size()) + " tokens, a window needs " + std::to_string(t + 1));
  }
  std::seed_seq seq{static_cast<std::uint32_t>(sampler.seed), static_cast<std::uint32_t>(sampler.seed >> 32),
                    corpus.hash,
                    static_cast<std::uint32_t>(cursor),
                    static_cast<std::uint32_t>(cursor >> 32),
                    static_cast<std::uint32_t>(split)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> offset(0, data.size() - t - 1);

  Batch b;
  b.inputs = Tokens(sampler.batch_size, t, std::vector<std::int32_t>(sampler.batch_size * t));
  b.targets = b.inputs;
  for (std::size_t i = 0; i < sampler.batch_size; ++i) {
    const std::size_t o = offset(rng);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(o), t, b.inputs.ids.begin() + static_cast<std::ptrdiff_t>(i * t));
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(o + 1), t,
                b.targets.ids.begin() + static_cast<std::ptrdiff_t>(i * t));
  }
  return b;
}

Batch next_batch(BatchSampler& sampler, const Corpus& corpus, Split split) {
  Batch b = batch_at(sampler, corpus, split, sampler.cursor);
  ++sampler.cursor;
  return b;
}

namespace {

struct Lexicon {
  std::vector<std::string> common;
  std::vector<std::vector<std::string>> topics;
  std::vector<std::string> names;
  std::vector<std::string> verbs;
  std::vector<std::string> joiners;
};

std::string make_word(std::mt19937_64& rng, int domain, int min_syl, int max_syl) {
  static const std::string onsets[2] = {"bcdfghklmnprstvw", "dgjklmnrstvxz"};
  static const std::string nuclei[2] = {"aeiou", "aeiouy"};
  static const std::vector<std::string> codas[2] = {{"", "", "n", "r", "s", "t", "l"}, {"", "k", "sh", "m", "th", ""}};
  const std::string& on = onsets[domain & 1];
  const std::string& nu = nuclei[domain & 1];
  const auto& co = codas[domain & 1];
  std::uniform_int_distribution<int> syl(min_syl, max_syl);
  std::string w;
  const int n = syl(rng);
  for (int i = 0; i < n; ++i) {
    w += on[rng() % on.size()];
    w += nu[rng() % nu.size()];
    if (i + 1 == n || rng() % 3 == 0) w += co[rng() % co.size()];
  }
  return w;
}

Lexicon make_lexicon(int domain) {
  std::mt19937_64 rng(0x5eed0000ULL + static_cast<std::uint64_t>(domain));
  Lexicon lex;
  for (int i = 0; i < 400; ++i) lex.common.push_back(make_word(rng, domain, 1, 2));
  for (int t = 0; t < 32; ++t) {
    std::vector<std::string> words;
    for (int i = 0; i < 24; ++i) words.push_back(make_word(rng, domain, 2, 3));
    lex.topics.push_back(std::move(words));
  }
  for (int i = 0; i < 160; ++i) {
    std::string n = make_word(rng, domain, 2, 3);
    n[0] = static_cast<char>(n[0] - 'a' + 'A');
    lex.names.push_back(std::move(n));
  }
  for (int i = 0; i < 60; ++i) lex.verbs.push_back(make_word(rng, domain, 1, 2) + (domain == 0 ? "ed" : "esh"));
  lex.joiners = domain == 0 ? std::vector<std::string>{"and", "but", "so", "while", "because", "then"}
                            : std::vector<std::string>{"ka", "ysh", "do", "mer", "zu"};
  return lex;
}

}  // namespace

std::vector<std::string> synthetic_documents(std::size_t total_bytes, std::uint64_t seed, int domain) {
  const Lexicon lex = make_lexicon(domain);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(domain));
  // Zipf-like rank distribution over common words.
  std::vector<double> zipf(lex.common.size());
  for (std::size_t i = 0; i < zipf.size(); ++i) zipf[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> common(zipf.begin(), zipf.end());
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<std::string> docs;
  std::size_t produced = 0;
  while (produced < total_bytes) {
    const auto& topic = lex.topics[rng() % lex.topics.size()];
    std::vector<std::string> cast;
    for (int i = 0; i < 3; ++i) cast.push_back(lex.names[rng() % lex.names.size()]);
    const std::size_t target = 600 + rng() % 2400;
    std::string doc;
    doc += "= " + cast[0] + " " + topic[rng() % topic.size()] + " =\n\n";
    while (doc.size() < target) {
      std::string s = cast[rng() % cast.size()] + " " + lex.verbs[rng() % lex.verbs.size()];
      const int clauses = 1 + static_cast<int>(rng() % 3);
      for (int c = 0; c < clauses; ++c) {
        if (c > 0) s += " " + lex.joiners[rng() % lex.joiners.size()];
        const int words = 2 + static_cast<int>(rng() % 4);
        for (int w = 0; w < words; ++w) {
          s += " ";
          s += coin(rng) < 0.35 ? topic[rng() % topic.size()] : lex.common[common(rng)];
        }
        if (coin(rng) < 0.15) s += " (" + cast[rng() % cast.size()] + " " + std::to_string(rng() % 100) + ")";
      }
      doc += s + (coin(rng) < 0.1 ? "?" : ".");
      doc += coin(rng) < 0.2 ? "\n\n" : " ";
    }
    doc += "\n";
    produced += doc.size() + 1;
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace densessm
