#pragma once

// Binary codes: thresholding of sigmoid fusion features, a packed code store,
// exact Hamming ranking by linear scan, and the codes file format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sketch/autodiff.hpp"
#include "sketch/error.hpp"

namespace sketch {

inline constexpr int kMaxCodeBits = 256;

inline std::size_t words_for(int bits) { return static_cast<std::size_t>((bits + 63) / 64); }

/// D-bit code; bit j lives in word j / 64 at position j % 64. Bits at or
/// beyond D are zero.
struct HashCode {
  int bits = 0;
  std::vector<std::uint64_t> words;
  std::int64_t sample_id = -1;
  int class_id = -1;

  bool bit(int j) const { return (words[static_cast<std::size_t>(j) / 64] >> (j % 64)) & 1U; }

  /// Code as 0/1 reals, the form the quantization loss consumes.
  std::vector<double> as_reals() const {
    std::vector<double> out(static_cast<std::size_t>(bits));
    for (int j = 0; j < bits; ++j) out[static_cast<std::size_t>(j)] = bit(j) ? 1.0 : 0.0;
    return out;
  }

  bool operator==(const HashCode&) const = default;
};

/// bit j = 1 iff f_j >= 0.5. Features must lie in [0, 1].
inline HashCode quantize(std::span<const double> feature, std::int64_t sample_id = -1, int class_id = -1) {
  if (feature.empty() || feature.size() > static_cast<std::size_t>(kMaxCodeBits))
    fail(ErrorKind::LengthMismatch, "code length must be in [1, " + std::to_string(kMaxCodeBits) + "]");
  HashCode c;
  c.bits = static_cast<int>(feature.size());
  c.words.assign(words_for(c.bits), 0);
  c.sample_id = sample_id;
  c.class_id = class_id;
  for (std::size_t j = 0; j < feature.size(); ++j) {
    const double f = feature[j];
    if (!(f >= 0.0 && f <= 1.0)) fail(ErrorKind::OutOfRangeFeature, "component " + std::to_string(j) + " = " + std::to_string(f));
    if (f >= 0.5) c.words[j / 64] |= std::uint64_t{1} << (j % 64);
  }
  return c;
}

inline int hamming_distance(const HashCode& a, const HashCode& b) {
  if (a.bits != b.bits) fail(ErrorKind::LengthMismatch, std::to_string(a.bits) + " vs " + std::to_string(b.bits) + " bits");
  int d = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) d += std::popcount(a.words[w] ^ b.words[w]);
  return d;
}

struct RetrievalHit {
  std::int64_t sample_id = -1;
  int class_id = -1;
  int distance = 0;
  std::size_t index = 0;  // insertion position in the store
};

/// Append-only packed store; codes are laid out contiguously for scanning.
class CodeStore {
 public:
  explicit CodeStore(int bits = 0) : bits_(bits), words_per_code_(words_for(bits)) {
    if (bits < 0 || bits > kMaxCodeBits) fail(ErrorKind::LengthMismatch, "bad code length " + std::to_string(bits));
  }

  int bits() const { return bits_; }
  std::size_t size() const { return sample_ids_.size(); }
  bool empty() const { return sample_ids_.empty(); }
  std::size_t words_per_code() const { return words_per_code_; }

  void add(const HashCode& code) {
    if (code.bits != bits_) fail(ErrorKind::LengthMismatch, "store holds " + std::to_string(bits_) + "-bit codes");
    if (!ids_.insert(code.sample_id).second)
      fail(ErrorKind::MalformedRecord, "duplicate sample id " + std::to_string(code.sample_id));
    words_.insert(words_.end(), code.words.begin(), code.words.end());
    sample_ids_.push_back(code.sample_id);
    labels_.push_back(code.class_id);
  }

  HashCode code(std::size_t i) const {
    HashCode c;
    c.bits = bits_;
    c.words.assign(words_.begin() + static_cast<std::ptrdiff_t>(i * words_per_code_),
                   words_.begin() + static_cast<std::ptrdiff_t>((i + 1) * words_per_code_));
    c.sample_id = sample_ids_[i];
    c.class_id = labels_[i];
    return c;
  }

  std::span<const std::uint64_t> words() const { return words_; }
  std::span<const std::int64_t> sample_ids() const { return sample_ids_; }
  std::span<const int> labels() const { return labels_; }

  /// Distance from `query` to every stored code, in insertion order.
  void distances(const HashCode& query, std::vector<int>& out) const {
    if (query.bits != bits_) fail(ErrorKind::LengthMismatch, std::to_string(query.bits) + " vs " + std::to_string(bits_) + " bits");
    out.resize(size());
    const std::uint64_t* w = words_.data();
    if (words_per_code_ == 1) {
      const std::uint64_t q = query.words[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::popcount(w[i] ^ q);
      return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      int d = 0;
      for (std::size_t k = 0; k < words_per_code_; ++k) d += std::popcount(w[i * words_per_code_ + k] ^ query.words[k]);
      out[i] = d;
    }
  }

  bool operator==(const CodeStore& o) const {
    return bits_ == o.bits_ && words_ == o.words_ && sample_ids_ == o.sample_ids_ && labels_ == o.labels_;
  }

 private:
  int bits_;
  std::size_t words_per_code_;
  std::vector<std::uint64_t> words_;
  std::vector<std::int64_t> sample_ids_;
  std::vector<int> labels_;
  std::set<std::int64_t> ids_;
};

/// Exact ranking by ascending Hamming distance; equal distances keep store
/// insertion order. `k` truncates to the first k hits.
inline std::vector<RetrievalHit> retrieve(const HashCode& query, const CodeStore& store,
                                          std::optional<std::size_t> k = std::nullopt) {
  if (store.empty()) fail(ErrorKind::EmptyStore, "retrieval over an empty store");
  std::vector<int> dist;
  store.distances(query, dist);
  // Counting sort over the D + 1 possible distances is linear and stable.
  std::vector<std::size_t> start(static_cast<std::size_t>(store.bits()) + 2, 0);
  for (int d : dist) start[static_cast<std::size_t>(d) + 1]++;
  for (std::size_t i = 1; i < start.size(); ++i) start[i] += start[i - 1];
  const std::size_t n = k ? std::min(*k, store.size()) : store.size();
  std::vector<RetrievalHit> hits(store.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    auto& h = hits[start[static_cast<std::size_t>(dist[i])]++];
    h = {store.sample_ids()[i], store.labels()[i], dist[i], i};
  }
  hits.resize(n);
  return hits;
}

// ---------------------------------------------------------------------------
// Codes file: "SFHC", u32 version, u32 D, u64 N, then N records of
//   u64 sample_id, u32 class_id, ceil(D/64) little-endian u64 words.

inline constexpr std::uint32_t kCodesVersion = 1;

inline void save_codes(std::ostream& out, const CodeStore& store) {
  out.write("SFHC", 4);
  ad::io::put<std::uint32_t>(out, kCodesVersion);
  ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.bits()));
  ad::io::put<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    ad::io::put<std::uint64_t>(out, static_cast<std::uint64_t>(store.sample_ids()[i]));
    ad::io::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.labels()[i]));
    for (std::size_t k = 0; k < store.words_per_code(); ++k)
      ad::io::put<std::uint64_t>(out, store.words()[i * store.words_per_code() + k]);
  }
}

inline CodeStore load_codes(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SFHC", 4) != 0) fail(ErrorKind::BadCodeFile, "bad magic");
  if (ad::io::get<std::uint32_t>(in, ErrorKind::BadCodeFile) != kCodesVersion)
    fail(ErrorKind::BadCodeFile, "unsupported version");
  const auto bits = ad::io::get<std::uint32_t>(in, ErrorKind::BadCodeFile);
  const auto n = ad::io::get<std::uint64_t>(in, ErrorKind::BadCodeFile);
  if (bits > static_cast<std::uint32_t>(kMaxCodeBits)) fail(ErrorKind::BadCodeFile, "code length");
  CodeStore store(static_cast<int>(bits));
  for (std::uint64_t i = 0; i < n; ++i) {
    HashCode c;
    c.bits = static_cast<int>(bits);
    c.sample_id = static_cast<std::int64_t>(ad::io::get<std::uint64_t>(in, ErrorKind::BadCodeFile));
    c.class_id = static_cast<int>(ad::io::get<std::uint32_t>(in, ErrorKind::BadCodeFile));
    c.words.resize(words_for(c.bits));
    for (auto& w : c.words) w = ad::io::get<std::uint64_t>(in, ErrorKind::BadCodeFile);
    if (c.bits % 64 != 0 && !c.words.empty() && (c.words.back() >> (c.bits % 64)) != 0)
      fail(ErrorKind::BadCodeFile, "bits set beyond code length");
    store.add(c);
  }
  return store;
}

}  // namespace sketch
