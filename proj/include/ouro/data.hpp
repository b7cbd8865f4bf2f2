#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ouro/tensor.hpp"

namespace ouro {

// ---------------------------------------------------------------- corpus

struct Passage {
  std::string name;
  std::vector<std::uint8_t> bytes;
};

// Byte-level text (vocabulary = the 256 byte values).
struct ByteCorpus {
  std::vector<std::uint8_t> train;
  std::vector<Passage> heldout;

  // Throws ConfigError if some held-out passage occurs verbatim in train.
  void check_disjoint() const;
};

// A regular file is read whole; a directory is the concatenation of its
// regular files in lexicographic filename order.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// Every regular file in `dir`, sorted by name.
std::vector<Passage> read_passages(const std::filesystem::path& dir);

// Deterministic English-like filler text for desk-scale runs.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

// tokens is row-major [batch, seq + 1]; inputs are the first seq columns,
// targets the last seq.
struct TokenBatch {
  Index batch = 0;
  Index seq = 0;
  std::vector<std::int32_t> tokens;

  std::vector<std::int32_t> inputs() const;
  std::vector<std::int32_t> targets() const;
};

// Window starting at each offset.
TokenBatch batch_at(std::span<const std::uint8_t> corpus, std::span<const std::size_t> offsets, Index seq);

// One offset per row, uniform over all valid starts.
TokenBatch next_batch(std::span<const std::uint8_t> corpus, Index batch, Index seq, std::mt19937_64& rng);

// Seeded iterator over random batches of one corpus.
class BatchSampler {
 public:
  BatchSampler(std::span<const std::uint8_t> corpus, Index batch, Index seq, std::uint64_t seed)
      : corpus_(corpus), batch_(batch), seq_(seq), rng_(seed) {}

  TokenBatch next() { return next_batch(corpus_, batch_, seq_, rng_); }

 private:
  std::span<const std::uint8_t> corpus_;
  Index batch_;
  Index seq_;
  std::mt19937_64 rng_;
};

// ------------------------------------------------------------ checkpoint
//
// Layout, all integers little-endian:
//   "OURO"  u32 version  u32 count
//   count × { u32 name_len, name bytes (UTF-8), u8 dtype (0 = f32, 1 = f64),
//             u32 rank, rank × u64 extent, payload (LE scalars) }
//   u32 CRC-32 of every preceding byte

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<T>& tensors);

// Either stored dtype is accepted and converted to T.
template <typename T>
NamedTensors<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const NamedTensors<T>& tensors);

template <typename T>
NamedTensors<T> load_checkpoint(const std::filesystem::path& path);

// Copies values from `source` into the same-named tensors of `dest`. Every
// name in `dest` must be present with the same shape unless listed in
// `optional`; names in `source` that `dest` lacks are an error.
template <typename T>
void assign_tensors(const NamedTensors<T>& dest, const NamedTensors<T>& source,
                    const NamedTensors<T>& optional = {});

// Stable content hash of a tensor's value bytes.
template <typename T>
std::size_t tensor_hash(const Tensor<T>& t);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// ---------------------------------------------------------------- config

// `key=value` per line; blank lines and lines starting with '#' are skipped.
// Duplicate keys and lines without '=' are errors.
std::map<std::string, std::string> parse_key_values(const std::string& text);
std::string format_key_values(const std::map<std::string, std::string>& kv);

}  // namespace ouro
