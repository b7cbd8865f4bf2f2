#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ouro/data.hpp"
#include "ouro/training.hpp"
#include "test_util.hpp"

using namespace ouro;
using namespace ouro::testing;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ouro_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Independent little-endian writer for the expected on-disk layout.
struct Writer {
  std::vector<std::uint8_t> out;
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
};

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
std::uint32_t crc32_oracle(std::span<const std::uint8_t> data) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::uint8_t b : data) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

}  // namespace

TEST(Batches, WindowAndShiftedTargets) {
  const auto corpus = bytes_of("abcdef");
  const std::size_t offsets[] = {1};
  const TokenBatch b = batch_at(corpus, offsets, 3);
  EXPECT_EQ(b.batch, 1);
  EXPECT_EQ(b.seq, 3);
  EXPECT_EQ(b.inputs(), (std::vector<std::int32_t>{'b', 'c', 'd'}));
  EXPECT_EQ(b.targets(), (std::vector<std::int32_t>{'c', 'd', 'e'}));
}

TEST(Batches, RowsAreIndependentWindows) {
  const auto corpus = bytes_of("0123456789");
  const std::size_t offsets[] = {0, 6};
  const TokenBatch b = batch_at(corpus, offsets, 3);
  EXPECT_EQ(b.inputs(), (std::vector<std::int32_t>{'0', '1', '2', '6', '7', '8'}));
  EXPECT_EQ(b.targets(), (std::vector<std::int32_t>{'1', '2', '3', '7', '8', '9'}));
  const std::size_t past_end[] = {7};
  EXPECT_THROW(batch_at(corpus, past_end, 3), ConfigError);
}

TEST(Batches, SameSeedSameBatches) {
  const auto corpus = bytes_of(synthetic_corpus(5000, 1));
  BatchSampler a(corpus, 4, 16, 42), b(corpus, 4, 16, 42), c(corpus, 4, 16, 43);
  bool differs = false;
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x.tokens, b.next().tokens);
    differs |= x.tokens != c.next().tokens;
  }
  EXPECT_TRUE(differs);
}

TEST(Batches, OffsetsAreUniform) {
  // Byte value = position, so the first input token is the offset.
  std::vector<std::uint8_t> corpus(20);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<std::uint8_t>(i);
  const Index seq = 4, starts = 16, draws = 10000;
  std::vector<int> hist(static_cast<std::size_t>(starts), 0);
  std::mt19937_64 rng(7);
  for (Index i = 0; i < draws; ++i) {
    const TokenBatch b = next_batch(corpus, 1, seq, rng);
    ASSERT_LT(b.tokens[0], starts);
    ++hist[static_cast<std::size_t>(b.tokens[0])];
  }
  const double p = 1.0 / static_cast<double>(starts);
  const double mean = static_cast<double>(draws) * p;
  const double sd = std::sqrt(static_cast<double>(draws) * p * (1 - p));
  for (int count : hist) EXPECT_LT(std::abs(count - mean), 3 * sd);
}

TEST(Batches, CorpusTooSmallIsConfigError) {
  std::mt19937_64 rng(1);
  const auto corpus = bytes_of("abcd");
  EXPECT_THROW(next_batch(corpus, 1, 4, rng), ConfigError);
  EXPECT_NO_THROW(next_batch(corpus, 1, 3, rng));
  EXPECT_THROW(next_batch(corpus, 0, 2, rng), ConfigError);
}

TEST(Corpus, SyntheticTextIsDeterministicAndSized) {
  const std::string a = synthetic_corpus(10000, 3);
  EXPECT_EQ(a.size(), 10000u);
  EXPECT_EQ(a, synthetic_corpus(10000, 3));
  EXPECT_NE(a, synthetic_corpus(10000, 4));
  for (char c : a) EXPECT_TRUE(static_cast<unsigned char>(c) < 128);
}

TEST(Corpus, DirectoryConcatenatesInNameOrder) {
  const fs::path dir = scratch_dir("concat");
  write_text(dir / "b.txt", "second");
  write_text(dir / "a.txt", "first-");
  write_text(dir / "c.txt", "-third");
  const auto bytes = read_bytes(dir);
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), "first-second-third");
  const auto passages = read_passages(dir);
  ASSERT_EQ(passages.size(), 3u);
  EXPECT_EQ(passages[0].name, "a.txt");
  EXPECT_THROW(read_bytes(dir / "missing"), IoError);
  EXPECT_THROW(read_passages(dir / "a.txt"), IoError);
  fs::remove_all(dir);
}

TEST(Corpus, DisjointnessCheck) {
  ByteCorpus c;
  c.train = bytes_of("the quick brown fox jumps over the lazy dog");
  c.heldout = {{"ok", bytes_of("a lighthouse keeper")}};
  EXPECT_NO_THROW(c.check_disjoint());
  c.heldout.push_back({"leak", bytes_of("brown fox jumps")});
  EXPECT_THROW(c.check_disjoint(), ConfigError);
}

TEST(Corpus, BundledHeldoutPassagesAreDisjointFromSyntheticText) {
  ByteCorpus c;
  c.heldout = read_passages(fs::path(OURO_SOURCE_DIR) / "data" / "heldout");
  EXPECT_EQ(c.heldout.size(), 12u);
  for (const auto& p : c.heldout) EXPECT_GT(p.bytes.size(), 100u) << p.name;
  const std::string text = synthetic_corpus(1 << 20, 0);
  c.train.assign(text.begin(), text.end());
  EXPECT_NO_THROW(c.check_disjoint());
}

TEST(Checkpoint, EmptyRoundTrip) {
  const auto bytes = encode_checkpoint<float>({});
  EXPECT_EQ(bytes.size(), 16u);
  EXPECT_TRUE(decode_checkpoint<float>(bytes).empty());
}

TEST(Checkpoint, ExactLayoutOfOneSmallTensor) {
  Tensor<float> w({2, 2}, {1.0f, -2.0f, 0.5f, 3.0f});
  const auto bytes = encode_checkpoint<float>({{"w", w}});
  // 12 header + (4 + 1 name + 1 dtype + 4 rank + 2·8 extents + 16 payload) + 4 trailer.
  EXPECT_EQ(bytes.size(), 58u);

  Writer e;
  for (char c : std::string("OURO")) e.u8(static_cast<std::uint8_t>(c));
  e.u32(1);
  e.u32(1);
  e.u32(1);
  e.u8('w');
  e.u8(0);
  e.u32(2);
  e.u64(2);
  e.u64(2);
  for (float f : {1.0f, -2.0f, 0.5f, 3.0f}) e.f32(f);
  e.u32(crc32_oracle(e.out));
  EXPECT_EQ(bytes, e.out);
}

TEST(Checkpoint, HeaderErrors) {
  Tensor<float> w({3}, {1.0f, 2.0f, 3.0f});
  auto bytes = encode_checkpoint<float>({{"w", w}});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad_magic), BadMagicError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_checkpoint<float>(bad_version), BadVersionError);
  auto truncated = bytes;
  truncated.resize(10);
  EXPECT_THROW(decode_checkpoint<float>(truncated), CheckpointError);
}

TEST(Checkpoint, EveryCorruptedByteIsDetected) {
  std::mt19937_64 rng(3);
  auto a = randn<double>({3, 4}, rng, false);
  auto b = randn<double>({5}, rng, false);
  const auto bytes = encode_checkpoint<double>({{"alpha", a}, {"beta", b}});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto copy = bytes;
    copy[i] ^= 0x5A;
    EXPECT_THROW(decode_checkpoint<double>(copy), CheckpointError) << "byte " << i;
    if (i >= 12 && i + 4 < bytes.size()) EXPECT_THROW(decode_checkpoint<double>(copy), ChecksumError) << "byte " << i;
  }
}

TEST(Checkpoint, ReencodeIsByteIdentical) {
  std::mt19937_64 rng(4);
  NamedTensors<double> tensors{{"x", randn<double>({2, 3, 4}, rng, false)}, {"y", randn<double>({1}, rng, false)}};
  const auto bytes = encode_checkpoint(tensors);
  const auto decoded = decode_checkpoint<double>(bytes);
  ASSERT_EQ(decoded.size(), 2u);
  EXPECT_EQ(decoded[0].name, "x");
  EXPECT_EQ(decoded[0].tensor.shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(decoded[0].tensor.value(), tensors[0].tensor.value());
  EXPECT_EQ(encode_checkpoint(decoded), bytes);
}

TEST(Checkpoint, ConvertsBetweenPrecisions) {
  Tensor<double> d({2}, {0.1, -1e10});
  const auto as_float = decode_checkpoint<float>(encode_checkpoint<double>({{"d", d}}));
  EXPECT_EQ(as_float[0].tensor[0], 0.1f);
  EXPECT_EQ(as_float[0].tensor[1], -1e10f);
  Tensor<float> f({1}, {0.25f});
  const auto as_double = decode_checkpoint<double>(encode_checkpoint<float>({{"f", f}}));
  EXPECT_EQ(as_double[0].tensor[0], 0.25);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const fs::path dir = scratch_dir("ckpt");
  Tensor<float> w({2}, {4.0f, 5.0f});
  save_checkpoint<float>(dir / "w.ckpt", {{"w", w}});
  const auto back = load_checkpoint<float>(dir / "w.ckpt");
  EXPECT_EQ(back[0].tensor.value(), w.value());
  EXPECT_THROW(load_checkpoint<float>(dir / "none.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, AssignTensorsValidatesNamesAndShapes) {
  Tensor<double> a({2}), b({3});
  const NamedTensors<double> dest{{"a", a}, {"b", b}};
  assign_tensors<double>(dest, {{"a", Tensor<double>({2}, {1.0, 2.0})}, {"b", Tensor<double>({3}, {3.0, 4.0, 5.0})}});
  EXPECT_EQ(a[1], 2.0);
  EXPECT_EQ(b[2], 5.0);
  EXPECT_THROW(assign_tensors<double>(dest, {{"a", Tensor<double>({2})}}), FormatError);
  EXPECT_THROW(assign_tensors<double>(dest, {{"a", Tensor<double>({3})}, {"b", Tensor<double>({3})}}), DimensionError);
  EXPECT_THROW(assign_tensors<double>(dest, {{"a", Tensor<double>({2})}, {"b", Tensor<double>({3})}, {"c", Tensor<double>({1})}}),
               FormatError);
  Tensor<double> opt({1}, {7.0});
  EXPECT_NO_THROW(assign_tensors<double>({{"a", a}}, {{"a", Tensor<double>({2})}}, {{"o", opt}}));
  EXPECT_EQ(opt[0], 7.0);
}

TEST(Checkpoint, ReloadedModelGivesBitIdenticalLoss) {
  const OuroborosConfig oc = small_config();
  const auto base = init_base_model<double>(oc.model, 5);
  const auto m = convert_model(base, oc, 6);
  std::mt19937_64 rng(7);
  for (const auto& t : m.trainable_tensors()) {
    Vec<double>& x = t.tensor.mutable_value();
    for (Index i = 0; i < x.size(); ++i) x[i] += 0.2 * std::normal_distribution<double>()(rng);
  }
  const auto bytes = encode_checkpoint(m.named_tensors());
  const auto other = convert_model(init_base_model<double>(oc.model, 99), oc, 98);
  assign_tensors(other.named_tensors(), decode_checkpoint<double>(bytes));
  std::vector<std::uint8_t> text(200);
  for (std::size_t i = 0; i < text.size(); ++i) text[i] = static_cast<std::uint8_t>((i * 7 + 3) % 32);
  const TokenBatch b = next_batch(text, 3, 10, rng);
  EXPECT_EQ(ouroboros_loss(m, b).item(), ouroboros_loss(other, b).item());
}

TEST(Checkpoint, TensorHashTracksValues) {
  Tensor<double> a({2}, {1.0, 2.0});
  const auto h = tensor_hash(a);
  EXPECT_EQ(h, tensor_hash(Tensor<double>({2}, {1.0, 2.0})));
  a.mutable_value()[1] = 2.5;
  EXPECT_NE(h, tensor_hash(a));
}

TEST(KeyValues, ParseAndFormat) {
  const auto kv = parse_key_values("# comment\n\n a = 1 \nb=two words\n");
  EXPECT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("a"), "1");
  EXPECT_EQ(kv.at("b"), "two words");
  EXPECT_EQ(format_key_values(kv), "a=1\nb=two words\n");
  EXPECT_EQ(parse_key_values(format_key_values(kv)), kv);
}

TEST(KeyValues, Errors) {
  EXPECT_THROW(parse_key_values("novalue\n"), ConfigError);
  EXPECT_THROW(parse_key_values("=3\n"), ConfigError);
  EXPECT_THROW(parse_key_values("a=1\na=2\n"), ConfigError);
}
