#include "ouro/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string_view>

namespace ouro {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- corpus

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    std::vector<std::uint8_t> out;
    for (const auto& f : files) {
      auto part = read_bytes(f);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::vector<Passage> read_passages(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<Passage> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) out.push_back({entry.path().filename().string(), read_bytes(entry.path())});
  }
  std::sort(out.begin(), out.end(), [](const Passage& a, const Passage& b) { return a.name < b.name; });
  return out;
}

void ByteCorpus::check_disjoint() const {
  for (const auto& p : heldout) {
    if (p.bytes.empty()) continue;
    const std::size_t probe = std::min<std::size_t>(p.bytes.size(), 64);
    const std::boyer_moore_searcher searcher(p.bytes.begin(), p.bytes.begin() + static_cast<std::ptrdiff_t>(probe));
    if (std::search(train.begin(), train.end(), searcher) != train.end()) {
      throw ConfigError("held-out passage '" + p.name + "' also appears in the training bytes");
    }
  }
}

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array<std::string_view, 24> nouns{
      "river",  "teacher", "garden",  "machine", "village", "letter", "window", "market",
      "student", "engine", "harbor",  "forest",  "library", "signal", "farmer", "bridge",
      "museum", "lantern", "council", "planet",  "orchard", "doctor", "kitchen", "painter"};
  static constexpr std::array<std::string_view, 16> adjectives{
      "quiet", "old", "bright", "narrow", "careful", "distant", "heavy", "small",
      "green", "early", "patient", "broken", "famous", "cold", "simple", "busy"};
  static constexpr std::array<std::string_view, 16> verbs{
      "carries", "watches", "repairs", "follows", "describes", "opens", "crosses", "measures",
      "builds",  "visits",  "reads",   "moves",   "protects",  "finds", "teaches", "paints"};
  static constexpr std::array<std::string_view, 8> preps{"near", "behind", "across", "under",
                                                          "beside", "beyond", "inside", "around"};
  static constexpr std::array<std::string_view, 8> adverbs{"slowly", "often", "rarely", "gently",
                                                            "again", "together", "later", "quickly"};
  static constexpr std::array<std::string_view, 6> openers{"In the morning", "After the rain", "Every winter",
                                                            "Long ago",       "By evening",     "Each year"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const auto& list) -> std::string_view {
    return list[std::uniform_int_distribution<std::size_t>(0, list.size() - 1)(rng)];
  };
  auto coin = [&](int percent) { return std::uniform_int_distribution<int>(0, 99)(rng) < percent; };
  std::string out;
  out.reserve(bytes + 256);
  int in_paragraph = 0;
  while (out.size() < bytes) {
    std::string s;
    if (coin(25)) {
      s += pick(openers);
      s += ", the ";
    } else {
      s += "The ";
    }
    if (coin(60)) {
      s += pick(adjectives);
      s += ' ';
    }
    s += pick(nouns);
    s += ' ';
    if (coin(30)) {
      s += pick(adverbs);
      s += ' ';
    }
    s += pick(verbs);
    s += " the ";
    if (coin(40)) {
      s += pick(adjectives);
      s += ' ';
    }
    s += pick(nouns);
    if (coin(50)) {
      s += ' ';
      s += pick(preps);
      s += " the ";
      s += pick(nouns);
    }
    if (coin(15)) {
      s += " in ";
      s += std::to_string(std::uniform_int_distribution<int>(1800, 2020)(rng));
    }
    s += '.';
    if (s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    out += s;
    if (++in_paragraph >= 4 && coin(30)) {
      out += "\n\n";
      in_paragraph = 0;
    } else {
      out += ' ';
    }
  }
  out.resize(bytes);
  return out;
}

std::vector<std::int32_t> TokenBatch::inputs() const {
  std::vector<std::int32_t> out(static_cast<std::size_t>(batch * seq));
  for (Index b = 0; b < batch; ++b) {
    std::copy_n(tokens.begin() + b * (seq + 1), seq, out.begin() + b * seq);
  }
  return out;
}

std::vector<std::int32_t> TokenBatch::targets() const {
  std::vector<std::int32_t> out(static_cast<std::size_t>(batch * seq));
  for (Index b = 0; b < batch; ++b) {
    std::copy_n(tokens.begin() + b * (seq + 1) + 1, seq, out.begin() + b * seq);
  }
  return out;
}

TokenBatch batch_at(std::span<const std::uint8_t> corpus, std::span<const std::size_t> offsets, Index seq) {
  if (seq < 1) throw ConfigError("sequence length must be at least 1");
  TokenBatch tb;
  tb.batch = static_cast<Index>(offsets.size());
  tb.seq = seq;
  tb.tokens.reserve(offsets.size() * static_cast<std::size_t>(seq + 1));
  for (std::size_t off : offsets) {
    if (off + static_cast<std::size_t>(seq) + 1 > corpus.size()) {
      throw ConfigError("batch window at offset " + std::to_string(off) + " runs past the corpus end");
    }
    for (Index i = 0; i <= seq; ++i) tb.tokens.push_back(corpus[off + static_cast<std::size_t>(i)]);
  }
  return tb;
}

TokenBatch next_batch(std::span<const std::uint8_t> corpus, Index batch, Index seq, std::mt19937_64& rng) {
  if (batch < 1 || seq < 1) throw ConfigError("batch and sequence length must be positive");
  if (corpus.size() < static_cast<std::size_t>(seq) + 1) {
    throw ConfigError("corpus of " + std::to_string(corpus.size()) + " bytes is too small for sequence length " +
                      std::to_string(seq));
  }
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - static_cast<std::size_t>(seq) - 1);
  std::vector<std::size_t> offsets(static_cast<std::size_t>(batch));
  for (auto& o : offsets) o = pick(rng);
  return batch_at(corpus, offsets, seq);
}

// ------------------------------------------------------------ checkpoint

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<T>& tensors) {
  Writer w;
  w.raw("OURO");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    w.u32(static_cast<std::uint32_t>(nt.name.size()));
    w.raw(nt.name);
    w.u8(static_cast<std::uint8_t>(dtype_of<T>()));
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (Index e : nt.tensor.shape()) w.u64(static_cast<std::uint64_t>(e));
    const auto& v = nt.tensor.value();
    for (Index i = 0; i < v.size(); ++i) {
      if constexpr (std::is_same_v<T, float>) {
        w.u32(std::bit_cast<std::uint32_t>(v[i]));
      } else {
        w.u64(std::bit_cast<std::uint64_t>(v[i]));
      }
    }
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

template <typename T>
NamedTensors<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "OURO", 4) != 0) {
    throw BadMagicError("not an OURO checkpoint (bad magic)");
  }
  if (bytes.size() < 16) throw FormatError("checkpoint truncated");
  Reader header(bytes.subspan(4));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw BadVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32_of(body);
  if (stored != actual) throw ChecksumError("checkpoint checksum mismatch");

  Reader r(body.subspan(8));
  const std::uint32_t count = r.u32();
  NamedTensors<T> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    const auto name_bytes = r.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint8_t code = r.u8();
    if (code > 1) throw FormatError("tensor '" + name + "' has unknown dtype code " + std::to_string(code));
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.u64()));
    const Index n = shape_numel(shape);
    Vec<T> value(n);
    for (Index k = 0; k < n; ++k) {
      if (code == 0) {
        value[k] = static_cast<T>(std::bit_cast<float>(r.u32()));
      } else {
        value[k] = static_cast<T>(std::bit_cast<double>(r.u64()));
      }
    }
    out.push_back({std::move(name), Tensor<T>(std::move(shape), std::move(value))});
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor");
  return out;
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

template <typename T>
void save_checkpoint(const fs::path& path, const NamedTensors<T>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

template <typename T>
NamedTensors<T> load_checkpoint(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return decode_checkpoint<T>(bytes);
}

template <typename T>
void assign_tensors(const NamedTensors<T>& dest, const NamedTensors<T>& source, const NamedTensors<T>& optional) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& nt : source) {
    if (!by_name.emplace(nt.name, &nt.tensor).second) throw FormatError("duplicate tensor name '" + nt.name + "'");
  }
  auto fill = [&](const NamedTensors<T>& targets, bool required) {
    for (const auto& nt : targets) {
      auto it = by_name.find(nt.name);
      if (it == by_name.end()) {
        if (required) throw FormatError("checkpoint is missing tensor '" + nt.name + "'");
        continue;
      }
      if (it->second->shape() != nt.tensor.shape()) {
        throw DimensionError("tensor '" + nt.name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                             shape_str(nt.tensor.shape()));
      }
      nt.tensor.mutable_value() = it->second->value();
      by_name.erase(it);
    }
  };
  fill(dest, true);
  fill(optional, false);
  if (!by_name.empty()) throw FormatError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
}

template <typename T>
std::size_t tensor_hash(const Tensor<T>& t) {
  const auto* p = reinterpret_cast<const char*>(t.data());
  return std::hash<std::string_view>{}(std::string_view(p, static_cast<std::size_t>(t.numel()) * sizeof(T)));
}

// ---------------------------------------------------------------- config

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

#define OURO_INSTANTIATE_DATA(T)                                                                           \
  template std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<T>&);                            \
  template NamedTensors<T> decode_checkpoint<T>(std::span<const std::uint8_t>);                            \
  template void save_checkpoint(const fs::path&, const NamedTensors<T>&);                                  \
  template NamedTensors<T> load_checkpoint<T>(const fs::path&);                                            \
  template void assign_tensors(const NamedTensors<T>&, const NamedTensors<T>&, const NamedTensors<T>&);    \
  template std::size_t tensor_hash(const Tensor<T>&);

OURO_INSTANTIATE_DATA(float)
OURO_INSTANTIATE_DATA(double)

}  // namespace ouro
