#include "blockkd/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "blockkd/errors.hpp"

namespace bkd {

namespace {

constexpr char kMagic[4] = {'B', 'K', 'D', 'C'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::uint64_t f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    le(bits);
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < 8; ++i) sum += (bits >> (8 * i)) & 0xffu;
    return sum;
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  double f64(std::uint64_t& sum) {
    const auto bits = le<std::uint64_t>("tensor payload");
    for (std::size_t i = 0; i < 8; ++i) sum += (bits >> (8 * i)) & 0xffu;
    return std::bit_cast<double>(bits);
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

void split_u64(std::vector<CheckpointEntry>& out, const std::string& name, std::uint64_t v) {
  out.push_back({name, {2}, {static_cast<double>(v & 0xffffffffu), static_cast<double>(v >> 32)}});
}

std::uint64_t join_u64(const CheckpointEntry& e) {
  if (e.shape != Shape{2}) throw CompatibilityError("metadata entry '" + e.name + "' has the wrong shape");
  return static_cast<std::uint64_t>(e.values[0]) | (static_cast<std::uint64_t>(e.values[1]) << 32);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t checksum = 0;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.size() > 0xffff) throw UsageError("checkpoint entry name length out of range");
    if (e.shape.size() > 0xff) throw UsageError("checkpoint entry '" + e.name + "' has too many dims");
    if (numel_of(e.shape) != e.values.size()) {
      throw DimensionError("checkpoint entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                           " values for shape " + shape_str(e.shape));
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : e.values) checksum += w.f64(v);
  }
  w.le<std::uint64_t>(checksum);
  return w.take();
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const auto version_at = r.pos();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CompatibilityError("checkpoint version " + std::to_string(version) + " at byte offset " +
                             std::to_string(version_at) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.le<std::uint32_t>("tensor count");
  std::vector<CheckpointEntry> entries;
  std::uint64_t checksum = 0;
  for (std::uint32_t t = 0; t < count; ++t) {
    CheckpointEntry e;
    const auto len = r.le<std::uint16_t>("name length");
    if (len == 0) throw FormatError("empty tensor name", r.pos() - 2);
    e.name = r.str(len, "tensor name");
    const auto ndim = r.le<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto at = r.pos();
      const auto dim = r.le<std::uint32_t>("dimension");
      if (dim == 0) throw FormatError("zero dimension in tensor '" + e.name + "'", at);
      e.shape.push_back(dim);
    }
    const std::size_t n = numel_of(e.shape);
    r.need(8 * n, "tensor payload");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f64(checksum);
    entries.push_back(std::move(e));
  }
  const auto at = r.pos();
  const auto stored = r.le<std::uint64_t>("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.pos());
  if (stored != checksum) {
    throw IntegrityError("checkpoint checksum mismatch at byte offset " + std::to_string(at) + ": stored " +
                         std::to_string(stored) + ", computed " + std::to_string(checksum));
  }
  return entries;
}

std::size_t checkpoint_size(const std::vector<CheckpointEntry>& entries) {
  std::size_t size = 4 + 4 + 4 + 8;
  for (const auto& e : entries) size += 2 + e.name.size() + 1 + 4 * e.shape.size() + 8 * e.values.size();
  return size;
}

std::vector<CheckpointEntry> checkpoint_entries(const CompositeNet& net, const CheckpointMeta& meta) {
  std::vector<CheckpointEntry> out;
  for (const auto& [name, t] : net.state()) {
    out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  split_u64(out, "meta/arch_hash", meta.arch_hash);
  split_u64(out, "meta/seed", meta.seed);
  out.push_back({"meta/epoch", {}, {static_cast<double>(meta.epoch)}});
  out.push_back({"meta/role", {}, {meta.role == NetRole::teacher ? 1.0 : 0.0}});
  return out;
}

void save_checkpoint(const CompositeNet& net, const std::string& path, const CheckpointMeta& meta) {
  const auto bytes = encode_checkpoint(checkpoint_entries(net, meta));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to checkpoint '" + path + "'");
}

LoadedNet load_checkpoint(const std::string& path, const ArchSpec& arch, NetRole role) {
  const auto entries = decode_checkpoint(read_file(path));
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) throw FormatError("duplicate tensor '" + e.name + "'", 0);
  }
  auto meta_entry = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CompatibilityError("checkpoint '" + path + "' lacks " + name);
    return *it->second;
  };

  LoadedNet loaded;
  loaded.meta.arch_hash = join_u64(meta_entry("meta/arch_hash"));
  loaded.meta.seed = join_u64(meta_entry("meta/seed"));
  loaded.meta.epoch = static_cast<int>(meta_entry("meta/epoch").values.at(0));
  loaded.meta.role = meta_entry("meta/role").values.at(0) != 0.0 ? NetRole::teacher : NetRole::student;

  if (loaded.meta.arch_hash != arch.hash()) {
    throw CompatibilityError("checkpoint '" + path + "' was written for a different architecture (hash " +
                             std::to_string(loaded.meta.arch_hash) + ", expected " +
                             std::to_string(arch.hash()) + ")");
  }
  if (loaded.meta.role != role) {
    throw CompatibilityError(std::string("checkpoint '") + path + "' holds a " +
                             (loaded.meta.role == NetRole::teacher ? "teacher" : "student") + " network");
  }

  Rng rng(0);
  loaded.net = build_net(arch, role == NetRole::teacher ? arch.teacher : arch.student, rng);
  const auto state = loaded.net.state();
  std::size_t used = 0;
  for (const auto& [name, t] : state) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CompatibilityError("checkpoint '" + path + "' lacks tensor " + name);
    const auto& e = *it->second;
    if (e.shape != t.shape()) {
      throw CompatibilityError("tensor " + name + " is " + shape_str(e.shape) + " in the checkpoint but " +
                               shape_str(t.shape()) + " in the network");
    }
    auto dst = Tensor(t).mutable_data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
    ++used;
  }
  const std::size_t meta_count = 4;
  if (used + meta_count != entries.size()) {
    throw CompatibilityError("checkpoint '" + path + "' has tensors the network does not define");
  }
  loaded.net.set_training(false);
  if (role == NetRole::teacher) loaded.net.freeze();
  return loaded;
}

}  // namespace bkd
