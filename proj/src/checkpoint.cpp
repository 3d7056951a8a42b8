#include "fedzda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fedzda/errors.hpp"

namespace fedzda {

namespace {

constexpr char kMagic[8] = {'F', 'Z', 'D', 'A', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  template <typename T>
  void scalar(T v) {
    if constexpr (sizeof(T) == 4)
      le(std::bit_cast<std::uint32_t>(v));
    else
      le(std::bit_cast<std::uint64_t>(v));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size())
      throw ParseError(ParseError::Kind::truncated,
                       "checkpoint truncated at byte offset " + std::to_string(pos_));
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  double scalar(std::uint32_t width) {
    if (width == 4) return static_cast<double>(std::bit_cast<float>(le<std::uint32_t>()));
    return std::bit_cast<double>(le<std::uint64_t>());
  }
  const std::uint8_t* raw(std::size_t n) {
    need(n);
    const auto* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_model(const Model<T>& model) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le<std::uint32_t>(kCheckpointVersion);
  const auto& spec = model.spec();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(spec.arch));
  w.le<std::uint32_t>(sizeof(T));
  w.le<std::uint64_t>(model.seed());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(spec.channels));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(spec.height));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(spec.width));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(spec.classes));
  w.f64(static_cast<double>(model.bn_momentum()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.rank()));
    for (std::size_t d : p.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.bn_layer_count()));
  for (const auto& s : model.bn_buffers()) w.le<std::uint32_t>(static_cast<std::uint32_t>(s.mean.size()));
  for (const auto& p : model.parameters())
    for (T v : p.data()) w.scalar(v);
  for (const auto& s : model.bn_buffers()) {
    for (T v : s.mean.data()) w.scalar(v);
    for (T v : s.var.data()) w.scalar(v);
  }
  return w.take();
}

template <typename T>
Model<T> deserialize_model(const std::vector<std::uint8_t>& blob) {
  Reader r(blob);
  if (std::memcmp(r.raw(sizeof kMagic), kMagic, sizeof kMagic) != 0)
    throw ParseError(ParseError::Kind::bad_magic, "not a model checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ParseError(ParseError::Kind::bad_format,
                     "unsupported checkpoint version " + std::to_string(version));
  ArchitectureSpec spec;
  spec.arch = static_cast<Architecture>(r.le<std::uint32_t>());
  const auto width = r.le<std::uint32_t>();
  if (width != 4 && width != 8)
    throw ParseError(ParseError::Kind::bad_format, "bad scalar width " + std::to_string(width));
  const auto seed = r.le<std::uint64_t>();
  spec.channels = r.le<std::uint32_t>();
  spec.height = r.le<std::uint32_t>();
  spec.width = r.le<std::uint32_t>();
  spec.classes = r.le<std::uint32_t>();
  const double momentum = r.f64();

  Model<T> model;
  try {
    model = Model<T>::build(spec, seed, static_cast<T>(momentum));
  } catch (const ConfigError& e) {
    throw ParseError(ParseError::Kind::bad_format, std::string("checkpoint header: ") + e.what());
  }
  const auto nparams = r.le<std::uint32_t>();
  if (nparams != model.parameters().size())
    throw ParseError(ParseError::Kind::bad_format, "checkpoint parameter layout does not match architecture");
  for (const auto& p : model.parameters()) {
    const auto rank = r.le<std::uint32_t>();
    Shape s(rank);
    for (auto& d : s) d = r.le<std::uint32_t>();
    if (s != p.shape())
      throw ParseError(ParseError::Kind::bad_format,
                       "checkpoint tensor shape " + shape_str(s) + " vs model " + shape_str(p.shape()));
  }
  const auto nbn = r.le<std::uint32_t>();
  if (nbn != model.bn_layer_count())
    throw ParseError(ParseError::Kind::bad_format, "checkpoint BN layer count does not match architecture");
  for (const auto& s : model.bn_buffers())
    if (r.le<std::uint32_t>() != s.mean.size())
      throw ParseError(ParseError::Kind::bad_format, "checkpoint BN channel count mismatch");

  for (auto& p : model.parameters())
    for (auto& v : p.data()) v = static_cast<T>(r.scalar(width));
  for (auto& s : model.bn_buffers()) {
    for (auto& v : s.mean.data()) v = static_cast<T>(r.scalar(width));
    for (auto& v : s.var.data()) v = static_cast<T>(r.scalar(width));
  }
  if (r.pos() != r.size())
    throw ParseError(ParseError::Kind::bad_format,
                     "trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
  return model;
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  const auto blob = serialize_model(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ParseError(ParseError::Kind::io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!f) throw ParseError(ParseError::Kind::io, "short write to " + path.string());
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model<T>(blob);
}

template std::vector<std::uint8_t> serialize_model<float>(const Model<float>&);
template std::vector<std::uint8_t> serialize_model<double>(const Model<double>&);
template Model<float> deserialize_model<float>(const std::vector<std::uint8_t>&);
template Model<double> deserialize_model<double>(const std::vector<std::uint8_t>&);
template void save_model<float>(const Model<float>&, const std::filesystem::path&);
template void save_model<double>(const Model<double>&, const std::filesystem::path&);
template Model<float> load_model<float>(const std::filesystem::path&);
template Model<double> load_model<double>(const std::filesystem::path&);

}  // namespace fedzda
