#include "fedzda/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedzda/errors.hpp"
#include "fedzda/rng.hpp"

namespace fedzda {

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::mnist_cnn: return "mnist_cnn";
    case Architecture::cifar_cnn: return "cifar_cnn";
    case Architecture::toy_cnn: return "toy_cnn";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view name) {
  for (auto a : {Architecture::mnist_cnn, Architecture::cifar_cnn, Architecture::toy_cnn})
    if (name == to_string(a)) return a;
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

ArchitectureSpec ArchitectureSpec::defaults(Architecture a) {
  switch (a) {
    case Architecture::mnist_cnn: return {a, 1, 28, 28, 10};
    case Architecture::cifar_cnn: return {a, 3, 32, 32, 10};
    case Architecture::toy_cnn: return {a, 1, 8, 8, 4};
  }
  throw ConfigError("unknown architecture id " + std::to_string(static_cast<std::uint32_t>(a)));
}

void ArchitectureSpec::validate() const {
  if (arch != Architecture::mnist_cnn && arch != Architecture::cifar_cnn &&
      arch != Architecture::toy_cnn)
    throw ConfigError("unknown architecture id " + std::to_string(static_cast<std::uint32_t>(arch)));
  if (classes < 2) throw ConfigError("class count must be at least 2");
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("input extents must be positive");
}

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t pad, const char* arch) {
  if (in + 2 * pad < k) throw ConfigError(std::string(arch) + ": input too small for its kernels");
  return in + 2 * pad - k + 1;
}

std::size_t pool_out(std::size_t in, const char* arch) {
  if (in % 2) throw ConfigError(std::string(arch) + ": odd extent before 2x2 pooling");
  return in / 2;
}

}  // namespace

template <typename T>
void Model<T>::add_conv(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t padding) {
  const std::string id = "conv" + std::to_string(layers_.size());
  layers_.push_back({LayerKind::conv, params_.size(), 0, 1, padding});
  params_.emplace_back(Shape{out_c, in_c, k, k});
  names_.push_back(id + ".weight");
  params_.emplace_back(Shape{out_c});
  names_.push_back(id + ".bias");
}

template <typename T>
void Model<T>::add_bn(std::size_t channels) {
  const std::string id = "bn" + std::to_string(layers_.size());
  layers_.push_back({LayerKind::batchnorm, params_.size(), bn_.size(), 1, 0});
  params_.emplace_back(Shape{channels}, T{1});
  names_.push_back(id + ".gamma");
  params_.emplace_back(Shape{channels}, T{0});
  names_.push_back(id + ".beta");
  bn_.push_back({Tensor<T>(Shape{channels}, T{0}), Tensor<T>(Shape{channels}, T{1})});
}

template <typename T>
void Model<T>::add_dense(std::size_t in, std::size_t out) {
  const std::string id = "dense" + std::to_string(layers_.size());
  layers_.push_back({LayerKind::dense, params_.size(), 0, 1, 0});
  params_.emplace_back(Shape{in, out});
  names_.push_back(id + ".weight");
  params_.emplace_back(Shape{out});
  names_.push_back(id + ".bias");
}

template <typename T>
void Model<T>::add_simple(LayerKind kind) {
  layers_.push_back({kind, 0, 0, 1, 0});
}

template <typename T>
Model<T> Model<T>::build(const ArchitectureSpec& spec, std::uint64_t seed, T bn_momentum) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  m.seed_ = seed;
  m.momentum_ = bn_momentum;
  const char* name = to_string(spec.arch).data();
  std::size_t h = spec.height, w = spec.width;
  auto conv_block = [&](std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t pad) {
    m.add_conv(in_c, out_c, k, pad);
    m.add_bn(out_c);
    m.add_simple(LayerKind::relu);
    m.add_simple(LayerKind::maxpool);
    h = pool_out(conv_out(h, k, pad, name), name);
    w = pool_out(conv_out(w, k, pad, name), name);
  };

  switch (spec.arch) {
    case Architecture::mnist_cnn:
      conv_block(spec.channels, 16, 5, 0);
      conv_block(16, 32, 5, 0);
      m.add_simple(LayerKind::flatten);
      m.add_dense(32 * h * w, spec.classes);
      break;
    case Architecture::cifar_cnn:
      conv_block(spec.channels, 16, 3, 1);
      conv_block(16, 16, 3, 1);
      m.add_simple(LayerKind::flatten);
      m.add_dense(16 * h * w, 80);
      m.add_simple(LayerKind::relu);
      m.add_dense(80, 60);
      m.add_simple(LayerKind::relu);
      m.add_dense(60, spec.classes);
      break;
    case Architecture::toy_cnn:
      conv_block(spec.channels, 4, 3, 1);
      m.add_simple(LayerKind::flatten);
      m.add_dense(4 * h * w, spec.classes);
      break;
  }

  Rng rng(derive_seed(seed, Stream::init));
  for (const Layer& l : m.layers_) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::dense) continue;
    Tensor<T>& wt = m.params_[l.param];
    Tensor<T>& bt = m.params_[l.param + 1];
    const std::size_t fan_in = l.kind == LayerKind::conv ? wt.size() / wt.dim(0) : wt.dim(0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : wt.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    for (auto& v : bt.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  }
  return m;
}

template <typename T>
void Model<T>::check_input(const Tensor<T>& input) const {
  const Shape& s = input.shape();
  if (s.size() != 4 || s[1] != spec_.channels || s[2] != spec_.height || s[3] != spec_.width)
    throw DimensionError(std::string(to_string(spec_.arch)) + " expects input [N," +
                         std::to_string(spec_.channels) + "," + std::to_string(spec_.height) + "," +
                         std::to_string(spec_.width) + "], got " + shape_str(s));
}

template <typename T>
template <class ParamFn>
Var<T> Model<T>::run(Tape<T>& tape, Var<T> x, ops::BnMode mode, BnTrace<T>* trace,
                     ParamFn&& param, std::vector<BnStats<T>>* running) const {
  (void)tape;
  check_input(x.value());
  for (const Layer& l : layers_) {
    switch (l.kind) {
      case LayerKind::conv:
        x = ops::conv2d(x, param(l.param), param(l.param + 1), l.stride, l.padding);
        break;
      case LayerKind::batchnorm: {
        ops::BatchNormOutput<T> out;
        if (running)
          out = ops::batchnorm(x, param(l.param), param(l.param + 1), (*running)[l.bn].mean,
                               (*running)[l.bn].var, mode, momentum_);
        else
          out = ops::batchnorm(x, param(l.param), param(l.param + 1), bn_[l.bn].mean,
                               bn_[l.bn].var, mode);
        if (trace) {
          trace->means.push_back(out.batch_mean);
          trace->vars.push_back(out.batch_var);
        }
        x = out.output;
        break;
      }
      case LayerKind::relu: x = ops::relu(x); break;
      case LayerKind::maxpool: x = ops::maxpool2(x); break;
      case LayerKind::flatten: x = ops::flatten(x); break;
      case LayerKind::dense: x = ops::dense(x, param(l.param), param(l.param + 1)); break;
    }
  }
  return x;
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, Var<T> input, ops::BnMode mode, BnTrace<T>* trace) const {
  if (mode == ops::BnMode::train)
    throw UsageError("train-mode passes mutate the model; call forward_train");
  return run(tape, input, mode, trace,
             [&](std::size_t i) { return tape.constant(params_[i]); }, nullptr);
}

template <typename T>
Var<T> Model<T>::forward_train(Tape<T>& tape, Var<T> input, BnTrace<T>* trace) {
  return run(tape, input, ops::BnMode::train, trace,
             [&](std::size_t i) { return tape.leaf(params_[i]); }, &bn_);
}

template <typename T>
Tensor<T> Model<T>::logits(const Tensor<T>& inputs) const {
  check_input(inputs);
  const std::size_t n = inputs.dim(0);
  const std::size_t per = inputs.size() / std::max<std::size_t>(n, 1);
  constexpr std::size_t chunk = 256;
  Tensor<T> out({n, spec_.classes});
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    Tape<T> tape;
    std::vector<T> slice(inputs.data().begin() + static_cast<std::ptrdiff_t>(b * per),
                         inputs.data().begin() + static_cast<std::ptrdiff_t>(e * per));
    Var<T> x = tape.constant(
        Tensor<T>({e - b, spec_.channels, spec_.height, spec_.width}, std::move(slice)));
    const Tensor<T>& z = forward(tape, x, ops::BnMode::eval).value();
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * spec_.classes));
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& inputs) const {
  return ops::softmax(logits(inputs));
}

template <typename T>
std::vector<int> Model<T>::classify(const Tensor<T>& inputs) const {
  const Tensor<T> z = logits(inputs);
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
std::vector<T> Model<T>::flatten_parameters() const {
  std::vector<T> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

template <typename T>
void Model<T>::unflatten_parameters(std::span<const T> flat) {
  if (flat.size() != parameter_count())
    throw DimensionError("parameter vector has " + std::to_string(flat.size()) + " entries, model needs " +
                         std::to_string(parameter_count()));
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + p.size()), p.data().begin());
    off += p.size();
  }
}

template <typename T>
void Model<T>::set_bn_stats(const std::vector<BnStats<T>>& stats) {
  if (stats.size() != bn_.size())
    throw DimensionError("expected " + std::to_string(bn_.size()) + " BN layers, got " +
                         std::to_string(stats.size()));
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (stats[i].mean.size() != bn_[i].mean.size() || stats[i].var.size() != bn_[i].var.size())
      throw DimensionError("BN layer " + std::to_string(i) + " channel count mismatch");
    bn_[i].mean.values() = stats[i].mean.values();
    bn_[i].var.values() = stats[i].var.values();
  }
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
bool Model<T>::same_architecture(const Model& other) const {
  if (!(spec_ == other.spec_) || params_.size() != other.params_.size() || bn_.size() != other.bn_.size())
    return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].shape() != other.params_[i].shape()) return false;
  return true;
}

template <typename T>
std::uint64_t Model<T>::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::span<const T> values) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) mix(p.data());
  for (const auto& s : bn_) {
    mix(s.mean.data());
    mix(s.var.data());
  }
  return h;
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& m) {
  Model<To> out = Model<To>::build(m.spec(), m.seed(), static_cast<To>(m.bn_momentum()));
  const auto flat = m.flatten_parameters();
  std::vector<To> converted(flat.begin(), flat.end());
  out.unflatten_parameters(converted);
  std::vector<BnStats<To>> stats;
  for (const auto& s : m.bn_buffers())
    stats.push_back({Tensor<To>(s.mean.shape(), std::vector<To>(s.mean.data().begin(), s.mean.data().end())),
                     Tensor<To>(s.var.shape(), std::vector<To>(s.var.data().begin(), s.var.data().end()))});
  out.set_bn_stats(stats);
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, float>(const Model<float>&);
template Model<double> convert_model<double, double>(const Model<double>&);

}  // namespace fedzda
