#include "fedzda/zsdg.hpp"

#include <algorithm>
#include <cmath>

#include "fedzda/errors.hpp"
#include "fedzda/ops.hpp"
#include "fedzda/rng.hpp"

namespace fedzda {

std::string to_string(ZsdgOptimizer o) { return o == ZsdgOptimizer::adam ? "adam" : "sgd"; }

ZsdgOptimizer parse_zsdg_optimizer(const std::string& name) {
  if (name == "adam") return ZsdgOptimizer::adam;
  if (name == "sgd") return ZsdgOptimizer::sgd;
  throw ConfigError("zsdg.optimizer: unknown optimizer '" + name + "' (adam|sgd)");
}

void ZsdgConfig::validate(bool allow_empty) const {
  if (per_class == 0 && !allow_empty) throw ConfigError("zsdg.per_class: must be at least 1");
  if (!(step_size > 0) || !std::isfinite(step_size)) throw ConfigError("zsdg.step_size: must be positive");
  if (!(init_std >= 0) || !std::isfinite(init_mean)) throw ConfigError("zsdg.init_std: must be nonnegative");
  if (lambda_bn < 0 || lambda_ce < 0) throw ConfigError("zsdg.lambda_bn/lambda_ce: must be nonnegative");
  if (lambda_bn == 0 && lambda_ce == 0) throw ConfigError("zsdg.lambda_bn/lambda_ce: not both zero");
  if (!(clamp_min < clamp_max)) throw ConfigError("zsdg.clamp_min: must be below clamp_max");
}

template <typename T>
ZsdgLoss<T> zsdg_loss(Tape<T>& tape, const Model<T>& model, Var<T> x, std::span<const int> targets,
                      double lambda_bn, double lambda_ce) {
  BnTrace<T> trace;
  Var<T> logits = model.forward(tape, x, ops::BnMode::probe, &trace);
  const auto& stored = model.bn_buffers();

  Var<T> bn;
  for (std::size_t l = 0; l < trace.means.size(); ++l) {
    Var<T> term = ops::add(ops::squared_distance(trace.means[l], stored[l].mean),
                           ops::squared_distance(trace.vars[l], stored[l].var));
    bn = bn.attached() ? ops::add(bn, term) : term;
  }
  if (!bn.attached()) bn = tape.constant(Tensor<T>(Shape{}, T{0}));
  Var<T> ce = ops::softmax_xent(logits, targets);

  ZsdgLoss<T> out;
  out.total = ops::add(ops::scale(bn, static_cast<T>(lambda_bn)), ops::scale(ce, static_cast<T>(lambda_ce)));
  out.breakdown.bn = static_cast<double>(bn.value()[0]);
  out.breakdown.ce = static_cast<double>(ce.value()[0]);
  out.breakdown.total = static_cast<double>(out.total.value()[0]);
  return out;
}

template <typename T>
ZsdgLossBreakdown zsdg_loss_value(const Model<T>& model, const Tensor<T>& x, std::span<const int> targets,
                                  double lambda_bn, double lambda_ce) {
  Tape<T> tape;
  return zsdg_loss(tape, model, tape.constant(x), targets, lambda_bn, lambda_ce).breakdown;
}

template <typename T>
Tensor<T> SyntheticBatch<T>::one_hot() const {
  Tensor<T> t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t.data()[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  return t;
}

template <typename T>
Dataset SyntheticBatch<T>::to_dataset() const {
  Dataset d;
  d.classes = classes;
  if (images.rank() == 4) d.channels = images.dim(1), d.height = images.dim(2), d.width = images.dim(3);
  d.images.assign(images.values().begin(), images.values().end());
  d.labels = labels;
  return d;
}

template <typename T>
std::vector<std::size_t> SyntheticBatch<T>::class_counts() const {
  std::vector<std::size_t> h(classes, 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

namespace {

template <typename T>
std::vector<double> per_class_xent(const Model<T>& model, const Tensor<T>& x, std::span<const int> labels,
                                   std::size_t classes) {
  Tape<T> tape(false);
  Var<T> logits = model.forward(tape, tape.constant(x), ops::BnMode::probe);
  const Tensor<T> p = ops::softmax(logits.value());
  std::vector<double> sum(classes, 0.0);
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    sum[c] -= std::log(std::max(static_cast<double>(p[i * classes + c]), 1e-300));
    ++count[c];
  }
  for (std::size_t c = 0; c < classes; ++c) sum[c] = count[c] ? sum[c] / static_cast<double>(count[c]) : 0.0;
  return sum;
}

}  // namespace

template <typename T>
SyntheticBatch<T> generate(const Model<T>& model, const ZsdgConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& spec = model.spec();
  const std::size_t N = spec.classes, M = N * cfg.per_class;

  SyntheticBatch<T> out;
  out.classes = N;
  out.labels.resize(M);
  for (std::size_t i = 0; i < M; ++i) out.labels[i] = static_cast<int>(i / cfg.per_class);
  out.source.assign(M, 0);

  Tensor<T> x({M, spec.channels, spec.height, spec.width});
  Rng rng(seed);
  const T lo = static_cast<T>(cfg.clamp_min), hi = static_cast<T>(cfg.clamp_max);
  for (T& v : x.values()) v = std::clamp(static_cast<T>(cfg.init_mean + cfg.init_std * rng.normal()), lo, hi);
  x.set_requires_grad(true);

  std::vector<T> m1(x.size(), T{0}), m2(x.size(), T{0});
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double b1t = 1, b2t = 1;
  const T step = static_cast<T>(cfg.step_size);
  out.loss_history.reserve(cfg.iterations);

  Tape<T> tape;
  for (std::size_t j = 0; j < cfg.iterations; ++j) {
    x.zero_grad();
    ZsdgLossBreakdown b;
    try {
      auto loss = zsdg_loss(tape, model, tape.leaf(x), out.labels, cfg.lambda_bn, cfg.lambda_ce);
      b = loss.breakdown;
      if (!std::isfinite(b.total)) throw NumericError("loss is " + std::to_string(b.total));
      tape.backward(loss.total);
    } catch (const NumericError& e) {
      tape.clear();
      throw NumericError("zsdg: non-finite value at iteration " + std::to_string(j) + ": " + e.what());
    }
    if (j == 0) out.initial_loss.push_back(b);
    out.loss_history.push_back(b.total);

    auto g = x.grad();
    auto& v = x.values();
    if (cfg.optimizer == ZsdgOptimizer::adam) {
      b1t *= beta1, b2t *= beta2;
      const T c1 = static_cast<T>(1 / (1 - b1t)), c2 = static_cast<T>(1 / (1 - b2t));
      for (std::size_t i = 0; i < v.size(); ++i) {
        m1[i] = static_cast<T>(beta1) * m1[i] + static_cast<T>(1 - beta1) * g[i];
        m2[i] = static_cast<T>(beta2) * m2[i] + static_cast<T>(1 - beta2) * g[i] * g[i];
        const T mh = m1[i] * c1, vh = m2[i] * c2;
        v[i] = std::clamp(v[i] - step * mh / (std::sqrt(vh) + static_cast<T>(adam_eps)), lo, hi);
      }
    } else {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i] - step * g[i], lo, hi);
    }
  }
  x.set_requires_grad(false);

  ZsdgLossBreakdown fin;
  try {
    fin = zsdg_loss_value(model, x, out.labels, cfg.lambda_bn, cfg.lambda_ce);
  } catch (const NumericError& e) {
    throw NumericError("zsdg: non-finite value at iteration " + std::to_string(cfg.iterations) + ": " + e.what());
  }
  if (cfg.iterations == 0) out.initial_loss.push_back(fin);
  out.final_loss.push_back(fin);
  out.class_loss = per_class_xent(model, x, out.labels, N);
  out.images = std::move(x);
  return out;
}

template <typename T>
SyntheticBatch<T> generate_balanced(std::span<const Model<T>* const> models, std::size_t per_class,
                                    const ZsdgConfig& cfg, std::uint64_t seed) {
  if (models.empty()) throw ConfigError("generate_balanced needs at least one model");
  ZsdgConfig c = cfg;
  c.per_class = per_class;
  SyntheticBatch<T> out;
  std::vector<T> pixels;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (!models[i]->same_architecture(*models[0]))
      throw ConfigError("generate_balanced: models differ in architecture");
    SyntheticBatch<T> b = generate(*models[i], c, derive_seed(seed, {i}));
    if (i == 0) {
      out.classes = b.classes;
      out.loss_history = b.loss_history;
      out.class_loss.assign(b.classes, 0.0);
    }
    pixels.insert(pixels.end(), b.images.values().begin(), b.images.values().end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.source.insert(out.source.end(), b.size(), i);
    out.initial_loss.push_back(b.initial_loss.front());
    out.final_loss.push_back(b.final_loss.front());
    for (std::size_t k = 0; k < b.classes; ++k) out.class_loss[k] += b.class_loss[k] / static_cast<double>(models.size());
  }
  const auto& s = models[0]->spec();
  out.images = Tensor<T>({out.labels.size(), s.channels, s.height, s.width}, std::move(pixels));
  return out;
}

template struct SyntheticBatch<float>;
template struct SyntheticBatch<double>;
template ZsdgLoss<float> zsdg_loss(Tape<float>&, const Model<float>&, Var<float>, std::span<const int>, double, double);
template ZsdgLoss<double> zsdg_loss(Tape<double>&, const Model<double>&, Var<double>, std::span<const int>, double,
                                    double);
template ZsdgLossBreakdown zsdg_loss_value(const Model<float>&, const Tensor<float>&, std::span<const int>, double,
                                           double);
template ZsdgLossBreakdown zsdg_loss_value(const Model<double>&, const Tensor<double>&, std::span<const int>,
                                           double, double);
template SyntheticBatch<float> generate(const Model<float>&, const ZsdgConfig&, std::uint64_t);
template SyntheticBatch<double> generate(const Model<double>&, const ZsdgConfig&, std::uint64_t);
template SyntheticBatch<float> generate_balanced(std::span<const Model<float>* const>, std::size_t,
                                                 const ZsdgConfig&, std::uint64_t);
template SyntheticBatch<double> generate_balanced(std::span<const Model<double>* const>, std::size_t,
                                                  const ZsdgConfig&, std::uint64_t);

}  // namespace fedzda
