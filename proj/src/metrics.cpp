#include "fedzda/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "fedzda/errors.hpp"
#include "fedzda/rng.hpp"

namespace fedzda {

MeanVariance percent_stats(std::span<const double> fractions) {
  MeanVariance mv;
  if (fractions.empty()) return mv;
  const double n = static_cast<double>(fractions.size());
  double s = 0;
  for (double f : fractions) s += 100.0 * f;
  mv.mean = s / n;
  double v = 0;
  for (double f : fractions) v += (100.0 * f - mv.mean) * (100.0 * f - mv.mean);
  mv.variance = v / n;
  return mv;
}

namespace {

template <typename T>
std::vector<int> predict_all(const Model<T>& model, const Dataset& ds) {
  if (ds.channels != model.spec().channels || ds.height != model.spec().height || ds.width != model.spec().width)
    throw DimensionError("dataset geometry does not match the model input");
  return model.classify(ds.all_images<T>());
}

}  // namespace

template <typename T>
double accuracy(const Model<T>& model, const Dataset& ds) {
  if (ds.empty()) return 0.0;
  const auto pred = predict_all(model, ds);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

template <typename T>
LocalTestStats local_test(const Model<T>& model, std::span<const ClientDataset> clients) {
  LocalTestStats s;
  for (const auto& c : clients) {
    if (c.test.empty()) {
      s.warnings.push_back("client " + std::to_string(c.id) + " has an empty local test split");
      continue;
    }
    s.client_ids.push_back(c.id);
    s.accuracy.push_back(accuracy(model, c.test));
  }
  const auto mv = percent_stats(s.accuracy);
  s.mean = mv.mean, s.variance = mv.variance;
  return s;
}

GlobalTestStats global_test_from_predictions(std::span<const int> labels, std::span<const int> predicted,
                                             std::size_t classes) {
  if (labels.size() != predicted.size()) throw DimensionError("label and prediction counts differ");
  GlobalTestStats g;
  g.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto t = static_cast<std::size_t>(labels[i]), p = static_cast<std::size_t>(predicted[i]);
    if (t >= classes || p >= classes) throw ConfigError("class index out of range");
    ++g.confusion[t][p];
    ok += t == p;
  }
  g.per_class.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t row = std::accumulate(g.confusion[c].begin(), g.confusion[c].end(), std::size_t{0});
    if (row == 0) throw ConfigError("class " + std::to_string(c) + " is absent from the external test set");
    g.per_class[c] = static_cast<double>(g.confusion[c][c]) / static_cast<double>(row);
  }
  g.accuracy = 100.0 * static_cast<double>(ok) / static_cast<double>(labels.size());
  const auto mv = percent_stats(g.per_class);
  g.class_mean = mv.mean, g.class_variance = mv.variance;
  return g;
}

template <typename T>
GlobalTestStats global_test(const Model<T>& model, const Dataset& external) {
  if (external.classes != model.spec().classes) throw ConfigError("external set class count differs from the model");
  const auto pred = predict_all(model, external);
  return global_test_from_predictions(external.labels, pred, external.classes);
}

template <typename T>
Model<T> train_oracle(const Dataset& ds, const ArchitectureSpec& spec, const TrainConfig& cfg, std::uint64_t seed) {
  Model<T> m = Model<T>::build(spec, derive_seed(seed, Stream::init));
  if (cfg.epochs == 0) return m;
  Rng rng(derive_seed(seed, Stream::local_train, {0}));
  return local_update(m, ds, LocalTrainConfig{cfg.epochs, cfg.batch_size, cfg.learning_rate, 0.0}, rng).model;
}

namespace {

std::vector<double> per_class_hits(std::span<const int> labels, std::span<const int> pred, std::size_t classes) {
  std::vector<double> hit(classes, 0), n(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    n[c] += 1;
    hit[c] += pred[i] == labels[i];
  }
  for (std::size_t c = 0; c < classes; ++c) hit[c] = n[c] > 0 ? hit[c] / n[c] : 0.0;
  return hit;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

template <typename T>
OracleReport eval_synthetic(const Model<T>& oracle, const Model<T>& generator, const SyntheticBatch<T>& batch) {
  const auto& os = oracle.spec();
  const auto& gs = generator.spec();
  if (os.classes != batch.classes || gs.classes != batch.classes)
    throw ConfigError("eval_synthetic: class counts of oracle, generator and batch differ");
  if (os.channels != gs.channels || os.height != gs.height || os.width != gs.width)
    throw DimensionError("eval_synthetic: oracle and generator input shapes differ");
  OracleReport r;
  r.oracle_per_class = per_class_hits(batch.labels, oracle.classify(batch.images), batch.classes);
  r.generator_per_class = per_class_hits(batch.labels, generator.classify(batch.images), batch.classes);
  r.oracle_mean = mean_of(r.oracle_per_class);
  r.generator_mean = mean_of(r.generator_per_class);
  return r;
}

bool QualityStudyReport::ordered() const {
  for (std::size_t i = 1; i < regimes.size(); ++i)
    if (regimes[i].test_accuracy > regimes[i - 1].test_accuracy) return false;
  return true;
}

QualityStudyReport model_quality_study(const QualityStudyConfig& cfg, const Dataset& train, const Dataset& test) {
  FedConfig fed = cfg.fed;
  fed.method = Method::fedavg;
  fed.seed = cfg.seed;
  fed.validate();
  const auto initial = Model<float>::build(cfg.arch, derive_seed(cfg.seed, Stream::init));

  PartitionPlan iid = cfg.non_iid;
  iid.mode = PartitionMode::iid;
  iid.clients = fed.clients;
  iid.seed = cfg.seed;
  PartitionPlan non_iid = cfg.non_iid;
  non_iid.clients = fed.clients;
  non_iid.seed = cfg.seed;

  QualityStudyReport rep;
  std::vector<Model<float>> models;

  std::size_t epochs = cfg.central_epochs;
  if (epochs == 0) {
    const double per_client = static_cast<double>(train.size()) * (1.0 - cfg.non_iid.test_fraction) /
                              static_cast<double>(fed.clients);
    const double budget = static_cast<double>(fed.rounds * clients_per_round(fed.clients, fed.participation) *
                                              fed.local_epochs) * per_client;
    epochs = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(budget / static_cast<double>(train.size()))));
  }
  {
    Rng rng(derive_seed(cfg.seed, Stream::local_train, {0}));
    models.push_back(
        local_update(initial, train, LocalTrainConfig{epochs, fed.batch_size, fed.learning_rate, 0.0}, rng).model);
  }
  for (const auto* plan : {&iid, &non_iid}) {
    const auto part = partition(train, *plan);
    models.push_back(run_federation<float>(fed, part.clients, initial).global);
  }

  const char* names[] = {"centralized", "federated_iid", "federated_non_iid"};
  for (std::size_t i = 0; i < models.size(); ++i) {
    QualityRegime r;
    r.name = names[i];
    r.test_accuracy = 100.0 * accuracy(models[i], test);
    auto batch = generate(models[i], cfg.zsdg, derive_seed(cfg.seed, Stream::zsdg_server, {1000 + i}));
    r.zsdg_initial_loss = batch.initial_loss.front().total;
    r.zsdg_final_loss = batch.final_loss.front().total;
    rep.regimes.push_back(r);
    rep.samples.push_back(std::move(batch));
  }
  return rep;
}

template double accuracy(const Model<float>&, const Dataset&);
template double accuracy(const Model<double>&, const Dataset&);
template LocalTestStats local_test(const Model<float>&, std::span<const ClientDataset>);
template LocalTestStats local_test(const Model<double>&, std::span<const ClientDataset>);
template GlobalTestStats global_test(const Model<float>&, const Dataset&);
template GlobalTestStats global_test(const Model<double>&, const Dataset&);
template Model<float> train_oracle(const Dataset&, const ArchitectureSpec&, const TrainConfig&, std::uint64_t);
template Model<double> train_oracle(const Dataset&, const ArchitectureSpec&, const TrainConfig&, std::uint64_t);
template OracleReport eval_synthetic(const Model<float>&, const Model<float>&, const SyntheticBatch<float>&);
template OracleReport eval_synthetic(const Model<double>&, const Model<double>&, const SyntheticBatch<double>&);

}  // namespace fedzda
