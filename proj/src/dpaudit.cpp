#include "fedzda/dpaudit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <tuple>

#include "fedzda/errors.hpp"
#include "fedzda/rng.hpp"

namespace fedzda {

std::size_t BinSpec::index(double v) const {
  if (!(hi > lo)) return 0;
  const double u = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(u > 0)) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(u));
}

BinSpec pooled_bins(std::span<const double> a, std::span<const double> b, std::size_t bins) {
  if (bins == 0) throw ConfigError("bin count must be positive");
  double lo = INFINITY, hi = -INFINITY;
  for (auto s : {a, b})
    for (double v : s) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!(lo <= hi)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;
  return {lo, hi, bins};
}

BinSpec categorical_bins(std::size_t classes) { return {0.0, static_cast<double>(classes), classes}; }

EmpiricalDistribution EmpiricalDistribution::from_samples(std::span<const double> samples, const BinSpec& bins) {
  if (samples.empty()) throw ConfigError("empirical distribution needs at least one sample");
  EmpiricalDistribution d;
  d.bins = bins;
  d.count = samples.size();
  d.samples.assign(samples.begin(), samples.end());
  std::vector<std::size_t> counts(bins.bins, 0);
  for (double v : samples) ++counts[bins.index(v)];
  d.mass.resize(bins.bins);
  for (std::size_t i = 0; i < bins.bins; ++i)
    d.mass[i] = static_cast<double>(counts[i]) / static_cast<double>(samples.size());
  return d;
}

EmpiricalDistribution EmpiricalDistribution::from_masses(std::vector<double> mass, const BinSpec& bins) {
  if (mass.size() != bins.bins) throw ConfigError("mass vector does not match the bin count");
  double total = 0;
  for (double m : mass) {
    if (!(m >= 0)) throw ConfigError("bin masses must be nonnegative");
    total += m;
  }
  if (!(total > 0)) throw ConfigError("bin masses sum to zero");
  for (double& m : mass) m /= total;
  EmpiricalDistribution d;
  d.bins = bins;
  d.mass = std::move(mass);
  d.count = 1;
  return d;
}

namespace {

double plug_in(std::span<const double> p, std::span<const double> q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return std::min(1.0, 0.5 * s);
}

std::uint64_t hash_values(std::span<const double> v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    for (int i = 0; i < 8; ++i) h = (h ^ ((bits >> (8 * i)) & 0xff)) * 1099511628211ULL;
  }
  return h;
}

std::vector<double> histogram(std::span<const double> samples, const BinSpec& bins) {
  std::vector<double> m(bins.bins, 0.0);
  for (double v : samples) m[bins.index(v)] += 1.0;
  for (double& x : m) x /= static_cast<double>(samples.size());
  return m;
}

}  // namespace

TvEstimate estimate_tv(const EmpiricalDistribution& p0, const EmpiricalDistribution& q0, std::size_t resamples) {
  if (!(p0.bins == q0.bins) || p0.mass.size() != q0.mass.size())
    throw ConfigError("estimate_tv: distributions use different binning");
  // Canonical argument order makes every draw below independent of the call order.
  const auto key = [](const EmpiricalDistribution& d) {
    return std::make_tuple(d.samples.size(), hash_values(d.samples), hash_values(d.mass));
  };
  const bool swap = key(q0) < key(p0);
  const EmpiricalDistribution& p = swap ? q0 : p0;
  const EmpiricalDistribution& q = swap ? p0 : q0;

  TvEstimate r;
  r.tv = plug_in(p.mass, q.mass);
  r.debiased = r.tv;
  if (p.samples.empty() || q.samples.empty() || resamples == 0) return r;

  const std::uint64_t hp = hash_values(p.samples), hq = hash_values(q.samples);
  Rng rp(derive_seed(hp, Stream::bootstrap)), rq(derive_seed(hq, Stream::bootstrap));
  std::vector<double> bp(p.samples.size()), bq(q.samples.size());
  double s = 0, s2 = 0;
  for (std::size_t b = 0; b < resamples; ++b) {
    for (auto& v : bp) v = p.samples[rp.below(p.samples.size())];
    for (auto& v : bq) v = q.samples[rq.below(q.samples.size())];
    const double tv = plug_in(histogram(bp, p.bins), histogram(bq, q.bins));
    s += tv, s2 += tv * tv;
  }
  const double n = static_cast<double>(resamples);
  const double mean = s / n;
  r.std_error = resamples > 1 ? std::sqrt(std::max(0.0, (s2 - n * mean * mean) / (n - 1))) : 0.0;

  std::vector<double> pooled(p.samples);
  pooled.insert(pooled.end(), q.samples.begin(), q.samples.end());
  Rng rn(derive_seed(hp, Stream::probe, {hq}));
  double ns = 0;
  const auto split = static_cast<std::ptrdiff_t>(p.samples.size());
  for (std::size_t b = 0; b < resamples; ++b) {
    rn.shuffle(pooled.begin(), pooled.end());
    ns += plug_in(histogram({pooled.data(), p.samples.size()}, p.bins),
                  histogram({pooled.data() + split, q.samples.size()}, p.bins));
  }
  r.null_mean = ns / n;
  r.debiased = std::max(0.0, r.tv - r.null_mean);
  return r;
}

template <typename T>
std::vector<double> project_model(const Model<T>& model, const Tensor<T>& probe) {
  const auto& params = model.parameters();
  const auto& names = model.parameter_names();
  std::size_t last = params.size();
  for (std::size_t i = params.size(); i-- > 0;)
    if (names[i].size() >= 7 && names[i].compare(names[i].size() - 7, 7, ".weight") == 0) {
      last = i;
      break;
    }
  std::vector<double> out;
  double sq = 0;
  if (last < params.size())
    for (T v : params[last].values()) sq += static_cast<double>(v) * static_cast<double>(v);
  out.push_back(std::sqrt(sq));

  const Tensor<T> logits = model.logits(probe);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) mean[c] += static_cast<double>(logits[i * k + c]);
  for (double& m : mean) out.push_back(m / static_cast<double>(n));
  return out;
}

template std::vector<double> project_model(const Model<float>&, const Tensor<float>&);
template std::vector<double> project_model(const Model<double>&, const Tensor<double>&);

void AuditConfig::validate() const {
  arch.validate();
  if (runs < 30) throw ConfigError("audit.runs: K = " + std::to_string(runs) + " is too small; use at least 30");
  if (bins == 0) throw ConfigError("audit.bins: must be positive");
  if (probe_size == 0) throw ConfigError("audit.probe_size: must be positive");
  if (train.epochs == 0 || train.batch_size == 0) throw ConfigError("audit.train: epochs and batch size must be positive");
  zsdg.validate(true);
}

namespace {

TvEstimate max_coordinate(const std::vector<TvEstimate>& coords) {
  TvEstimate best;
  for (std::size_t i = 0; i < coords.size(); ++i)
    if (i == 0 || coords[i].debiased > best.debiased) best = coords[i];
  return best;
}

nlohmann::json tv_json(const TvEstimate& t) {
  return {{"tv", t.tv}, {"std_error", t.std_error}, {"null_mean", t.null_mean}, {"debiased", t.debiased}};
}

std::vector<TvEstimate> coordinate_tvs(const std::vector<std::vector<double>>& a,
                                       const std::vector<std::vector<double>>& b, const AuditConfig& cfg) {
  const std::size_t dims = a.front().size();
  std::vector<TvEstimate> out;
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<double> xa, xb;
    for (const auto& s : a) xa.push_back(s[d]);
    for (const auto& s : b) xb.push_back(s[d]);
    const BinSpec bins = pooled_bins(xa, xb, cfg.bins);
    out.push_back(estimate_tv(EmpiricalDistribution::from_samples(xa, bins),
                              EmpiricalDistribution::from_samples(xb, bins), cfg.resamples));
  }
  return out;
}

LinkVerdict link(const std::string& name, const TvEstimate& lhs, const TvEstimate& rhs) {
  LinkVerdict v;
  v.name = name;
  v.lhs = lhs.debiased;
  v.rhs = rhs.debiased;
  v.tolerance = 2.0 * std::sqrt(lhs.std_error * lhs.std_error + rhs.std_error * rhs.std_error);
  v.pass = v.lhs <= v.rhs + v.tolerance;
  return v;
}

}  // namespace

nlohmann::json AuditReport::to_json() const {
  nlohmann::json j;
  j["runs"] = runs;
  j["clients"] = clients;
  j["quota_sweep"] = quota_sweep;
  j["data_sweep"] = nlohmann::json::array();
  for (const auto& t : data_sweep) j["data_sweep"].push_back(tv_json(t));
  j["data_non_increasing"] = data_non_increasing;
  j["delta_data"] = tv_json(data);
  j["delta_model"] = tv_json(model);
  j["delta_agg"] = tv_json(agg);
  j["model_coordinates"] = nlohmann::json::array();
  for (const auto& t : model_coords) j["model_coordinates"].push_back(tv_json(t));
  j["agg_coordinates"] = nlohmann::json::array();
  for (const auto& t : agg_coords) j["agg_coordinates"].push_back(tv_json(t));
  j["links"] = nlohmann::json::array();
  for (const auto& l : links)
    j["links"].push_back({{"name", l.name}, {"lhs", l.lhs}, {"rhs", l.rhs}, {"tolerance", l.tolerance}, {"pass", l.pass}});
  j["pass"] = pass;
  j["verdict"] = verdict;
  j["samples"] = {{"model", model_samples}, {"agg", agg_samples}};
  j["note"] = note;
  return j;
}

AuditReport audit_chain(std::span<const Dataset> a, std::span<const Dataset> b, const AuditConfig& cfg) {
  cfg.validate();
  if (a.empty() || a.size() != b.size()) throw ConfigError("audit: client sets must be nonempty and equally sized");
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i].labels != b[i].labels || a[i].images != b[i].images)
      throw ConfigError("audit: client sets must share every client but the first");
  for (const auto* set : {&a, &b})
    for (const auto& d : *set)
      if (d.empty()) throw ConfigError("audit: empty client dataset");

  const std::size_t n = a.size();
  AuditReport rep;
  rep.runs = cfg.runs;
  rep.clients = n;
  rep.quota_sweep = cfg.quota_sweep;
  rep.note = "TVs are measured on declared projections only: the label marginal of the differing client's "
             "augmented data, and the final-layer weight norm plus per-class mean probe logits of the models.";

  // Probe batch: shared clients' data when there are any, else seeded noise.
  const auto& s = cfg.arch;
  Tensor<float> probe({cfg.probe_size, s.channels, s.height, s.width});
  {
    std::size_t filled = 0;
    const std::size_t sz = probe.size() / cfg.probe_size;
    for (std::size_t i = 1; i < n && filled < cfg.probe_size; ++i)
      for (std::size_t k = 0; k < a[i].size() && filled < cfg.probe_size; ++k, ++filled) {
        auto im = a[i].image(k);
        std::copy(im.begin(), im.end(), probe.data().begin() + static_cast<std::ptrdiff_t>(filled * sz));
      }
    Rng rng(derive_seed(cfg.seed, Stream::probe));
    for (std::size_t j = filled * sz; j < probe.size(); ++j)
      probe.data()[j] = static_cast<float>(std::clamp(0.5 + 0.25 * rng.normal(), 0.0, 1.0));
  }

  const Model<float> reference = Model<float>::build(s, derive_seed(cfg.seed, Stream::init));
  auto augmented = [&](const Dataset& d, std::size_t quota, std::uint64_t seed, const Model<float>& from) {
    Dataset out = d;
    if (quota > 0) {
      ZsdgConfig z = cfg.zsdg;
      z.per_class = quota;
      out.append(generate(from, z, seed).to_dataset());
    }
    return out;
  };

  for (std::size_t qi = 0; qi < cfg.quota_sweep.size(); ++qi) {
    const std::size_t q = cfg.quota_sweep[qi];
    const Dataset da = augmented(a[0], q, derive_seed(cfg.seed, Stream::zsdg_client, {0, q}), reference);
    const Dataset db = augmented(b[0], q, derive_seed(cfg.seed, Stream::zsdg_client, {1, q}), reference);
    std::vector<double> la(da.labels.begin(), da.labels.end()), lb(db.labels.begin(), db.labels.end());
    const BinSpec bins = categorical_bins(s.classes);
    rep.data_sweep.push_back(estimate_tv(EmpiricalDistribution::from_samples(la, bins),
                                         EmpiricalDistribution::from_samples(lb, bins), cfg.resamples));
  }
  rep.data_non_increasing = true;
  for (std::size_t i = 1; i < rep.data_sweep.size(); ++i)
    if (rep.data_sweep[i].tv > rep.data_sweep[i - 1].tv) rep.data_non_increasing = false;

  {
    const Dataset da = augmented(a[0], cfg.quota, derive_seed(cfg.seed, Stream::zsdg_client, {0, cfg.quota}), reference);
    const Dataset db = augmented(b[0], cfg.quota, derive_seed(cfg.seed, Stream::zsdg_client, {1, cfg.quota}), reference);
    std::vector<double> la(da.labels.begin(), da.labels.end()), lb(db.labels.begin(), db.labels.end());
    const BinSpec bins = categorical_bins(s.classes);
    rep.data = estimate_tv(EmpiricalDistribution::from_samples(la, bins), EmpiricalDistribution::from_samples(lb, bins),
                           cfg.resamples);
  }

  const double wc = 1.0 / static_cast<double>(n);
  rep.model_samples.assign(2, {});
  rep.agg_samples.assign(2, {});
  for (std::size_t side = 0; side < 2; ++side) {
    const auto& set = side == 0 ? a : b;
    for (std::size_t k = 0; k < cfg.runs; ++k) {
      const std::uint64_t run_seed = derive_seed(cfg.seed, {side, k});
      const auto init = Model<float>::build(s, derive_seed(run_seed, Stream::init));
      const Dataset dc = augmented(set[0], cfg.quota, derive_seed(run_seed, Stream::zsdg_client, {0}), init);
      Rng rc(derive_seed(run_seed, Stream::local_train, {0}));
      const Model<float> w = local_update(init, dc, cfg.train, rc).model;

      Model<float> agg = w;
      if (n > 1) {
        std::vector<Model<float>> shared;
        for (std::size_t i = 1; i < n; ++i) {
          Rng ri(derive_seed(run_seed, Stream::local_train, {i}));
          shared.push_back(local_update(init, set[i], cfg.train, ri).model);
        }
        const std::vector<double> uniform(n - 1, 1.0 / static_cast<double>(n - 1));
        const Model<float> w0 = aggregate(shared, uniform);
        const std::vector<Model<float>> pair{w, w0};
        const double mix[] = {wc, 1.0 - wc};
        agg = aggregate(pair, mix);
      }
      rep.model_samples[side].push_back(project_model(w, probe));
      rep.agg_samples[side].push_back(project_model(agg, probe));
    }
  }
  rep.model_coords = coordinate_tvs(rep.model_samples[0], rep.model_samples[1], cfg);
  rep.agg_coords = coordinate_tvs(rep.agg_samples[0], rep.agg_samples[1], cfg);
  rep.model = max_coordinate(rep.model_coords);
  rep.agg = max_coordinate(rep.agg_coords);

  rep.links.push_back(link("agg<=model", rep.agg, rep.model));
  TvEstimate data_exact = rep.data;
  data_exact.debiased = rep.data.tv;
  rep.links.push_back(link("model<=data", rep.model, data_exact));
  LinkVerdict mono;
  mono.name = "data non-increasing over quota sweep";
  mono.pass = rep.data_non_increasing;
  rep.links.push_back(mono);

  rep.pass = std::all_of(rep.links.begin(), rep.links.end(), [](const LinkVerdict& l) { return l.pass; });
  const bool near_zero = rep.model.debiased <= 2 * rep.model.std_error && rep.agg.debiased <= 2 * rep.agg.std_error &&
                         rep.data.tv <= 2 * rep.data.std_error;
  rep.verdict = std::string(rep.pass ? "pass" : "fail") + (near_zero ? ", TV ≈ 0" : "");
  return rep;
}

}  // namespace fedzda
