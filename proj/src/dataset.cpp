#include "fedzda/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "fedzda/errors.hpp"
#include "fedzda/rng.hpp"

namespace fedzda {

// ---- Dataset ---------------------------------------------------------------

std::span<const float> Dataset::image(std::size_t i) const {
  return std::span<const float>(images).subspan(i * image_size(), image_size());
}

Dataset Dataset::like() const {
  Dataset d;
  d.channels = channels, d.height = height, d.width = width, d.classes = classes;
  return d;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d = like();
  d.images.reserve(indices.size() * image_size());
  d.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    auto im = image(i);
    d.images.insert(d.images.end(), im.begin(), im.end());
    d.labels.push_back(labels[i]);
  }
  return d;
}

void Dataset::append(const Dataset& other) {
  if (other.empty()) return;
  if (other.image_size() != image_size() || other.classes != classes)
    throw DimensionError("cannot append datasets of different geometry");
  images.insert(images.end(), other.images.begin(), other.images.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

void Dataset::push_back(std::span<const float> im, int label) {
  if (im.size() != image_size()) throw DimensionError("image size mismatch in push_back");
  images.insert(images.end(), im.begin(), im.end());
  labels.push_back(label);
}

std::vector<std::size_t> Dataset::histogram() const {
  std::vector<std::size_t> h(classes, 0);
  for (int l : labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

void Dataset::validate() const {
  if (images.size() != labels.size() * image_size())
    throw ConfigError("dataset has " + std::to_string(images.size()) + " pixels for " +
                      std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw ConfigError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
  for (float v : images)
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("pixel value outside [0, 1]");
}

template <typename T>
Tensor<T> Dataset::batch(std::span<const std::size_t> indices) const {
  Tensor<T> t({indices.size(), channels, height, width});
  T* out = t.data().data();
  for (std::size_t i : indices) {
    auto im = image(i);
    out = std::copy(im.begin(), im.end(), out);
  }
  return t;
}

template <typename T>
Tensor<T> Dataset::all_images() const {
  return Tensor<T>({size(), channels, height, width}, std::vector<T>(images.begin(), images.end()));
}

template Tensor<float> Dataset::batch<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::batch<double>(std::span<const std::size_t>) const;
template Tensor<float> Dataset::all_images<float>() const;
template Tensor<double> Dataset::all_images<double>() const;

// ---- ingestion -------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw ParseError(ParseError::Kind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw ParseError(ParseError::Kind::io, "read error in " + path.string());
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

std::string hex(std::uint32_t v) {
  char s[16];
  std::snprintf(s, sizeof s, "0x%08x", v);
  return s;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t classes) {
  const auto img = read_maybe_gzip(images_path);
  const auto lab = read_maybe_gzip(labels_path);
  if (img.size() < 16)
    throw ParseError(ParseError::Kind::truncated, images_path.string() + ": header truncated");
  if (lab.size() < 8)
    throw ParseError(ParseError::Kind::truncated, labels_path.string() + ": header truncated");
  if (be32(img, 0) != 0x00000803)
    throw ParseError(ParseError::Kind::bad_magic, images_path.string() + ": magic " + hex(be32(img, 0)) +
                                                      ", expected 0x00000803");
  if (be32(lab, 0) != 0x00000801)
    throw ParseError(ParseError::Kind::bad_magic, labels_path.string() + ": magic " + hex(be32(lab, 0)) +
                                                      ", expected 0x00000801");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (n != nl)
    throw ParseError(ParseError::Kind::count_mismatch, "image file holds " + std::to_string(n) +
                                                           " items, label file " + std::to_string(nl));
  if (img.size() < 16 + n * rows * cols)
    throw ParseError(ParseError::Kind::truncated,
                     images_path.string() + ": pixel data truncated at byte offset " + std::to_string(img.size()));
  if (lab.size() < 8 + n)
    throw ParseError(ParseError::Kind::truncated,
                     labels_path.string() + ": label data truncated at byte offset " + std::to_string(lab.size()));

  Dataset d;
  d.channels = 1, d.height = rows, d.width = cols, d.classes = classes;
  d.images.resize(n * rows * cols);
  for (std::size_t i = 0; i < d.images.size(); ++i) d.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(d.labels[i]) >= classes)
      throw ParseError(ParseError::Kind::bad_format,
                       "label " + std::to_string(d.labels[i]) + " at item " + std::to_string(i) + " >= " +
                           std::to_string(classes) + " classes");
  }
  return d;
}

Dataset load_cifar10_file(const std::filesystem::path& file) {
  constexpr std::size_t record = 1 + 3072;
  const auto bytes = read_maybe_gzip(file);
  if (bytes.size() % record != 0)
    throw ParseError(ParseError::Kind::truncated,
                     file.string() + ": truncated record at byte offset " +
                         std::to_string(bytes.size() / record * record));
  Dataset d;
  d.channels = 3, d.height = 32, d.width = 32, d.classes = 10;
  const std::size_t n = bytes.size() / record;
  d.images.resize(n * 3072);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * record;
    if (r[0] > 9)
      throw ParseError(ParseError::Kind::bad_format,
                       file.string() + ": label " + std::to_string(r[0]) + " at byte offset " +
                           std::to_string(i * record));
    d.labels[i] = r[0];
    for (std::size_t j = 0; j < 3072; ++j) d.images[i * 3072 + j] = static_cast<float>(r[1 + j]) / 255.0f;
  }
  return d;
}

Dataset load_cifar10(const std::filesystem::path& dir, CifarSplit split) {
  std::vector<std::string> files;
  if (split == CifarSplit::train)
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  else
    files.push_back("test_batch.bin");
  Dataset all;
  for (const auto& name : files) {
    Dataset part = load_cifar10_file(dir / name);
    if (part.size() != 10000)
      throw ParseError(ParseError::Kind::count_mismatch,
                       (dir / name).string() + ": " + std::to_string(part.size()) + " records, expected 10000");
    if (all.empty() && all.images.empty())
      all = std::move(part);
    else
      all.append(part);
  }
  return all;
}

Dataset make_toy_dataset(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                         std::size_t channels, std::size_t height, std::size_t width, double noise) {
  if (classes < 2) throw ConfigError("toy dataset needs at least 2 classes");
  Dataset d;
  d.channels = channels, d.height = height, d.width = width, d.classes = classes;
  const std::size_t pixels = d.image_size();

  // Prototypes depend on the geometry only, so datasets drawn with different
  // seeds describe the same task.
  Rng proto_rng(derive_seed(0x70726f746fULL, {classes, channels, height, width}));
  std::vector<std::vector<float>> proto(classes, std::vector<float>(pixels));
  for (auto& p : proto)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t by = 0; by < height; by += 2)
        for (std::size_t bx = 0; bx < width; bx += 2) {
          const float v = proto_rng.uniform() < 0.5 ? 0.2f : 0.8f;
          for (std::size_t y = by; y < std::min(height, by + 2); ++y)
            for (std::size_t x = bx; x < std::min(width, bx + 2); ++x) p[(c * height + y) * width + x] = v;
        }

  Rng rng(seed);
  d.images.reserve(classes * per_class * pixels);
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    const std::size_t label = i % classes;
    for (std::size_t j = 0; j < pixels; ++j) {
      const double v = proto[label][j] + noise * rng.normal();
      d.images.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
    }
    d.labels.push_back(static_cast<int>(label));
  }
  return d;
}

// ---- partitioning ----------------------------------------------------------

std::string to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::unimodal: return "unimodal";
    case PartitionMode::multimodal: return "multimodal";
    case PartitionMode::iid: return "iid";
  }
  return "unknown";
}

PartitionMode parse_partition_mode(const std::string& name) {
  for (auto m : {PartitionMode::unimodal, PartitionMode::multimodal, PartitionMode::iid})
    if (name == to_string(m)) return m;
  throw ConfigError("unknown partition mode '" + name + "'");
}

void PartitionPlan::validate(std::size_t classes) const {
  if (clients == 0) throw ConfigError("partition.clients must be positive");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("partition.test_fraction must lie in (0, 1)");
  if (mode == PartitionMode::unimodal && shards_per_client == 0)
    throw ConfigError("partition.shards_per_client must be positive");
  if (mode == PartitionMode::multimodal) {
    if (groups.empty()) throw ConfigError("partition.groups is empty for multimodal mode");
    double total = 0;
    std::set<int> seen;
    for (const auto& g : groups) {
      if (g.weight < 0) throw ConfigError("partition.groups weight must be nonnegative");
      if (g.classes.empty()) throw ConfigError("partition.groups entry without classes");
      total += g.weight;
      for (int c : g.classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= classes)
          throw ConfigError("partition.groups class " + std::to_string(c) + " out of range");
        if (!seen.insert(c).second)
          throw ConfigError("partition.groups class " + std::to_string(c) + " appears in two groups");
      }
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("partition.groups weights must sum to 1");
  }
}

namespace {

ClientDataset make_client(const Dataset& ds, std::size_t id, const std::vector<std::size_t>& idx) {
  ClientDataset c;
  c.id = id;
  c.train = ds.subset(idx);
  c.test = ds.like();
  c.histogram = c.train.histogram();
  return c;
}

}  // namespace

std::vector<ClientDataset> partition_unimodal(const Dataset& ds, std::size_t clients,
                                              std::size_t shards_per_client, std::uint64_t seed) {
  if (clients == 0 || shards_per_client == 0) throw ConfigError("client and shard counts must be positive");
  const std::size_t shards = clients * shards_per_client;
  if (ds.size() < shards)
    throw ConfigError("unimodal partition needs at least " + std::to_string(shards) + " items, got " +
                      std::to_string(ds.size()));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });
  const std::size_t shard_size = ds.size() / shards;

  std::vector<std::size_t> shard_ids(shards);
  std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
  Rng rng(derive_seed(seed, Stream::partition));
  rng.shuffle(shard_ids.begin(), shard_ids.end());

  std::vector<ClientDataset> out;
  out.reserve(clients);
  for (std::size_t c = 0; c < clients; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t s = 0; s < shards_per_client; ++s) {
      const std::size_t shard = shard_ids[c * shards_per_client + s];
      const std::size_t begin = shard * shard_size;
      const std::size_t end = shard + 1 == shards ? ds.size() : begin + shard_size;
      idx.insert(idx.end(), order.begin() + static_cast<std::ptrdiff_t>(begin),
                 order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    out.push_back(make_client(ds, c, idx));
  }
  return out;
}

std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(wsum > 0)) throw ConfigError("apportionment needs positive total weight");
  std::vector<std::size_t> seats(weights.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    seats[i] = static_cast<std::size_t>(std::floor(exact));
    given += seats[i];
    rema.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; given < total; ++r, ++given) ++seats[rema[r % rema.size()].second];
  return seats;
}

std::vector<ClassGroup> contiguous_groups(std::size_t classes, std::span<const double> weights) {
  const std::size_t g = weights.size();
  if (g == 0 || g > classes) throw ConfigError("need between 1 and " + std::to_string(classes) + " groups");
  std::vector<ClassGroup> groups(g);
  for (std::size_t c = 0; c < classes; ++c) groups[c * g / classes].classes.push_back(static_cast<int>(c));
  for (std::size_t i = 0; i < g; ++i) groups[i].weight = weights[i];
  return groups;
}

PartitionResult partition_multimodal(const Dataset& ds, std::size_t clients,
                                     const std::vector<ClassGroup>& groups, std::uint64_t seed) {
  PartitionPlan plan;
  plan.mode = PartitionMode::multimodal;
  plan.clients = clients;
  plan.groups = groups;
  plan.validate(ds.classes);

  std::vector<double> weights;
  for (const auto& g : groups) weights.push_back(g.weight);
  const auto seats = largest_remainder(clients, weights);

  PartitionResult result;
  double max_density = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (seats[g] > 0) max_density = std::max(max_density, groups[g].weight / static_cast<double>(groups[g].classes.size()));

  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(derive_seed(seed, Stream::partition));
  std::vector<ClientDataset> out;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (seats[g] == 0) {
      std::string cls;
      for (int c : groups[g].classes) cls += (cls.empty() ? "" : ",") + std::to_string(c);
      result.warnings.push_back("group {" + cls + "} with weight " + std::to_string(groups[g].weight) +
                                " received no clients; its items are unused");
      continue;
    }
    const double keep = groups[g].weight / static_cast<double>(groups[g].classes.size()) / max_density;
    std::vector<std::size_t> pool;
    for (int c : groups[g].classes) {
      auto members = by_class[static_cast<std::size_t>(c)];
      rng.shuffle(members.begin(), members.end());
      const auto kept = static_cast<std::size_t>(std::llround(keep * static_cast<double>(members.size())));
      pool.insert(pool.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(kept));
    }
    rng.shuffle(pool.begin(), pool.end());
    std::vector<std::vector<std::size_t>> deal(seats[g]);
    for (std::size_t i = 0; i < pool.size(); ++i) deal[i % seats[g]].push_back(pool[i]);
    for (auto& idx : deal) {
      assigned += idx.size();
      out.push_back(make_client(ds, out.size(), idx));
    }
  }
  result.clients = std::move(out);
  result.dropped = ds.size() - assigned;
  return result;
}

std::vector<ClientDataset> partition_iid(const Dataset& ds, std::size_t clients, std::uint64_t seed) {
  if (clients == 0) throw ConfigError("client count must be positive");
  if (ds.size() < clients) throw ConfigError("iid partition needs at least one item per client");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, Stream::partition));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> deal(clients);
  for (std::size_t i = 0; i < order.size(); ++i) deal[i % clients].push_back(order[i]);
  std::vector<ClientDataset> out;
  for (std::size_t c = 0; c < clients; ++c) out.push_back(make_client(ds, c, deal[c]));
  return out;
}

ClientDataset local_split(const ClientDataset& cd, double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
  Dataset pool = cd.train;
  pool.append(cd.test);
  const std::size_t n = pool.size();
  const std::size_t K = pool.classes;

  std::size_t target = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (n >= 2) target = std::clamp<std::size_t>(target, 1, n - 1);
  else target = 0;

  std::vector<std::vector<std::size_t>> members(K);
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(pool.labels[i])].push_back(i);
  std::vector<std::size_t> take(K, 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t given = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const double exact = static_cast<double>(members[c].size()) * test_fraction;
    take[c] = static_cast<std::size_t>(std::floor(exact));
    given += take[c];
    if (take[c] < members[c].size()) rema.push_back({exact - std::floor(exact), c});
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; given < target && r < rema.size(); ++r, ++given) ++take[rema[r].second];

  std::vector<bool> is_test(n, false);
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t j = members[c].size() - take[c]; j < members[c].size(); ++j) is_test[members[c][j]] = true;
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? te : tr).push_back(i);

  ClientDataset out;
  out.id = cd.id;
  out.train = pool.subset(tr);
  out.test = pool.subset(te);
  out.histogram = pool.histogram();
  return out;
}

PartitionResult partition(const Dataset& ds, const PartitionPlan& plan) {
  plan.validate(ds.classes);
  PartitionResult r;
  switch (plan.mode) {
    case PartitionMode::unimodal:
      r.clients = partition_unimodal(ds, plan.clients, plan.shards_per_client, plan.seed);
      break;
    case PartitionMode::multimodal:
      r = partition_multimodal(ds, plan.clients, plan.groups, plan.seed);
      break;
    case PartitionMode::iid:
      r.clients = partition_iid(ds, plan.clients, plan.seed);
      break;
  }
  for (auto& c : r.clients) c = local_split(c, plan.test_fraction);
  return r;
}

}  // namespace fedzda
