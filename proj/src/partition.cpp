#include "colext/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "colext/binary_io.hpp"
#include "colext/error.hpp"
#include "colext/file_util.hpp"

namespace colext {

Dataset synth_dataset(std::uint32_t num_classes, std::uint32_t dim, std::uint32_t per_class,
                      std::uint64_t seed, const BlobOptions& opts) {
  if (num_classes == 0 || dim == 0 || per_class == 0) {
    throw InvalidArgument("synth_dataset needs positive classes, dim and per_class");
  }
  if (num_classes > 0xFFFF) throw InvalidArgument("too many classes for u16 labels");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> center(0.0, opts.center_scale);
  std::vector<double> means(static_cast<std::size_t>(num_classes) * dim);
  for (auto& m : means) m = center(rng);

  Dataset out;
  out.num_features = dim;
  out.num_classes = num_classes;
  const std::size_t n = static_cast<std::size_t>(num_classes) * per_class;
  out.features.resize(n * dim);
  out.labels.resize(n);
  std::normal_distribution<double> noise(0.0, opts.noise_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::uint16_t>(i % num_classes);
    out.labels[i] = c;
    for (std::size_t j = 0; j < dim; ++j) {
      out.features[i * dim + j] = static_cast<float>(means[c * dim + j] + noise(rng));
    }
  }
  return out;
}

void PartitionPlan::validate() const {
  if (num_clients == 0) throw InvalidArgument("partition needs at least one client");
  if (alpha && !(*alpha > 0.0)) throw InvalidArgument("Dirichlet alpha must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must lie in (0, 1)");
}

namespace {

std::vector<double> dirichlet_draw(double alpha, std::size_t k, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  for (int attempt = 0; attempt < 64; ++attempt) {
    double sum = 0.0;
    for (auto& v : p) {
      v = gamma(rng);
      sum += v;
    }
    if (sum > 0.0 && std::isfinite(sum)) {
      for (auto& v : p) v /= sum;
      return p;
    }
  }
  // Tiny alpha underflowed every coordinate: the limit is a one-hot vector.
  std::fill(p.begin(), p.end(), 0.0);
  p[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
  return p;
}

}  // namespace

std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::uint64_t seed) {
  if (!(alpha > 0.0) || k == 0) throw InvalidArgument("Dirichlet needs alpha > 0 and k >= 1");
  std::mt19937_64 rng(seed);
  return dirichlet_draw(alpha, k, rng);
}

std::vector<std::size_t> largest_remainder(std::size_t n, std::span<const double> weights) {
  if (weights.empty()) throw InvalidArgument("largest_remainder needs at least one weight");
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> rem(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // guard against weights summing slightly above 1
  while (assigned > n) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % order.size()) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

std::size_t min_client_rows(double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must lie in (0, 1)");
  for (std::size_t n = 2;; ++n) {
    const auto v = std::llround(static_cast<double>(n) * val_fraction);
    if (v >= 1 && static_cast<std::size_t>(v) < n) return n;
  }
}

std::vector<std::vector<std::size_t>> partition_indices(std::span<const std::uint16_t> labels,
                                                        std::uint32_t num_classes,
                                                        const PartitionPlan& plan) {
  plan.validate();
  const std::size_t k = plan.num_clients;
  const std::size_t floor_rows = min_client_rows(plan.val_fraction);
  if (labels.size() < k * floor_rows) {
    throw InvalidArgument("cannot give each of " + std::to_string(k) + " clients " + std::to_string(floor_rows) +
                          " rows from " + std::to_string(labels.size()));
  }
  std::mt19937_64 rng(plan.seed);
  std::vector<std::vector<std::size_t>> clients(k);

  if (!plan.alpha) {
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t i = 0; i < all.size(); ++i) clients[i % k].push_back(all[i]);
  } else {
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) throw InvalidArgument("label out of range in partition");
      by_class[labels[i]].push_back(i);
    }
    for (auto& members : by_class) {
      std::shuffle(members.begin(), members.end(), rng);
      const auto p = dirichlet_draw(*plan.alpha, k, rng);
      const auto counts = largest_remainder(members.size(), p);
      std::size_t at = 0;
      for (std::size_t c = 0; c < k; ++c) {
        clients[c].insert(clients[c].end(), members.begin() + at, members.begin() + at + counts[c]);
        at += counts[c];
      }
    }
    // Keep K fixed: a client too small for its train/val split takes rows,
    // one at a time, from the current largest.
    for (std::size_t c = 0; c < k; ++c) {
      while (clients[c].size() < floor_rows) {
        auto donor = std::max_element(clients.begin(), clients.end(),
                                      [](const auto& a, const auto& b) { return a.size() < b.size(); });
        clients[c].push_back(donor->back());
        donor->pop_back();
      }
    }
  }
  for (auto& c : clients) std::sort(c.begin(), c.end());
  return clients;
}

std::vector<Dataset> dirichlet_partition(const Dataset& data, const PartitionPlan& plan) {
  data.validate();
  const auto parts = partition_indices(data.labels, data.num_classes, plan);
  std::vector<Dataset> out;
  out.reserve(parts.size());
  for (const auto& idx : parts) out.push_back(data.subset(idx));
  return out;
}

TrainValSplit train_val_split(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must lie in (0, 1)");
  const std::size_t n = data.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n_val == 0 || n_val >= n) {
    throw InvalidArgument("split of " + std::to_string(n) + " rows at " + std::to_string(val_fraction) +
                          " leaves an empty side");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(val)};
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  std::vector<std::uint8_t> out;
  out.reserve(12 + data.features.size() * 4 + data.labels.size() * 2);
  ByteWriter w(out);
  w.put_u32(static_cast<std::uint32_t>(data.size()));
  w.put_u32(data.num_features);
  w.put_u32(data.num_classes);
  for (float f : data.features) w.put_f32(f);
  for (auto l : data.labels) w.put_u16(l);
  return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Dataset d;
  const auto n = r.get_u32();
  d.num_features = r.get_u32();
  d.num_classes = r.get_u32();
  const std::uint64_t expect = static_cast<std::uint64_t>(n) * d.num_features * 4 + static_cast<std::uint64_t>(n) * 2;
  if (expect != r.remaining()) throw ProtocolError("dataset file size does not match its header");
  d.features.resize(static_cast<std::size_t>(n) * d.num_features);
  for (auto& f : d.features) f = r.get_f32();
  d.labels.resize(n);
  for (auto& l : d.labels) l = r.get_u16();
  d.validate();
  return d;
}

void write_dataset_file(const std::filesystem::path& path, const Dataset& data) {
  write_file_atomic(path, encode_dataset(data));
}

Dataset read_dataset_file(const std::filesystem::path& path) {
  return decode_dataset(read_file_bytes(path));
}

}  // namespace colext
