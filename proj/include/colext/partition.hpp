#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "colext/model.hpp"

namespace colext {

struct BlobOptions {
  // Class centroids are drawn from N(0, center_scale^2) per coordinate.
  double center_scale = 1.0;
  double noise_sigma = 1.0;
};

// Gaussian class blobs; labels interleaved (sample i has label i % C).
Dataset synth_dataset(std::uint32_t num_classes, std::uint32_t dim, std::uint32_t per_class,
                      std::uint64_t seed, const BlobOptions& opts = {});

struct PartitionPlan {
  std::uint32_t num_clients = 1;
  // Dirichlet concentration; nullopt means an IID split.
  std::optional<double> alpha = 1.0;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const;
};

// Fewest rows a client needs so that its train/val split leaves both sides
// non-empty (3 at val_fraction 0.2).
std::size_t min_client_rows(double val_fraction);

// Index-level partition: result[k] holds the (ascending) row indices of
// client k. Every row appears in exactly one client and every client gets at
// least min_client_rows(plan.val_fraction) rows.
std::vector<std::vector<std::size_t>> partition_indices(std::span<const std::uint16_t> labels,
                                                        std::uint32_t num_classes,
                                                        const PartitionPlan& plan);

std::vector<Dataset> dirichlet_partition(const Dataset& data, const PartitionPlan& plan);

// Symmetric Dirichlet(alpha, ..., alpha) draw of length k.
std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::uint64_t seed);

// Rounds n * weights[i] to integers summing to exactly n (largest remainder,
// ties to the lower index).
std::vector<std::size_t> largest_remainder(std::size_t n, std::span<const double> weights);

struct TrainValSplit {
  Dataset train;
  Dataset val;
};

// round(n * val_fraction) rows go to validation; both sides must be non-empty.
TrainValSplit train_val_split(const Dataset& data, double val_fraction, std::uint64_t seed);

// Flat shard file: u32 n, u32 d, u32 C, n*d f32 features, n u16 labels.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset_file(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset_file(const std::filesystem::path& path);

}  // namespace colext
