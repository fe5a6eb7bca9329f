#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "colext/binary_io.hpp"

namespace colext {

// Exact width multiplier for HeteroFL sub-models. Kept rational so that
// ceil(ratio * width) never suffers from binary rounding (0.7 * 10 == 7).
class WidthRatio {
 public:
  constexpr WidthRatio() = default;
  WidthRatio(std::uint32_t num, std::uint32_t den);

  // Accepts "1", "1/2", "0.25".
  static WidthRatio parse(const std::string& text);

  std::uint32_t num() const noexcept { return num_; }
  std::uint32_t den() const noexcept { return den_; }
  double value() const noexcept { return static_cast<double>(num_) / den_; }
  bool is_full() const noexcept { return num_ == den_; }

  // ceil(ratio * width), never below 1 for width >= 1.
  std::uint32_t scale(std::uint32_t width) const noexcept;

  std::string to_string() const;

  friend bool operator==(const WidthRatio& a, const WidthRatio& b) noexcept {
    return static_cast<std::uint64_t>(a.num_) * b.den_ ==
           static_cast<std::uint64_t>(b.num_) * a.den_;
  }

 private:
  std::uint32_t num_ = 1;
  std::uint32_t den_ = 1;
};

enum class Activation : std::uint8_t { relu, none };

Activation parse_activation(const std::string& name);
const char* to_string(Activation a) noexcept;

// One dense layer: weight matrix rows x cols (fan_in x fan_out, row-major)
// followed by a bias of bias_len (== cols) entries.
struct LayerShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::uint32_t bias_len = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(rows) * cols + bias_len;
  }

  friend auto operator<=>(const LayerShape&, const LayerShape&) = default;
};

struct ModelSpec {
  // input dim, hidden widths..., number of classes
  std::vector<std::uint32_t> layer_widths;
  Activation activation = Activation::relu;
  WidthRatio width_ratio;

  void validate() const;

  std::size_t num_layers() const noexcept { return layer_widths.size() - 1; }
  std::uint32_t input_dim() const { return layer_widths.front(); }
  std::uint32_t num_classes() const { return layer_widths.back(); }

  // Widths after applying width_ratio to the hidden layers only.
  std::vector<std::uint32_t> effective_widths() const;
  std::vector<LayerShape> shapes() const;
  std::size_t param_count() const;

  ModelSpec with_ratio(WidthRatio ratio) const {
    ModelSpec s = *this;
    s.width_ratio = ratio;
    return s;
  }
};

// Flat float parameters plus per-layer shapes. All aggregation math works
// directly on `values`.
struct ParamVector {
  std::vector<float> values;
  std::vector<LayerShape> shapes;

  static ParamVector zeros(std::vector<LayerShape> shapes);

  std::size_t expected_size() const noexcept;
  bool all_finite() const noexcept;
  // Throws ShapeMismatch / InvalidArgument when the invariants do not hold.
  void validate() const;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

// u32 layer count, per-layer (rows, cols, bias_len) u32 triplets, then
// the values as f32, everything little-endian.
void encode_params(const ParamVector& p, ByteWriter& out);
ParamVector decode_params(ByteReader& in);
std::vector<std::uint8_t> encode_params(const ParamVector& p);
ParamVector decode_params(std::span<const std::uint8_t> bytes);
std::size_t encoded_params_size(const ParamVector& p) noexcept;

struct Dataset {
  std::uint32_t num_features = 0;
  std::uint32_t num_classes = 0;
  std::vector<float> features;  // row-major, size() x num_features
  std::vector<std::uint16_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const float> row(std::size_t i) const {
    return {features.data() + i * num_features, num_features};
  }
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct TrainConfig {
  std::uint32_t local_epochs = 1;
  std::uint32_t batch_size = 32;
  double learning_rate = 0.1;
  double mu = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  ParamVector params;
  std::size_t num_examples = 0;
  double train_loss = 0.0;
  std::size_t num_batches = 0;
};

// Final partial batches are trained, so this is ceil(n / batch_size).
std::size_t batches_per_epoch(std::size_t n, std::uint32_t batch_size) noexcept;

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases alike.
ParamVector init_model(const ModelSpec& spec, std::uint64_t seed);

EvalResult evaluate(const ParamVector& params, const ModelSpec& spec, const Dataset& data);

// E epochs of mini-batch SGD on cross-entropy + (mu/2)||w - global||^2.
TrainResult local_train(const ParamVector& global, const ModelSpec& spec,
                        const Dataset& data, const TrainConfig& cfg);

double proximal_penalty(std::span<const float> w, std::span<const float> w_global, double mu);
double proximal_penalty(const ParamVector& w, const ParamVector& w_global, double mu);

}  // namespace colext
