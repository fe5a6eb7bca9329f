#include "colext/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>

#include "colext/error.hpp"
#include "colext/mlp_kernel.hpp"

namespace colext {

WidthRatio::WidthRatio(std::uint32_t num, std::uint32_t den) : num_(num), den_(den) {
  if (num == 0 || den == 0 || num > den) {
    throw InvalidArgument("width ratio must lie in (0, 1], got " + std::to_string(num) + "/" +
                          std::to_string(den));
  }
  const auto g = std::gcd(num_, den_);
  num_ /= g;
  den_ /= g;
}

namespace {

std::uint64_t parse_uint(std::string_view s, const std::string& whole) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw InvalidArgument("malformed width ratio '" + whole + "'");
  }
  return v;
}

}  // namespace

WidthRatio WidthRatio::parse(const std::string& text) {
  std::string_view s = text;
  if (auto slash = s.find('/'); slash != std::string_view::npos) {
    return WidthRatio(static_cast<std::uint32_t>(parse_uint(s.substr(0, slash), text)),
                      static_cast<std::uint32_t>(parse_uint(s.substr(slash + 1), text)));
  }
  auto dot = s.find('.');
  if (dot == std::string_view::npos) {
    return WidthRatio(static_cast<std::uint32_t>(parse_uint(s, text)), 1);
  }
  const auto frac = s.substr(dot + 1);
  if (frac.size() > 9) throw InvalidArgument("too many decimals in width ratio '" + text + "'");
  std::uint64_t den = 1;
  for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
  const auto whole = dot == 0 ? 0 : parse_uint(s.substr(0, dot), text);
  const auto part = frac.empty() ? 0 : parse_uint(frac, text);
  return WidthRatio(static_cast<std::uint32_t>(whole * den + part), static_cast<std::uint32_t>(den));
}

std::uint32_t WidthRatio::scale(std::uint32_t width) const noexcept {
  const std::uint64_t prod = static_cast<std::uint64_t>(width) * num_;
  const auto scaled = static_cast<std::uint32_t>((prod + den_ - 1) / den_);
  return std::max<std::uint32_t>(scaled, width == 0 ? 0 : 1);
}

std::string WidthRatio::to_string() const {
  if (den_ == 1) return std::to_string(num_);
  return std::to_string(num_) + "/" + std::to_string(den_);
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "none") return Activation::none;
  throw InvalidArgument("unknown activation '" + name + "'");
}

const char* to_string(Activation a) noexcept {
  return a == Activation::relu ? "relu" : "none";
}

void ModelSpec::validate() const {
  if (layer_widths.size() < 2) throw InvalidArgument("model needs at least 2 layer widths");
  for (auto w : layer_widths) {
    if (w == 0) throw InvalidArgument("layer widths must be >= 1");
  }
  if (layer_widths.back() > 0xFFFF) throw InvalidArgument("too many classes");
}

std::vector<std::uint32_t> ModelSpec::effective_widths() const {
  std::vector<std::uint32_t> w = layer_widths;
  for (std::size_t i = 1; i + 1 < w.size(); ++i) w[i] = width_ratio.scale(w[i]);
  return w;
}

std::vector<LayerShape> ModelSpec::shapes() const {
  validate();
  const auto w = effective_widths();
  std::vector<LayerShape> out;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) out.push_back({w[l], w[l + 1], w[l + 1]});
  return out;
}

std::size_t ModelSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& s : shapes()) n += s.size();
  return n;
}

ParamVector ParamVector::zeros(std::vector<LayerShape> shapes) {
  ParamVector p;
  p.shapes = std::move(shapes);
  p.values.assign(p.expected_size(), 0.0f);
  return p;
}

std::size_t ParamVector::expected_size() const noexcept {
  std::size_t n = 0;
  for (const auto& s : shapes) n += s.size();
  return n;
}

bool ParamVector::all_finite() const noexcept {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

void ParamVector::validate() const {
  if (expected_size() != values.size()) {
    throw ShapeMismatch("parameter count " + std::to_string(values.size()) +
                        " does not match shapes (" + std::to_string(expected_size()) + ")");
  }
  if (!all_finite()) throw InvalidArgument("parameters contain non-finite values");
}

void encode_params(const ParamVector& p, ByteWriter& out) {
  if (p.expected_size() != p.values.size()) throw ShapeMismatch("cannot encode inconsistent ParamVector");
  out.put_u32(static_cast<std::uint32_t>(p.shapes.size()));
  for (const auto& s : p.shapes) {
    out.put_u32(s.rows);
    out.put_u32(s.cols);
    out.put_u32(s.bias_len);
  }
  for (float v : p.values) out.put_f32(v);
}

ParamVector decode_params(ByteReader& in) {
  ParamVector p;
  const auto layers = in.get_u32();
  // each layer needs 12 header bytes, so this bounds hostile counts
  if (static_cast<std::uint64_t>(layers) * 12 > in.remaining()) throw ProtocolError("truncated param header");
  p.shapes.resize(layers);
  std::uint64_t total = 0;
  for (auto& s : p.shapes) {
    s.rows = in.get_u32();
    s.cols = in.get_u32();
    s.bias_len = in.get_u32();
    total += static_cast<std::uint64_t>(s.rows) * s.cols + s.bias_len;
  }
  if (total * 4 > in.remaining()) throw ProtocolError("truncated param values");
  p.values.resize(static_cast<std::size_t>(total));
  for (auto& v : p.values) v = in.get_f32();
  return p;
}

std::vector<std::uint8_t> encode_params(const ParamVector& p) {
  std::vector<std::uint8_t> out;
  out.reserve(encoded_params_size(p));
  ByteWriter w(out);
  encode_params(p, w);
  return out;
}

ParamVector decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto p = decode_params(r);
  if (!r.empty()) throw ProtocolError("trailing bytes after params");
  return p;
}

std::size_t encoded_params_size(const ParamVector& p) noexcept {
  return 4 + 12 * p.shapes.size() + 4 * p.values.size();
}

void Dataset::validate() const {
  if (labels.empty()) throw InvalidArgument("dataset is empty");
  if (num_features == 0 || num_classes == 0) throw InvalidArgument("dataset needs d >= 1 and C >= 1");
  if (features.size() != labels.size() * num_features) {
    throw ShapeMismatch("feature matrix size does not match n x d");
  }
  for (auto l : labels) {
    if (l >= num_classes) throw InvalidArgument("label " + std::to_string(l) + " out of range");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_features = num_features;
  out.num_classes = num_classes;
  out.features.reserve(indices.size() * num_features);
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    auto r = row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

void TrainConfig::validate() const {
  if (local_epochs == 0) throw InvalidArgument("local_epochs must be positive");
  if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning_rate must be finite and non-negative");
  }
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw InvalidArgument("mu must be finite and non-negative");
}

std::size_t batches_per_epoch(std::size_t n, std::uint32_t batch_size) noexcept {
  return batch_size == 0 ? 0 : (n + batch_size - 1) / batch_size;
}

ParamVector init_model(const ModelSpec& spec, std::uint64_t seed) {
  auto p = ParamVector::zeros(spec.shapes());
  std::mt19937_64 rng(seed);
  std::size_t at = 0;
  for (const auto& s : p.shapes) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < s.size(); ++i) p.values[at++] = static_cast<float>(dist(rng));
  }
  return p;
}

namespace {

void check_compatible(const ParamVector& params, const ModelSpec& spec, const Dataset& data) {
  if (params.shapes != spec.shapes()) throw ShapeMismatch("parameter shapes do not match model spec");
  if (params.values.size() != params.expected_size()) throw ShapeMismatch("parameter vector length mismatch");
  data.validate();
  if (data.num_features != spec.input_dim()) {
    throw ShapeMismatch("dataset has " + std::to_string(data.num_features) + " features, model expects " +
                        std::to_string(spec.input_dim()));
  }
  if (data.num_classes > spec.num_classes()) throw ShapeMismatch("dataset has more classes than the model");
}

}  // namespace

EvalResult evaluate(const ParamVector& params, const ModelSpec& spec, const Dataset& data) {
  check_compatible(params, spec, data);
  const auto offsets = kernel::layer_offsets(params.shapes);
  std::vector<std::vector<double>> acts;
  std::vector<double> probs;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    kernel::forward<float>(params.values, params.shapes, offsets, spec.activation, data.row(r), acts);
    const auto& logits = acts.back();
    loss += kernel::softmax_xent(logits, data.labels[r], probs);
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    if (static_cast<std::size_t>(best) == data.labels[r]) ++correct;
  }
  const double n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

TrainResult local_train(const ParamVector& global, const ModelSpec& spec, const Dataset& data,
                        const TrainConfig& cfg) {
  check_compatible(global, spec, data);
  cfg.validate();

  std::vector<float> w = global.values;
  std::vector<double> grad(w.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);

  const std::size_t per_epoch = batches_per_epoch(data.size(), cfg.batch_size);
  double last_epoch_loss = 0.0;
  for (std::uint32_t e = 0; e < cfg.local_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const double loss = kernel::objective_and_gradient<float>(w, global.values, cfg.mu, global.shapes,
                                                                spec.activation, data, rows, grad);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite loss in epoch " + std::to_string(e) + ", batch " + std::to_string(b));
      }
      epoch_loss += loss;
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<float>(static_cast<double>(w[i]) - cfg.learning_rate * grad[i]);
        if (!std::isfinite(w[i])) throw TrainingDiverged("parameters became non-finite");
      }
    }
    last_epoch_loss = epoch_loss / static_cast<double>(per_epoch);
  }

  TrainResult out;
  out.params.shapes = global.shapes;
  out.params.values = std::move(w);
  out.num_examples = data.size();
  out.train_loss = last_epoch_loss;
  out.num_batches = per_epoch * cfg.local_epochs;
  return out;
}

double proximal_penalty(std::span<const float> w, std::span<const float> w_global, double mu) {
  if (w.size() != w_global.size()) throw ShapeMismatch("proximal penalty on vectors of different length");
  double sq = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = static_cast<double>(w[i]) - static_cast<double>(w_global[i]);
    sq += d * d;
  }
  return 0.5 * mu * sq;
}

double proximal_penalty(const ParamVector& w, const ParamVector& w_global, double mu) {
  return proximal_penalty(std::span<const float>(w.values), std::span<const float>(w_global.values), mu);
}

}  // namespace colext
