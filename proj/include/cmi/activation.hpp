#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmi/ops.hpp"

namespace cmi {

enum class ActivationKind : std::uint8_t { relu = 0, sigmoid = 1, tanh = 2, elu = 3 };

inline constexpr std::array<ActivationKind, 4> kAllActivations{
    ActivationKind::relu, ActivationKind::sigmoid, ActivationKind::tanh, ActivationKind::elu};

inline constexpr double kDefaultEluAlpha = 1.0;

inline std::string_view to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return "RELU";
    case ActivationKind::sigmoid: return "SIG";
    case ActivationKind::tanh: return "TANH";
    case ActivationKind::elu: return "ELU";
  }
  return "?";
}

inline ActivationKind parse_activation(std::string_view name) {
  for (auto kind : kAllActivations)
    if (to_string(kind) == name) return kind;
  throw StructuralError("unknown activation '" + std::string(name) +
                        "' (expected one of RELU, SIG, TANH, ELU)");
}

// Comma-separated list such as "RELU,SIG,TANH,ELU".
inline std::vector<ActivationKind> parse_activation_set(std::string_view text) {
  std::vector<ActivationKind> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    if (end > start) out.push_back(parse_activation(text.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

namespace act {

template <typename T>
T relu(T x) { return x > T{0} ? x : T{0}; }
template <typename T>
T relu_grad(T x, T) { return x > T{0} ? T{1} : T{0}; }

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}
template <typename T>
T sigmoid_grad(T, T y) { return y * (T{1} - y); }

template <typename T>
T tanh(T x) { return std::tanh(x); }
template <typename T>
T tanh_grad(T, T y) { return T{1} - y * y; }

template <typename T>
T elu(T x, T alpha) { return x > T{0} ? x : alpha * std::expm1(x); }
template <typename T>
T elu_grad(T x, T y, T alpha) { return x > T{0} ? T{1} : y + alpha; }

template <typename T>
T apply(ActivationKind kind, T x, T alpha) {
  switch (kind) {
    case ActivationKind::relu: return relu(x);
    case ActivationKind::sigmoid: return sigmoid(x);
    case ActivationKind::tanh: return tanh(x);
    case ActivationKind::elu: return elu(x, alpha);
  }
  return x;
}

template <typename T>
T derivative(ActivationKind kind, T x, T y, T alpha) {
  switch (kind) {
    case ActivationKind::relu: return relu_grad(x, y);
    case ActivationKind::sigmoid: return sigmoid_grad(x, y);
    case ActivationKind::tanh: return tanh_grad(x, y);
    case ActivationKind::elu: return elu_grad(x, y, alpha);
  }
  return T{1};
}

}  // namespace act

// Hard-wired RELU layer, the traditional [CONV -> RELU] building block.
template <typename T>
Var<T> relu(const Var<T>& x) {
  return map_elementwise(
      x, [](T v) { return act::relu(v); }, [](T v, T y) { return act::relu_grad(v, y); }, "relu");
}

template <typename T>
Var<T> apply_activation(ActivationKind kind, const Var<T>& x, T elu_alpha = T(kDefaultEluAlpha)) {
  switch (kind) {
    case ActivationKind::relu: return relu(x);
    case ActivationKind::sigmoid:
      return map_elementwise(
          x, [](T v) { return act::sigmoid(v); },
          [](T v, T y) { return act::sigmoid_grad(v, y); }, "sigmoid");
    case ActivationKind::tanh:
      return map_elementwise(
          x, [](T v) { return act::tanh(v); }, [](T v, T y) { return act::tanh_grad(v, y); },
          "tanh");
    case ActivationKind::elu:
      require(elu_alpha > T{0}, "ELU alpha must be positive");
      return map_elementwise(
          x, [elu_alpha](T v) { return act::elu(v, elu_alpha); },
          [elu_alpha](T v, T y) { return act::elu_grad(v, y, elu_alpha); }, "elu");
  }
  throw StructuralError("invalid activation kind");
}

enum class Granularity { per_block, per_feature_map };

inline std::string_view to_string(Granularity g) {
  return g == Granularity::per_block ? "per-block" : "per-feature-map";
}

inline Granularity parse_granularity(std::string_view s) {
  if (s == "per-block") return Granularity::per_block;
  if (s == "per-feature-map") return Granularity::per_feature_map;
  throw StructuralError("unknown granularity '" + std::string(s) + "'");
}

// Which activation every convolutional block (or every block output channel)
// applies, in block index order.
struct ActivationAssignment {
  Granularity granularity = Granularity::per_block;
  std::vector<ActivationKind> entries;
  std::optional<std::uint64_t> seed;
  double elu_alpha = kDefaultEluAlpha;

  friend bool operator==(const ActivationAssignment&, const ActivationAssignment&) = default;
};

inline nlohmann::json to_json(const ActivationAssignment& a) {
  nlohmann::json j;
  j["granularity"] = std::string(to_string(a.granularity));
  j["seed"] = a.seed ? nlohmann::json(*a.seed) : nlohmann::json(nullptr);
  j["elu_alpha"] = a.elu_alpha;
  auto& entries = j["entries"] = nlohmann::json::array();
  for (auto k : a.entries) entries.push_back(std::string(to_string(k)));
  return j;
}

inline ActivationAssignment assignment_from_json(const nlohmann::json& j) {
  ActivationAssignment a;
  try {
    a.granularity = parse_granularity(j.at("granularity").get<std::string>());
    if (j.contains("seed") && !j.at("seed").is_null()) a.seed = j.at("seed").get<std::uint64_t>();
    a.elu_alpha = j.value("elu_alpha", kDefaultEluAlpha);
    for (const auto& e : j.at("entries")) a.entries.push_back(parse_activation(e.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("malformed activation assignment: ") + e.what());
  }
  require(a.elu_alpha > 0.0, "activation assignment: elu_alpha must be positive");
  return a;
}

inline std::string serialize_assignment(const ActivationAssignment& a) {
  return to_json(a).dump(2) + "\n";
}

inline ActivationAssignment deserialize_assignment(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("activation assignment is not valid JSON: ") + e.what());
  }
  return assignment_from_json(j);
}

// Applies one kind to all feature maps (a single-entry slice) or kind c to
// channel c (a slice of exactly C entries).
template <typename T>
Var<T> multi_activation_layer(std::span<const ActivationKind> slice, const Var<T>& feature_maps,
                              T elu_alpha = T(kDefaultEluAlpha)) {
  const auto& x = feature_maps.value();
  require(x.rank() == 4, "multi_activation_layer: feature maps must be (N,C,H,W)");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (slice.size() == 1) return apply_activation(slice[0], feature_maps, elu_alpha);
  require(slice.size() == C, "multi_activation_layer: slice holds " + std::to_string(slice.size()) +
                                 " kinds for " + std::to_string(C) + " channels");
  require(elu_alpha > T{0}, "ELU alpha must be positive");
  std::vector<ActivationKind> kinds(slice.begin(), slice.end());
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        out[idx] = act::apply(kinds[c], x[idx], elu_alpha);
      }
  return make_result<T>(
      std::move(out), {feature_maps},
      [N, C, HW, elu_alpha, kinds = std::move(kinds)](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        auto& dx = xn.grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              dx[idx] += self.grad[idx] *
                         act::derivative(kinds[c], xn.value[idx], self.value[idx], elu_alpha);
            }
      },
      "multi_activation_layer");
}

// Learnable state of one CONV -> [BN] -> AL block.
template <typename T>
struct ConvBlockParams {
  Var<T> weight;  // (Cout, Cin, kH, kW)
  Var<T> bias;    // undefined when batch norm follows the conv
  Var<T> gamma, beta;
  BatchNormState<T> bn;
  Conv2dOptions conv;
  bool batchnorm = true;

  std::size_t out_channels() const { return weight.value().dim(0); }
};

// conv2d -> batchnorm (when enabled) -> multi_activation_layer.
template <typename T>
Var<T> convolutional_block(ConvBlockParams<T>& p, std::span<const ActivationKind> slice,
                           const Var<T>& input, NormMode mode,
                           T elu_alpha = T(kDefaultEluAlpha)) {
  Var<T> y = conv2d(input, p.weight, p.bias, p.conv);
  if (p.batchnorm) y = batchnorm(y, p.gamma, p.beta, p.bn, mode);
  return multi_activation_layer(slice, y, elu_alpha);
}

// The same block with RELU wired in directly instead of read from an assignment.
template <typename T>
Var<T> conv_relu_block(ConvBlockParams<T>& p, const Var<T>& input, NormMode mode) {
  Var<T> y = conv2d(input, p.weight, p.bias, p.conv);
  if (p.batchnorm) y = batchnorm(y, p.gamma, p.beta, p.bn, mode);
  return relu(y);
}

}  // namespace cmi
