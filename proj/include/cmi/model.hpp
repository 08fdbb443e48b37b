#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cmi/activation.hpp"
#include "cmi/inception.hpp"
#include "cmi/ops.hpp"

namespace cmi {

// How a model's blocks pick their activation: from the assignment, or RELU
// wired in directly (the traditional network).
enum class ActivationWiring { assignment, hardcoded_relu };

// Expected assignment length for a plan at the given granularity.
inline std::size_t assignment_length(const NetworkPlan& plan, Granularity g) {
  return g == Granularity::per_block ? plan.cb_count() : per_feature_map_entries(plan);
}

// A built network: plan, assignment and initialized parameters.
template <typename T>
class InceptionModel {
public:
  InceptionModel(NetworkPlan plan, ActivationAssignment assignment, std::uint64_t init_seed,
                 ActivationWiring wiring = ActivationWiring::assignment)
      : plan_(std::move(plan)), assignment_(std::move(assignment)), init_seed_(init_seed), wiring_(wiring) {
    const std::size_t expected = assignment_length(plan_, assignment_.granularity);
    if (wiring_ == ActivationWiring::assignment)
      require(assignment_.entries.size() == expected,
              "activation assignment has " + std::to_string(assignment_.entries.size()) +
                  " entries, network needs " + std::to_string(expected) + " (" +
                  std::string(to_string(assignment_.granularity)) + ")");
    require(assignment_.elu_alpha > 0.0, "ELU alpha must be positive");
    propagate_spatial(plan_);  // throws when the input is too small
    slice_offsets_.resize(plan_.cb_count() + 1, 0);
    for (std::size_t i = 0; i < plan_.cb_count(); ++i)
      slice_offsets_[i + 1] = slice_offsets_[i] + (assignment_.granularity == Granularity::per_block
                                                       ? 1
                                                       : plan_.convs[i].out_channels);
    initialize();
  }

  const NetworkPlan& plan() const { return plan_; }
  const ArchConfig& config() const { return plan_.config; }
  const ActivationAssignment& assignment() const { return assignment_; }
  std::uint64_t init_seed() const { return init_seed_; }
  ActivationWiring wiring() const { return wiring_; }

  std::vector<ConvBlockParams<T>>& blocks() { return blocks_; }
  const std::vector<ConvBlockParams<T>>& blocks() const { return blocks_; }
  Var<T>& head_weight() { return head_w_; }
  Var<T>& head_bias() { return head_b_; }

  std::span<const ActivationKind> slice(std::size_t cb) const {
    return std::span<const ActivationKind>(assignment_.entries)
        .subspan(slice_offsets_[cb], slice_offsets_[cb + 1] - slice_offsets_[cb]);
  }

  // Logits (N, num_classes). Train mode uses batch statistics and, when an
  // RNG is given, dropout in the classifier head.
  Var<T> forward(const Var<T>& images, NormMode mode, std::mt19937_64* dropout_rng = nullptr) {
    const auto& x = images.value();
    require(x.rank() == 4 && x.dim(1) == plan_.config.channels_in && x.dim(2) == plan_.config.input_h &&
                x.dim(3) == plan_.config.input_w,
            "model input must be (N," + std::to_string(plan_.config.channels_in) + "," +
                std::to_string(plan_.config.input_h) + "," + std::to_string(plan_.config.input_w) +
                "), got " + shape_str(x.shape()));
    return forward_from(0, images, mode, dropout_rng);
  }

  // Runs segments [first, end) and the head; `h` is segment `first`'s input.
  Var<T> forward_from(std::size_t first, Var<T> h, NormMode mode, std::mt19937_64* dropout_rng = nullptr) {
    require(first <= plan_.segments.size(), "forward_from: segment index out of range");
    for (std::size_t s = first; s < plan_.segments.size(); ++s) h = run(plan_.segments[s].body, h, mode);
    h = global_avg_pool(h);
    if (mode == NormMode::train && dropout_rng)
      h = dropout(h, static_cast<T>(plan_.config.dropout), true, *dropout_rng);
    return dense(h, head_w_, head_b_);
  }

  // Input of every segment for `images` (entry s feeds segment s), no graph.
  std::vector<Tensor<T>> segment_inputs(const Var<T>& images, NormMode mode) {
    NoGradGuard no_grad;
    std::vector<Tensor<T>> out;
    Var<T> h = images;
    for (const auto& seg : plan_.segments) {
      out.push_back(h.value());
      h = run(seg.body, h, mode);
    }
    return out;
  }

  // Trainable parameters in storage order.
  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (const auto& b : blocks_) {
      out.push_back(b.weight);
      if (b.batchnorm) {
        out.push_back(b.gamma);
        out.push_back(b.beta);
      } else {
        out.push_back(b.bias);
      }
    }
    out.push_back(head_w_);
    out.push_back(head_b_);
    return out;
  }

  // Every stored tensor (trainable ones plus BN running statistics), in
  // checkpoint order.
  std::vector<Tensor<T>*> state_tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& b : blocks_) {
      out.push_back(&b.weight.mutable_value());
      if (b.batchnorm) {
        out.push_back(&b.gamma.mutable_value());
        out.push_back(&b.beta.mutable_value());
        out.push_back(&b.bn.running_mean);
        out.push_back(&b.bn.running_var);
      } else {
        out.push_back(&b.bias.mutable_value());
      }
    }
    out.push_back(&head_w_.mutable_value());
    out.push_back(&head_b_.mutable_value());
    return out;
  }

  std::size_t stored_value_count() {
    std::size_t total = 0;
    for (auto* t : state_tensors()) total += t->size();
    return total;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

private:
  // He-normal conv weights, zero biases, unit BN scale; head weights with
  // variance 1/fan_in. Drawn in double so float and double models agree.
  void initialize() {
    std::mt19937_64 rng(init_seed_);
    const bool bn = plan_.config.batchnorm;
    blocks_.clear();
    blocks_.reserve(plan_.cb_count());
    for (const auto& c : plan_.convs) {
      const std::size_t fan_in = c.in_channels * c.kernel_h * c.kernel_w;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      Tensor<T> w({c.out_channels, c.in_channels, c.kernel_h, c.kernel_w});
      for (auto& v : w.values()) v = static_cast<T>(dist(rng));
      ConvBlockParams<T> p;
      p.weight = Var<T>::parameter(std::move(w));
      p.batchnorm = bn;
      p.conv = c.options;
      if (bn) {
        p.gamma = Var<T>::parameter(Tensor<T>({c.out_channels}, T{1}));
        p.beta = Var<T>::parameter(Tensor<T>({c.out_channels}, T{0}));
        p.bn = BatchNormState<T>(c.out_channels);
      } else {
        p.bias = Var<T>::parameter(Tensor<T>({c.out_channels}, T{0}));
      }
      blocks_.push_back(std::move(p));
    }
    const std::size_t D = plan_.feature_channels, K = plan_.config.num_classes;
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(D)));
    Tensor<T> hw({D, K});
    for (auto& v : hw.values()) v = static_cast<T>(dist(rng));
    head_w_ = Var<T>::parameter(std::move(hw));
    head_b_ = Var<T>::parameter(Tensor<T>({K}, T{0}));
  }

  Var<T> run(const PlanNode& node, const Var<T>& x, NormMode mode) {
    switch (node.kind) {
      case PlanNode::Kind::conv: {
        auto& block = blocks_[node.conv.cb_index];
        if (wiring_ == ActivationWiring::hardcoded_relu) return conv_relu_block(block, x, mode);
        return convolutional_block(block, slice(node.conv.cb_index), x, mode,
                                   static_cast<T>(assignment_.elu_alpha));
      }
      case PlanNode::Kind::pool:
        return node.pool.kind == PoolKind::max ? maxpool2d(x, node.pool.options)
                                               : avgpool2d(x, node.pool.options);
      case PlanNode::Kind::chain: {
        Var<T> h = x;
        for (const auto& ch : node.children) h = run(ch, h, mode);
        return h;
      }
      case PlanNode::Kind::concat: {
        std::vector<Var<T>> parts;
        parts.reserve(node.children.size());
        for (const auto& ch : node.children) parts.push_back(run(ch, x, mode));
        return concat_channels(parts);
      }
    }
    throw StructuralError("unknown plan node");
  }

  NetworkPlan plan_;
  ActivationAssignment assignment_;
  std::uint64_t init_seed_;
  ActivationWiring wiring_;
  std::vector<std::size_t> slice_offsets_;
  std::vector<ConvBlockParams<T>> blocks_;
  Var<T> head_w_, head_b_;
};

template <typename T = float>
InceptionModel<T> build_network(const ArchConfig& config, const ActivationAssignment& assignment,
                                std::uint64_t init_seed,
                                ActivationWiring wiring = ActivationWiring::assignment) {
  return InceptionModel<T>(make_plan(config), assignment, init_seed, wiring);
}

}  // namespace cmi
