#pragma once

// Inception-V4 family architecture plans: (k, m, n) block counts, the
// per-branch channel table, CB indexing, and cost accounting.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmi/ops.hpp"
#include "cmi/tensor.hpp"

namespace cmi {

enum class ArchMode { compressed, full };

// reference: valid padding wherever the reference network uses it (299x299
// gives the familiar 35/17/8 grids). same: every conv and pool pads by
// floor(kernel/2), so small desk-scale inputs survive the stride stack.
enum class PaddingScheme { reference, same };

inline std::string to_string(ArchMode m) { return m == ArchMode::full ? "full" : "compressed"; }
inline std::string to_string(PaddingScheme p) { return p == PaddingScheme::same ? "same" : "reference"; }

inline ArchMode parse_arch_mode(const std::string& s) {
  if (s == "full") return ArchMode::full;
  if (s == "compressed") return ArchMode::compressed;
  throw StructuralError("unknown mode '" + s + "' (expected compressed or full)");
}

inline PaddingScheme parse_padding(const std::string& s) {
  if (s == "same") return PaddingScheme::same;
  if (s == "reference") return PaddingScheme::reference;
  throw StructuralError("unknown padding scheme '" + s + "' (expected reference or same)");
}

struct ArchConfig {
  int k = 1;  // Inception-A blocks
  int m = 2;  // Inception-B blocks
  int n = 1;  // Inception-C blocks
  ArchMode mode = ArchMode::compressed;
  double width_multiplier = 1.0;
  std::size_t input_h = 299, input_w = 299;
  std::size_t channels_in = 3;
  std::size_t num_classes = 4;
  bool batchnorm = true;
  PaddingScheme padding = PaddingScheme::reference;
  double dropout = 0.2;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline std::size_t cb_count(int k, int m, int n) {
  return static_cast<std::size_t>(21 + 7 * k + 10 * m + 10 * n);
}

inline constexpr std::size_t kStemCbs = 11, kInceptionACbs = 7, kReductionACbs = 4,
                             kInceptionBCbs = 10, kReductionBCbs = 6, kInceptionCCbs = 10;

// Every violated constraint, named. Empty means the config is valid.
inline std::vector<std::string> validate_config(const ArchConfig& c) {
  std::vector<std::string> v;
  if (c.mode == ArchMode::compressed) {
    if (c.k < 1 || c.k > 4) v.emplace_back("k ∉ {1..4}");
    if (c.m < 1 || c.m > 7) v.emplace_back("m ∉ {1..7}");
    if (c.n < 1 || c.n > 3) v.emplace_back("n ∉ {1..3}");
    if (c.k + c.m + c.n >= 14) v.emplace_back("k+m+n must be < 14");
  } else if (c.k != 4 || c.m != 7 || c.n != 3) {
    v.emplace_back("full mode requires (k,m,n) = (4,7,3)");
  }
  if (!(c.width_multiplier > 0.0 && c.width_multiplier <= 1.0))
    v.emplace_back("width_multiplier must be in (0,1]");
  if (c.channels_in < 1) v.emplace_back("channels_in must be >= 1");
  if (c.num_classes < 1) v.emplace_back("num_classes must be >= 1");
  if (c.input_h < 1 || c.input_w < 1) v.emplace_back("input resolution must be positive");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) v.emplace_back("dropout must be in [0,1)");
  return v;
}

// CMI_i: (i, i+1, i) blocks, compressed mode.
inline ArchConfig cmi_preset(int i) {
  require(i >= 1 && i <= 3, "cmi_preset: i must be 1, 2 or 3, got " + std::to_string(i));
  ArchConfig c;
  c.k = i;
  c.m = i + 1;
  c.n = i;
  c.mode = ArchMode::compressed;
  return c;
}

inline ArchConfig full_preset() {
  ArchConfig c;
  c.k = 4;
  c.m = 7;
  c.n = 3;
  c.mode = ArchMode::full;
  return c;
}

// "cmi1".."cmi3", "mi" (full), or "k<k>m<m>n<n>" for other triples.
inline std::string arch_id(const ArchConfig& c) {
  if (c.mode == ArchMode::full) return "mi";
  for (int i = 1; i <= 3; ++i)
    if (c.k == i && c.m == i + 1 && c.n == i) return "cmi" + std::to_string(i);
  return "k" + std::to_string(c.k) + "m" + std::to_string(c.m) + "n" + std::to_string(c.n);
}

inline ArchConfig preset_by_name(const std::string& name) {
  if (name == "cmi1") return cmi_preset(1);
  if (name == "cmi2") return cmi_preset(2);
  if (name == "cmi3") return cmi_preset(3);
  if (name == "mi") return full_preset();
  throw StructuralError("unknown preset '" + name + "' (expected cmi1, cmi2, cmi3 or mi)");
}

enum class SegmentKind { stem, inception_a, reduction_a, inception_b, reduction_b, inception_c };

inline std::string to_string(SegmentKind s) {
  switch (s) {
    case SegmentKind::stem: return "stem";
    case SegmentKind::inception_a: return "inception_a";
    case SegmentKind::reduction_a: return "reduction_a";
    case SegmentKind::inception_b: return "inception_b";
    case SegmentKind::reduction_b: return "reduction_b";
    case SegmentKind::inception_c: return "inception_c";
  }
  return "?";
}

struct ConvSpec {
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kernel_h = 1, kernel_w = 1;
  Conv2dOptions options;
  std::size_t cb_index = 0;
};

enum class PoolKind { max, avg };

struct PoolSpec {
  PoolKind kind = PoolKind::max;
  Pool2dOptions options;
};

// A node of the layer tree. chain runs children in sequence; concat feeds
// the same input to every child and joins the results on the channel axis.
struct PlanNode {
  enum class Kind { conv, pool, chain, concat };
  Kind kind = Kind::chain;
  ConvSpec conv;
  PoolSpec pool;
  std::vector<PlanNode> children;
  std::size_t out_channels = 0;
};

struct Segment {
  SegmentKind kind;
  std::size_t copy = 0;  // 0-based index among segments of the same kind
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t cb_begin = 0, cb_end = 0;
  PlanNode body;
};

struct NetworkPlan {
  ArchConfig config;
  std::vector<Segment> segments;
  std::vector<ConvSpec> convs;  // indexed by cb_index
  std::size_t feature_channels = 0;

  std::size_t cb_count() const { return convs.size(); }
};

namespace detail {

// Builds the layer tree while handing out CB indices in graph order:
// segments in sequence, branches left to right, layers top to bottom.
class PlanBuilder {
public:
  explicit PlanBuilder(const ArchConfig& cfg) : cfg_(cfg) {}

  std::size_t width(std::size_t reference_channels) const {
    const auto scaled = std::lround(static_cast<double>(reference_channels) * cfg_.width_multiplier);
    return static_cast<std::size_t>(std::max<long>(1, scaled));
  }

  // `valid` marks convs that the reference network runs without padding.
  PlanNode conv(std::size_t& channels, std::size_t ref_out, std::size_t kh, std::size_t kw,
                std::size_t stride = 1, bool valid = false) {
    PlanNode node;
    node.kind = PlanNode::Kind::conv;
    auto& c = node.conv;
    c.in_channels = channels;
    c.out_channels = width(ref_out);
    c.kernel_h = kh;
    c.kernel_w = kw;
    c.options.stride_h = c.options.stride_w = stride;
    const bool pad = !valid || cfg_.padding == PaddingScheme::same;
    c.options.pad_h = pad ? kh / 2 : 0;
    c.options.pad_w = pad ? kw / 2 : 0;
    c.cb_index = convs_.size();
    convs_.push_back(c);
    channels = c.out_channels;
    node.out_channels = channels;
    return node;
  }

  PlanNode pool(std::size_t channels, PoolKind kind, std::size_t stride, bool valid) {
    PlanNode node;
    node.kind = PlanNode::Kind::pool;
    node.pool.kind = kind;
    auto& o = node.pool.options;
    o.window_h = o.window_w = 3;
    o.stride_h = o.stride_w = stride;
    const bool pad = !valid || cfg_.padding == PaddingScheme::same;
    o.pad_h = o.pad_w = pad ? 1 : 0;
    node.out_channels = channels;
    return node;
  }

  static PlanNode chain(std::vector<PlanNode> children) {
    PlanNode node;
    node.kind = PlanNode::Kind::chain;
    node.out_channels = children.back().out_channels;
    node.children = std::move(children);
    return node;
  }

  static PlanNode concat(std::vector<PlanNode> children) {
    PlanNode node;
    node.kind = PlanNode::Kind::concat;
    for (const auto& ch : children) node.out_channels += ch.out_channels;
    node.children = std::move(children);
    return node;
  }

  // Stem: 3 + 1 + 2 + 4 + 1 = 11 CBs.
  PlanNode stem(std::size_t in) {
    std::size_t c = in;
    auto head = chain({conv(c, 32, 3, 3, 2, true), conv(c, 32, 3, 3, 1, true), conv(c, 64, 3, 3)});
    std::size_t c0 = c;
    auto mix1 = concat({pool(c0, PoolKind::max, 2, true), conv(c, 96, 3, 3, 2, true)});
    c = mix1.out_channels;
    std::size_t a = c, b = c;
    auto mix2 = concat({chain({conv(a, 64, 1, 1), conv(a, 96, 3, 3, 1, true)}),
                        chain({conv(b, 64, 1, 1), conv(b, 64, 7, 1), conv(b, 64, 1, 7),
                               conv(b, 96, 3, 3, 1, true)})});
    c = mix2.out_channels;
    std::size_t d = c;
    auto mix3 = concat({conv(d, 192, 3, 3, 2, true), pool(c, PoolKind::max, 2, true)});
    return chain({std::move(head), std::move(mix1), std::move(mix2), std::move(mix3)});
  }

  // Inception-A: 1 + 1 + 2 + 3 = 7 CBs.
  PlanNode inception_a(std::size_t in) {
    std::size_t b0 = in, b1 = in, b2 = in, b3 = in;
    return concat({chain({pool(in, PoolKind::avg, 1, false), conv(b0, 96, 1, 1)}),
                   conv(b1, 96, 1, 1),
                   chain({conv(b2, 64, 1, 1), conv(b2, 96, 3, 3)}),
                   chain({conv(b3, 64, 1, 1), conv(b3, 96, 3, 3), conv(b3, 96, 3, 3)})});
  }

  // Reduction-A: 1 + 3 = 4 CBs.
  PlanNode reduction_a(std::size_t in) {
    std::size_t b1 = in, b2 = in;
    return concat({pool(in, PoolKind::max, 2, true), conv(b1, 384, 3, 3, 2, true),
                   chain({conv(b2, 192, 1, 1), conv(b2, 224, 3, 3), conv(b2, 256, 3, 3, 2, true)})});
  }

  // Inception-B: 1 + 1 + 3 + 5 = 10 CBs.
  PlanNode inception_b(std::size_t in) {
    std::size_t b0 = in, b1 = in, b2 = in, b3 = in;
    return concat({chain({pool(in, PoolKind::avg, 1, false), conv(b0, 128, 1, 1)}),
                   conv(b1, 384, 1, 1),
                   chain({conv(b2, 192, 1, 1), conv(b2, 224, 1, 7), conv(b2, 256, 7, 1)}),
                   chain({conv(b3, 192, 1, 1), conv(b3, 192, 1, 7), conv(b3, 224, 7, 1),
                          conv(b3, 224, 1, 7), conv(b3, 256, 7, 1)})});
  }

  // Reduction-B: 2 + 4 = 6 CBs.
  PlanNode reduction_b(std::size_t in) {
    std::size_t b1 = in, b2 = in;
    return concat({pool(in, PoolKind::max, 2, true),
                   chain({conv(b1, 192, 1, 1), conv(b1, 192, 3, 3, 2, true)}),
                   chain({conv(b2, 256, 1, 1), conv(b2, 256, 1, 7), conv(b2, 320, 7, 1),
                          conv(b2, 320, 3, 3, 2, true)})});
  }

  // Inception-C: 1 + 1 + 3 + 5 = 10 CBs.
  PlanNode inception_c(std::size_t in) {
    std::size_t b0 = in, b1 = in, b2 = in, b3 = in;
    auto pooled = chain({pool(in, PoolKind::avg, 1, false), conv(b0, 256, 1, 1)});
    auto single = conv(b1, 256, 1, 1);
    auto stem2 = conv(b2, 384, 1, 1);
    std::size_t s2a = b2, s2b = b2;
    auto split2 = concat({conv(s2a, 256, 1, 3), conv(s2b, 256, 3, 1)});
    auto stem3 = chain({conv(b3, 384, 1, 1), conv(b3, 448, 1, 3), conv(b3, 512, 3, 1)});
    std::size_t s3a = b3, s3b = b3;
    auto split3 = concat({conv(s3a, 256, 3, 1), conv(s3b, 256, 1, 3)});
    return concat({std::move(pooled), std::move(single), chain({std::move(stem2), std::move(split2)}),
                   chain({std::move(stem3), std::move(split3)})});
  }

  std::vector<ConvSpec> take_convs() { return std::move(convs_); }
  std::size_t next_cb() const { return convs_.size(); }

private:
  ArchConfig cfg_;
  std::vector<ConvSpec> convs_;
};

}  // namespace detail

// Elaborates the layer tree. Throws on an invalid config; spatial feasibility
// is checked separately by propagate_spatial.
inline NetworkPlan make_plan(const ArchConfig& cfg) {
  const auto violations = validate_config(cfg);
  if (!violations.empty()) {
    std::string msg = "invalid architecture config:";
    for (const auto& v : violations) msg += " " + v + ";";
    throw StructuralError(msg);
  }
  NetworkPlan plan;
  plan.config = cfg;
  detail::PlanBuilder b(cfg);
  std::size_t channels = cfg.channels_in;

  auto add = [&](SegmentKind kind, std::size_t copy, auto&& make) {
    Segment s;
    s.kind = kind;
    s.copy = copy;
    s.in_channels = channels;
    s.cb_begin = b.next_cb();
    s.body = make(channels);
    s.cb_end = b.next_cb();
    s.out_channels = channels = s.body.out_channels;
    plan.segments.push_back(std::move(s));
  };

  add(SegmentKind::stem, 0, [&](std::size_t c) { return b.stem(c); });
  for (int i = 0; i < cfg.k; ++i)
    add(SegmentKind::inception_a, static_cast<std::size_t>(i), [&](std::size_t c) { return b.inception_a(c); });
  add(SegmentKind::reduction_a, 0, [&](std::size_t c) { return b.reduction_a(c); });
  for (int i = 0; i < cfg.m; ++i)
    add(SegmentKind::inception_b, static_cast<std::size_t>(i), [&](std::size_t c) { return b.inception_b(c); });
  add(SegmentKind::reduction_b, 0, [&](std::size_t c) { return b.reduction_b(c); });
  for (int i = 0; i < cfg.n; ++i)
    add(SegmentKind::inception_c, static_cast<std::size_t>(i), [&](std::size_t c) { return b.inception_c(c); });

  plan.convs = b.take_convs();
  plan.feature_channels = channels;
  return plan;
}

// Counts conv nodes by walking the tree, independent of the index table.
inline std::size_t count_conv_nodes(const PlanNode& node) {
  if (node.kind == PlanNode::Kind::conv) return 1;
  std::size_t total = 0;
  for (const auto& ch : node.children) total += count_conv_nodes(ch);
  return total;
}

inline std::size_t count_conv_nodes(const NetworkPlan& plan) {
  std::size_t total = 0;
  for (const auto& s : plan.segments) total += count_conv_nodes(s.body);
  return total;
}

struct SpatialExtent {
  std::size_t h = 0, w = 0;
};

namespace detail {

struct Propagation {
  std::vector<SpatialExtent> conv_out;  // by cb_index
  SpatialExtent final;
};

inline SpatialExtent propagate_node(const PlanNode& node, SpatialExtent in, Propagation& p) {
  switch (node.kind) {
    case PlanNode::Kind::conv: {
      const auto& c = node.conv;
      SpatialExtent out{conv_out_extent(in.h, c.kernel_h, c.options.stride_h, c.options.pad_h, "conv2d"),
                        conv_out_extent(in.w, c.kernel_w, c.options.stride_w, c.options.pad_w, "conv2d")};
      p.conv_out[c.cb_index] = out;
      return out;
    }
    case PlanNode::Kind::pool: {
      const auto& o = node.pool.options;
      return {conv_out_extent(in.h, o.window_h, o.stride_h, o.pad_h, "pool"),
              conv_out_extent(in.w, o.window_w, o.stride_w, o.pad_w, "pool")};
    }
    case PlanNode::Kind::chain: {
      SpatialExtent cur = in;
      for (const auto& ch : node.children) cur = propagate_node(ch, cur, p);
      return cur;
    }
    case PlanNode::Kind::concat: {
      std::optional<SpatialExtent> common;
      for (const auto& ch : node.children) {
        const auto out = propagate_node(ch, in, p);
        if (common && (common->h != out.h || common->w != out.w))
          throw StructuralError("concat branches disagree on spatial extent");
        common = out;
      }
      return *common;
    }
  }
  return in;
}

inline std::optional<Propagation> try_propagate(const NetworkPlan& plan, SpatialExtent in) {
  Propagation p;
  p.conv_out.resize(plan.cb_count());
  try {
    SpatialExtent cur = in;
    for (const auto& s : plan.segments) cur = propagate_node(s.body, cur, p);
    p.final = cur;
  } catch (const StructuralError&) {
    return std::nullopt;
  }
  return p;
}

}  // namespace detail

// Smallest square input that survives the plan's stride stack.
inline std::size_t minimum_input_extent(const NetworkPlan& plan) {
  for (std::size_t e = 1; e <= 4096; ++e)
    if (detail::try_propagate(plan, {e, e})) return e;
  return 0;
}

// Output extent of every conv for the configured input resolution.
inline std::vector<SpatialExtent> propagate_spatial(const NetworkPlan& plan) {
  const SpatialExtent in{plan.config.input_h, plan.config.input_w};
  auto p = detail::try_propagate(plan, in);
  if (!p) {
    const std::size_t min = minimum_input_extent(plan);
    throw StructuralError("input resolution " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                          " is too small for the stem's stride stack; minimum is " +
                          std::to_string(min) + "x" + std::to_string(min) + " with " +
                          to_string(plan.config.padding) + " padding");
  }
  return std::move(p->conv_out);
}

// Stored values per conv block: weights plus bias, or plus BN gamma, beta,
// running mean and running variance.
inline std::size_t conv_stored_values(const ConvSpec& c, bool batchnorm) {
  const std::size_t w = c.kernel_h * c.kernel_w * c.in_channels * c.out_channels;
  return w + (batchnorm ? 4 : 1) * c.out_channels;
}

inline std::size_t conv_trainable_values(const ConvSpec& c, bool batchnorm) {
  const std::size_t w = c.kernel_h * c.kernel_w * c.in_channels * c.out_channels;
  return w + (batchnorm ? 2 : 1) * c.out_channels;
}

inline constexpr std::size_t kCheckpointHeaderBytes = 512;
inline constexpr std::size_t kHeaderAssignmentCapacity = 384;

struct ArchStats {
  std::size_t cb_count = 0;
  std::size_t activation_count = 0;
  std::size_t parameter_count = 0;  // every stored value, BN running stats included
  std::size_t trainable_parameter_count = 0;
  std::size_t flops_per_image = 0;  // multiply-accumulates of all convs and the classifier
  std::size_t header_bytes = kCheckpointHeaderBytes;
  std::size_t assignment_extension_bytes = 0;
  std::size_t serialized_bytes = 0;
  std::map<std::string, std::size_t> per_segment_cb_counts;
};

// Per-feature-map assignments that do not fit in the header spill into a
// section of one byte per entry.
inline std::size_t assignment_extension_bytes(std::size_t entries) {
  return entries <= kHeaderAssignmentCapacity ? 0 : entries;
}

inline std::size_t per_feature_map_entries(const NetworkPlan& plan) {
  std::size_t total = 0;
  for (const auto& c : plan.convs) total += c.out_channels;
  return total;
}

inline ArchStats arch_stats(const NetworkPlan& plan, std::size_t bytes_per_element = 4,
                            std::size_t assignment_entries = 0) {
  ArchStats s;
  const bool bn = plan.config.batchnorm;
  const auto extents = propagate_spatial(plan);
  s.cb_count = plan.cb_count();
  s.activation_count = s.cb_count;
  for (const auto& c : plan.convs) {
    s.parameter_count += conv_stored_values(c, bn);
    s.trainable_parameter_count += conv_trainable_values(c, bn);
    const auto& e = extents[c.cb_index];
    s.flops_per_image += e.h * e.w * c.out_channels * c.in_channels * c.kernel_h * c.kernel_w;
  }
  const std::size_t head = plan.feature_channels * plan.config.num_classes + plan.config.num_classes;
  s.parameter_count += head;
  s.trainable_parameter_count += head;
  s.flops_per_image += plan.feature_channels * plan.config.num_classes;
  s.assignment_extension_bytes =
      assignment_extension_bytes(assignment_entries ? assignment_entries : s.cb_count);
  s.serialized_bytes = s.parameter_count * bytes_per_element + s.header_bytes + s.assignment_extension_bytes;
  for (const auto& seg : plan.segments) s.per_segment_cb_counts[to_string(seg.kind)] += seg.cb_end - seg.cb_begin;
  return s;
}

inline nlohmann::json arch_summary(const NetworkPlan& plan, const ArchStats& s) {
  const auto& c = plan.config;
  nlohmann::json j;
  j["arch"] = arch_id(c);
  j["k"] = c.k;
  j["m"] = c.m;
  j["n"] = c.n;
  j["mode"] = to_string(c.mode);
  j["width_multiplier"] = c.width_multiplier;
  j["input_resolution"] = {c.input_h, c.input_w};
  j["padding"] = to_string(c.padding);
  j["cb_count"] = s.cb_count;
  j["activation_count"] = s.activation_count;
  j["parameter_count"] = s.parameter_count;
  j["trainable_parameter_count"] = s.trainable_parameter_count;
  j["flops_per_image"] = s.flops_per_image;
  j["serialized_bytes"] = s.serialized_bytes;
  j["per_segment_cb_counts"] = s.per_segment_cb_counts;
  return j;
}

}  // namespace cmi
