#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gradflow/layers.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

// Composition of layers into a feedforward model: construction-time shape
// inference, the forward pass, the recursive backward error flow with
// gradient extraction, and the parameter registry.

namespace gradflow {

enum class LayerKind { kConv, kRelu, kBatchNorm, kMaxpool, kFlatten, kFc };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kMaxpool: return "maxpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kFc: return "fc";
  }
  return "?";
}

using Value = std::variant<Matrix, Tensor4>;

// Activation shape with the minibatch dimension left symbolic.
struct StaticShape {
  bool is4d = false;
  std::size_t d = 0;  // depth (4-d)
  std::size_t r = 0;  // spatial resolution (4-d)
  std::size_t f = 0;  // feature count (2-d)

  std::string str() const {
    if (is4d) {
      return "n×" + std::to_string(d) + "×" + std::to_string(r) + "×" +
             std::to_string(r);
    }
    return "n×" + std::to_string(f);
  }
};

struct ConvLayer {
  SamplingTriplet p;
  Tensor4 w;  // d_out x d_in x k x k
  Vector b;
  Tensor4 dw;
  Vector db;
  ConvCache cache;
  bool cache_valid = false;
};

struct ReluLayer {
  Value input;  // cached A_{i-1}
  bool cache_valid = false;
};

struct BatchNormLayer {
  BatchNormState state;
  Vector dw;
  Vector db;
  BnCache cache;
  bool is4d = false;
  std::size_t fold_n = 0;  // minibatch size seen by the last train forward
  std::size_t fold_r = 0;
};

struct MaxpoolLayer {
  SamplingTriplet p;
  MaxpoolCache cache;
  bool cache_valid = false;
};

struct FlattenLayer {
  FlattenCache cache;
  bool cache_valid = false;
};

struct FcLayer {
  Matrix w;  // f_in x f_out
  Vector b;
  Matrix dw;
  Vector db;
  Matrix input;  // cached A_{i-1}
  bool cache_valid = false;
};

struct LayerNode {
  LayerKind kind;
  std::variant<ConvLayer, ReluLayer, BatchNormLayer, MaxpoolLayer, FlattenLayer, FcLayer> impl;
};

// Named view over one trainable array and its gradient accumulator; the
// storage lives inside the layer nodes.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double>* value = nullptr;
  std::vector<double>* grad = nullptr;

  std::size_t count() const { return value ? value->size() : 0; }
};

// Identity skip from activation index src to activation index dst
// (activation 0 is the input; activation i is the output of layer i-1).
struct ShortcutEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
};

struct Network {
  std::size_t input_depth = 1;
  std::size_t input_res = 28;
  std::size_t class_count = 10;
  std::vector<LayerNode> layers;
  std::vector<ShortcutEdge> shortcuts;
  std::vector<StaticShape> shapes;  // per activation index, filled at build time

  // train-pass state
  std::vector<Value> acts;
  bool pass_valid = false;
};

// ---------------------------------------------------------------------------
// construction

namespace detail {

inline StaticShape infer_shape(const LayerNode& node, const StaticShape& in,
                               std::size_t layer_idx) {
  const std::string where = "layer " + std::to_string(layer_idx) + " (" +
                            layer_kind_name(node.kind) + ")";
  switch (node.kind) {
    case LayerKind::kConv: {
      const auto& c = std::get<ConvLayer>(node.impl);
      if (!in.is4d) throw ShapeError(where + ": needs image input, got " + in.str());
      if (c.w.d != in.d) {
        throw ShapeError(where + ": kernel depth " + std::to_string(c.w.d) + " vs input " +
                         in.str());
      }
      if (!exact_fit(in.r, c.p)) {
        throw GeometryError(where + ": inexact window fit for r=" + std::to_string(in.r) +
                            " with " + c.p.str());
      }
      return StaticShape{true, c.w.n, out_resolution(in.r, c.p), 0};
    }
    case LayerKind::kMaxpool: {
      const auto& m = std::get<MaxpoolLayer>(node.impl);
      if (!in.is4d) throw ShapeError(where + ": needs image input, got " + in.str());
      if (!exact_fit(in.r, m.p)) {
        throw GeometryError(where + ": inexact window fit for r=" + std::to_string(in.r) +
                            " with " + m.p.str());
      }
      return StaticShape{true, in.d, out_resolution(in.r, m.p), 0};
    }
    case LayerKind::kRelu:
      return in;
    case LayerKind::kBatchNorm: {
      const auto& bn = std::get<BatchNormLayer>(node.impl);
      const std::size_t features = in.is4d ? in.d : in.f;
      if (bn.state.w.size() != features) {
        throw ShapeError(where + ": " + std::to_string(bn.state.w.size()) +
                         " features vs input " + in.str());
      }
      return in;
    }
    case LayerKind::kFlatten:
      if (!in.is4d) throw ShapeError(where + ": needs image input, got " + in.str());
      return StaticShape{false, 0, 0, in.d * in.r * in.r};
    case LayerKind::kFc: {
      const auto& fc = std::get<FcLayer>(node.impl);
      if (in.is4d) throw ShapeError(where + ": needs feature-vector input, got " + in.str());
      if (fc.w.rows != in.f) {
        throw ShapeError(where + ": weight rows " + std::to_string(fc.w.rows) + " vs input " +
                         in.str());
      }
      return StaticShape{false, 0, 0, fc.w.cols};
    }
  }
  throw ShapeError(where + ": unknown layer kind");
}

}  // namespace detail

// Validates chain compatibility and shortcut edges, and fills the static
// shape trace. Must be called once after the layer list is assembled.
inline void finalize_network(Network& net) {
  net.shapes.clear();
  net.shapes.push_back(StaticShape{true, net.input_depth, net.input_res, 0});
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    net.shapes.push_back(detail::infer_shape(net.layers[i], net.shapes[i], i));
  }
  const StaticShape& out = net.shapes.back();
  if (out.is4d || out.f != net.class_count) {
    throw ShapeError("network output " + out.str() + " does not match " +
                     std::to_string(net.class_count) + " classes");
  }
  for (const ShortcutEdge& e : net.shortcuts) {
    if (e.dst >= net.shapes.size() || e.src >= e.dst || e.dst - e.src < 2) {
      throw ShapeError("shortcut " + std::to_string(e.src) + "->" + std::to_string(e.dst) +
                       " must skip at least 2 layers forward");
    }
    const StaticShape& a = net.shapes[e.src];
    const StaticShape& b = net.shapes[e.dst];
    if (a.is4d != b.is4d || a.d != b.d || a.r != b.r || a.f != b.f) {
      throw ShapeError("shortcut " + std::to_string(e.src) + "->" + std::to_string(e.dst) +
                       " joins " + a.str() + " with " + b.str());
    }
  }
}

// Layer factories; shapes are validated later by finalize_network.
inline LayerNode make_conv(std::size_t d_out, std::size_t d_in, const SamplingTriplet& p) {
  ConvLayer c;
  c.p = p;
  c.w = Tensor4(d_out, d_in, p.k, p.k);
  c.dw = Tensor4(d_out, d_in, p.k, p.k);
  c.b = Vector(d_out, 0.0);
  c.db = Vector(d_out, 0.0);
  return LayerNode{LayerKind::kConv, std::move(c)};
}

inline LayerNode make_relu() { return LayerNode{LayerKind::kRelu, ReluLayer{}}; }

inline LayerNode make_batchnorm(std::size_t features) {
  BatchNormLayer bn;
  bn.state = BatchNormState(features);
  bn.dw = Vector(features, 0.0);
  bn.db = Vector(features, 0.0);
  return LayerNode{LayerKind::kBatchNorm, std::move(bn)};
}

inline LayerNode make_maxpool(const SamplingTriplet& p) {
  return LayerNode{LayerKind::kMaxpool, MaxpoolLayer{p, {}, false}};
}

inline LayerNode make_flatten() { return LayerNode{LayerKind::kFlatten, FlattenLayer{}}; }

inline LayerNode make_fc(std::size_t f_in, std::size_t f_out) {
  FcLayer fc;
  fc.w = Matrix(f_in, f_out);
  fc.dw = Matrix(f_in, f_out);
  fc.b = Vector(f_out, 0.0);
  fc.db = Vector(f_out, 0.0);
  return LayerNode{LayerKind::kFc, std::move(fc)};
}

// The 16-layer reference stack: two conv/relu/batchnorm/maxpool blocks, a
// flatten, then three fully connected stages with relu+batchnorm between.
inline Network build_reference_net() {
  Network net;
  net.input_depth = 1;
  net.input_res = 28;
  net.class_count = 10;
  net.layers.push_back(make_conv(6, 1, {5, 1, 0}));
  net.layers.push_back(make_relu());
  net.layers.push_back(make_batchnorm(6));
  net.layers.push_back(make_maxpool({2, 2, 0}));
  net.layers.push_back(make_conv(16, 6, {5, 1, 0}));
  net.layers.push_back(make_relu());
  net.layers.push_back(make_batchnorm(16));
  net.layers.push_back(make_maxpool({2, 2, 0}));
  net.layers.push_back(make_flatten());
  net.layers.push_back(make_fc(256, 120));
  net.layers.push_back(make_relu());
  net.layers.push_back(make_batchnorm(120));
  net.layers.push_back(make_fc(120, 84));
  net.layers.push_back(make_relu());
  net.layers.push_back(make_batchnorm(84));
  net.layers.push_back(make_fc(84, 10));
  finalize_network(net);
  return net;
}

// Fan-scaled uniform init, range +-sqrt(6/(fan_in+fan_out)); conv fans are
// d*k*k. Biases stay zero, batch norm stays (w=1, b=0). Layers draw in
// forward order so a seed pins every weight.
inline void init_params(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (LayerNode& node : net.layers) {
    if (node.kind == LayerKind::kConv) {
      auto& c = std::get<ConvLayer>(node.impl);
      const double fan_in = static_cast<double>(c.w.d * c.w.h * c.w.w);
      const double fan_out = static_cast<double>(c.w.n * c.w.h * c.w.w);
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : c.w.data) v = rng.uniform(-bound, bound);
    } else if (node.kind == LayerKind::kFc) {
      auto& fc = std::get<FcLayer>(node.impl);
      const double bound =
          std::sqrt(6.0 / static_cast<double>(fc.w.rows + fc.w.cols));
      for (double& v : fc.w.data) v = rng.uniform(-bound, bound);
    }
  }
  net.pass_valid = false;
}

// ---------------------------------------------------------------------------
// forward

struct ForwardResult {
  Matrix logits;
  std::vector<std::string> shape_trace;  // one entry per activation
};

namespace detail {

inline std::string value_shape(const Value& v) {
  if (std::holds_alternative<Tensor4>(v)) return std::get<Tensor4>(v).shape_str();
  return std::get<Matrix>(v).shape_str();
}

inline Value apply_forward(LayerNode& node, const Value& in, Mode mode, std::size_t layer_idx) {
  const bool train = mode == Mode::kTrain;
  const std::string where = "layer " + std::to_string(layer_idx) + " (" +
                            layer_kind_name(node.kind) + ")";
  try {
    switch (node.kind) {
      case LayerKind::kConv: {
        auto& c = std::get<ConvLayer>(node.impl);
        const Tensor4& a = std::get<Tensor4>(in);
        if (train) {
          ConvResult res = conv_forward_gemm(a, c.w, c.b, c.p);
          c.cache = std::move(res.cache);
          c.cache_valid = true;
          return std::move(res.out);
        }
        return conv_forward_gemm(a, c.w, c.b, c.p).out;
      }
      case LayerKind::kRelu: {
        auto& r = std::get<ReluLayer>(node.impl);
        if (train) {
          r.input = in;
          r.cache_valid = true;
        }
        if (std::holds_alternative<Tensor4>(in)) return relu_forward(std::get<Tensor4>(in));
        return relu_forward(std::get<Matrix>(in));
      }
      case LayerKind::kBatchNorm: {
        auto& bn = std::get<BatchNormLayer>(node.impl);
        if (std::holds_alternative<Tensor4>(in)) {
          const Tensor4& a = std::get<Tensor4>(in);
          BnResult4d res = batchnorm_forward(a, bn.state, mode);
          if (train) {
            bn.cache = std::move(res.cache);
            bn.is4d = true;
            bn.fold_n = a.n;
            bn.fold_r = a.r();
          }
          return std::move(res.out);
        }
        BnResult res = batchnorm_forward(std::get<Matrix>(in), bn.state, mode);
        if (train) {
          bn.cache = std::move(res.cache);
          bn.is4d = false;
        }
        return std::move(res.out);
      }
      case LayerKind::kMaxpool: {
        auto& m = std::get<MaxpoolLayer>(node.impl);
        MaxpoolResult res = maxpool_forward(std::get<Tensor4>(in), m.p);
        if (train) {
          m.cache = std::move(res.cache);
          m.cache_valid = true;
        }
        return std::move(res.out);
      }
      case LayerKind::kFlatten: {
        auto& f = std::get<FlattenLayer>(node.impl);
        FlattenResult res = flatten_forward(std::get<Tensor4>(in));
        if (train) {
          f.cache = res.cache;
          f.cache_valid = true;
        }
        return std::move(res.out);
      }
      case LayerKind::kFc: {
        auto& fc = std::get<FcLayer>(node.impl);
        const Matrix& a = std::get<Matrix>(in);
        if (train) {
          fc.input = a;
          fc.cache_valid = true;
        }
        return fc_forward(a, fc.w, fc.b);
      }
    }
  } catch (const std::bad_variant_access&) {
    throw ShapeError(where + ": input rank mismatch, got " + value_shape(in));
  } catch (const Error& e) {
    throw ShapeError(where + ": " + e.what());
  }
  throw ShapeError(where + ": unknown layer kind");
}

}  // namespace detail

inline ForwardResult forward(Network& net, const Tensor4& a0, Mode mode) {
  if (a0.d != net.input_depth || a0.h != net.input_res || a0.w != net.input_res) {
    throw ShapeError("forward: input " + a0.shape_str() + " does not match network input n×" +
                     std::to_string(net.input_depth) + "×" + std::to_string(net.input_res) +
                     "×" + std::to_string(net.input_res));
  }
  std::vector<Value> acts;
  acts.reserve(net.layers.size() + 1);
  acts.emplace_back(a0);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Value out = detail::apply_forward(net.layers[i], acts[i], mode, i);
    for (const ShortcutEdge& e : net.shortcuts) {
      if (e.dst == i + 1) {
        if (std::holds_alternative<Tensor4>(out)) {
          out = shortcut_add(std::get<Tensor4>(acts[e.src]), std::get<Tensor4>(out));
        } else {
          out = shortcut_add(std::get<Matrix>(acts[e.src]), std::get<Matrix>(out));
        }
      }
    }
    acts.push_back(std::move(out));
  }

  ForwardResult res;
  res.shape_trace.reserve(acts.size());
  for (const Value& v : acts) res.shape_trace.push_back(detail::value_shape(v));
  res.logits = std::get<Matrix>(acts.back());
  if (mode == Mode::kTrain) {
    net.acts = std::move(acts);
    net.pass_valid = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// backward

namespace detail {

inline Value apply_backward(LayerNode& node, const Value& delta, std::size_t layer_idx) {
  const std::string where = "layer " + std::to_string(layer_idx) + " (" +
                            layer_kind_name(node.kind) + ")";
  switch (node.kind) {
    case LayerKind::kConv: {
      auto& c = std::get<ConvLayer>(node.impl);
      if (!c.cache_valid) throw UsageError(where + ": cache missing or already consumed");
      ConvGrads g = conv_backward(std::get<Tensor4>(delta), c.cache, c.w, c.p);
      c.dw = std::move(g.dw);
      c.db = std::move(g.db);
      c.cache_valid = false;
      return std::move(g.delta_in);
    }
    case LayerKind::kRelu: {
      auto& r = std::get<ReluLayer>(node.impl);
      if (!r.cache_valid) throw UsageError(where + ": cache missing or already consumed");
      r.cache_valid = false;
      if (std::holds_alternative<Tensor4>(delta)) {
        return relu_backward(std::get<Tensor4>(delta), std::get<Tensor4>(r.input));
      }
      return relu_backward(std::get<Matrix>(delta), std::get<Matrix>(r.input));
    }
    case LayerKind::kBatchNorm: {
      auto& bn = std::get<BatchNormLayer>(node.impl);
      if (!bn.cache.valid) throw UsageError(where + ": cache missing or already consumed");
      if (bn.is4d) {
        BnGrads4d g = batchnorm_backward(std::get<Tensor4>(delta), bn.cache, bn.state);
        bn.dw = std::move(g.dw);
        bn.db = std::move(g.db);
        bn.cache.valid = false;
        return std::move(g.delta_in);
      }
      BnGrads g = batchnorm_backward(std::get<Matrix>(delta), bn.cache, bn.state);
      bn.dw = std::move(g.dw);
      bn.db = std::move(g.db);
      bn.cache.valid = false;
      return std::move(g.delta_in);
    }
    case LayerKind::kMaxpool: {
      auto& m = std::get<MaxpoolLayer>(node.impl);
      if (!m.cache_valid) throw UsageError(where + ": cache missing or already consumed");
      m.cache_valid = false;
      return maxpool_backward(std::get<Tensor4>(delta), m.cache);
    }
    case LayerKind::kFlatten: {
      auto& f = std::get<FlattenLayer>(node.impl);
      if (!f.cache_valid) throw UsageError(where + ": cache missing or already consumed");
      f.cache_valid = false;
      return fold_backward(std::get<Matrix>(delta), f.cache);
    }
    case LayerKind::kFc: {
      auto& fc = std::get<FcLayer>(node.impl);
      if (!fc.cache_valid) throw UsageError(where + ": cache missing or already consumed");
      FcGrads g = fc_backward(std::get<Matrix>(delta), fc.input, fc.w);
      fc.dw = std::move(g.dw);
      fc.db = std::move(g.db);
      fc.cache_valid = false;
      return std::move(g.delta_in);
    }
  }
  throw UsageError(where + ": unknown layer kind");
}

inline void add_into(Value& acc, const Value& inc) {
  if (std::holds_alternative<Tensor4>(acc)) {
    acc = shortcut_add(std::get<Tensor4>(acc), std::get<Tensor4>(inc));
  } else {
    acc = shortcut_add(std::get<Matrix>(acc), std::get<Matrix>(inc));
  }
}

}  // namespace detail

// Seeds the error at the embedding with Ypred - Ygt and walks the layers in
// reverse, filling every parameter gradient. Shortcut edges route the error
// at their junction unchanged back to their source activation. The error at
// the input data is discarded.
inline void backward(Network& net, const Matrix& y_pred, const Matrix& y_gt) {
  if (!net.pass_valid) {
    throw UsageError("backward: no train-mode forward pass to consume");
  }
  net.pass_valid = false;

  std::map<std::size_t, Value> pending;  // shortcut arrivals keyed by src index
  Value delta{softmax_ce_backward(y_pred, y_gt)};
  for (std::size_t i = net.layers.size(); i >= 1; --i) {
    auto arrived = pending.find(i);
    if (arrived != pending.end()) {
      detail::add_into(delta, arrived->second);
      pending.erase(arrived);
    }
    for (const ShortcutEdge& e : net.shortcuts) {
      if (e.dst == i) {
        auto slot = pending.find(e.src);
        if (slot == pending.end()) {
          pending.emplace(e.src, delta);
        } else {
          detail::add_into(slot->second, delta);
        }
      }
    }
    delta = detail::apply_backward(net.layers[i - 1], delta, i - 1);
  }
  net.acts.clear();
}

// ---------------------------------------------------------------------------
// parameter registry

// Update order: reverse layer order, weights before biases.
inline std::vector<ParamTensor> collect_params(Network& net) {
  std::vector<ParamTensor> out;
  for (std::size_t i = net.layers.size(); i >= 1; --i) {
    LayerNode& node = net.layers[i - 1];
    const std::string prefix = "l" + std::string(i - 1 < 10 ? "0" : "") +
                               std::to_string(i - 1) + "." + layer_kind_name(node.kind);
    if (node.kind == LayerKind::kConv) {
      auto& c = std::get<ConvLayer>(node.impl);
      out.push_back({prefix + ".w", {c.w.n, c.w.d, c.w.h, c.w.w}, &c.w.data, &c.dw.data});
      out.push_back({prefix + ".b", {c.b.size()}, &c.b, &c.db});
    } else if (node.kind == LayerKind::kBatchNorm) {
      auto& bn = std::get<BatchNormLayer>(node.impl);
      out.push_back({prefix + ".w", {bn.state.w.size()}, &bn.state.w, &bn.dw});
      out.push_back({prefix + ".b", {bn.state.b.size()}, &bn.state.b, &bn.db});
    } else if (node.kind == LayerKind::kFc) {
      auto& fc = std::get<FcLayer>(node.impl);
      out.push_back({prefix + ".w", {fc.w.rows, fc.w.cols}, &fc.w.data, &fc.dw.data});
      out.push_back({prefix + ".b", {fc.b.size()}, &fc.b, &fc.db});
    }
  }
  return out;
}

inline std::size_t param_count(Network& net) {
  std::size_t total = 0;
  for (const ParamTensor& p : collect_params(net)) total += p.count();
  return total;
}

// In-place additive update; steps follow the collect_params order.
inline void apply_update(Network& net, const std::vector<Vector>& steps) {
  std::vector<ParamTensor> params = collect_params(net);
  if (steps.size() != params.size()) {
    throw ShapeError("apply_update: " + std::to_string(steps.size()) + " steps vs " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (steps[i].size() != params[i].value->size()) {
      throw ShapeError("apply_update: step size " + std::to_string(steps[i].size()) +
                       " vs parameter " + params[i].name);
    }
    for (std::size_t j = 0; j < steps[i].size(); ++j) (*params[i].value)[j] += steps[i][j];
  }
}

// ---------------------------------------------------------------------------
// description / fingerprint

inline std::string describe(const Network& net) {
  std::string out = "input " + std::to_string(net.input_depth) + " " +
                    std::to_string(net.input_res) + "\n";
  for (const LayerNode& node : net.layers) {
    switch (node.kind) {
      case LayerKind::kConv: {
        const auto& c = std::get<ConvLayer>(node.impl);
        out += "conv " + std::to_string(c.w.n) + " " + std::to_string(c.p.k) + " " +
               std::to_string(c.p.s) + " " + std::to_string(c.p.p) + "\n";
        break;
      }
      case LayerKind::kRelu:
        out += "relu\n";
        break;
      case LayerKind::kBatchNorm:
        out += "batchnorm\n";
        break;
      case LayerKind::kMaxpool: {
        const auto& m = std::get<MaxpoolLayer>(node.impl);
        out += "maxpool " + std::to_string(m.p.k) + " " + std::to_string(m.p.s) + " " +
               std::to_string(m.p.p) + "\n";
        break;
      }
      case LayerKind::kFlatten:
        out += "flatten\n";
        break;
      case LayerKind::kFc: {
        const auto& fc = std::get<FcLayer>(node.impl);
        out += "fc " + std::to_string(fc.w.cols) + "\n";
        break;
      }
    }
  }
  for (const ShortcutEdge& e : net.shortcuts) {
    out += "shortcut " + std::to_string(e.src) + " " + std::to_string(e.dst) + "\n";
  }
  return out;
}

// FNV-1a over the canonical description; guards checkpoints against being
// loaded into a different architecture.
inline std::uint64_t fingerprint(const Network& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : describe(net)) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace gradflow
