#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradflow/arch.hpp"
#include "gradflow/layers.hpp"
#include "gradflow/network.hpp"
#include "gradflow/rng.hpp"

// Finite-difference oracle for every analytic backward rule. The oracle side
// only ever calls forward code; the analytic side is whatever backward
// produced before the probing starts.

namespace gradflow {

inline constexpr double kGradCheckH = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-6;

struct GradCheckReport {
  std::string target;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_coordinate;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  double tolerance = kGradCheckTolerance;
  double h = kGradCheckH;
  double best_h = kGradCheckH;  // smallest-error step at the worst coordinate
  bool pass = false;
};

// |a-b| / max(|a|, |b|, 1e-8); the floor avoids blowup at true zeros.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// (fn(p + h e) - fn(p - h e)) / 2h
inline double central_difference(const std::function<double(const Vector&)>& fn, Vector params,
                                 std::size_t coordinate, double h) {
  const double orig = params[coordinate];
  params[coordinate] = orig + h;
  const double hi = fn(params);
  params[coordinate] = orig - h;
  const double lo = fn(params);
  if (!std::isfinite(hi) || !std::isfinite(lo)) {
    throw NumericError("central_difference: non-finite evaluation at coordinate " +
                       std::to_string(coordinate));
  }
  return (hi - lo) / (2.0 * h);
}

// One named array of coordinates to verify: live storage the loss closure
// reads, plus the frozen analytic gradient it is checked against.
struct BlockCheck {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
  std::vector<double> analytic;
  // static exclusion (kink rules); may be empty
  std::function<bool(std::size_t)> exclude;
};

namespace detail {

struct ProbedValue {
  double loss = 0.0;
  std::uint64_t signature = 0;
};

}  // namespace detail

// Core comparison engine. `loss` re-runs the forward path; `signature`, when
// provided, fingerprints the piecewise-linear decisions of that run (ReLU
// sign patterns, maxpool argmax choices) so coordinates whose two probe
// evaluations land on different linear pieces are excluded rather than
// misjudged.
inline GradCheckReport check_blocks(const std::string& target, std::vector<BlockCheck>& blocks,
                                    const std::function<double()>& loss,
                                    const std::function<std::uint64_t()>& signature,
                                    double tolerance = kGradCheckTolerance,
                                    double h = kGradCheckH) {
  GradCheckReport report;
  report.target = target;
  report.tolerance = tolerance;
  report.h = h;

  double* worst_cell = nullptr;
  double worst_analytic = 0.0;

  auto evaluate = [&](double& cell, double value) -> detail::ProbedValue {
    const double orig = cell;
    cell = value;
    detail::ProbedValue out;
    out.loss = loss();
    if (signature) out.signature = signature();
    cell = orig;
    if (!std::isfinite(out.loss)) {
      throw NumericError("gradient check '" + target + "': non-finite probe loss");
    }
    return out;
  };

  for (BlockCheck& block : blocks) {
    for (std::size_t i = 0; i < block.size; ++i) {
      if (block.exclude && block.exclude(i)) {
        ++report.excluded;
        continue;
      }
      double& cell = block.data[i];
      const detail::ProbedValue hi = evaluate(cell, cell + h);
      const detail::ProbedValue lo = evaluate(cell, cell - h);
      if (signature && hi.signature != lo.signature) {
        ++report.excluded;
        continue;
      }
      const double fd = (hi.loss - lo.loss) / (2.0 * h);
      const double analytic = block.analytic[i];
      const double rel = relative_error(fd, analytic);
      const double abs = std::abs(fd - analytic);
      ++report.checked;
      report.max_abs_err = std::max(report.max_abs_err, abs);
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_coordinate = block.name + "[" + std::to_string(i) + "]";
        worst_cell = &cell;
        worst_analytic = analytic;
      }
    }
  }

  // record which step size serves the worst coordinate best
  if (worst_cell != nullptr) {
    double best = report.max_rel_err;
    for (double hs : {1e-4, 1e-5, 1e-6}) {
      const detail::ProbedValue hi = evaluate(*worst_cell, *worst_cell + hs);
      const detail::ProbedValue lo = evaluate(*worst_cell, *worst_cell - hs);
      if (signature && hi.signature != lo.signature) continue;
      const double rel = relative_error((hi.loss - lo.loss) / (2.0 * hs), worst_analytic);
      if (rel < best) {
        best = rel;
        report.best_h = hs;
      }
    }
  }

  report.pass = report.max_rel_err <= tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// per-layer checks

namespace detail {

// Probe loss sum((out - target)^2)/2, so the upstream error is out - target.
inline double probe_loss(const std::vector<double>& out, const std::vector<double>& target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double diff = out[i] - target[i];
    acc += 0.5 * diff * diff;
  }
  return acc;
}

inline std::vector<double> probe_delta(const std::vector<double>& out,
                                       const std::vector<double>& target) {
  std::vector<double> delta(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) delta[i] = out[i] - target[i];
  return delta;
}

}  // namespace detail

inline GradCheckReport check_fc_layer(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  Matrix a(2, 4), w(4, 3);
  Vector b(3);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
  for (double& v : b) v = rng.uniform(-1.0, 1.0);
  Matrix target(2, 3);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() { return detail::probe_loss(fc_forward(a, w, b).data, target.data); };

  Matrix out = fc_forward(a, w, b);
  Matrix delta(2, 3);
  delta.data = detail::probe_delta(out.data, target.data);
  FcGrads g = fc_backward(delta, a, w);

  std::vector<BlockCheck> blocks;
  blocks.push_back({"w", w.data.data(), w.data.size(), g.dw.data, nullptr});
  blocks.push_back({"b", b.data(), b.size(), g.db, nullptr});
  blocks.push_back({"input", a.data.data(), a.data.size(), g.delta_in.data, nullptr});
  return check_blocks("fc", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_conv_layer(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  const SamplingTriplet p{3, 2, 0};
  Tensor4 a(2, 2, 6, 6), w(3, 2, 3, 3);
  Vector b(3);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
  for (double& v : b) v = rng.uniform(-1.0, 1.0);
  Tensor4 target(2, 3, 2, 2);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() {
    return detail::probe_loss(conv_forward_gemm(a, w, b, p).out.data, target.data);
  };

  ConvResult fwd = conv_forward_gemm(a, w, b, p);
  Tensor4 delta(2, 3, 2, 2);
  delta.data = detail::probe_delta(fwd.out.data, target.data);
  ConvGrads g = conv_backward(delta, fwd.cache, w, p);

  std::vector<BlockCheck> blocks;
  blocks.push_back({"w", w.data.data(), w.data.size(), g.dw.data, nullptr});
  blocks.push_back({"b", b.data(), b.size(), g.db, nullptr});
  blocks.push_back({"input", a.data.data(), a.data.size(), g.delta_in.data, nullptr});
  return check_blocks("conv", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_relu_layer(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  Matrix a(2, 6);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  a(0, 0) = 0.0;  // planted kink; must be excluded, not judged
  Matrix target(2, 6);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() { return detail::probe_loss(relu_forward(a).data, target.data); };

  Matrix out = relu_forward(a);
  Matrix delta(2, 6);
  delta.data = detail::probe_delta(out.data, target.data);
  Matrix din = relu_backward(delta, a);

  std::vector<BlockCheck> blocks;
  blocks.push_back({"input", a.data.data(), a.data.size(), din.data,
                    [&a](std::size_t i) { return std::abs(a.data[i]) < 1e-3; }});
  return check_blocks("relu", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_maxpool_layer(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  const SamplingTriplet p{2, 2, 0};
  Tensor4 a(2, 2, 4, 4);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  Tensor4 target(2, 2, 2, 2);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() {
    return detail::probe_loss(maxpool_forward(a, p).out.data, target.data);
  };

  MaxpoolResult fwd = maxpool_forward(a, p);
  Tensor4 delta(2, 2, 2, 2);
  delta.data = detail::probe_delta(fwd.out.data, target.data);
  Tensor4 din = maxpool_backward(delta, fwd.cache);

  // exclude the whole patch when its top two values nearly tie
  auto patch_unstable = [&](std::size_t flat) {
    const std::size_t j = flat % 4;
    const std::size_t i = (flat / 4) % 4;
    const std::size_t c = (flat / 16) % 2;
    const std::size_t s = flat / 32;
    const std::size_t oi = i / 2;
    const std::size_t oj = j / 2;
    double top = -1e300;
    double second = -1e300;
    for (std::size_t u = 0; u < 2; ++u) {
      for (std::size_t v = 0; v < 2; ++v) {
        const double val = a(s, c, oi * 2 + u, oj * 2 + v);
        if (val > top) {
          second = top;
          top = val;
        } else if (val > second) {
          second = val;
        }
      }
    }
    return top - second < 1e-3;
  };

  std::vector<BlockCheck> blocks;
  blocks.push_back({"input", a.data.data(), a.data.size(), din.data, patch_unstable});
  return check_blocks("maxpool", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_flatten_layer(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  Tensor4 a(2, 3, 2, 2);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  Matrix target(2, 12);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() { return detail::probe_loss(flatten_forward(a).out.data, target.data); };

  FlattenResult fwd = flatten_forward(a);
  Matrix delta(2, 12);
  delta.data = detail::probe_delta(fwd.out.data, target.data);
  Tensor4 din = fold_backward(delta, fwd.cache);

  std::vector<BlockCheck> blocks;
  blocks.push_back({"input", a.data.data(), a.data.size(), din.data, nullptr});
  return check_blocks("flatten", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_batchnorm_layer(std::uint64_t seed, double tolerance, double h,
                                             bool image_form) {
  Rng rng(seed);
  // `base` holds the live parameters the probes perturb; every forward runs
  // on a throwaway copy so running-statistic updates never accumulate.
  BatchNormState base(4);
  base.eps = 1e-5;
  for (double& v : base.w) v = rng.uniform(0.5, 1.5);
  for (double& v : base.b) v = rng.uniform(-0.5, 0.5);

  if (image_form) {
    Tensor4 a(2, 4, 3, 3);
    for (double& v : a.data) v = rng.uniform(-2.0, 2.0);
    Tensor4 target(2, 4, 3, 3);
    for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

    auto loss = [&]() {
      BatchNormState probe = base;
      return detail::probe_loss(batchnorm_forward(a, probe, Mode::kTrain).out.data,
                                target.data);
    };

    BatchNormState fwd_state = base;
    BnResult4d fwd = batchnorm_forward(a, fwd_state, Mode::kTrain);
    Tensor4 delta(2, 4, 3, 3);
    delta.data = detail::probe_delta(fwd.out.data, target.data);
    BnGrads4d g = batchnorm_backward(delta, fwd.cache, base);

    std::vector<BlockCheck> blocks;
    blocks.push_back({"w", base.w.data(), base.w.size(), g.dw, nullptr});
    blocks.push_back({"b", base.b.data(), base.b.size(), g.db, nullptr});
    blocks.push_back({"input", a.data.data(), a.data.size(), g.delta_in.data, nullptr});
    return check_blocks("batchnorm-image", blocks, loss, nullptr, tolerance, h);
  }

  Matrix a(7, 4);
  for (double& v : a.data) v = rng.uniform(-2.0, 2.0);
  Matrix target(7, 4);
  for (double& v : target.data) v = rng.uniform(-1.0, 1.0);

  auto loss = [&]() {
    BatchNormState probe = base;
    return detail::probe_loss(batchnorm_forward(a, probe, Mode::kTrain).out.data, target.data);
  };

  BatchNormState fwd_state = base;
  BnResult fwd = batchnorm_forward(a, fwd_state, Mode::kTrain);
  Matrix delta(7, 4);
  delta.data = detail::probe_delta(fwd.out.data, target.data);
  BnGrads g = batchnorm_backward(delta, fwd.cache, base);

  std::vector<BlockCheck> blocks;
  blocks.push_back({"w", base.w.data(), base.w.size(), g.dw, nullptr});
  blocks.push_back({"b", base.b.data(), base.b.size(), g.db, nullptr});
  blocks.push_back({"input", a.data.data(), a.data.size(), g.delta_in.data, nullptr});
  return check_blocks("batchnorm", blocks, loss, nullptr, tolerance, h);
}

// The fused softmax + cross-entropy head, checked against the batch loss
// itself rather than a quadratic probe.
inline GradCheckReport check_softmax_ce(std::uint64_t seed, double tolerance, double h) {
  Rng rng(seed);
  Matrix logits(3, 5);
  for (double& v : logits.data) v = rng.uniform(-2.0, 2.0);
  Matrix gt(3, 5, 0.0);
  for (std::size_t i = 0; i < 3; ++i) gt(i, rng.below(5)) = 1.0;

  auto loss = [&]() { return cross_entropy_loss(softmax_forward(logits), gt).total; };

  Matrix delta = softmax_ce_backward(softmax_forward(logits), gt);
  std::vector<BlockCheck> blocks;
  blocks.push_back({"logits", logits.data.data(), logits.data.size(), delta.data, nullptr});
  return check_blocks("softmax-ce", blocks, loss, nullptr, tolerance, h);
}

inline GradCheckReport check_layer(LayerKind kind, std::uint64_t seed,
                                   double tolerance = kGradCheckTolerance,
                                   double h = kGradCheckH) {
  switch (kind) {
    case LayerKind::kFc: return check_fc_layer(seed, tolerance, h);
    case LayerKind::kConv: return check_conv_layer(seed, tolerance, h);
    case LayerKind::kRelu: return check_relu_layer(seed, tolerance, h);
    case LayerKind::kMaxpool: return check_maxpool_layer(seed, tolerance, h);
    case LayerKind::kFlatten: return check_flatten_layer(seed, tolerance, h);
    case LayerKind::kBatchNorm: return check_batchnorm_layer(seed, tolerance, h, false);
  }
  throw UsageError("check_layer: unknown layer kind");
}

// ---------------------------------------------------------------------------
// whole-network check

// Every parameter coordinate of a miniature network against central
// differences of the cross-entropy batch loss. Coordinates whose probes land
// on different linear pieces (a ReLU sign or pool argmax flip) are excluded.
inline GradCheckReport check_network(const Network& prototype, std::size_t n,
                                     std::uint64_t seed,
                                     double tolerance = kGradCheckTolerance,
                                     double h = kGradCheckH) {
  Network net = prototype;  // value copy; the caller's instance stays pristine
  if (param_count(net) > 1000) {
    throw UsageError("check_network: " + std::to_string(param_count(net)) +
                     " parameters; the whole-net oracle is for miniature nets (<= 1000)");
  }
  Rng rng(seed);
  Tensor4 a0(n, net.input_depth, net.input_res, net.input_res);
  for (double& v : a0.data) v = rng.uniform(-1.0, 1.0);
  Matrix gt(n, net.class_count, 0.0);
  for (std::size_t s = 0; s < n; ++s) gt(s, rng.below(net.class_count)) = 1.0;

  // analytic pass
  ForwardResult fwd = forward(net, a0, Mode::kTrain);
  backward(net, softmax_forward(fwd.logits), gt);

  std::vector<ParamTensor> params = collect_params(net);
  std::vector<BlockCheck> blocks;
  for (ParamTensor& p : params) {
    blocks.push_back({p.name, p.value->data(), p.value->size(), *p.grad, nullptr});
  }

  // snapshot running statistics so probe forwards cannot drift them
  std::vector<std::pair<Vector, Vector>> stats;
  for (LayerNode& node : net.layers) {
    if (node.kind == LayerKind::kBatchNorm) {
      auto& bn = std::get<BatchNormLayer>(node.impl);
      stats.emplace_back(bn.state.running_mean, bn.state.running_var);
    }
  }
  auto restore_stats = [&]() {
    std::size_t idx = 0;
    for (LayerNode& node : net.layers) {
      if (node.kind == LayerKind::kBatchNorm) {
        auto& bn = std::get<BatchNormLayer>(node.impl);
        bn.state.running_mean = stats[idx].first;
        bn.state.running_var = stats[idx].second;
        ++idx;
      }
    }
  };

  auto loss = [&]() {
    ForwardResult res = forward(net, a0, Mode::kTrain);
    const double total = cross_entropy_loss(softmax_forward(res.logits), gt).total;
    restore_stats();
    return total;
  };

  // decision signature of the most recent forward, read from the caches
  auto signature = [&]() {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix = [&hash](std::uint64_t v) {
      hash ^= v;
      hash *= 0x100000001b3ULL;
    };
    for (const LayerNode& node : net.layers) {
      if (node.kind == LayerKind::kRelu) {
        const auto& r = std::get<ReluLayer>(node.impl);
        const std::vector<double>& in = std::holds_alternative<Tensor4>(r.input)
                                            ? std::get<Tensor4>(r.input).data
                                            : std::get<Matrix>(r.input).data;
        for (double v : in) mix(v >= 0.0 ? 1u : 0u);
      } else if (node.kind == LayerKind::kMaxpool) {
        for (std::size_t idx : std::get<MaxpoolLayer>(node.impl).cache.argmax) mix(idx);
      }
    }
    return hash;
  };

  const std::string target = net.shortcuts.empty() ? "net-mini" : "net-shortcut";
  return check_blocks(target, blocks, loss, signature, tolerance, h);
}

// ---------------------------------------------------------------------------
// standard suite

inline Network gradcheck_mini_net(std::uint64_t seed) {
  Network net = parse_architecture(
      "input 1 6\n"
      "conv 2 3 1 0\n"
      "relu\n"
      "maxpool 2 2 0\n"
      "flatten\n"
      "fc 10\n");
  init_params(net, seed);
  return net;
}

inline Network gradcheck_shortcut_net(std::uint64_t seed) {
  Network net = parse_architecture(
      "input 1 3\n"
      "flatten\n"
      "fc 6\n"
      "fc 6\n"
      "relu\n"
      "fc 6\n"
      "shortcut 2 5\n");
  init_params(net, seed);
  return net;
}

// Every layer kind plus the two miniature end-to-end networks. `filter`
// restricts to targets containing the given substring.
inline std::vector<GradCheckReport> run_standard_checks(std::uint64_t seed, double tolerance,
                                                        double h = kGradCheckH,
                                                        const std::string& filter = "") {
  std::vector<GradCheckReport> reports;
  auto want = [&filter](const std::string& name) {
    return filter.empty() || name.find(filter) != std::string::npos;
  };

  if (want("softmax-ce")) reports.push_back(check_softmax_ce(seed, tolerance, h));
  if (want("relu")) reports.push_back(check_relu_layer(seed, tolerance, h));
  if (want("fc")) reports.push_back(check_fc_layer(seed, tolerance, h));
  if (want("maxpool")) reports.push_back(check_maxpool_layer(seed, tolerance, h));
  if (want("flatten")) reports.push_back(check_flatten_layer(seed, tolerance, h));
  if (want("conv")) reports.push_back(check_conv_layer(seed, tolerance, h));
  if (want("batchnorm")) reports.push_back(check_batchnorm_layer(seed, tolerance, h, false));
  if (want("batchnorm-image")) reports.push_back(check_batchnorm_layer(seed, tolerance, h, true));
  if (want("net-mini")) {
    reports.push_back(check_network(gradcheck_mini_net(seed), 3, seed, tolerance, h));
  }
  if (want("net-shortcut")) {
    reports.push_back(check_network(gradcheck_shortcut_net(seed), 3, seed, tolerance, h));
  }
  return reports;
}

}  // namespace gradflow
