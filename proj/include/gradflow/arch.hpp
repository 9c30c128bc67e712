#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "gradflow/error.hpp"
#include "gradflow/network.hpp"

// Declarative architecture files: one directive per line, '#' starts a
// comment. Layer input sizes are inferred by chaining, so only the knobs a
// layer actually owns appear.
//
//   input <depth> <resolution>
//   conv <filters> <k> <s> <p>
//   relu
//   batchnorm
//   maxpool <k> <s> <p>
//   flatten
//   fc <features>
//   shortcut <src_activation> <dst_activation>

namespace gradflow {

inline constexpr const char* kReferenceArchText =
    "input 1 28\n"
    "conv 6 5 1 0\n"
    "relu\n"
    "batchnorm\n"
    "maxpool 2 2 0\n"
    "conv 16 5 1 0\n"
    "relu\n"
    "batchnorm\n"
    "maxpool 2 2 0\n"
    "flatten\n"
    "fc 120\n"
    "relu\n"
    "batchnorm\n"
    "fc 84\n"
    "relu\n"
    "batchnorm\n"
    "fc 10\n";

inline Network parse_architecture(const std::string& text) {
  Network net;
  bool have_input = false;
  StaticShape shape;
  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;

  auto fail = [&](const std::string& why) -> void {
    throw ConfigError("line " + std::to_string(line_no) + ": " + why);
  };

  while (std::getline(lines, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream words(line);
    std::string word;
    if (!(words >> word)) continue;

    auto next_count = [&](const char* what) -> std::size_t {
      long long v = -1;
      if (!(words >> v) || v < 0) fail(std::string("expected non-negative ") + what);
      return static_cast<std::size_t>(v);
    };

    if (word == "input") {
      if (have_input) fail("duplicate input directive");
      net.input_depth = next_count("depth");
      net.input_res = next_count("resolution");
      if (net.input_depth == 0 || net.input_res == 0) fail("input dimensions must be positive");
      shape = StaticShape{true, net.input_depth, net.input_res, 0};
      have_input = true;
      continue;
    }
    if (!have_input) fail("first directive must be 'input'");

    if (word == "conv") {
      const std::size_t filters = next_count("filter count");
      const std::size_t k = next_count("kernel size");
      const std::size_t s = next_count("stride");
      const std::size_t p = next_count("padding");
      if (!shape.is4d) fail("conv needs image input");
      net.layers.push_back(make_conv(filters, shape.d, SamplingTriplet{k, s, p}));
    } else if (word == "relu") {
      net.layers.push_back(make_relu());
    } else if (word == "batchnorm") {
      net.layers.push_back(make_batchnorm(shape.is4d ? shape.d : shape.f));
    } else if (word == "maxpool") {
      const std::size_t k = next_count("kernel size");
      const std::size_t s = next_count("stride");
      const std::size_t p = next_count("padding");
      net.layers.push_back(make_maxpool(SamplingTriplet{k, s, p}));
    } else if (word == "flatten") {
      net.layers.push_back(make_flatten());
    } else if (word == "fc") {
      const std::size_t features = next_count("feature count");
      if (shape.is4d) fail("fc needs a flatten first");
      net.layers.push_back(make_fc(shape.f, features));
    } else if (word == "shortcut") {
      const std::size_t src = next_count("source activation");
      const std::size_t dst = next_count("destination activation");
      net.shortcuts.push_back(ShortcutEdge{src, dst});
      continue;
    } else {
      fail("unknown directive '" + word + "'");
    }

    try {
      shape = detail::infer_shape(net.layers.back(), shape, net.layers.size() - 1);
    } catch (const Error& e) {
      fail(e.what());
    }
  }

  if (!have_input) throw ConfigError("empty architecture: no input directive");
  if (net.layers.empty()) throw ConfigError("architecture has no layers");
  if (shape.is4d) throw ConfigError("architecture must end in feature-vector output");
  net.class_count = shape.f;
  finalize_network(net);
  return net;
}

}  // namespace gradflow
