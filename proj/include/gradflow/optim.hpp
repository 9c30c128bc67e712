#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradflow/mnist.hpp"
#include "gradflow/network.hpp"

// Plain stochastic gradient descent and the epoch/minibatch training loop.
// The loss being descended is the minibatch total (not the mean), so the
// learning rate is calibrated against summed gradients.

namespace gradflow {

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const {
    if (!(learning_rate > 0.0) && learning_rate != 0.0) {
      throw ConfigError("learning rate must be non-negative and finite");
    }
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double mean_loss = 0.0;         // batch loss divided by batch size
  double running_accuracy = 0.0;  // cumulative train accuracy within the epoch
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

// P <- P - lr * grad for every registered parameter. A non-finite gradient
// aborts before any parameter changes.
inline void sgd_step(std::vector<ParamTensor>& params, double learning_rate) {
  for (const ParamTensor& p : params) {
    for (double g : *p.grad) {
      if (!std::isfinite(g)) {
        throw NumericError("sgd_step: non-finite gradient in " + p.name);
      }
    }
  }
  for (ParamTensor& p : params) {
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      (*p.value)[i] -= learning_rate * (*p.grad)[i];
    }
  }
}

inline void sgd_step(Network& net, double learning_rate) {
  std::vector<ParamTensor> params = collect_params(net);
  sgd_step(params, learning_rate);
}

namespace detail {

inline std::size_t argmax_row(const Matrix& m, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols; ++j) {
    if (m(row, j) > m(row, best)) best = j;
  }
  return best;
}

inline std::size_t count_correct(const Matrix& y_pred, const Matrix& y_gt) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y_pred.rows; ++i) {
    if (argmax_row(y_pred, i) == argmax_row(y_gt, i)) ++correct;
  }
  return correct;
}

}  // namespace detail

// One pass over the dataset: per minibatch forward (train), loss, backward,
// SGD update. Records are handed to the sink as they are produced.
inline std::vector<MetricsRecord> train_epoch(Network& net, const Dataset& data,
                                              const TrainConfig& cfg, std::size_t epoch,
                                              const MetricsSink& sink = nullptr) {
  cfg.validate();
  std::vector<MetricsRecord> records;
  BatchIterator it = batches(data, cfg.batch_size, cfg.shuffle, cfg.seed, epoch);
  std::size_t batch_index = 0;
  std::size_t seen = 0;
  std::size_t correct = 0;
  while (auto batch = it.next()) {
    try {
      ForwardResult fwd = forward(net, batch->images, Mode::kTrain);
      Matrix y_pred = softmax_forward(fwd.logits);
      LossResult loss = cross_entropy_loss(y_pred, batch->labels);
      backward(net, y_pred, batch->labels);
      sgd_step(net, cfg.learning_rate);

      seen += batch->images.n;
      correct += detail::count_correct(y_pred, batch->labels);
      MetricsRecord rec;
      rec.epoch = epoch;
      rec.batch = batch_index;
      rec.mean_loss = loss.total / static_cast<double>(batch->images.n);
      rec.running_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
      records.push_back(rec);
      if (sink) sink(rec);
    } catch (const Error& e) {
      throw Error("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                  ": " + e.what());
    }
    ++batch_index;
  }
  return records;
}

struct EvalResult {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

// Infer-mode evaluation (batch norm on running statistics).
inline EvalResult evaluate(Network& net, const Dataset& data) {
  if (data.size() == 0) throw UsageError("evaluate: empty dataset");
  EvalResult res;
  res.count = data.size();
  const std::size_t chunk = 256;
  BatchIterator it(data, chunk, false, 0, 0, /*min_batch=*/1);
  double total_loss = 0.0;
  std::size_t correct = 0;
  while (auto batch = it.next()) {
    ForwardResult fwd = forward(net, batch->images, Mode::kInfer);
    Matrix y_pred = softmax_forward(fwd.logits);
    total_loss += cross_entropy_loss(y_pred, batch->labels).total;
    correct += detail::count_correct(y_pred, batch->labels);
  }
  res.mean_loss = total_loss / static_cast<double>(data.size());
  res.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return res;
}

}  // namespace gradflow
