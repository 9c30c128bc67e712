#include "gradflow/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradflow/arch.hpp"
#include "test_util.hpp"

namespace gradflow {
namespace {

std::vector<ParamTensor> scalar_param(Vector& p, Vector& g) {
  return {{"p", {p.size()}, &p, &g}};
}

TEST(SgdStep, BasicArithmetic) {
  Vector p{1.0};
  Vector g{2.0};
  auto params = scalar_param(p, g);
  sgd_step(params, 0.1);
  EXPECT_NEAR(p[0], 0.8, 1e-15);

  Vector q{0.5, -0.5};
  Vector zero{0.0, 0.0};
  auto params2 = scalar_param(q, zero);
  sgd_step(params2, 0.1);
  EXPECT_EQ(q, (Vector{0.5, -0.5}));
}

// f(p) = p^2/2, gradient p: ten steps at lambda=0.1 contract by 0.9^10.
TEST(SgdStep, QuadraticContraction) {
  Vector p{1.0};
  Vector g{0.0};
  auto params = scalar_param(p, g);
  for (int i = 0; i < 10; ++i) {
    g[0] = p[0];
    sgd_step(params, 0.1);
  }
  EXPECT_NEAR(p[0], std::pow(0.9, 10), 1e-12);
  EXPECT_NEAR(p[0], 0.34867844, 1e-7);
}

TEST(SgdStep, LossStrictlyDecreasesBelowCriticalRate) {
  // f(p) = c p^2 / 2 with curvature c = 4; stable while lambda < 2/c
  const double curvature = 4.0;
  Vector p{1.5};
  Vector g{0.0};
  auto params = scalar_param(p, g);
  double prev = 0.5 * curvature * p[0] * p[0];
  for (int i = 0; i < 25; ++i) {
    g[0] = curvature * p[0];
    sgd_step(params, 0.4);  // 0.4 < 0.5
    const double loss = 0.5 * curvature * p[0] * p[0];
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

// One step at lambda and one at 2*lambda differ by exactly lambda * g.
TEST(SgdStep, AffineInLearningRate) {
  Rng rng(3);
  Vector base = test::rand_vector(16, rng);
  Vector grad = test::rand_vector(16, rng);

  Vector p1 = base;
  auto params1 = scalar_param(p1, grad);
  sgd_step(params1, 0.05);

  Vector p2 = base;
  auto params2 = scalar_param(p2, grad);
  sgd_step(params2, 0.10);

  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(p1[i] - p2[i], 0.05 * grad[i], 1e-15);
  }
}

TEST(SgdStep, NonFiniteGradientNamesParameter) {
  Vector p{1.0};
  Vector g{std::numeric_limits<double>::quiet_NaN()};
  auto params = scalar_param(p, g);
  try {
    sgd_step(params, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("p"), std::string::npos);
  }
  EXPECT_EQ(p[0], 1.0);  // aborted before mutation
}

Network mini_net(std::uint64_t seed) {
  Network net = parse_architecture(
      "input 1 28\n"
      "conv 2 5 1 0\n"
      "relu\n"
      "maxpool 4 4 0\n"
      "flatten\n"
      "fc 10\n");
  init_params(net, seed);
  return net;
}

TEST(TrainEpoch, ZeroRateLeavesParametersUntouched) {
  Network net = mini_net(1);
  Dataset ds = synthetic_dataset(16, 2, "train");
  std::vector<ParamTensor> params = collect_params(net);
  const std::vector<double> before = *params[0].value;

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  cfg.seed = 5;
  train_epoch(net, ds, cfg, 0);
  EXPECT_EQ(*params[0].value, before);
}

TEST(TrainEpoch, DeterministicLossSequence) {
  Dataset ds = synthetic_dataset(24, 3, "train");
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 8;
  cfg.seed = 11;
  cfg.shuffle = true;

  Network net1 = mini_net(7);
  Network net2 = mini_net(7);
  std::vector<MetricsRecord> run1 = train_epoch(net1, ds, cfg, 0);
  std::vector<MetricsRecord> run2 = train_epoch(net2, ds, cfg, 0);
  ASSERT_EQ(run1.size(), run2.size());
  for (std::size_t i = 0; i < run1.size(); ++i) {
    EXPECT_EQ(run1[i].mean_loss, run2[i].mean_loss);
    EXPECT_EQ(run1[i].running_accuracy, run2[i].running_accuracy);
  }
}

TEST(TrainEpoch, VisitsEveryBatchOnceAndEmitsRecords) {
  Network net = mini_net(9);
  Dataset ds = synthetic_dataset(10, 4, "train");
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.001;
  cfg.shuffle = false;

  std::size_t sink_calls = 0;
  std::vector<MetricsRecord> records =
      train_epoch(net, ds, cfg, 2, [&](const MetricsRecord&) { ++sink_calls; });
  ASSERT_EQ(records.size(), 3u);  // 4 + 4 + 2
  EXPECT_EQ(sink_calls, 3u);
  EXPECT_EQ(records[0].epoch, 2u);
  EXPECT_EQ(records[2].batch, 2u);
  for (const MetricsRecord& r : records) EXPECT_GE(r.mean_loss, 0.0);
}

TEST(TrainEpoch, LossDropsOnLearnableData) {
  Network net = mini_net(13);
  Dataset ds = synthetic_dataset(64, 5, "train");
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 8;
  cfg.seed = 5;

  double first_mean = 0.0;
  double last_mean = 0.0;
  for (std::size_t epoch = 0; epoch < 16; ++epoch) {
    std::vector<MetricsRecord> records = train_epoch(net, ds, cfg, epoch);
    double mean = 0.0;
    for (const MetricsRecord& r : records) mean += r.mean_loss;
    mean /= static_cast<double>(records.size());
    if (epoch == 0) first_mean = mean;
    last_mean = mean;
  }
  EXPECT_LT(last_mean, 0.5 * first_mean);
}

TEST(Evaluate, UniformPredictorScoresLnTen) {
  // zero weights in the only fc layer make every logit zero
  Network net = parse_architecture("input 1 28\nflatten\nfc 10\n");
  Dataset ds = synthetic_dataset(50, 6, "test");
  EvalResult res = evaluate(net, ds);
  EXPECT_NEAR(res.mean_loss, std::log(10.0), 1e-12);
  EXPECT_EQ(res.count, 50u);
  // argmax ties resolve to class 0, so accuracy is the class-0 share
  EXPECT_NEAR(res.accuracy, 0.1, 0.02);
}

TEST(Evaluate, UntrainedNetScoresNearChance) {
  Network net = mini_net(21);
  Dataset ds = synthetic_dataset(200, 7, "test");
  EvalResult res = evaluate(net, ds);
  EXPECT_GT(res.accuracy, 0.0);
  EXPECT_LT(res.accuracy, 0.45);  // chance is 0.1; untrained nets sit near it
}

TEST(Evaluate, EmptyDatasetRejected) {
  Network net = mini_net(1);
  Dataset empty;
  empty.images = Tensor4(0, 1, 28, 28);
  empty.labels = Matrix(0, 10);
  EXPECT_THROW(evaluate(net, empty), UsageError);
}

TEST(Evaluate, PerfectPredictionScoresZeroLossFullAccuracy) {
  // identity-ish construction: the dataset is one-hot rows themselves
  Network net = parse_architecture("input 1 2\nflatten\nfc 4\n");
  auto& fc = std::get<FcLayer>(net.layers[1].impl);
  for (std::size_t i = 0; i < 4; ++i) fc.w(i, i) = 50.0;  // sharp logits

  Dataset ds;
  ds.images = Tensor4(4, 1, 2, 2, 0.0);
  ds.labels = Matrix(4, 4, 0.0);
  for (std::size_t s = 0; s < 4; ++s) {
    ds.images.data[s * 4 + s] = 1.0;
    ds.labels(s, s) = 1.0;
  }
  EvalResult res = evaluate(net, ds);
  EXPECT_EQ(res.accuracy, 1.0);
  EXPECT_LT(res.mean_loss, 1e-12);
}

}  // namespace
}  // namespace gradflow
