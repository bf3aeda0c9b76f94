// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "mdse/nn.hpp"
#include "support.hpp"

using namespace mdse;
using nn::Activation;
using M = nn::Matrix<double>;

namespace {

nn::Mlp<double> net3(bool bn, Activation out_act, std::uint64_t seed, long in = 5, long width = 10, long out = 4) {
  return nn::make_mlp<double>(in, nn::stack_spec({width, width}, Activation::relu, out, out_act, bn), seed);
}

// Loss <G, f(x)> on a copy of `net`, so running statistics stay put.
double probe_loss(const nn::Mlp<double>& net, const M& x, const M& g, nn::Mode mode) {
  auto copy = net;
  const auto c = nn::forward(copy, x, mode);
  return (c.output().array() * g.array()).sum();
}

}  // namespace

TEST(Forward, IdentityLinearLayer) {
  nn::Mlp<double> m;
  nn::Layer<double> l;
  l.weights = M::Identity(3, 3);
  l.bias = nn::Vector<double>::Zero(3);
  m.layers.push_back(l);
  std::mt19937_64 rng(1);
  const M x = gradcheck::random_matrix(4, 3, rng);
  EXPECT_EQ(nn::forward(m, x, nn::Mode::train).output(), x);
  EXPECT_EQ(nn::predict(m, x), x);
}

TEST(Forward, ZeroSigmoidIsHalf) {
  auto m = nn::make_mlp<double>(4, {{3, Activation::sigmoid, false}}, 1);
  m.layers[0].weights.setZero();
  std::mt19937_64 rng(2);
  const M y = nn::predict(m, gradcheck::random_matrix(5, 4, rng));
  EXPECT_TRUE((y.array() == 0.5).all());
}

TEST(Forward, SoftmaxRowsAreDistributions) {
  auto m = net3(true, Activation::softmax, 3);
  std::mt19937_64 rng(3);
  const M x = gradcheck::random_matrix(20, 5, rng, -5, 5);
  for (const M& y : {nn::forward(m, x, nn::Mode::train).output(), nn::predict(m, x)}) {
    EXPECT_GE(y.minCoeff(), 0.0);
    for (long b = 0; b < y.rows(); ++b) EXPECT_NEAR(y.row(b).sum(), 1.0, 1e-9);
  }
}

TEST(Forward, SoftmaxSurvivesHugeLogits) {
  auto m = nn::make_mlp<double>(2, {{3, Activation::softmax, false}}, 1);
  m.layers[0].weights << 1000, 0, 0, 1000, -1000, 0;
  M x(1, 2);
  x << 1, 0.5;
  const M y = nn::predict(m, x);
  EXPECT_TRUE(y.allFinite());
  EXPECT_NEAR(y(0, 0), 1.0, 1e-12);
}

TEST(Forward, DimensionMismatch) {
  auto m = net3(false, Activation::linear, 4);
  EXPECT_THROW(nn::predict(m, M(M::Zero(2, 6))), DataError);
}

TEST(Forward, TrainModeUpdatesRunningStatistics) {
  auto m = net3(true, Activation::linear, 5);
  std::mt19937_64 rng(5);
  const M x = gradcheck::random_matrix(8, 5, rng);
  const auto before = m.layers[0].batchnorm->running_mean;
  nn::forward(m, x, nn::Mode::train);
  EXPECT_NE(m.layers[0].batchnorm->running_mean, before);
  const auto after = m.layers[0].batchnorm->running_mean;
  nn::forward(m, x, nn::Mode::infer);
  EXPECT_EQ(m.layers[0].batchnorm->running_mean, after);
}

TEST(Forward, InferMatchesPredictAndIsBatchInvariant) {
  auto m = net3(true, Activation::sigmoid, 6);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 3; ++i) nn::forward(m, gradcheck::random_matrix(16, 5, rng), nn::Mode::train);
  const M x = gradcheck::random_matrix(9, 5, rng);
  const M batch = nn::predict(m, x);
  EXPECT_LT((nn::forward(m, x, nn::Mode::infer).output() - batch).cwiseAbs().maxCoeff(), 1e-14);
  for (long b = 0; b < x.rows(); ++b) {
    const M single = nn::predict(m, M(x.row(b)));
    EXPECT_LT((single - batch.row(b)).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(nn::predict(m, x), batch);
}

class BackwardFd : public ::testing::TestWithParam<std::tuple<bool, Activation, nn::Mode>> {};

TEST_P(BackwardFd, MatchesCentralDifferences) {
  const auto [bn, act, mode] = GetParam();
  auto m = net3(bn, act, 7);
  std::mt19937_64 rng(7);
  for (auto& l : m.layers)
    if (l.batchnorm) {
      l.batchnorm->gamma = nn::Vector<double>::Random(l.out_dim()).array() * 0.5 + 1.0;
      l.batchnorm->beta = nn::Vector<double>::Random(l.out_dim()) * 0.3;
      l.batchnorm->running_var = nn::Vector<double>::Random(l.out_dim()).array() * 0.3 + 1.0;
    }
  const M x = gradcheck::random_matrix(6, 5, rng);
  const M g = gradcheck::random_matrix(6, 4, rng);
  auto copy = m;
  const auto cache = nn::forward(copy, x, mode);
  auto grads = nn::backward(m, cache, g);
  const auto r = gradcheck::compare(nn::parameters(m), nn::gradient_spans(grads),
                                    [&] { return probe_loss(m, x, g, mode); }, 0, 1);
  EXPECT_LT(r.max_rel, 1e-4) << "checked " << r.checked;
  EXPECT_GT(r.checked, 200u);

  // Input gradient.
  M xv = x;
  std::vector<std::span<double>> xs{std::span<double>(xv.data(), std::size_t(xv.size()))};
  std::vector<std::span<double>> gs{std::span<double>(grads.input.data(), std::size_t(grads.input.size()))};
  const auto ri = gradcheck::compare(xs, gs, [&] { return probe_loss(m, xv, g, mode); }, 0, 1);
  EXPECT_LT(ri.max_rel, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Nets, BackwardFd,
                         ::testing::Values(std::tuple{false, Activation::linear, nn::Mode::train},
                                           std::tuple{true, Activation::sigmoid, nn::Mode::train},
                                           std::tuple{true, Activation::softmax, nn::Mode::train},
                                           std::tuple{true, Activation::sigmoid, nn::Mode::infer},
                                           std::tuple{false, Activation::softmax, nn::Mode::infer}),
                         [](const auto& info) {
                           return std::string(std::get<0>(info.param) ? "bn_" : "plain_") +
                                  nn::to_string(std::get<1>(info.param)) +
                                  (std::get<2>(info.param) == nn::Mode::train ? "_train" : "_infer");
                         });

TEST(Backward, LogitGradientMatchesSoftmaxChain) {
  auto m = net3(false, Activation::softmax, 8);
  std::mt19937_64 rng(8);
  const M x = gradcheck::random_matrix(4, 5, rng);
  auto cache = nn::forward(m, x, nn::Mode::train);
  std::vector<int> labels{0, 3, 1, 2};
  const auto a = nn::backward(m, cache, nn::cross_entropy_logit_grad<double>(cache.output(), labels),
                              nn::GradientAt::pre_activation);
  M dprob = M::Zero(4, 4);
  for (int b = 0; b < 4; ++b) dprob(b, labels[b]) = -1.0 / cache.output()(b, labels[b]) / 4.0;
  const auto c = nn::backward(m, cache, dprob);
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    EXPECT_LT((a.layers[l].weights - c.layers[l].weights).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, ZeroOutputGradient) {
  auto m = net3(true, Activation::sigmoid, 9);
  std::mt19937_64 rng(9);
  const auto cache = nn::forward(m, gradcheck::random_matrix(5, 5, rng), nn::Mode::train);
  auto g = nn::backward(m, cache, M(M::Zero(5, 4)));
  for (auto s : nn::gradient_spans(g))
    for (double v : s) EXPECT_EQ(v, 0.0);
}

TEST(Backward, BatchGradientIsMeanOfPerExample) {
  // Without batchnorm the examples are independent, so the gradient of the
  // batch-mean loss is the mean of the single-example gradients.
  auto m = net3(false, Activation::sigmoid, 10);
  std::mt19937_64 rng(10);
  const M x = gradcheck::random_matrix(2, 5, rng);
  const M y = gradcheck::random_matrix(2, 4, rng, 0, 1);
  auto full = nn::forward(m, x, nn::Mode::train);
  auto gb = nn::backward(m, full, nn::mse_grad(full.output(), y));
  std::vector<nn::Gradients<double>> per;
  for (long b = 0; b < 2; ++b) {
    const M xb = x.row(b), yb = y.row(b);
    auto c = nn::forward(m, xb, nn::Mode::train);
    per.push_back(nn::backward(m, c, nn::mse_grad(c.output(), yb)));
  }
  auto sb = nn::gradient_spans(gb);
  auto s0 = nn::gradient_spans(per[0]);
  auto s1 = nn::gradient_spans(per[1]);
  for (std::size_t t = 0; t < sb.size(); ++t)
    for (std::size_t j = 0; j < sb[t].size(); ++j) EXPECT_NEAR(sb[t][j], 0.5 * (s0[t][j] + s1[t][j]), 1e-14);
}

TEST(Backward, StaleCacheIsRejected) {
  auto a = net3(false, Activation::linear, 11);
  auto b = net3(false, Activation::linear, 11, 5, 7, 4);
  std::mt19937_64 rng(11);
  const auto cache = nn::forward(a, gradcheck::random_matrix(3, 5, rng), nn::Mode::train);
  EXPECT_THROW(nn::backward(b, cache, M(M::Zero(3, 4))), DataError);
  EXPECT_THROW(nn::backward(a, cache, M(M::Zero(2, 4))), DataError);
}

TEST(Adam, FirstStepByHand) {
  nn::AdamState<double> s;
  s.config = {1e-3, 0.9, 0.999, 1e-8};
  s.first_moment = {{0.0}};
  s.second_moment = {{0.0}};
  double p = 0.0, g = 1.0;
  nn::adam_step(s, {std::span<double>(&p, 1)}, {std::span<double>(&g, 1)});
  // m = 0.1, v = 0.001; bias corrected both become 1, step = lr / (1 + eps).
  EXPECT_NEAR(p, -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_LT(std::abs(p + 0.001), 1e-6);
  EXPECT_EQ(s.step_count, 1);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  auto m = net3(true, Activation::sigmoid, 12);
  const auto before = m;
  auto s = nn::make_adam(m);
  std::mt19937_64 rng(12);
  auto cache = nn::forward(m, gradcheck::random_matrix(4, 5, rng), nn::Mode::train);
  auto g = nn::backward(m, cache, M(M::Zero(4, 4)));
  for (int i = 0; i < 3; ++i) nn::adam_step(s, m, g);
  for (std::size_t l = 0; l < m.layers.size(); ++l) EXPECT_EQ(m.layers[l].weights, before.layers[l].weights);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  nn::AdamState<double> s;
  s.first_moment = {{0.0}};
  s.second_moment = {{0.0}};
  double p = 0.5, g = 2.0;
  std::vector<double> path{p};
  for (int i = 0; i < 2; ++i) {
    nn::adam_step(s, {std::span<double>(&p, 1)}, {std::span<double>(&g, 1)});
    path.push_back(p);
  }
  EXPECT_LT(path[1], path[0]);
  EXPECT_LT(path[2], path[1]);
  // With a constant gradient both bias-corrected moments equal g exactly.
  EXPECT_NEAR(path[2], 0.5 - 2e-3 * 2.0 / (2.0 + 1e-8), 1e-12);
}

TEST(Adam, ShapeMismatch) {
  nn::AdamState<double> s;
  s.first_moment = {{0.0}};
  s.second_moment = {{0.0}};
  double p[2] = {0, 0}, g = 1.0;
  EXPECT_THROW(nn::adam_step(s, {std::span<double>(p, 2)}, {std::span<double>(&g, 1)}), DataError);
}

TEST(Loss, MseExamples) {
  const M a = M::Random(3, 4);
  EXPECT_EQ(nn::mse(a, a), 0.0);
  const M b = a.array() + 1.0;
  EXPECT_DOUBLE_EQ(nn::mse(b, a), 2.0);
  EXPECT_THROW(nn::mse(a, M(M::Zero(3, 3))), DataError);
}

TEST(Loss, CrossEntropyExamples) {
  const M p = M::Constant(2, 5, 0.2);
  std::vector<int> y{0, 4};
  EXPECT_NEAR(nn::cross_entropy<double>(p, y), std::log(5.0), 1e-12);
  EXPECT_NEAR(nn::cross_entropy<double>(p, y), 1.60944, 1e-5);
  std::vector<int> bad{0, 5};
  EXPECT_THROW(nn::cross_entropy<double>(p, bad), DataError);
}

TEST(Serialization, RoundTripIsBitExact) {
  const auto dir = testing_support::scratch_dir("nn_ser");
  auto m = net3(true, Activation::softmax, 13);
  std::mt19937_64 rng(13);
  nn::forward(m, gradcheck::random_matrix(8, 5, rng), nn::Mode::train);
  nn::save_mlp(m, dir / "m.bin");
  const auto r = nn::load_mlp<double>(dir / "m.bin");
  const M x = gradcheck::random_matrix(3, 5, rng);
  EXPECT_EQ(nn::predict(r, x), nn::predict(m, x));
  ASSERT_EQ(r.layers.size(), m.layers.size());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    EXPECT_EQ(r.layers[l].weights, m.layers[l].weights);
    EXPECT_EQ(r.layers[l].activation, m.layers[l].activation);
    EXPECT_EQ(r.layers[l].batchnorm.has_value(), m.layers[l].batchnorm.has_value());
  }
}

TEST(Serialization, CorruptFiles) {
  const auto dir = testing_support::scratch_dir("nn_corrupt");
  auto m = net3(true, Activation::linear, 14);
  nn::save_mlp(m, dir / "m.bin");
  std::ifstream in(dir / "m.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& b) { std::ofstream(dir / "x.bin", std::ios::binary) << b; };

  write(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(nn::load_mlp<double>(dir / "x.bin"), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(nn::load_mlp<double>(dir / "x.bin"), FormatError);
  bad = bytes;
  bad[4] = 9;
  write(bad);
  EXPECT_THROW(nn::load_mlp<double>(dir / "x.bin"), FormatError);
  write(bytes + "junk");
  EXPECT_THROW(nn::load_mlp<double>(dir / "x.bin"), FormatError);
  EXPECT_THROW(nn::load_mlp<double>(dir / "missing.bin"), DataError);
}

TEST(Precision, FloatModelTracksDouble) {
  auto m = net3(true, Activation::sigmoid, 15);
  const auto f = nn::cast<float>(m);
  std::mt19937_64 rng(15);
  const M x = gradcheck::random_matrix(4, 5, rng);
  const nn::Matrix<float> y = nn::predict(f, nn::Matrix<float>(x.cast<float>()));
  EXPECT_LT((y.cast<double>() - nn::predict(m, x)).cwiseAbs().maxCoeff(), 1e-5);
}
