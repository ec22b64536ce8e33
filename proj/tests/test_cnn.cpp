#include <gtest/gtest.h>

#include <cstring>

#include "cnnscope/cnn.hpp"
#include "cnnscope/dataset.hpp"
#include "support.hpp"

using namespace cnnscope;
using namespace testing_support;

TEST(Relu, Clips) {
  EXPECT_EQ(relu(-1.5), 0.0);
  EXPECT_EQ(relu(0.0), 0.0);
  EXPECT_EQ(relu(2.25), 2.25);
  const Tensor2 t = relu(Tensor2({1, 3}, {-1, 0, 3}));
  EXPECT_EQ(t.values(), (std::vector<double>{0, 0, 3}));
}

TEST(Conv2d, AllOnes) {
  const Tensor4 in({1, 3, 3, 1}, std::vector<double>(9, 1.0));
  const Tensor4 k({3, 3, 1, 1}, std::vector<double>(9, 1.0));
  const Tensor4 out = conv2d(in, k, Vector{0.0});
  EXPECT_EQ(out.shape(), (Tensor4::Shape{1, 1, 1, 1}));
  EXPECT_EQ(out[0], 9.0);
}

TEST(Conv2d, DeltaKernelCrops) {
  const Tensor4 in = random_tensor({2, 5, 5, 1}, 4);
  Tensor4 k({3, 3, 1, 1});
  k(0, 0, 0, 0) = 1.0;
  const Tensor4 out = conv2d(in, k, Vector{0.0});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out(s, i, j, 0), in(s, i, j, 0));
}

TEST(Conv2d, MatchesLoopOracle) {
  const Tensor4 in = random_tensor({1, 4, 4, 2}, 1);
  const Tensor4 k = random_tensor({3, 3, 2, 2}, 2);
  const Vector bias{0.25, -0.5};
  const Tensor4 out = conv2d(in, k, bias);
  ASSERT_EQ(out.shape(), (Tensor4::Shape{1, 2, 2, 2}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t f = 0; f < 2; ++f) {
        double want = bias[f];
        for (std::size_t p = 0; p < 3; ++p)
          for (std::size_t q = 0; q < 3; ++q)
            for (std::size_t r = 0; r < 2; ++r) want += in(0, i + p, j + q, r) * k(p, q, r, f);
        EXPECT_NEAR(out(0, i, j, f), want, 1e-12);
      }
}

TEST(Conv2d, ChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor4({1, 4, 4, 2}), Tensor4({3, 3, 1, 1}), Vector{0}), ShapeError);
}

TEST(Maxpool, Examples) {
  EXPECT_EQ(maxpool(Tensor4({1, 2, 2, 1}, {1, 2, 3, 4})).values(), std::vector<double>{4});
  const Tensor4 c = maxpool(Tensor4({1, 4, 4, 2}, std::vector<double>(32, 3.5)));
  for (double v : c.values()) EXPECT_EQ(v, 3.5);
}

TEST(Maxpool, MatchesLoopOracleAndDropsOddEdge) {
  for (std::size_t h : {6u, 7u}) {
    const Tensor4 in = random_tensor({1, h, h, 3}, h);
    const Tensor4 out = maxpool(in);
    ASSERT_EQ(out.extent(1), h / 2);
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < h / 2; ++j)
        for (std::size_t f = 0; f < 3; ++f) {
          double want = -1e300;
          for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t q = 0; q < 2; ++q) want = std::max(want, in(0, 2 * i + p, 2 * j + q, f));
          EXPECT_EQ(out(0, i, j, f), want);
        }
  }
}

TEST(Maxpool, TooSmall) { EXPECT_THROW(maxpool(Tensor4({1, 1, 1, 1})), ShapeError); }

TEST(NetworkSpec, DefaultShapes) {
  NetworkSpec s = NetworkSpec::simplified_lenet();
  const auto shapes = s.resolve();
  const std::vector<std::size_t> spatial{26, 13, 11, 5, 1, 1};
  for (std::size_t i = 0; i < spatial.size(); ++i) EXPECT_EQ(shapes[i].spatial, spatial[i]) << i;
  EXPECT_EQ(shapes[3].flat(), 800u);
  EXPECT_EQ(shapes[4].channels, 512u);
  const Network net = Network::initialize(s, 1);
  EXPECT_EQ(net.conv(0).kernel.shape(), (Tensor4::Shape{3, 3, 1, 16}));
  EXPECT_EQ(net.conv(1).kernel.shape(), (Tensor4::Shape{3, 3, 16, 32}));
}

TEST(NetworkSpec, RejectsBrokenChains) {
  NetworkSpec s;
  s.input_size = 4;
  s.layers = {ConvSpec{2, 5, 0}, SoftmaxSpec{3}};
  EXPECT_THROW(s.resolve(), ShapeError);
  s.layers = {DenseSpec{3}, ConvSpec{2, 3, 0}, SoftmaxSpec{3}};
  EXPECT_THROW(s.resolve(), ShapeError);
  s.layers = {ConvSpec{2, 3, 0}};
  EXPECT_THROW(s.resolve(), ShapeError);
}

TEST(Network, InitializationIsSeededAndBounded) {
  const Network a = Network::initialize(toy_spec_8x8(), 9);
  const Network b = Network::initialize(toy_spec_8x8(), 9);
  const Network c = Network::initialize(toy_spec_8x8(), 10);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
  for (double w : a.conv(0).kernel.values()) {
    EXPECT_GE(w, -0.1);
    EXPECT_LE(w, 0.1);
  }
}

TEST(Forward, SoftmaxRowsSumToOne) {
  const Network net = Network::initialize(NetworkSpec::simplified_lenet(), 3);
  const auto fp = forward(net, random_tensor({5, 28, 28, 1}, 3, 0.0, 1.0));
  for (std::size_t s = 0; s < 5; ++s) {
    double total = 0;
    for (std::size_t k = 0; k < 10; ++k) total += fp.probs(s, k);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(TrainStep, ZeroLearningRateLeavesWeightsBitwise) {
  Network net = Network::initialize(toy_spec_8x8(), 5);
  const Network before = net;
  train_step(net, random_batch(net, 3, 5), 0.0);
  ASSERT_EQ(net.params().size(), before.params().size());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    if (const auto* c = std::get_if<ConvParams>(&net.params()[i])) {
      const auto& o = std::get<ConvParams>(before.params()[i]);
      EXPECT_EQ(std::memcmp(c->kernel.data().data(), o.kernel.data().data(), o.kernel.size() * 8), 0);
    }
  }
  EXPECT_EQ(net.params(), before.params());
  EXPECT_EQ(net.step(), 1);
}

TEST(TrainStep, OverfitsOneSample) {
  Network net = Network::initialize(toy_spec_8x8(), 6);
  const Batch b = random_batch(net, 1, 6);
  const double first = train_step(net, b, 0.05).loss;
  double last = first;
  for (int i = 1; i < 50; ++i) last = train_step(net, b, 0.05).loss;
  EXPECT_LT(last, first);
  EXPECT_LT(last, 0.5 * first);
}

TEST(TrainStep, RecordAndCounter) {
  Network net = Network::initialize(NetworkSpec::simplified_lenet(), 2);
  const Batch b = random_batch(net, 4, 2);
  for (int n = 0; n < 3; ++n) {
    const StepRecord r = train_step(net, b, 0.001);
    EXPECT_EQ(r.step, n);
    EXPECT_TRUE(std::isfinite(r.loss));
    ASSERT_EQ(r.activations.size(), 2u);
    EXPECT_EQ(r.activations[0].shape(), (Tensor4::Shape{4, 26, 26, 16}));
    EXPECT_EQ(r.activations[1].shape(), (Tensor4::Shape{4, 11, 11, 32}));
    for (const auto& a : r.activations)
      for (double v : a.values()) ASSERT_GE(v, 0.0);
    EXPECT_EQ(r.weights[0], net.conv(0).kernel);
  }
  EXPECT_EQ(net.step(), 3);
}

TEST(TrainStep, DivergenceCarriesStep) {
  Network net = Network::initialize(toy_spec_8x8(), 7);
  const Batch b = random_batch(net, 2, 7);
  train_step(net, b, 0.01);
  train_step(net, b, 0.01);
  std::get<DenseParams>(net.mutable_params()[4]).bias[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(net, b, 0.01);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 2);
    EXPECT_NE(std::string(e.what()).find("numerical divergence"), std::string::npos);
  }
}

TEST(TrainStep, RejectsEmptyBatchAndBadLabels) {
  Network net = Network::initialize(toy_spec_8x8(), 7);
  EXPECT_THROW(train_step(net, Batch{Tensor4({0, 8, 8, 1}), {}}, 0.01), DomainError);
  Batch b = random_batch(net, 2, 1);
  b.labels[1] = 10;
  EXPECT_THROW(train_step(net, b, 0.01), IndexError);
  EXPECT_THROW(train_step(net, random_batch(net, 2, 1), -1.0), DomainError);
}

TEST(Gradients, MatchFiniteDifferencesOn4x4Toy) {
  const Network net = Network::initialize(toy_spec_4x4(), 11, 0.5);
  const auto r = gradient_check(net, random_batch(net, 2, 11));
  EXPECT_EQ(r.parameters, 2u * 9 + 2 + 2 * 4 + 4 + 4 * 3 + 3);
  EXPECT_LT(r.worst_relative, 1e-6) << r.worst_where;
}

TEST(Gradients, MeanReductionScalesSum) {
  const Network net = Network::initialize(toy_spec_8x8(), 12);
  const Batch b = random_batch(net, 4, 12);
  const auto gs = compute_gradients(net, b, Reduction::sum);
  const auto gm = compute_gradients(net, b, Reduction::mean);
  EXPECT_DOUBLE_EQ(gs.loss, gm.loss);
  const auto& ks = std::get<ConvParams>(gs.params[0]).kernel;
  const auto& km = std::get<ConvParams>(gm.params[0]).kernel;
  for (std::size_t i = 0; i < ks.size(); ++i) EXPECT_NEAR(ks[i] / 4.0, km[i], 1e-15);
}

TEST(Evaluate, UntrainedIsNearChance) {
  const Dataset d = make_synthetic({1000, 10, 28, 0.1, 4});
  const Network net = Network::initialize(NetworkSpec::simplified_lenet(), 4);
  // Balanced labels and no training signal: far from the trained regime.
  const double acc = evaluate(net, d.images, d.labels);
  EXPECT_LT(acc, 0.3);
}

TEST(Evaluate, MemorizedSamplesScorePerfectly) {
  const Dataset d = make_synthetic({10, 10, 8, 0.05, 8});
  NetworkSpec spec;
  spec.input_size = 8;
  spec.input_channels = 1;
  spec.layers = {ConvSpec{8, 3, 0}, PoolSpec{2}, DenseSpec{32}, SoftmaxSpec{10}};
  Network net = Network::initialize(spec, 8);
  Batch all{d.images, d.labels};
  for (int i = 0; i < 1000 && evaluate(net, d.images, d.labels) < 1.0; ++i) train_step(net, all, 0.01);
  EXPECT_EQ(evaluate(net, d.images, d.labels), 1.0);
}

TEST(Evaluate, MatchesManualCount) {
  const Dataset d = make_synthetic({100, 10, 8, 0.2, 13});
  const Network net = Network::initialize(toy_spec_8x8(), 13, 0.5);
  const Tensor2 logits = predict_logits(net, d.images);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < 100; ++s) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 10; ++k)
      if (logits(s, k) > logits(s, best)) best = k;
    correct += static_cast<int>(best) == d.labels[s];
  }
  EXPECT_DOUBLE_EQ(evaluate(net, d.images, d.labels, 7), correct / 100.0);
}

TEST(Evaluate, EmptyDataset) {
  const Network net = Network::initialize(toy_spec_8x8(), 1);
  EXPECT_THROW(evaluate(net, Tensor4({0, 8, 8, 1}), {}), DomainError);
}

TEST(Dataset, SyntheticIsBalancedAndDeterministic) {
  const Dataset a = make_synthetic({50, 10, 12, 0.1, 3});
  const Dataset b = make_synthetic({50, 10, 12, 0.1, 3});
  EXPECT_EQ(a.images, b.images);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), k), 5);
  for (double v : a.images.values()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Dataset, MnistSubsetLoads) {
  const MnistSplits m = load_mnist(CNNSCOPE_MNIST_DIR);
  EXPECT_EQ(m.train.size(), 9000u);
  EXPECT_EQ(m.test.size(), 1000u);
  EXPECT_EQ(m.train.images.shape(), (Tensor4::Shape{9000, 28, 28, 1}));
  for (int l : m.test.labels) {
    ASSERT_GE(l, 0);
    ASSERT_LT(l, 10);
  }
  EXPECT_EQ(planned_steps(m.train.size(), 50, 5), 900u);
  EXPECT_EQ(planned_steps(55000, 50, 5), 5500u);
}

TEST(Dataset, MissingDirectory) { EXPECT_THROW(load_mnist("/nonexistent/mnist"), IoError); }
