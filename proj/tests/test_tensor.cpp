#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "bmlab/bmlab.hpp"
#include "oracles.hpp"

using namespace bmlab;

namespace {

Tensor iota_tensor(Shape s, double start = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + static_cast<double>(i);
  return Tensor(std::move(s), std::move(v));
}

// Direct nested-loop convolution used as the reference for the im2col path.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t s, std::size_t p) {
  const std::size_t N = x.dim(0), I = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0), K = w.dim(2);
  const std::size_t OH = (H + 2 * p - K) / s + 1, OW = (W + 2 * p - K) / s + 1;
  std::vector<double> out(N * O * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double acc = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < I; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long yy = static_cast<long>(i * s + ki) - static_cast<long>(p);
                const long xx = static_cast<long>(j * s + kj) - static_cast<long>(p);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x[((n * I + c) * H + static_cast<std::size_t>(yy)) * W + static_cast<std::size_t>(xx)] *
                       w[((o * I + c) * K + ki) * K + kj];
              }
          out[((n * O + o) * OH + i) * OW + j] = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, OneByOneScalesInput) {
  Tensor x(Shape{1, 1, 3, 3}, 1.0);
  Tensor w(Shape{1, 1, 1, 1}, 2.0);
  Tensor b(Shape{1}, 0.0);
  Tensor y = conv2d(x, w, b, 1, 0);
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, AllOnesKernelCentreSumsInput) {
  Tensor x = iota_tensor(Shape{1, 1, 3, 3});
  Tensor w(Shape{1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, w, Tensor(Shape{1}, 0.0), 1, 1);
  EXPECT_EQ(y[4], 45.0);
}

TEST(Conv2d, StridedDownsampleShape) {
  SplitMix64 rng(3);
  Tensor x = oracle::random_tensor(Shape{1, 256, 28, 28}, rng, -1, 1, false);
  Tensor w = oracle::random_tensor(Shape{8, 256, 3, 3}, rng, -1, 1, false);
  Tensor y = conv2d(x, w, Tensor(Shape{8}, 0.0), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 14, 14}));
}

TEST(Conv2d, MatchesNaiveLoopsAcrossGeometries) {
  SplitMix64 rng(11);
  for (std::size_t K : {1u, 3u, 5u}) {
    for (std::size_t s : {1u, 2u, 3u}) {
      for (std::size_t p : {0u, 1u, 2u}) {
        Tensor x = oracle::random_tensor(Shape{2, 3, 7, 6}, rng, -1, 1, false);
        Tensor w = oracle::random_tensor(Shape{4, 3, K, K}, rng, -1, 1, false);
        Tensor b = oracle::random_tensor(Shape{4}, rng, -1, 1, false);
        Tensor y = conv2d(x, w, b, s, p);
        const std::size_t OH = (7 + 2 * p - K) / s + 1, OW = (6 + 2 * p - K) / s + 1;
        ASSERT_EQ(y.shape(), (Shape{2, 4, OH, OW}));
        const auto ref = naive_conv(x, w, b, s, p);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
      }
    }
  }
}

TEST(Conv2d, DiracKernelReproducesInput) {
  SplitMix64 rng(5);
  for (std::size_t K : {1u, 3u, 5u}) {
    Tensor x = oracle::random_tensor(Shape{1, 2, 5, 4}, rng, -1, 1, false);
    Tensor w(Shape{2, 2, K, K}, 0.0);
    for (std::size_t c = 0; c < 2; ++c) w[((c * 2 + c) * K + K / 2) * K + K / 2] = 1.0;
    Tensor y = conv2d(x, w, 1, (K - 1) / 2);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  }
}

TEST(Conv2d, RejectsBadShapes) {
  Tensor x(Shape{1, 2, 5, 5});
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 3, 3, 3}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 2, 2, 2}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 2, 3, 3}), 0, 1), ShapeError);
  EXPECT_THROW(conv2d(Tensor(Shape{2, 5, 5}), Tensor(Shape{1, 2, 3, 3}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{2}), 1, 1), ShapeError);
}

TEST(ConvTranspose2d, BroadcastsSingleInput) {
  Tensor x(Shape{1, 1, 1, 1}, 3.0);
  Tensor w(Shape{1, 1, 2, 2}, 1.0);
  Tensor y = conv_transpose2d(x, w);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 3.0);
}

TEST(ConvTranspose2d, DoublesSpatialDims) {
  Tensor x(Shape{1, 4, 14, 14}, 0.5);
  Tensor w(Shape{4, 6, 2, 2}, 0.1);
  EXPECT_EQ(conv_transpose2d(x, w, Tensor(Shape{6}, 0.0)).shape(), (Shape{1, 6, 28, 28}));
}

TEST(ConvTranspose2d, UnsupportedGeometryIsConfigError) {
  Tensor x(Shape{1, 1, 2, 2});
  EXPECT_THROW(conv_transpose2d(x, Tensor(Shape{1, 1, 3, 3})), ConfigError);
  EXPECT_THROW(conv_transpose2d(x, Tensor(Shape{1, 1, 2, 2}), 1), ConfigError);
  EXPECT_THROW(conv_transpose2d(x, Tensor(Shape{2, 1, 2, 2})), ShapeError);
}

TEST(ConvTranspose2d, GradientMatchesFiniteDifferencesTightly) {
  SplitMix64 rng(21);
  Tensor x = oracle::random_tensor(Shape{1, 2, 3, 3}, rng);
  Tensor w = oracle::random_tensor(Shape{2, 3, 2, 2}, rng);
  Tensor b = oracle::random_tensor(Shape{3}, rng);
  auto r = oracle::grad_check({x, w, b}, [&] { return oracle::probe(conv_transpose2d(x, w, b), 7); }, 1000, 1);
  EXPECT_EQ(r.coordinates, x.numel() + w.numel() + b.numel());
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Relu, Examples) {
  Tensor y = relu(Tensor(Shape{3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
  Tensor pos(Shape{2, 2}, {1, 2, 3, 4});
  Tensor rp = relu(pos);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rp[i], pos[i]);
  Tensor x(Shape{2}, {-1.0, 2.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Relu, ZeroHasZeroSubgradient) {
  Tensor x(Shape{1}, {0.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Sigmoid, Examples) {
  EXPECT_EQ(sigmoid(Tensor(Shape{1}, 0.0))[0], 0.5);
  EXPECT_NEAR(sigmoid(Tensor(Shape{1}, 20.0))[0], 1.0, 1e-8);
  const double s = sigmoid(Tensor(Shape{1}, -800.0))[0];
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_GE(s, 0.0);
}

TEST(Sigmoid, DerivativeAtOne) {
  Tensor x(Shape{1}, {1.0}, true);
  backward(sum(sigmoid(x)));
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(x.grad()[0], s1 * (1 - s1), 1e-15);
  auto r = oracle::grad_check({x}, [&] { return sum(sigmoid(x)); }, 1, 2);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Add, Examples) {
  Tensor a(Shape{2}, {1.0, 2.0}, true), b(Shape{2}, {3.0, 4.0}, true);
  Tensor c = add(a, b);
  EXPECT_EQ(c[0], 4.0);
  EXPECT_EQ(c[1], 6.0);
  Tensor z = add(a, Tensor(Shape{2}, 0.0));
  EXPECT_EQ(z[0], 1.0);
  EXPECT_EQ(z[1], 2.0);
  backward(sum(add(a, b)));
  EXPECT_EQ(a.grad()[0], 1.0);
  EXPECT_EQ(a.grad()[1], 1.0);
  EXPECT_EQ(b.grad()[1], 1.0);
  EXPECT_THROW(add(a, Tensor(Shape{3})), ShapeError);
}

TEST(Backward, PolynomialAndUnusedParameter) {
  ParamSet ps(0);
  ps.add("x", Tensor(Shape{2}, {1.0, -2.0}));
  ps.add("unused", Tensor(Shape{3}, 5.0));
  Tensor x = ps.at("x");
  bmlab::backward(sum(mul(x, x)), ps);
  EXPECT_EQ(ps.at("x").grad()[0], 2.0);
  EXPECT_EQ(ps.at("x").grad()[1], -4.0);
  for (double g : ps.at("unused").grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x(Shape{2}, 1.0, true);
  EXPECT_THROW(backward(relu(x)), ContractError);
  ParamSet ps;
  EXPECT_THROW(backward(relu(x), ps), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x(Shape{1}, {3.0}, true);
  Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // 2x^2 -> 4x
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x(Shape{1}, {3.0}, true);
  NoGradGuard g;
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, EveryOpOnRandomShapes) {
  SplitMix64 rng(99);
  std::size_t coords = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t N = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const std::size_t C = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const std::size_t H = static_cast<std::size_t>(rng.uniform_int(3, 6));
    const std::size_t W = static_cast<std::size_t>(rng.uniform_int(3, 6));
    const std::size_t O = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const std::size_t K = trial % 2 ? 3 : 1;
    const std::size_t s = static_cast<std::size_t>(rng.uniform_int(1, 2));
    Tensor x = oracle::random_tensor(Shape{N, C, H, W}, rng);
    Tensor w = oracle::random_tensor(Shape{O, C, K, K}, rng);
    Tensor b = oracle::random_tensor(Shape{O}, rng);
    Tensor wt = oracle::random_tensor(Shape{C, O, 2, 2}, rng);
    Tensor y2 = oracle::random_tensor(Shape{N, C, H, W}, rng);
    std::vector<std::size_t> ch(N);
    for (auto& c : ch) c = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(O) - 1));
    const std::uint64_t pseed = 1000 + static_cast<std::uint64_t>(trial);
    std::vector<std::pair<std::vector<Tensor>, std::function<Tensor()>>> cases = {
        {{x, w, b}, [&] { return oracle::probe(conv2d(x, w, b, s, K / 2), pseed); }},
        {{x, wt}, [&] { return oracle::probe(conv_transpose2d(x, wt), pseed); }},
        {{x}, [&] { return oracle::probe(sigmoid(x), pseed); }},
        {{x}, [&] { return oracle::probe(relu(x), pseed); }},
        {{x, y2}, [&] { return oracle::probe(add(x, y2), pseed); }},
        {{x, y2}, [&] { return oracle::probe(mul(x, y2), pseed); }},
        {{x}, [&] { return oracle::probe(scale(x, -1.7), pseed); }},
        {{x}, [&] { return oracle::probe(upsample_nearest2x(x), pseed); }},
        {{x, w, b}, [&] { return oracle::probe(select_channels(conv2d(x, w, b, 1, K / 2), ch), pseed); }},
    };
    for (auto& [leaves, f] : cases) {
      auto r = oracle::grad_check(leaves, f, 4, pseed);
      coords += r.coordinates;
      worst = std::max(worst, r.max_rel_error);
    }
  }
  EXPECT_GE(coords, 100u);
  EXPECT_LT(worst, 1e-3);
}

TEST(Sgd, SingleStep) {
  ParamSet ps;
  Tensor& t = ps.add("w.weight", Tensor(Shape{1}, 1.0));
  t.zero_grad();
  t.grad()[0] = 1.0;
  sgd_step(ps, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(ps.at("w.weight")[0], 0.9);
  EXPECT_FALSE(ps.at("w.weight").has_grad());
}

TEST(Sgd, MomentumRecursion) {
  ParamSet ps;
  ps.add("w.weight", Tensor(Shape{1}, 0.0));
  for (int k = 0; k < 2; ++k) {
    ps.at("w.weight").zero_grad();
    ps.at("w.weight").grad()[0] = 1.0;
    sgd_step(ps, 0.1, 0.9, 0.0);
  }
  EXPECT_NEAR(ps.at("w.weight")[0], -0.29, 1e-15);
}

TEST(Sgd, ZeroLrLeavesParameters) {
  ParamSet ps;
  ps.add("a.weight", Tensor(Shape{2}, {0.3, -0.4}));
  ps.add("a.bias", Tensor(Shape{1}, {0.1}));
  for (auto& e : ps) {
    e.value.zero_grad();
    for (auto& g : e.value.grad()) g = 2.5;
  }
  sgd_step(ps, 0.0, 0.9, 1e-4);
  EXPECT_EQ(ps.at("a.weight")[0], 0.3);
  EXPECT_EQ(ps.at("a.bias")[0], 0.1);
}

TEST(Sgd, WeightDecaySkipsBiases) {
  ParamSet ps;
  ps.add("a.weight", Tensor(Shape{1}, {2.0}));
  ps.add("a.bias", Tensor(Shape{1}, {2.0}));
  for (auto& e : ps) e.value.zero_grad();
  sgd_step(ps, 1.0, 0.0, 0.5);
  EXPECT_EQ(ps.at("a.weight")[0], 1.0);
  EXPECT_EQ(ps.at("a.bias")[0], 2.0);
}

TEST(Sgd, MissingGradIsContractError) {
  ParamSet ps;
  ps.add("a.weight", Tensor(Shape{1}, 1.0));
  EXPECT_THROW(sgd_step(ps, 0.1, 0.9, 0.0), ContractError);
}

TEST(ParamSet, UniqueNamesAndOrder) {
  ParamSet ps(4);
  ps.add_kaiming("b.weight", Shape{2, 2, 3, 3}, 18);
  ps.add_zeros("a.bias", Shape{2});
  EXPECT_THROW(ps.add_zeros("a.bias", Shape{2}), ContractError);
  std::vector<std::string> names;
  for (const auto& e : ps) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"b.weight", "a.bias"}));
  EXPECT_THROW(ps.at("missing"), ContractError);
}

TEST(ParamSet, InitDependsOnSeedAndNameOnly) {
  ParamSet a(4), b(4), c(5);
  a.add_kaiming("x.weight", Shape{3, 3}, 9);
  b.add_zeros("other", Shape{1});
  b.add_kaiming("x.weight", Shape{3, 3}, 9);
  c.add_kaiming("x.weight", Shape{3, 3}, 9);
  const double bound = std::sqrt(6.0 / 9.0);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(a.at("x.weight")[i], b.at("x.weight")[i]);
    EXPECT_LE(std::abs(a.at("x.weight")[i]), bound);
  }
  EXPECT_NE(a.at("x.weight")[0], c.at("x.weight")[0]);
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "bmlab_ckpt_test";
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, ByteLayout) {
  ParamSet ps;
  ps.add("ab", Tensor(Shape{2}, {1.5, -2.0}));
  const std::string bytes = serialize_params(ps);
  ASSERT_EQ(bytes.size(), 6u + 8 + 2 + 8 + 8 + 16);
  EXPECT_EQ(bytes.substr(0, 6), "BMLAB1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2u);  // name length, little-endian
  for (int k = 7; k < 14; ++k) EXPECT_EQ(bytes[static_cast<std::size_t>(k)], 0);
  EXPECT_EQ(bytes.substr(14, 2), "ab");
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 1u);  // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 2u);  // extent
  double v;
  std::memcpy(&v, bytes.data() + 32, 8);
  EXPECT_EQ(v, 1.5);
}

TEST_F(CheckpointTest, RoundTripIsBitwise) {
  ParamSet a(9);
  a.add_kaiming("conv.weight", Shape{2, 3, 3, 3}, 27);
  a.add_zeros("conv.bias", Shape{2});
  save_checkpoint(a, dir / "a.bin");
  ParamSet b(123);
  b.add_zeros("conv.weight", Shape{2, 3, 3, 3});
  b.add_zeros("conv.bias", Shape{2});
  load_checkpoint(b, dir / "a.bin");
  save_checkpoint(b, dir / "b.bin");
  EXPECT_EQ(read_file_bytes(dir / "a.bin"), read_file_bytes(dir / "b.bin"));
}

TEST_F(CheckpointTest, MismatchNamesTheParameter) {
  ParamSet a(9);
  a.add_zeros("conv.weight", Shape{2, 3, 3, 3});
  save_checkpoint(a, dir / "a.bin");
  ParamSet b;
  b.add_zeros("conv.weight", Shape{4, 3, 3, 3});
  try {
    load_checkpoint(b, dir / "a.bin");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("conv.weight"), std::string::npos);
  }
  ParamSet c;
  c.add_zeros("conv.weight", Shape{2, 3, 3, 3});
  c.add_zeros("extra.bias", Shape{1});
  try {
    load_checkpoint(c, dir / "a.bin");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("extra.bias"), std::string::npos);
  }
}

TEST_F(CheckpointTest, TruncatedOrForeignFileIsParseError) {
  ParamSet a;
  a.add_zeros("w", Shape{4});
  std::string bytes = serialize_params(a);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(parse_checkpoint("NOTBMLAB"), ParseError);
}

TEST(Determinism, RepeatedForwardIsBitwiseIdentical) {
  SplitMix64 r1(8), r2(8);
  Tensor x1 = oracle::random_tensor(Shape{1, 3, 9, 9}, r1), x2 = oracle::random_tensor(Shape{1, 3, 9, 9}, r2);
  Tensor w1 = oracle::random_tensor(Shape{4, 3, 3, 3}, r1), w2 = oracle::random_tensor(Shape{4, 3, 3, 3}, r2);
  Tensor y1 = sigmoid(conv2d(x1, w1, 2, 1)), y2 = sigmoid(conv2d(x2, w2, 2, 1));
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(y1[i]), std::bit_cast<std::uint64_t>(y2[i]));
}

TEST(GradCheckOracle, KinkGuardExcludesOnlyNonSmoothCoordinates) {
  Tensor x(Shape{1, 1, 1, 3}, {0.0, 0.4, -0.3}, true);
  auto f = [&] { return sum(relu(x)); };
  const auto plain = oracle::grad_check({x}, f, 3, 1);
  EXPECT_GT(plain.max_rel_error, 0.1);  // central difference reads 0.5 at the kink
  const auto guarded = oracle::grad_check({x}, f, 3, 1, 1e-5, true);
  EXPECT_EQ(guarded.kinks_skipped, 1u);
  EXPECT_EQ(guarded.coordinates, 2u);
  EXPECT_LT(guarded.max_rel_error, 1e-8);
}
