#include <gtest/gtest.h>

#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/rng.hpp"
#include "qsim/tpq.hpp"

using namespace qsim;

namespace {

// Partition rows by timestep, quantize each group with plain quantize, scatter back.
Tensor group_loop(const Tensor& x, const TimestepIndex& idx, const TemporalQuantParams& q) {
  Tensor out(x.shape());
  for (std::uint32_t t = 1; t <= q.T(); ++t) {
    std::vector<std::size_t> rows;
    for (std::size_t n = 0; n < idx.size(); ++n)
      if (idx.t[n] == t) rows.push_back(n);
    if (rows.empty()) continue;
    std::vector<float> buf;
    for (auto n : rows) buf.insert(buf.end(), x.row(n).begin(), x.row(n).end());
    auto g = quantize(Tensor::matrix(rows.size(), x.cols(), buf), q.at(t));
    for (std::size_t k = 0; k < rows.size(); ++k)
      std::copy(g.row(k).begin(), g.row(k).end(), out.row(rows[k]).begin());
  }
  return out;
}

TemporalQuantParams random_params(RngStream& rng, std::size_t T, int bits) {
  TemporalQuantParams q;
  q.bits = bits;
  for (std::size_t t = 0; t < T; ++t) {
    q.delta.push_back(0.01 + rng.uniform());
    q.zero_point.push_back(double(rng.uniform_index(1u << bits)));
  }
  return q;
}

}  // namespace

TEST(TpqInit, SingleStepMatchesPerTensor) {
  RngStream rng(1, 0);
  auto x = rng_normal(rng, {20, 3}, 0.0f, 1.0f);
  std::vector<Tensor> steps{x};
  for (auto m : {CalibMethod::kMaxMin, CalibMethod::kMse}) {
    auto q = tpq_init(steps, 4, m);
    auto ref = calibrate(x, 4, Granularity::kPerTensor, m);
    ASSERT_EQ(q.T(), 1u);
    EXPECT_EQ(q.delta[0], ref.delta[0]);
    EXPECT_EQ(q.zero_point[0], double(ref.zero_point[0]));
  }
}

TEST(TpqInit, PerStepRanges) {
  std::vector<Tensor> steps{Tensor::vector({0, 1}), Tensor::vector({0, 2}),
                            Tensor::vector({0, 4})};
  auto q = tpq_init(steps, 2, CalibMethod::kMaxMin);
  EXPECT_DOUBLE_EQ(q.delta[0], 1.0 / 3);
  EXPECT_DOUBLE_EQ(q.delta[1], 2.0 / 3);
  EXPECT_DOUBLE_EQ(q.delta[2], 4.0 / 3);
}

TEST(TpqInit, IdenticalStepsGiveIdenticalParams) {
  RngStream rng(2, 0);
  auto x = rng_normal(rng, {30, 2}, 0.0f, 1.0f);
  std::vector<Tensor> steps(4, x);
  auto q = tpq_init(steps, 4, CalibMethod::kMse);
  for (std::size_t t = 1; t < 4; ++t) {
    EXPECT_EQ(q.delta[t], q.delta[0]);
    EXPECT_EQ(q.zero_point[t], q.zero_point[0]);
  }
}

TEST(TpqInit, RejectsEmptySet) {
  EXPECT_THROW(tpq_init(std::vector<Tensor>{}, 4, CalibMethod::kMse), ValidationError);
}

TEST(TpqQuantize, HandExample) {
  TemporalQuantParams q{2, {0.5, 1.0, 2.0}, {0, 0, 0}};
  auto out = tpq_quantize(Tensor::matrix(2, 1, {0.9f, 0.9f}), TimestepIndex{{1, 3}}, q);
  EXPECT_EQ(out, Tensor::matrix(2, 1, {1.0f, 0.0f}));
}

TEST(TpqQuantize, SingleStepBatchEqualsQuantize) {
  RngStream rng(3, 0);
  auto q = random_params(rng, 5, 4);
  auto x = rng_normal(rng, {12, 4}, 0.0f, 2.0f);
  TimestepIndex idx{std::vector<std::uint32_t>(12, 4)};
  EXPECT_EQ(tpq_quantize(x, idx, q), quantize(x, q.at(4)));
}

TEST(TpqQuantize, MatchesGroupLoop) {
  RngStream rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.uniform_index(20), N = 1 + rng.uniform_index(128);
    const std::size_t C = 1 + rng.uniform_index(8);
    auto q = random_params(rng, T, 1 + int(rng.uniform_index(8)));
    auto x = rng_normal(rng, {N, C}, 0.0f, 3.0f);
    TimestepIndex idx;
    for (std::size_t n = 0; n < N; ++n) idx.t.push_back(1 + std::uint32_t(rng.uniform_index(T)));
    EXPECT_EQ(tpq_quantize(x, idx, q), group_loop(x, idx, q));
  }
}

TEST(TpqQuantize, PermutationEquivariant) {
  RngStream rng(5, 0);
  auto q = random_params(rng, 6, 4);
  auto x = rng_normal(rng, {30, 3}, 0.0f, 2.0f);
  TimestepIndex idx;
  for (int n = 0; n < 30; ++n) idx.t.push_back(1 + std::uint32_t(rng.uniform_index(6)));
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 29; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);

  Tensor xp(x.shape());
  TimestepIndex ip;
  for (std::size_t k = 0; k < 30; ++k) {
    std::copy(x.row(perm[k]).begin(), x.row(perm[k]).end(), xp.row(k).begin());
    ip.t.push_back(idx.t[perm[k]]);
  }
  auto y = tpq_quantize(x, idx, q);
  auto yp = tpq_quantize(xp, ip, q);
  for (std::size_t k = 0; k < 30; ++k)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(yp.at(k, c), y.at(perm[k], c));
}

TEST(TpqQuantize, RejectsBadIndex) {
  TemporalQuantParams q{4, {1, 1}, {0, 0}};
  auto x = Tensor({2, 1});
  EXPECT_THROW(tpq_quantize(x, TimestepIndex{{1, 3}}, q), ValidationError);
  EXPECT_THROW(tpq_quantize(x, TimestepIndex{{0, 1}}, q), ValidationError);
  EXPECT_THROW(tpq_quantize(x, TimestepIndex{{1}}, q), ValidationError);
}

TEST(TpqParams, AtRoundsZeroPoint) {
  TemporalQuantParams q{4, {0.5, 0.25}, {2.4, 2.6}};
  EXPECT_EQ(q.at(1).zero_point[0], 2);
  EXPECT_EQ(q.at(2).zero_point[0], 3);
  EXPECT_EQ(q.at(2).delta[0], 0.25);
}

TEST(SplitByTimestep, GroupsRows) {
  auto x = Tensor::matrix(4, 1, {1, 2, 3, 4});
  auto parts = split_by_timestep(x, TimestepIndex{{2, 1, 2, 1}}, 2);
  EXPECT_EQ(parts[0], Tensor::matrix(2, 1, {2, 4}));
  EXPECT_EQ(parts[1], Tensor::matrix(2, 1, {1, 3}));
  EXPECT_THROW(split_by_timestep(x, TimestepIndex{{1, 1, 1, 1}}, 2), ValidationError);
}

TEST(TpqJson, RoundTrip) {
  TemporalQuantParams q{4, {0.5, 0.25}, {2.0, -3.0}};
  auto j = tpq_to_json(q);
  EXPECT_EQ(j["T"], 2);
  EXPECT_EQ(j["bits"], 4);
  auto back = tpq_from_json(j);
  EXPECT_EQ(back.delta, q.delta);
  EXPECT_EQ(back.zero_point, q.zero_point);
}
