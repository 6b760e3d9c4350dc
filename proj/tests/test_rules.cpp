#include <cmath>

#include "doctest.h"
#include "gdr2/gradcheck.hpp"
#include "gdr2/oracle.hpp"
#include "gdr2/rules.hpp"

using namespace gdr2;

namespace {

TokenGates<double> random_token(Rng& rng, index_t dk, index_t dv) {
  TokenGates<double> t;
  t.q = random_uniform_vec<double>(rng, dk, -1.0, 1.0);
  t.k = random_uniform_vec<double>(rng, dk, -1.0, 1.0);
  t.v = random_uniform_vec<double>(rng, dv, -1.0, 1.0);
  t.g = random_uniform_vec<double>(rng, dk, -0.7, -1e-3);
  t.alpha.resize(t.g.size());
  for (std::size_t i = 0; i < t.g.size(); ++i) t.alpha[i] = std::exp(t.g[i]);
  t.beta = rng.uniform(0.05, 0.95);
  t.b = random_uniform_vec<double>(rng, dk, 0.05, 0.95);
  t.w = random_uniform_vec<double>(rng, dv, 0.05, 0.95);
  return t;
}

}  // namespace

TEST_CASE("linear attention step writes an outer product") {
  Mat<double> s(2, 1);
  const Vec<double> k{1.0, 0.0};
  const Vec<double> v{3.0};
  const Mat<double> s1 = step_linear_attention(s, k, v);
  CHECK(s1(0, 0) == 3.0);
  CHECK(s1(1, 0) == 0.0);
}

TEST_CASE("orthonormal keys retrieve exactly") {
  Mat<double> s(2, 2);
  const Vec<double> k0{1.0, 0.0}, k1{0.0, 1.0};
  const Vec<double> v0{2.0, -1.0}, v1{0.5, 4.0};
  Mat<double> s1 = step_linear_attention(s, k0, v0);
  s1 = step_linear_attention(s1, k1, v1);
  CHECK(max_abs_diff(read_output(s1, k0), v0) == 0.0);
  CHECK(max_abs_diff(read_output(s1, k1), v1) == 0.0);
}

TEST_CASE("linear attention matches the masked parallel form") {
  Rng rng(101);
  const index_t L = 32, dk = 6, dv = 5;
  std::vector<TokenGates<double>> tokens;
  Mat<double> Q(L, dk), K(L, dk), V(L, dv);
  for (index_t t = 0; t < L; ++t) {
    TokenGates<double> g = random_token(rng, dk, dv);
    for (index_t c = 0; c < dk; ++c) {
      Q(t, c) = g.q[static_cast<std::size_t>(c)];
      K(t, c) = g.k[static_cast<std::size_t>(c)];
    }
    for (index_t c = 0; c < dv; ++c) V(t, c) = g.v[static_cast<std::size_t>(c)];
    tokens.push_back(std::move(g));
  }
  const SequenceRun<double> run =
      run_sequence_reference(RuleKind::linear_attention, tokens, Mat<double>(dk, dv));
  Mat<double> scores = matmul(Q, transposed(K));
  tril_inplace(scores, 0);  // causal mask
  const Mat<double> parallel = matmul(scores, V);
  CHECK(max_abs_diff(run.outputs, parallel) <= 1e-12);
}

TEST_CASE("mamba2 step") {
  SUBCASE("alpha = 1 reduces to linear attention, bitwise") {
    Rng rng(5);
    const Mat<double> s = random_uniform<double>(rng, 3, 4, -1.0, 1.0);
    const Vec<double> k = random_uniform_vec<double>(rng, 3, -1.0, 1.0);
    const Vec<double> v = random_uniform_vec<double>(rng, 4, -1.0, 1.0);
    CHECK(max_abs_diff(step_mamba2(s, k, v, 1.0), step_linear_attention(s, k, v)) == 0.0);
  }
  SUBCASE("pure decay") {
    Mat<double> s(1, 1);
    s(0, 0) = 2.0;
    const Mat<double> s1 = step_mamba2(s, Vec<double>{0.0}, Vec<double>{0.0}, 0.5);
    CHECK(s1(0, 0) == 1.0);
  }
  SUBCASE("cumulative read factor over L = 16") {
    Rng rng(23);
    const index_t L = 16, dk = 4, dv = 3;
    Mat<double> state(dk, dv);
    std::vector<Vec<double>> ks, vs;
    std::vector<double> alphas;
    for (index_t t = 0; t < L; ++t) {
      ks.push_back(random_uniform_vec<double>(rng, dk, -1.0, 1.0));
      vs.push_back(random_uniform_vec<double>(rng, dv, -1.0, 1.0));
      alphas.push_back(rng.uniform(0.2, 1.0));
      state = step_mamba2(state, ks.back(), vs.back(), alphas.back());
    }
    // each write at i is read at the end with factor gamma_L / gamma_i
    std::vector<double> gamma(static_cast<std::size_t>(L) + 1, 1.0);
    for (index_t t = 0; t < L; ++t)
      gamma[static_cast<std::size_t>(t) + 1] =
          gamma[static_cast<std::size_t>(t)] * alphas[static_cast<std::size_t>(t)];
    Mat<double> expect(dk, dv);
    for (index_t t = 0; t < L; ++t) {
      const double f = gamma[static_cast<std::size_t>(L)] / gamma[static_cast<std::size_t>(t) + 1];
      for (index_t i = 0; i < dk; ++i)
        for (index_t j = 0; j < dv; ++j)
          expect(i, j) += f * ks[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] *
                          vs[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
    }
    CHECK(max_abs_diff(state, expect) <= 1e-12);
  }
  SUBCASE("alpha out of range") {
    CHECK_THROWS_AS(step_mamba2(Mat<double>(1, 1), Vec<double>{0.0}, Vec<double>{0.0}, 1.5),
                    ContractError);
    CHECK_THROWS_AS(step_mamba2(Mat<double>(1, 1), Vec<double>{0.0}, Vec<double>{0.0}, 0.0),
                    ContractError);
  }
}

TEST_CASE("deltanet step") {
  Rng rng(31);
  const Mat<double> s = random_uniform<double>(rng, 4, 3, -1.0, 1.0);
  const Vec<double> k = random_uniform_vec<double>(rng, 4, -1.0, 1.0);
  const Vec<double> v = random_uniform_vec<double>(rng, 3, -1.0, 1.0);

  SUBCASE("beta = 0 leaves the state unchanged") {
    CHECK(max_abs_diff(step_deltanet(s, k, v, 0.0), s) == 0.0);
  }
  SUBCASE("projector overwrite at unit key") {
    Vec<double> ku = k;
    double n = 0.0;
    for (double x : ku) n += x * x;
    n = std::sqrt(n);
    for (double& x : ku) x /= n;
    // S = k u^T so the old association lives exactly at the key
    const Vec<double> u = random_uniform_vec<double>(rng, 3, -1.0, 1.0);
    Mat<double> s_ku(4, 3);
    for (index_t i = 0; i < 4; ++i)
      for (index_t j = 0; j < 3; ++j)
        s_ku(i, j) = ku[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(j)];
    const Mat<double> s1 = step_deltanet(s_ku, ku, v, 1.0);
    Mat<double> expect(4, 3);
    for (index_t i = 0; i < 4; ++i)
      for (index_t j = 0; j < 3; ++j)
        expect(i, j) = ku[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(j)];
    CHECK(max_abs_diff(s1, expect) <= 1e-12);
    CHECK(max_abs_diff(read_output(s1, ku), v) <= 1e-12);
  }
  SUBCASE("tied-gate equality with the gated delta step") {
    TokenGates<double> t = random_token(rng, 4, 3);
    t.k = k;
    t.v = v;
    t.alpha.assign(4, 1.0);
    t.b.assign(4, t.beta);
    t.w.assign(3, t.beta);
    const Gdr2Step<double> g = step_gdr2(s, t);
    CHECK(max_abs_diff(step_deltanet(s, k, v, t.beta), g.state) <= 1e-15);
  }
}

TEST_CASE("gdn and kda steps") {
  Rng rng(37);
  const Mat<double> s = random_uniform<double>(rng, 3, 3, -1.0, 1.0);
  const Vec<double> k = random_uniform_vec<double>(rng, 3, -1.0, 1.0);
  const Vec<double> v = random_uniform_vec<double>(rng, 3, -1.0, 1.0);
  const double alpha = 0.8, beta = 0.6;

  SUBCASE("gdn alpha = 1 equals deltanet, bitwise") {
    CHECK(max_abs_diff(step_gdn(s, k, v, 1.0, beta), step_deltanet(s, k, v, beta)) == 0.0);
  }
  SUBCASE("gdn beta = 0 is pure decay") {
    const Mat<double> got = step_gdn(s, k, v, alpha, 0.0);
    CHECK(max_abs_diff(got, step_mamba2(s, k, Vec<double>(3, 0.0), alpha)) == 0.0);
  }
  SUBCASE("kda with tied alpha equals gdn, bitwise") {
    const Vec<double> tied(3, alpha);
    CHECK(max_abs_diff(step_kda(s, k, v, tied, beta), step_gdn(s, k, v, alpha, beta)) == 0.0);
  }
  SUBCASE("kda channel decay") {
    Mat<double> diag(2, 2);
    diag(0, 0) = 2.0;
    diag(1, 1) = 2.0;
    const Mat<double> got =
        step_kda(diag, Vec<double>{0.3, -0.4}, Vec<double>{1.0, 1.0}, Vec<double>{0.5, 0.25}, 0.0);
    CHECK(got(0, 0) == 1.0);
    CHECK(got(1, 1) == 0.5);
    CHECK(got(0, 1) == 0.0);
  }
  SUBCASE("kda equals gdr2 with tied gates") {
    TokenGates<double> t = random_token(rng, 3, 3);
    t.k = k;
    t.v = v;
    t.beta = beta;
    t.b.assign(3, beta);
    t.w.assign(3, beta);
    const Gdr2Step<double> g = step_gdr2(s, t);
    CHECK(max_abs_diff(step_kda(s, k, v, t.alpha, beta), g.state) <= 1e-15);
  }
}

TEST_CASE("gated delta rule step hand cases") {
  SUBCASE("zero-state write with channel write gate") {
    TokenGates<double> t;
    t.q = {0.0, 0.0};
    t.k = {1.0, 0.0};
    t.v = {2.0, 4.0};
    t.alpha = {1.0, 1.0};
    t.b = {1.0, 1.0};
    t.w = {0.5, 1.0};
    t.g = {0.0, 0.0};
    const Gdr2Step<double> g = step_gdr2(Mat<double>(2, 2), t);
    CHECK(g.state(0, 0) == 1.0);
    CHECK(g.state(0, 1) == 4.0);
    CHECK(g.state(1, 0) == 0.0);
    CHECK(g.state(1, 1) == 0.0);
  }
  SUBCASE("erase-only along a unit key") {
    TokenGates<double> t;
    t.q = {0.0, 0.0};
    t.k = {1.0, 0.0};
    t.v = {0.7, -0.3};
    t.alpha = {1.0, 1.0};
    t.b = {1.0, 1.0};
    t.w = {0.0, 0.0};
    t.g = {0.0, 0.0};
    const Gdr2Step<double> g = step_gdr2(Mat<double>::eye(2), t);
    CHECK(g.state(0, 0) == 0.0);
    CHECK(g.state(0, 1) == 0.0);
    CHECK(g.state(1, 0) == 0.0);
    CHECK(g.state(1, 1) == 1.0);
  }
  SUBCASE("gates closed leaves pure channel decay") {
    TokenGates<double> t;
    t.q = {0.0, 0.0};
    t.k = {0.8, -0.2};
    t.v = {1.0, 1.0};
    t.alpha = {0.5, 0.25};
    t.b = {0.0, 0.0};
    t.w = {0.0, 0.0};
    t.g = {std::log(0.5), std::log(0.25)};
    Mat<double> s(2, 2);
    s(0, 0) = 2.0;
    s(1, 1) = 2.0;
    const Gdr2Step<double> g = step_gdr2(s, t);
    CHECK(g.state(0, 0) == 1.0);
    CHECK(g.state(1, 1) == 0.5);
    CHECK(g.state(0, 1) == 0.0);
  }
  SUBCASE("gate range contract") {
    TokenGates<double> t;
    t.q = {0.0};
    t.k = {1.0};
    t.v = {1.0};
    t.alpha = {1.0};
    t.b = {1.5};
    t.w = {0.5};
    t.g = {0.0};
    CHECK_THROWS_AS(step_gdr2(Mat<double>(1, 1), t), ContractError);
    CHECK_NOTHROW(step_gdr2(Mat<double>(1, 1), t, /*neg_eig=*/true));
    t.b = {2.5};
    CHECK_THROWS_AS(step_gdr2(Mat<double>(1, 1), t, /*neg_eig=*/true), ContractError);
  }
}

TEST_CASE("read_output") {
  Mat<double> s(2, 1);
  s(0, 0) = 3.0;
  CHECK(read_output(s, Vec<double>{1.0, 0.0})[0] == 3.0);
  CHECK(read_output(s, Vec<double>{0.0, 0.0})[0] == 0.0);

  Rng rng(3);
  const Mat<double> r = random_uniform<double>(rng, 5, 4, -1.0, 1.0);
  const Vec<double> q = random_uniform_vec<double>(rng, 5, -1.0, 1.0);
  const Vec<double> o = read_output(r, q);
  for (index_t j = 0; j < 4; ++j) {
    double acc = 0.0;
    for (index_t i = 0; i < 5; ++i) acc += r(i, j) * q[static_cast<std::size_t>(i)];
    CHECK(std::abs(acc - o[static_cast<std::size_t>(j)]) <= 1e-15);
  }
}

TEST_CASE("online objective and its minimizer") {
  Rng rng(53);
  const index_t dk = 4, dv = 3;
  const Mat<double> decayed = random_uniform<double>(rng, dk, dv, -1.0, 1.0);
  const Vec<double> k = random_uniform_vec<double>(rng, dk, -1.0, 1.0);
  const Vec<double> e = random_uniform_vec<double>(rng, dk, -1.0, 1.0);
  const Vec<double> z = random_uniform_vec<double>(rng, dv, -1.0, 1.0);

  SUBCASE("zero at S = Sbar with k = 0") {
    CHECK(online_objective(decayed, decayed, Vec<double>(dk, 0.0), e, z) == 0.0);
  }
  SUBCASE("analytic gradient vanishes at the minimizer") {
    // S* = Sbar + k (z - Sbar^T e)^T
    const Vec<double> read_e = read_output(decayed, e);
    Mat<double> smin = decayed;
    for (index_t i = 0; i < dk; ++i)
      for (index_t j = 0; j < dv; ++j)
        smin(i, j) += k[static_cast<std::size_t>(i)] *
                      (z[static_cast<std::size_t>(j)] - read_e[static_cast<std::size_t>(j)]);
    CHECK(max_abs(online_objective_grad(smin, decayed, k, e, z)) <= 1e-12);
  }
  SUBCASE("finite differences agree with the analytic gradient") {
    Mat<double> s = random_uniform<double>(rng, dk, dv, -1.0, 1.0);
    const Mat<double> analytic = online_objective_grad(s, decayed, k, e, z);
    double worst = 0.0;
    for (index_t i = 0; i < s.size(); ++i) {
      const double x0 = s.data[i];
      const double fd = central_difference(
          [&](double x) {
            s.data[i] = x;
            const double l = online_objective(s, decayed, k, e, z);
            s.data[i] = x0;
            return l;
          },
          x0, 1e-6);
      worst = std::max(worst, std::abs(fd - analytic.data[i]) /
                                  std::max(std::abs(fd), 1e-12));
    }
    CHECK(worst <= 1e-7);
  }
}

TEST_CASE("sequence reference runs") {
  Rng rng(71);
  const index_t dk = 4, dv = 3;
  std::vector<TokenGates<double>> tokens{random_token(rng, dk, dv)};
  const Mat<double> s0 = random_uniform<double>(rng, dk, dv, -1.0, 1.0);

  SUBCASE("L = 1 equals a single step") {
    const SequenceRun<double> run = run_sequence_reference(RuleKind::gdr2, tokens, s0);
    const Gdr2Step<double> step = step_gdr2(s0, tokens[0]);
    CHECK(max_abs_diff(run.final_state, step.state) == 0.0);
    CHECK(max_abs_diff(read_output(step.state, tokens[0].q),
                       Vec<double>(run.outputs.row(0), run.outputs.row(0) + dv)) == 0.0);
  }
  SUBCASE("tied-gate gdr2 run matches the kda run bitwise") {
    std::vector<TokenGates<double>> stream, tied;
    for (int t = 0; t < 24; ++t) {
      TokenGates<double> g = random_token(rng, dk, dv);
      stream.push_back(g);
      g.b.assign(static_cast<std::size_t>(dk), g.beta);
      g.w.assign(static_cast<std::size_t>(dv), g.beta);
      tied.push_back(std::move(g));
    }
    const SequenceRun<double> kda = run_sequence_reference(RuleKind::kda, stream, s0);
    const SequenceRun<double> gdr2 = run_sequence_reference(RuleKind::gdr2, tied, s0);
    CHECK(max_abs_diff(kda.outputs, gdr2.outputs) == 0.0);
    CHECK(max_abs_diff(kda.final_state, gdr2.final_state) == 0.0);
  }
}

TEST_CASE("reduction lattice at step and sequence level") {
  Rng rng(83);
  const index_t dk = 5, dv = 4;
  std::vector<TokenGates<double>> stream;
  for (int t = 0; t < 16; ++t) stream.push_back(random_token(rng, dk, dv));
  const Mat<double> s0 = random_uniform<double>(rng, dk, dv, -0.5, 0.5);

  // GDR2 with b = beta 1, w = beta 1 equals KDA
  std::vector<TokenGates<double>> tied = stream;
  for (auto& t : tied) {
    t.b.assign(static_cast<std::size_t>(dk), t.beta);
    t.w.assign(static_cast<std::size_t>(dv), t.beta);
  }
  CHECK(max_abs_diff(run_sequence_reference(RuleKind::gdr2, tied, s0).outputs,
                     run_sequence_reference(RuleKind::kda, stream, s0).outputs) <= 1e-15);

  // KDA with alpha = a 1 equals GDN
  std::vector<TokenGates<double>> scalar_alpha = stream;
  for (auto& t : scalar_alpha) {
    const double a = t.alpha[0];
    t.alpha.assign(static_cast<std::size_t>(dk), a);
    t.g.assign(static_cast<std::size_t>(dk), std::log(a));
  }
  CHECK(max_abs_diff(run_sequence_reference(RuleKind::kda, scalar_alpha, s0).outputs,
                     run_sequence_reference(RuleKind::gated_deltanet, scalar_alpha, s0).outputs) ==
        0.0);

  // GDN with alpha = 1 equals DeltaNet
  std::vector<TokenGates<double>> no_decay = stream;
  for (auto& t : no_decay) {
    t.alpha.assign(static_cast<std::size_t>(dk), 1.0);
    t.g.assign(static_cast<std::size_t>(dk), 0.0);
  }
  CHECK(max_abs_diff(run_sequence_reference(RuleKind::gated_deltanet, no_decay, s0).outputs,
                     run_sequence_reference(RuleKind::deltanet, no_decay, s0).outputs) == 0.0);

  // GDR2 with b = 0, w = 1 and scalar alpha equals Mamba-2
  std::vector<TokenGates<double>> write_only = scalar_alpha;
  for (auto& t : write_only) {
    t.b.assign(static_cast<std::size_t>(dk), 0.0);
    t.w.assign(static_cast<std::size_t>(dv), 1.0);
  }
  CHECK(max_abs_diff(run_sequence_reference(RuleKind::gdr2, write_only, s0).outputs,
                     run_sequence_reference(RuleKind::mamba2, scalar_alpha, s0).outputs) == 0.0);
}
