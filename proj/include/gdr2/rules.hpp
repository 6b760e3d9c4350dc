#pragma once

#include <vector>

#include "gdr2/common.hpp"
#include "gdr2/ops.hpp"

namespace gdr2 {

// Per-token inputs for one recurrence step. The layer is responsible for
// producing valid ranges; the steps below reject out-of-range gates instead
// of clamping them.
template <typename scalar_t>
struct TokenGates {
  Vec<scalar_t> q;      // d_k
  Vec<scalar_t> k;      // d_k
  Vec<scalar_t> v;      // d_v
  Vec<scalar_t> alpha;  // d_k, channel decay in (0, 1]
  scalar_t beta = scalar_t(1);  // scalar step size in [0, 1]
  Vec<scalar_t> b;      // d_k, erase gate in [0, 1] ([0, 2] with neg_eig)
  Vec<scalar_t> w;      // d_v, write gate in [0, 1]
  Vec<scalar_t> g;      // d_k, log-decay <= 0
};

enum class RuleKind {
  linear_attention,
  mamba2,
  deltanet,
  gated_deltanet,
  kda,
  gdr2,
};

namespace detail {

template <typename scalar_t>
void check_unit_range(const Vec<scalar_t>& v, double hi, const char* what) {
  for (scalar_t x : v)
    check_contract(static_cast<double>(x) >= 0.0 && static_cast<double>(x) <= hi, what);
}

}  // namespace detail

template <typename scalar_t>
void validate_gates(const TokenGates<scalar_t>& t, bool neg_eig = false) {
  for (scalar_t a : t.alpha)
    check_contract(static_cast<double>(a) > 0.0 && static_cast<double>(a) <= 1.0,
                   "TokenGates: alpha out of (0,1]");
  check_contract(static_cast<double>(t.beta) >= 0.0 && static_cast<double>(t.beta) <= 1.0,
                 "TokenGates: beta out of [0,1]");
  detail::check_unit_range(t.b, neg_eig ? 2.0 : 1.0, "TokenGates: erase gate out of range");
  detail::check_unit_range(t.w, 1.0, "TokenGates: write gate out of range");
  for (scalar_t g : t.g)
    check_contract(static_cast<double>(g) <= 0.0, "TokenGates: log-decay must be <= 0");
}

// o = S^T q
template <typename scalar_t>
Vec<scalar_t> read_output(const Mat<scalar_t>& s, const Vec<scalar_t>& q) {
  check_dim(static_cast<index_t>(q.size()) == s.rows, "read_output: query length mismatch");
  Vec<scalar_t> o(static_cast<std::size_t>(s.cols), scalar_t(0));
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t qi = q[static_cast<std::size_t>(i)];
    const scalar_t* srow = s.row(i);
    for (index_t j = 0; j < s.cols; ++j) o[static_cast<std::size_t>(j)] += qi * srow[j];
  }
  return o;
}

// S_t = alpha S_{t-1} + k v^T
template <typename scalar_t>
Mat<scalar_t> step_mamba2(const Mat<scalar_t>& s, const Vec<scalar_t>& k,
                          const Vec<scalar_t>& v, scalar_t alpha) {
  check_contract(static_cast<double>(alpha) > 0.0 && static_cast<double>(alpha) <= 1.0,
                 "step_mamba2: alpha out of (0,1]");
  check_dim(static_cast<index_t>(k.size()) == s.rows && static_cast<index_t>(v.size()) == s.cols,
            "step_mamba2: shape mismatch");
  Mat<scalar_t> out(s.rows, s.cols);
  for (index_t i = 0; i < s.rows; ++i) {
    scalar_t* row = out.row(i);
    const scalar_t* src = s.row(i);
    const scalar_t ki = k[static_cast<std::size_t>(i)];
    for (index_t j = 0; j < s.cols; ++j)
      row[j] = alpha * src[j] + ki * v[static_cast<std::size_t>(j)];
  }
  return out;
}

// S_t = (I - beta k k^T) Diag(alpha) S_{t-1} + beta k v^T
template <typename scalar_t>
Mat<scalar_t> step_kda(const Mat<scalar_t>& s, const Vec<scalar_t>& k, const Vec<scalar_t>& v,
                       const Vec<scalar_t>& alpha, scalar_t beta) {
  check_dim(static_cast<index_t>(k.size()) == s.rows && static_cast<index_t>(v.size()) == s.cols &&
                static_cast<index_t>(alpha.size()) == s.rows,
            "step_kda: shape mismatch");
  for (scalar_t a : alpha)
    check_contract(static_cast<double>(a) > 0.0 && static_cast<double>(a) <= 1.0,
                   "step_kda: alpha out of (0,1]");
  check_contract(static_cast<double>(beta) >= 0.0 && static_cast<double>(beta) <= 1.0,
                 "step_kda: beta out of [0,1]");
  Mat<scalar_t> decayed(s.rows, s.cols);
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t ai = alpha[static_cast<std::size_t>(i)];
    const scalar_t* src = s.row(i);
    scalar_t* dst = decayed.row(i);
    for (index_t j = 0; j < s.cols; ++j) dst[j] = ai * src[j];
  }
  const Vec<scalar_t> r = read_output(decayed, k);
  Mat<scalar_t> out = decayed;
  for (index_t i = 0; i < s.rows; ++i) {
    scalar_t* row = out.row(i);
    const scalar_t bk = beta * k[static_cast<std::size_t>(i)];
    for (index_t j = 0; j < s.cols; ++j)
      row[j] += bk * (v[static_cast<std::size_t>(j)] - r[static_cast<std::size_t>(j)]);
  }
  return out;
}

// S_t = S_{t-1} + k v^T
template <typename scalar_t>
Mat<scalar_t> step_linear_attention(const Mat<scalar_t>& s, const Vec<scalar_t>& k,
                                    const Vec<scalar_t>& v) {
  return step_mamba2(s, k, v, scalar_t(1));
}

template <typename scalar_t>
Mat<scalar_t> step_deltanet(const Mat<scalar_t>& s, const Vec<scalar_t>& k,
                            const Vec<scalar_t>& v, scalar_t beta) {
  const Vec<scalar_t> ones(k.size(), scalar_t(1));
  return step_kda(s, k, v, ones, beta);
}

template <typename scalar_t>
Mat<scalar_t> step_gdn(const Mat<scalar_t>& s, const Vec<scalar_t>& k, const Vec<scalar_t>& v,
                       scalar_t alpha, scalar_t beta) {
  const Vec<scalar_t> tied(k.size(), alpha);
  return step_kda(s, k, v, tied, beta);
}

template <typename scalar_t>
struct Gdr2Step {
  Mat<scalar_t> state;
  Vec<scalar_t> read;  // r = (Diag(alpha) S)^T (b . k), exposed for tests
};

// e = b.k, z = w.v, Sbar = Diag(alpha) S, r = Sbar^T e, S = Sbar + k (z - r)^T
template <typename scalar_t>
Gdr2Step<scalar_t> step_gdr2(const Mat<scalar_t>& s, const TokenGates<scalar_t>& t,
                             bool neg_eig = false) {
  check_dim(static_cast<index_t>(t.k.size()) == s.rows &&
                static_cast<index_t>(t.v.size()) == s.cols &&
                static_cast<index_t>(t.alpha.size()) == s.rows &&
                static_cast<index_t>(t.b.size()) == s.rows &&
                static_cast<index_t>(t.w.size()) == s.cols,
            "step_gdr2: shape mismatch");
  validate_gates(t, neg_eig);

  Gdr2Step<scalar_t> out;
  out.state = Mat<scalar_t>(s.rows, s.cols);
  out.read.assign(static_cast<std::size_t>(s.cols), scalar_t(0));

  Mat<scalar_t>& ns = out.state;
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t ai = t.alpha[static_cast<std::size_t>(i)];
    const scalar_t* src = s.row(i);
    scalar_t* dst = ns.row(i);
    for (index_t j = 0; j < s.cols; ++j) dst[j] = ai * src[j];
  }
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t ei = t.b[static_cast<std::size_t>(i)] * t.k[static_cast<std::size_t>(i)];
    const scalar_t* row = ns.row(i);
    for (index_t j = 0; j < s.cols; ++j) out.read[static_cast<std::size_t>(j)] += ei * row[j];
  }
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t ki = t.k[static_cast<std::size_t>(i)];
    scalar_t* row = ns.row(i);
    for (index_t j = 0; j < s.cols; ++j) {
      const scalar_t zj =
          t.w[static_cast<std::size_t>(j)] * t.v[static_cast<std::size_t>(j)];
      row[j] += ki * (zj - out.read[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

// L(S) = ||S - Sbar||_F^2 - 2 <S^T k, z - Sbar^T e>
template <typename scalar_t>
double online_objective(const Mat<scalar_t>& s, const Mat<scalar_t>& decayed,
                        const Vec<scalar_t>& k, const Vec<scalar_t>& e,
                        const Vec<scalar_t>& z) {
  check_dim(s.same_shape(decayed), "online_objective: state shape mismatch");
  double frob = 0.0;
  for (index_t i = 0; i < s.size(); ++i) {
    const double d = static_cast<double>(s.data[i]) - static_cast<double>(decayed.data[i]);
    frob += d * d;
  }
  const Vec<scalar_t> read_k = read_output(s, k);
  const Vec<scalar_t> read_e = read_output(decayed, e);
  double inner = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j)
    inner += static_cast<double>(read_k[j]) *
             (static_cast<double>(z[j]) - static_cast<double>(read_e[j]));
  return frob - 2.0 * inner;
}

// grad_S L = 2 (S - Sbar) - 2 k (z - Sbar^T e)^T
template <typename scalar_t>
Mat<scalar_t> online_objective_grad(const Mat<scalar_t>& s, const Mat<scalar_t>& decayed,
                                    const Vec<scalar_t>& k, const Vec<scalar_t>& e,
                                    const Vec<scalar_t>& z) {
  check_dim(s.same_shape(decayed), "online_objective_grad: state shape mismatch");
  const Vec<scalar_t> read_e = read_output(decayed, e);
  Mat<scalar_t> grad(s.rows, s.cols);
  for (index_t i = 0; i < s.rows; ++i) {
    const scalar_t ki = k[static_cast<std::size_t>(i)];
    for (index_t j = 0; j < s.cols; ++j) {
      const scalar_t resid = z[static_cast<std::size_t>(j)] - read_e[static_cast<std::size_t>(j)];
      grad(i, j) = scalar_t(2) * (s(i, j) - decayed(i, j)) - scalar_t(2) * ki * resid;
    }
  }
  return grad;
}

template <typename scalar_t>
struct SequenceRun {
  Mat<scalar_t> outputs;             // L x d_v
  Mat<scalar_t> final_state;         // d_k x d_v
  std::vector<Mat<scalar_t>> states;  // prefix states, kept when requested
};

struct RunOptions {
  bool keep_states = true;
  bool neg_eig = false;
};

namespace detail {

// Every rule runs through the gated-delta step with tied gates, so the
// tied reductions hold exactly, not just to rounding.
template <typename scalar_t>
TokenGates<scalar_t> tied_gates(RuleKind rule, const TokenGates<scalar_t>& t) {
  TokenGates<scalar_t> g = t;
  const std::size_t dk = t.k.size();
  const std::size_t dv = t.v.size();
  switch (rule) {
    case RuleKind::linear_attention:
      g.alpha.assign(dk, scalar_t(1));
      g.b.assign(dk, scalar_t(0));
      g.w.assign(dv, scalar_t(1));
      break;
    case RuleKind::mamba2:
      g.alpha.assign(dk, t.alpha.empty() ? scalar_t(1) : t.alpha[0]);
      g.b.assign(dk, scalar_t(0));
      g.w.assign(dv, scalar_t(1));
      break;
    case RuleKind::deltanet:
      g.alpha.assign(dk, scalar_t(1));
      g.b.assign(dk, t.beta);
      g.w.assign(dv, t.beta);
      break;
    case RuleKind::gated_deltanet:
      g.alpha.assign(dk, t.alpha.empty() ? scalar_t(1) : t.alpha[0]);
      g.b.assign(dk, t.beta);
      g.w.assign(dv, t.beta);
      break;
    case RuleKind::kda:
      g.b.assign(dk, t.beta);
      g.w.assign(dv, t.beta);
      break;
    case RuleKind::gdr2:
      break;
  }
  return g;
}

}  // namespace detail

// Applies the rule token by token. This is the ground-truth reference every
// chunkwise result is checked against.
template <typename scalar_t>
SequenceRun<scalar_t> run_sequence_reference(RuleKind rule,
                                             const std::vector<TokenGates<scalar_t>>& tokens,
                                             const Mat<scalar_t>& s0,
                                             RunOptions opt = {}) {
  check_contract(!tokens.empty(), "run_sequence_reference: empty token stream");
  const index_t d_v = s0.cols;
  SequenceRun<scalar_t> run;
  run.outputs = Mat<scalar_t>(static_cast<index_t>(tokens.size()), d_v);
  if (opt.keep_states) run.states.reserve(tokens.size());

  Mat<scalar_t> state = s0;
  for (std::size_t ti = 0; ti < tokens.size(); ++ti) {
    const TokenGates<scalar_t> g = detail::tied_gates(rule, tokens[ti]);
    Gdr2Step<scalar_t> step = step_gdr2(state, g, opt.neg_eig);
    state = std::move(step.state);
    const Vec<scalar_t> o = read_output(state, tokens[ti].q);
    scalar_t* out_row = run.outputs.row(static_cast<index_t>(ti));
    for (index_t j = 0; j < d_v; ++j) out_row[j] = o[static_cast<std::size_t>(j)];
    if (opt.keep_states) run.states.push_back(state);
  }
  run.final_state = std::move(state);
  return run;
}

}  // namespace gdr2
