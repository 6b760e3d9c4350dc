#pragma once

#include <vector>

#include "gdr2/chunkwise.hpp"

namespace gdr2 {

// How the dA products are accumulated. The scalar post-scale route is the
// shortcut valid only for tied gates; it is kept around as a negative
// control and must fail gradient checks on untied inputs.
enum class WyAccum { gate_aware, scalar_postscale };

template <typename scalar_t>
struct BackwardOptions {
  WyAccum wy_accum = WyAccum::gate_aware;
  Accum matmul_accum = Accum::input;
};

// Gradients for one sequence, shapes mirroring SeqInputs.
template <typename scalar_t>
struct SeqGrads {
  Mat<scalar_t> dQ, dK, dB, dG;  // L x d_k
  Mat<scalar_t> dV, dW;          // L x d_v
  Mat<scalar_t> dS0;             // d_k x d_v
};

// Partials threaded through one chunk's reverse pass.
template <typename scalar_t>
struct ChunkGradWork {
  Mat<scalar_t> dAqk, dA, dT;        // C x C
  Mat<scalar_t> dR, dU, dY, dZ;      // C x d_v (dY: C x d_k)
  Mat<scalar_t> dQgamma, dKtail, dEbar, dKbar, dgamma;  // C x d_k
  Vec<scalar_t> dgammaC;             // d_k
  Mat<scalar_t> dS0;                 // d_k x d_v
};

namespace detail {

template <typename scalar_t>
void add_into(Mat<scalar_t>& dst, const Mat<scalar_t>& src) {
  check_dim(dst.same_shape(src), "grad accumulate: shape mismatch");
  for (index_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace detail

template <typename scalar_t>
ChunkGradWork<scalar_t> make_grad_work(const ChunkWorkspace<scalar_t>& ws) {
  const index_t C = ws.C, dk = ws.kin.cols, dv = ws.vin.cols;
  ChunkGradWork<scalar_t> w;
  w.dAqk = Mat<scalar_t>(C, C);
  w.dA = Mat<scalar_t>(C, C);
  w.dT = Mat<scalar_t>(C, C);
  w.dR = Mat<scalar_t>(C, dv);
  w.dU = Mat<scalar_t>(C, dv);
  w.dZ = Mat<scalar_t>(C, dv);
  w.dY = Mat<scalar_t>(C, dk);
  w.dQgamma = Mat<scalar_t>(C, dk);
  w.dKtail = Mat<scalar_t>(C, dk);
  w.dEbar = Mat<scalar_t>(C, dk);
  w.dKbar = Mat<scalar_t>(C, dk);
  w.dgamma = Mat<scalar_t>(C, dk);
  w.dgammaC.assign(static_cast<std::size_t>(dk), scalar_t(0));
  w.dS0 = Mat<scalar_t>(ws.s0.rows, ws.s0.cols);
  return w;
}

// Output block: O = Qgamma S0 + Aqk R.
template <typename scalar_t>
void vjp_output(const ChunkWorkspace<scalar_t>& ws, const Mat<scalar_t>& dO,
                ChunkGradWork<scalar_t>& w, Accum acc = Accum::input) {
  check_dim(dO.rows == ws.C && dO.cols == ws.vin.cols, "vjp_output: dO shape mismatch");
  Mat<scalar_t> daqk = matmul(dO, transposed(ws.r), acc);
  tril_inplace(daqk, 0);  // only the causal entries exist
  detail::add_into(w.dAqk, daqk);
  detail::add_into(w.dR, matmul(transposed(ws.aqk), dO, acc));
  detail::add_into(w.dQgamma, matmul(dO, transposed(ws.s0), acc));
  detail::add_into(w.dS0, matmul(transposed(ws.qgamma), dO, acc));
}

// State recurrence: S_C = Diag(gamma_C) S0 + Ktail^T R.
template <typename scalar_t>
void vjp_state(const ChunkWorkspace<scalar_t>& ws, const Mat<scalar_t>& dSC,
               ChunkGradWork<scalar_t>& w, Accum acc = Accum::input) {
  check_dim(dSC.rows == ws.s0.rows && dSC.cols == ws.s0.cols, "vjp_state: dS shape mismatch");
  detail::add_into(w.dR, matmul(ws.ktail, dSC, acc));
  detail::add_into(w.dKtail, matmul(ws.r, transposed(dSC), acc));
  const index_t dk = ws.s0.rows, dv = ws.s0.cols;
  for (index_t i = 0; i < dk; ++i) {
    const scalar_t gC = ws.gamma(ws.C - 1, i);
    const scalar_t* dsrow = dSC.row(i);
    const scalar_t* s0row = ws.s0.row(i);
    scalar_t* dst = w.dS0.row(i);
    scalar_t rowsum = scalar_t(0);
    for (index_t j = 0; j < dv; ++j) {
      dst[j] += gC * dsrow[j];
      rowsum += dsrow[j] * s0row[j];
    }
    w.dgammaC[static_cast<std::size_t>(i)] += rowsum;
  }
}

// Residual relation: R = U - Y S0.
template <typename scalar_t>
void vjp_residual(const ChunkWorkspace<scalar_t>& ws, ChunkGradWork<scalar_t>& w,
                  Accum acc = Accum::input) {
  detail::add_into(w.dU, w.dR);
  const Mat<scalar_t> dys = matmul(w.dR, transposed(ws.s0), acc);
  for (index_t i = 0; i < w.dY.size(); ++i) w.dY.data[i] -= dys.data[i];
  const Mat<scalar_t> ds = matmul(transposed(ws.y), w.dR, acc);
  for (index_t i = 0; i < w.dS0.size(); ++i) w.dS0.data[i] -= ds.data[i];
}

// WY auxiliaries: U = A Z, Y = A ebar. The gate factors sit inside the dA
// products; a row scalar cannot stand in for them once the gates are untied.
template <typename scalar_t>
void vjp_wy(const ChunkWorkspace<scalar_t>& ws, ChunkGradWork<scalar_t>& w,
            WyAccum mode = WyAccum::gate_aware, Accum acc = Accum::input) {
  if (mode == WyAccum::gate_aware) {
    detail::add_into(w.dA, matmul(w.dU, transposed(ws.z), acc));
    detail::add_into(w.dA, matmul(w.dY, transposed(ws.ebar), acc));
  } else {
    // tied-regime shortcut: drop the channel gates from the right-hand
    // factors and post-scale each column by the gate mean
    const index_t C = ws.C, dk = ws.kin.cols, dv = ws.vin.cols;
    Mat<scalar_t> gk(C, dk);  // gamma . K, the erase factor without b
    for (index_t s = 0; s < C; ++s)
      for (index_t c = 0; c < dk; ++c) gk(s, c) = ws.gamma(s, c) * ws.kin(s, c);
    Mat<scalar_t> da_u = matmul(w.dU, transposed(ws.vin), acc);
    Mat<scalar_t> da_y = matmul(w.dY, transposed(gk), acc);
    for (index_t s = 0; s < C; ++s) {
      scalar_t wmean = scalar_t(0), bmean = scalar_t(0);
      for (index_t c = 0; c < dv; ++c) wmean += ws.win(s, c);
      for (index_t c = 0; c < dk; ++c) bmean += ws.bin(s, c);
      wmean /= static_cast<scalar_t>(dv);
      bmean /= static_cast<scalar_t>(dk);
      for (index_t r = 0; r < C; ++r)
        w.dA(r, s) += wmean * da_u(r, s) + bmean * da_y(r, s);
    }
  }
  detail::add_into(w.dZ, matmul(transposed(ws.a), w.dU, acc));
  detail::add_into(w.dEbar, matmul(transposed(ws.a), w.dY, acc));
}

// dT = -tril(A^T dA A^T, -1)
template <typename scalar_t>
void vjp_inverse(const ChunkWorkspace<scalar_t>& ws, ChunkGradWork<scalar_t>& w,
                 Accum acc = Accum::input) {
  const Mat<scalar_t> at = transposed(ws.a);
  Mat<scalar_t> dt = matmul(matmul(at, w.dA, acc), at, acc);
  tril_inplace(dt, -1);
  for (index_t i = 0; i < dt.size(); ++i) w.dT.data[i] -= dt.data[i];
}

// T = tril(ebar kbar^T, -1) and aqk = tril(qgamma kbar^T).
template <typename scalar_t>
void vjp_T_and_scores(const ChunkWorkspace<scalar_t>& ws, ChunkGradWork<scalar_t>& w,
                      Accum acc = Accum::input) {
  detail::add_into(w.dEbar, matmul(w.dT, ws.kbar, acc));
  detail::add_into(w.dKbar, matmul(transposed(w.dT), ws.ebar, acc));
  detail::add_into(w.dQgamma, matmul(w.dAqk, ws.kbar, acc));
  detail::add_into(w.dKbar, matmul(transposed(w.dAqk), ws.qgamma, acc));
}

// Per-chunk token gradients.
template <typename scalar_t>
struct ChunkGrads {
  Mat<scalar_t> dq, dk, db, dg;  // C x d_k
  Mat<scalar_t> dv, dw;          // C x d_v
};

// Elementwise gate relations; consolidates every appearance of gamma into
// one accumulator before the reverse cumulative sum.
template <typename scalar_t>
ChunkGrads<scalar_t> vjp_elementwise(const ChunkWorkspace<scalar_t>& ws,
                                     ChunkGradWork<scalar_t>& w) {
  const index_t C = ws.C, dk = ws.kin.cols, dv = ws.vin.cols;
  ChunkGrads<scalar_t> g;
  g.dq = Mat<scalar_t>(C, dk);
  g.dk = Mat<scalar_t>(C, dk);
  g.db = Mat<scalar_t>(C, dk);
  g.dg = Mat<scalar_t>(C, dk);
  g.dv = Mat<scalar_t>(C, dv);
  g.dw = Mat<scalar_t>(C, dv);

  // tail keys first: Ktail_r = gamma_C . kbar_r
  for (index_t r = 0; r < C; ++r) {
    const scalar_t* dkt = w.dKtail.row(r);
    const scalar_t* kb = ws.kbar.row(r);
    scalar_t* dkb = w.dKbar.row(r);
    for (index_t c = 0; c < dk; ++c) {
      dkb[c] += dkt[c] * ws.gamma(C - 1, c);
      w.dgammaC[static_cast<std::size_t>(c)] += dkt[c] * kb[c];
    }
  }

  for (index_t r = 0; r < C; ++r) {
    const scalar_t* kin = ws.kin.row(r);
    const scalar_t* bin = ws.bin.row(r);
    const scalar_t* qin = ws.qin.row(r);
    const scalar_t* gam = ws.gamma.row(r);
    const scalar_t* deb = w.dEbar.row(r);
    const scalar_t* dkb = w.dKbar.row(r);
    const scalar_t* dqg = w.dQgamma.row(r);
    scalar_t* dgam = w.dgamma.row(r);
    const scalar_t* igam = ws.inv_gamma.row(r);
    for (index_t c = 0; c < dk; ++c) {
      const scalar_t inv_g = igam[c];
      g.db(r, c) = deb[c] * gam[c] * kin[c];
      g.dk(r, c) = deb[c] * gam[c] * bin[c] + dkb[c] * inv_g;
      g.dq(r, c) = dqg[c] * gam[c];
      dgam[c] += deb[c] * bin[c] * kin[c]       // from ebar
                 - dkb[c] * kin[c] * inv_g * inv_g  // from kbar
                 + dqg[c] * qin[c];              // from qgamma
    }
    const scalar_t* dz = w.dZ.row(r);
    const scalar_t* vin = ws.vin.row(r);
    const scalar_t* win = ws.win.row(r);
    for (index_t c = 0; c < dv; ++c) {
      g.dw(r, c) = dz[c] * vin[c];
      g.dv(r, c) = dz[c] * win[c];
    }
  }

  // state-path and tail-key contributions land on the last row of gamma
  for (index_t c = 0; c < dk; ++c)
    w.dgamma(C - 1, c) += w.dgammaC[static_cast<std::size_t>(c)];

  // decay: dGcum = dgamma . gamma, then reverse cumulative sum over rows
  Mat<scalar_t> dgcum(C, dk);
  for (index_t i = 0; i < dgcum.size(); ++i)
    dgcum.data[i] = w.dgamma.data[i] * ws.gamma.data[i];
  g.dg = reverse_cumsum_rows(dgcum);
  return g;
}

// Reverse cumulative sum step on its own (kept callable for tests).
template <typename scalar_t>
Mat<scalar_t> vjp_decay(const Mat<scalar_t>& dgamma_total, const Mat<scalar_t>& gamma) {
  check_dim(dgamma_total.same_shape(gamma), "vjp_decay: shape mismatch");
  Mat<scalar_t> dgcum(gamma.rows, gamma.cols);
  for (index_t i = 0; i < dgcum.size(); ++i)
    dgcum.data[i] = dgamma_total.data[i] * gamma.data[i];
  return reverse_cumsum_rows(dgcum);
}

// Tied-gate wrapper gradient: d loss / d beta = <dB, 1> + <dW, 1>.
template <typename scalar_t>
scalar_t tied_beta_gradient(const Vec<scalar_t>& db_row, const Vec<scalar_t>& dw_row) {
  scalar_t s = scalar_t(0);
  for (scalar_t x : db_row) s += x;
  for (scalar_t x : dw_row) s += x;
  return s;
}

// One chunk's reverse pass in the fixed order: output path, state path,
// residual, WY, inverse, scores, elementwise gates, decay.
template <typename scalar_t>
ChunkGrads<scalar_t> chunk_backward(const ChunkWorkspace<scalar_t>& ws, const Mat<scalar_t>& dO,
                                    const Mat<scalar_t>& dSC, ChunkGradWork<scalar_t>& w,
                                    const BackwardOptions<scalar_t>& opt) {
  vjp_output(ws, dO, w, opt.matmul_accum);
  vjp_state(ws, dSC, w, opt.matmul_accum);
  vjp_residual(ws, w, opt.matmul_accum);
  vjp_wy(ws, w, opt.wy_accum, opt.matmul_accum);
  vjp_inverse(ws, w, opt.matmul_accum);
  vjp_T_and_scores(ws, w, opt.matmul_accum);
  return vjp_elementwise(ws, w);
}

// Reverse chunk loop over a whole sequence. Needs the workspaces retained by
// forward_chunked; gradients are independent of the chunk size used.
template <typename scalar_t>
SeqGrads<scalar_t> backward_chunked(const ChunkedForward<scalar_t>& fwd, const Mat<scalar_t>& dO,
                                    const Mat<scalar_t>& dS_final,
                                    const BackwardOptions<scalar_t>& opt = {}) {
  check_contract(!fwd.chunks.empty(),
                 "backward_chunked: forward must retain workspaces");
  const index_t L = fwd.outputs.rows;
  check_dim(dO.rows == L && dO.cols == fwd.outputs.cols, "backward_chunked: dO shape mismatch");
  check_dim(dS_final.same_shape(fwd.final_state), "backward_chunked: dS shape mismatch");

  const index_t dk = fwd.final_state.rows, dv = fwd.final_state.cols;
  SeqGrads<scalar_t> out;
  out.dQ = Mat<scalar_t>(L, dk);
  out.dK = Mat<scalar_t>(L, dk);
  out.dB = Mat<scalar_t>(L, dk);
  out.dG = Mat<scalar_t>(L, dk);
  out.dV = Mat<scalar_t>(L, dv);
  out.dW = Mat<scalar_t>(L, dv);

  Mat<scalar_t> dstate = dS_final;
  for (std::size_t ci = fwd.chunks.size(); ci-- > 0;) {
    const ChunkWorkspace<scalar_t>& ws = fwd.chunks[ci];
    Mat<scalar_t> do_rows(ws.C, dv);
    for (index_t r = 0; r < ws.C; ++r)
      for (index_t j = 0; j < dv; ++j) do_rows(r, j) = dO(ws.base + r, j);
    ChunkGradWork<scalar_t> w = make_grad_work(ws);
    const ChunkGrads<scalar_t> g = chunk_backward(ws, do_rows, dstate, w, opt);
    for (index_t r = 0; r < ws.C; ++r) {
      for (index_t c = 0; c < dk; ++c) {
        out.dQ(ws.base + r, c) = g.dq(r, c);
        out.dK(ws.base + r, c) = g.dk(r, c);
        out.dB(ws.base + r, c) = g.db(r, c);
        out.dG(ws.base + r, c) = g.dg(r, c);
      }
      for (index_t c = 0; c < dv; ++c) {
        out.dV(ws.base + r, c) = g.dv(r, c);
        out.dW(ws.base + r, c) = g.dw(r, c);
      }
    }
    dstate = std::move(w.dS0);
  }
  out.dS0 = std::move(dstate);
  return out;
}

}  // namespace gdr2
