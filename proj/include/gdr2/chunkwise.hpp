#pragma once

#include <cstring>
#include <limits>
#include <utility>
#include <vector>

#include "gdr2/common.hpp"
#include "gdr2/ops.hpp"

namespace gdr2 {

// Row-stacked per-sequence tensors; rows are tokens.
template <typename scalar_t>
struct SeqInputs {
  Mat<scalar_t> Q;  // L x d_k
  Mat<scalar_t> K;  // L x d_k
  Mat<scalar_t> V;  // L x d_v
  Mat<scalar_t> B;  // L x d_k, erase gate rows
  Mat<scalar_t> W;  // L x d_v, write gate rows
  Mat<scalar_t> G;  // L x d_k, log-decay rows (<= 0)

  index_t len() const { return Q.rows; }
  index_t d_k() const { return Q.cols; }
  index_t d_v() const { return V.cols; }
};

enum class SolvePrecision { input, strict_f64 };

template <typename scalar_t>
struct EngineOptions {
  index_t chunk_size = 64;
  bool retain_workspaces = true;
  bool neg_eig = false;
  SolvePrecision solve_precision = SolvePrecision::input;
  Accum matmul_accum = Accum::input;
};

// Everything one chunk derives from its inputs. The input rows are copied in
// so the backward pass and prefix queries need no other context.
template <typename scalar_t>
struct ChunkWorkspace {
  index_t base = 0;   // index of the chunk's first token in the sequence
  index_t C = 0;      // chunk length (last chunk may be ragged)

  Mat<scalar_t> qin, kin, bin, gin;  // C x d_k
  Mat<scalar_t> vin, win;            // C x d_v

  Mat<double> gcum;         // C x d_k, cumulative log-decay, always binary64
  Mat<scalar_t> gamma;      // C x d_k, exp(gcum)
  Mat<scalar_t> inv_gamma;  // C x d_k, elementwise reciprocal of gamma
  Mat<scalar_t> kbar;       // C x d_k, inv_gamma . K
  Mat<scalar_t> ebar;       // C x d_k, gamma . B . K
  Mat<scalar_t> z;          // C x d_v, W . V
  Mat<scalar_t> t;          // C x C, strictly lower
  Mat<scalar_t> a;          // C x C, (I + T)^{-1}, built when retained
  Mat<scalar_t> y;          // C x d_k, A ebar
  Mat<scalar_t> u;          // C x d_v, A z
  Mat<scalar_t> ktail;      // C x d_k, (gamma_C / gamma_r) . K
  Mat<scalar_t> qgamma;     // C x d_k, gamma . Q
  Mat<scalar_t> aqk;        // C x C, lower incl. diagonal
  Mat<scalar_t> r;          // C x d_v, residual rows U - Y S0
  Mat<scalar_t> s0;         // d_k x d_v, state at chunk start
  bool s0_is_zero = false;  // lets later stages skip exact-zero products

  Mat<scalar_t> scratch_t;  // transpose scratch, reused across stages
};

template <typename scalar_t>
struct ChunkedForward {
  Mat<scalar_t> outputs;      // L x d_v
  Mat<scalar_t> final_state;  // d_k x d_v
  std::vector<ChunkWorkspace<scalar_t>> chunks;  // retained for backward
};

template <typename scalar_t>
struct DecayCums {
  Mat<double> gcum;     // binary64 cumulative sums over the chunk axis
  Mat<scalar_t> gamma;  // exp(gcum)
};

namespace detail {

template <typename scalar_t>
void cumulate_decay_into(const Mat<scalar_t>& g_chunk, Mat<double>& gcum,
                         Mat<scalar_t>& gamma) {
  check_contract(within_range(g_chunk, -std::numeric_limits<double>::infinity(), 0.0),
                 "cumulate_decay: positive log-decay entry");

  reshape_for_overwrite(gcum, g_chunk.rows, g_chunk.cols);
  reshape_for_overwrite(gamma, g_chunk.rows, g_chunk.cols);
  const index_t cols = g_chunk.cols;
  {
    const scalar_t* __restrict__ src0 = g_chunk.row(0);
    double* __restrict__ g0 = gcum.row(0);
    for (index_t c = 0; c < cols; ++c) g0[c] = static_cast<double>(src0[c]);
    for (index_t r = 1; r < g_chunk.rows; ++r) {
      const scalar_t* __restrict__ src = g_chunk.row(r);
      const double* __restrict__ prev = gcum.row(r - 1);
      double* __restrict__ grow = gcum.row(r);
      for (index_t c = 0; c < cols; ++c) grow[c] = prev[c] + static_cast<double>(src[c]);
    }
  }
  if constexpr (std::is_same_v<scalar_t, float>) {
    fast_expf_buffer(gcum.data.data(), gamma.data.data(), gcum.size());
  } else {
    for (index_t i = 0; i < gcum.size(); ++i)
      gamma.data[i] = static_cast<scalar_t>(std::exp(gcum.data[i]));
  }
}

}  // namespace detail

// gamma_r = exp(sum_{i<=r} g_i), cumulative sums carried in binary64.
template <typename scalar_t>
DecayCums<scalar_t> cumulate_decay(const Mat<scalar_t>& g_chunk) {
  DecayCums<scalar_t> out;
  detail::cumulate_decay_into(g_chunk, out.gcum, out.gamma);
  return out;
}

// kbar = gamma^{-1} . K, ebar = gamma . B . K, z = W . V. The reciprocal is
// safe: gamma is bounded below by the underflow guard and the log sums
// feeding it were carried in binary64.
template <typename scalar_t>
void build_gate_matrices(ChunkWorkspace<scalar_t>& ws) {
  const index_t C = ws.C, dk = ws.kin.cols, dv = ws.vin.cols;
  scalar_t gmin = ws.gamma.data.empty() ? scalar_t(1) : ws.gamma.data[0];
  {
    constexpr int LANES = 16;
    scalar_t mn[LANES];
    for (int l = 0; l < LANES; ++l) mn[l] = gmin;
    const index_t full = ws.gamma.size() - ws.gamma.size() % LANES;
    const scalar_t* p = ws.gamma.data.data();
    for (index_t i = 0; i < full; i += LANES)
      for (int l = 0; l < LANES; ++l) mn[l] = std::min(mn[l], p[i + l]);
    for (int l = 0; l < LANES; ++l) gmin = std::min(gmin, mn[l]);
    for (index_t i = full; i < ws.gamma.size(); ++i) gmin = std::min(gmin, p[i]);
  }
  check_contract(static_cast<double>(gmin) > 0.0, "build_gate_matrices: zero decay weight");
  detail::reshape_for_overwrite(ws.inv_gamma, C, dk);
  detail::reshape_for_overwrite(ws.kbar, C, dk);
  detail::reshape_for_overwrite(ws.ebar, C, dk);
  detail::reshape_for_overwrite(ws.z, C, dv);
  {
    const scalar_t* __restrict__ gam = ws.gamma.data.data();
    const scalar_t* __restrict__ kin = ws.kin.data.data();
    const scalar_t* __restrict__ bin = ws.bin.data.data();
    scalar_t* __restrict__ ig = ws.inv_gamma.data.data();
    scalar_t* __restrict__ kb = ws.kbar.data.data();
    scalar_t* __restrict__ eb = ws.ebar.data.data();
    const index_t nk = ws.gamma.size();
    for (index_t i = 0; i < nk; ++i) {
      const scalar_t g = gam[i];
      const scalar_t r = scalar_t(1) / g;
      ig[i] = r;
      kb[i] = r * kin[i];
      eb[i] = g * (bin[i] * kin[i]);
    }
    const scalar_t* __restrict__ win = ws.win.data.data();
    const scalar_t* __restrict__ vin = ws.vin.data.data();
    scalar_t* __restrict__ z = ws.z.data.data();
    const index_t nv = ws.z.size();
    for (index_t i = 0; i < nv; ++i) z[i] = win[i] * vin[i];
  }
}

// T = tril(ebar kbar^T, -1) and the causal scores
// aqk[r][s] = 1_{r>=s} q_r^T Diag(gamma_r / gamma_s) k_s.
template <typename scalar_t>
void build_T_and_scores(ChunkWorkspace<scalar_t>& ws, Accum acc) {
  const index_t C = ws.C, dk = ws.kin.cols;
  detail::reshape_for_overwrite(ws.qgamma, C, dk);
  {
    const scalar_t* __restrict__ gam = ws.gamma.data.data();
    const scalar_t* __restrict__ qin = ws.qin.data.data();
    scalar_t* __restrict__ qg = ws.qgamma.data.data();
    const index_t nk = ws.qgamma.size();
    for (index_t i = 0; i < nk; ++i) qg[i] = gam[i] * qin[i];
  }
  transpose_into(ws.kbar, ws.scratch_t);
  tril_matmul_into(ws.ebar, ws.scratch_t, ws.t, -1, acc);
  tril_matmul_into(ws.qgamma, ws.scratch_t, ws.aqk, 0, acc);
}

// Y = A ebar and U = A z by forward substitution; the explicit inverse is
// only materialized when the workspace is kept for the backward pass.
template <typename scalar_t>
void build_wy_aux(ChunkWorkspace<scalar_t>& ws, SolvePrecision sp, bool need_inverse = true) {
  const Accum acc =
      (sp == SolvePrecision::strict_f64) ? Accum::f64 : Accum::input;
  if (need_inverse)
    ws.a = forward_substitution_unitriangular(ws.t, Mat<scalar_t>::eye(ws.C), acc);
  // T came out of tril(..., -1) two stages ago; solve without revalidating
  if (acc == Accum::f64 && !std::is_same_v<scalar_t, double>) {
    ws.y = forward_substitution_unitriangular(ws.t, ws.ebar, acc);
    ws.u = forward_substitution_unitriangular(ws.t, ws.z, acc);
    return;
  }
  detail::reshape_for_overwrite(ws.y, ws.ebar.rows, ws.ebar.cols);
  detail::reshape_for_overwrite(ws.u, ws.z.rows, ws.z.cols);
  detail::solve_unitriangular_pair_native(ws.t, ws.ebar, ws.z, ws.y, ws.u);
}

// R = U - Y S0, then S1 = Diag(gamma_C) S0 + Ktail^T R.
template <typename scalar_t>
Mat<scalar_t> chunk_state_update(ChunkWorkspace<scalar_t>& ws, Accum acc) {
  const index_t dk = ws.kin.cols, dv = ws.vin.cols, C = ws.C;
  check_dim(ws.s0.rows == dk && ws.s0.cols == dv, "chunk_state_update: state shape mismatch");

  // tail keys: gamma_C / gamma_r through the guarded reciprocal
  detail::reshape_for_overwrite(ws.ktail, C, dk);
  const scalar_t* glast = ws.gamma.row(C - 1);
  for (index_t r = 0; r < C; ++r) {
    const scalar_t* ig = ws.inv_gamma.row(r);
    const scalar_t* krow = ws.kin.row(r);
    scalar_t* trow = ws.ktail.row(r);
    for (index_t c = 0; c < dk; ++c) trow[c] = glast[c] * ig[c] * krow[c];
  }

  ws.r = ws.u;
  if (!ws.s0_is_zero) {
    Mat<scalar_t> ys0;
    matmul_into(ws.y, ws.s0, ys0, acc);
    for (index_t i = 0; i < ws.r.size(); ++i) ws.r.data[i] -= ys0.data[i];
  }

  transpose_into(ws.ktail, ws.scratch_t);
  Mat<scalar_t> s1;
  matmul_into(ws.scratch_t, ws.r, s1, acc);
  for (index_t i = 0; i < dk; ++i) {
    const scalar_t gC = ws.gamma(C - 1, i);
    const scalar_t* src = ws.s0.row(i);
    scalar_t* dst = s1.row(i);
    for (index_t j = 0; j < dv; ++j) dst[j] += gC * src[j];
  }
  return s1;
}

// O = Qgamma S0 + Aqk R.
template <typename scalar_t>
Mat<scalar_t> chunk_output(const ChunkWorkspace<scalar_t>& ws, Accum acc) {
  Mat<scalar_t> o;
  causal_matmul_into(ws.aqk, ws.r, o, acc);
  if (!ws.s0_is_zero) {
    const Mat<scalar_t> qs = matmul(ws.qgamma, ws.s0, acc);
    for (index_t i = 0; i < o.size(); ++i) o.data[i] += qs.data[i];
  }
  return o;
}

// Mid-chunk state: Diag(gamma_r) (S0 + Kbar_{<=r}^T R_{<=r}), r in [1, C].
template <typename scalar_t>
Mat<scalar_t> prefix_state(const ChunkWorkspace<scalar_t>& ws, index_t r) {
  check_contract(r >= 1 && r <= ws.C, "prefix_state: row out of range");
  const index_t dk = ws.kin.cols, dv = ws.vin.cols;
  Mat<scalar_t> out = ws.s0;
  for (index_t s = 0; s < r; ++s) {
    const scalar_t* kb = ws.kbar.row(s);
    const scalar_t* rr = ws.r.row(s);
    for (index_t i = 0; i < dk; ++i) {
      scalar_t* dst = out.row(i);
      const scalar_t kbi = kb[i];
      for (index_t j = 0; j < dv; ++j) dst[j] += kbi * rr[j];
    }
  }
  for (index_t i = 0; i < dk; ++i) {
    const scalar_t g = ws.gamma(r - 1, i);
    scalar_t* dst = out.row(i);
    for (index_t j = 0; j < dv; ++j) dst[j] *= g;
  }
  return out;
}

namespace detail {

template <typename scalar_t>
void validate_seq_inputs(const SeqInputs<scalar_t>& in, bool neg_eig) {
  const index_t L = in.Q.rows;
  check_dim(in.K.rows == L && in.V.rows == L && in.B.rows == L && in.W.rows == L &&
                in.G.rows == L,
            "SeqInputs: token counts differ");
  check_dim(in.K.cols == in.Q.cols && in.B.cols == in.Q.cols && in.G.cols == in.Q.cols,
            "SeqInputs: key-side widths differ");
  check_dim(in.W.cols == in.V.cols, "SeqInputs: value-side widths differ");
  check_contract(within_range(in.B, 0.0, neg_eig ? 2.0 : 1.0),
                 "SeqInputs: erase gate out of range");
  check_contract(within_range(in.W, 0.0, 1.0), "SeqInputs: write gate out of range");
  check_contract(within_range(in.G, -std::numeric_limits<double>::infinity(), 0.0),
                 "SeqInputs: log-decay must be <= 0");
}

template <typename scalar_t>
void copy_rows_into(const Mat<scalar_t>& m, index_t begin, index_t count, Mat<scalar_t>& out) {
  out.rows = count;
  out.cols = m.cols;
  out.data.resize(static_cast<std::size_t>(count * m.cols));
  std::memcpy(out.data.data(), m.row(begin),
              static_cast<std::size_t>(count * m.cols) * sizeof(scalar_t));
}

template <typename scalar_t>
Mat<scalar_t> copy_rows(const Mat<scalar_t>& m, index_t begin, index_t count) {
  Mat<scalar_t> out;
  copy_rows_into(m, begin, count, out);
  return out;
}

}  // namespace detail

// One chunk end to end; returns the end-of-chunk state and fills the output
// rows [ws.base, ws.base + ws.C).
template <typename scalar_t>
Mat<scalar_t> process_chunk(ChunkWorkspace<scalar_t>& ws, Mat<scalar_t>& outputs,
                            const EngineOptions<scalar_t>& opt) {
  detail::cumulate_decay_into(ws.gin, ws.gcum, ws.gamma);
  if constexpr (std::is_same_v<scalar_t, float>) {
    if (!within_range(ws.gamma, 1e-30, 2.0))
      throw RangeError("chunkwise forward: decay underflow in binary32 mode");
  }
  build_gate_matrices(ws);
  build_T_and_scores(ws, opt.matmul_accum);
  build_wy_aux(ws, opt.solve_precision, opt.retain_workspaces);
  Mat<scalar_t> s1 = chunk_state_update(ws, opt.matmul_accum);
  const Mat<scalar_t> o = chunk_output(ws, opt.matmul_accum);
  for (index_t r = 0; r < ws.C; ++r)
    std::memcpy(outputs.row(ws.base + r), o.row(r),
                static_cast<std::size_t>(o.cols) * sizeof(scalar_t));
  return s1;
}

// Chunk loop over a whole sequence; the last chunk shrinks instead of padding.
template <typename scalar_t>
ChunkedForward<scalar_t> forward_chunked(const SeqInputs<scalar_t>& in, const Mat<scalar_t>& s0,
                                         const EngineOptions<scalar_t>& opt = {}) {
  check_contract(opt.chunk_size >= 1, "forward_chunked: chunk size must be >= 1");
  check_contract(in.len() >= 1, "forward_chunked: empty sequence");
  detail::validate_seq_inputs(in, opt.neg_eig);
  check_dim(s0.rows == in.d_k() && s0.cols == in.d_v(), "forward_chunked: s0 shape mismatch");

  ChunkedForward<scalar_t> fwd;
  fwd.outputs = Mat<scalar_t>(in.len(), in.d_v());
  Mat<scalar_t> state = s0;
  ChunkWorkspace<scalar_t> reusable;  // shared buffers when nothing is retained
  for (index_t base = 0; base < in.len(); base += opt.chunk_size) {
    const index_t C = std::min(opt.chunk_size, in.len() - base);
    ChunkWorkspace<scalar_t>& ws = reusable;
    ws.base = base;
    ws.C = C;
    detail::copy_rows_into(in.Q, base, C, ws.qin);
    detail::copy_rows_into(in.K, base, C, ws.kin);
    detail::copy_rows_into(in.V, base, C, ws.vin);
    detail::copy_rows_into(in.B, base, C, ws.bin);
    detail::copy_rows_into(in.W, base, C, ws.win);
    detail::copy_rows_into(in.G, base, C, ws.gin);
    ws.s0 = state;
    ws.s0_is_zero = (base == 0) ? is_all_zero(state) : false;
    state = process_chunk(ws, fwd.outputs, opt);
    if (opt.retain_workspaces) {
      fwd.chunks.push_back(std::move(ws));
      reusable = ChunkWorkspace<scalar_t>{};
    }
  }
  fwd.final_state = std::move(state);
  return fwd;
}

// Flattened multi-sequence stream; the recurrent state resets at every
// sequence boundary.
template <typename scalar_t>
struct PackedBatch {
  SeqInputs<scalar_t> tokens;          // total_tokens x dims
  std::vector<index_t> cu_seqlens;     // [0, ..., total_tokens]
};

template <typename scalar_t>
struct PackedForward {
  Mat<scalar_t> outputs;                    // total_tokens x d_v
  std::vector<Mat<scalar_t>> final_states;  // one per sequence
};

template <typename scalar_t>
PackedForward<scalar_t> forward_packed(const PackedBatch<scalar_t>& batch,
                                       const EngineOptions<scalar_t>& opt = {},
                                       const std::vector<Mat<scalar_t>>* initial_states = nullptr) {
  const auto& cu = batch.cu_seqlens;
  check_contract(cu.size() >= 2 && cu.front() == 0, "forward_packed: cu_seqlens must start at 0");
  for (std::size_t i = 1; i < cu.size(); ++i)
    check_contract(cu[i] > cu[i - 1], "forward_packed: empty or decreasing sequence segment");
  check_contract(cu.back() == batch.tokens.len(),
                 "forward_packed: cu_seqlens does not cover the token stream");
  if (initial_states)
    check_dim(initial_states->size() == cu.size() - 1,
              "forward_packed: one initial state per sequence required");

  PackedForward<scalar_t> out;
  out.outputs = Mat<scalar_t>(batch.tokens.len(), batch.tokens.d_v());
  EngineOptions<scalar_t> seq_opt = opt;
  seq_opt.retain_workspaces = false;
  for (std::size_t n = 0; n + 1 < cu.size(); ++n) {
    const index_t begin = cu[n], len = cu[n + 1] - cu[n];
    SeqInputs<scalar_t> seq;
    seq.Q = detail::copy_rows(batch.tokens.Q, begin, len);
    seq.K = detail::copy_rows(batch.tokens.K, begin, len);
    seq.V = detail::copy_rows(batch.tokens.V, begin, len);
    seq.B = detail::copy_rows(batch.tokens.B, begin, len);
    seq.W = detail::copy_rows(batch.tokens.W, begin, len);
    seq.G = detail::copy_rows(batch.tokens.G, begin, len);
    const Mat<scalar_t> s0 = initial_states
                                 ? (*initial_states)[n]
                                 : Mat<scalar_t>(batch.tokens.d_k(), batch.tokens.d_v());
    ChunkedForward<scalar_t> fwd = forward_chunked(seq, s0, seq_opt);
    for (index_t r = 0; r < len; ++r)
      std::memcpy(out.outputs.row(begin + r), fwd.outputs.row(r),
                  static_cast<std::size_t>(out.outputs.cols) * sizeof(scalar_t));
    out.final_states.push_back(std::move(fwd.final_state));
  }
  return out;
}

}  // namespace gdr2
