#pragma once

#include <utility>
#include <vector>

#include "gdr2/backward.hpp"
#include "gdr2/chunkwise.hpp"
#include "gdr2/oracle.hpp"

namespace gdr2 {

// full: channel-wise erase and write gates.
// tied_kda: one scalar per key head drives both gates (b = beta 1, w = beta 1).
// tied_gdn: tied gates plus a per-head scalar log-decay.
enum class GateMode { full, tied_kda, tied_gdn };

enum class LayerMode { chunked, decode };

struct LayerConfig {
  index_t d_model = 32;
  index_t H = 1;       // key heads
  index_t H_v = 1;     // value heads, multiple of H
  index_t d_k = 16;
  index_t d_v = 16;
  index_t conv_width = 4;
  index_t chunk_size = 64;
  bool neg_eig = false;
  GateMode gate_mode = GateMode::full;

  index_t group_factor() const { return H_v / H; }
  index_t key_head_of(index_t hv) const { return hv / group_factor(); }
  void validate() const {
    check_contract(H >= 1 && H_v >= 1 && H_v % H == 0, "LayerConfig: H_v must be a multiple of H");
    check_contract(conv_width >= 1, "LayerConfig: conv_width must be >= 1");
    check_contract(chunk_size >= 1, "LayerConfig: chunk_size must be >= 1");
  }
};

inline constexpr double kQkNormEps = 1e-6;
inline constexpr double kRmsNormEps = 1e-5;

// Projections are stored out_dim x d_model; conv kernels channel x width with
// the last tap on the current token; a is per key head, delta per key channel.
template <typename scalar_t>
struct LayerParams {
  Mat<scalar_t> wq, wk;          // (H d_k) x d_model
  Mat<scalar_t> wv;              // (H_v d_v) x d_model
  Mat<scalar_t> wb;              // (H d_k) x d_model
  Mat<scalar_t> ww;              // (H_v d_v) x d_model
  Mat<scalar_t> wf;              // (H d_k) x d_model
  Vec<scalar_t> a;               // H
  Vec<scalar_t> delta;           // H d_k
  Mat<scalar_t> wgate;           // (H_v d_v) x d_model
  Mat<scalar_t> wo;              // d_model x (H_v d_v)
  Mat<scalar_t> conv_q, conv_k;  // (H d_k) x conv_width
  Mat<scalar_t> conv_v;          // (H_v d_v) x conv_width
  Mat<scalar_t> rms;             // H_v x d_v
};

template <typename scalar_t>
struct LayerGrads {
  Mat<scalar_t> wq, wk, wv, wb, ww, wf;
  Vec<scalar_t> a, delta;
  Mat<scalar_t> wgate, wo, conv_q, conv_k, conv_v, rms;
  Mat<scalar_t> dX;  // L x d_model
};

namespace detail {

template <typename scalar_t>
Mat<scalar_t> xavier_uniform(Rng& rng, index_t out_dim, index_t in_dim, double gain) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  return random_uniform<scalar_t>(rng, out_dim, in_dim, -limit, limit);
}

}  // namespace detail

inline constexpr double kXavierGain = 0.17677669529663687;  // 2^-2.5

template <typename scalar_t>
LayerParams<scalar_t> init_params(const LayerConfig& cfg, Rng& rng) {
  cfg.validate();
  const index_t dqk = cfg.H * cfg.d_k, dvv = cfg.H_v * cfg.d_v;
  LayerParams<scalar_t> p;
  p.wq = detail::xavier_uniform<scalar_t>(rng, dqk, cfg.d_model, kXavierGain);
  p.wk = detail::xavier_uniform<scalar_t>(rng, dqk, cfg.d_model, kXavierGain);
  p.wv = detail::xavier_uniform<scalar_t>(rng, dvv, cfg.d_model, kXavierGain);
  p.wb = detail::xavier_uniform<scalar_t>(rng, dqk, cfg.d_model, kXavierGain);
  p.ww = detail::xavier_uniform<scalar_t>(rng, dvv, cfg.d_model, kXavierGain);
  p.wf = detail::xavier_uniform<scalar_t>(rng, dqk, cfg.d_model, kXavierGain);
  p.wgate = detail::xavier_uniform<scalar_t>(rng, dvv, cfg.d_model, kXavierGain);
  p.wo = detail::xavier_uniform<scalar_t>(rng, cfg.d_model, dvv, kXavierGain);

  // identity taps; the mixing pattern is learned
  p.conv_q = Mat<scalar_t>(dqk, cfg.conv_width);
  p.conv_k = Mat<scalar_t>(dqk, cfg.conv_width);
  p.conv_v = Mat<scalar_t>(dvv, cfg.conv_width);
  for (index_t c = 0; c < dqk; ++c) {
    p.conv_q(c, cfg.conv_width - 1) = scalar_t(1);
    p.conv_k(c, cfg.conv_width - 1) = scalar_t(1);
  }
  for (index_t c = 0; c < dvv; ++c) p.conv_v(c, cfg.conv_width - 1) = scalar_t(1);

  // slowest head decays at rate 1, fastest at 8
  p.a.resize(static_cast<std::size_t>(cfg.H));
  const double denom = static_cast<double>(std::max<index_t>(cfg.H - 1, 1));
  for (index_t h = 0; h < cfg.H; ++h)
    p.a[static_cast<std::size_t>(h)] =
        static_cast<scalar_t>(std::log(8.0) * static_cast<double>(h) / denom);

  // delta chosen so the initial per-channel decay sits in [0.9, 0.999]
  p.delta.resize(static_cast<std::size_t>(cfg.H * cfg.d_k));
  const double la = std::log(0.9), lb = std::log(0.999);
  for (index_t h = 0; h < cfg.H; ++h) {
    const double slope = std::exp(static_cast<double>(p.a[static_cast<std::size_t>(h)]));
    for (index_t c = 0; c < cfg.d_k; ++c) {
      const double frac = (static_cast<double>(c) + 0.5) / static_cast<double>(cfg.d_k);
      const double target_log_alpha = la + (lb - la) * frac;
      const double sp = -target_log_alpha / slope;      // softplus(delta) target
      p.delta[static_cast<std::size_t>(h * cfg.d_k + c)] =
          static_cast<scalar_t>(std::log(std::expm1(sp)));
    }
  }

  p.rms = Mat<scalar_t>(cfg.H_v, cfg.d_v);
  for (index_t i = 0; i < p.rms.size(); ++i) p.rms.data[i] = scalar_t(1);
  return p;
}

// --- building blocks -------------------------------------------------------

// y = x W^T for W stored out_dim x in_dim.
template <typename scalar_t>
Mat<scalar_t> linear(const Mat<scalar_t>& x, const Mat<scalar_t>& w) {
  check_dim(x.cols == w.cols, "linear: input width mismatch");
  return matmul(x, transposed(w), Accum::f64);
}

// Depthwise causal convolution, zero left padding; kernel[c][width-1]
// multiplies the current token.
template <typename scalar_t>
Mat<scalar_t> causal_conv(const Mat<scalar_t>& x, const Mat<scalar_t>& kernel) {
  check_dim(x.cols == kernel.rows, "causal_conv: channel count mismatch");
  const index_t L = x.rows, ch = x.cols, w = kernel.cols;
  Mat<scalar_t> y(L, ch);
  for (index_t t = 0; t < L; ++t) {
    scalar_t* yrow = y.row(t);
    for (index_t j = 0; j < w; ++j) {
      const index_t src = t - (w - 1) + j;
      if (src < 0) continue;
      const scalar_t* xrow = x.row(src);
      for (index_t c = 0; c < ch; ++c) yrow[c] += kernel(c, j) * xrow[c];
    }
  }
  return y;
}

template <typename scalar_t>
void causal_conv_backward(const Mat<scalar_t>& x, const Mat<scalar_t>& kernel,
                          const Mat<scalar_t>& dy, Mat<scalar_t>& dx, Mat<scalar_t>& dkernel) {
  const index_t L = x.rows, ch = x.cols, w = kernel.cols;
  dx = Mat<scalar_t>(L, ch);
  dkernel = Mat<scalar_t>(kernel.rows, kernel.cols);
  for (index_t t = 0; t < L; ++t) {
    const scalar_t* dyrow = dy.row(t);
    for (index_t j = 0; j < w; ++j) {
      const index_t src = t - (w - 1) + j;
      if (src < 0) continue;
      const scalar_t* xrow = x.row(src);
      scalar_t* dxrow = dx.row(src);
      for (index_t c = 0; c < ch; ++c) {
        dkernel(c, j) += dyrow[c] * xrow[c];
        dxrow[c] += dyrow[c] * kernel(c, j);
      }
    }
  }
}

// Per-token L2 normalization of each head slice of width `dim`.
template <typename scalar_t>
Mat<scalar_t> l2_normalize_heads(const Mat<scalar_t>& x, index_t dim) {
  Mat<scalar_t> out(x.rows, x.cols);
  for (index_t t = 0; t < x.rows; ++t) {
    for (index_t h0 = 0; h0 < x.cols; h0 += dim) {
      double ss = 0.0;
      for (index_t c = 0; c < dim; ++c) {
        const double v = static_cast<double>(x(t, h0 + c));
        ss += v * v;
      }
      const double denom = std::max(std::sqrt(ss), kQkNormEps);
      for (index_t c = 0; c < dim; ++c)
        out(t, h0 + c) = static_cast<scalar_t>(static_cast<double>(x(t, h0 + c)) / denom);
    }
  }
  return out;
}

template <typename scalar_t>
Mat<scalar_t> l2_normalize_heads_backward(const Mat<scalar_t>& x, index_t dim,
                                          const Mat<scalar_t>& dy) {
  Mat<scalar_t> dx(x.rows, x.cols);
  for (index_t t = 0; t < x.rows; ++t) {
    for (index_t h0 = 0; h0 < x.cols; h0 += dim) {
      double ss = 0.0, dot = 0.0;
      for (index_t c = 0; c < dim; ++c) {
        const double v = static_cast<double>(x(t, h0 + c));
        ss += v * v;
        dot += v * static_cast<double>(dy(t, h0 + c));
      }
      const double n = std::sqrt(ss);
      if (n >= kQkNormEps) {
        const double inv = 1.0 / n, inv3 = inv * inv * inv;
        for (index_t c = 0; c < dim; ++c)
          dx(t, h0 + c) = static_cast<scalar_t>(static_cast<double>(dy(t, h0 + c)) * inv -
                                                static_cast<double>(x(t, h0 + c)) * dot * inv3);
      } else {
        for (index_t c = 0; c < dim; ++c)
          dx(t, h0 + c) = static_cast<scalar_t>(static_cast<double>(dy(t, h0 + c)) / kQkNormEps);
      }
    }
  }
  return dx;
}

// --- activations retained for the backward pass ----------------------------

template <typename scalar_t>
struct LayerActivations {
  Mat<scalar_t> x;
  Mat<scalar_t> preq, prek, prev;  // post-linear
  Mat<scalar_t> cq, ck, cv;        // post-conv
  Mat<scalar_t> sq, sk, sv;        // post-silu
  Mat<scalar_t> nq, nk;            // post per-head L2 norm
  Mat<scalar_t> preb, prew;        // gate preactivations
  Mat<scalar_t> bmat, wmat;        // gate values (full mode layout: L x H d_k / L x H_v d_v)
  Mat<scalar_t> beta;              // L x H, tied modes only
  Mat<scalar_t> pref;              // decay preactivation incl. delta
  Mat<scalar_t> gmat;              // log-decay, L x H d_k
  std::vector<ChunkedForward<scalar_t>> heads;  // per value head, workspaces kept
  Mat<scalar_t> mix;               // L x H_v d_v
  Mat<scalar_t> rmsed;             // post RMS norm
  Mat<scalar_t> pregate;           // output gate preactivation
  Mat<scalar_t> gated;             // rmsed . silu(pregate)
};

// Recurrent decoding state: per-head memories in binary64 plus the last
// conv_width-1 pre-convolution rows of each path.
template <typename scalar_t>
struct DecodeState {
  std::vector<Mat<double>> head_states;  // H_v of d_k x d_v
  Mat<scalar_t> tail_q, tail_k;          // (conv_width-1) x (H d_k)
  Mat<scalar_t> tail_v;                  // (conv_width-1) x (H_v d_v)
  index_t pos = 0;
};

template <typename scalar_t>
DecodeState<scalar_t> fresh_decode_state(const LayerConfig& cfg) {
  DecodeState<scalar_t> st;
  st.head_states.assign(static_cast<std::size_t>(cfg.H_v), Mat<double>(cfg.d_k, cfg.d_v));
  st.tail_q = Mat<scalar_t>(cfg.conv_width - 1, cfg.H * cfg.d_k);
  st.tail_k = Mat<scalar_t>(cfg.conv_width - 1, cfg.H * cfg.d_k);
  st.tail_v = Mat<scalar_t>(cfg.conv_width - 1, cfg.H_v * cfg.d_v);
  return st;
}

// --- gate / decay parameterizations ----------------------------------------

namespace detail {

// B = sigma(Wb x) (times 2 with neg_eig), W = sigma(Ww x); tied modes derive
// one scalar per key head from the erase projection and broadcast it.
template <typename scalar_t>
void compute_gates_impl(const LayerConfig& cfg, const Mat<scalar_t>& preb,
                        const Mat<scalar_t>& prew, Mat<scalar_t>& bmat, Mat<scalar_t>& wmat,
                        Mat<scalar_t>& beta) {
  const index_t L = preb.rows;
  if (cfg.gate_mode == GateMode::full) {
    bmat = ew_sigmoid(preb);
    if (cfg.neg_eig)
      for (index_t i = 0; i < bmat.size(); ++i) bmat.data[i] *= scalar_t(2);
    wmat = ew_sigmoid(prew);
    return;
  }
  beta = Mat<scalar_t>(L, cfg.H);
  bmat = Mat<scalar_t>(L, cfg.H * cfg.d_k);
  wmat = Mat<scalar_t>(L, cfg.H_v * cfg.d_v);
  for (index_t t = 0; t < L; ++t) {
    for (index_t h = 0; h < cfg.H; ++h) {
      double mean = 0.0;
      for (index_t c = 0; c < cfg.d_k; ++c)
        mean += sigmoid_scalar(static_cast<double>(preb(t, h * cfg.d_k + c)));
      mean /= static_cast<double>(cfg.d_k);
      beta(t, h) = static_cast<scalar_t>(mean);
      for (index_t c = 0; c < cfg.d_k; ++c) bmat(t, h * cfg.d_k + c) = beta(t, h);
    }
    for (index_t hv = 0; hv < cfg.H_v; ++hv) {
      const scalar_t bt = beta(t, cfg.key_head_of(hv));
      for (index_t c = 0; c < cfg.d_v; ++c) wmat(t, hv * cfg.d_v + c) = bt;
    }
  }
}

// g = -exp(a) . softplus(Wf x + delta), elementwise math in binary64.
template <typename scalar_t>
Mat<scalar_t> compute_log_decay_impl(const LayerConfig& cfg, const LayerParams<scalar_t>& p,
                                     const Mat<scalar_t>& pref) {
  const index_t L = pref.rows;
  Mat<scalar_t> g(L, cfg.H * cfg.d_k);
  for (index_t t = 0; t < L; ++t) {
    for (index_t h = 0; h < cfg.H; ++h) {
      const double slope = std::exp(static_cast<double>(p.a[static_cast<std::size_t>(h)]));
      for (index_t c = 0; c < cfg.d_k; ++c) {
        const double sp = softplus_scalar(static_cast<double>(pref(t, h * cfg.d_k + c)));
        g(t, h * cfg.d_k + c) = static_cast<scalar_t>(-slope * sp);
      }
    }
  }
  if (cfg.gate_mode == GateMode::tied_gdn) {
    // scalar decay: average the per-channel log-decay and broadcast back
    for (index_t t = 0; t < L; ++t)
      for (index_t h = 0; h < cfg.H; ++h) {
        double mean = 0.0;
        for (index_t c = 0; c < cfg.d_k; ++c)
          mean += static_cast<double>(g(t, h * cfg.d_k + c));
        mean /= static_cast<double>(cfg.d_k);
        for (index_t c = 0; c < cfg.d_k; ++c)
          g(t, h * cfg.d_k + c) = static_cast<scalar_t>(mean);
      }
  }
  return g;
}

template <typename scalar_t>
Mat<scalar_t> head_slice(const Mat<scalar_t>& m, index_t head, index_t dim) {
  Mat<scalar_t> out(m.rows, dim);
  for (index_t t = 0; t < m.rows; ++t)
    for (index_t c = 0; c < dim; ++c) out(t, c) = m(t, head * dim + c);
  return out;
}

template <typename scalar_t>
void add_head_slice(Mat<scalar_t>& m, index_t head, index_t dim, const Mat<scalar_t>& src) {
  for (index_t t = 0; t < m.rows; ++t)
    for (index_t c = 0; c < dim; ++c) m(t, head * dim + c) += src(t, c);
}

}  // namespace detail

// Key-side tensors replicated across the value-head group (q, k, g, b);
// v and w stay on the value-head axis.
template <typename scalar_t>
SeqInputs<scalar_t> broadcast_group_heads(const LayerConfig& cfg, const LayerActivations<scalar_t>& acts,
                                          index_t hv) {
  const index_t h = cfg.key_head_of(hv);
  SeqInputs<scalar_t> in;
  in.Q = detail::head_slice(acts.nq, h, cfg.d_k);
  in.K = detail::head_slice(acts.nk, h, cfg.d_k);
  in.B = detail::head_slice(acts.bmat, h, cfg.d_k);
  in.G = detail::head_slice(acts.gmat, h, cfg.d_k);
  in.V = detail::head_slice(acts.sv, hv, cfg.d_v);
  in.W = detail::head_slice(acts.wmat, hv, cfg.d_v);
  return in;
}

template <typename scalar_t>
struct LayerForward {
  Mat<scalar_t> y;  // L x d_model
  DecodeState<scalar_t> state;
  LayerActivations<scalar_t> acts;
};

// Full pipeline: projections -> causal conv -> SiLU -> (L2 on q,k) -> gates
// and decay -> gated delta rule per value head -> RMS norm -> SiLU output
// gate -> output projection.
template <typename scalar_t>
LayerForward<scalar_t> forward_layer(const LayerParams<scalar_t>& p, const LayerConfig& cfg,
                                     const Mat<scalar_t>& x, bool retain = true) {
  cfg.validate();
  check_dim(x.cols == cfg.d_model, "forward_layer: input width mismatch");
  const index_t L = x.rows;

  LayerForward<scalar_t> out;
  LayerActivations<scalar_t>& acts = out.acts;
  acts.x = x;
  acts.preq = linear(x, p.wq);
  acts.prek = linear(x, p.wk);
  acts.prev = linear(x, p.wv);
  acts.cq = causal_conv(acts.preq, p.conv_q);
  acts.ck = causal_conv(acts.prek, p.conv_k);
  acts.cv = causal_conv(acts.prev, p.conv_v);
  acts.sq = ew_silu(acts.cq);
  acts.sk = ew_silu(acts.ck);
  acts.sv = ew_silu(acts.cv);
  acts.nq = l2_normalize_heads(acts.sq, cfg.d_k);
  acts.nk = l2_normalize_heads(acts.sk, cfg.d_k);

  acts.preb = linear(x, p.wb);
  acts.prew = linear(x, p.ww);
  detail::compute_gates_impl(cfg, acts.preb, acts.prew, acts.bmat, acts.wmat, acts.beta);

  acts.pref = linear(x, p.wf);
  for (index_t t = 0; t < L; ++t)
    for (index_t c = 0; c < cfg.H * cfg.d_k; ++c)
      acts.pref(t, c) += p.delta[static_cast<std::size_t>(c)];
  acts.gmat = detail::compute_log_decay_impl(cfg, p, acts.pref);

  EngineOptions<scalar_t> eopt;
  eopt.chunk_size = cfg.chunk_size;
  eopt.retain_workspaces = retain;
  eopt.neg_eig = cfg.neg_eig;

  acts.mix = Mat<scalar_t>(L, cfg.H_v * cfg.d_v);
  out.state = fresh_decode_state<scalar_t>(cfg);
  const Mat<scalar_t> s0(cfg.d_k, cfg.d_v);
  for (index_t hv = 0; hv < cfg.H_v; ++hv) {
    SeqInputs<scalar_t> in = broadcast_group_heads(cfg, acts, hv);
    ChunkedForward<scalar_t> fwd = forward_chunked(in, s0, eopt);
    for (index_t t = 0; t < L; ++t)
      for (index_t c = 0; c < cfg.d_v; ++c) acts.mix(t, hv * cfg.d_v + c) = fwd.outputs(t, c);
    Mat<double>& st = out.state.head_states[static_cast<std::size_t>(hv)];
    for (index_t i = 0; i < fwd.final_state.size(); ++i)
      st.data[i] = static_cast<double>(fwd.final_state.data[i]);
    acts.heads.push_back(std::move(fwd));
  }

  acts.rmsed = Mat<scalar_t>(L, cfg.H_v * cfg.d_v);
  for (index_t t = 0; t < L; ++t)
    for (index_t hv = 0; hv < cfg.H_v; ++hv) {
      Vec<scalar_t> row(static_cast<std::size_t>(cfg.d_v));
      Vec<scalar_t> weight(static_cast<std::size_t>(cfg.d_v));
      for (index_t c = 0; c < cfg.d_v; ++c) {
        row[static_cast<std::size_t>(c)] = acts.mix(t, hv * cfg.d_v + c);
        weight[static_cast<std::size_t>(c)] = p.rms(hv, c);
      }
      const Vec<scalar_t> normed = rms_norm(row, weight, kRmsNormEps);
      for (index_t c = 0; c < cfg.d_v; ++c)
        acts.rmsed(t, hv * cfg.d_v + c) = normed[static_cast<std::size_t>(c)];
    }

  acts.pregate = linear(x, p.wgate);
  acts.gated = Mat<scalar_t>(L, cfg.H_v * cfg.d_v);
  for (index_t i = 0; i < acts.gated.size(); ++i)
    acts.gated.data[i] = acts.rmsed.data[i] *
                         static_cast<scalar_t>(silu_scalar(static_cast<double>(acts.pregate.data[i])));

  out.y = matmul(acts.gated, transposed(p.wo), Accum::f64);

  // conv tail buffers for decoding: the last conv_width-1 pre-conv rows
  const index_t tail = cfg.conv_width - 1;
  for (index_t r = 0; r < tail; ++r) {
    const index_t src = L - tail + r;
    if (src < 0) continue;
    for (index_t c = 0; c < cfg.H * cfg.d_k; ++c) {
      out.state.tail_q(r, c) = acts.preq(src, c);
      out.state.tail_k(r, c) = acts.prek(src, c);
    }
    for (index_t c = 0; c < cfg.H_v * cfg.d_v; ++c) out.state.tail_v(r, c) = acts.prev(src, c);
  }
  out.state.pos = L;

  if (!retain) acts = LayerActivations<scalar_t>{};
  return out;
}

// One autoregressive token: same math as the chunked path, state held in
// binary64, conv tails rolled forward.
template <typename scalar_t>
Vec<scalar_t> decode_step(const LayerParams<scalar_t>& p, const LayerConfig& cfg,
                          DecodeState<scalar_t>& st, const Vec<scalar_t>& x_t) {
  check_dim(static_cast<index_t>(x_t.size()) == cfg.d_model, "decode_step: input width mismatch");
  Mat<scalar_t> x(1, cfg.d_model);
  for (index_t c = 0; c < cfg.d_model; ++c) x(0, c) = x_t[static_cast<std::size_t>(c)];

  const Mat<scalar_t> preq = linear(x, p.wq);
  const Mat<scalar_t> prek = linear(x, p.wk);
  const Mat<scalar_t> prev = linear(x, p.wv);

  const index_t tail = cfg.conv_width - 1;
  const auto conv_one = [&](const Mat<scalar_t>& pre, const Mat<scalar_t>& tailbuf,
                            const Mat<scalar_t>& kernel) {
    Mat<scalar_t> y(1, pre.cols);
    for (index_t j = 0; j < cfg.conv_width; ++j) {
      const index_t lag = cfg.conv_width - 1 - j;  // lag 0 = current token
      const scalar_t* src = nullptr;
      if (lag == 0) {
        src = pre.row(0);
      } else {
        const index_t r = tail - lag;  // tail rows are oldest-first
        if (r < 0) continue;           // zero left padding before the stream
        src = tailbuf.row(r);
      }
      for (index_t c = 0; c < pre.cols; ++c) y(0, c) += kernel(c, j) * src[c];
    }
    return y;
  };
  const Mat<scalar_t> cq = conv_one(preq, st.tail_q, p.conv_q);
  const Mat<scalar_t> ck = conv_one(prek, st.tail_k, p.conv_k);
  const Mat<scalar_t> cv = conv_one(prev, st.tail_v, p.conv_v);

  const Mat<scalar_t> nq = l2_normalize_heads(ew_silu(cq), cfg.d_k);
  const Mat<scalar_t> nk = l2_normalize_heads(ew_silu(ck), cfg.d_k);
  const Mat<scalar_t> sv = ew_silu(cv);

  Mat<scalar_t> bmat, wmat, beta;
  detail::compute_gates_impl(cfg, linear(x, p.wb), linear(x, p.ww), bmat, wmat, beta);
  Mat<scalar_t> pref = linear(x, p.wf);
  for (index_t c = 0; c < cfg.H * cfg.d_k; ++c) pref(0, c) += p.delta[static_cast<std::size_t>(c)];
  const Mat<scalar_t> gmat = detail::compute_log_decay_impl(cfg, p, pref);

  Mat<scalar_t> gated(1, cfg.H_v * cfg.d_v);
  const Mat<scalar_t> pregate = linear(x, p.wgate);
  for (index_t hv = 0; hv < cfg.H_v; ++hv) {
    const index_t h = cfg.key_head_of(hv);
    Mat<double>& s = st.head_states[static_cast<std::size_t>(hv)];

    // decay, erase-read, write, query-read; all on the binary64 state
    Vec<double> read(static_cast<std::size_t>(cfg.d_v), 0.0);
    for (index_t i = 0; i < cfg.d_k; ++i) {
      const double alpha = std::exp(static_cast<double>(gmat(0, h * cfg.d_k + i)));
      double* srow = s.row(i);
      for (index_t j = 0; j < cfg.d_v; ++j) srow[j] *= alpha;
      const double ei = static_cast<double>(bmat(0, h * cfg.d_k + i)) *
                        static_cast<double>(nk(0, h * cfg.d_k + i));
      for (index_t j = 0; j < cfg.d_v; ++j) read[static_cast<std::size_t>(j)] += ei * srow[j];
    }
    Vec<double> o(static_cast<std::size_t>(cfg.d_v), 0.0);
    for (index_t i = 0; i < cfg.d_k; ++i) {
      const double ki = static_cast<double>(nk(0, h * cfg.d_k + i));
      double* srow = s.row(i);
      const double qi = static_cast<double>(nq(0, h * cfg.d_k + i));
      for (index_t j = 0; j < cfg.d_v; ++j) {
        const double zj = static_cast<double>(wmat(0, hv * cfg.d_v + j)) *
                          static_cast<double>(sv(0, hv * cfg.d_v + j));
        srow[j] += ki * (zj - read[static_cast<std::size_t>(j)]);
        o[static_cast<std::size_t>(j)] += qi * srow[j];
      }
    }

    Vec<scalar_t> row(static_cast<std::size_t>(cfg.d_v));
    Vec<scalar_t> weight(static_cast<std::size_t>(cfg.d_v));
    for (index_t c = 0; c < cfg.d_v; ++c) {
      row[static_cast<std::size_t>(c)] = static_cast<scalar_t>(o[static_cast<std::size_t>(c)]);
      weight[static_cast<std::size_t>(c)] = p.rms(hv, c);
    }
    const Vec<scalar_t> normed = rms_norm(row, weight, kRmsNormEps);
    for (index_t c = 0; c < cfg.d_v; ++c)
      gated(0, hv * cfg.d_v + c) =
          normed[static_cast<std::size_t>(c)] *
          static_cast<scalar_t>(silu_scalar(static_cast<double>(pregate(0, hv * cfg.d_v + c))));
  }

  const Mat<scalar_t> y = matmul(gated, transposed(p.wo), Accum::f64);

  // roll the conv tails
  if (tail > 0) {
    const auto roll = [&](Mat<scalar_t>& buf, const Mat<scalar_t>& fresh) {
      for (index_t r = 0; r + 1 < tail; ++r)
        for (index_t c = 0; c < buf.cols; ++c) buf(r, c) = buf(r + 1, c);
      for (index_t c = 0; c < buf.cols; ++c) buf(tail - 1, c) = fresh(0, c);
    };
    roll(st.tail_q, preq);
    roll(st.tail_k, prek);
    roll(st.tail_v, prev);
  }
  st.pos += 1;

  Vec<scalar_t> yout(static_cast<std::size_t>(cfg.d_model));
  for (index_t c = 0; c < cfg.d_model; ++c) yout[static_cast<std::size_t>(c)] = y(0, c);
  return yout;
}

// --- backward ---------------------------------------------------------------

template <typename scalar_t>
LayerGrads<scalar_t> backward_layer(const LayerParams<scalar_t>& p, const LayerConfig& cfg,
                                    const LayerActivations<scalar_t>& acts,
                                    const Mat<scalar_t>& dY) {
  check_contract(acts.x.rows > 0 && !acts.heads.empty(),
                 "backward_layer: forward activations missing");
  const index_t L = acts.x.rows;
  check_dim(dY.rows == L && dY.cols == cfg.d_model, "backward_layer: dY shape mismatch");

  LayerGrads<scalar_t> g;
  g.dX = Mat<scalar_t>(L, cfg.d_model);

  // output projection: y = gated wo^T
  g.wo = matmul(transposed(dY), acts.gated, Accum::f64);
  Mat<scalar_t> dgated = matmul(dY, p.wo, Accum::f64);

  // gated = rmsed . silu(pregate)
  Mat<scalar_t> drmsed(L, cfg.H_v * cfg.d_v);
  Mat<scalar_t> dpregate(L, cfg.H_v * cfg.d_v);
  for (index_t i = 0; i < dgated.size(); ++i) {
    const double pre = static_cast<double>(acts.pregate.data[i]);
    drmsed.data[i] = dgated.data[i] * static_cast<scalar_t>(silu_scalar(pre));
    dpregate.data[i] = dgated.data[i] * acts.rmsed.data[i] *
                       static_cast<scalar_t>(silu_grad_scalar(pre));
  }
  g.wgate = matmul(transposed(dpregate), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dpregate, p.wgate, Accum::f64));

  // RMS norm per head slice
  Mat<scalar_t> dmix(L, cfg.H_v * cfg.d_v);
  g.rms = Mat<scalar_t>(cfg.H_v, cfg.d_v);
  for (index_t t = 0; t < L; ++t)
    for (index_t hv = 0; hv < cfg.H_v; ++hv) {
      const index_t off = hv * cfg.d_v;
      double ss = 0.0;
      for (index_t c = 0; c < cfg.d_v; ++c) {
        const double v = static_cast<double>(acts.mix(t, off + c));
        ss += v * v;
      }
      const double n = std::sqrt(ss / static_cast<double>(cfg.d_v) + kRmsNormEps);
      double dot = 0.0;
      for (index_t c = 0; c < cfg.d_v; ++c)
        dot += static_cast<double>(drmsed(t, off + c)) * static_cast<double>(p.rms(hv, c)) *
               static_cast<double>(acts.mix(t, off + c));
      const double inv = 1.0 / n;
      const double inv3 = inv * inv * inv / static_cast<double>(cfg.d_v);
      for (index_t c = 0; c < cfg.d_v; ++c) {
        const double dyc = static_cast<double>(drmsed(t, off + c));
        const double vc = static_cast<double>(acts.mix(t, off + c));
        dmix(t, off + c) = static_cast<scalar_t>(
            dyc * static_cast<double>(p.rms(hv, c)) * inv - vc * dot * inv3);
        g.rms(hv, c) += static_cast<scalar_t>(dyc * vc * inv);
      }
    }

  // per-head recurrence backward; key-side grads sum over the value group
  Mat<scalar_t> dnq(L, cfg.H * cfg.d_k), dnk(L, cfg.H * cfg.d_k);
  Mat<scalar_t> dbmat(L, cfg.H * cfg.d_k), dgmat(L, cfg.H * cfg.d_k);
  Mat<scalar_t> dsv(L, cfg.H_v * cfg.d_v), dwmat(L, cfg.H_v * cfg.d_v);
  BackwardOptions<scalar_t> bopt;
  for (index_t hv = 0; hv < cfg.H_v; ++hv) {
    const index_t h = cfg.key_head_of(hv);
    Mat<scalar_t> dO(L, cfg.d_v);
    for (index_t t = 0; t < L; ++t)
      for (index_t c = 0; c < cfg.d_v; ++c) dO(t, c) = dmix(t, hv * cfg.d_v + c);
    const Mat<scalar_t> dS(cfg.d_k, cfg.d_v);
    const SeqGrads<scalar_t> hg =
        backward_chunked(acts.heads[static_cast<std::size_t>(hv)], dO, dS, bopt);
    detail::add_head_slice(dnq, h, cfg.d_k, hg.dQ);
    detail::add_head_slice(dnk, h, cfg.d_k, hg.dK);
    detail::add_head_slice(dbmat, h, cfg.d_k, hg.dB);
    detail::add_head_slice(dgmat, h, cfg.d_k, hg.dG);
    detail::add_head_slice(dsv, hv, cfg.d_v, hg.dV);
    detail::add_head_slice(dwmat, hv, cfg.d_v, hg.dW);
  }

  // decay parameterization
  Mat<scalar_t> dpref(L, cfg.H * cfg.d_k);
  g.a.assign(static_cast<std::size_t>(cfg.H), scalar_t(0));
  g.delta.assign(static_cast<std::size_t>(cfg.H * cfg.d_k), scalar_t(0));
  if (cfg.gate_mode == GateMode::tied_gdn) {
    // g was averaged over channels and broadcast back
    Mat<scalar_t> dg_mean(L, cfg.H * cfg.d_k);
    for (index_t t = 0; t < L; ++t)
      for (index_t h = 0; h < cfg.H; ++h) {
        scalar_t tot = scalar_t(0);
        for (index_t c = 0; c < cfg.d_k; ++c) tot += dgmat(t, h * cfg.d_k + c);
        tot /= static_cast<scalar_t>(cfg.d_k);
        for (index_t c = 0; c < cfg.d_k; ++c) dg_mean(t, h * cfg.d_k + c) = tot;
      }
    dgmat = std::move(dg_mean);
  }
  for (index_t t = 0; t < L; ++t)
    for (index_t h = 0; h < cfg.H; ++h) {
      const double slope = std::exp(static_cast<double>(p.a[static_cast<std::size_t>(h)]));
      for (index_t c = 0; c < cfg.d_k; ++c) {
        const index_t col = h * cfg.d_k + c;
        const double pre = static_cast<double>(acts.pref(t, col));
        const double dg = static_cast<double>(dgmat(t, col));
        // d g / d pref = -exp(a) sigmoid(pref); d g / d a = g itself
        dpref(t, col) = static_cast<scalar_t>(-dg * slope * sigmoid_scalar(pre));
        g.a[static_cast<std::size_t>(h)] +=
            static_cast<scalar_t>(dg * (-slope * softplus_scalar(pre)));
        g.delta[static_cast<std::size_t>(col)] += dpref(t, col);
      }
    }
  g.wf = matmul(transposed(dpref), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dpref, p.wf, Accum::f64));

  // gate parameterization
  Mat<scalar_t> dpreb(L, cfg.H * cfg.d_k);
  Mat<scalar_t> dprew(L, cfg.H_v * cfg.d_v);
  if (cfg.gate_mode == GateMode::full) {
    const double scale = cfg.neg_eig ? 2.0 : 1.0;
    for (index_t i = 0; i < dpreb.size(); ++i) {
      const double s = sigmoid_scalar(static_cast<double>(acts.preb.data[i]));
      dpreb.data[i] =
          dbmat.data[i] * static_cast<scalar_t>(scale * s * (1.0 - s));
    }
    for (index_t i = 0; i < dprew.size(); ++i) {
      const double s = sigmoid_scalar(static_cast<double>(acts.prew.data[i]));
      dprew.data[i] = dwmat.data[i] * static_cast<scalar_t>(s * (1.0 - s));
    }
  } else {
    // beta = mean_c sigma(preb); b = beta 1, w = beta 1 across the group
    for (index_t t = 0; t < L; ++t)
      for (index_t h = 0; h < cfg.H; ++h) {
        Vec<scalar_t> db_row(static_cast<std::size_t>(cfg.d_k));
        for (index_t c = 0; c < cfg.d_k; ++c)
          db_row[static_cast<std::size_t>(c)] = dbmat(t, h * cfg.d_k + c);
        Vec<scalar_t> dw_row;
        for (index_t hv = 0; hv < cfg.H_v; ++hv)
          if (cfg.key_head_of(hv) == h)
            for (index_t c = 0; c < cfg.d_v; ++c) dw_row.push_back(dwmat(t, hv * cfg.d_v + c));
        const scalar_t dbeta = tied_beta_gradient(db_row, dw_row);
        for (index_t c = 0; c < cfg.d_k; ++c) {
          const double s = sigmoid_scalar(static_cast<double>(acts.preb(t, h * cfg.d_k + c)));
          dpreb(t, h * cfg.d_k + c) = static_cast<scalar_t>(
              static_cast<double>(dbeta) / static_cast<double>(cfg.d_k) * s * (1.0 - s));
        }
      }
  }
  g.wb = matmul(transposed(dpreb), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dpreb, p.wb, Accum::f64));
  g.ww = matmul(transposed(dprew), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dprew, p.ww, Accum::f64));

  // value path: silu -> conv -> linear
  Mat<scalar_t> dcv(L, cfg.H_v * cfg.d_v);
  for (index_t i = 0; i < dcv.size(); ++i)
    dcv.data[i] = dsv.data[i] *
                  static_cast<scalar_t>(silu_grad_scalar(static_cast<double>(acts.cv.data[i])));
  Mat<scalar_t> dprev;
  causal_conv_backward(acts.prev, p.conv_v, dcv, dprev, g.conv_v);
  g.wv = matmul(transposed(dprev), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dprev, p.wv, Accum::f64));

  // query / key paths: L2 norm -> silu -> conv -> linear
  const Mat<scalar_t> dsq = l2_normalize_heads_backward(acts.sq, cfg.d_k, dnq);
  const Mat<scalar_t> dsk = l2_normalize_heads_backward(acts.sk, cfg.d_k, dnk);
  Mat<scalar_t> dcq(L, cfg.H * cfg.d_k), dck(L, cfg.H * cfg.d_k);
  for (index_t i = 0; i < dcq.size(); ++i) {
    dcq.data[i] = dsq.data[i] *
                  static_cast<scalar_t>(silu_grad_scalar(static_cast<double>(acts.cq.data[i])));
    dck.data[i] = dsk.data[i] *
                  static_cast<scalar_t>(silu_grad_scalar(static_cast<double>(acts.ck.data[i])));
  }
  Mat<scalar_t> dpreq, dprek;
  causal_conv_backward(acts.preq, p.conv_q, dcq, dpreq, g.conv_q);
  causal_conv_backward(acts.prek, p.conv_k, dck, dprek, g.conv_k);
  g.wq = matmul(transposed(dpreq), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dpreq, p.wq, Accum::f64));
  g.wk = matmul(transposed(dprek), acts.x, Accum::f64);
  detail::add_into(g.dX, matmul(dprek, p.wk, Accum::f64));

  return g;
}

}  // namespace gdr2
