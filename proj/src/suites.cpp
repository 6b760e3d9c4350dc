#include "gdr2/suites.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "gdr2/gradcheck.hpp"
#include "gdr2/model.hpp"
#include "gdr2/oracle.hpp"

namespace gdr2 {

namespace {

std::string fmt_id(const std::string& base, std::initializer_list<std::pair<const char*, index_t>> kv) {
  std::ostringstream s;
  s << base;
  for (const auto& [k, v] : kv) s << '_' << k << v;
  return s.str();
}

// --- equivalence -------------------------------------------------------------

template <typename scalar_t>
void equivalence_cases(Report& rep, const RunConfig& cfg) {
  const bool f32 = std::is_same_v<scalar_t, float>;
  const double tol = f32 ? 5e-3 : 1e-10;
  const std::string prec = f32 ? "_f32" : "_f64";
  Rng root(cfg.seed + (f32 ? 1000 : 0));

  for (const index_t L : {7, 64, 256}) {
    for (const index_t dk : {4, 16, 64}) {
      for (const index_t dv : {4, 16, 64}) {
        for (const index_t H : {1, 2}) {
          for (index_t h = 0; h < H; ++h) {
            for (const bool with_s0 : {false, true}) {
              Rng rng = root.fork();
              const SeqInputs<scalar_t> in = random_seq_inputs<scalar_t>(rng, L, dk, dv);
              Mat<scalar_t> s0(dk, dv);
              if (with_s0) s0 = random_uniform<scalar_t>(rng, dk, dv, -0.5, 0.5);
              const SequenceRun<scalar_t> oracle = reference_forward(in, s0);
              for (const index_t C : {1, 2, 3, 16, 64}) {
                EngineOptions<scalar_t> opt;
                opt.chunk_size = C;
                opt.retain_workspaces = false;
                const ChunkedForward<scalar_t> fwd = forward_chunked(in, s0, opt);
                const double diff = std::max(max_abs_diff(fwd.outputs, oracle.outputs),
                                             max_abs_diff(fwd.final_state, oracle.final_state));
                rep.check_le("equivalence",
                             fmt_id("L", {{"", L}, {"C", C}, {"k", dk}, {"v", dv}, {"H", H},
                                          {"h", h}, {"s", with_s0 ? 1 : 0}}) + prec,
                             "max_abs_diff", diff, C == 1 && !f32 ? 1e-14 : tol);
              }
            }
          }
        }
      }
    }
  }

  // packed ragged batches reset state at every boundary
  Rng rng = root.fork();
  PackedBatch<scalar_t> batch;
  batch.tokens = random_seq_inputs<scalar_t>(rng, 23, 8, 8);
  batch.cu_seqlens = {0, 5, 6, 23};
  EngineOptions<scalar_t> opt;
  opt.chunk_size = 4;
  const PackedForward<scalar_t> packed = forward_packed(batch, opt);
  double vs_oracle = 0.0, vs_solo = 0.0;
  opt.retain_workspaces = false;
  for (std::size_t n = 0; n + 1 < batch.cu_seqlens.size(); ++n) {
    const index_t begin = batch.cu_seqlens[n];
    const index_t len = batch.cu_seqlens[n + 1] - begin;
    SeqInputs<scalar_t> seq;
    seq.Q = Mat<scalar_t>(len, 8);
    seq.K = Mat<scalar_t>(len, 8);
    seq.B = Mat<scalar_t>(len, 8);
    seq.G = Mat<scalar_t>(len, 8);
    seq.V = Mat<scalar_t>(len, 8);
    seq.W = Mat<scalar_t>(len, 8);
    for (index_t r = 0; r < len; ++r)
      for (index_t c = 0; c < 8; ++c) {
        seq.Q(r, c) = batch.tokens.Q(begin + r, c);
        seq.K(r, c) = batch.tokens.K(begin + r, c);
        seq.B(r, c) = batch.tokens.B(begin + r, c);
        seq.G(r, c) = batch.tokens.G(begin + r, c);
        seq.V(r, c) = batch.tokens.V(begin + r, c);
        seq.W(r, c) = batch.tokens.W(begin + r, c);
      }
    const Mat<scalar_t> s0(8, 8);
    const SequenceRun<scalar_t> oracle = reference_forward(seq, s0);
    const ChunkedForward<scalar_t> solo = forward_chunked(seq, s0, opt);
    for (index_t r = 0; r < len; ++r)
      for (index_t c = 0; c < 8; ++c) {
        vs_oracle = std::max(vs_oracle, std::abs(static_cast<double>(packed.outputs(begin + r, c)) -
                                                 static_cast<double>(oracle.outputs(r, c))));
        vs_solo = std::max(vs_solo, std::abs(static_cast<double>(packed.outputs(begin + r, c)) -
                                             static_cast<double>(solo.outputs(r, c))));
      }
    vs_solo = std::max(vs_solo, max_abs_diff(packed.final_states[n], solo.final_state));
  }
  rep.check_le("equivalence", "packed_ragged_vs_oracle" + prec, "max_abs_diff", vs_oracle, tol);
  rep.check_le("equivalence", "packed_vs_per_sequence" + prec, "max_abs_diff", vs_solo, 1e-14);
}

// --- gradients ---------------------------------------------------------------

void gradient_kernel_cases(Report& rep, const RunConfig& cfg) {
  Rng rng(cfg.seed + 17);
  int instance = 0;
  const auto run_case = [&](index_t L, index_t d, bool s0, bool state_term) {
    GradCheckCase gc;
    gc.L = L;
    gc.d_k = d;
    gc.d_v = d;
    gc.chunk_size = std::min<index_t>(L, 7);
    gc.nonzero_s0 = s0;
    gc.state_term = state_term;
    const auto err = grad_check<double>(rng, gc);
    for (const auto& [name, e] : err)
      rep.check_le("gradients",
                   fmt_id("fd", {{"", instance}, {"L", L}, {"d", d}, {"s", s0 ? 1 : 0},
                                 {"t", state_term ? 1 : 0}}) + "_" + name,
                   "rel_err", e, 1e-6);
    ++instance;
  };
  for (const index_t L : {4, 12, 33})
    for (const index_t d : {3, 4, 8}) {
      run_case(L, d, false, false);
      run_case(L, d, true, true);
    }
  // mixed upstream flags
  run_case(12, 4, true, false);
  run_case(12, 4, false, true);
  run_case(33, 8, true, false);
  run_case(33, 8, false, true);

  // negative control: the tied-regime shortcut must fail on untied gates
  Rng rng_a(cfg.seed + 401), rng_b(cfg.seed + 401);
  GradCheckCase gc;
  gc.L = 12;
  gc.d_k = 4;
  gc.d_v = 4;
  gc.chunk_size = 6;
  gc.nonzero_s0 = true;
  double aware_worst = 0.0;
  for (const auto& [name, e] : grad_check<double>(rng_a, gc)) aware_worst = std::max(aware_worst, e);
  gc.wy_accum = WyAccum::scalar_postscale;
  double postscale_worst = 0.0;
  for (const auto& [name, e] : grad_check<double>(rng_b, gc))
    postscale_worst = std::max(postscale_worst, e);
  rep.check_le("gradients", "gate_aware_on_untied", "rel_err", aware_worst, 1e-6);
  rep.check_xfail_gt("gradients", "scalar_postscale_on_untied", "rel_err", postscale_worst, 1e-3);
}

void gradient_chunk_invariance(Report& rep, const RunConfig& cfg) {
  Rng rng(cfg.seed + 29);
  const index_t L = 64, dk = 8, dv = 8;
  const SeqInputs<double> in = random_seq_inputs<double>(rng, L, dk, dv);
  const Mat<double> s0 = random_uniform<double>(rng, dk, dv, -0.5, 0.5);
  const Mat<double> dO = random_uniform<double>(rng, L, dv, -1.0, 1.0);
  const Mat<double> dS = random_uniform<double>(rng, dk, dv, -1.0, 1.0);
  SeqGrads<double> base;
  for (const index_t C : {1, 2, 7, 16, 64}) {
    EngineOptions<double> opt;
    opt.chunk_size = C;
    const ChunkedForward<double> fwd = forward_chunked(in, s0, opt);
    const SeqGrads<double> g = backward_chunked(fwd, dO, dS);
    if (C == 1) {
      base = g;
      continue;
    }
    double diff = std::max({max_abs_diff(base.dQ, g.dQ), max_abs_diff(base.dK, g.dK),
                            max_abs_diff(base.dV, g.dV), max_abs_diff(base.dB, g.dB),
                            max_abs_diff(base.dW, g.dW), max_abs_diff(base.dG, g.dG),
                            max_abs_diff(base.dS0, g.dS0)});
    rep.check_le("gradients", fmt_id("chunk_invariance", {{"C", C}}), "max_abs_diff", diff, 1e-12);
  }
}

void gradient_layer_cases(Report& rep, const RunConfig& cfg) {
  for (const index_t hv : {1, 2}) {
    LayerConfig lc;
    lc.d_model = 8;
    lc.H = 1;
    lc.H_v = hv;
    lc.d_k = 4;
    lc.d_v = 4;
    lc.conv_width = 3;
    lc.chunk_size = 4;
    Rng rp(cfg.seed + 31);
    LayerParams<double> p = init_params<double>(lc, rp);
    Rng rx(cfg.seed + 37);
    Mat<double> x = random_uniform<double>(rx, 6, lc.d_model, -1.0, 1.0);
    const auto loss = [&]() {
      const LayerForward<double> out = forward_layer(p, lc, x, /*retain=*/false);
      double acc = 0.0;
      for (double v : out.y.data) acc += 0.5 * v * v;
      return acc;
    };
    const LayerForward<double> out = forward_layer(p, lc, x);
    const LayerGrads<double> g = backward_layer(p, lc, out.acts, out.y);
    const std::string suffix = hv == 1 ? "_Hv1" : "_Hv2";
    const auto check = [&](const char* name, const Mat<double>& analytic, Mat<double>& target) {
      rep.check_le("gradients", std::string("layer_fd_") + name + suffix, "rel_err",
                   relative_grad_error(analytic, fd_grad_matrix(target, loss)), 1e-5);
    };
    check("wq", g.wq, p.wq);
    check("wk", g.wk, p.wk);
    check("wv", g.wv, p.wv);
    check("wb", g.wb, p.wb);
    check("ww", g.ww, p.ww);
    check("wf", g.wf, p.wf);
    check("wgate", g.wgate, p.wgate);
    check("wo", g.wo, p.wo);
    check("conv_q", g.conv_q, p.conv_q);
    check("conv_k", g.conv_k, p.conv_k);
    check("conv_v", g.conv_v, p.conv_v);
    check("rms", g.rms, p.rms);
    check("x", g.dX, x);
    // per-head decay scalars
    Mat<double> a_mat(1, static_cast<index_t>(p.a.size()));
    for (std::size_t i = 0; i < p.a.size(); ++i) a_mat(0, static_cast<index_t>(i)) = p.a[i];
    Mat<double> g_a(1, static_cast<index_t>(g.a.size()));
    for (std::size_t i = 0; i < g.a.size(); ++i) g_a(0, static_cast<index_t>(i)) = g.a[i];
    const auto loss_a = [&]() {
      for (std::size_t i = 0; i < p.a.size(); ++i) p.a[i] = a_mat(0, static_cast<index_t>(i));
      return loss();
    };
    rep.check_le("gradients", std::string("layer_fd_a") + suffix, "rel_err",
                 relative_grad_error(g_a, fd_grad_matrix(a_mat, loss_a)), 1e-5);
  }
}

void gradient_tied_beta(Report& rep, const RunConfig& cfg, const char* suite) {
  Rng rng(cfg.seed + 43);
  const index_t L = 6, dk = 4, dv = 3;
  SeqInputs<double> in = random_seq_inputs<double>(rng, L, dk, dv);
  Vec<double> betas = random_uniform_vec<double>(rng, L, 0.2, 0.8);
  const Mat<double> s0 = random_uniform<double>(rng, dk, dv, -0.5, 0.5);
  const auto apply = [&](const Vec<double>& bs) {
    SeqInputs<double> tied = in;
    for (index_t r = 0; r < L; ++r) {
      for (index_t c = 0; c < dk; ++c) tied.B(r, c) = bs[static_cast<std::size_t>(r)];
      for (index_t c = 0; c < dv; ++c) tied.W(r, c) = bs[static_cast<std::size_t>(r)];
    }
    return tied;
  };
  EngineOptions<double> opt;
  opt.chunk_size = 4;
  const ChunkedForward<double> fwd = forward_chunked(apply(betas), s0, opt);
  const SeqGrads<double> g = backward_chunked(fwd, fwd.outputs, fwd.final_state);
  double worst = 0.0;
  for (index_t r = 0; r < L; ++r) {
    const Vec<double> db(g.dB.row(r), g.dB.row(r) + dk);
    const Vec<double> dw(g.dW.row(r), g.dW.row(r) + dv);
    const double analytic = tied_beta_gradient(db, dw);
    const double x0 = betas[static_cast<std::size_t>(r)];
    const double fd = central_difference(
        [&](double x) {
          Vec<double> bs = betas;
          bs[static_cast<std::size_t>(r)] = x;
          return reference_loss(apply(bs), s0, true);
        },
        x0, 1e-6);
    worst = std::max(worst, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
  }
  rep.check_le(suite, "tied_beta_fd", "rel_err", worst, 1e-8);
}

// --- reductions --------------------------------------------------------------

void reduction_cases(Report& rep, const RunConfig& cfg) {
  Rng rng(cfg.seed + 53);
  const index_t dk = 5, dv = 4, L = 24;

  std::vector<TokenGates<double>> stream;
  SeqInputs<double> seq = random_seq_inputs<double>(rng, L, dk, dv);
  {
    std::vector<TokenGates<double>> toks = tokens_from_seq(seq);
    Vec<double> betas = random_uniform_vec<double>(rng, L, 0.1, 0.9);
    for (index_t t = 0; t < L; ++t) {
      toks[static_cast<std::size_t>(t)].beta = betas[static_cast<std::size_t>(t)];
      stream.push_back(toks[static_cast<std::size_t>(t)]);
    }
  }
  const Mat<double> s0 = random_uniform<double>(rng, dk, dv, -0.5, 0.5);

  // step level
  {
    const TokenGates<double>& t0 = stream[0];
    TokenGates<double> tied = t0;
    tied.b.assign(static_cast<std::size_t>(dk), t0.beta);
    tied.w.assign(static_cast<std::size_t>(dv), t0.beta);
    const Gdr2Step<double> g = step_gdr2(s0, tied);
    rep.check_le("reductions", "step_gdr2_vs_kda", "max_abs_diff",
                 max_abs_diff(g.state, step_kda(s0, t0.k, t0.v, t0.alpha, t0.beta)), 1e-12);
    const Vec<double> scalar_alpha(static_cast<std::size_t>(dk), t0.alpha[0]);
    rep.check_le("reductions", "step_kda_vs_gdn", "max_abs_diff",
                 max_abs_diff(step_kda(s0, t0.k, t0.v, scalar_alpha, t0.beta),
                              step_gdn(s0, t0.k, t0.v, t0.alpha[0], t0.beta)),
                 0.0);
    rep.check_le("reductions", "step_gdn_vs_deltanet", "max_abs_diff",
                 max_abs_diff(step_gdn(s0, t0.k, t0.v, 1.0, t0.beta),
                              step_deltanet(s0, t0.k, t0.v, t0.beta)),
                 0.0);
    TokenGates<double> write_only = t0;
    write_only.alpha.assign(static_cast<std::size_t>(dk), t0.alpha[0]);
    write_only.b.assign(static_cast<std::size_t>(dk), 0.0);
    write_only.w.assign(static_cast<std::size_t>(dv), 1.0);
    rep.check_le("reductions", "step_b0w1_vs_mamba2", "max_abs_diff",
                 max_abs_diff(step_gdr2(s0, write_only).state,
                              step_mamba2(s0, t0.k, t0.v, t0.alpha[0])),
                 1e-12);
  }

  // sequence level
  {
    std::vector<TokenGates<double>> tied = stream;
    for (auto& t : tied) {
      t.b.assign(static_cast<std::size_t>(dk), t.beta);
      t.w.assign(static_cast<std::size_t>(dv), t.beta);
    }
    rep.check_le("reductions", "seq_gdr2_vs_kda", "max_abs_diff",
                 max_abs_diff(run_sequence_reference(RuleKind::gdr2, tied, s0).outputs,
                              run_sequence_reference(RuleKind::kda, stream, s0).outputs),
                 1e-12);
    std::vector<TokenGates<double>> scalar = stream;
    for (auto& t : scalar) {
      const double a = t.alpha[0];
      t.alpha.assign(static_cast<std::size_t>(dk), a);
      t.g.assign(static_cast<std::size_t>(dk), std::log(a));
    }
    rep.check_le("reductions", "seq_kda_vs_gdn", "max_abs_diff",
                 max_abs_diff(run_sequence_reference(RuleKind::kda, scalar, s0).outputs,
                              run_sequence_reference(RuleKind::gated_deltanet, scalar, s0).outputs),
                 1e-12);
    rep.check_le("reductions", "seq_b0w1_vs_mamba2", "max_abs_diff",
                 max_abs_diff(run_sequence_reference(RuleKind::mamba2, scalar, s0).outputs,
                              [&] {
                                std::vector<TokenGates<double>> wo = scalar;
                                for (auto& t : wo) {
                                  t.b.assign(static_cast<std::size_t>(dk), 0.0);
                                  t.w.assign(static_cast<std::size_t>(dv), 1.0);
                                }
                                return run_sequence_reference(RuleKind::gdr2, wo, s0).outputs;
                              }()),
                 1e-12);
  }

  // chunk level: tied inputs through the chunk engine vs the scalar-rule runs
  {
    SeqInputs<double> tied = seq;
    std::vector<TokenGates<double>> toks = stream;
    for (index_t t = 0; t < L; ++t) {
      const double beta = stream[static_cast<std::size_t>(t)].beta;
      for (index_t c = 0; c < dk; ++c) tied.B(t, c) = beta;
      for (index_t c = 0; c < dv; ++c) tied.W(t, c) = beta;
    }
    EngineOptions<double> opt;
    opt.chunk_size = 8;
    opt.retain_workspaces = false;
    const ChunkedForward<double> fwd = forward_chunked(tied, s0, opt);
    rep.check_le("reductions", "chunk_tied_vs_kda_reference", "max_abs_diff",
                 max_abs_diff(fwd.outputs,
                              run_sequence_reference(RuleKind::kda, toks, s0).outputs),
                 1e-12);
  }

  // layer level: the tied wrapper equals a hand-built KDA composition
  {
    LayerConfig lc;
    lc.d_model = 8;
    lc.H = 1;
    lc.H_v = 1;
    lc.d_k = 4;
    lc.d_v = 4;
    lc.conv_width = 3;
    lc.chunk_size = 8;
    lc.gate_mode = GateMode::tied_kda;
    Rng rp(cfg.seed + 61);
    const LayerParams<double> p = init_params<double>(lc, rp);
    Rng rx(cfg.seed + 67);
    const Mat<double> x = random_uniform<double>(rx, 16, lc.d_model, -1.0, 1.0);
    const LayerForward<double> out = forward_layer(p, lc, x);
    std::vector<TokenGates<double>> toks;
    for (index_t t = 0; t < 16; ++t) {
      TokenGates<double> g;
      g.q.assign(out.acts.nq.row(t), out.acts.nq.row(t) + lc.d_k);
      g.k.assign(out.acts.nk.row(t), out.acts.nk.row(t) + lc.d_k);
      g.v.assign(out.acts.sv.row(t), out.acts.sv.row(t) + lc.d_v);
      g.g.assign(out.acts.gmat.row(t), out.acts.gmat.row(t) + lc.d_k);
      g.alpha.resize(static_cast<std::size_t>(lc.d_k));
      for (index_t c = 0; c < lc.d_k; ++c)
        g.alpha[static_cast<std::size_t>(c)] = std::exp(out.acts.gmat(t, c));
      g.beta = out.acts.beta(t, 0);
      toks.push_back(std::move(g));
    }
    const SequenceRun<double> kda =
        run_sequence_reference(RuleKind::kda, toks, Mat<double>(lc.d_k, lc.d_v));
    Mat<double> y_hand(16, lc.d_model);
    for (index_t t = 0; t < 16; ++t) {
      Vec<double> row(kda.outputs.row(t), kda.outputs.row(t) + lc.d_v);
      Vec<double> weight(p.rms.row(0), p.rms.row(0) + lc.d_v);
      const Vec<double> normed = rms_norm(row, weight, kRmsNormEps);
      Mat<double> gated(1, lc.d_v);
      for (index_t c = 0; c < lc.d_v; ++c)
        gated(0, c) = normed[static_cast<std::size_t>(c)] * silu_scalar(out.acts.pregate(t, c));
      const Mat<double> y = matmul(gated, transposed(p.wo), Accum::f64);
      for (index_t c = 0; c < lc.d_model; ++c) y_hand(t, c) = y(0, c);
    }
    rep.check_le("reductions", "layer_tied_vs_kda_composition", "max_abs_diff",
                 max_abs_diff(out.y, y_hand), 1e-12);
  }

  // widening the erase range must not change in-range results
  {
    EngineOptions<double> off;
    off.chunk_size = 8;
    off.retain_workspaces = false;
    EngineOptions<double> on = off;
    on.neg_eig = true;
    const ChunkedForward<double> a = forward_chunked(seq, s0, off);
    const ChunkedForward<double> b = forward_chunked(seq, s0, on);
    rep.check_le("reductions", "neg_eig_range_subset", "max_abs_diff",
                 std::max(max_abs_diff(a.outputs, b.outputs),
                          max_abs_diff(a.final_state, b.final_state)),
                 0.0);
  }

  gradient_tied_beta(rep, cfg, "reductions");  // the tied wrapper's scalar gradient
}

// --- bench -------------------------------------------------------------------

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct BenchShapes {
  index_t d_k = 128;  // one head at the dimensions the full model uses
  index_t d_v = 128;
};

double bench_tokenwise(const SeqInputs<float>& in, const Mat<float>& s0) {
  const double t0 = now_seconds();
  RunOptions opt;
  opt.keep_states = false;
  const auto tokens = tokens_from_seq(in);
  const SequenceRun<float> run = run_sequence_reference(RuleKind::gdr2, tokens, s0, opt);
  const double dt = now_seconds() - t0;
  return static_cast<double>(in.len()) / dt + 0.0 * static_cast<double>(run.outputs(0, 0));
}

double bench_chunked(const SeqInputs<float>& in, const Mat<float>& s0, index_t C,
                     bool with_backward) {
  EngineOptions<float> opt;
  opt.chunk_size = C;
  opt.retain_workspaces = with_backward;
  const double t0 = now_seconds();
  const ChunkedForward<float> fwd = forward_chunked(in, s0, opt);
  double sink = static_cast<double>(fwd.outputs(0, 0));
  if (with_backward) {
    Mat<float> dO(in.len(), in.d_v());
    for (index_t i = 0; i < dO.size(); ++i) dO.data[i] = 1.0f;
    const SeqGrads<float> g = backward_chunked(fwd, dO, Mat<float>(in.d_k(), in.d_v()));
    sink += static_cast<double>(g.dQ(0, 0));
  }
  const double dt = now_seconds() - t0;
  return static_cast<double>(in.len()) / dt + 0.0 * sink;
}

}  // namespace

Report run_equivalence_suite(const RunConfig& cfg) {
  Report rep;
  if (cfg.precision == "f64" || cfg.precision == "f32") {
    equivalence_cases<double>(rep, cfg);
    equivalence_cases<float>(rep, cfg);
  }
  return rep;
}

Report run_gradient_suite(const RunConfig& cfg) {
  check_contract(cfg.precision == "f64", "check-gradients requires binary64 mode");
  Report rep;
  gradient_kernel_cases(rep, cfg);
  gradient_chunk_invariance(rep, cfg);
  gradient_layer_cases(rep, cfg);
  gradient_tied_beta(rep, cfg, "gradients");
  return rep;
}

Report run_reduction_suite(const RunConfig& cfg) {
  Report rep;
  reduction_cases(rep, cfg);
  return rep;
}

Report run_bench_suite(const RunConfig& cfg, Csv* csv) {
  Report rep;
  Csv out;
  out.header = {"path_tokenwise", "L", "C", "tokens_per_second"};
  const BenchShapes shapes;
  Rng rng(cfg.seed + 71);

  double token_tps_4096 = 0.0, chunk_tps_4096 = 0.0;
  for (const index_t L : {1024, 4096, 16384}) {
    const SeqInputs<float> in = random_seq_inputs<float>(rng, L, shapes.d_k, shapes.d_v);
    const Mat<float> s0(shapes.d_k, shapes.d_v);
    double token_tps = 0.0;
    for (int rep_i = 0; rep_i < (L == 4096 ? 3 : 1); ++rep_i)
      token_tps = std::max(token_tps, bench_tokenwise(in, s0));
    out.rows.push_back({1.0, static_cast<double>(L), 1.0, token_tps});
    rep.info("bench", fmt_id("tokenwise", {{"L", L}}), "tokens_per_second", token_tps);
    if (L == 4096) token_tps_4096 = token_tps;
    for (const index_t C : {16, 64, 128}) {
      double fwd_tps = 0.0;
      for (int rep_i = 0; rep_i < (L == 4096 && C == 64 ? 3 : 1); ++rep_i)
        fwd_tps = std::max(fwd_tps, bench_chunked(in, s0, C, false));
      out.rows.push_back({0.0, static_cast<double>(L), static_cast<double>(C), fwd_tps});
      rep.info("bench", fmt_id("chunked", {{"L", L}, {"C", C}}), "tokens_per_second", fwd_tps);
      if (L == 4096 && C == 64) chunk_tps_4096 = fwd_tps;
      const double both_tps = bench_chunked(in, s0, C, true);
      rep.info("bench", fmt_id("chunked_fwdbwd", {{"L", L}, {"C", C}}), "tokens_per_second",
               both_tps);
    }
  }
  rep.check_ge("bench", "speedup_L4096_C64_f32", "chunked_over_tokenwise",
               chunk_tps_4096 / token_tps_4096, 5.0);
  if (csv) *csv = std::move(out);
  return rep;
}

// --- recall ------------------------------------------------------------------

namespace {

template <typename scalar_t>
struct RecallOutcome {
  double initial = 0.0;
  double best = 0.0;
  double final_accuracy = 0.0;
  index_t steps_used = 0;
  bool diverged = false;
};

template <typename scalar_t>
LayerConfig recall_layer_config(const RunConfig& cfg, GateMode mode) {
  LayerConfig lc;
  lc.d_model = cfg.d_model;
  lc.H = cfg.H;
  lc.H_v = cfg.H_v;
  lc.d_k = cfg.d_k;
  lc.d_v = cfg.d_v;
  lc.conv_width = cfg.conv_width;
  lc.chunk_size = cfg.C;
  lc.gate_mode = mode;
  return lc;
}

template <typename scalar_t>
RecallOutcome<scalar_t> train_recall_once(const RunConfig& cfg, GateMode mode, double lr) {
  const LayerConfig lc = recall_layer_config<scalar_t>(cfg, mode);
  Rng init_rng(cfg.seed + 101);  // same init across the lr sweep
  ToyModel<scalar_t> model = init_toy_model<scalar_t>(lc, cfg.vocab, init_rng);

  Rng eval_rng(cfg.seed + 202);
  std::vector<RecallSample> eval_set;
  for (int i = 0; i < 64; ++i)
    eval_set.push_back(make_recall_sequence(eval_rng, cfg.vocab, cfg.pairs, cfg.L));

  const auto evaluate = [&](double* accuracy) {
    double loss = 0.0;
    int correct = 0;
    for (const RecallSample& s : eval_set) {
      const ModelEval<scalar_t> e = model_step(model, s.tokens, s.target);
      loss += e.loss;
      if (e.predicted == s.target) ++correct;
    }
    if (accuracy) *accuracy = static_cast<double>(correct) / static_cast<double>(eval_set.size());
    return loss / static_cast<double>(eval_set.size());
  };

  RecallOutcome<scalar_t> out;
  out.initial = evaluate(nullptr);
  out.best = out.initial;

  Rng data_rng(cfg.seed + 303);
  for (index_t step = 1; step <= cfg.steps; ++step) {
    ModelGrads<scalar_t> grads = zero_model_grads(model);
    for (index_t b = 0; b < cfg.batch; ++b) {
      const RecallSample s = make_recall_sequence(data_rng, cfg.vocab, cfg.pairs, cfg.L);
      const ModelEval<scalar_t> e = model_step(model, s.tokens, s.target, &grads);
      if (!std::isfinite(e.loss)) {
        out.diverged = true;
        return out;
      }
    }
    sgd_update(model, grads, lr / static_cast<double>(cfg.batch));
    out.steps_used = step;
    if (step % 50 == 0 || step == cfg.steps) {
      const double loss = evaluate(nullptr);
      if (!std::isfinite(loss)) {
        out.diverged = true;
        return out;
      }
      out.best = std::min(out.best, loss);
      if (out.best <= 0.5 * out.initial) break;  // criterion met, stop early
    }
  }
  evaluate(&out.final_accuracy);
  return out;
}

template <typename scalar_t>
void recall_cases(Report& rep, const RunConfig& cfg) {
  // uniform-init baseline: zero readout means exactly log(vocab)
  {
    const LayerConfig lc = recall_layer_config<scalar_t>(cfg, GateMode::full);
    Rng rng(cfg.seed + 101);
    ToyModel<scalar_t> model = init_toy_model<scalar_t>(lc, cfg.vocab, rng);
    Rng sr(cfg.seed + 404);
    const RecallSample s = make_recall_sequence(sr, cfg.vocab, cfg.pairs, cfg.L);
    const ModelEval<scalar_t> e = model_step(model, s.tokens, s.target);
    rep.check_le("recall", "initial_loss_is_log_vocab", "abs_err",
                 std::abs(e.loss - std::log(static_cast<double>(cfg.vocab))), 1e-9);

    // one tiny step must not increase the batch loss
    ModelGrads<scalar_t> grads = zero_model_grads(model);
    Rng br(cfg.seed + 505);
    std::vector<RecallSample> batch;
    double before = 0.0;
    for (int i = 0; i < 8; ++i) {
      batch.push_back(make_recall_sequence(br, cfg.vocab, cfg.pairs, cfg.L));
      before += model_step(model, batch.back().tokens, batch.back().target, &grads).loss;
    }
    sgd_update(model, grads, 1e-6 / 8.0);
    double after = 0.0;
    for (const RecallSample& bs : batch)
      after += model_step(model, bs.tokens, bs.target).loss;
    rep.check_le("recall", "descent_step_does_not_increase_loss", "loss_delta",
                 after - before, 0.0);
  }

  const std::vector<double> sweep =
      cfg.lr > 0.0 ? std::vector<double>{cfg.lr}
                   : std::vector<double>{1e-1, 3e-2, 1e-2, 3e-3, 1e-3};

  double best_ratio = 1.0, best_lr = 0.0, best_acc = 0.0;
  bool all_diverged = true;
  for (const double lr : sweep) {
    const RecallOutcome<scalar_t> out = train_recall_once<scalar_t>(cfg, GateMode::full, lr);
    if (!out.diverged) all_diverged = false;
    const double ratio = out.diverged ? 1.0 : out.best / out.initial;
    rep.info("recall", fmt_id("gdr2_lr", {{"e", static_cast<index_t>(-std::log10(lr) * 10)}}),
             "loss_ratio", ratio);
    if (ratio < best_ratio) {
      best_ratio = ratio;
      best_lr = lr;
      best_acc = out.final_accuracy;
    }
  }
  rep.check_le("recall", "gdr2_halves_initial_loss", "best_loss_ratio", best_ratio, 0.5);
  rep.check_le("recall", "no_universal_divergence", "all_diverged", all_diverged ? 1.0 : 0.0, 0.0);
  rep.info("recall", "gdr2_final_accuracy", "accuracy", best_acc);

  // tied wrappers trained at the winning rate, reported for comparison
  if (best_lr > 0.0) {
    const RecallOutcome<scalar_t> kda = train_recall_once<scalar_t>(cfg, GateMode::tied_kda, best_lr);
    rep.info("recall", "kda_final_accuracy", "accuracy", kda.final_accuracy);
    rep.info("recall", "kda_loss_ratio", "loss_ratio",
             kda.diverged ? 1.0 : kda.best / kda.initial);
    const RecallOutcome<scalar_t> gdn = train_recall_once<scalar_t>(cfg, GateMode::tied_gdn, best_lr);
    rep.info("recall", "gdn_final_accuracy", "accuracy", gdn.final_accuracy);
    rep.info("recall", "gdn_loss_ratio", "loss_ratio",
             gdn.diverged ? 1.0 : gdn.best / gdn.initial);
  }
}

}  // namespace

Report run_recall_suite(const RunConfig& cfg) {
  Report rep;
  if (cfg.precision == "f32")
    recall_cases<float>(rep, cfg);
  else
    recall_cases<double>(rep, cfg);
  return rep;
}

}  // namespace gdr2
