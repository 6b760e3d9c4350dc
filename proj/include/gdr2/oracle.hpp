#pragma once

#include "gdr2/chunkwise.hpp"
#include "gdr2/rules.hpp"

namespace gdr2 {

// Bridge from row-stacked sequence tensors to per-token gate bundles.
template <typename scalar_t>
std::vector<TokenGates<scalar_t>> tokens_from_seq(const SeqInputs<scalar_t>& in) {
  std::vector<TokenGates<scalar_t>> tokens;
  tokens.reserve(static_cast<std::size_t>(in.len()));
  const index_t dk = in.d_k(), dv = in.d_v();
  for (index_t t = 0; t < in.len(); ++t) {
    TokenGates<scalar_t> g;
    g.q.assign(in.Q.row(t), in.Q.row(t) + dk);
    g.k.assign(in.K.row(t), in.K.row(t) + dk);
    g.v.assign(in.V.row(t), in.V.row(t) + dv);
    g.b.assign(in.B.row(t), in.B.row(t) + dk);
    g.w.assign(in.W.row(t), in.W.row(t) + dv);
    g.g.assign(in.G.row(t), in.G.row(t) + dk);
    g.alpha.resize(static_cast<std::size_t>(dk));
    for (index_t c = 0; c < dk; ++c)
      g.alpha[static_cast<std::size_t>(c)] =
          static_cast<scalar_t>(std::exp(static_cast<double>(in.G(t, c))));
    tokens.push_back(std::move(g));
  }
  return tokens;
}

// Tokenwise run of the gated delta rule over sequence tensors.
template <typename scalar_t>
SequenceRun<scalar_t> reference_forward(const SeqInputs<scalar_t>& in, const Mat<scalar_t>& s0,
                                        bool keep_states = false, bool neg_eig = false) {
  RunOptions opt;
  opt.keep_states = keep_states;
  opt.neg_eig = neg_eig;
  return run_sequence_reference(RuleKind::gdr2, tokens_from_seq(in), s0, opt);
}

// 0.5 ||O||_F^2 (+ 0.5 ||S_final||_F^2), evaluated through the tokenwise
// reference only. This is the loss all finite-difference checks probe.
template <typename scalar_t>
double reference_loss(const SeqInputs<scalar_t>& in, const Mat<scalar_t>& s0,
                      bool include_state_term) {
  const SequenceRun<scalar_t> run = reference_forward(in, s0, /*keep_states=*/false);
  double loss = 0.0;
  for (scalar_t x : run.outputs.data) loss += 0.5 * static_cast<double>(x) * x;
  if (include_state_term)
    for (scalar_t x : run.final_state.data) loss += 0.5 * static_cast<double>(x) * x;
  return loss;
}

// Random inputs with gates kept interior to their ranges so central
// differences never cross a contract boundary. Queries and keys are
// unit-normalized per token, matching what the layer feeds the kernel;
// unnormalized keys make the erase factor expansive and the state blows up
// over long streams.
template <typename scalar_t>
SeqInputs<scalar_t> random_seq_inputs(Rng& rng, index_t L, index_t dk, index_t dv) {
  SeqInputs<scalar_t> in;
  in.Q = l2_normalize_rows(random_uniform<scalar_t>(rng, L, dk, -1.0, 1.0), 1e-6);
  in.K = l2_normalize_rows(random_uniform<scalar_t>(rng, L, dk, -1.0, 1.0), 1e-6);
  in.V = random_uniform<scalar_t>(rng, L, dv, -1.0, 1.0);
  in.B = random_uniform<scalar_t>(rng, L, dk, 0.05, 0.95);
  in.W = random_uniform<scalar_t>(rng, L, dv, 0.05, 0.95);
  in.G = random_uniform<scalar_t>(rng, L, dk, -0.5, -1e-3);
  return in;
}

}  // namespace gdr2
