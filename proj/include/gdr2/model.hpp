#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "gdr2/layer.hpp"
#include "gdr2/tensor_io.hpp"

namespace gdr2 {

// Embedding -> one token mixer -> linear readout. The readout starts at zero
// so the initial cross-entropy is exactly log(vocab).
template <typename scalar_t>
struct ToyModel {
  LayerConfig cfg;
  index_t vocab = 16;
  Mat<scalar_t> emb;      // vocab x d_model
  LayerParams<scalar_t> layer;
  Mat<scalar_t> readout;  // vocab x d_model
};

template <typename scalar_t>
ToyModel<scalar_t> init_toy_model(const LayerConfig& cfg, index_t vocab, Rng& rng) {
  ToyModel<scalar_t> m;
  m.cfg = cfg;
  m.vocab = vocab;
  m.emb = detail::xavier_uniform<scalar_t>(rng, vocab, cfg.d_model, kXavierGain);
  m.layer = init_params<scalar_t>(cfg, rng);
  m.readout = Mat<scalar_t>(vocab, cfg.d_model);
  return m;
}

template <typename scalar_t>
struct ModelGrads {
  Mat<scalar_t> emb;
  LayerGrads<scalar_t> layer;
  Mat<scalar_t> readout;
};

template <typename scalar_t>
struct ModelEval {
  double loss = 0.0;
  index_t predicted = -1;
};

template <typename scalar_t>
void accumulate_layer_grads(LayerGrads<scalar_t>& into, const LayerGrads<scalar_t>& g);

// Cross-entropy of the final-position prediction; gradients accumulate into
// `grads` when provided.
template <typename scalar_t>
ModelEval<scalar_t> model_step(const ToyModel<scalar_t>& m, const std::vector<index_t>& tokens,
                               index_t target, ModelGrads<scalar_t>* grads = nullptr) {
  const index_t L = static_cast<index_t>(tokens.size());
  check_contract(L >= 1, "model_step: empty sequence");
  check_contract(target >= 0 && target < m.vocab, "model_step: target out of vocabulary");
  Mat<scalar_t> x(L, m.cfg.d_model);
  for (index_t t = 0; t < L; ++t) {
    const index_t tok = tokens[static_cast<std::size_t>(t)];
    check_contract(tok >= 0 && tok < m.vocab, "model_step: token out of vocabulary");
    for (index_t c = 0; c < m.cfg.d_model; ++c) x(t, c) = m.emb(tok, c);
  }

  const LayerForward<scalar_t> fwd = forward_layer(m.layer, m.cfg, x, /*retain=*/grads != nullptr);

  // logits from the final position only
  Vec<double> logits(static_cast<std::size_t>(m.vocab), 0.0);
  for (index_t v = 0; v < m.vocab; ++v)
    for (index_t c = 0; c < m.cfg.d_model; ++c)
      logits[static_cast<std::size_t>(v)] +=
          static_cast<double>(m.readout(v, c)) * static_cast<double>(fwd.y(L - 1, c));

  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double logz = mx + std::log(z);

  ModelEval<scalar_t> eval;
  eval.loss = logz - logits[static_cast<std::size_t>(target)];
  eval.predicted = static_cast<index_t>(
      std::max_element(logits.begin(), logits.end()) - logits.begin());

  if (grads) {
    Vec<double> dlogits(static_cast<std::size_t>(m.vocab));
    for (index_t v = 0; v < m.vocab; ++v)
      dlogits[static_cast<std::size_t>(v)] =
          std::exp(logits[static_cast<std::size_t>(v)] - logz) - (v == target ? 1.0 : 0.0);

    Mat<scalar_t> dY(L, m.cfg.d_model);
    for (index_t v = 0; v < m.vocab; ++v)
      for (index_t c = 0; c < m.cfg.d_model; ++c) {
        grads->readout(v, c) += static_cast<scalar_t>(
            dlogits[static_cast<std::size_t>(v)] * static_cast<double>(fwd.y(L - 1, c)));
        dY(L - 1, c) += static_cast<scalar_t>(dlogits[static_cast<std::size_t>(v)] *
                                              static_cast<double>(m.readout(v, c)));
      }

    const LayerGrads<scalar_t> lg = backward_layer(m.layer, m.cfg, fwd.acts, dY);
    accumulate_layer_grads(grads->layer, lg);
    for (index_t t = 0; t < L; ++t) {
      const index_t tok = tokens[static_cast<std::size_t>(t)];
      for (index_t c = 0; c < m.cfg.d_model; ++c) grads->emb(tok, c) += lg.dX(t, c);
    }
  }
  return eval;
}

template <typename scalar_t>
ModelGrads<scalar_t> zero_model_grads(const ToyModel<scalar_t>& m) {
  ModelGrads<scalar_t> g;
  g.emb = Mat<scalar_t>(m.vocab, m.cfg.d_model);
  g.readout = Mat<scalar_t>(m.vocab, m.cfg.d_model);
  g.layer.wq = zeros_like(m.layer.wq);
  g.layer.wk = zeros_like(m.layer.wk);
  g.layer.wv = zeros_like(m.layer.wv);
  g.layer.wb = zeros_like(m.layer.wb);
  g.layer.ww = zeros_like(m.layer.ww);
  g.layer.wf = zeros_like(m.layer.wf);
  g.layer.a.assign(m.layer.a.size(), scalar_t(0));
  g.layer.delta.assign(m.layer.delta.size(), scalar_t(0));
  g.layer.wgate = zeros_like(m.layer.wgate);
  g.layer.wo = zeros_like(m.layer.wo);
  g.layer.conv_q = zeros_like(m.layer.conv_q);
  g.layer.conv_k = zeros_like(m.layer.conv_k);
  g.layer.conv_v = zeros_like(m.layer.conv_v);
  g.layer.rms = zeros_like(m.layer.rms);
  g.layer.dX = Mat<scalar_t>(0, 0);
  return g;
}

template <typename scalar_t>
void accumulate_layer_grads(LayerGrads<scalar_t>& into, const LayerGrads<scalar_t>& g) {
  const auto add = [](Mat<scalar_t>& dst, const Mat<scalar_t>& src) {
    for (index_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
  };
  add(into.wq, g.wq);
  add(into.wk, g.wk);
  add(into.wv, g.wv);
  add(into.wb, g.wb);
  add(into.ww, g.ww);
  add(into.wf, g.wf);
  for (std::size_t i = 0; i < into.a.size(); ++i) into.a[i] += g.a[i];
  for (std::size_t i = 0; i < into.delta.size(); ++i) into.delta[i] += g.delta[i];
  add(into.wgate, g.wgate);
  add(into.wo, g.wo);
  add(into.conv_q, g.conv_q);
  add(into.conv_k, g.conv_k);
  add(into.conv_v, g.conv_v);
  add(into.rms, g.rms);
}

// Plain gradient descent over every tensor.
template <typename scalar_t>
void sgd_update(ToyModel<scalar_t>& m, const ModelGrads<scalar_t>& g, double lr) {
  const auto upd = [lr](Mat<scalar_t>& w, const Mat<scalar_t>& dw) {
    for (index_t i = 0; i < w.size(); ++i)
      w.data[i] -= static_cast<scalar_t>(lr * static_cast<double>(dw.data[i]));
  };
  upd(m.emb, g.emb);
  upd(m.readout, g.readout);
  upd(m.layer.wq, g.layer.wq);
  upd(m.layer.wk, g.layer.wk);
  upd(m.layer.wv, g.layer.wv);
  upd(m.layer.wb, g.layer.wb);
  upd(m.layer.ww, g.layer.ww);
  upd(m.layer.wf, g.layer.wf);
  for (std::size_t i = 0; i < m.layer.a.size(); ++i)
    m.layer.a[i] -= static_cast<scalar_t>(lr * static_cast<double>(g.layer.a[i]));
  for (std::size_t i = 0; i < m.layer.delta.size(); ++i)
    m.layer.delta[i] -= static_cast<scalar_t>(lr * static_cast<double>(g.layer.delta[i]));
  upd(m.layer.wgate, g.layer.wgate);
  upd(m.layer.wo, g.layer.wo);
  upd(m.layer.conv_q, g.layer.conv_q);
  upd(m.layer.conv_k, g.layer.conv_k);
  upd(m.layer.conv_v, g.layer.conv_v);
  upd(m.layer.rms, g.layer.rms);
}

// Synthetic recall: key tokens are [0, pairs), value tokens [pairs, vocab).
// The pair list is shown in fresh random orders until one token before the
// end; the last token repeats one key and the label is its bound value.
struct RecallSample {
  std::vector<index_t> tokens;
  index_t target = 0;
};

inline RecallSample make_recall_sequence(Rng& rng, index_t vocab, index_t pairs, index_t L) {
  check_contract(vocab > pairs, "recall: vocabulary must exceed the key count");
  check_contract(L >= 2 * pairs + 1, "recall: sequence too short for the pair list");
  RecallSample s;
  std::vector<index_t> value_of(static_cast<std::size_t>(pairs));
  for (index_t i = 0; i < pairs; ++i)
    value_of[static_cast<std::size_t>(i)] =
        pairs + static_cast<index_t>(rng.next_u64() % static_cast<std::uint64_t>(vocab - pairs));

  std::vector<index_t> order(static_cast<std::size_t>(pairs));
  for (index_t i = 0; i < pairs; ++i) order[static_cast<std::size_t>(i)] = i;
  const auto shuffle = [&]() {
    for (index_t i = pairs - 1; i > 0; --i) {
      const index_t j =
          static_cast<index_t>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
  };

  s.tokens.reserve(static_cast<std::size_t>(L));
  while (static_cast<index_t>(s.tokens.size()) < L - 1) {
    shuffle();
    for (index_t i = 0; i < pairs && static_cast<index_t>(s.tokens.size()) < L - 1; ++i) {
      const index_t key = order[static_cast<std::size_t>(i)];
      s.tokens.push_back(key);
      if (static_cast<index_t>(s.tokens.size()) < L - 1)
        s.tokens.push_back(value_of[static_cast<std::size_t>(key)]);
    }
  }
  const index_t query =
      static_cast<index_t>(rng.next_u64() % static_cast<std::uint64_t>(pairs));
  s.tokens.push_back(query);
  s.target = value_of[static_cast<std::size_t>(query)];
  return s;
}

// Greedy autoregressive decoding through the recurrent kernel: the prompt is
// consumed token by token, then each next token is the readout argmax.
template <typename scalar_t>
struct DecodeRun {
  std::vector<index_t> generated;
  DecodeState<scalar_t> state;
};

template <typename scalar_t>
DecodeRun<scalar_t> greedy_decode(const ToyModel<scalar_t>& m,
                                  const std::vector<index_t>& prompt, index_t steps) {
  check_contract(!prompt.empty(), "greedy_decode: empty prompt");
  DecodeRun<scalar_t> run;
  run.state = fresh_decode_state<scalar_t>(m.cfg);

  Vec<scalar_t> y;
  const auto feed = [&](index_t tok) {
    check_contract(tok >= 0 && tok < m.vocab, "greedy_decode: token out of vocabulary");
    Vec<scalar_t> x(static_cast<std::size_t>(m.cfg.d_model));
    for (index_t c = 0; c < m.cfg.d_model; ++c) x[static_cast<std::size_t>(c)] = m.emb(tok, c);
    y = decode_step(m.layer, m.cfg, run.state, x);
  };
  for (index_t tok : prompt) feed(tok);
  for (index_t i = 0; i < steps; ++i) {
    index_t best = 0;
    double best_logit = -1e300;
    for (index_t v = 0; v < m.vocab; ++v) {
      double logit = 0.0;
      for (index_t c = 0; c < m.cfg.d_model; ++c)
        logit += static_cast<double>(m.readout(v, c)) * static_cast<double>(y[static_cast<std::size_t>(c)]);
      if (logit > best_logit) {
        best_logit = logit;
        best = v;
      }
    }
    run.generated.push_back(best);
    feed(best);
  }
  return run;
}

// --- checkpoint format -------------------------------------------------------

template <typename scalar_t>
std::vector<NamedTensor> model_to_tensors(const ToyModel<scalar_t>& m) {
  std::vector<NamedTensor> ts;
  ts.push_back(make_tensor("emb", m.emb));
  ts.push_back(make_tensor("wq", m.layer.wq));
  ts.push_back(make_tensor("wk", m.layer.wk));
  ts.push_back(make_tensor("wv", m.layer.wv));
  ts.push_back(make_tensor("wb", m.layer.wb));
  ts.push_back(make_tensor("ww", m.layer.ww));
  ts.push_back(make_tensor("wf", m.layer.wf));
  ts.push_back(make_tensor("a", m.layer.a));
  ts.push_back(make_tensor("delta", m.layer.delta));
  ts.push_back(make_tensor("wgate", m.layer.wgate));
  ts.push_back(make_tensor("wo", m.layer.wo));
  ts.push_back(make_tensor("conv_q", m.layer.conv_q));
  ts.push_back(make_tensor("conv_k", m.layer.conv_k));
  ts.push_back(make_tensor("conv_v", m.layer.conv_v));
  ts.push_back(make_tensor("rms", m.layer.rms));
  ts.push_back(make_tensor("readout", m.readout));
  return ts;
}

template <typename scalar_t>
ToyModel<scalar_t> model_from_tensors(const LayerConfig& cfg,
                                      const std::vector<NamedTensor>& ts) {
  const auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const NamedTensor& t : ts)
      if (t.name == name) return t;
    throw ParseError("checkpoint: missing tensor '" + name + "'", 0);
  };
  ToyModel<scalar_t> m;
  m.cfg = cfg;
  m.emb = tensor_to_mat<scalar_t>(find("emb"));
  m.vocab = m.emb.rows;
  m.layer.wq = tensor_to_mat<scalar_t>(find("wq"));
  m.layer.wk = tensor_to_mat<scalar_t>(find("wk"));
  m.layer.wv = tensor_to_mat<scalar_t>(find("wv"));
  m.layer.wb = tensor_to_mat<scalar_t>(find("wb"));
  m.layer.ww = tensor_to_mat<scalar_t>(find("ww"));
  m.layer.wf = tensor_to_mat<scalar_t>(find("wf"));
  m.layer.a = tensor_to_vec<scalar_t>(find("a"));
  m.layer.delta = tensor_to_vec<scalar_t>(find("delta"));
  m.layer.wgate = tensor_to_mat<scalar_t>(find("wgate"));
  m.layer.wo = tensor_to_mat<scalar_t>(find("wo"));
  m.layer.conv_q = tensor_to_mat<scalar_t>(find("conv_q"));
  m.layer.conv_k = tensor_to_mat<scalar_t>(find("conv_k"));
  m.layer.conv_v = tensor_to_mat<scalar_t>(find("conv_v"));
  m.layer.rms = tensor_to_mat<scalar_t>(find("rms"));
  m.readout = tensor_to_mat<scalar_t>(find("readout"));
  return m;
}

}  // namespace gdr2
