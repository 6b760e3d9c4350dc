#pragma once

#include <functional>
#include <map>
#include <string>

#include "gdr2/backward.hpp"
#include "gdr2/oracle.hpp"

namespace gdr2 {

// Central differences with h = h_scale * max(1, |x|) on an arbitrary scalar
// objective. Used against the tokenwise reference, never the chunk engine.
inline double central_difference(const std::function<double(double)>& f, double x,
                                 double h_scale = 1e-5) {
  const double h = h_scale * std::max(1.0, std::abs(x));
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

template <typename scalar_t>
Mat<double> fd_grad_matrix(Mat<scalar_t>& target, const std::function<double()>& loss,
                           double h_scale = 1e-5) {
  Mat<double> grad(target.rows, target.cols);
  for (index_t i = 0; i < target.size(); ++i) {
    const double x0 = static_cast<double>(target.data[i]);
    grad.data[i] = central_difference(
        [&](double x) {
          target.data[i] = static_cast<scalar_t>(x);
          const double l = loss();
          target.data[i] = static_cast<scalar_t>(x0);
          return l;
        },
        x0, h_scale);
  }
  return grad;
}

// ||g_a - g_fd||_inf / max(||g_fd||_inf, 1e-12)
template <typename scalar_t>
double relative_grad_error(const Mat<scalar_t>& analytic, const Mat<double>& fd) {
  check_dim(analytic.rows == fd.rows && analytic.cols == fd.cols,
            "relative_grad_error: shape mismatch");
  double num = 0.0, den = 0.0;
  for (index_t i = 0; i < fd.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(analytic.data[i]) - fd.data[i]));
    den = std::max(den, std::abs(fd.data[i]));
  }
  return num / std::max(den, 1e-12);
}

struct GradCheckCase {
  index_t L = 12;
  index_t d_k = 4;
  index_t d_v = 4;
  index_t chunk_size = 16;
  bool nonzero_s0 = false;
  bool state_term = true;  // include 0.5||S_final||^2 in the loss
  WyAccum wy_accum = WyAccum::gate_aware;
};

// Per-tensor relative errors of the analytic chunkwise backward against
// finite differences of the tokenwise loss.
template <typename scalar_t>
std::map<std::string, double> grad_check(Rng& rng, const GradCheckCase& gc) {
  SeqInputs<scalar_t> in = random_seq_inputs<scalar_t>(rng, gc.L, gc.d_k, gc.d_v);
  Mat<scalar_t> s0(gc.d_k, gc.d_v);
  if (gc.nonzero_s0) s0 = random_uniform<scalar_t>(rng, gc.d_k, gc.d_v, -0.5, 0.5);

  EngineOptions<scalar_t> eopt;
  eopt.chunk_size = gc.chunk_size;
  ChunkedForward<scalar_t> fwd = forward_chunked(in, s0, eopt);

  BackwardOptions<scalar_t> bopt;
  bopt.wy_accum = gc.wy_accum;
  const Mat<scalar_t> dS = gc.state_term ? fwd.final_state
                                         : Mat<scalar_t>(gc.d_k, gc.d_v);
  const SeqGrads<scalar_t> grads = backward_chunked(fwd, fwd.outputs, dS, bopt);

  const auto loss = [&]() { return reference_loss(in, s0, gc.state_term); };
  std::map<std::string, double> err;
  err["dQ"] = relative_grad_error(grads.dQ, fd_grad_matrix(in.Q, loss));
  err["dK"] = relative_grad_error(grads.dK, fd_grad_matrix(in.K, loss));
  err["dV"] = relative_grad_error(grads.dV, fd_grad_matrix(in.V, loss));
  err["dB"] = relative_grad_error(grads.dB, fd_grad_matrix(in.B, loss));
  err["dW"] = relative_grad_error(grads.dW, fd_grad_matrix(in.W, loss));
  err["dG"] = relative_grad_error(grads.dG, fd_grad_matrix(in.G, loss));
  err["dS0"] = relative_grad_error(grads.dS0, fd_grad_matrix(s0, loss));
  return err;
}

}  // namespace gdr2
