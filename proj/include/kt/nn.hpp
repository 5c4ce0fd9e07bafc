#pragma once

// Dense kernels for a single-layer GRU sequence model: embedding lookup, GRU
// recurrence with its backward pass, sigmoid readout, masked binary
// cross-entropy, global-norm clipping and Adam. Everything is templated on
// the scalar type; training runs in double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kt/util.hpp"

namespace kt::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <std::floating_point Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return sigmoid(v); });
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw RuntimeFailure("non-finite values in " + what);
}

/// Row t of the result is row indices[t] of the table. Out-of-range indices
/// are an error, never clamped.
template <typename Scalar>
Mat<Scalar> embed_lookup(std::span<const int> indices, const Mat<Scalar>& table) {
  Mat<Scalar> out(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t t = 0; t < indices.size(); ++t) {
    const int idx = indices[t];
    if (idx < 0 || idx >= table.rows()) {
      throw std::out_of_range("embedding index " + std::to_string(idx) + " outside [0, " +
                              std::to_string(table.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(t)) = table.row(idx);
  }
  return out;
}

/// Accumulates the gradient of embed_lookup into grad_table.
template <typename Scalar>
void embed_backward(std::span<const int> indices, const Mat<Scalar>& grad_out,
                    Mat<Scalar>& grad_table) {
  for (std::size_t t = 0; t < indices.size(); ++t) {
    grad_table.row(indices[t]) += grad_out.row(static_cast<Eigen::Index>(t));
  }
}

/// Input-to-hidden weights are d_in x d_h, hidden-to-hidden d_h x d_h, and
/// activations are row vectors (one row per batch element).
template <typename Scalar>
struct GruParams {
  Mat<Scalar> Wz, Wr, Wh;
  Mat<Scalar> Uz, Ur, Uh;
  Mat<Scalar> bz, br, bh;  // 1 x d_h

  static GruParams zeros(Eigen::Index d_in, Eigen::Index d_h) {
    GruParams p;
    p.Wz = p.Wr = p.Wh = Mat<Scalar>::Zero(d_in, d_h);
    p.Uz = p.Ur = p.Uh = Mat<Scalar>::Zero(d_h, d_h);
    p.bz = p.br = p.bh = Mat<Scalar>::Zero(1, d_h);
    return p;
  }

  Eigen::Index input_dim() const { return Wz.rows(); }
  Eigen::Index hidden_dim() const { return Wz.cols(); }
};

/// Activations of one GRU step for a batch.
template <typename Scalar>
struct GruStep {
  Mat<Scalar> z, r, candidate, h;
};

/// One GRU cell application:
///   z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br)
///   c = tanh(x Wh + (r .* h) Uh + bh), h' = (1 - z) .* h + z .* c
template <typename Scalar>
GruStep<Scalar> gru_cell(const Mat<Scalar>& x, const Mat<Scalar>& h_prev,
                         const GruParams<Scalar>& p) {
  GruStep<Scalar> s;
  Mat<Scalar> a = x * p.Wz + h_prev * p.Uz;
  a.rowwise() += p.bz.row(0);
  s.z = sigmoid(a);
  a = x * p.Wr + h_prev * p.Ur;
  a.rowwise() += p.br.row(0);
  s.r = sigmoid(a);
  Mat<Scalar> gated = s.r.cwiseProduct(h_prev);
  a = x * p.Wh + gated * p.Uh;
  a.rowwise() += p.bh.row(0);
  s.candidate = a.array().tanh().matrix();
  s.h = (Scalar(1) - s.z.array()).matrix().cwiseProduct(h_prev) + s.z.cwiseProduct(s.candidate);
  return s;
}

/// Forward intermediates of a GRU run over T steps; h has T + 1 entries
/// (h[0] is the initial state).
template <typename Scalar>
struct GruTape {
  std::vector<Mat<Scalar>> x;
  std::vector<Mat<Scalar>> h;
  std::vector<Mat<Scalar>> z, r, candidate;

  std::size_t steps() const { return x.size(); }
};

/// Runs the recurrence over inputs[t] (each batch x d_in). Implemented as a
/// loop of gru_cell, so T steps and T single applications agree bit for bit.
template <typename Scalar>
GruTape<Scalar> gru_forward(std::vector<Mat<Scalar>> inputs, const GruParams<Scalar>& p,
                            const Mat<Scalar>& h0) {
  GruTape<Scalar> tape;
  tape.h.reserve(inputs.size() + 1);
  tape.h.push_back(h0);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (inputs[t].cols() != p.input_dim() || inputs[t].rows() != h0.rows()) {
      throw std::invalid_argument("gru_forward: input shape mismatch at step " + std::to_string(t));
    }
    if (!inputs[t].allFinite()) {
      throw RuntimeFailure("gru_forward: non-finite input at step " + std::to_string(t));
    }
    auto s = gru_cell(inputs[t], tape.h.back(), p);
    if (!s.h.allFinite()) {
      throw RuntimeFailure("gru_forward: non-finite hidden state at step " + std::to_string(t));
    }
    tape.z.push_back(std::move(s.z));
    tape.r.push_back(std::move(s.r));
    tape.candidate.push_back(std::move(s.candidate));
    tape.h.push_back(std::move(s.h));
  }
  tape.x = std::move(inputs);
  return tape;
}

/// Single-sequence form: rows of x_emb are time steps; returns T x d_h.
template <typename Scalar>
Mat<Scalar> gru_forward(const Mat<Scalar>& x_emb, const GruParams<Scalar>& p,
                        const RowVec<Scalar>& h0) {
  std::vector<Mat<Scalar>> inputs;
  inputs.reserve(static_cast<std::size_t>(x_emb.rows()));
  for (Eigen::Index t = 0; t < x_emb.rows(); ++t) inputs.emplace_back(x_emb.row(t));
  auto tape = gru_forward(std::move(inputs), p, Mat<Scalar>(h0));
  Mat<Scalar> out(x_emb.rows(), p.hidden_dim());
  for (Eigen::Index t = 0; t < x_emb.rows(); ++t) out.row(t) = tape.h[static_cast<std::size_t>(t) + 1];
  return out;
}

/// Backpropagation through time. grad_h[t] is dL/dh_{t+1} coming from the
/// readout (not including the recurrent path). Accumulates parameter
/// gradients into grads and returns dL/dx per step.
template <typename Scalar>
std::vector<Mat<Scalar>> gru_backward(const GruTape<Scalar>& tape, const GruParams<Scalar>& p,
                                      const std::vector<Mat<Scalar>>& grad_h,
                                      GruParams<Scalar>& grads) {
  const std::size_t T = tape.steps();
  std::vector<Mat<Scalar>> grad_x(T);
  if (T == 0) return grad_x;
  Mat<Scalar> carry = Mat<Scalar>::Zero(tape.h[0].rows(), p.hidden_dim());
  for (std::size_t k = T; k-- > 0;) {
    const Mat<Scalar>& h_prev = tape.h[k];
    const Mat<Scalar>& z = tape.z[k];
    const Mat<Scalar>& r = tape.r[k];
    const Mat<Scalar>& c = tape.candidate[k];
    const Mat<Scalar>& x = tape.x[k];

    Mat<Scalar> dh = grad_h[k] + carry;
    Mat<Scalar> dz = dh.cwiseProduct(c - h_prev);
    Mat<Scalar> dc = dh.cwiseProduct(z);
    Mat<Scalar> dh_prev = dh.cwiseProduct((Scalar(1) - z.array()).matrix());

    Mat<Scalar> dac = dc.cwiseProduct((Scalar(1) - c.array().square()).matrix());
    Mat<Scalar> gated = r.cwiseProduct(h_prev);
    grads.Wh.noalias() += x.transpose() * dac;
    grads.Uh.noalias() += gated.transpose() * dac;
    grads.bh += dac.colwise().sum();
    Mat<Scalar> dgated = dac * p.Uh.transpose();
    Mat<Scalar> dr = dgated.cwiseProduct(h_prev);
    dh_prev += dgated.cwiseProduct(r);

    Mat<Scalar> dar = dr.cwiseProduct(r.cwiseProduct((Scalar(1) - r.array()).matrix()));
    grads.Wr.noalias() += x.transpose() * dar;
    grads.Ur.noalias() += h_prev.transpose() * dar;
    grads.br += dar.colwise().sum();
    dh_prev.noalias() += dar * p.Ur.transpose();

    Mat<Scalar> daz = dz.cwiseProduct(z.cwiseProduct((Scalar(1) - z.array()).matrix()));
    grads.Wz.noalias() += x.transpose() * daz;
    grads.Uz.noalias() += h_prev.transpose() * daz;
    grads.bz += daz.colwise().sum();
    dh_prev.noalias() += daz * p.Uz.transpose();

    grad_x[k] = daz * p.Wz.transpose() + dar * p.Wr.transpose() + dac * p.Wh.transpose();
    carry = std::move(dh_prev);
  }
  return grad_x;
}

/// p_t = sigmoid(h_t W_out + b_out) for every row of h; b_out is 1 x K.
template <typename Scalar>
Mat<Scalar> readout(const Mat<Scalar>& h, const Mat<Scalar>& w_out, const Mat<Scalar>& b_out) {
  Mat<Scalar> logits = h * w_out;
  logits.rowwise() += b_out.row(0);
  Mat<Scalar> probs = sigmoid(logits);
  require_finite(probs, "readout");
  return probs;
}

template <typename Scalar>
struct ReadoutGrads {
  Mat<Scalar> w_out, b_out, h;
};

/// Backward of readout given dL/dp; probs are readout's outputs.
template <typename Scalar>
ReadoutGrads<Scalar> readout_backward(const Mat<Scalar>& h, const Mat<Scalar>& w_out,
                                      const Mat<Scalar>& probs, const Mat<Scalar>& grad_probs) {
  const Mat<Scalar> dlogits =
      grad_probs.cwiseProduct(probs.cwiseProduct((Scalar(1) - probs.array()).matrix()));
  return {h.transpose() * dlogits, dlogits.colwise().sum(), dlogits * w_out.transpose()};
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean binary cross-entropy over cells with mask == 1. Masked cells are
/// never read, so their contents cannot affect the result.
template <typename Scalar>
Scalar masked_bce(const Mat<Scalar>& p, const Mat<Scalar>& y, const Mat<Scalar>& mask) {
  using std::log;
  Scalar total(0);
  Scalar count(0);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index t = 0; t < p.cols(); ++t) {
      if (mask(i, t) == Scalar(0)) continue;
      const Scalar q = std::clamp(p(i, t), Scalar(kProbabilityFloor), Scalar(1 - kProbabilityFloor));
      total -= y(i, t) == Scalar(1) ? log(q) : log(Scalar(1) - q);
      count += Scalar(1);
    }
  }
  if (count == Scalar(0)) throw std::invalid_argument("masked_bce: no valid targets");
  return total / count;
}

/// dL/dp for masked_bce; exactly zero wherever mask == 0.
template <typename Scalar>
Mat<Scalar> masked_bce_grad(const Mat<Scalar>& p, const Mat<Scalar>& y, const Mat<Scalar>& mask) {
  const Scalar count = mask.sum();
  if (count == Scalar(0)) throw std::invalid_argument("masked_bce: no valid targets");
  Mat<Scalar> g = Mat<Scalar>::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index t = 0; t < p.cols(); ++t) {
      if (mask(i, t) == Scalar(0)) continue;
      const Scalar q = p(i, t);
      g(i, t) = (y(i, t) == Scalar(1) ? -Scalar(1) / q : Scalar(1) / (Scalar(1) - q)) / count;
    }
  }
  return g;
}

template <typename Scalar>
Scalar global_norm(std::span<Mat<Scalar>* const> tensors) {
  Scalar sq(0);
  for (const auto* t : tensors) sq += t->squaredNorm();
  return std::sqrt(sq);
}

/// Rescales all tensors by max_norm / norm when their joint L2 norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename Scalar>
Scalar clip_global_norm(std::span<Mat<Scalar>* const> grads, Scalar max_norm) {
  const Scalar norm = global_norm<Scalar>(grads);
  if (norm > max_norm) {
    const Scalar scale = max_norm / norm;
    for (auto* g : grads) *g *= scale;
  }
  return norm;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamState {
  AdamConfig config;
  std::vector<Mat<Scalar>> m, v;
  long step = 0;

  AdamState() = default;
  AdamState(const AdamConfig& cfg, std::span<Mat<Scalar>* const> params) : config(cfg) {
    for (const auto* p : params) {
      m.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
      v.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
};

/// Bias-corrected Adam step.
template <typename Scalar>
void adam_update(std::span<Mat<Scalar>* const> params, std::span<Mat<Scalar>* const> grads,
                 AdamState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_update: parameter/gradient/state count mismatch");
  }
  const auto& c = state.config;
  ++state.step;
  const Scalar b1 = Scalar(c.beta1), b2 = Scalar(c.beta2);
  const Scalar corr1 = Scalar(1) - std::pow(b1, Scalar(state.step));
  const Scalar corr2 = Scalar(1) - std::pow(b2, Scalar(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = *grads[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    params[i]->array() -= Scalar(c.learning_rate) * (m.array() / corr1) /
                          ((v.array() / corr2).sqrt() + Scalar(c.epsilon));
  }
}

/// Uniform(-a, a) with a = sqrt(6 / (rows + cols)).
template <typename Scalar>
void init_uniform_scaled(Mat<Scalar>& m, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = Scalar(rng.uniform(-a, a));
  }
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t tensor = 0;
  Eigen::Index row = 0, col = 0;
  double analytic = 0.0, numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients with central differences on every entry:
/// error = |a - n| / max(|a|, |n|, 1e-8).
template <typename Scalar>
GradCheckResult grad_check(std::span<Mat<Scalar>* const> params,
                           const std::vector<Mat<Scalar>>& analytic,
                           const std::function<Scalar()>& loss, Scalar eps) {
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat<Scalar>& p = *params[k];
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const Scalar orig = p(i, j);
        p(i, j) = orig + eps;
        const Scalar plus = loss();
        p(i, j) = orig - eps;
        const Scalar minus = loss();
        p(i, j) = orig;
        const double numeric = static_cast<double>((plus - minus) / (Scalar(2) * eps));
        const double a = static_cast<double>(analytic[k](i, j));
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double err = std::abs(a - numeric) / denom;
        ++res.checked;
        if (err > res.max_relative_error) {
          res.max_relative_error = err;
          res.tensor = k;
          res.row = i;
          res.col = j;
          res.analytic = a;
          res.numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace kt::nn
