#pragma once

// Codebook-guided attention: rendered LD features are projected to queries,
// codebook rows to keys, and the retrieved language feature is the
// attention-weighted sum of unit-normalized codebook rows.

#include "common.hpp"

namespace gaff {

template <typename S>
struct AttentionHead {
  Mat<S> wq;  // d_h x d
  Vec<S> bq;  // d_h
  Mat<S> wk;  // d_h x D
  Vec<S> bk;  // d_h
  Mat<S> codebook;  // N_c x D

  int hidden_dim() const { return static_cast<int>(wq.rows()); }
  int query_dim() const { return static_cast<int>(wq.cols()); }
  int language_dim() const { return static_cast<int>(wk.cols()); }
  int entries() const { return static_cast<int>(codebook.rows()); }

  template <typename T>
  AttentionHead<T> cast() const {
    return {wq.template cast<T>(), bq.template cast<T>(), wk.template cast<T>(), bk.template cast<T>(),
            codebook.template cast<T>()};
  }

  bool all_finite() const {
    return wq.allFinite() && bq.allFinite() && wk.allFinite() && bk.allFinite() && codebook.allFinite();
  }
};

// Xavier-uniform projections with zero biases around a given codebook.
template <typename S = float>
AttentionHead<S> init_attention(std::uint64_t seed, int d, int hidden, const Mat<S>& codebook) {
  require(d > 0 && hidden > 0, "init_attention: dimensions must be positive");
  require(codebook.rows() > 0, "init_attention: empty codebook");
  Rng rng(derive_seed(seed, "attention/init"));
  auto fill = [&](Mat<S>& m, Eigen::Index rows, Eigen::Index cols) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(rng.uniform(-a, a));
  };
  AttentionHead<S> h;
  fill(h.wq, hidden, d);
  fill(h.wk, hidden, codebook.cols());
  h.bq = Vec<S>::Zero(hidden);
  h.bk = Vec<S>::Zero(hidden);
  h.codebook = codebook;
  return h;
}

template <typename S>
struct AttentionOutput {
  Mat<S> weights;  // N x N_c, rows sum to 1
  Mat<S> lhat;     // N x D

  // Backward cache.
  Mat<S> queries_in;  // N x d
  Mat<S> q;           // N x d_h
  Mat<S> k;           // N_c x d_h
  Mat<S> v;           // N_c x D, unit rows
  Vec<S> row_norms;   // N_c, codebook row norms
};

// Row-wise unit normalization of the codebook.
template <typename S>
Mat<S> normalize_rows(const Mat<S>& m, Vec<S>* norms = nullptr) {
  Mat<S> out = m;
  Vec<S> n(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    n[i] = m.row(i).norm();
    require(n[i] > S(0), "attention: zero codebook row " + std::to_string(i));
    out.row(i) /= n[i];
  }
  if (norms) *norms = n;
  return out;
}

template <typename S>
void softmax_rows(Mat<S>& logits) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

// A = softmax(Q(M) K(S)^T / sqrt(d_h)), Lhat = A V(S).
template <typename S>
AttentionOutput<S> attention_forward(const AttentionHead<S>& head, const Mat<S>& queries) {
  require(head.entries() > 0, "attention: empty codebook");
  require(queries.cols() == head.query_dim(), "attention: query width " + std::to_string(queries.cols()) +
                                                  " does not match the head (" +
                                                  std::to_string(head.query_dim()) + ")");
  require(head.codebook.cols() == head.language_dim(), "attention: codebook width does not match the key projection");
  AttentionOutput<S> out;
  out.queries_in = queries;
  out.q = (queries * head.wq.transpose()).rowwise() + head.bq.transpose();
  out.k = (head.codebook * head.wk.transpose()).rowwise() + head.bk.transpose();
  out.v = normalize_rows(head.codebook, &out.row_norms);
  out.weights = out.q * out.k.transpose() / std::sqrt(S(head.hidden_dim()));
  softmax_rows(out.weights);
  out.lhat = out.weights * out.v;
  return out;
}

// Mean row entropy (natural log, 0 log 0 = 0).
template <typename S>
S entropy_loss(const Mat<S>& weights) {
  if (weights.rows() == 0) return S(0);
  S total = S(0);
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const S a = weights.data()[i];
    if (a > S(0)) total -= a * std::log(a);
  }
  return total / S(weights.rows());
}

template <typename S>
struct AttentionGrads {
  Mat<S> wq, wk;
  Vec<S> bq, bk;
  Mat<S> queries;   // N x d
  Mat<S> codebook;  // N_c x D, zero when codebook gradients are off
};

// Adjoint of attention_forward for upstream dL/dLhat plus
// lambda_entropy * entropy_loss(A) added inside.
template <typename S>
AttentionGrads<S> attention_backward(const AttentionHead<S>& head, const AttentionOutput<S>& out,
                                     const Mat<S>& grad_lhat, S lambda_entropy, bool codebook_grads = true) {
  if (out.q.rows() != out.weights.rows() || out.v.rows() == 0)
    throw ValidationError("attention_backward: forward cache missing");
  require(grad_lhat.rows() == out.lhat.rows() && grad_lhat.cols() == out.lhat.cols(),
          "attention_backward: gradient shape mismatch");
  const Eigen::Index n = out.weights.rows();
  const S inv_sqrt = S(1) / std::sqrt(S(head.hidden_dim()));

  Mat<S> grad_a = grad_lhat * out.v.transpose();
  if (lambda_entropy != S(0) && n > 0) {
    const S scale = -lambda_entropy / S(n);
    for (Eigen::Index i = 0; i < grad_a.size(); ++i) {
      const S a = out.weights.data()[i];
      if (a > S(0)) grad_a.data()[i] += scale * (std::log(a) + S(1));
    }
  }
  // Softmax adjoint per row.
  Mat<S> grad_z(grad_a.rows(), grad_a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const S inner = out.weights.row(i).dot(grad_a.row(i));
    grad_z.row(i) = out.weights.row(i).cwiseProduct((grad_a.row(i).array() - inner).matrix());
  }
  const Mat<S> grad_q = grad_z * out.k * inv_sqrt;
  const Mat<S> grad_k = grad_z.transpose() * out.q * inv_sqrt;

  AttentionGrads<S> g;
  g.wq = grad_q.transpose() * out.queries_in;
  g.bq = grad_q.colwise().sum().transpose();
  g.queries = grad_q * head.wq;
  g.wk = grad_k.transpose() * head.codebook;
  g.bk = grad_k.colwise().sum().transpose();
  if (codebook_grads) {
    g.codebook = grad_k * head.wk;
    const Mat<S> grad_v = out.weights.transpose() * grad_lhat;
    for (Eigen::Index j = 0; j < out.v.rows(); ++j) {
      const S radial = out.v.row(j).dot(grad_v.row(j));
      g.codebook.row(j) += (grad_v.row(j) - radial * out.v.row(j)) / out.row_norms[j];
    }
  } else {
    g.codebook = Mat<S>::Zero(head.codebook.rows(), head.codebook.cols());
  }
  return g;
}

// Language features of individual splats: the attention applied directly to
// their LD features instead of to a rendered map.
template <typename S>
Mat<S> per_gaussian_language(const AttentionHead<S>& head, const Mat<S>& splat_features) {
  if (splat_features.rows() == 0) return Mat<S>(0, head.language_dim());
  return attention_forward(head, splat_features).lhat;
}

}  // namespace gaff
