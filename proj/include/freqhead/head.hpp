#pragma once

// Prediction head: final LayerNorm followed by the tied output projection
// (causal), or FC + GELU + LayerNorm + projection + per-token bias (masked).
// All functions are pure; interventions are applied at call time.

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "freqhead/error.hpp"
#include "freqhead/tensor.hpp"
#include "json.hpp"

namespace freqhead {

enum class Variant { causal, masked };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

/// Scaling of b_LN and toggles for the masked head's extra biases.
struct InterventionSpec {
  double lambda_ln = 1.0;
  bool use_b_fc = true;
  bool use_b_last = true;

  /// Same spec with lambda_ln clamped into [0, 1].
  InterventionSpec clamped() const;
  bool is_identity() const { return lambda_ln == 1.0 && use_b_fc && use_b_last; }

  static InterventionSpec with_lambda(double lambda) { return {lambda, true, true}; }
};

void to_json(nlohmann::json& j, const InterventionSpec& iv);
void from_json(const nlohmann::json& j, InterventionSpec& iv);

template <typename Real>
struct HeadParams {
  Variant variant = Variant::causal;
  Vector<Real> gamma;     // d
  Vector<Real> b_ln;      // d
  Matrix<Real> w_fc;      // d x d (input-major), masked only
  Vector<Real> b_fc;      // d, masked only
  Vector<Real> b_last;    // |V|, masked only
  double ln_epsilon = 1e-5;

  Eigen::Index dim() const { return gamma.size(); }

  void validate(Eigen::Index d, Eigen::Index vocab) const {
    if (gamma.size() != d || b_ln.size() != d) throw Error("head: LayerNorm shape mismatch");
    if (!(ln_epsilon > 0.0)) throw Error("head: ln_epsilon must be positive");
    if (variant == Variant::masked) {
      if (w_fc.rows() != d || w_fc.cols() != d || b_fc.size() != d || b_last.size() != vocab) {
        throw Error("head: masked head shape mismatch");
      }
    } else if (w_fc.size() != 0 || b_fc.size() != 0 || b_last.size() != 0) {
      throw Error("head: causal head must not carry FC or b_last");
    }
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// ((x - mean) / sqrt(var + eps)) * gamma + b, population variance.
template <typename Real>
Vector<Real> layer_norm(const Vector<Real>& x, const Vector<Real>& gamma,
                        const Vector<Real>& b, double eps) {
  const auto d = x.size();
  if (d < 2) throw Error("layer_norm: dimension must be at least 2");
  if (gamma.size() != d || b.size() != d) throw Error("layer_norm: shape mismatch");
  const Real mean = x.mean();
  const Vector<Real> centered = x.array() - mean;
  const Real var = centered.squaredNorm() / static_cast<Real>(d);
  const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(eps));
  return (centered.array() * rstd * gamma.array() + b.array()).matrix();
}

/// Row-wise LayerNorm without the additive bias: the head's hidden state
/// immediately before b_LN is added.
template <typename Real>
Matrix<Real> normalize_scale_rows(const Matrix<Real>& x, const Vector<Real>& gamma,
                                  double eps) {
  const auto d = x.cols();
  if (d < 2) throw Error("layer_norm: dimension must be at least 2");
  if (gamma.size() != d) throw Error("layer_norm: shape mismatch");
  Matrix<Real> out(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Real var = centered.matrix().squaredNorm() / static_cast<Real>(d);
    const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    out.row(r) = (centered * rstd * gamma.transpose().array()).matrix();
  }
  return out;
}

/// Hidden states right before b_LN is added, for each row of `x` (the last
/// transformer layer's output). For the masked head this includes FC+GELU.
template <typename Real>
Matrix<Real> head_pre_bias_rows(const Matrix<Real>& x, const HeadParams<Real>& head,
                                const InterventionSpec& iv = {}) {
  if (x.cols() != head.dim()) throw Error("head: hidden width mismatch");
  if (head.variant == Variant::causal) {
    return normalize_scale_rows(x, head.gamma, head.ln_epsilon);
  }
  Matrix<Real> u = x * head.w_fc;
  if (iv.use_b_fc) u.rowwise() += head.b_fc.transpose();
  u = u.unaryExpr([](Real v) { return static_cast<Real>(gelu(static_cast<double>(v))); });
  return normalize_scale_rows(u, head.gamma, head.ln_epsilon);
}

/// Logits for every row of `x`. `embedding` is |V| x d, row i = w_i.
template <typename Real>
Matrix<Real> head_logit_rows(const Matrix<Real>& x, const HeadParams<Real>& head,
                             const InterventionSpec& iv, const Matrix<Real>& embedding) {
  if (embedding.cols() != head.dim()) throw Error("head: embedding width mismatch");
  const InterventionSpec spec = iv.clamped();
  Matrix<Real> z = head_pre_bias_rows(x, head, spec);
  z.rowwise() += (head.b_ln * static_cast<Real>(spec.lambda_ln)).transpose();
  Matrix<Real> logits = z * embedding.transpose();
  if (head.variant == Variant::masked && spec.use_b_last) {
    logits.rowwise() += head.b_last.transpose();
  }
  return logits;
}

/// Row-wise softmax, normalizer accumulated in double.
template <typename Real>
Matrix<Real> softmax_rows(const Matrix<Real>& logits) {
  Matrix<Real> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Real mx = logits.row(r).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      z += std::exp(static_cast<double>(logits(r, c) - mx));
    }
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = static_cast<Real>(std::exp(static_cast<double>(logits(r, c) - mx)) / z);
    }
  }
  return out;
}

template <typename Real>
Matrix<Real> head_prob_rows(const Matrix<Real>& x, const HeadParams<Real>& head,
                            const InterventionSpec& iv, const Matrix<Real>& embedding) {
  return softmax_rows(head_logit_rows(x, head, iv, embedding));
}

/// softmax(LN(x; gamma, lambda * b_LN) W_emb).
template <typename Real>
Vector<Real> predict_causal(const Vector<Real>& x, const HeadParams<Real>& head,
                            const InterventionSpec& iv, const Matrix<Real>& embedding) {
  if (head.variant != Variant::causal) throw Error("predict_causal: head is not causal");
  if (x.size() != head.dim()) throw Error("predict_causal: shape mismatch");
  return head_prob_rows<Real>(x.transpose(), head, iv, embedding).row(0).transpose();
}

/// softmax(LN(GELU(x W_FC + b_FC)) W_emb + b_last), with biases toggled by iv.
template <typename Real>
Vector<Real> predict_masked(const Vector<Real>& x, const HeadParams<Real>& head,
                            const InterventionSpec& iv, const Matrix<Real>& embedding) {
  if (head.variant != Variant::masked) throw Error("predict_masked: head is not masked");
  if (x.size() != head.dim()) throw Error("predict_masked: shape mismatch");
  return head_prob_rows<Real>(x.transpose(), head, iv, embedding).row(0).transpose();
}

/// Materializes the intervention: b_LN scaled, disabled biases zeroed.
template <typename Real>
HeadParams<Real> apply_intervention(const HeadParams<Real>& head, const InterventionSpec& iv) {
  const InterventionSpec spec = iv.clamped();
  HeadParams<Real> out = head;
  if (spec.lambda_ln != 1.0) out.b_ln = head.b_ln * static_cast<Real>(spec.lambda_ln);
  if (head.variant == Variant::masked) {
    if (!spec.use_b_fc) out.b_fc.setZero();
    if (!spec.use_b_last) out.b_last.setZero();
  }
  return out;
}

}  // namespace freqhead
