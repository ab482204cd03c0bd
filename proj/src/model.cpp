#include "freqhead/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "freqhead/error.hpp"
#include "freqhead/numeric.hpp"
#include "freqhead/rng.hpp"

namespace freqhead {

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (d_model < 2 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1 ||
      vocab_size < 1) {
    throw Error("model config: all dimensions must be >= 1 (d_model >= 2)");
  }
  if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
  if (!(ln_epsilon > 0.0)) throw Error("model config: ln_epsilon must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", std::string(to_string(c.variant))},
                     {"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"max_seq_len", c.max_seq_len},
                     {"vocab_size", c.vocab_size},
                     {"ln_epsilon", c.ln_epsilon}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("d_model")) c.d_model = j.at("d_model").get<int>();
  if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<int>();
  if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int>();
  if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<int>();
  if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<int>();
  if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<int>();
  if (j.contains("ln_epsilon")) c.ln_epsilon = j.at("ln_epsilon").get<double>();
}

void TrainConfig::validate() const {
  if (steps < 0) throw Error("train config: steps must be >= 0");
  if (batch_size < 1 || seq_len < 1) throw Error("train config: batch_size and seq_len must be >= 1");
  if (!(lr >= 0.0)) throw Error("train config: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error("train config: moment decay rates must lie in [0, 1)");
  }
  if (!(clip_norm > 0.0)) throw Error("train config: clip_norm must be positive");
  if (eval_every < 1) throw Error("train config: eval_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"seq_len", c.seq_len},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"clip_norm", c.clip_norm},
                     {"warmup_steps", c.warmup_steps},
                     {"cosine_decay", c.cosine_decay},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"eval_mask_seed", c.eval_mask_seed},
                     {"select_rate", c.masking.select_rate},
                     {"mask_frac", c.masking.mask_frac},
                     {"random_frac", c.masking.random_frac}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("steps", c.steps);
  get("batch_size", c.batch_size);
  get("seq_len", c.seq_len);
  get("lr", c.lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("clip_norm", c.clip_norm);
  get("warmup_steps", c.warmup_steps);
  get("cosine_decay", c.cosine_decay);
  get("seed", c.seed);
  get("eval_every", c.eval_every);
  get("eval_mask_seed", c.eval_mask_seed);
  get("select_rate", c.masking.select_rate);
  get("mask_frac", c.masking.mask_frac);
  get("random_frac", c.masking.random_frac);
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Real>
ModelParams<Real> ModelParams<Real>::zeros(const ModelConfig& config) {
  config.validate();
  const Eigen::Index d = config.d_model, ff = config.d_ff, v = config.vocab_size;
  ModelParams p;
  p.config = config;
  p.embedding = Matrix<Real>::Zero(v, d);
  p.positions = Matrix<Real>::Zero(config.max_seq_len, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& l : p.layers) {
    l.ln1_gamma = Vector<Real>::Zero(d);
    l.ln1_beta = Vector<Real>::Zero(d);
    l.w_qkv = Matrix<Real>::Zero(d, 3 * d);
    l.b_qkv = Vector<Real>::Zero(3 * d);
    l.w_attn_out = Matrix<Real>::Zero(d, d);
    l.b_attn_out = Vector<Real>::Zero(d);
    l.ln2_gamma = Vector<Real>::Zero(d);
    l.ln2_beta = Vector<Real>::Zero(d);
    l.w_fc = Matrix<Real>::Zero(d, ff);
    l.b_fc = Vector<Real>::Zero(ff);
    l.w_proj = Matrix<Real>::Zero(ff, d);
    l.b_proj = Vector<Real>::Zero(d);
  }
  p.head.variant = config.variant;
  p.head.ln_epsilon = config.ln_epsilon;
  p.head.gamma = Vector<Real>::Zero(d);
  p.head.b_ln = Vector<Real>::Zero(d);
  if (config.variant == Variant::masked) {
    p.head.w_fc = Matrix<Real>::Zero(d, d);
    p.head.b_fc = Vector<Real>::Zero(d);
    p.head.b_last = Vector<Real>::Zero(v);
  }
  return p;
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros(config);
  Rng rng(seed);
  const double std_dev = 0.02;
  const double resid_std = std_dev / std::sqrt(2.0 * config.n_layers);
  const auto fill = [&](auto& m, double s) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(rng.normal() * s);
  };
  fill(p.embedding, std_dev);
  fill(p.positions, std_dev / 2.0);
  for (auto& l : p.layers) {
    l.ln1_gamma.setOnes();
    l.ln2_gamma.setOnes();
    fill(l.w_qkv, std_dev);
    fill(l.w_attn_out, resid_std);
    fill(l.w_fc, std_dev);
    fill(l.w_proj, resid_std);
  }
  p.head.gamma.setOnes();
  if (config.variant == Variant::masked) fill(p.head.w_fc, std_dev);
  return p;
}

namespace {

template <typename Real, typename M>
TensorView<Real> view(std::string name, M& m, std::vector<std::int64_t> shape) {
  return {std::move(name), std::span<Real>(m.data(), static_cast<std::size_t>(m.size())),
          std::move(shape)};
}

template <typename Real, typename P>
std::vector<TensorView<Real>> collect(P& p) {
  const std::int64_t d = p.config.d_model, ff = p.config.d_ff, v = p.config.vocab_size;
  std::vector<TensorView<Real>> out;
  out.push_back(view<Real>("embedding", p.embedding, {v, d}));
  out.push_back(view<Real>("positions", p.positions, {p.config.max_seq_len, d}));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.push_back(view<Real>(pre + "ln1_gamma", l.ln1_gamma, {d}));
    out.push_back(view<Real>(pre + "ln1_beta", l.ln1_beta, {d}));
    out.push_back(view<Real>(pre + "w_qkv", l.w_qkv, {d, 3 * d}));
    out.push_back(view<Real>(pre + "b_qkv", l.b_qkv, {3 * d}));
    out.push_back(view<Real>(pre + "w_attn_out", l.w_attn_out, {d, d}));
    out.push_back(view<Real>(pre + "b_attn_out", l.b_attn_out, {d}));
    out.push_back(view<Real>(pre + "ln2_gamma", l.ln2_gamma, {d}));
    out.push_back(view<Real>(pre + "ln2_beta", l.ln2_beta, {d}));
    out.push_back(view<Real>(pre + "w_fc", l.w_fc, {d, ff}));
    out.push_back(view<Real>(pre + "b_fc", l.b_fc, {ff}));
    out.push_back(view<Real>(pre + "w_proj", l.w_proj, {ff, d}));
    out.push_back(view<Real>(pre + "b_proj", l.b_proj, {d}));
  }
  out.push_back(view<Real>("head.gamma", p.head.gamma, {d}));
  out.push_back(view<Real>("head.b_ln", p.head.b_ln, {d}));
  if (p.config.variant == Variant::masked) {
    out.push_back(view<Real>("head.w_fc", p.head.w_fc, {d, d}));
    out.push_back(view<Real>("head.b_fc", p.head.b_fc, {d}));
    out.push_back(view<Real>("head.b_last", p.head.b_last, {v}));
  }
  return out;
}

}  // namespace

template <typename Real>
std::vector<TensorView<Real>> ModelParams<Real>::tensors() {
  return collect<Real>(*this);
}

template <typename Real>
std::vector<TensorView<const Real>> ModelParams<Real>::tensors() const {
  return collect<const Real>(*this);
}

template <typename Real>
std::size_t ModelParams<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.data.size();
  return n;
}

template <typename Real>
bool ModelParams<Real>::all_finite() const {
  for (const auto& t : tensors()) {
    for (Real v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template <typename Real>
void ModelParams<Real>::validate() const {
  config.validate();
  const ModelParams ref = zeros(config);
  const auto mine = tensors();
  const auto want = ref.tensors();
  if (mine.size() != want.size()) throw Error("model params: tensor count mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].data.size() != want[i].data.size()) {
      throw Error("model params: shape mismatch for " + want[i].name);
    }
  }
  head.validate(config.d_model, config.vocab_size);
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out = ModelParams<To>::zeros(p.config);
  auto dst = out.tensors();
  const auto src = p.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t k = 0; k < dst[i].data.size(); ++k) {
      dst[i].data[k] = static_cast<To>(src[i].data[k]);
    }
  }
  out.head.ln_epsilon = p.head.ln_epsilon;
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels

namespace {

template <typename Real>
void ln_forward(const Matrix<Real>& x, const Vector<Real>& gamma, const Vector<Real>& beta,
                double eps, Matrix<Real>& y, Matrix<Real>& xhat, Vector<Real>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Real mean = x.row(r).mean();
    xhat.row(r) = x.row(r).array() - mean;
    const Real var = xhat.row(r).squaredNorm() / static_cast<Real>(d);
    rstd(r) = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    xhat.row(r) *= rstd(r);
    y.row(r) = xhat.row(r).array() * gamma.transpose().array() + beta.transpose().array();
  }
}

// Accumulates into dx, dgamma, dbeta.
template <typename Real>
void ln_backward(const Matrix<Real>& dy, const Matrix<Real>& xhat, const Vector<Real>& rstd,
                 const Vector<Real>& gamma, Matrix<Real>& dx, Vector<Real>& dgamma,
                 Vector<Real>& dbeta) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  dgamma += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  dbeta += dy.colwise().sum().transpose();
  for (Eigen::Index r = 0; r < n; ++r) {
    const RowVector<Real> dxhat = dy.row(r).array() * gamma.transpose().array();
    const Real mean_d = dxhat.sum() / static_cast<Real>(d);
    const Real mean_dx = dxhat.dot(xhat.row(r)) / static_cast<Real>(d);
    dx.row(r).array() += rstd(r) * (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx);
  }
}

template <typename Real>
Matrix<Real> gelu_rows(const Matrix<Real>& x) {
  return x.unaryExpr([](Real v) { return static_cast<Real>(gelu(static_cast<double>(v))); });
}

template <typename Real>
Matrix<Real> gelu_grad_rows(const Matrix<Real>& x) {
  return x.unaryExpr([](Real v) { return static_cast<Real>(gelu_grad(static_cast<double>(v))); });
}

template <typename Real>
struct LayerCache {
  Matrix<Real> x_in;
  Matrix<Real> ln1, ln1_hat;
  Vector<Real> ln1_rstd;
  Matrix<Real> qkv;
  std::vector<Matrix<Real>> att;  // per (sequence, head): T x T probabilities
  Matrix<Real> att_out;
  Matrix<Real> x_mid;
  Matrix<Real> ln2, ln2_hat;
  Vector<Real> ln2_rstd;
  Matrix<Real> fc_pre, fc_act;
};

template <typename Real>
struct ForwardCache {
  Eigen::Index batch = 0, seq = 0;
  std::vector<LayerCache<Real>> layers;
  Matrix<Real> x_final;
};

// Runs the transformer stack on `batch` sequences of length `seq` (ids laid
// out row-major). Keeps every activation needed for backward.
template <typename Real>
void stack_forward(const ModelParams<Real>& p, std::span<const TokenId> ids, Eigen::Index batch,
                   Eigen::Index seq, ForwardCache<Real>& cache) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index d = cfg.d_model, n = batch * seq, nh = cfg.n_heads, hs = d / nh;
  if (seq > cfg.max_seq_len) {
    throw Error("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
  }
  cache.batch = batch;
  cache.seq = seq;
  cache.layers.resize(p.layers.size());

  Matrix<Real> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw Error("token id out of range: " + std::to_string(id));
    }
    x.row(i) = p.embedding.row(id) + p.positions.row(i % seq);
  }

  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));
  const bool causal = cfg.variant == Variant::causal;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    auto& c = cache.layers[li];
    c.x_in = std::move(x);
    ln_forward(c.x_in, L.ln1_gamma, L.ln1_beta, cfg.ln_epsilon, c.ln1, c.ln1_hat, c.ln1_rstd);
    c.qkv.noalias() = c.ln1 * L.w_qkv;
    c.qkv.rowwise() += L.b_qkv.transpose();
    c.att.resize(static_cast<std::size_t>(batch * nh));
    c.att_out.resize(n, d);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < nh; ++h) {
        auto q = c.qkv.block(b * seq, h * hs, seq, hs);
        auto k = c.qkv.block(b * seq, d + h * hs, seq, hs);
        auto v = c.qkv.block(b * seq, 2 * d + h * hs, seq, hs);
        Matrix<Real>& probs = c.att[static_cast<std::size_t>(b * nh + h)];
        probs.noalias() = (q * k.transpose()) * scale;
        for (Eigen::Index i = 0; i < seq; ++i) {
          const Eigen::Index width = causal ? i + 1 : seq;
          const Real mx = probs.row(i).head(width).maxCoeff();
          Real z = 0;
          for (Eigen::Index j = 0; j < width; ++j) {
            probs(i, j) = std::exp(probs(i, j) - mx);
            z += probs(i, j);
          }
          probs.row(i).head(width) /= z;
          for (Eigen::Index j = width; j < seq; ++j) probs(i, j) = 0;
        }
        c.att_out.block(b * seq, h * hs, seq, hs).noalias() = probs * v;
      }
    }
    c.x_mid = c.x_in;
    c.x_mid.noalias() += c.att_out * L.w_attn_out;
    c.x_mid.rowwise() += L.b_attn_out.transpose();
    ln_forward(c.x_mid, L.ln2_gamma, L.ln2_beta, cfg.ln_epsilon, c.ln2, c.ln2_hat, c.ln2_rstd);
    c.fc_pre.noalias() = c.ln2 * L.w_fc;
    c.fc_pre.rowwise() += L.b_fc.transpose();
    c.fc_act = gelu_rows(c.fc_pre);
    x = c.x_mid;
    x.noalias() += c.fc_act * L.w_proj;
    x.rowwise() += L.b_proj.transpose();
  }
  cache.x_final = std::move(x);
}

template <typename Real>
void stack_backward(const ModelParams<Real>& p, std::span<const TokenId> ids,
                    const ForwardCache<Real>& cache, Matrix<Real> dx, ModelParams<Real>& g) {
  const ModelConfig& cfg = p.config;
  const Eigen::Index d = cfg.d_model, nh = cfg.n_heads, hs = d / nh;
  const Eigen::Index batch = cache.batch, seq = cache.seq, n = batch * seq;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = g.layers[li];
    const auto& c = cache.layers[li];

    // MLP branch: x_out = x_mid + gelu(ln2 W_fc + b_fc) W_proj + b_proj
    G.w_proj.noalias() += c.fc_act.transpose() * dx;
    G.b_proj += dx.colwise().sum().transpose();
    Matrix<Real> dfc = dx * L.w_proj.transpose();
    dfc.array() *= gelu_grad_rows(c.fc_pre).array();
    G.w_fc.noalias() += c.ln2.transpose() * dfc;
    G.b_fc += dfc.colwise().sum().transpose();
    const Matrix<Real> dln2 = dfc * L.w_fc.transpose();
    ln_backward(dln2, c.ln2_hat, c.ln2_rstd, L.ln2_gamma, dx, G.ln2_gamma, G.ln2_beta);

    // Attention branch: x_mid = x_in + att_out W_o + b_o
    G.w_attn_out.noalias() += c.att_out.transpose() * dx;
    G.b_attn_out += dx.colwise().sum().transpose();
    const Matrix<Real> datt = dx * L.w_attn_out.transpose();
    Matrix<Real> dqkv = Matrix<Real>::Zero(n, 3 * d);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < nh; ++h) {
        const auto q = c.qkv.block(b * seq, h * hs, seq, hs);
        const auto k = c.qkv.block(b * seq, d + h * hs, seq, hs);
        const auto v = c.qkv.block(b * seq, 2 * d + h * hs, seq, hs);
        const Matrix<Real>& probs = c.att[static_cast<std::size_t>(b * nh + h)];
        const auto dout = datt.block(b * seq, h * hs, seq, hs);
        Matrix<Real> dprobs = dout * v.transpose();
        dqkv.block(b * seq, 2 * d + h * hs, seq, hs).noalias() = probs.transpose() * dout;
        const Vector<Real> rowdot = (dprobs.array() * probs.array()).rowwise().sum();
        Matrix<Real> dscores = probs.array() * (dprobs.colwise() - rowdot).array();
        dscores *= scale;
        dqkv.block(b * seq, h * hs, seq, hs).noalias() = dscores * k;
        dqkv.block(b * seq, d + h * hs, seq, hs).noalias() = dscores.transpose() * q;
      }
    }
    G.w_qkv.noalias() += c.ln1.transpose() * dqkv;
    G.b_qkv += dqkv.colwise().sum().transpose();
    const Matrix<Real> dln1 = dqkv * L.w_qkv.transpose();
    ln_backward(dln1, c.ln1_hat, c.ln1_rstd, L.ln1_gamma, dx, G.ln1_gamma, G.ln1_beta);
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    g.embedding.row(ids[static_cast<std::size_t>(i)]) += dx.row(i);
    g.positions.row(i % seq) += dx.row(i);
  }
}

double log_sum_exp_row(const auto& row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < row.size(); ++c) mx = std::max(mx, static_cast<double>(row(c)));
  if (!std::isfinite(mx)) return mx;
  double z = 0.0;
  for (Eigen::Index c = 0; c < row.size(); ++c) z += std::exp(static_cast<double>(row(c)) - mx);
  return mx + std::log(z);
}

template <typename Real>
LossAndGrad<Real> run_loss(const ModelParams<Real>& p, std::span<const Example> batch,
                           bool want_grad) {
  LossAndGrad<Real> out;
  if (want_grad) out.grad = ModelParams<Real>::zeros(p.config);
  if (batch.empty()) return out;
  const Eigen::Index seq = static_cast<Eigen::Index>(batch.front().inputs.size());
  const Eigen::Index nb = static_cast<Eigen::Index>(batch.size());
  std::vector<TokenId> ids;
  std::vector<Eigen::Index> rows;
  std::vector<TokenId> targets;
  ids.reserve(static_cast<std::size_t>(nb * seq));
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto& ex = batch[static_cast<std::size_t>(b)];
    if (static_cast<Eigen::Index>(ex.inputs.size()) != seq || ex.targets.size() != ex.inputs.size()) {
      throw Error("loss: examples must share one length and carry one target per input");
    }
    for (Eigen::Index t = 0; t < seq; ++t) {
      ids.push_back(ex.inputs[static_cast<std::size_t>(t)]);
      const TokenId tgt = ex.targets[static_cast<std::size_t>(t)];
      if (tgt >= 0) {
        if (tgt >= p.config.vocab_size) throw Error("loss: target id out of range");
        rows.push_back(b * seq + t);
        targets.push_back(tgt);
      }
    }
  }
  ForwardCache<Real> cache;
  stack_forward(p, ids, nb, seq, cache);
  out.target_count = rows.size();
  if (rows.empty()) return out;

  const Eigen::Index m = static_cast<Eigen::Index>(rows.size()), d = p.config.d_model;
  const auto& H = p.head;
  Matrix<Real> xt(m, d);
  for (Eigen::Index r = 0; r < m; ++r) xt.row(r) = cache.x_final.row(rows[static_cast<std::size_t>(r)]);

  const bool masked = p.config.variant == Variant::masked;
  Matrix<Real> u, a;
  const Matrix<Real>* ln_in = &xt;
  if (masked) {
    u.noalias() = xt * H.w_fc;
    u.rowwise() += H.b_fc.transpose();
    a = gelu_rows(u);
    ln_in = &a;
  }
  Matrix<Real> z, zhat;
  Vector<Real> zrstd;
  ln_forward(*ln_in, H.gamma, H.b_ln, H.ln_epsilon, z, zhat, zrstd);
  Matrix<Real> logits = z * p.embedding.transpose();
  if (masked) logits.rowwise() += H.b_last.transpose();

  CompensatedSum total;
  for (Eigen::Index r = 0; r < m; ++r) {
    auto row = logits.row(r);
    const TokenId tgt = targets[static_cast<std::size_t>(r)];
    const Real mx = row.maxCoeff();
    const double target_logit = static_cast<double>(row(tgt));
    row.array() = (row.array() - mx).exp();
    const double z = row.template cast<double>().sum();
    total.add(static_cast<double>(mx) + std::log(z) - target_logit);
    if (want_grad) {
      row *= static_cast<Real>(1.0 / (z * static_cast<double>(m)));
      row(tgt) -= static_cast<Real>(1.0 / static_cast<double>(m));
    }
  }
  out.loss = total.value() / static_cast<double>(m);
  if (!want_grad) return out;

  auto& G = out.grad;
  const Matrix<Real>& dlogits = logits;
  G.embedding.noalias() += dlogits.transpose() * z;
  if (masked) G.head.b_last += dlogits.colwise().sum().transpose();
  const Matrix<Real> dz = dlogits * p.embedding;
  Matrix<Real> dln_in = Matrix<Real>::Zero(m, ln_in->cols());
  ln_backward(dz, zhat, zrstd, H.gamma, dln_in, G.head.gamma, G.head.b_ln);
  Matrix<Real> dxt;
  if (masked) {
    Matrix<Real> du = dln_in.array() * gelu_grad_rows(u).array();
    G.head.w_fc.noalias() += xt.transpose() * du;
    G.head.b_fc += du.colwise().sum().transpose();
    dxt = du * H.w_fc.transpose();
  } else {
    dxt = std::move(dln_in);
  }
  Matrix<Real> dx = Matrix<Real>::Zero(nb * seq, d);
  for (Eigen::Index r = 0; r < m; ++r) dx.row(rows[static_cast<std::size_t>(r)]) += dxt.row(r);
  stack_backward(p, ids, cache, std::move(dx), G);
  return out;
}

}  // namespace

template <typename Real>
Matrix<Real> forward_hidden(const ModelParams<Real>& params, std::span<const TokenId> ids) {
  if (ids.empty()) return Matrix<Real>(0, params.config.d_model);
  ForwardCache<Real> cache;
  stack_forward(params, ids, 1, static_cast<Eigen::Index>(ids.size()), cache);
  return std::move(cache.x_final);
}

template <typename Real>
std::vector<Matrix<Real>> forward_hidden(const ModelParams<Real>& params,
                                         std::span<const Sequence> batch) {
  std::vector<Matrix<Real>> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(forward_hidden(params, std::span<const TokenId>(s)));
  return out;
}

template <typename Real>
LossAndGrad<Real> loss_and_grad(const ModelParams<Real>& params, std::span<const Example> batch) {
  return run_loss(params, batch, true);
}

template <typename Real>
double batch_loss(const ModelParams<Real>& params, std::span<const Example> batch) {
  return run_loss(params, batch, false).loss;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalPositions eval_positions(const ModelConfig& config, const Vocab& vocab,
                             std::span<const TokenId> seq, std::uint64_t seed,
                             std::size_t index, bool mask_only) {
  EvalPositions ep;
  const std::size_t n = std::min(seq.size(), static_cast<std::size_t>(config.max_seq_len));
  ep.inputs.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(n));
  if (config.variant == Variant::causal) {
    for (std::size_t t = 0; t + 1 < n; ++t) {
      ep.positions.push_back(t);
      ep.targets.push_back(ep.inputs[t + 1]);
    }
    return ep;
  }
  Rng rng = Rng::derive(seed, index);
  Corruption c = mask_corrupt(ep.inputs, vocab, rng);
  for (std::size_t t : c.targets) {
    if (mask_only && c.ids[t] != vocab.mask()) continue;
    ep.positions.push_back(t);
    ep.targets.push_back(ep.inputs[t]);
  }
  ep.inputs = std::move(c.ids);
  return ep;
}

double NllSummary::mean() const {
  if (positions == 0) return std::numeric_limits<double>::quiet_NaN();
  return total_nll / static_cast<double>(positions);
}

template <typename Real>
NllSummary evaluate_nll(const ModelParams<Real>& params, const Vocab& vocab,
                        std::span<const Sequence> docs, const InterventionSpec& iv,
                        std::uint64_t mask_seed) {
  NllSummary s;
  CompensatedSum total;
  bool infinite = false;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const EvalPositions ep = eval_positions(params.config, vocab, docs[i], mask_seed, i, false);
    if (ep.positions.empty()) continue;
    const Matrix<Real> hidden = forward_hidden(params, std::span<const TokenId>(ep.inputs));
    Matrix<Real> rows(static_cast<Eigen::Index>(ep.positions.size()), hidden.cols());
    for (std::size_t r = 0; r < ep.positions.size(); ++r) {
      rows.row(static_cast<Eigen::Index>(r)) = hidden.row(static_cast<Eigen::Index>(ep.positions[r]));
    }
    const Matrix<Real> logits = head_logit_rows(rows, params.head, iv, params.embedding);
    for (std::size_t r = 0; r < ep.positions.size(); ++r) {
      const auto row = logits.row(static_cast<Eigen::Index>(r));
      const double nll = log_sum_exp_row(row) - static_cast<double>(row(ep.targets[r]));
      if (!std::isfinite(nll)) {
        infinite = true;
      } else {
        total.add(nll);
      }
    }
    s.positions += ep.positions.size();
  }
  s.total_nll = infinite ? std::numeric_limits<double>::infinity() : total.value();
  return s;
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <typename Real>
DecodeState<Real>::DecodeState(const ModelParams<Real>& params) : params_(&params) {
  if (params.config.variant != Variant::causal) {
    throw Error("incremental decoding requires a causal model");
  }
  const Eigen::Index t = params.config.max_seq_len, d = params.config.d_model;
  keys_.assign(params.layers.size(), Matrix<Real>::Zero(t, d));
  values_.assign(params.layers.size(), Matrix<Real>::Zero(t, d));
}

template <typename Real>
Vector<Real> DecodeState<Real>::step(TokenId id) {
  const ModelParams<Real>& p = *params_;
  const ModelConfig& cfg = p.config;
  if (length_ >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw Error("decode: sequence exceeds max_seq_len");
  }
  if (id < 0 || id >= cfg.vocab_size) throw Error("token id out of range: " + std::to_string(id));
  const Eigen::Index d = cfg.d_model, nh = cfg.n_heads, hs = d / nh;
  const Eigen::Index t = static_cast<Eigen::Index>(length_);
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));

  Matrix<Real> x = p.embedding.row(id) + p.positions.row(t);
  Matrix<Real> y, hat;
  Vector<Real> rstd;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& L = p.layers[li];
    ln_forward(x, L.ln1_gamma, L.ln1_beta, cfg.ln_epsilon, y, hat, rstd);
    Matrix<Real> qkv = y * L.w_qkv;
    qkv.row(0) += L.b_qkv.transpose();
    keys_[li].row(t) = qkv.block(0, d, 1, d);
    values_[li].row(t) = qkv.block(0, 2 * d, 1, d);
    Matrix<Real> att(1, d);
    for (Eigen::Index h = 0; h < nh; ++h) {
      const auto q = qkv.block(0, h * hs, 1, hs);
      const auto k = keys_[li].block(0, h * hs, t + 1, hs);
      const auto v = values_[li].block(0, h * hs, t + 1, hs);
      RowVector<Real> scores = (q * k.transpose()) * scale;
      const Real mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      att.block(0, h * hs, 1, hs).noalias() = scores * v;
    }
    Matrix<Real> mid = x + att * L.w_attn_out;
    mid.row(0) += L.b_attn_out.transpose();
    ln_forward(mid, L.ln2_gamma, L.ln2_beta, cfg.ln_epsilon, y, hat, rstd);
    Matrix<Real> fc = y * L.w_fc;
    fc.row(0) += L.b_fc.transpose();
    x = mid + gelu_rows(fc) * L.w_proj;
    x.row(0) += L.b_proj.transpose();
  }
  ++length_;
  return x.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<TokenId> flatten(std::span<const Sequence> docs) {
  std::vector<TokenId> out;
  for (const auto& d : docs) out.insert(out.end(), d.begin(), d.end());
  return out;
}

std::vector<Example> sample_batch(const ModelConfig& cfg, const TrainConfig& tcfg,
                                  const Vocab& vocab, std::span<const TokenId> stream, Rng& rng) {
  std::vector<Example> batch(static_cast<std::size_t>(tcfg.batch_size));
  const bool causal = cfg.variant == Variant::causal;
  const std::size_t need = causal ? 2 : 1;
  if (stream.size() < need) throw Error("train: corpus too small");
  std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(tcfg.seq_len),
                                          static_cast<std::size_t>(cfg.max_seq_len));
  len = std::min(len, causal ? stream.size() - 1 : stream.size());
  const std::size_t span_len = causal ? len + 1 : len;
  for (auto& ex : batch) {
    const std::size_t start = rng.below(stream.size() - span_len + 1);
    const auto window = stream.subspan(start, span_len);
    if (causal) {
      ex.inputs.assign(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(len));
      ex.targets.assign(window.begin() + 1, window.end());
    } else {
      Corruption c = mask_corrupt(window, vocab, rng, tcfg.masking);
      ex.inputs = std::move(c.ids);
      ex.targets.assign(len, -1);
      for (std::size_t t : c.targets) ex.targets[t] = window[t];
    }
  }
  return batch;
}

double scheduled_lr(const TrainConfig& tcfg, long step) {
  double lr = tcfg.lr;
  if (tcfg.warmup_steps > 0 && step <= tcfg.warmup_steps) {
    return lr * static_cast<double>(step) / static_cast<double>(tcfg.warmup_steps);
  }
  if (tcfg.cosine_decay && tcfg.steps > tcfg.warmup_steps) {
    const double progress = static_cast<double>(step - tcfg.warmup_steps) /
                            static_cast<double>(tcfg.steps - tcfg.warmup_steps);
    lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return lr;
}

}  // namespace

template <typename Real>
TrainResult<Real> train_from(ModelParams<Real> params, const TrainConfig& tcfg, const Vocab& vocab,
                             const TrainData& data, const StepCallback& on_eval) {
  tcfg.validate();
  params.validate();
  if (static_cast<std::size_t>(params.config.vocab_size) != vocab.size()) {
    throw Error("train: vocabulary size does not match model config");
  }
  if (data.train_docs.empty()) throw Error("train: corpus is empty");
  const std::vector<TokenId> stream = flatten(data.train_docs);
  if (stream.empty()) throw Error("train: corpus is empty");

  TrainResult<Real> result;
  Rng rng(tcfg.seed);
  ModelParams<Real> m1 = ModelParams<Real>::zeros(params.config);
  ModelParams<Real> m2 = ModelParams<Real>::zeros(params.config);

  const auto heldout = [&]() -> std::optional<double> {
    if (data.heldout_docs.empty()) return std::nullopt;
    return evaluate_nll(params, vocab, data.heldout_docs, InterventionSpec{}, tcfg.eval_mask_seed)
        .mean();
  };
  const auto record = [&](LossRecord r) {
    result.curve.push_back(r);
    if (on_eval) on_eval(r);
  };

  LossRecord first{0, std::numeric_limits<double>::quiet_NaN(), heldout()};
  result.initial_heldout = first.heldout_loss.value_or(std::numeric_limits<double>::quiet_NaN());
  record(first);

  for (long step = 1; step <= tcfg.steps; ++step) {
    const auto batch = sample_batch(params.config, tcfg, vocab, stream, rng);
    LossAndGrad<Real> lg = loss_and_grad(params, std::span<const Example>(batch));
    if (!std::isfinite(lg.loss)) {
      throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                      " (loss is not finite)");
    }
    auto grads = lg.grad.tensors();
    double sq = 0.0;
    for (const auto& t : grads) {
      for (Real v : t.data) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double norm = std::sqrt(sq);
    const double clip = norm > tcfg.clip_norm ? tcfg.clip_norm / (norm + 1e-12) : 1.0;

    const double lr = scheduled_lr(tcfg, step);
    const double bc1 = 1.0 - std::pow(tcfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(tcfg.beta2, static_cast<double>(step));
    auto ps = params.tensors();
    auto ms = m1.tensors();
    auto vs = m2.tensors();
    for (std::size_t ti = 0; ti < ps.size(); ++ti) {
      const bool decay = ps[ti].shape.size() == 2 && tcfg.weight_decay > 0.0;
      for (std::size_t k = 0; k < ps[ti].data.size(); ++k) {
        const double gk = static_cast<double>(grads[ti].data[k]) * clip;
        const double mk = tcfg.beta1 * static_cast<double>(ms[ti].data[k]) + (1.0 - tcfg.beta1) * gk;
        const double vk = tcfg.beta2 * static_cast<double>(vs[ti].data[k]) + (1.0 - tcfg.beta2) * gk * gk;
        ms[ti].data[k] = static_cast<Real>(mk);
        vs[ti].data[k] = static_cast<Real>(vk);
        double pk = static_cast<double>(ps[ti].data[k]);
        if (decay) pk -= lr * tcfg.weight_decay * pk;
        pk -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + tcfg.adam_eps);
        ps[ti].data[k] = static_cast<Real>(pk);
      }
    }
    if (!params.all_finite()) {
      throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                      " (non-finite parameters)");
    }
    if (step % tcfg.eval_every == 0 || step == tcfg.steps) {
      const auto h = heldout();
      if (h && !std::isfinite(*h)) {
        throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                        " (held-out loss is not finite)");
      }
      record(LossRecord{step, lg.loss, h});
    }
  }
  result.final_heldout = result.curve.back().heldout_loss.value_or(
      std::numeric_limits<double>::quiet_NaN());
  result.params = std::move(params);
  return result;
}

template <typename Real>
TrainResult<Real> train(const ModelConfig& config, const TrainConfig& tcfg, const Vocab& vocab,
                        const TrainData& data, const StepCallback& on_eval) {
  ModelConfig cfg = config;
  if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int>(vocab.size());
  return train_from(ModelParams<Real>::initialize(cfg, tcfg.seed), tcfg, vocab, data, on_eval);
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> curve) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "step,train_loss,heldout_loss\n";
  for (const auto& r : curve) {
    os << r.step << ',';
    if (std::isfinite(r.train_loss)) os << r.train_loss;
    os << ',';
    if (r.heldout_loss) os << *r.heldout_loss;
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'Q', 'H', 'D', 'C', 'K', 'P', 'T'};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) {
  std::size_t pos = 0;
  const auto v = std::stoull(s, &pos, 16);
  if (pos != s.size()) throw Error("checkpoint: bad hex value " + s);
  return v;
}

void put_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::uint32_t float_bits_le(float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) {
    return ((u & 0xffu) << 24) | ((u & 0xff00u) << 8) | ((u >> 8) & 0xff00u) | (u >> 24);
  }
  return u;
}

}  // namespace

void save_checkpoint(const ModelParams<float>& params, std::uint64_t tokenizer_hash,
                     const std::filesystem::path& path) {
  params.validate();
  const auto tensors = params.tensors();
  std::string payload;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset},
                     {"count", t.data.size()}});
    for (float f : t.data) {
      const std::uint32_t u = float_bits_le(f);
      payload.append(reinterpret_cast<const char*>(&u), 4);
    }
    offset += t.data.size();
  }
  nlohmann::json cfg = params.config;
  nlohmann::ordered_json manifest;
  manifest["format"] = "freqhead-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = nlohmann::ordered_json::parse(cfg.dump());
  manifest["tokenizer_hash"] = hex64(tokenizer_hash);
  manifest["dtype"] = "float32-le";
  manifest["total_floats"] = offset;
  manifest["data_fnv1a64"] = hex64(fnv1a64(payload.data(), payload.size()));
  manifest["tensors"] = table;
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint: " + path.string());
  os.write(kMagic, sizeof kMagic);
  put_u64le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw Error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const CheckpointExpectations& expect) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error("not a checkpoint file (bad magic): " + path.string());
  }
  const std::uint64_t mlen = get_u64le(raw + 8);
  if (mlen > bytes.size() - 16) throw Error("corrupt checkpoint: truncated manifest in " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt checkpoint: unreadable manifest in " + path.string() + ": " + e.what());
  }

  Checkpoint ck;
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  ck.tokenizer_hash = parse_hex64(manifest.at("tokenizer_hash").get<std::string>());
  if (expect.variant && *expect.variant != cfg.variant) {
    throw Error("checkpoint variant is " + std::string(to_string(cfg.variant)) + ", expected " +
                std::string(to_string(*expect.variant)));
  }
  if (expect.tokenizer_hash && *expect.tokenizer_hash != ck.tokenizer_hash) {
    throw Error("checkpoint tokenizer hash mismatch: checkpoint " + hex64(ck.tokenizer_hash) +
                ", vocab " + hex64(*expect.tokenizer_hash));
  }

  ck.params = ModelParams<float>::zeros(cfg);
  auto tensors = ck.params.tensors();
  const auto& table = manifest.at("tensors");
  if (table.size() != tensors.size()) throw Error("checkpoint tensor table does not match config");
  const std::uint64_t total = manifest.at("total_floats").get<std::uint64_t>();
  const std::size_t data_start = 16 + mlen;
  if (bytes.size() - data_start != total * 4) {
    const bool short_file = bytes.size() - data_start < total * 4;
    throw Error(std::string("corrupt checkpoint: ") + (short_file ? "truncated" : "trailing bytes") +
                ", expected " + std::to_string(total * 4) + " data bytes, found " +
                std::to_string(bytes.size() - data_start) + " in " + path.string());
  }
  const std::uint64_t want_hash = parse_hex64(manifest.at("data_fnv1a64").get<std::string>());
  if (fnv1a64(raw + data_start, total * 4) != want_hash) {
    throw Error("corrupt checkpoint: data checksum mismatch in " + path.string());
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = table[i];
    if (entry.at("name").get<std::string>() != tensors[i].name ||
        entry.at("shape").get<std::vector<std::int64_t>>() != tensors[i].shape) {
      throw Error("checkpoint shape mismatch for tensor " + tensors[i].name);
    }
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t count = entry.at("count").get<std::uint64_t>();
    if (count != tensors[i].data.size() || off + count > total) {
      throw Error("checkpoint shape mismatch for tensor " + tensors[i].name);
    }
    for (std::size_t k = 0; k < count; ++k) {
      std::uint32_t u;
      std::memcpy(&u, raw + data_start + (off + k) * 4, 4);
      tensors[i].data[k] = std::bit_cast<float>(float_bits_le(std::bit_cast<float>(u)));
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define FREQHEAD_INSTANTIATE(Real)                                                              \
  template struct ModelParams<Real>;                                                            \
  template Matrix<Real> forward_hidden(const ModelParams<Real>&, std::span<const TokenId>);     \
  template std::vector<Matrix<Real>> forward_hidden(const ModelParams<Real>&,                   \
                                                    std::span<const Sequence>);                 \
  template LossAndGrad<Real> loss_and_grad(const ModelParams<Real>&, std::span<const Example>); \
  template double batch_loss(const ModelParams<Real>&, std::span<const Example>);               \
  template NllSummary evaluate_nll(const ModelParams<Real>&, const Vocab&,                      \
                                   std::span<const Sequence>, const InterventionSpec&,          \
                                   std::uint64_t);                                              \
  template class DecodeState<Real>;                                                             \
  template TrainResult<Real> train(const ModelConfig&, const TrainConfig&, const Vocab&,        \
                                   const TrainData&, const StepCallback&);                      \
  template TrainResult<Real> train_from(ModelParams<Real>, const TrainConfig&, const Vocab&,    \
                                        const TrainData&, const StepCallback&);

FREQHEAD_INSTANTIATE(float)
FREQHEAD_INSTANTIATE(double)

template ModelParams<double> cast_params(const ModelParams<float>&);
template ModelParams<float> cast_params(const ModelParams<double>&);
template ModelParams<float> cast_params(const ModelParams<float>&);
template ModelParams<double> cast_params(const ModelParams<double>&);

}  // namespace freqhead
