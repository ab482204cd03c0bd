#include <cmath>

#include "doctest.h"
#include "freqhead/head.hpp"
#include "freqhead/rng.hpp"
#include "oracles.hpp"

using namespace freqhead;

namespace {

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

std::vector<double> std_vec(const Vector<double>& v) { return {v.data(), v.data() + v.size()}; }

std::vector<std::vector<double>> rows(const Matrix<double>& m) {
  std::vector<std::vector<double>> out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row;
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

Vector<double> random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Vector<double> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

Matrix<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

HeadParams<double> causal_head(Rng& rng, Eigen::Index d) {
  HeadParams<double> h;
  h.variant = Variant::causal;
  h.gamma = random_vec(rng, d, 0.3).array() + 1.0;
  h.b_ln = random_vec(rng, d);
  return h;
}

HeadParams<double> masked_head(Rng& rng, Eigen::Index d, Eigen::Index vocab) {
  HeadParams<double> h = causal_head(rng, d);
  h.variant = Variant::masked;
  h.w_fc = random_mat(rng, d, d, 0.5);
  h.b_fc = random_vec(rng, d, 0.5);
  h.b_last = random_vec(rng, vocab, 0.5);
  return h;
}

}  // namespace

TEST_CASE("layer norm hand examples") {
  const auto a = layer_norm(vec({1, -1}), vec({1, 1}), vec({0, 0}), 1e-5);
  CHECK(a(0) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(a(1) == doctest::Approx(-1.0).epsilon(1e-4));
  // mean 2, std 1: ((3-2)/1)*2+1 = 3 and ((1-2)/1)*2-1 = -3.
  const auto b = layer_norm(vec({3, 1}), vec({2, 2}), vec({1, -1}), 1e-5);
  CHECK(b(0) == doctest::Approx(3.0).epsilon(1e-4));
  CHECK(b(1) == doctest::Approx(-3.0).epsilon(1e-4));
  const auto c = layer_norm(vec({5, 5}), vec({1, 1}), vec({0.5, 0.5}), 1e-5);
  CHECK(c(0) == 0.5);
  CHECK(c(1) == 0.5);
  CHECK_THROWS_AS(layer_norm(vec({1}), vec({1}), vec({0}), 1e-5), Error);
}

TEST_CASE("layer norm matches the oracle on random inputs") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto d = static_cast<Eigen::Index>(2 + rng.below(20));
    const auto x = random_vec(rng, d, 3.0), g = random_vec(rng, d), b = random_vec(rng, d);
    const auto got = layer_norm(x, g, b, 1e-5);
    const auto want = oracle::layer_norm(std_vec(x), std_vec(g), std_vec(b), 1e-5);
    for (Eigen::Index i = 0; i < d; ++i) CHECK(got(i) == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("causal prediction hand example") {
  HeadParams<double> h;
  h.gamma = vec({1, 1});
  h.b_ln = vec({0, 0});
  Matrix<double> W = Matrix<double>::Identity(2, 2);
  const auto p = predict_causal(vec({1, -1}), h, InterventionSpec{}, W);
  // LN gives [1,-1] (to 1e-5), logit gap 2, logistic(2) = 0.8808.
  CHECK(p(0) == doctest::Approx(0.8808).epsilon(1e-3));
  CHECK(p(1) == doctest::Approx(0.1192).epsilon(1e-3));
}

TEST_CASE("lambda zero equals a zeroed bias exactly") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto h = causal_head(rng, 6);
    const auto W = random_mat(rng, 9, 6);
    const auto x = random_vec(rng, 6);
    HeadParams<double> z = h;
    z.b_ln.setZero();
    const auto a = predict_causal(x, h, InterventionSpec::with_lambda(0.0), W);
    const auto b = predict_causal(x, z, InterventionSpec{}, W);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("causal prediction is a distribution and matches the oracle") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto d = static_cast<Eigen::Index>(2 + rng.below(8));
    const auto V = static_cast<Eigen::Index>(2 + rng.below(30));
    const auto h = causal_head(rng, d);
    const auto W = random_mat(rng, V, d);
    const auto x = random_vec(rng, d, 2.0);
    const double lambda = rng.uniform();
    const auto p = predict_causal(x, h, InterventionSpec::with_lambda(lambda), W);
    CHECK(std::abs(p.sum() - 1.0) <= 1e-6);
    CHECK(p.minCoeff() > 0.0);
    const auto q = oracle::predict_causal(std_vec(x), std_vec(h.gamma), std_vec(h.b_ln), lambda, rows(W), h.ln_epsilon);
    for (Eigen::Index i = 0; i < V; ++i) CHECK(p(i) == doctest::Approx(q[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("masked prediction matches the straight-line oracle") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto d = static_cast<Eigen::Index>(2 + rng.below(8));
    const auto V = static_cast<Eigen::Index>(2 + rng.below(30));
    const auto h = masked_head(rng, d, V);
    const auto W = random_mat(rng, V, d);
    const auto x = random_vec(rng, d, 2.0);
    InterventionSpec iv{rng.uniform(), rng.below(2) == 1, rng.below(2) == 1};
    const auto p = predict_masked(x, h, iv, W);
    const auto q = oracle::predict_masked(std_vec(x), rows(h.w_fc), std_vec(h.b_fc), iv.use_b_fc, std_vec(h.gamma),
                                          std_vec(h.b_ln), iv.lambda_ln, rows(W), std_vec(h.b_last),
                                          iv.use_b_last, h.ln_epsilon);
    for (Eigen::Index i = 0; i < V; ++i) CHECK(p(i) == doctest::Approx(q[static_cast<std::size_t>(i)]).epsilon(1e-10));
    CHECK(std::abs(p.sum() - 1.0) <= 1e-6);
  }
}

TEST_CASE("masked head reduces to the causal head in the linear regime of GELU") {
  Rng rng(5);
  const Eigen::Index d = 4, V = 7;
  HeadParams<double> m = masked_head(rng, d, V);
  m.w_fc = Matrix<double>::Identity(d, d);
  m.b_fc.setZero();
  m.b_last.setZero();
  HeadParams<double> c = m;
  c.variant = Variant::causal;
  c.w_fc.resize(0, 0);
  c.b_fc.resize(0);
  c.b_last.resize(0);
  const auto W = random_mat(rng, V, d);
  const Vector<double> x = vec({20, 22, 25, 21});
  const auto pm = predict_masked(x, m, InterventionSpec{}, W);
  const auto pc = predict_causal(x, c, InterventionSpec{}, W);
  CHECK((pm - pc).cwiseAbs().maxCoeff() <= 1e-3);
}

TEST_CASE("masked head toggles and variant checks") {
  Rng rng(6);
  HeadParams<double> m = masked_head(rng, 5, 8);
  m.b_last.setZero();
  const auto W = random_mat(rng, 8, 5);
  const auto x = random_vec(rng, 5);
  const auto on = predict_masked(x, m, InterventionSpec{1.0, true, true}, W);
  const auto off = predict_masked(x, m, InterventionSpec{1.0, true, false}, W);
  CHECK((on - off).cwiseAbs().maxCoeff() == 0.0);
  CHECK(gelu(0.0) == 0.0);
  CHECK_THROWS_AS(predict_causal(x, m, InterventionSpec{}, W), Error);
  const auto c = causal_head(rng, 5);
  CHECK_THROWS_AS(predict_masked(x, c, InterventionSpec{}, W), Error);
  CHECK_THROWS_AS(predict_causal(vec({1, 2, 3}), c, InterventionSpec{}, W), Error);
}

TEST_CASE("apply intervention") {
  Rng rng(7);
  const auto h = masked_head(rng, 6, 10);
  const auto same = apply_intervention(h, InterventionSpec{});
  CHECK(same.b_ln == h.b_ln);
  CHECK(same.b_fc == h.b_fc);
  CHECK(same.b_last == h.b_last);
  const auto scaled = apply_intervention(h, InterventionSpec::with_lambda(0.6));
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(scaled.b_ln(i) == h.b_ln(i) * 0.6);
  const auto off = apply_intervention(h, InterventionSpec{1.0, false, false});
  CHECK(off.b_fc.isZero());
  CHECK(off.b_last.isZero());
  CHECK_FALSE(h.b_fc.isZero());

  const auto W = random_mat(rng, 10, 6);
  for (int t = 0; t < 30; ++t) {
    const auto x = random_vec(rng, 6, 2.0);
    InterventionSpec iv{rng.uniform(), rng.below(2) == 1, rng.below(2) == 1};
    const auto a = predict_masked(x, apply_intervention(h, iv), InterventionSpec{}, W);
    const auto b = predict_masked(x, h, iv, W);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("lambda is clamped and serialized") {
  CHECK(InterventionSpec::with_lambda(1.7).clamped().lambda_ln == 1.0);
  CHECK(InterventionSpec::with_lambda(-0.2).clamped().lambda_ln == 0.0);
  CHECK_THROWS_AS(InterventionSpec::with_lambda(std::nan("")).clamped(), Error);
  nlohmann::json j = nlohmann::json::parse(R"({"lambda_ln": 0.6, "use_b_fc": true, "use_b_last": false})");
  InterventionSpec iv = j.get<InterventionSpec>();
  CHECK(iv.lambda_ln == 0.6);
  CHECK(iv.use_b_fc);
  CHECK_FALSE(iv.use_b_last);
  nlohmann::json back = iv;
  CHECK(back == j);
}

TEST_CASE("prediction is continuous in lambda") {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto h = causal_head(rng, 6);
    const auto W = random_mat(rng, 12, 6);
    const auto x = random_vec(rng, 6);
    const double lambda = 0.5 * rng.uniform();
    const auto a = predict_causal(x, h, InterventionSpec::with_lambda(lambda), W);
    const auto b = predict_causal(x, h, InterventionSpec::with_lambda(lambda + 1e-6), W);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-4);
  }
}

TEST_CASE("log-probability shift equals the centred bias products") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto h = causal_head(rng, 6);
    const auto W = random_mat(rng, 15, 6);
    const auto x = random_vec(rng, 6, 2.0);
    const Vector<double> l1 = predict_causal(x, h, InterventionSpec::with_lambda(1.0), W).array().log();
    const Vector<double> l0 = predict_causal(x, h, InterventionSpec::with_lambda(0.0), W).array().log();
    Vector<double> diff = l1 - l0;
    diff.array() -= diff.mean();
    Vector<double> prod = W * h.b_ln;
    prod.array() -= prod.mean();
    CHECK((diff - prod).cwiseAbs().maxCoeff() <= 1e-5);
  }
}

TEST_CASE("head validation") {
  Rng rng(10);
  auto h = causal_head(rng, 4);
  CHECK_NOTHROW(h.validate(4, 9));
  CHECK_THROWS_AS(h.validate(5, 9), Error);
  h.b_last = Vector<double>::Zero(9);
  CHECK_THROWS_AS(h.validate(4, 9), Error);
  auto m = masked_head(rng, 4, 9);
  CHECK_NOTHROW(m.validate(4, 9));
  CHECK_THROWS_AS(m.validate(4, 10), Error);
}
