#include "lpcd/targets.hpp"

#include <doctest.h>

#include "oracles.hpp"

using namespace lpcd;

namespace {

Matrix scalar(double v) {
  Matrix m(1, 1);
  m << v;
  return m;
}

}  // namespace

TEST_SUITE("targets") {

TEST_CASE("alpha = 0 returns the weights unchanged") {
  Rng rng(1);
  Matrix x = random_matrix(rng, 6, 3);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 6, 3);
  Matrix w = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x_hat, 0.0);
  Matrix t = qep_target(w, s, 0.0);
  CHECK((t - w).norm() == 0.0);
}

TEST_CASE("no upstream error means no correction at any alpha") {
  Rng rng(2);
  Matrix x = random_matrix(rng, 5, 3);
  Matrix w = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x, 0.0);
  CHECK(s.c.norm() == 0.0);
  for (double alpha : {0.25, 0.5, 1.0})
    CHECK((qep_target(w, s, alpha) - w).norm() == doctest::Approx(0.0));
}

TEST_CASE("scalar corrected target solves the 1-D least squares") {
  PropagationState s = make_state(scalar(2.0), scalar(1.0), 0.0);
  Matrix t = qep_target(scalar(3.0), s, 1.0);
  CHECK(t(0, 0) == doctest::Approx(6.0));
  // independent route: argmin_w ||x_hat w - x W||^2
  double direct = (1.0 * 2.0 * 3.0) / (1.0 * 1.0);
  CHECK(t(0, 0) == doctest::Approx(direct));
}

TEST_CASE("beta = 0 reduces the residual target to the plain one") {
  Rng rng(3);
  Matrix x = random_matrix(rng, 6, 3);
  Matrix x_hat = x + 0.05 * random_matrix(rng, 6, 3);
  Matrix r = random_matrix(rng, 6, 2);
  Matrix r_hat = r + 0.05 * random_matrix(rng, 6, 2);
  Matrix w = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x_hat, r, r_hat, 0.0);
  Matrix a = loaq_target(w, s, 0.7, 0.0);
  Matrix b = qep_target(w, s, 0.7);
  CHECK((a - b).norm() == 0.0);
}

TEST_CASE("scalar residual targets match direct 1-D solves") {
  // x == x_hat: only the residual correction acts
  PropagationState s1 = make_state(scalar(1.0), scalar(1.0), scalar(5.0), scalar(4.0), 0.0);
  Matrix t1 = loaq_target(scalar(3.0), s1, 1.0, 1.0);
  CHECK(t1(0, 0) == doctest::Approx(4.0));  // argmin_w ||(4 + w) - (5 + 3)||^2

  // both corrections act
  PropagationState s2 = make_state(scalar(2.0), scalar(1.0), scalar(5.0), scalar(4.0), 0.0);
  Matrix t2 = loaq_target(scalar(3.0), s2, 1.0, 1.0);
  CHECK(t2(0, 0) == doctest::Approx(7.0));  // argmin_w ||(4 + w) - (5 + 6)||^2
}

TEST_CASE("missing residual streams are an error") {
  Rng rng(4);
  Matrix x = random_matrix(rng, 4, 2);
  PropagationState s = make_state(x, x, 0.0);
  CHECK_THROWS_AS(loaq_target(random_matrix(rng, 2, 2), s, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("target is linear in alpha") {
  Rng rng(5);
  Matrix x = random_matrix(rng, 8, 4);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 8, 4);
  Matrix w = random_matrix(rng, 4, 3);
  PropagationState s = make_state(x, x_hat, 0.0);
  Matrix w1 = qep_target(w, s, 1.0);
  for (double alpha : {0.2, 0.55, 0.9}) {
    Matrix lhs = qep_target(w, s, alpha);
    Matrix rhs = (1.0 - alpha) * w + alpha * w1;
    CHECK((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
  }
}

TEST_CASE("residual target is jointly affine in (alpha, beta)") {
  Rng rng(6);
  Matrix x = random_matrix(rng, 8, 4);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 8, 4);
  Matrix r = random_matrix(rng, 8, 3);
  Matrix r_hat = r + 0.1 * random_matrix(rng, 8, 3);
  Matrix w = random_matrix(rng, 4, 3);
  PropagationState s = make_state(x, x_hat, r, r_hat, 0.0);
  double a = 0.6, b = 0.3;
  Matrix mixed = loaq_target(w, s, a, b);
  Matrix decomposed = loaq_target(w, s, a, 0.0) + loaq_target(w, s, 0.0, b) - w;
  CHECK((mixed - decomposed).norm() <= 1e-12 * (1.0 + mixed.norm()));
}

TEST_CASE("full correction projects the reference output onto the quantized inputs") {
  Rng rng(7);
  Matrix x = random_matrix(rng, 10, 4);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 10, 4);
  Matrix w = random_matrix(rng, 4, 3);
  PropagationState s = make_state(x, x_hat, 0.0);
  Matrix t = qep_target(w, s, 1.0);
  Matrix resid = x_hat.transpose() * (x_hat * t - x * w);
  CHECK(resid.norm() <= 1e-8 * (1.0 + (x * w).norm()));
}

TEST_CASE("normalized target with unit scales is the plain target") {
  Rng rng(8);
  Matrix x = random_matrix(rng, 6, 3);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 6, 3);
  Matrix r = random_matrix(rng, 6, 2);
  Matrix r_hat = r + 0.1 * random_matrix(rng, 6, 2);
  Matrix w = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x_hat, r, r_hat, 0.01);
  Matrix plain = loaq_target(w, s, 1.0, 0.5);
  Matrix normed = loaq_normalized_target(w, s, Vector::Ones(6), 1.0, 0.5);
  CHECK((plain - normed).norm() == 0.0);
}

TEST_CASE("uniform scales factor out of the normalized target") {
  Rng rng(9);
  Matrix x = random_matrix(rng, 6, 3);
  Matrix x_hat = x + 0.1 * random_matrix(rng, 6, 3);
  Matrix r = random_matrix(rng, 6, 2);
  Matrix r_hat = r + 0.1 * random_matrix(rng, 6, 2);
  Matrix w = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x_hat, r, r_hat, 0.01);
  Matrix plain = loaq_target(w, s, 1.0, 0.5);
  Matrix normed = loaq_normalized_target(w, s, Vector::Constant(6, 2.5), 1.0, 0.5);
  CHECK((plain - normed).norm() <= 1e-12 * (1.0 + plain.norm()));
}

TEST_CASE("per-token scales solve the row-weighted least squares") {
  // two-token scalar instance, scales {1, 2}
  Matrix x(2, 1), x_hat(2, 1), r(2, 1), r_hat(2, 1), w(1, 1);
  x << 2.0, 1.0;
  x_hat << 1.5, 0.5;
  r << 5.0, 2.0;
  r_hat << 4.0, 2.5;
  w << 3.0;
  Vector scales(2);
  scales << 1.0, 2.0;
  PropagationState s = make_state(x, x_hat, r, r_hat, 0.0);
  Matrix t = loaq_normalized_target(w, s, scales, 1.0, 1.0);

  // direct 1-D weighted solve: argmin_w sum_t s_t^2 ((r_hat + x_hat w) - (r + x W))^2
  double num = 0.0, den = 0.0;
  for (int i = 0; i < 2; ++i) {
    double s2 = scales(i) * scales(i);
    num += s2 * x_hat(i, 0) * (r(i, 0) - r_hat(i, 0) + x(i, 0) * w(0, 0));
    den += s2 * x_hat(i, 0) * x_hat(i, 0);
  }
  CHECK(t(0, 0) == doctest::Approx(num / den).epsilon(1e-12));

  // and equals the plain target on manually row-scaled streams
  Matrix d = scales.asDiagonal();
  PropagationState s2 = make_state(d * x, d * x_hat, d * r, d * r_hat, 0.0);
  Matrix t2 = loaq_target(w, s2, 1.0, 1.0);
  CHECK(t(0, 0) == doctest::Approx(t2(0, 0)).epsilon(1e-14));
}

TEST_CASE("nonpositive scales are rejected") {
  Rng rng(10);
  Matrix x = random_matrix(rng, 3, 2);
  Matrix r = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x, r, r, 0.0);
  Vector bad = Vector::Ones(3);
  bad(1) = 0.0;
  CHECK_THROWS_AS(loaq_normalized_target(random_matrix(rng, 2, 2), s, bad, 1.0, 1.0),
                  std::invalid_argument);
}

TEST_CASE("singular undamped Gram matrix surfaces as a damping hint") {
  Rng rng(11);
  Matrix x_hat = Matrix::Zero(3, 2);
  Matrix x = random_matrix(rng, 3, 2);
  PropagationState s = make_state(x, x_hat, 0.0);
  CHECK(s.h_hat.singular_flag);
  CHECK_THROWS_WITH_AS(qep_target(Matrix::Ones(2, 2), s, 1.0),
                       doctest::Contains("damping_fraction"), std::runtime_error);
}

}  // TEST_SUITE
