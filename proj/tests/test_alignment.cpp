#include <cmath>

#include "doctest.h"
#include "tta/alignment.hpp"
#include "tta/rng.hpp"

using namespace tta;

namespace {

Matrix random_trial(Rng& rng, std::size_t c, std::size_t t) {
  Matrix m(c, t);
  for (double& v : m.data) v = rng.normal();
  return m;
}

// Trial whose sample covariance is exactly diag(d, d): orthogonal rows of
// equal norm.
Matrix diag_cov_trial(double d) {
  Matrix m(2, 4);
  // rows orthogonal over time, zero mean; variance a^2/3 after the 0.5 scale
  const double a = std::sqrt(d * 3.0);
  m(0, 0) = a; m(0, 1) = -a; m(0, 2) = a; m(0, 3) = -a;
  m(1, 0) = a; m(1, 1) = a; m(1, 2) = -a; m(1, 3) = -a;
  // each row: mean 0, sum of squares 4a^2, var = 4a^2/3 = 4d -> fix scale
  for (double& v : m.data) v *= 0.5;
  return m;
}

}  // namespace

TEST_CASE("diag_cov_trial helper produces the intended covariance") {
  const SpdMatrix c = covariance(diag_cov_trial(2.0));
  CHECK(c.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(c.at(1, 1) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(c.at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("fit_reference basics") {
  CHECK_THROWS_AS(fit_reference({}), EmptyCorpus);

  Rng rng(3);
  const Matrix single = random_trial(rng, 3, 16);
  const AlignerState one = fit_reference({single});
  CHECK(one.mass == 1.0);
  const SpdMatrix cov = covariance(single);
  for (std::size_t i = 0; i < cov.data.size(); ++i)
    CHECK(one.reference.data[i] == doctest::Approx(cov.data[i]).epsilon(1e-12));

  // mean of diag(2,2) and diag(4,4) is diag(3,3)
  const AlignerState two = fit_reference({diag_cov_trial(2.0), diag_cov_trial(4.0)});
  CHECK(two.reference.at(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(two.reference.at(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(two.mass == 2.0);

  Matrix wrong_shape = random_trial(rng, 4, 16);
  CHECK_THROWS_AS(fit_reference({single, wrong_shape}), ShapeMismatch);
}

TEST_CASE("align_offline whitening") {
  Rng rng(5);
  // reference = I -> identity map
  AlignerState id;
  id.reference = SpdMatrix::identity(2);
  id.mass = 1.0;
  id.refresh_cache();
  const Matrix x = random_trial(rng, 2, 8);
  const Matrix y = align_offline(id, x);
  CHECK(frobenius_distance(x, y) < 1e-12);

  // reference = diag(4,4) -> 0.5 * trial
  AlignerState d4;
  d4.reference = SpdMatrix(2);
  d4.reference.at(0, 0) = d4.reference.at(1, 1) = 4.0;
  d4.mass = 1.0;
  d4.refresh_cache();
  const Matrix h = align_offline(d4, x);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    CHECK(h.data[i] == doctest::Approx(0.5 * x.data[i]).epsilon(1e-12));

  CHECK_THROWS_AS(align_offline(id, random_trial(rng, 3, 8)), ShapeMismatch);
}

TEST_CASE("whitening identity over a corpus") {
  Rng rng(17);
  std::vector<Matrix> trials;
  for (int i = 0; i < 30; ++i) trials.push_back(random_trial(rng, 6, 64));
  const AlignerState state = fit_reference(trials);

  // exact sample version: W Rbar W = I
  const Matrix w = state.ref_inv_sqrt;
  const Matrix prod = w * state.reference.as_matrix() * w;
  CHECK(frobenius_distance(prod, Matrix::identity(6)) < 1e-8);

  // mean covariance of aligned trials is I
  SpdMatrix mean(6);
  for (const Matrix& x : trials) {
    const SpdMatrix c = covariance(align_offline(state, x));
    for (std::size_t i = 0; i < c.data.size(); ++i) mean.data[i] += c.data[i];
  }
  for (double& v : mean.data) v /= static_cast<double>(trials.size());
  CHECK(frobenius_distance(mean.as_matrix(), Matrix::identity(6)) < 1e-6);
}

TEST_CASE("update_reference hand case and zero-weight boundary") {
  AlignerState s;
  s.reference = SpdMatrix(2);
  s.reference.at(0, 0) = s.reference.at(1, 1) = 2.0;
  s.mass = 1.0;
  s.omega = 1.0;
  s.refresh_cache();

  const AlignerState u = update_reference(s, diag_cov_trial(4.0));
  CHECK(u.reference.at(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(u.mass == 2.0);

  s.omega = 0.0;
  const AlignerState z = update_reference(s, diag_cov_trial(4.0));
  CHECK(z.reference.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(z.mass == 1.0);
}

TEST_CASE("online closed-form unrolling oracle") {
  Rng rng(29);
  std::vector<Matrix> train;
  for (int i = 0; i < 12; ++i) train.push_back(random_trial(rng, 4, 32));
  for (double omega : {1.0, 500.0}) {
    AlignerState state = fit_reference(train, omega);
    const SpdMatrix r_train = state.reference;
    const double n = state.mass;

    SpdMatrix cov_sum(4);
    const int m_updates = 40;
    for (int m = 1; m <= m_updates; ++m) {
      const Matrix trial = random_trial(rng, 4, 32);
      const SpdMatrix cov = covariance(trial);
      for (std::size_t i = 0; i < cov.data.size(); ++i) cov_sum.data[i] += cov.data[i];
      auto [aligned, next] = align_online(std::move(state), trial);
      state = std::move(next);

      // mass after k updates = N + k*omega exactly
      CHECK(state.mass == n + m * omega);
      const double denom = n + m * omega;
      for (std::size_t i = 0; i < cov_sum.data.size(); ++i) {
        const double expect = (n * r_train.data[i] + omega * cov_sum.data[i]) / denom;
        CHECK(state.reference.data[i] ==
              doctest::Approx(expect).epsilon(1e-12).scale(1.0));
      }
    }
  }
}

TEST_CASE("stationary stream matches offline alignment") {
  // all covariances equal the reference: the reference never moves
  const Matrix trial = diag_cov_trial(2.0);
  AlignerState state = fit_reference({trial, trial, trial});
  const Matrix offline = align_offline(state, trial);
  for (int i = 0; i < 5; ++i) {
    auto [aligned, next] = align_online(std::move(state), trial);
    state = std::move(next);
    CHECK(frobenius_distance(aligned, offline) < 1e-10);
  }
}

TEST_CASE("large-omega limit whitens with the trial's own covariance") {
  Rng rng(41);
  const Matrix trial = random_trial(rng, 3, 64);
  AlignerState state = fit_reference({random_trial(rng, 3, 64)}, /*omega=*/1e12);
  auto [aligned, next] = align_online(std::move(state), trial);
  const Matrix expect = inv_sqrt(covariance(trial)) * trial;
  CHECK(frobenius_distance(aligned, expect) / frobenius_norm(expect) < 1e-5);
}

TEST_CASE("reference is permutation-invariant, aligned outputs are not") {
  Rng rng(53);
  std::vector<Matrix> stream;
  for (int i = 0; i < 6; ++i) stream.push_back(random_trial(rng, 3, 32));
  std::vector<Matrix> train{random_trial(rng, 3, 32)};

  AlignerState fwd = fit_reference(train);
  AlignerState rev = fit_reference(train);
  Matrix first_fwd, first_rev;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    auto [af, nf] = align_online(std::move(fwd), stream[i]);
    fwd = std::move(nf);
    if (i == stream.size() - 1) first_fwd = af;
    auto [ar, nr] = align_online(std::move(rev), stream[stream.size() - 1 - i]);
    rev = std::move(nr);
    if (i == 0) first_rev = ar;
  }
  CHECK(frobenius_distance(fwd.reference.as_matrix(), rev.reference.as_matrix()) <
        1e-10);
  // same trial (the last of the forward stream) aligned at different points
  // in the stream comes out different
  CHECK(frobenius_distance(first_fwd, first_rev) > 1e-6);
}
