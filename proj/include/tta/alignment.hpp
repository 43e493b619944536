#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "tta/errors.hpp"
#include "tta/matrix.hpp"
#include "tta/spd_linalg.hpp"

namespace tta {

// Euclidean-alignment state machine: running reference covariance, its cached
// inverse square root, and the accumulated effective weight.
struct AlignerState {
  SpdMatrix reference;
  Matrix ref_inv_sqrt;
  double mass = 0.0;
  double omega = 500.0;
  std::size_t floor_events = 0;

  void refresh_cache() { ref_inv_sqrt = inv_sqrt(reference, 0.0, &floor_events); }
};

// Reference = mean covariance over the training corpus; mass = N.
inline AlignerState fit_reference(const std::vector<Matrix>& trials,
                                  double omega = 500.0) {
  if (trials.empty()) throw EmptyCorpus("fit_reference: no trials");
  const std::size_t c = trials[0].rows, t = trials[0].cols;
  AlignerState state;
  state.omega = omega;
  state.reference = SpdMatrix(c);
  for (const Matrix& x : trials) {
    if (x.rows != c || x.cols != t)
      throw ShapeMismatch("fit_reference: inconsistent trial shapes");
    const SpdMatrix cov = covariance(x);
    for (std::size_t i = 0; i < cov.data.size(); ++i)
      state.reference.data[i] += cov.data[i];
  }
  const double inv_n = 1.0 / static_cast<double>(trials.size());
  for (double& v : state.reference.data) v *= inv_n;
  state.mass = static_cast<double>(trials.size());
  state.refresh_cache();
  return state;
}

// Whiten with the current reference; state untouched.
inline Matrix align_offline(const AlignerState& state, const Matrix& trial) {
  if (trial.rows != state.reference.dim)
    throw ShapeMismatch("align_offline: channel count mismatch");
  return state.ref_inv_sqrt * trial;
}

// Streaming weighted-average reference update; mass grows by omega.
inline AlignerState update_reference(AlignerState state, const Matrix& trial) {
  const SpdMatrix cov = covariance(trial);
  if (cov.dim != state.reference.dim)
    throw ShapeMismatch("update_reference: channel count mismatch");
  const double denom = state.mass + state.omega;
  for (std::size_t i = 0; i < cov.data.size(); ++i)
    state.reference.data[i] =
        (state.mass * state.reference.data[i] + state.omega * cov.data[i]) / denom;
  state.mass = denom;
  state.refresh_cache();
  return state;
}

// Update-then-whiten: the current trial is whitened by the updated reference.
inline std::pair<Matrix, AlignerState> align_online(AlignerState state,
                                                    const Matrix& trial) {
  state = update_reference(std::move(state), trial);
  Matrix aligned = align_offline(state, trial);
  return {std::move(aligned), std::move(state)};
}

}  // namespace tta
