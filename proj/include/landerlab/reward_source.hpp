#pragma once

#include <functional>
#include <limits>
#include <string>

#include "landerlab/dense_net.hpp"

namespace landerlab {

// Per-step reward as a function of the observation reached. `batch` maps a
// matrix of observations (one per row) to their rewards.
struct RewardSource {
  std::string id;
  std::function<Vector(const Matrix&)> batch;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();

  double operator()(const Observation& o) const {
    Matrix m = to_row(o);
    return batch(m)[0];
  }
};

inline RewardSource constant_reward(double value) {
  return {"constant", [value](const Matrix& m) { return Vector(Vector::Constant(m.rows(), value)); },
          value, value};
}

}  // namespace landerlab
