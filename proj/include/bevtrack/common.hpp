#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace bevtrack {

// Violated precondition or broken internal invariant.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// An operation produced NaN/Inf or otherwise left the representable domain.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk artifact (scene file, checkpoint, ...).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Vec2 = std::array<double, 2>;
using Vec3 = std::array<double, 3>;

// Rigid BEV transform: pose of the vehicle in the world frame.
struct SE2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec2 world_to_local(const Vec2& p) const {
    const double c = std::cos(heading), s = std::sin(heading);
    const double dx = p[0] - x, dy = p[1] - y;
    return {c * dx + s * dy, -s * dx + c * dy};
  }
  Vec2 local_to_world(const Vec2& p) const {
    const double c = std::cos(heading), s = std::sin(heading);
    return {x + c * p[0] - s * p[1], y + s * p[0] + c * p[1]};
  }
  Vec2 rotate_world_to_local(const Vec2& v) const {
    const double c = std::cos(heading), s = std::sin(heading);
    return {c * v[0] + s * v[1], -s * v[0] + c * v[1]};
  }
  Vec2 rotate_local_to_world(const Vec2& v) const {
    const double c = std::cos(heading), s = std::sin(heading);
    return {c * v[0] - s * v[1], s * v[0] + c * v[1]};
  }
};

// Wrap an angle into [-pi, pi).
inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

}  // namespace bevtrack
