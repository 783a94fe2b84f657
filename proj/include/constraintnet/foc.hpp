#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "constraintnet/model.hpp"
#include "constraintnet/rng.hpp"
#include "constraintnet/training.hpp"

namespace cnet {

// Two-vehicle longitudinal state. Relative quantities are target minus ego:
// x_rel is the bumper-to-bumper gap (positive when the target is ahead),
// v_rel and a_rel the relative velocity and acceleration, a_ego the ego's
// current actual acceleration.
struct FocState {
    double x_rel = 0.0;
    double v_rel = 0.0;
    double a_rel = 0.0;
    double v_ego = 0.0;
    double a_ego = 0.0;
};

struct FocLimits {
    double j_max = 2.5;    // max jerk magnitude, m/s^3
    double a_floor = -3.5; // max deceleration, m/s^2 (hook for a velocity-dependent table)
    double d_min = 2.0;    // minimal allowed gap, m
    double a_cap = 3.0;    // max demanded acceleration, m/s^2
    double tau = 1.8;      // time gap for the set-point distance, s
};

// Admissible demanded-acceleration interval. Collapses to
// [a_floor, a_floor] when even full braking cannot hold the gap.
struct SafeInterval {
    double a_min = 0.0;
    double a_max = 0.0;
};

// Set-point gap d_min + tau * v_ego.
double x_rel_set(double v_ego, const FocLimits& limits);

// Braking-envelope check: the ego applies a_dem immediately, ramps toward
// the deceleration floor at maximal jerk and holds it; the target keeps its
// current absolute acceleration (speed clamped at zero). Semi-implicit Euler
// at dt; the horizon ends when both vehicles stand still, the gap is opening
// (v_rel >= 0) at gap >= d_min, or 60 s elapse. True iff the gap never drops
// below d_min. Safety is monotone decreasing in a_dem.
bool is_safe_accel(double a_dem, const FocState& state, const FocLimits& limits, double dt = 0.01);

// a_min is the deceleration floor; a_max the largest safe demanded
// acceleration in [a_floor, a_cap], found by bisection to tolerance tol
// (the returned a_max itself passes is_safe_accel).
SafeInterval safe_interval(const FocState& state, const FocLimits& limits, double dt = 0.01,
                           double tol = 1e-3);

struct RefGains {
    double k_d = 0.15;  // 1/s^2, gap-error feedback
    double k_v = 0.8;   // 1/s, relative-velocity feedback
};

// Proportional gap/velocity controller clamped to [a_floor, a_cap]; the
// imitation target for the learned controller.
double reference_controller(const FocState& state, const FocLimits& limits,
                            const RefGains& gains = {});

struct FocNetConfig {
    std::vector<std::size_t> hidden = {32, 32};
    std::uint64_t seed = 0;
    FocLimits limits;
};

// Dense net on (x_rel, v_rel, a_rel, v_ego) with the rescaled interval bounds
// concatenated to the input and a two-vertex guard over {a_min, a_max}.
ConstraintNetModel build_foc_net(const FocNetConfig& config);

// Piecewise-constant target acceleration: segments of (start time, accel),
// sorted by start time; the last segment extends to infinity.
struct TargetProfile {
    std::vector<std::pair<double, double>> segments;
    double accel_at(double t) const;
};

struct Scenario {
    FocState initial;
    TargetProfile profile;
    double duration = 20.0;
};

struct SimStep {
    double t = 0.0;
    double x_rel = 0.0;
    double v_rel = 0.0;
    double v_ego = 0.0;
    double a_dem = 0.0;
    double a_min = 0.0;
    double a_max = 0.0;
    bool violation = false;  // gap < d_min after this step
};

struct SimResult {
    std::vector<SimStep> steps;
    std::size_t violation_events = 0;  // gap < d_min
    std::size_t collision_events = 0;  // gap <= 0
};

using ControllerFn = std::function<double(const FocState&, const SafeInterval&)>;

ControllerFn make_reference_controller(const FocLimits& limits, const RefGains& gains = {});
ControllerFn make_net_controller(const ConstraintNetModel& model);

// Closed-loop rollout. The ego tracks the demanded acceleration through a
// jerk-limited actuator; the per-step safe interval is computed and logged
// for every controller. Physics stepping matches is_safe_accel exactly.
SimResult simulate(const ControllerFn& controller, const FocState& initial,
                   const TargetProfile& profile, const FocLimits& limits, double duration,
                   double dt = 0.01);

void write_trajectory_csv(std::ostream& out, const SimResult& result);

nlohmann::json scenarios_to_json(const std::vector<Scenario>& scenarios);
std::vector<Scenario> scenarios_from_json(const nlohmann::json& j);

// Random state with x_rel in [5, 150], speeds in [0, 40], and
// is_safe_accel(a_ego) holding (rejection sampled).
FocState random_safe_state(Rng& rng, const FocLimits& limits, double dt = 0.01);

// Scenario around a random safe state; the (single-segment) profile matches
// the state's relative acceleration at t = 0.
Scenario random_scenario(Rng& rng, const FocLimits& limits, double dt = 0.01);

nlohmann::json foc_states_to_json(const std::vector<FocState>& states);
std::vector<FocState> foc_states_from_json(const nlohmann::json& j);

// Supervised imitation pairs: per state, the input features, the
// safety-clamped reference command as label, and the exact safe interval as
// the (unique) valid constraint.
struct FocImitationData {
    std::vector<Sample> samples;
    std::vector<ConstraintSpec> specs;
};
FocImitationData foc_imitation_data(const std::vector<FocState>& states, const FocLimits& limits,
                                    double dt = 0.01);

// Input feature vector (x_rel, v_rel, a_rel, v_ego).
Tensor foc_features(const FocState& state);

}  // namespace cnet
