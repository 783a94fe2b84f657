#include "constraintnet/foc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "constraintnet/errors.hpp"

namespace cnet {

double x_rel_set(double v_ego, const FocLimits& limits) {
    return limits.d_min + limits.tau * v_ego;
}

bool is_safe_accel(double a_dem, const FocState& state, const FocLimits& limits, double dt) {
    if (!(dt > 0.0)) throw UsageError("is_safe_accel: dt must be positive");
    double gap = state.x_rel;
    double v_e = state.v_ego;
    double v_t = std::max(0.0, state.v_ego + state.v_rel);
    const double a_t = state.a_rel + state.a_ego;  // target's absolute acceleration, held
    if (gap < limits.d_min) return false;
    if (v_t - v_e >= 0.0) return true;  // already opening at an admissible gap
    double t = 0.0;
    const double horizon = 60.0;
    while (t < horizon) {
        const double a_e = std::max(limits.a_floor, a_dem - limits.j_max * t);
        v_e = std::max(0.0, v_e + a_e * dt);
        v_t = std::max(0.0, v_t + a_t * dt);
        gap += (v_t - v_e) * dt;
        t += dt;
        if (gap < limits.d_min) return false;
        if (v_e == 0.0 && v_t == 0.0) return true;
        if (v_t - v_e >= 0.0) return true;
    }
    return true;
}

SafeInterval safe_interval(const FocState& state, const FocLimits& limits, double dt, double tol) {
    SafeInterval interval{limits.a_floor, limits.a_floor};
    if (!is_safe_accel(limits.a_floor, state, limits, dt)) {
        return interval;  // emergency braking: collapsed interval
    }
    if (is_safe_accel(limits.a_cap, state, limits, dt)) {
        interval.a_max = limits.a_cap;
        return interval;
    }
    double lo = limits.a_floor, hi = limits.a_cap;
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        if (is_safe_accel(mid, state, limits, dt)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    interval.a_max = lo;  // the safe end of the final bracket
    return interval;
}

double reference_controller(const FocState& state, const FocLimits& limits, const RefGains& gains) {
    const double gap_error = state.x_rel - x_rel_set(state.v_ego, limits);
    const double a = gains.k_d * gap_error + gains.k_v * state.v_rel;
    return std::clamp(a, limits.a_floor, limits.a_cap);
}

ConstraintNetModel build_foc_net(const FocNetConfig& config) {
    ConstraintSpec constraint = ConstraintSpec::make_polytope(
        2, 1, {config.limits.a_floor, config.limits.a_cap}, config.limits.a_floor,
        config.limits.a_cap);
    TrunkConfig trunk;
    trunk.input_shape = {4};
    std::size_t in = 4 + constraint.s_dim();
    for (std::size_t h : config.hidden) {
        trunk.layers.push_back(LayerCfg::make_dense(in, h, Activation::relu));
        in = h;
    }
    trunk.layers.push_back(LayerCfg::make_dense(in, constraint.z_dim(), Activation::linear));
    GRepr g;
    g.mode = GMode::vector_concat;
    g.insertion_layer = 0;  // the net is small, feed the bounds with the input
    g.scale = schema_scale_factors(constraint);
    return ConstraintNetModel(std::move(trunk), std::move(g), constraint, config.seed);
}

double TargetProfile::accel_at(double t) const {
    double a = 0.0;
    for (const auto& [start, accel] : segments) {
        if (t + 1e-12 >= start) a = accel;
    }
    return a;
}

ControllerFn make_reference_controller(const FocLimits& limits, const RefGains& gains) {
    return [limits, gains](const FocState& state, const SafeInterval&) {
        return reference_controller(state, limits, gains);
    };
}

ControllerFn make_net_controller(const ConstraintNetModel& model) {
    return [&model](const FocState& state, const SafeInterval& interval) {
        const double s[2] = {interval.a_min, interval.a_max};
        Tensor out = model.forward(foc_features(state), std::span<const double>(s, 2));
        return out[0];
    };
}

Tensor foc_features(const FocState& state) {
    return Tensor::vector({state.x_rel, state.v_rel, state.a_rel, state.v_ego});
}

SimResult simulate(const ControllerFn& controller, const FocState& initial,
                   const TargetProfile& profile, const FocLimits& limits, double duration,
                   double dt) {
    if (!(dt > 0.0)) throw UsageError("simulate: dt must be positive");
    SimResult result;
    double gap = initial.x_rel;
    double v_e = initial.v_ego;
    double v_t = std::max(0.0, initial.v_ego + initial.v_rel);
    double a_e = initial.a_ego;
    const auto steps = static_cast<std::size_t>(std::llround(duration / dt));
    result.steps.reserve(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        const double a_prof = profile.accel_at(t);
        // Effective target acceleration over the coming step (zero once the
        // target stands still), so the envelope check sees what will happen.
        const double a_t_eff = (std::max(0.0, v_t + a_prof * dt) - v_t) / dt;
        const FocState state{gap, v_t - v_e, a_t_eff - a_e, v_e, a_e};
        const SafeInterval interval = safe_interval(state, limits, dt);
        const double a_dem = controller(state, interval);
        a_e += std::clamp(a_dem - a_e, -limits.j_max * dt, limits.j_max * dt);

        SimStep row;
        row.t = t;
        row.x_rel = gap;
        row.v_rel = v_t - v_e;
        row.v_ego = v_e;
        row.a_dem = a_dem;
        row.a_min = interval.a_min;
        row.a_max = interval.a_max;

        // Same integration scheme as is_safe_accel.
        v_e = std::max(0.0, v_e + a_e * dt);
        v_t = std::max(0.0, v_t + a_prof * dt);
        gap += (v_t - v_e) * dt;

        row.violation = gap < limits.d_min;
        if (row.violation) result.violation_events += 1;
        if (gap <= 0.0) result.collision_events += 1;
        result.steps.push_back(row);
    }
    return result;
}

void write_trajectory_csv(std::ostream& out, const SimResult& result) {
    out << "t,x_rel,v_rel,v_ego,a_dem,a_min,a_max,violation\n";
    char buf[320];
    for (const auto& s : result.steps) {
        std::snprintf(buf, sizeof(buf), "%.4f,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%d\n", s.t,
                      s.x_rel, s.v_rel, s.v_ego, s.a_dem, s.a_min, s.a_max, s.violation ? 1 : 0);
        out << buf;
    }
}

nlohmann::json scenarios_to_json(const std::vector<Scenario>& scenarios) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& sc : scenarios) {
        nlohmann::json profile = nlohmann::json::array();
        for (const auto& [t, a] : sc.profile.segments) profile.push_back({t, a});
        arr.push_back({{"initial",
                        {{"x_rel", sc.initial.x_rel},
                         {"v_rel", sc.initial.v_rel},
                         {"a_rel", sc.initial.a_rel},
                         {"v_ego", sc.initial.v_ego},
                         {"a_ego", sc.initial.a_ego}}},
                       {"target_profile", profile},
                       {"duration", sc.duration}});
    }
    return arr;
}

std::vector<Scenario> scenarios_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw ParseError("scenario file: expected a top-level array");
    std::vector<Scenario> scenarios;
    for (std::size_t i = 0; i < j.size(); ++i) {
        try {
            const auto& e = j.at(i);
            Scenario sc;
            const auto& init = e.at("initial");
            sc.initial.x_rel = init.at("x_rel").get<double>();
            sc.initial.v_rel = init.at("v_rel").get<double>();
            sc.initial.a_rel = init.at("a_rel").get<double>();
            sc.initial.v_ego = init.at("v_ego").get<double>();
            sc.initial.a_ego = init.at("a_ego").get<double>();
            for (const auto& seg : e.at("target_profile")) {
                sc.profile.segments.emplace_back(seg.at(0).get<double>(), seg.at(1).get<double>());
            }
            sc.duration = e.at("duration").get<double>();
            if (!(sc.initial.x_rel > 0.0) || !(sc.initial.v_ego >= 0.0)) {
                throw ParseError("initial state out of range");
            }
            scenarios.push_back(std::move(sc));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError("scenario entry " + std::to_string(i) + ": " + ex.what());
        } catch (const ParseError& ex) {
            throw ParseError("scenario entry " + std::to_string(i) + ": " + ex.what());
        }
    }
    return scenarios;
}

FocState random_safe_state(Rng& rng, const FocLimits& limits, double dt) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        FocState st;
        st.x_rel = rng.uniform(5.0, 150.0);
        st.v_ego = rng.uniform(0.0, 40.0);
        const double v_target = rng.uniform(0.0, 40.0);
        st.v_rel = v_target - st.v_ego;
        st.a_ego = rng.uniform(-2.0, 2.0);
        const double a_target = rng.uniform(-3.0, 2.0);
        st.a_rel = a_target - st.a_ego;
        if (is_safe_accel(st.a_ego, st, limits, dt)) return st;
    }
    throw UsageError("failed to draw a safe state after 10000 attempts");
}

Scenario random_scenario(Rng& rng, const FocLimits& limits, double dt) {
    Scenario sc;
    sc.initial = random_safe_state(rng, limits, dt);
    sc.profile.segments = {{0.0, sc.initial.a_rel + sc.initial.a_ego}};
    sc.duration = 20.0;
    return sc;
}

nlohmann::json foc_states_to_json(const std::vector<FocState>& states) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& st : states) {
        arr.push_back({{"x_rel", st.x_rel},
                       {"v_rel", st.v_rel},
                       {"a_rel", st.a_rel},
                       {"v_ego", st.v_ego},
                       {"a_ego", st.a_ego}});
    }
    return nlohmann::json{{"task", "foc"}, {"states", arr}};
}

std::vector<FocState> foc_states_from_json(const nlohmann::json& j) {
    try {
        if (j.value("task", "") != "foc") throw ParseError("state file: expected task 'foc'");
        std::vector<FocState> states;
        for (const auto& e : j.at("states")) {
            FocState st;
            st.x_rel = e.at("x_rel").get<double>();
            st.v_rel = e.at("v_rel").get<double>();
            st.a_rel = e.at("a_rel").get<double>();
            st.v_ego = e.at("v_ego").get<double>();
            st.a_ego = e.at("a_ego").get<double>();
            states.push_back(st);
        }
        return states;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("state file: ") + ex.what());
    }
}

FocImitationData foc_imitation_data(const std::vector<FocState>& states, const FocLimits& limits,
                                    double dt) {
    FocImitationData data;
    data.samples.reserve(states.size());
    data.specs.reserve(states.size());
    for (const auto& st : states) {
        const SafeInterval interval = safe_interval(st, limits, dt);
        const double label =
            std::clamp(reference_controller(st, limits), interval.a_min, interval.a_max);
        data.samples.push_back({foc_features(st), Tensor::vector({label})});
        data.specs.push_back(ConstraintSpec::make_polytope(
            2, 1, {interval.a_min, interval.a_max}, limits.a_floor, limits.a_cap));
    }
    return data;
}

}  // namespace cnet
