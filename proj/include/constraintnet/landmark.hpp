#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "constraintnet/constraints.hpp"
#include "constraintnet/model.hpp"
#include "constraintnet/rng.hpp"
#include "constraintnet/tensor.hpp"

namespace cnet {

// Landmark vector component order: (x_n, x_le, x_re, y_n, y_le, y_re) with
// x = column and y = row, the y axis pointing down. Indices 0-2 are x
// coordinates of nose / left eye / right eye, 3-5 the matching y coordinates.
inline constexpr std::size_t kNoseX = 0, kLeftEyeX = 1, kRightEyeX = 2;
inline constexpr std::size_t kNoseY = 3, kLeftEyeY = 4, kRightEyeY = 5;

struct LandmarkScene {
    Tensor image;  // 1 x H x W, grayscale in [0, 1]
    std::array<double, 6> landmarks{};
    std::uint64_t seed = 0;
};

// Generation ranges. Defaults keep every feature at least 2 px inside the
// border of a 32 x 32 frame and the eyes strictly above the nose.
struct SceneConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    double center_lo = 12.0, center_hi = 20.0;
    double head_ax_lo = 7.0, head_ax_hi = 11.0;
    double head_ay_lo = 8.0, head_ay_hi = 12.0;
    double eye_dx_lo = 3.0, eye_dx_hi = 5.5;
    double eye_dy_lo = 2.5, eye_dy_hi = 5.0;
    double eye_jitter = 0.75;
    double nose_jitter = 1.0;
    double nose_dy_lo = 2.0, nose_dy_hi = 4.5;
    double eye_radius_lo = 1.0, eye_radius_hi = 2.0;
    double nose_radius_lo = 1.0, nose_radius_hi = 1.8;
    double background = 0.08;
    double head_value = 0.75;
    double eye_value = 0.2;
    double nose_value = 0.45;
    double noise_sigma = 0.02;
};

LandmarkScene generate_scene(Rng& rng, const SceneConfig& config);

// count scenes, each from its own stream keyed by index.
std::vector<LandmarkScene> generate_dataset(std::uint64_t seed, std::size_t count,
                                            const SceneConfig& config);

// Binary dataset container (little-endian), deterministic per content.
void write_dataset(const std::string& path, const std::vector<LandmarkScene>& scenes,
                   const SceneConfig& config);
std::vector<LandmarkScene> read_dataset(const std::string& path, SceneConfig& config_out);

// Axis-aligned box in pixel units, l < u on both axes.
struct BoxParam {
    double l_x = 0.0, u_x = 0.0, l_y = 0.0, u_y = 0.0;
};

// Tight box over the three landmarks, each boundary pushed outward by an
// independent uniform integer margin in [margin_lo, margin_hi], clipped to
// the image. Always contains the landmarks.
BoxParam sample_box(const std::array<double, 6>& landmarks, Rng& rng, int margin_lo, int margin_hi,
                    const SceneConfig& config);

// All six components confined to the box: product of six 1-d segments,
// x components over [l_x, u_x] and y components over [l_y, u_y].
ConstraintSpec box_constraint(const BoxParam& box, const SceneConfig& config);

// Box confinement plus the relations x_le <= x_re and y_le, y_re <= y_n,
// expressed as a product over regrouped output parts: a segment for x_n, a
// triangle for (x_le, x_re) and a five-vertex pyramid for (y_n, y_le, y_re).
ConstraintSpec relational_constraint(const BoxParam& box, const SceneConfig& config);

// Position i of the regrouped relational output holds canonical component
// relational_regroup_permutation()[i]. (The regrouping preserves order, so
// this is the identity; kept explicit so downstream code never assumes it.)
std::array<std::size_t, 6> relational_regroup_permutation();
std::array<std::size_t, 6> invert_permutation(const std::array<std::size_t, 6>& perm);
std::array<double, 6> apply_permutation(const std::array<double, 6>& v,
                                        const std::array<std::size_t, 6>& perm);

// Nose-only constraints built around the true nose position.
ConstraintSpec triangle_nose_constraint(const std::array<double, 2>& nose, Rng& rng,
                                        const SceneConfig& config);
ConstraintSpec sector_nose_constraint(const std::array<double, 2>& nose, Rng& rng,
                                      const SceneConfig& config);

// Default trunks. Dense: flattened image -> 128 -> 64 -> z with the rescaled
// constraint parameter concatenated ahead of the final layer. Conv: two
// strided convolutions with the parameter broadcast as constant channels
// after the first one.
ConstraintNetModel build_landmark_dense_model(const ConstraintSpec& constraint,
                                              const SceneConfig& config, std::uint64_t seed);
ConstraintNetModel build_landmark_conv_model(const ConstraintSpec& constraint,
                                             const SceneConfig& config, std::uint64_t seed);

}  // namespace cnet
