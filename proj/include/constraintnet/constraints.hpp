#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "constraintnet/autodiff.hpp"
#include "constraintnet/rng.hpp"
#include "constraintnet/tensor.hpp"

namespace cnet {

// Convex hull of M explicit N-dimensional vertices. The flattened vertex
// matrix doubles as the constraint parameter, so s has length M*N.
// Degenerate vertex sets (duplicates, collinear points) are permitted.
struct ConvexPolytope {
    std::size_t vertex_count = 0;  // M
    std::size_t dim = 0;           // N
    std::vector<double> vertices;  // M x N, row-major

    double vertex(std::size_t i, std::size_t j) const { return vertices[i * dim + j]; }
};

// Sector of a circle: radius in [0, R], symmetric about the vertical line
// through the center, spanning `span` radians. Points are parametrized as
// r * (sin phi, cos phi) + center, i.e. the angle is measured from the +y
// axis with clockwise-positive orientation. s = (x_c, y_c, R, span).
struct CircleSector {
    double x_c = 0.0;
    double y_c = 0.0;
    double radius = 0.0;  // R >= 0
    double span = 0.0;    // in [0, 2*pi]
};

// Named nominal range of one component of the constraint parameter vector.
struct SRange {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
};

// Tagged union over the supported constraint classes. A spec fixes the class
// structure (tag, dimensions, schema) and carries a bound parameter vector;
// with_params() rebinds the same structure to a new s.
class ConstraintSpec {
public:
    enum class Tag { polytope, sector, product };

    // Empty placeholder; real specs come from the factories below.
    ConstraintSpec() = default;

    static ConstraintSpec make_polytope(std::size_t vertex_count, std::size_t dim,
                                        std::vector<double> vertices, double range_lo = -1.0,
                                        double range_hi = 1.0);
    static ConstraintSpec make_sector(const CircleSector& sector, double center_lo, double center_hi,
                                      double radius_hi);
    static ConstraintSpec make_product(std::vector<ConstraintSpec> parts);

    Tag tag() const { return tag_; }
    bool is_product() const { return tag_ == Tag::product; }

    std::size_t z_dim() const;    // required intermediate dimension
    std::size_t s_dim() const;    // flat parameter length
    std::size_t out_dim() const;  // output dimension

    const ConvexPolytope& polytope() const;
    const CircleSector& sector() const;
    const std::vector<ConstraintSpec>& parts() const;

    // Slice boundaries of part k into z / s / y (product specs only; part
    // slices are contiguous in part order).
    std::size_t z_offset(std::size_t k) const;
    std::size_t s_offset(std::size_t k) const;
    std::size_t y_offset(std::size_t k) const;

    std::vector<SRange> s_schema() const;
    std::vector<double> params() const;  // flat s
    ConstraintSpec with_params(std::span<const double> s) const;

    nlohmann::json to_json() const;
    static ConstraintSpec from_json(const nlohmann::json& j);

private:
    Tag tag_ = Tag::polytope;
    ConvexPolytope poly_;
    CircleSector sector_;
    std::vector<SRange> sector_schema_;
    double poly_range_lo_ = -1.0, poly_range_hi_ = 1.0;
    std::vector<ConstraintSpec> parts_;
};

// Guard layers: parameter-free maps z -> y with y inside the constraint
// region for every finite z. Differentiable in z.
Tensor guard_polytope(const Tensor& z, const ConvexPolytope& poly);
Tensor guard_sector(const Tensor& z, const CircleSector& sector);
Tensor guard_product(const Tensor& z, const ConstraintSpec& product);
Tensor guard_apply(const ConstraintSpec& spec, const Tensor& z);

// Analytic Jacobian dy/dz, row-major out_dim x z_dim.
Tensor guard_jacobian(const ConstraintSpec& spec, const Tensor& z);

// Tape-recorded guard; backward applies the analytic Jacobian transpose.
Value guard(Tape& tape, Value z, const ConstraintSpec& spec);

// Independent membership oracle: true iff y lies in the region up to an
// absolute geometric tolerance (distance units). Never inspects guard code.
bool member(const Tensor& y, const ConstraintSpec& spec, double tol);

// Distance from a point to the convex hull of a small vertex set (exact for
// dim <= 3 via point/segment/triangle/tetrahedron projections; iterative
// feasibility solve above that).
double polytope_distance(std::span<const double> y, const ConvexPolytope& poly);

// Configuration for sampling valid constraint parameters around a target
// output y, i.e. draws from { s : y in C(s) }.
struct SamplerConfig {
    enum class Kind { interval, triangle, sector } kind = Kind::interval;

    // interval: each bound pushed away from y by an independent uniform
    // margin in [margin_lo, margin_hi]; optional clipping range.
    double margin_lo = 0.1;
    double margin_hi = 0.3;
    bool clip = false;
    double clip_lo = 0.0;
    double clip_hi = 1.0;

    // triangle: random triangle of edge scale in [scale_lo, scale_hi]
    // containing y at random barycentric coordinates (floored away from the
    // boundary so containment survives rounding).
    double scale_lo = 1.0;
    double scale_hi = 4.0;
    double min_weight = 0.05;

    // sector: center offset in [offset_lo, offset_hi] from y, then R and the
    // angular span are inflated by a factor (1 + u), u in [slack_lo, slack_hi].
    double offset_lo = 1.0;
    double offset_hi = 6.0;
    double slack_lo = 0.1;
    double slack_hi = 1.0;
    double min_span = 0.2;

    // Nominal coordinate range recorded in the emitted schema.
    double range_lo = 0.0;
    double range_hi = 1.0;
};

// Draws a constraint containing y. The returned spec's parameters always pass
// member(y, spec, 0).
ConstraintSpec sample_valid_spec(const Tensor& y, const SamplerConfig& config, Rng& rng);

// Flat-parameter form of sample_valid_spec.
std::vector<double> sample_valid_s(const Tensor& y, const SamplerConfig& config, Rng& rng);

}  // namespace cnet
