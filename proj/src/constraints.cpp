#include "constraintnet/constraints.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>

#include "constraintnet/errors.hpp"

namespace cnet {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

}  // namespace

// ---------------------------------------------------------------------------
// ConstraintSpec
// ---------------------------------------------------------------------------

ConstraintSpec ConstraintSpec::make_polytope(std::size_t vertex_count, std::size_t dim,
                                             std::vector<double> vertices, double range_lo,
                                             double range_hi) {
    if (vertex_count == 0 || dim == 0) {
        throw DimensionError("polytope needs at least one vertex and one dimension");
    }
    if (vertices.size() != vertex_count * dim) {
        throw DimensionError("polytope vertex data length " + std::to_string(vertices.size()) +
                             " does not match " + std::to_string(vertex_count) + "x" +
                             std::to_string(dim));
    }
    ConstraintSpec spec;
    spec.tag_ = Tag::polytope;
    spec.poly_.vertex_count = vertex_count;
    spec.poly_.dim = dim;
    spec.poly_.vertices = std::move(vertices);
    spec.poly_range_lo_ = range_lo;
    spec.poly_range_hi_ = range_hi;
    return spec;
}

ConstraintSpec ConstraintSpec::make_sector(const CircleSector& sector, double center_lo,
                                           double center_hi, double radius_hi) {
    if (sector.radius < 0.0) throw UsageError("sector radius must be nonnegative");
    if (sector.span < 0.0 || sector.span > 2.0 * kPi) {
        throw UsageError("sector span must lie in [0, 2*pi]");
    }
    ConstraintSpec spec;
    spec.tag_ = Tag::sector;
    spec.sector_ = sector;
    spec.sector_schema_ = {
        {"x_c", center_lo, center_hi},
        {"y_c", center_lo, center_hi},
        {"R", 0.0, radius_hi},
        {"Psi", 0.0, 2.0 * kPi},
    };
    return spec;
}

ConstraintSpec ConstraintSpec::make_product(std::vector<ConstraintSpec> parts) {
    if (parts.empty()) throw UsageError("product constraint needs at least one part");
    ConstraintSpec spec;
    spec.tag_ = Tag::product;
    spec.parts_ = std::move(parts);
    return spec;
}

std::size_t ConstraintSpec::z_dim() const {
    switch (tag_) {
        case Tag::polytope: return poly_.vertex_count;
        case Tag::sector: return 2;
        case Tag::product: {
            std::size_t n = 0;
            for (const auto& p : parts_) n += p.z_dim();
            return n;
        }
    }
    return 0;
}

std::size_t ConstraintSpec::s_dim() const {
    switch (tag_) {
        case Tag::polytope: return poly_.vertex_count * poly_.dim;
        case Tag::sector: return 4;
        case Tag::product: {
            std::size_t n = 0;
            for (const auto& p : parts_) n += p.s_dim();
            return n;
        }
    }
    return 0;
}

std::size_t ConstraintSpec::out_dim() const {
    switch (tag_) {
        case Tag::polytope: return poly_.dim;
        case Tag::sector: return 2;
        case Tag::product: {
            std::size_t n = 0;
            for (const auto& p : parts_) n += p.out_dim();
            return n;
        }
    }
    return 0;
}

const ConvexPolytope& ConstraintSpec::polytope() const {
    if (tag_ != Tag::polytope) throw UsageError("constraint is not a polytope");
    return poly_;
}

const CircleSector& ConstraintSpec::sector() const {
    if (tag_ != Tag::sector) throw UsageError("constraint is not a circle sector");
    return sector_;
}

const std::vector<ConstraintSpec>& ConstraintSpec::parts() const {
    if (tag_ != Tag::product) throw UsageError("constraint is not a product");
    return parts_;
}

std::size_t ConstraintSpec::z_offset(std::size_t k) const {
    const auto& ps = parts();
    std::size_t off = 0;
    for (std::size_t i = 0; i < k; ++i) off += ps[i].z_dim();
    return off;
}

std::size_t ConstraintSpec::s_offset(std::size_t k) const {
    const auto& ps = parts();
    std::size_t off = 0;
    for (std::size_t i = 0; i < k; ++i) off += ps[i].s_dim();
    return off;
}

std::size_t ConstraintSpec::y_offset(std::size_t k) const {
    const auto& ps = parts();
    std::size_t off = 0;
    for (std::size_t i = 0; i < k; ++i) off += ps[i].out_dim();
    return off;
}

std::vector<SRange> ConstraintSpec::s_schema() const {
    std::vector<SRange> schema;
    switch (tag_) {
        case Tag::polytope:
            for (std::size_t i = 0; i < poly_.vertex_count; ++i) {
                for (std::size_t j = 0; j < poly_.dim; ++j) {
                    schema.push_back({"v" + std::to_string(i) + "." + std::to_string(j),
                                      poly_range_lo_, poly_range_hi_});
                }
            }
            break;
        case Tag::sector: schema = sector_schema_; break;
        case Tag::product:
            for (std::size_t k = 0; k < parts_.size(); ++k) {
                for (auto entry : parts_[k].s_schema()) {
                    entry.name = "p" + std::to_string(k) + "." + entry.name;
                    schema.push_back(std::move(entry));
                }
            }
            break;
    }
    return schema;
}

std::vector<double> ConstraintSpec::params() const {
    switch (tag_) {
        case Tag::polytope: return poly_.vertices;
        case Tag::sector: return {sector_.x_c, sector_.y_c, sector_.radius, sector_.span};
        case Tag::product: {
            std::vector<double> s;
            s.reserve(s_dim());
            for (const auto& p : parts_) {
                auto ps = p.params();
                s.insert(s.end(), ps.begin(), ps.end());
            }
            return s;
        }
    }
    return {};
}

ConstraintSpec ConstraintSpec::with_params(std::span<const double> s) const {
    if (s.size() != s_dim()) {
        throw DimensionError("constraint parameter length " + std::to_string(s.size()) +
                             " does not match schema length " + std::to_string(s_dim()));
    }
    ConstraintSpec spec = *this;
    switch (tag_) {
        case Tag::polytope: spec.poly_.vertices.assign(s.begin(), s.end()); break;
        case Tag::sector:
            spec.sector_ = CircleSector{s[0], s[1], s[2], s[3]};
            break;
        case Tag::product: {
            std::size_t off = 0;
            for (std::size_t k = 0; k < parts_.size(); ++k) {
                std::size_t n = parts_[k].s_dim();
                spec.parts_[k] = parts_[k].with_params(s.subspan(off, n));
                off += n;
            }
            break;
        }
    }
    return spec;
}

nlohmann::json ConstraintSpec::to_json() const {
    nlohmann::json j;
    nlohmann::json schema = nlohmann::json::array();
    for (const auto& r : s_schema()) {
        schema.push_back({{"name", r.name}, {"lo", r.lo}, {"hi", r.hi}});
    }
    switch (tag_) {
        case Tag::polytope:
            j["tag"] = "polytope";
            j["params"] = {{"vertex_count", poly_.vertex_count},
                           {"dim", poly_.dim},
                           {"vertices", poly_.vertices}};
            j["s_schema"] = schema;
            break;
        case Tag::sector:
            j["tag"] = "sector";
            j["params"] = {{"x_c", sector_.x_c},
                           {"y_c", sector_.y_c},
                           {"radius", sector_.radius},
                           {"span", sector_.span}};
            j["s_schema"] = schema;
            break;
        case Tag::product: {
            j["tag"] = "product";
            nlohmann::json parts = nlohmann::json::array();
            for (const auto& p : parts_) parts.push_back(p.to_json());
            j["params"] = {{"parts", parts}};
            break;
        }
    }
    return j;
}

ConstraintSpec ConstraintSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tag") || !j.contains("params")) {
        throw ParseError("constraint: expected object with 'tag' and 'params'");
    }
    const std::string tag = j.at("tag").get<std::string>();
    const auto& params = j.at("params");
    if (tag == "polytope") {
        auto m = params.at("vertex_count").get<std::size_t>();
        auto n = params.at("dim").get<std::size_t>();
        auto vertices = params.at("vertices").get<std::vector<double>>();
        double lo = -1.0, hi = 1.0;
        if (j.contains("s_schema") && !j.at("s_schema").empty()) {
            lo = j.at("s_schema").at(0).at("lo").get<double>();
            hi = j.at("s_schema").at(0).at("hi").get<double>();
        }
        if (vertices.size() != m * n) {
            throw ParseError("constraint.params.vertices: length " +
                             std::to_string(vertices.size()) + " does not match " +
                             std::to_string(m) + "x" + std::to_string(n));
        }
        return make_polytope(m, n, std::move(vertices), lo, hi);
    }
    if (tag == "sector") {
        CircleSector s;
        s.x_c = params.at("x_c").get<double>();
        s.y_c = params.at("y_c").get<double>();
        s.radius = params.at("radius").get<double>();
        s.span = params.at("span").get<double>();
        double center_lo = -1.0, center_hi = 1.0, radius_hi = 1.0;
        if (j.contains("s_schema") && j.at("s_schema").size() == 4) {
            center_lo = j.at("s_schema").at(0).at("lo").get<double>();
            center_hi = j.at("s_schema").at(0).at("hi").get<double>();
            radius_hi = j.at("s_schema").at(2).at("hi").get<double>();
        }
        return make_sector(s, center_lo, center_hi, radius_hi);
    }
    if (tag == "product") {
        std::vector<ConstraintSpec> parts;
        for (const auto& pj : params.at("parts")) parts.push_back(from_json(pj));
        return make_product(std::move(parts));
    }
    throw ParseError("constraint.tag: unknown value '" + tag + "'");
}

// ---------------------------------------------------------------------------
// Guard layers
// ---------------------------------------------------------------------------

Tensor guard_polytope(const Tensor& z, const ConvexPolytope& poly) {
    if (z.rank() != 1 || z.size() != poly.vertex_count) {
        throw DimensionError("polytope guard expects z of length " +
                             std::to_string(poly.vertex_count) + ", got " + z.shape_str());
    }
    std::vector<double> weights(poly.vertex_count);
    softmax_inplace(z.data(), weights.data(), poly.vertex_count);
    Tensor y({poly.dim});
    for (std::size_t i = 0; i < poly.vertex_count; ++i) {
        for (std::size_t j = 0; j < poly.dim; ++j) y[j] += weights[i] * poly.vertex(i, j);
    }
    return y;
}

Tensor guard_sector(const Tensor& z, const CircleSector& sector) {
    if (z.rank() != 1 || z.size() != 2) {
        throw DimensionError("sector guard expects z of length 2, got " + z.shape_str());
    }
    const double r = sector.radius * sigmoid_scalar(z[0]);
    const double phi = sector.span * (sigmoid_scalar(z[1]) - 0.5);
    return Tensor::vector({r * std::sin(phi) + sector.x_c, r * std::cos(phi) + sector.y_c});
}

Tensor guard_product(const Tensor& z, const ConstraintSpec& product) {
    const auto& parts = product.parts();
    if (z.rank() != 1 || z.size() != product.z_dim()) {
        throw DimensionError("product guard expects z of length " +
                             std::to_string(product.z_dim()) + ", got " + z.shape_str());
    }
    Tensor y({product.out_dim()});
    std::size_t zoff = 0, yoff = 0;
    for (const auto& part : parts) {
        Tensor zk({part.z_dim()});
        std::copy(z.data() + zoff, z.data() + zoff + part.z_dim(), zk.data());
        Tensor yk = guard_apply(part, zk);
        std::copy(yk.data(), yk.data() + yk.size(), y.data() + yoff);
        zoff += part.z_dim();
        yoff += part.out_dim();
    }
    return y;
}

Tensor guard_apply(const ConstraintSpec& spec, const Tensor& z) {
    switch (spec.tag()) {
        case ConstraintSpec::Tag::polytope: return guard_polytope(z, spec.polytope());
        case ConstraintSpec::Tag::sector: return guard_sector(z, spec.sector());
        case ConstraintSpec::Tag::product: return guard_product(z, spec);
    }
    throw UsageError("unreachable constraint tag");
}

Tensor guard_jacobian(const ConstraintSpec& spec, const Tensor& z) {
    const std::size_t zd = spec.z_dim();
    const std::size_t od = spec.out_dim();
    if (z.rank() != 1 || z.size() != zd) {
        throw DimensionError("guard jacobian expects z of length " + std::to_string(zd) + ", got " +
                             z.shape_str());
    }
    Tensor jac({od, zd});
    switch (spec.tag()) {
        case ConstraintSpec::Tag::polytope: {
            const auto& poly = spec.polytope();
            std::vector<double> w(poly.vertex_count);
            softmax_inplace(z.data(), w.data(), poly.vertex_count);
            std::vector<double> y(poly.dim, 0.0);
            for (std::size_t i = 0; i < poly.vertex_count; ++i) {
                for (std::size_t j = 0; j < poly.dim; ++j) y[j] += w[i] * poly.vertex(i, j);
            }
            // d y_n / d z_m = w_m * (v_{m,n} - y_n), from the softmax Jacobian.
            for (std::size_t n = 0; n < poly.dim; ++n) {
                for (std::size_t m = 0; m < poly.vertex_count; ++m) {
                    jac.at(n, m) = w[m] * (poly.vertex(m, n) - y[n]);
                }
            }
            break;
        }
        case ConstraintSpec::Tag::sector: {
            const auto& sec = spec.sector();
            const double s1 = sigmoid_scalar(z[0]);
            const double s2 = sigmoid_scalar(z[1]);
            const double r = sec.radius * s1;
            const double phi = sec.span * (s2 - 0.5);
            const double dr = sec.radius * s1 * (1.0 - s1);
            const double dphi = sec.span * s2 * (1.0 - s2);
            jac.at(0, 0) = dr * std::sin(phi);
            jac.at(0, 1) = r * std::cos(phi) * dphi;
            jac.at(1, 0) = dr * std::cos(phi);
            jac.at(1, 1) = -r * std::sin(phi) * dphi;
            break;
        }
        case ConstraintSpec::Tag::product: {
            std::size_t zoff = 0, yoff = 0;
            for (const auto& part : spec.parts()) {
                Tensor zk({part.z_dim()});
                std::copy(z.data() + zoff, z.data() + zoff + part.z_dim(), zk.data());
                Tensor jk = guard_jacobian(part, zk);
                for (std::size_t n = 0; n < part.out_dim(); ++n) {
                    for (std::size_t m = 0; m < part.z_dim(); ++m) {
                        jac.at(yoff + n, zoff + m) = jk.at(n, m);
                    }
                }
                zoff += part.z_dim();
                yoff += part.out_dim();
            }
            break;
        }
    }
    return jac;
}

Value guard(Tape& tape, Value z, const ConstraintSpec& spec) {
    const Tensor& zt = tape.value(z);
    Tensor y = guard_apply(spec, zt);
    Tensor jac = guard_jacobian(spec, zt);
    return tape.custom(std::move(y), {z}, [jac = std::move(jac)](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gz = t.node_grad(t.node_inputs(self)[0]);
        const std::size_t od = jac.dim(0), zd = jac.dim(1);
        for (std::size_t n = 0; n < od; ++n) {
            const double gv = g[n];
            for (std::size_t m = 0; m < zd; ++m) gz[m] += jac.at(n, m) * gv;
        }
    });
}

// ---------------------------------------------------------------------------
// Membership oracle
// ---------------------------------------------------------------------------

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
    Vec3 ab = sub(b, a);
    double denom = dot(ab, ab);
    double t = denom > 0.0 ? dot(sub(p, a), ab) / denom : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    Vec3 c = {a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]};
    return norm(sub(p, c));
}

// Closest-point-on-triangle distance; falls back to edges when the triangle
// is (near-)degenerate.
double triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    Vec3 ab = sub(b, a), ac = sub(c, a);
    Vec3 n = cross(ab, ac);
    double n2 = dot(n, n);
    double scale = std::max({dot(ab, ab), dot(ac, ac), 1e-300});
    if (n2 <= 1e-24 * scale * scale) {
        return std::min({segment_distance(p, a, b), segment_distance(p, b, c),
                         segment_distance(p, a, c)});
    }
    Vec3 ap = sub(p, a);
    // Project p on the triangle plane and solve barycentric coordinates.
    double d1 = dot(ab, ab), d2 = dot(ab, ac), d3 = dot(ac, ac);
    double e1 = dot(ap, ab), e2 = dot(ap, ac);
    double det = d1 * d3 - d2 * d2;
    double v = (d3 * e1 - d2 * e2) / det;
    double w = (d1 * e2 - d2 * e1) / det;
    if (v >= 0.0 && w >= 0.0 && v + w <= 1.0) {
        return std::abs(dot(ap, n)) / std::sqrt(n2);
    }
    return std::min({segment_distance(p, a, b), segment_distance(p, b, c),
                     segment_distance(p, a, c)});
}

double tetrahedron_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                            const Vec3& d) {
    const std::array<std::array<Vec3, 4>, 4> faces = {{
        {a, b, c, d},
        {a, b, d, c},
        {a, c, d, b},
        {b, c, d, a},
    }};
    bool inside = true;
    double edge2 = 0.0;
    for (const auto& f : faces) {
        edge2 = std::max({edge2, dot(sub(f[1], f[0]), sub(f[1], f[0])),
                          dot(sub(f[2], f[0]), sub(f[2], f[0]))});
    }
    for (const auto& f : faces) {
        Vec3 n = cross(sub(f[1], f[0]), sub(f[2], f[0]));
        double n2 = dot(n, n);
        if (n2 <= 1e-24 * edge2 * edge2) {
            inside = false;  // flat tetrahedron, decide via its faces
            break;
        }
        double side_p = dot(n, sub(p, f[0]));
        double side_d = dot(n, sub(f[3], f[0]));
        if (side_d == 0.0 || (side_p != 0.0 && std::signbit(side_p) != std::signbit(side_d))) {
            inside = false;
            break;
        }
    }
    if (inside) return 0.0;
    double best = triangle_distance(p, a, b, c);
    best = std::min(best, triangle_distance(p, a, b, d));
    best = std::min(best, triangle_distance(p, a, c, d));
    best = std::min(best, triangle_distance(p, b, c, d));
    return best;
}

double interval_distance(double y, const ConvexPolytope& poly) {
    double lo = poly.vertices[0], hi = poly.vertices[0];
    for (std::size_t i = 1; i < poly.vertex_count; ++i) {
        lo = std::min(lo, poly.vertices[i]);
        hi = std::max(hi, poly.vertices[i]);
    }
    if (y < lo) return lo - y;
    if (y > hi) return y - hi;
    return 0.0;
}

double cross2(double ox, double oy, double ax, double ay, double bx, double by) {
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox);
}

double segment_distance_2d(double px, double py, double ax, double ay, double bx, double by) {
    double abx = bx - ax, aby = by - ay;
    double denom = abx * abx + aby * aby;
    double t = denom > 0.0 ? ((px - ax) * abx + (py - ay) * aby) / denom : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double cx = ax + t * abx, cy = ay + t * aby;
    return std::hypot(px - cx, py - cy);
}

// Monotone-chain convex hull; returns CCW vertices without duplicates.
std::vector<std::array<double, 2>> convex_hull_2d(const ConvexPolytope& poly) {
    std::vector<std::array<double, 2>> pts(poly.vertex_count);
    for (std::size_t i = 0; i < poly.vertex_count; ++i) {
        pts[i] = {poly.vertex(i, 0), poly.vertex(i, 1)};
    }
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() <= 2) return pts;
    std::vector<std::array<double, 2>> hull(2 * pts.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross2(hull[k - 2][0], hull[k - 2][1], hull[k - 1][0], hull[k - 1][1],
                                pts[i][0], pts[i][1]) <= 0.0) {
            --k;
        }
        hull[k++] = pts[i];
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross2(hull[k - 2][0], hull[k - 2][1], hull[k - 1][0], hull[k - 1][1],
                                pts[i][0], pts[i][1]) <= 0.0) {
            --k;
        }
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double polytope_distance_2d(double px, double py, const ConvexPolytope& poly) {
    auto hull = convex_hull_2d(poly);
    if (hull.size() == 1) return std::hypot(px - hull[0][0], py - hull[0][1]);
    if (hull.size() == 2) {
        return segment_distance_2d(px, py, hull[0][0], hull[0][1], hull[1][0], hull[1][1]);
    }
    bool inside = true;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        if (cross2(a[0], a[1], b[0], b[1], px, py) < 0.0) {
            inside = false;
            break;
        }
    }
    if (inside) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        best = std::min(best, segment_distance_2d(px, py, a[0], a[1], b[0], b[1]));
    }
    return best;
}

// Exhaustive simplex decomposition: the hull of a small vertex set is covered
// by the simplices of all <=4-point subsets, so the hull distance is the
// minimum simplex distance.
double polytope_distance_3d(const Vec3& p, const ConvexPolytope& poly) {
    const std::size_t m = poly.vertex_count;
    auto vert = [&](std::size_t i) -> Vec3 {
        return {poly.vertex(i, 0), poly.vertex(i, 1), poly.vertex(i, 2)};
    };
    double best = std::numeric_limits<double>::infinity();
    if (m == 1) return norm(sub(p, vert(0)));
    if (m == 2) return segment_distance(p, vert(0), vert(1));
    if (m == 3) return triangle_distance(p, vert(0), vert(1), vert(2));
    for (std::size_t i = 0; i < m && best > 0.0; ++i) {
        for (std::size_t j = i + 1; j < m && best > 0.0; ++j) {
            for (std::size_t k = j + 1; k < m && best > 0.0; ++k) {
                for (std::size_t l = k + 1; l < m && best > 0.0; ++l) {
                    best = std::min(best,
                                    tetrahedron_distance(p, vert(i), vert(j), vert(k), vert(l)));
                }
            }
        }
    }
    return best;
}

// Dense linear solve with partial pivoting; returns false when singular.
bool solve_dense(std::vector<double>& a, std::vector<double>& b, std::size_t n) {
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t row = col + 1; row < n; ++row) {
            if (std::abs(a[row * n + col]) > std::abs(a[pivot * n + col])) pivot = row;
        }
        if (std::abs(a[pivot * n + col]) < 1e-14) return false;
        if (pivot != col) {
            for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[pivot * n + k]);
            std::swap(b[col], b[pivot]);
        }
        const double inv = 1.0 / a[col * n + col];
        for (std::size_t row = col + 1; row < n; ++row) {
            const double f = a[row * n + col] * inv;
            if (f == 0.0) continue;
            for (std::size_t k = col; k < n; ++k) a[row * n + k] -= f * a[col * n + k];
            b[row] -= f * b[col];
        }
    }
    for (std::size_t row = n; row-- > 0;) {
        double acc = b[row];
        for (std::size_t k = row + 1; k < n; ++k) acc -= a[row * n + k] * b[k];
        b[row] = acc / a[row * n + row];
    }
    return true;
}

// Feasibility solve for dimensions above three: active-set least squares for
// min_p || V^T p - y || over the simplex (finite termination; falls back to
// the best vertex when a degenerate subproblem cannot be solved).
double polytope_distance_general(std::span<const double> y, const ConvexPolytope& poly) {
    const std::size_t m = poly.vertex_count, n = poly.dim;
    auto residual_norm = [&](const std::vector<double>& p) {
        double dist2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double r = -y[j];
            for (std::size_t i = 0; i < m; ++i) r += p[i] * poly.vertex(i, j);
            dist2 += r * r;
        }
        return std::sqrt(dist2);
    };

    // Start from the vertex closest to y.
    std::size_t best_vertex = 0;
    double best_d = std::numeric_limits<double>::infinity();
    double scale = 1.0;
    for (std::size_t i = 0; i < m; ++i) {
        double d = 0.0, v2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            d += (poly.vertex(i, j) - y[j]) * (poly.vertex(i, j) - y[j]);
            v2 += poly.vertex(i, j) * poly.vertex(i, j);
        }
        scale = std::max(scale, v2);
        if (d < best_d) {
            best_d = d;
            best_vertex = i;
        }
    }
    std::vector<double> p(m, 0.0);
    p[best_vertex] = 1.0;
    std::vector<bool> active(m, false);
    active[best_vertex] = true;

    // Equality-constrained least squares on the active set via its KKT
    // system: minimize ||V_A^T q - y||^2 subject to sum(q) = 1.
    auto solve_active = [&](std::vector<double>& q) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m; ++i) {
            if (active[i]) idx.push_back(i);
        }
        const std::size_t k = idx.size();
        std::vector<double> mat((k + 1) * (k + 1), 0.0), rhs(k + 1, 0.0);
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = 0; b <= a; ++b) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += poly.vertex(idx[a], j) * poly.vertex(idx[b], j);
                }
                mat[a * (k + 1) + b] = 2.0 * dot;
                mat[b * (k + 1) + a] = 2.0 * dot;
            }
            mat[a * (k + 1) + k] = 1.0;
            mat[k * (k + 1) + a] = 1.0;
            double dy = 0.0;
            for (std::size_t j = 0; j < n; ++j) dy += poly.vertex(idx[a], j) * y[j];
            rhs[a] = 2.0 * dy;
        }
        rhs[k] = 1.0;
        if (!solve_dense(mat, rhs, k + 1)) return false;
        std::fill(q.begin(), q.end(), 0.0);
        for (std::size_t a = 0; a < k; ++a) q[idx[a]] = rhs[a];
        return true;
    };

    std::vector<double> q(m, 0.0), r(n, 0.0);
    const std::size_t max_outer = 4 * m + 16;
    for (std::size_t outer = 0; outer < max_outer; ++outer) {
        // Inner loop: restore feasibility of the active-set solution.
        for (std::size_t inner = 0; inner <= m; ++inner) {
            if (!solve_active(q)) return residual_norm(p);
            double alpha = 1.0;
            bool clipped = false;
            for (std::size_t i = 0; i < m; ++i) {
                if (active[i] && q[i] < 0.0 && p[i] > q[i]) {
                    alpha = std::min(alpha, p[i] / (p[i] - q[i]));
                    clipped = true;
                }
            }
            if (!clipped) {
                p = q;
                break;
            }
            for (std::size_t i = 0; i < m; ++i) {
                if (!active[i]) continue;
                p[i] += alpha * (q[i] - p[i]);
                if (p[i] <= 1e-15) {
                    p[i] = 0.0;
                    active[i] = false;
                }
            }
        }
        // Optimality: with multiplier lambda from the equality constraint,
        // every inactive vertex must have nonnegative reduced gradient.
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) r[j] += p[i] * poly.vertex(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) r[j] -= y[j];
        double lambda = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (!active[i]) continue;
            double g = 0.0;
            for (std::size_t j = 0; j < n; ++j) g += 2.0 * poly.vertex(i, j) * r[j];
            lambda = -g;
            break;
        }
        double worst = -1e-10 * scale;
        std::size_t enter = m;
        for (std::size_t i = 0; i < m; ++i) {
            if (active[i]) continue;
            double g = 0.0;
            for (std::size_t j = 0; j < n; ++j) g += 2.0 * poly.vertex(i, j) * r[j];
            if (g + lambda < worst) {
                worst = g + lambda;
                enter = i;
            }
        }
        if (enter == m) break;
        active[enter] = true;
    }
    return residual_norm(p);
}

bool member_sector(const Tensor& y, const CircleSector& sec, double tol) {
    const double px = y[0] - sec.x_c;
    const double py = y[1] - sec.y_c;
    const double r = std::hypot(px, py);
    if (r > sec.radius + tol) return false;
    if (r <= tol) return true;  // at the center, any angle
    const double phi = std::atan2(px, py);  // from the +y axis, clockwise-positive
    const double tol_angle = tol / std::max(r, tol);
    return std::abs(phi) <= sec.span / 2.0 + tol_angle;
}

}  // namespace

double polytope_distance(std::span<const double> y, const ConvexPolytope& poly) {
    switch (poly.dim) {
        case 1: return interval_distance(y[0], poly);
        case 2: return polytope_distance_2d(y[0], y[1], poly);
        case 3: return polytope_distance_3d({y[0], y[1], y[2]}, poly);
        default: return polytope_distance_general(y, poly);
    }
}

bool member(const Tensor& y, const ConstraintSpec& spec, double tol) {
    if (y.size() != spec.out_dim()) {
        throw DimensionError("membership check: point length " + std::to_string(y.size()) +
                             " does not match constraint output dimension " +
                             std::to_string(spec.out_dim()));
    }
    switch (spec.tag()) {
        case ConstraintSpec::Tag::polytope: {
            std::span<const double> yv(y.data(), y.size());
            return polytope_distance(yv, spec.polytope()) <= tol;
        }
        case ConstraintSpec::Tag::sector: return member_sector(y, spec.sector(), tol);
        case ConstraintSpec::Tag::product: {
            std::size_t off = 0;
            for (const auto& part : spec.parts()) {
                Tensor yk({part.out_dim()});
                std::copy(y.data() + off, y.data() + off + part.out_dim(), yk.data());
                if (!member(yk, part, tol)) return false;
                off += part.out_dim();
            }
            return true;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// Valid-parameter samplers
// ---------------------------------------------------------------------------

namespace {

ConstraintSpec sample_interval(double y, const SamplerConfig& cfg, Rng& rng) {
    double lo = y - rng.uniform(cfg.margin_lo, cfg.margin_hi);
    double hi = y + rng.uniform(cfg.margin_lo, cfg.margin_hi);
    if (cfg.clip) {
        lo = std::max(lo, cfg.clip_lo);
        hi = std::min(hi, cfg.clip_hi);
    }
    return ConstraintSpec::make_polytope(2, 1, {lo, hi}, cfg.range_lo, cfg.range_hi);
}

ConstraintSpec sample_triangle(const Tensor& y, const SamplerConfig& cfg, Rng& rng) {
    const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    std::array<std::array<double, 2>, 3> w{};
    for (int attempt = 0; attempt < 64; ++attempt) {
        for (auto& v : w) {
            double ang = rng.uniform(0.0, 2.0 * kPi);
            double rad = scale * std::sqrt(rng.uniform());
            v = {rad * std::cos(ang), rad * std::sin(ang)};
        }
        double area2 = std::abs(cross2(w[0][0], w[0][1], w[1][0], w[1][1], w[2][0], w[2][1]));
        if (area2 > 0.1 * scale * scale) break;
    }
    // Barycentric placement of y, floored away from the boundary.
    std::array<double, 3> b{};
    double sum = 0.0;
    for (auto& v : b) {
        v = -std::log(1.0 - rng.uniform());
        sum += v;
    }
    for (auto& v : b) v = (1.0 - 3.0 * cfg.min_weight) * (v / sum) + cfg.min_weight;
    double cx = 0.0, cy = 0.0;
    for (int i = 0; i < 3; ++i) {
        cx += b[i] * w[i][0];
        cy += b[i] * w[i][1];
    }
    std::vector<double> vertices(6);
    for (int i = 0; i < 3; ++i) {
        vertices[2 * i] = w[i][0] + (y[0] - cx);
        vertices[2 * i + 1] = w[i][1] + (y[1] - cy);
    }
    return ConstraintSpec::make_polytope(3, 2, std::move(vertices), cfg.range_lo, cfg.range_hi);
}

ConstraintSpec sample_sector(const Tensor& y, const SamplerConfig& cfg, Rng& rng) {
    const double ang = rng.uniform(0.0, 2.0 * kPi);
    const double offset = rng.uniform(cfg.offset_lo, cfg.offset_hi);
    CircleSector sec;
    sec.x_c = y[0] + offset * std::cos(ang);
    sec.y_c = y[1] + offset * std::sin(ang);
    const double px = y[0] - sec.x_c;
    const double py = y[1] - sec.y_c;
    const double r = std::hypot(px, py);
    sec.radius = r * (1.0 + rng.uniform(cfg.slack_lo, cfg.slack_hi));
    const double phi = std::atan2(px, py);
    double span = 2.0 * std::abs(phi) * (1.0 + rng.uniform(cfg.slack_lo, cfg.slack_hi));
    span = std::max(span, cfg.min_span);
    sec.span = std::min(span, 2.0 * kPi);
    const double radius_hi = cfg.offset_hi * (1.0 + cfg.slack_hi);
    return ConstraintSpec::make_sector(sec, cfg.range_lo, cfg.range_hi, radius_hi);
}

}  // namespace

ConstraintSpec sample_valid_spec(const Tensor& y, const SamplerConfig& cfg, Rng& rng) {
    switch (cfg.kind) {
        case SamplerConfig::Kind::interval: {
            if (y.size() != 1) {
                throw DimensionError("interval sampler expects a scalar target, got " +
                                     y.shape_str());
            }
            return sample_interval(y[0], cfg, rng);
        }
        case SamplerConfig::Kind::triangle: {
            if (y.size() != 2) {
                throw DimensionError("triangle sampler expects a 2-d target, got " + y.shape_str());
            }
            return sample_triangle(y, cfg, rng);
        }
        case SamplerConfig::Kind::sector: {
            if (y.size() != 2) {
                throw DimensionError("sector sampler expects a 2-d target, got " + y.shape_str());
            }
            return sample_sector(y, cfg, rng);
        }
    }
    throw UsageError("unreachable sampler kind");
}

std::vector<double> sample_valid_s(const Tensor& y, const SamplerConfig& cfg, Rng& rng) {
    return sample_valid_spec(y, cfg, rng).params();
}

}  // namespace cnet
