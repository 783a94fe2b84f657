#include "constraintnet/landmark.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "constraintnet/errors.hpp"

namespace cnet {

static_assert(std::endian::native == std::endian::little,
              "dataset container is written little-endian");

namespace {

void draw_disk(Tensor& image, double cx, double cy, double radius, double value) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    const long i0 = std::max(0L, static_cast<long>(std::floor(cy - radius)));
    const long i1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(cy + radius)));
    const long j0 = std::max(0L, static_cast<long>(std::floor(cx - radius)));
    const long j1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(cx + radius)));
    for (long i = i0; i <= i1; ++i) {
        for (long j = j0; j <= j1; ++j) {
            const double dx = static_cast<double>(j) - cx;
            const double dy = static_cast<double>(i) - cy;
            if (dx * dx + dy * dy <= radius * radius) {
                image.at(0, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = value;
            }
        }
    }
}

void draw_ellipse(Tensor& image, double cx, double cy, double ax, double ay, double value) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const double dx = (static_cast<double>(j) - cx) / ax;
            const double dy = (static_cast<double>(i) - cy) / ay;
            if (dx * dx + dy * dy <= 1.0) image.at(0, i, j) = value;
        }
    }
}

}  // namespace

LandmarkScene generate_scene(Rng& rng, const SceneConfig& cfg) {
    LandmarkScene scene;
    scene.image = Tensor({1, cfg.height, cfg.width});
    scene.image.fill(cfg.background);

    const double cx = rng.uniform(cfg.center_lo, cfg.center_hi);
    const double cy = rng.uniform(cfg.center_lo, cfg.center_hi);
    const double ax = rng.uniform(cfg.head_ax_lo, cfg.head_ax_hi);
    const double ay = rng.uniform(cfg.head_ay_lo, cfg.head_ay_hi);
    const double eye_dx = rng.uniform(cfg.eye_dx_lo, cfg.eye_dx_hi);
    const double eye_dy = rng.uniform(cfg.eye_dy_lo, cfg.eye_dy_hi);
    const double jlx = rng.uniform(-cfg.eye_jitter, cfg.eye_jitter);
    const double jly = rng.uniform(-cfg.eye_jitter, cfg.eye_jitter);
    const double jrx = rng.uniform(-cfg.eye_jitter, cfg.eye_jitter);
    const double jry = rng.uniform(-cfg.eye_jitter, cfg.eye_jitter);
    const double jnx = rng.uniform(-cfg.nose_jitter, cfg.nose_jitter);
    const double nose_dy = rng.uniform(cfg.nose_dy_lo, cfg.nose_dy_hi);
    const double eye_r_l = rng.uniform(cfg.eye_radius_lo, cfg.eye_radius_hi);
    const double eye_r_r = rng.uniform(cfg.eye_radius_lo, cfg.eye_radius_hi);
    const double nose_r = rng.uniform(cfg.nose_radius_lo, cfg.nose_radius_hi);

    auto& lm = scene.landmarks;
    lm[kLeftEyeX] = cx - eye_dx + jlx;
    lm[kRightEyeX] = cx + eye_dx + jrx;
    lm[kLeftEyeY] = cy - eye_dy + jly;
    lm[kRightEyeY] = cy - eye_dy + jry;
    lm[kNoseX] = cx + jnx;
    lm[kNoseY] = cy + nose_dy;

    const double margin = 2.0;
    for (std::size_t c = 0; c < 6; ++c) {
        const double bound = c < 3 ? static_cast<double>(cfg.width) : static_cast<double>(cfg.height);
        if (lm[c] < margin || lm[c] > bound - 1.0 - margin) {
            throw UsageError("scene config places a landmark closer than 2 px to the border");
        }
    }
    if (!(lm[kLeftEyeX] <= lm[kRightEyeX]) || !(lm[kLeftEyeY] <= lm[kNoseY]) ||
        !(lm[kRightEyeY] <= lm[kNoseY])) {
        throw UsageError("scene config violates the landmark relations");
    }

    draw_ellipse(scene.image, cx, cy, ax, ay, cfg.head_value);
    draw_disk(scene.image, lm[kLeftEyeX], lm[kLeftEyeY], eye_r_l, cfg.eye_value);
    draw_disk(scene.image, lm[kRightEyeX], lm[kRightEyeY], eye_r_r, cfg.eye_value);
    draw_disk(scene.image, lm[kNoseX], lm[kNoseY], nose_r, cfg.nose_value);

    for (auto& px : scene.image.vec()) {
        px = std::clamp(px + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
    }
    return scene;
}

std::vector<LandmarkScene> generate_dataset(std::uint64_t seed, std::size_t count,
                                            const SceneConfig& cfg) {
    std::vector<LandmarkScene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = Rng::stream(seed, "scene/" + std::to_string(i));
        LandmarkScene scene = generate_scene(rng, cfg);
        scene.seed = seed;
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'N', 'L', 'M', 'K', '1', '\n', '\0'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& in, T& v, const char* what) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError(std::string("dataset: truncated while reading ") + what);
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<LandmarkScene>& scenes,
                   const SceneConfig& cfg) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw UsageError("cannot open '" + tmp + "' for writing");
        out.write(kMagic, sizeof(kMagic));
        write_raw(out, static_cast<std::uint64_t>(scenes.size()));
        write_raw(out, static_cast<std::uint64_t>(cfg.height));
        write_raw(out, static_cast<std::uint64_t>(cfg.width));
        for (const auto& scene : scenes) {
            write_raw(out, scene.seed);
            for (double v : scene.landmarks) write_raw(out, v);
            out.write(reinterpret_cast<const char*>(scene.image.data()),
                      static_cast<std::streamsize>(scene.image.size() * sizeof(double)));
        }
        if (!out) throw UsageError("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

std::vector<LandmarkScene> read_dataset(const std::string& path, SceneConfig& cfg_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset file '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ParseError("dataset: bad magic in '" + path + "'");
    }
    std::uint64_t count = 0, height = 0, width = 0;
    read_raw(in, count, "header");
    read_raw(in, height, "header");
    read_raw(in, width, "header");
    if (height == 0 || width == 0 || height > 4096 || width > 4096 || count > 10'000'000) {
        throw ParseError("dataset: implausible header in '" + path + "'");
    }
    cfg_out.height = height;
    cfg_out.width = width;
    std::vector<LandmarkScene> scenes;
    scenes.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        LandmarkScene scene;
        read_raw(in, scene.seed, "scene seed");
        for (auto& v : scene.landmarks) read_raw(in, v, "landmarks");
        scene.image = Tensor({1, height, width});
        in.read(reinterpret_cast<char*>(scene.image.data()),
                static_cast<std::streamsize>(scene.image.size() * sizeof(double)));
        if (!in) throw ParseError("dataset: truncated image in scene " + std::to_string(i));
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

BoxParam sample_box(const std::array<double, 6>& lm, Rng& rng, int margin_lo, int margin_hi,
                    const SceneConfig& cfg) {
    if (margin_lo < 0 || margin_hi < margin_lo) {
        throw UsageError("box margins must satisfy 0 <= lo <= hi");
    }
    const double tight_lx = std::min({lm[kNoseX], lm[kLeftEyeX], lm[kRightEyeX]});
    const double tight_ux = std::max({lm[kNoseX], lm[kLeftEyeX], lm[kRightEyeX]});
    const double tight_ly = std::min({lm[kNoseY], lm[kLeftEyeY], lm[kRightEyeY]});
    const double tight_uy = std::max({lm[kNoseY], lm[kLeftEyeY], lm[kRightEyeY]});
    const auto margin = [&] {
        return static_cast<double>(margin_lo) +
               static_cast<double>(rng.uniform_int(static_cast<std::uint64_t>(margin_hi - margin_lo) + 1));
    };
    BoxParam box;
    box.l_x = std::max(0.0, tight_lx - margin());
    box.u_x = std::min(static_cast<double>(cfg.width) - 1.0, tight_ux + margin());
    box.l_y = std::max(0.0, tight_ly - margin());
    box.u_y = std::min(static_cast<double>(cfg.height) - 1.0, tight_uy + margin());
    return box;
}

namespace {

ConstraintSpec segment(double lo, double hi, const SceneConfig& cfg) {
    return ConstraintSpec::make_polytope(2, 1, {lo, hi}, 0.0,
                                         static_cast<double>(std::max(cfg.width, cfg.height)));
}

}  // namespace

ConstraintSpec box_constraint(const BoxParam& box, const SceneConfig& cfg) {
    std::vector<ConstraintSpec> parts;
    for (int k = 0; k < 3; ++k) parts.push_back(segment(box.l_x, box.u_x, cfg));
    for (int k = 0; k < 3; ++k) parts.push_back(segment(box.l_y, box.u_y, cfg));
    return ConstraintSpec::make_product(std::move(parts));
}

ConstraintSpec relational_constraint(const BoxParam& box, const SceneConfig& cfg) {
    const double range_hi = static_cast<double>(std::max(cfg.width, cfg.height));
    const double lx = box.l_x, ux = box.u_x, ly = box.l_y, uy = box.u_y;
    std::vector<ConstraintSpec> parts;
    // x_n on the segment [l_x, u_x].
    parts.push_back(segment(lx, ux, cfg));
    // (x_le, x_re) in the triangle with x_le <= x_re inside the box.
    parts.push_back(ConstraintSpec::make_polytope(3, 2, {lx, lx, lx, ux, ux, ux}, 0.0, range_hi));
    // (y_n, y_le, y_re) in the pyramid with both eyes above the nose
    // (y grows downward, so eye y-coordinates stay <= the nose one).
    parts.push_back(ConstraintSpec::make_polytope(5, 3,
                                                  {
                                                      ly, ly, ly,  // apex: everything at the top
                                                      uy, ly, ly,
                                                      uy, uy, ly,
                                                      uy, ly, uy,
                                                      uy, uy, uy,
                                                  },
                                                  0.0, range_hi));
    return ConstraintSpec::make_product(std::move(parts));
}

std::array<std::size_t, 6> relational_regroup_permutation() {
    return {kNoseX, kLeftEyeX, kRightEyeX, kNoseY, kLeftEyeY, kRightEyeY};
}

std::array<std::size_t, 6> invert_permutation(const std::array<std::size_t, 6>& perm) {
    std::array<std::size_t, 6> inv{};
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

std::array<double, 6> apply_permutation(const std::array<double, 6>& v,
                                        const std::array<std::size_t, 6>& perm) {
    std::array<double, 6> out{};
    for (std::size_t i = 0; i < perm.size(); ++i) out[i] = v[perm[i]];
    return out;
}

ConstraintSpec triangle_nose_constraint(const std::array<double, 2>& nose, Rng& rng,
                                        const SceneConfig& cfg) {
    SamplerConfig sampler;
    sampler.kind = SamplerConfig::Kind::triangle;
    sampler.scale_lo = 3.0;
    sampler.scale_hi = 8.0;
    sampler.range_lo = 0.0;
    sampler.range_hi = static_cast<double>(std::max(cfg.width, cfg.height));
    return sample_valid_spec(Tensor::vector({nose[0], nose[1]}), sampler, rng);
}

ConstraintSpec sector_nose_constraint(const std::array<double, 2>& nose, Rng& rng,
                                      const SceneConfig& cfg) {
    SamplerConfig sampler;
    sampler.kind = SamplerConfig::Kind::sector;
    sampler.offset_lo = 1.0;
    sampler.offset_hi = 6.0;
    sampler.slack_lo = 0.1;
    sampler.slack_hi = 1.0;
    sampler.range_lo = 0.0;
    sampler.range_hi = static_cast<double>(std::max(cfg.width, cfg.height));
    return sample_valid_spec(Tensor::vector({nose[0], nose[1]}), sampler, rng);
}

// ---------------------------------------------------------------------------
// Default models
// ---------------------------------------------------------------------------

ConstraintNetModel build_landmark_dense_model(const ConstraintSpec& constraint,
                                              const SceneConfig& cfg, std::uint64_t seed) {
    const std::size_t pixels = cfg.height * cfg.width;
    const std::size_t s_dim = constraint.s_dim();
    TrunkConfig trunk;
    trunk.input_shape = {pixels};
    trunk.layers = {
        LayerCfg::make_dense(pixels, 128, Activation::relu),
        LayerCfg::make_dense(128, 64, Activation::relu),
        LayerCfg::make_dense(64 + s_dim, constraint.z_dim(), Activation::linear),
    };
    GRepr g;
    g.mode = GMode::vector_concat;
    g.insertion_layer = 2;
    g.scale = schema_scale_factors(constraint);
    return ConstraintNetModel(std::move(trunk), std::move(g), constraint, seed);
}

ConstraintNetModel build_landmark_conv_model(const ConstraintSpec& constraint,
                                             const SceneConfig& cfg, std::uint64_t seed) {
    const std::size_t s_dim = constraint.s_dim();
    const std::size_t h1 = (cfg.height - 3) / 2 + 1;
    const std::size_t w1 = (cfg.width - 3) / 2 + 1;
    const std::size_t h2 = (h1 - 3) / 2 + 1;
    const std::size_t w2 = (w1 - 3) / 2 + 1;
    TrunkConfig trunk;
    trunk.input_shape = {1, cfg.height, cfg.width};
    trunk.layers = {
        LayerCfg::make_conv(1, 4, 3, 2, Activation::relu),
        LayerCfg::make_conv(4 + s_dim, 8, 3, 2, Activation::relu),
        LayerCfg::make_flatten(),
        LayerCfg::make_dense(8 * h2 * w2, 64, Activation::relu),
        LayerCfg::make_dense(64, constraint.z_dim(), Activation::linear),
    };
    GRepr g;
    g.mode = GMode::channel_broadcast;
    g.insertion_layer = 1;
    g.scale = schema_scale_factors(constraint);
    g.height = h1;
    g.width = w1;
    return ConstraintNetModel(std::move(trunk), std::move(g), constraint, seed);
}

}  // namespace cnet
