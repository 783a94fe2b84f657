#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "constraintnet/errors.hpp"
#include "constraintnet/model.hpp"
#include "support/gradcheck.hpp"

using namespace cnet;

namespace {

ConstraintNetModel tiny_interval_model(std::uint64_t seed, double lo = -1.0, double hi = 3.0) {
    auto constraint = ConstraintSpec::make_polytope(2, 1, {lo, hi}, lo, hi);
    TrunkConfig trunk;
    trunk.input_shape = {4};
    trunk.layers = {
        LayerCfg::make_dense(4, 8, Activation::relu),
        LayerCfg::make_dense(8 + 2, 2, Activation::linear),
    };
    GRepr g;
    g.mode = GMode::vector_concat;
    g.insertion_layer = 1;
    g.scale = schema_scale_factors(constraint);
    return ConstraintNetModel(std::move(trunk), std::move(g), constraint, seed);
}

ConstraintNetModel tiny_conv_model(std::uint64_t seed) {
    auto constraint = ConstraintSpec::make_polytope(3, 2, {0, 0, 8, 0, 0, 8}, 0.0, 8.0);
    TrunkConfig trunk;
    trunk.input_shape = {1, 8, 8};
    trunk.layers = {
        LayerCfg::make_conv(1, 3, 3, 2, Activation::relu),  // -> 3 x 3 x 3
        LayerCfg::make_conv(3 + 6, 4, 2, 1, Activation::relu),  // -> 4 x 2 x 2
        LayerCfg::make_flatten(),
        LayerCfg::make_dense(16, 3, Activation::linear),
    };
    GRepr g;
    g.mode = GMode::channel_broadcast;
    g.insertion_layer = 1;
    g.scale = schema_scale_factors(constraint);
    g.height = 3;
    g.width = 3;
    return ConstraintNetModel(std::move(trunk), std::move(g), constraint, seed);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("represent_s rescales components") {
    GRepr g;
    g.mode = GMode::vector_concat;
    g.scale = {0.5, 0.25};
    const double s[2] = {2.0, 4.0};
    Tensor out = represent_s(std::span<const double>(s, 2), g);
    CHECK(out.vec() == std::vector<double>{1.0, 1.0});

    GRepr bc;
    bc.mode = GMode::channel_broadcast;
    bc.scale = {1.0};
    bc.height = 2;
    bc.width = 2;
    const double s2[1] = {3.0};
    Tensor t = represent_s(std::span<const double>(s2, 1), bc);
    CHECK(t.shape() == std::vector<std::size_t>{1, 2, 2});
    for (double v : t.vec()) CHECK(v == 3.0);

    const double s3[1] = {1.0};
    CHECK_THROWS_AS(represent_s(std::span<const double>(s3, 1), g), DimensionError);
}

TEST_CASE("schema scale factors invert range widths") {
    auto seg = ConstraintSpec::make_polytope(2, 1, {0, 1}, 0.0, 32.0);
    auto scale = schema_scale_factors(seg);
    CHECK(scale == std::vector<double>{1.0 / 32.0, 1.0 / 32.0});
}

TEST_CASE("forward keeps outputs inside the region for any weights") {
    Rng rng(21);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto model = tiny_interval_model(seed);
        Tensor x = Tensor::vector(gradcheck::random_vector(4, rng, -2, 2));
        const double lo = rng.uniform(-5, 0), hi = lo + rng.uniform(0.1, 6);
        const double s[2] = {lo, hi};
        Tensor y = model.forward(x, std::span<const double>(s, 2));
        CHECK(y.size() == 1);
        CHECK(y[0] >= lo);
        CHECK(y[0] <= hi);
    }
}

TEST_CASE("zero weights reduce to the guard of the biases") {
    auto model = tiny_interval_model(3);
    for (auto& p : model.parameters()) p.value().fill(0.0);
    Tensor x = Tensor::vector({1, 2, 3, 4});
    const double s[2] = {-1.0, 3.0};
    Tensor y = model.forward(x, std::span<const double>(s, 2));
    // z = biases = 0, softmax uniform: midpoint of the interval.
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a zero representation does not break the guarantee") {
    auto model = tiny_interval_model(4);
    // Zero scale factors: the trunk sees no constraint information.
    auto g = model.g_repr();
    Rng rng(22);
    auto constraint = model.constraint();
    TrunkConfig trunk = model.trunk();
    GRepr zero_g = g;
    for (auto& v : zero_g.scale) v = 0.0;
    ConstraintNetModel blind(trunk, zero_g, constraint, 5);
    for (int i = 0; i < 100; ++i) {
        Tensor x = Tensor::vector(gradcheck::random_vector(4, rng));
        const double lo = rng.uniform(-4, 1), hi = lo + rng.uniform(0.5, 4);
        const double s[2] = {lo, hi};
        Tensor y = blind.forward(x, std::span<const double>(s, 2));
        CHECK(y[0] >= lo);
        CHECK(y[0] <= hi);
    }
}

TEST_CASE("membership holds across random models inputs and regions") {
    Rng rng(23);
    int violations = 0;
    for (int i = 0; i < 300; ++i) {
        auto model = tiny_interval_model(1000 + static_cast<std::uint64_t>(i));
        Tensor x = Tensor::vector(gradcheck::random_vector(4, rng, -3, 3));
        const double lo = rng.uniform(-5, 5), hi = lo + rng.uniform(0.0, 5.0);
        const double s[2] = {lo, hi};
        Tensor y = model.forward(x, std::span<const double>(s, 2));
        auto bound = model.constraint().with_params(std::span<const double>(s, 2));
        if (!member(y, bound, 1e-9)) ++violations;
    }
    CHECK(violations == 0);
}

TEST_CASE("changing s moves the admissible region with x fixed") {
    auto model = tiny_interval_model(6);
    Rng rng(24);
    Tensor x = Tensor::vector({0.5, -0.25, 1.0, 2.0});
    for (int i = 0; i < 100; ++i) {
        const double lo = rng.uniform(-10, 10), hi = lo + rng.uniform(0.01, 3.0);
        const double s[2] = {lo, hi};
        Tensor y = model.forward(x, std::span<const double>(s, 2));
        CHECK(y[0] >= lo);
        CHECK(y[0] <= hi);
    }
}

TEST_CASE("forward is deterministic") {
    auto model = tiny_interval_model(7);
    Tensor x = Tensor::vector({0.1, 0.2, 0.3, 0.4});
    const double s[2] = {0.0, 1.0};
    Tensor a = model.forward(x, std::span<const double>(s, 2));
    Tensor b = model.forward(x, std::span<const double>(s, 2));
    CHECK(a.vec() == b.vec());
}

TEST_CASE("conv trunk with channel broadcast obeys the constraint") {
    Rng rng(25);
    auto model = tiny_conv_model(8);
    for (int i = 0; i < 50; ++i) {
        Tensor x({1, 8, 8}, gradcheck::random_vector(64, rng, 0, 1));
        // Random triangle inside the 8 x 8 frame.
        std::vector<double> tri(6);
        for (auto& v : tri) v = rng.uniform(0.0, 8.0);
        Tensor y = model.forward(x, tri);
        auto bound = model.constraint().with_params(tri);
        CHECK(member(y, bound, 1e-9));
    }
}

TEST_CASE("end-to-end parameter gradients pass finite differences") {
    Rng rng(26);
    auto model = tiny_interval_model(9);
    Tensor x = Tensor::vector(gradcheck::random_vector(4, rng));
    const std::vector<double> s = {-0.5, 2.0};
    const Tensor target = Tensor::vector({0.75});

    auto loss_value = [&]() {
        Tensor y = model.forward(x, s);
        const double d = y[0] - target[0];
        return d * d;
    };

    Tape tape;
    Value pred = model.forward_on(tape, x, s);
    Value loss = tape.mse_loss(pred, tape.input(target));
    tape.backward(loss);

    for (auto& p : model.parameters()) {
        std::vector<double> numeric(p.value().size());
        for (std::size_t i = 0; i < p.value().size(); ++i) {
            const double keep = p.value()[i];
            p.value()[i] = keep + gradcheck::kStep;
            const double hi = loss_value();
            p.value()[i] = keep - gradcheck::kStep;
            const double lo = loss_value();
            p.value()[i] = keep;
            numeric[i] = (hi - lo) / (2.0 * gradcheck::kStep);
        }
        CHECK(gradcheck::compare_gradients(p.grad().vec(), numeric, 1e-4, 1e-8) == 0);
    }
}

TEST_CASE("save and load round trip bitwise") {
    auto model = tiny_interval_model(10);
    model.metadata["note"] = "round-trip";
    const std::string path = temp_path("cnet_model_roundtrip.json");
    model.save(path);
    auto loaded = ConstraintNetModel::load(path);

    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
        CHECK(model.parameters()[i].id() == loaded.parameters()[i].id());
        CHECK(model.parameters()[i].value().vec() == loaded.parameters()[i].value().vec());
    }
    Tensor x = Tensor::vector({0.9, -1.1, 0.3, 0.0});
    const double s[2] = {-1.0, 3.0};
    Tensor a = model.forward(x, std::span<const double>(s, 2));
    Tensor b = loaded.forward(x, std::span<const double>(s, 2));
    CHECK(a.vec() == b.vec());
    std::filesystem::remove(path);
}

TEST_CASE("loading a truncated file is a parse error") {
    auto model = tiny_interval_model(11);
    const std::string path = temp_path("cnet_model_truncated.json");
    model.save(path);
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_AS(ConstraintNetModel::load(path), ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("loading rejects a mismatched guard dimension naming both values") {
    auto model = tiny_interval_model(12);
    const std::string path = temp_path("cnet_model_mismatch.json");
    model.save(path);
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    in.close();
    // Swap the interval for a triangle: z_dim becomes 3, trunk still emits 2.
    j["constraint"] = ConstraintSpec::make_polytope(3, 1, {0, 1, 2}, 0.0, 1.0).to_json();
    j["g_repr"]["scale"] = {1.0, 1.0, 1.0};
    std::ofstream out(path);
    out << j.dump();
    out.close();
    CHECK_THROWS_WITH_AS(ConstraintNetModel::load(path),
                         doctest::Contains("does not match guard input dimension 3"),
                         DimensionError);
    std::filesystem::remove(path);
}

TEST_CASE("loading rejects unsupported format versions") {
    auto model = tiny_interval_model(13);
    const std::string path = temp_path("cnet_model_version.json");
    model.save(path);
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    in.close();
    j["format_version"] = 99;
    std::ofstream out(path);
    out << j.dump();
    out.close();
    CHECK_THROWS_WITH_AS(ConstraintNetModel::load(path), doctest::Contains("format_version 99"),
                         ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("model validation catches inconsistent trunk wiring") {
    auto constraint = ConstraintSpec::make_polytope(2, 1, {0, 1}, 0.0, 1.0);
    TrunkConfig trunk;
    trunk.input_shape = {4};
    trunk.layers = {
        LayerCfg::make_dense(4, 8, Activation::relu),
        LayerCfg::make_dense(8, 2, Activation::linear),  // forgot the +2 for g(s)
    };
    GRepr g;
    g.mode = GMode::vector_concat;
    g.insertion_layer = 1;
    g.scale = schema_scale_factors(constraint);
    CHECK_THROWS_AS(ConstraintNetModel(trunk, g, constraint, 0), DimensionError);

    trunk.layers[1] = LayerCfg::make_dense(10, 2, Activation::relu);  // non-linear head
    CHECK_THROWS_AS(ConstraintNetModel(trunk, g, constraint, 0), DimensionError);
}
