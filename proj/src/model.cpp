#include "constraintnet/model.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "constraintnet/errors.hpp"
#include "constraintnet/rng.hpp"
#include "constraintnet/version.hpp"

namespace cnet {

Tensor represent_s(std::span<const double> s, const GRepr& g) {
    if (s.size() != g.scale.size()) {
        throw DimensionError("constraint parameter length " + std::to_string(s.size()) +
                             " does not match representation scale length " +
                             std::to_string(g.scale.size()));
    }
    if (g.mode == GMode::vector_concat) {
        Tensor out({s.size()});
        for (std::size_t i = 0; i < s.size(); ++i) out[i] = g.scale[i] * s[i];
        return out;
    }
    Tensor out({s.size(), g.height, g.width});
    for (std::size_t c = 0; c < s.size(); ++c) {
        const double v = g.scale[c] * s[c];
        double* plane = out.data() + c * g.height * g.width;
        std::fill(plane, plane + g.height * g.width, v);
    }
    return out;
}

std::vector<double> schema_scale_factors(const ConstraintSpec& spec) {
    std::vector<double> scale;
    for (const auto& r : spec.s_schema()) {
        const double width = r.hi - r.lo;
        scale.push_back(width > 0.0 ? 1.0 / width : 1.0);
    }
    return scale;
}

ConstraintNetModel::ConstraintNetModel(TrunkConfig trunk, GRepr g, ConstraintSpec constraint,
                                       std::uint64_t init_seed)
    : trunk_(std::move(trunk)), g_(std::move(g)), constraint_(std::move(constraint)) {
    validate();
    init_params(init_seed);
    metadata = nlohmann::json::object();
    metadata["seed"] = init_seed;
}

void ConstraintNetModel::init_params(std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "init");
    params_.clear();
    for (std::size_t i = 0; i < trunk_.layers.size(); ++i) {
        const auto& layer = trunk_.layers[i];
        const std::string prefix = "layer" + std::to_string(i);
        if (layer.kind == LayerCfg::Kind::dense) {
            const auto& d = layer.dense;
            Tensor w({d.out, d.in});
            const double bound = std::sqrt(6.0 / static_cast<double>(d.in + d.out));
            for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
            params_.emplace_back(prefix + ".weight", std::move(w));
            params_.emplace_back(prefix + ".bias", Tensor({d.out}));
            params_.back().no_decay = true;
        } else if (layer.kind == LayerCfg::Kind::conv) {
            const auto& c = layer.conv;
            Tensor k({c.out_channels, c.in_channels, c.kernel, c.kernel});
            const double fan_in = static_cast<double>(c.in_channels * c.kernel * c.kernel);
            const double fan_out = static_cast<double>(c.out_channels * c.kernel * c.kernel);
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            for (auto& v : k.vec()) v = rng.uniform(-bound, bound);
            params_.emplace_back(prefix + ".weight", std::move(k));
            params_.emplace_back(prefix + ".bias", Tensor({c.out_channels, 1, 1}));
            params_.back().no_decay = true;
        }
    }
}

void ConstraintNetModel::validate() const {
    if (trunk_.layers.empty()) throw DimensionError("trunk needs at least one layer");
    if (g_.insertion_layer >= trunk_.layers.size()) {
        throw DimensionError("insertion layer " + std::to_string(g_.insertion_layer) +
                             " out of range for " + std::to_string(trunk_.layers.size()) +
                             " layers");
    }
    if (g_.scale.size() != constraint_.s_dim()) {
        throw DimensionError("representation scale length " + std::to_string(g_.scale.size()) +
                             " does not match constraint parameter length " +
                             std::to_string(constraint_.s_dim()));
    }
    std::vector<std::size_t> shape = trunk_.input_shape;
    for (std::size_t i = 0; i < trunk_.layers.size(); ++i) {
        if (i == g_.insertion_layer) {
            if (g_.mode == GMode::vector_concat) {
                if (shape.size() != 1) {
                    throw DimensionError(
                        "vector constraint representation needs a rank-1 input at layer " +
                        std::to_string(i) + ", got " + shape_to_string(shape));
                }
                shape[0] += constraint_.s_dim();
            } else {
                if (shape.size() != 3) {
                    throw DimensionError(
                        "channel constraint representation needs a rank-3 input at layer " +
                        std::to_string(i) + ", got " + shape_to_string(shape));
                }
                if (shape[1] != g_.height || shape[2] != g_.width) {
                    throw DimensionError("constraint representation spatial dims " +
                                         std::to_string(g_.height) + "x" + std::to_string(g_.width) +
                                         " do not match layer input " + shape_to_string(shape));
                }
                shape[0] += constraint_.s_dim();
            }
        }
        const auto& layer = trunk_.layers[i];
        switch (layer.kind) {
            case LayerCfg::Kind::dense: {
                if (shape.size() != 1 || shape[0] != layer.dense.in) {
                    throw DimensionError("layer " + std::to_string(i) + " expects input width " +
                                         std::to_string(layer.dense.in) + ", got " +
                                         shape_to_string(shape));
                }
                shape = {layer.dense.out};
                break;
            }
            case LayerCfg::Kind::conv: {
                if (shape.size() != 3 || shape[0] != layer.conv.in_channels) {
                    throw DimensionError("layer " + std::to_string(i) + " expects " +
                                         std::to_string(layer.conv.in_channels) +
                                         " input channels, got " + shape_to_string(shape));
                }
                if (shape[1] < layer.conv.kernel || shape[2] < layer.conv.kernel) {
                    throw DimensionError("layer " + std::to_string(i) + " kernel size " +
                                         std::to_string(layer.conv.kernel) +
                                         " larger than input " + shape_to_string(shape));
                }
                shape = {layer.conv.out_channels,
                         (shape[1] - layer.conv.kernel) / layer.conv.stride + 1,
                         (shape[2] - layer.conv.kernel) / layer.conv.stride + 1};
                break;
            }
            case LayerCfg::Kind::flatten: {
                shape = {shape_product(shape)};
                break;
            }
        }
    }
    const auto& last = trunk_.layers.back();
    if (last.kind != LayerCfg::Kind::dense || last.dense.act != Activation::linear) {
        throw DimensionError("final trunk layer must be dense with linear activation");
    }
    if (shape.size() != 1 || shape[0] != constraint_.z_dim()) {
        throw DimensionError("trunk output width " + shape_to_string(shape) +
                             " does not match guard input dimension " +
                             std::to_string(constraint_.z_dim()));
    }
}

Value ConstraintNetModel::run(Tape& tape, const Tensor& x, std::span<const double> s,
                              std::span<const Value> param_values) const {
    if (x.shape() != trunk_.input_shape) {
        throw DimensionError("model input shape " + x.shape_str() + " does not match trunk input " +
                             shape_to_string(trunk_.input_shape));
    }
    ConstraintSpec bound = constraint_.with_params(s);
    Tensor g_tensor = represent_s(s, g_);
    Value cur = tape.input(x);
    std::size_t pi = 0;
    for (std::size_t i = 0; i < trunk_.layers.size(); ++i) {
        if (i == g_.insertion_layer) {
            Value g_val = tape.input(g_tensor);
            cur = g_.mode == GMode::vector_concat ? tape.concat(cur, g_val)
                                                  : tape.concat_channels(cur, g_val);
        }
        const auto& layer = trunk_.layers[i];
        switch (layer.kind) {
            case LayerCfg::Kind::dense: {
                Value w = param_values[pi++];
                Value b = param_values[pi++];
                Value col = tape.reshape(cur, {layer.dense.in, 1});
                Value y = tape.matmul(w, col);
                y = tape.reshape(y, {layer.dense.out});
                y = tape.add_broadcast(y, b);
                cur = layer.dense.act == Activation::relu ? tape.relu(y) : y;
                break;
            }
            case LayerCfg::Kind::conv: {
                Value w = param_values[pi++];
                Value b = param_values[pi++];
                Value y = tape.conv2d(cur, w, layer.conv.stride);
                y = tape.add_broadcast(y, b);
                cur = layer.conv.act == Activation::relu ? tape.relu(y) : y;
                break;
            }
            case LayerCfg::Kind::flatten: {
                cur = tape.reshape(cur, {shape_product(tape.value(cur).shape())});
                break;
            }
        }
    }
    return guard(tape, cur, bound);
}

Tensor ConstraintNetModel::forward(const Tensor& x, std::span<const double> s) const {
    Tape tape;
    std::vector<Value> pv;
    pv.reserve(params_.size());
    for (const auto& p : params_) pv.push_back(tape.input(p.value()));
    Value out = run(tape, x, s, pv);
    return tape.value(out);
}

Value ConstraintNetModel::forward_on(Tape& tape, const Tensor& x, std::span<const double> s) {
    std::vector<Value> pv;
    pv.reserve(params_.size());
    for (auto& p : params_) pv.push_back(tape.param(p));
    return run(tape, x, s, pv);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "linear"; }

Activation activation_from(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "linear") return Activation::linear;
    throw ParseError("trunk.layers: unknown activation '" + name + "'");
}

}  // namespace

nlohmann::json ConstraintNetModel::to_json() const {
    nlohmann::json j;
    j["format_version"] = kModelFormatVersion;

    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : trunk_.layers) {
        switch (layer.kind) {
            case LayerCfg::Kind::dense:
                layers.push_back({{"kind", "dense"},
                                  {"in", layer.dense.in},
                                  {"out", layer.dense.out},
                                  {"activation", activation_name(layer.dense.act)}});
                break;
            case LayerCfg::Kind::conv:
                layers.push_back({{"kind", "conv"},
                                  {"in_channels", layer.conv.in_channels},
                                  {"out_channels", layer.conv.out_channels},
                                  {"kernel", layer.conv.kernel},
                                  {"stride", layer.conv.stride},
                                  {"activation", activation_name(layer.conv.act)}});
                break;
            case LayerCfg::Kind::flatten: layers.push_back({{"kind", "flatten"}}); break;
        }
    }
    j["trunk"] = {{"input_shape", trunk_.input_shape}, {"layers", layers}};
    j["g_repr"] = {
        {"mode", g_.mode == GMode::vector_concat ? "vector_concat" : "channel_broadcast"},
        {"insertion_layer", g_.insertion_layer},
        {"scale", g_.scale},
        {"height", g_.height},
        {"width", g_.width},
    };
    j["constraint"] = constraint_.to_json();
    nlohmann::json params = nlohmann::json::object();
    for (const auto& p : params_) {
        params[p.id()] = {{"shape", p.value().shape()}, {"data", p.value().vec()}};
    }
    j["parameters"] = params;
    j["metadata"] = metadata;
    return j;
}

ConstraintNetModel ConstraintNetModel::from_json(const nlohmann::json& j) {
    try {
        if (!j.contains("format_version")) throw ParseError("model: missing format_version");
        const int version = j.at("format_version").get<int>();
        if (version != kModelFormatVersion) {
            throw ParseError("model: unsupported format_version " + std::to_string(version) +
                             ", expected " + std::to_string(kModelFormatVersion));
        }
        ConstraintNetModel model;
        model.trunk_.input_shape =
            j.at("trunk").at("input_shape").get<std::vector<std::size_t>>();
        for (const auto& lj : j.at("trunk").at("layers")) {
            const std::string kind = lj.at("kind").get<std::string>();
            if (kind == "dense") {
                model.trunk_.layers.push_back(LayerCfg::make_dense(
                    lj.at("in").get<std::size_t>(), lj.at("out").get<std::size_t>(),
                    activation_from(lj.at("activation").get<std::string>())));
            } else if (kind == "conv") {
                model.trunk_.layers.push_back(LayerCfg::make_conv(
                    lj.at("in_channels").get<std::size_t>(),
                    lj.at("out_channels").get<std::size_t>(), lj.at("kernel").get<std::size_t>(),
                    lj.at("stride").get<std::size_t>(),
                    activation_from(lj.at("activation").get<std::string>())));
            } else if (kind == "flatten") {
                model.trunk_.layers.push_back(LayerCfg::make_flatten());
            } else {
                throw ParseError("trunk.layers: unknown kind '" + kind + "'");
            }
        }
        const auto& gj = j.at("g_repr");
        const std::string mode = gj.at("mode").get<std::string>();
        if (mode == "vector_concat") {
            model.g_.mode = GMode::vector_concat;
        } else if (mode == "channel_broadcast") {
            model.g_.mode = GMode::channel_broadcast;
        } else {
            throw ParseError("g_repr.mode: unknown value '" + mode + "'");
        }
        model.g_.insertion_layer = gj.at("insertion_layer").get<std::size_t>();
        model.g_.scale = gj.at("scale").get<std::vector<double>>();
        model.g_.height = gj.at("height").get<std::size_t>();
        model.g_.width = gj.at("width").get<std::size_t>();
        model.constraint_ = ConstraintSpec::from_json(j.at("constraint"));
        model.metadata = j.value("metadata", nlohmann::json::object());

        model.validate();

        // Rebuild the parameter list from the layer configs so ids, order and
        // shapes are authoritative, then require exactly matching data.
        model.init_params(0);
        const auto& pj = j.at("parameters");
        for (auto& p : model.params_) {
            if (!pj.contains(p.id())) throw ParseError("parameters: missing entry '" + p.id() + "'");
            const auto& entry = pj.at(p.id());
            auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            auto data = entry.at("data").get<std::vector<double>>();
            if (shape != p.value().shape()) {
                throw ParseError("parameters." + p.id() + ": shape " + shape_to_string(shape) +
                                 " does not match trunk config " + p.value().shape_str());
            }
            if (data.size() != p.value().size()) {
                throw ParseError("parameters." + p.id() + ": data length mismatch");
            }
            p.value() = Tensor(std::move(shape), std::move(data));
        }
        if (pj.size() != model.params_.size()) {
            throw ParseError("parameters: expected " + std::to_string(model.params_.size()) +
                             " entries, found " + std::to_string(pj.size()));
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
}

void ConstraintNetModel::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw UsageError("cannot open '" + tmp + "' for writing");
        out << to_json().dump(2) << '\n';
        if (!out) throw UsageError("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

ConstraintNetModel ConstraintNetModel::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open model file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("model file '" + path + "': " + e.what());
    }
    return from_json(j);
}

}  // namespace cnet
