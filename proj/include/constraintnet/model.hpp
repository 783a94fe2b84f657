#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "constraintnet/autodiff.hpp"
#include "constraintnet/constraints.hpp"
#include "constraintnet/tensor.hpp"

namespace cnet {

enum class Activation { linear, relu };

struct DenseCfg {
    std::size_t in = 0;
    std::size_t out = 0;
    Activation act = Activation::linear;
};

struct ConvCfg {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    Activation act = Activation::relu;
};

struct LayerCfg {
    enum class Kind { dense, conv, flatten } kind = Kind::dense;
    DenseCfg dense;
    ConvCfg conv;

    static LayerCfg make_dense(std::size_t in, std::size_t out, Activation act) {
        LayerCfg l;
        l.kind = Kind::dense;
        l.dense = {in, out, act};
        return l;
    }
    static LayerCfg make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                              std::size_t stride, Activation act) {
        LayerCfg l;
        l.kind = Kind::conv;
        l.conv = {in_ch, out_ch, kernel, stride, act};
        return l;
    }
    static LayerCfg make_flatten() {
        LayerCfg l;
        l.kind = Kind::flatten;
        return l;
    }
};

// Layer dimensions are written with the constraint-representation insertion
// already accounted for: at the insertion layer the input width (vector mode)
// or channel count (broadcast mode) grows by the parameter length.
struct TrunkConfig {
    std::vector<std::size_t> input_shape;
    std::vector<LayerCfg> layers;
};

enum class GMode { vector_concat, channel_broadcast };

// How the constraint parameter enters the trunk: each component is rescaled
// by a per-component factor and either concatenated to the input of the
// insertion layer (vector mode) or broadcast as constant channels of the
// spatial size at that point (broadcast mode). insertion_layer == 0 feeds the
// model input itself.
struct GRepr {
    GMode mode = GMode::vector_concat;
    std::size_t insertion_layer = 0;
    std::vector<double> scale;  // one factor per parameter component
    std::size_t height = 0;     // spatial dims at the insertion point (broadcast mode)
    std::size_t width = 0;
};

Tensor represent_s(std::span<const double> s, const GRepr& g);

// Per-component scale factors that map each schema range onto unit width.
std::vector<double> schema_scale_factors(const ConstraintSpec& spec);

// Trunk + constraint representation + guard layer. The constraint member acts
// as a template fixing the class structure; forward() binds it to the flat
// parameter vector passed per call, so the admissible region can change every
// forward pass while the guarantee holds for any weights.
class ConstraintNetModel {
public:
    ConstraintNetModel(TrunkConfig trunk, GRepr g, ConstraintSpec constraint,
                       std::uint64_t init_seed);

    // Inference forward pass: thread-safe on an immutable model.
    Tensor forward(const Tensor& x, std::span<const double> s) const;

    // Training forward pass on a caller-owned tape with parameters bound for
    // gradient accumulation.
    Value forward_on(Tape& tape, const Tensor& x, std::span<const double> s);

    const TrunkConfig& trunk() const { return trunk_; }
    const GRepr& g_repr() const { return g_; }
    const ConstraintSpec& constraint() const { return constraint_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }

    std::size_t input_size() const { return shape_product(trunk_.input_shape); }
    std::size_t output_size() const { return constraint_.out_dim(); }

    nlohmann::json metadata;

    void save(const std::string& path) const;
    static ConstraintNetModel load(const std::string& path);
    nlohmann::json to_json() const;
    static ConstraintNetModel from_json(const nlohmann::json& j);

private:
    ConstraintNetModel() = default;
    void init_params(std::uint64_t seed);
    void validate() const;
    Value run(Tape& tape, const Tensor& x, std::span<const double> s,
              std::span<const Value> param_values) const;

    TrunkConfig trunk_;
    GRepr g_;
    ConstraintSpec constraint_;
    std::vector<Parameter> params_;
};

}  // namespace cnet
