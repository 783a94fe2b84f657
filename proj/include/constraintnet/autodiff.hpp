#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "constraintnet/tensor.hpp"

namespace cnet {

// Learnable tensor with a persistent gradient buffer of identical shape.
class Parameter {
public:
    Parameter(std::string id, Tensor value)
        : id_(std::move(id)), value_(std::move(value)), grad_(value_.shape()) {}

    const std::string& id() const { return id_; }
    Tensor& value() { return value_; }
    const Tensor& value() const { return value_; }
    Tensor& grad() { return grad_; }
    const Tensor& grad() const { return grad_; }
    void zero_grad() { grad_.fill(0.0); }

    // Excluded from L2 regularization (biases).
    bool no_decay = false;

private:
    std::string id_;
    Tensor value_;
    Tensor grad_;
};

// Handle to a slot on a Tape.
struct Value {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

// Reverse-mode tape, rebuilt per forward pass (define-by-run). Recording an
// operation appends a slot holding its output value and a backward closure;
// backward() replays the slots in reverse creation order, which is a reverse
// topological order by construction. A tape and its values are confined to
// one thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value input(Tensor v);
    Value param(Parameter& p);

    const Tensor& value(Value v) const;

    Value matmul(Value a, Value b);
    Value add_broadcast(Value a, Value b);
    Value scale(Value a, double c);
    Value relu(Value a);
    Value sigmoid(Value a);
    Value softmax(Value a);
    Value conv2d(Value input, Value kernels, std::size_t stride);
    Value mse_loss(Value pred, Value target);
    Value concat(Value a, Value b);           // rank-1
    Value concat_channels(Value a, Value b);  // rank-3, equal spatial dims
    Value slice(Value a, std::size_t lo, std::size_t hi);  // rank-1, [lo, hi)
    Value reshape(Value a, std::vector<std::size_t> shape);

    // Records an externally defined differentiable operation. The backward
    // closure receives the tape and the slot id of the recorded node.
    Value custom(Tensor out, std::vector<Value> inputs,
                 std::function<void(Tape&, std::size_t)> back);

    // Accumulates d(loss)/d(theta) into every bound Parameter's gradient
    // (overwriting previous contents) and releases all slot accumulators.
    void backward(Value loss);

    std::size_t size() const { return nodes_.size(); }

    // Slot access for backward closures.
    const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
    Tensor& node_grad(std::size_t id) { return nodes_[id].grad; }
    const std::vector<std::size_t>& node_inputs(std::size_t id) const { return nodes_[id].inputs; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        std::function<void(Tape&, std::size_t)> back;  // empty for leaves
    };

    Value push(Tensor value, std::vector<std::size_t> inputs,
               std::function<void(Tape&, std::size_t)> back);
    void check(Value v) const;

    std::deque<Node> nodes_;
    std::vector<std::pair<std::size_t, Parameter*>> bound_;
};

// Numerically stable logistic function, also used outside the tape.
double sigmoid_scalar(double x);

// In-place stabilized softmax of a contiguous range.
void softmax_inplace(const double* in, double* out, std::size_t n);

}  // namespace cnet
