#include "constraintnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "constraintnet/errors.hpp"

namespace cnet {

double sigmoid_scalar(double x) {
    double v;
    if (x >= 0.0) {
        v = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        v = e / (1.0 + e);
    }
    // Keep the open interval (0, 1) even where rounding would saturate.
    return std::clamp(v, std::numeric_limits<double>::denorm_min(),
                      std::nextafter(1.0, 0.0));
}

void softmax_inplace(const double* in, double* out, std::size_t n) {
    double m = in[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, in[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - m);
        sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

Value Tape::push(Tensor value, std::vector<std::size_t> inputs,
                 std::function<void(Tape&, std::size_t)> back) {
    Node node;
    node.value = std::move(value);
    node.grad = Tensor(node.value.shape());
    node.inputs = std::move(inputs);
    node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return Value{nodes_.size() - 1};
}

void Tape::check(Value v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw UsageError("value handle does not belong to this tape");
}

Value Tape::input(Tensor v) { return push(std::move(v), {}, nullptr); }

Value Tape::param(Parameter& p) {
    Value v = push(p.value(), {}, nullptr);
    bound_.emplace_back(v.id, &p);
    return v;
}

const Tensor& Tape::value(Value v) const {
    check(v);
    return nodes_[v.id].value;
}

Value Tape::matmul(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + ta.shape_str() + " x " + tb.shape_str());
    }
    const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ta.at(i, p);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * tb.at(p, j);
        }
    }
    return push(std::move(out), {a.id, b.id}, [m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const auto& in = t.node_inputs(self);
        const Tensor& ta = t.node_value(in[0]);
        const Tensor& tb = t.node_value(in[1]);
        Tensor& ga = t.node_grad(in[0]);
        Tensor& gb = t.node_grad(in[1]);
        // dA = G * B^T, dB = A^T * G
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = g.at(i, j);
                for (std::size_t p = 0; p < k; ++p) {
                    ga.at(i, p) += gv * tb.at(p, j);
                    gb.at(p, j) += ta.at(i, p) * gv;
                }
            }
        }
    });
}

namespace {

// Trailing-dimension broadcast: right-align shapes; each dim of b must equal
// the matching dim of a or be 1.
bool broadcastable(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (b.size() > a.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i) {
        std::size_t ad = a[a.size() - 1 - i];
        std::size_t bd = b[b.size() - 1 - i];
        if (bd != ad && bd != 1) return false;
    }
    return true;
}

// Maps a flat index in `a` to the corresponding flat index in broadcast `b`.
std::size_t broadcast_index(std::size_t flat, const std::vector<std::size_t>& ashape,
                            const std::vector<std::size_t>& bshape) {
    std::size_t bidx = 0, bstride = 1;
    for (std::size_t i = 0; i < ashape.size(); ++i) {
        std::size_t axis = ashape.size() - 1 - i;
        std::size_t acoord = flat % ashape[axis];
        flat /= ashape[axis];
        if (i < bshape.size()) {
            std::size_t baxis = bshape.size() - 1 - i;
            std::size_t bcoord = bshape[baxis] == 1 ? 0 : acoord;
            bidx += bcoord * bstride;
            bstride *= bshape[baxis];
        }
    }
    return bidx;
}

}  // namespace

Value Tape::add_broadcast(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (!broadcastable(ta.shape(), tb.shape())) {
        throw DimensionError("cannot broadcast " + tb.shape_str() + " onto " + ta.shape_str());
    }
    Tensor out = ta;
    if (ta.same_shape(tb)) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += tb[broadcast_index(i, ta.shape(), tb.shape())];
        }
    }
    return push(std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const auto& in = t.node_inputs(self);
        Tensor& ga = t.node_grad(in[0]);
        Tensor& gb = t.node_grad(in[1]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (ga.same_shape(gb)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        } else {
            // Gradient sums over broadcast axes.
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[broadcast_index(i, ga.shape(), gb.shape())] += g[i];
            }
        }
    });
}

Value Tape::scale(Value a, double c) {
    check(a);
    Tensor out = nodes_[a.id].value;
    for (auto& v : out.vec()) v *= c;
    return push(std::move(out), {a.id}, [c](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

Value Tape::relu(Value a) {
    check(a);
    Tensor out = nodes_[a.id].value;
    for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), {a.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& x = t.node_value(t.node_inputs(self)[0]);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        // Subgradient 0 at x == 0.
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
    });
}

Value Tape::sigmoid(Value a) {
    check(a);
    Tensor out = nodes_[a.id].value;
    for (auto& v : out.vec()) v = sigmoid_scalar(v);
    return push(std::move(out), {a.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& y = t.node_value(self);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Value Tape::softmax(Value a) {
    check(a);
    const Tensor& ta = nodes_[a.id].value;
    if (ta.rank() != 1 || ta.size() == 0) {
        throw DimensionError("softmax expects a nonempty rank-1 tensor, got " + ta.shape_str());
    }
    Tensor out(ta.shape());
    softmax_inplace(ta.data(), out.data(), ta.size());
    return push(std::move(out), {a.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& p = t.node_value(self);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * p[i];
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += p[i] * (g[i] - dot);
    });
}

Value Tape::conv2d(Value input, Value kernels, std::size_t stride) {
    check(input);
    check(kernels);
    if (stride == 0) throw UsageError("conv2d stride must be positive");
    const Tensor& x = nodes_[input.id].value;
    const Tensor& k = nodes_[kernels.id].value;
    if (x.rank() != 3 || k.rank() != 4) {
        throw DimensionError("conv2d expects input [C,H,W] and kernels [Co,Ci,k,k], got " +
                             x.shape_str() + " and " + k.shape_str());
    }
    const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t co = k.dim(0), kc = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    if (kc != ci) {
        throw DimensionError("conv2d channel mismatch: input " + x.shape_str() + " vs kernels " +
                             k.shape_str());
    }
    if (kh > h || kw > w) {
        throw DimensionError("conv2d kernel " + k.shape_str() + " larger than input " + x.shape_str());
    }
    const std::size_t oh = (h - kh) / stride + 1;
    const std::size_t ow = (w - kw) / stride + 1;
    Tensor out({co, oh, ow});
    for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < ci; ++c) {
                    for (std::size_t di = 0; di < kh; ++di) {
                        for (std::size_t dj = 0; dj < kw; ++dj) {
                            acc += x.at(c, i * stride + di, j * stride + dj) * k.at(o, c, di, dj);
                        }
                    }
                }
                out.at(o, i, j) = acc;
            }
        }
    }
    return push(std::move(out), {input.id, kernels.id},
                [stride, kh, kw](Tape& t, std::size_t self) {
                    const Tensor& g = t.node_grad(self);
                    const auto& in = t.node_inputs(self);
                    const Tensor& x = t.node_value(in[0]);
                    const Tensor& k = t.node_value(in[1]);
                    Tensor& gx = t.node_grad(in[0]);
                    Tensor& gk = t.node_grad(in[1]);
                    const std::size_t ci = x.dim(0);
                    const std::size_t co = g.dim(0), oh = g.dim(1), ow = g.dim(2);
                    for (std::size_t o = 0; o < co; ++o) {
                        for (std::size_t i = 0; i < oh; ++i) {
                            for (std::size_t j = 0; j < ow; ++j) {
                                const double gv = g.at(o, i, j);
                                for (std::size_t c = 0; c < ci; ++c) {
                                    for (std::size_t di = 0; di < kh; ++di) {
                                        for (std::size_t dj = 0; dj < kw; ++dj) {
                                            gx.at(c, i * stride + di, j * stride + dj) +=
                                                gv * k.at(o, c, di, dj);
                                            gk.at(o, c, di, dj) +=
                                                gv * x.at(c, i * stride + di, j * stride + dj);
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
}

Value Tape::mse_loss(Value pred, Value target) {
    check(pred);
    check(target);
    const Tensor& p = nodes_[pred.id].value;
    const Tensor& y = nodes_[target.id].value;
    if (!p.same_shape(y)) {
        throw DimensionError("mse_loss shape mismatch: " + p.shape_str() + " vs " + y.shape_str());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double d = p[i] - y[i];
        acc += d * d;
    }
    acc /= static_cast<double>(p.size());
    return push(Tensor::scalar(acc), {pred.id, target.id}, [](Tape& t, std::size_t self) {
        const double g = t.node_grad(self)[0];
        const auto& in = t.node_inputs(self);
        const Tensor& p = t.node_value(in[0]);
        const Tensor& y = t.node_value(in[1]);
        Tensor& gp = t.node_grad(in[0]);
        Tensor& gy = t.node_grad(in[1]);
        const double c = 2.0 * g / static_cast<double>(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d = c * (p[i] - y[i]);
            gp[i] += d;
            gy[i] -= d;
        }
    });
}

Value Tape::concat(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != 1 || tb.rank() != 1) {
        throw DimensionError("concat expects rank-1 tensors, got " + ta.shape_str() + " and " +
                             tb.shape_str());
    }
    Tensor out({ta.size() + tb.size()});
    std::copy(ta.data(), ta.data() + ta.size(), out.data());
    std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
    return push(std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const auto& in = t.node_inputs(self);
        Tensor& ga = t.node_grad(in[0]);
        Tensor& gb = t.node_grad(in[1]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
    });
}

Value Tape::concat_channels(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2)) {
        throw DimensionError("concat_channels expects rank-3 tensors with equal spatial dims, got " +
                             ta.shape_str() + " and " + tb.shape_str());
    }
    Tensor out({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
    std::copy(ta.data(), ta.data() + ta.size(), out.data());
    std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
    return push(std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        const auto& in = t.node_inputs(self);
        Tensor& ga = t.node_grad(in[0]);
        Tensor& gb = t.node_grad(in[1]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
    });
}

Value Tape::slice(Value a, std::size_t lo, std::size_t hi) {
    check(a);
    const Tensor& ta = nodes_[a.id].value;
    if (ta.rank() != 1 || lo > hi || hi > ta.size()) {
        throw DimensionError("slice [" + std::to_string(lo) + ", " + std::to_string(hi) +
                             ") out of range for " + ta.shape_str());
    }
    Tensor out({hi - lo});
    std::copy(ta.data() + lo, ta.data() + hi, out.data());
    return push(std::move(out), {a.id}, [lo](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[lo + i] += g[i];
    });
}

Value Tape::reshape(Value a, std::vector<std::size_t> shape) {
    check(a);
    const Tensor& ta = nodes_[a.id].value;
    if (shape_product(shape) != ta.size()) {
        throw DimensionError("reshape to " + shape_to_string(shape) + " changes element count of " +
                             ta.shape_str());
    }
    Tensor out(std::move(shape), ta.vec());
    return push(std::move(out), {a.id}, [](Tape& t, std::size_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(t.node_inputs(self)[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Value Tape::custom(Tensor out, std::vector<Value> inputs,
                   std::function<void(Tape&, std::size_t)> back) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Value v : inputs) {
        check(v);
        ids.push_back(v.id);
    }
    return push(std::move(out), std::move(ids), std::move(back));
}

void Tape::backward(Value loss) {
    if (nodes_.empty()) throw UsageError("backward called before any forward pass was recorded");
    check(loss);
    if (nodes_[loss.id].value.size() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " +
                         nodes_[loss.id].value.shape_str());
    }
    for (auto& node : nodes_) {
        if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape());
        node.grad.fill(0.0);
    }
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (i > loss.id) continue;  // slots after the loss cannot influence it
        if (nodes_[i].back) nodes_[i].back(*this, i);
    }
    std::unordered_set<Parameter*> seen;
    for (auto& [id, p] : bound_) {
        if (seen.insert(p).second) p->zero_grad();
    }
    for (auto& [id, p] : bound_) {
        const Tensor& g = nodes_[id].grad;
        Tensor& pg = p->grad();
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
    // Release accumulators; gradients now live in the Parameters.
    for (auto& node : nodes_) node.grad = Tensor();
}

}  // namespace cnet
