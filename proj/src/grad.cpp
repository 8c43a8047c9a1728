#include "spkdef/grad.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "spkdef/error.hpp"
#include "spkdef/fft.hpp"

namespace spkdef::grad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(grad::numel(shape), 0.0) {}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != grad::numel(shape)) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
}

double Tensor::item() const {
    if (data.size() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape));
    return data[0];
}

std::vector<double> LinearOperator::operator()(std::span<const double> x) const {
    std::vector<double> y(output_size());
    apply(x, y);
    return y;
}

DenseOperator::DenseOperator(std::size_t rows, std::size_t cols, std::vector<double> a)
    : rows_(rows), cols_(cols), a_(std::move(a)) {
    if (a_.size() != rows * cols) throw ShapeError("DenseOperator: matrix size mismatch");
}

void DenseOperator::apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* row = a_.data() + r * cols_;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols_; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

void DenseOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    for (std::size_t r = 0; r < rows_; ++r) {
        const double* row = a_.data() + r * cols_;
        const double g = g_out[r];
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < cols_; ++c) g_in[c] += row[c] * g;
    }
}

ComposedOperator::ComposedOperator(std::shared_ptr<const LinearOperator> first,
                                   std::shared_ptr<const LinearOperator> second)
    : first_(std::move(first)), second_(std::move(second)) {
    if (first_->output_size() != second_->input_size()) {
        throw ShapeError("ComposedOperator: inner dimensions disagree");
    }
}

void ComposedOperator::apply(std::span<const double> x, std::span<double> y) const {
    std::vector<double> mid(first_->output_size());
    first_->apply(x, mid);
    second_->apply(mid, y);
}

void ComposedOperator::apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const {
    std::vector<double> mid(first_->output_size(), 0.0);
    second_->apply_adjoint_add(g_out, mid);
    first_->apply_adjoint_add(mid, g_in);
}

// ---- Graph -----------------------------------------------------------------

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::leaf(Tensor t, bool requires_grad) {
    nodes_.push_back(Node{std::move(t), {}, requires_grad, {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) {
        if (v.graph != this) throw ContractError("op inputs belong to different graphs");
        needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
}

std::vector<double> Graph::grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<double>(n.value.numel(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    if (nodes_.at(loss.id).value.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(nodes_[loss.id].value.shape));
    }
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
    }
}

// ---- ops -------------------------------------------------------------------

namespace {

void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
    if (a.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
    }
}

// Adds `go` scaled elementwise by `factor(i)` into the gradient of `id` when needed.
template <typename F>
void accumulate(Graph& g, std::size_t id, const std::vector<double>& go, F&& factor) {
    if (!g.requires_grad(id)) return;
    auto& gi = g.grad_buffer(id);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * factor(i);
}

template <typename F>
Var unary(Var a, F&& f, const char* /*name*/, std::function<double(double x, double y)> dydx) {
    Tensor out(a.shape());
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
    return a.graph->record(std::move(out), {a}, [ia = a.id, dydx = std::move(dydx)](Graph& g, std::size_t self) {
        const auto& x = g.node_value(ia).data;
        const auto& y = g.node_value(self).data;
        accumulate(g, ia, g.node_grad(self), [&](std::size_t i) { return dydx(x[i], y[i]); });
    });
}

}  // namespace

Var add(Var a, Var b) {
    require_same(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    return a.graph->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        accumulate(g, ia, go, [](std::size_t) { return 1.0; });
        accumulate(g, ib, go, [](std::size_t) { return 1.0; });
    });
}

Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
    return a.graph->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        accumulate(g, ia, go, [](std::size_t) { return 1.0; });
        accumulate(g, ib, go, [](std::size_t) { return -1.0; });
    });
}

Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
    return a.graph->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        const auto& av = g.node_value(ia).data;
        const auto& bv = g.node_value(ib).data;
        accumulate(g, ia, go, [&](std::size_t i) { return bv[i]; });
        accumulate(g, ib, go, [&](std::size_t i) { return av[i]; });
    });
}

Var scale(Var a, double s) {
    return unary(a, [s](double x) { return s * x; }, "scale", [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
    return unary(a, [s](double x) { return x + s; }, "add_scalar", [](double, double) { return 1.0; });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, "relu",
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var log(Var a) {
    for (double v : a.value().data) {
        if (!(v > 0.0)) throw ContractError("log: non-positive input");
    }
    return unary(a, [](double x) { return std::log(x); }, "log", [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, "exp", [](double, double y) { return y; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, "square", [](double x, double) { return 2.0 * x; });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); }, "tanh", [](double, double y) { return 1.0 - y * y; });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return a.graph->record(Tensor::scalar(s), {a}, [ia = a.id](Graph& g, std::size_t self) {
        const double go = g.node_grad(self)[0];
        auto& gi = g.grad_buffer(ia);
        for (double& v : gi) v += go;
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var mean_axis(Var a, std::size_t axis) {
    require_rank(a, 2, "mean_axis");
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    if (axis > 1) throw ShapeError("mean_axis: axis must be 0 or 1");
    const auto& x = a.value().data;
    Tensor out(Shape{axis == 0 ? cols : rows});
    if (axis == 0) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.data[c] += x[r * cols + c];
        for (double& v : out.data) v /= static_cast<double>(rows);
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
            out.data[r] = s / static_cast<double>(cols);
        }
    }
    return a.graph->record(std::move(out), {a}, [ia = a.id, rows, cols, axis](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                gi[r * cols + c] += axis == 0 ? go[c] / static_cast<double>(rows) : go[r] / static_cast<double>(cols);
            }
        }
    });
}

Var matmul(Var a, Var b) {
    require_rank(a, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const bool vec = b.shape().size() == 1;
    if (!vec) require_rank(b, 2, "matmul");
    const std::size_t kb = b.shape()[0];
    const std::size_t n = vec ? 1 : b.shape()[1];
    if (kb != k) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    }
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    Tensor out(vec ? Shape{m} : Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return a.graph->record(std::move(out), {a, b}, [ia = a.id, ib = b.id, m, k, n](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        const auto& av = g.node_value(ia).data;
        const auto& bv = g.node_value(ib).data;
        if (g.requires_grad(ia)) {  // dA = dY * B^T
            auto& ga = g.grad_buffer(ia);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * bv[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (g.requires_grad(ib)) {  // dB = A^T * dY
            auto& gb = g.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
                }
        }
    });
}

Var add_bias(Var x, Var bias) {
    require_rank(bias, 1, "add_bias");
    const std::size_t rows = x.shape()[0];
    const std::size_t cols = x.shape().size() == 2 ? x.shape()[1] : 1;
    if (x.shape().size() > 2 || bias.shape()[0] != rows) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += bias.value().data[r];
    return x.graph->record(std::move(out), {x, bias}, [ix = x.id, ib = bias.id, rows, cols](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        accumulate(g, ix, go, [](std::size_t) { return 1.0; });
        if (g.requires_grad(ib)) {
            auto& gb = g.grad_buffer(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[r] += go[r * cols + c];
        }
    });
}

Var conv1d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
    require_rank(x, 2, "conv1d");
    require_rank(w, 3, "conv1d");
    require_rank(b, 1, "conv1d");
    const std::size_t cin = x.shape()[0], t_in = x.shape()[1];
    const std::size_t cout = w.shape()[0], kw = w.shape()[2];
    if (w.shape()[1] != cin || b.shape()[0] != cout) {
        throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()) + " / bias " + shape_str(b.shape()));
    }
    if (stride == 0) throw ShapeError("conv1d: stride must be positive");
    if (t_in + 2 * padding < kw) throw ShapeError("conv1d: input shorter than kernel");
    const std::size_t t_out = (t_in + 2 * padding - kw) / stride + 1;

    const auto& xv = x.value().data;
    const auto& wv = w.value().data;
    const auto& bv = b.value().data;
    Tensor out(Shape{cout, t_out});
    // Output index t reads input index t*stride + k - padding.
    auto in_range = [=](std::size_t k, std::size_t& lo, std::size_t& hi) {
        // t such that 0 <= t*stride + k - padding < t_in
        lo = 0;
        if (k < padding) lo = (padding - k + stride - 1) / stride;
        const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(t_in) - 1 + static_cast<std::ptrdiff_t>(padding) -
                                    static_cast<std::ptrdiff_t>(k);
        hi = last < 0 ? 0 : std::min<std::size_t>(t_out, static_cast<std::size_t>(last) / stride + 1);
    };
    for (std::size_t co = 0; co < cout; ++co) {
        double* orow = out.data.data() + co * t_out;
        std::fill(orow, orow + t_out, bv[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xrow = xv.data() + ci * t_in;
            for (std::size_t k = 0; k < kw; ++k) {
                const double wk = wv[(co * cin + ci) * kw + k];
                std::size_t lo, hi;
                in_range(k, lo, hi);
                for (std::size_t t = lo; t < hi; ++t) orow[t] += wk * xrow[t * stride + k - padding];
            }
        }
    }
    return x.graph->record(
        std::move(out), {x, w, b},
        [ix = x.id, iw = w.id, ib = b.id, cin, cout, kw, t_in, t_out, stride, padding, in_range](Graph& g,
                                                                                                  std::size_t self) {
            const auto& go = g.node_grad(self);
            const auto& xv = g.node_value(ix).data;
            const auto& wv = g.node_value(iw).data;
            const bool need_x = g.requires_grad(ix), need_w = g.requires_grad(iw);
            std::vector<double>* gx = need_x ? &g.grad_buffer(ix) : nullptr;
            std::vector<double>* gw = need_w ? &g.grad_buffer(iw) : nullptr;
            if (g.requires_grad(ib)) {
                auto& gb = g.grad_buffer(ib);
                for (std::size_t co = 0; co < cout; ++co)
                    for (std::size_t t = 0; t < t_out; ++t) gb[co] += go[co * t_out + t];
            }
            for (std::size_t co = 0; co < cout; ++co) {
                const double* grow = go.data() + co * t_out;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xrow = xv.data() + ci * t_in;
                    for (std::size_t k = 0; k < kw; ++k) {
                        std::size_t lo, hi;
                        in_range(k, lo, hi);
                        const std::size_t widx = (co * cin + ci) * kw + k;
                        if (gw) {
                            double s = 0.0;
                            for (std::size_t t = lo; t < hi; ++t) s += grow[t] * xrow[t * stride + k - padding];
                            (*gw)[widx] += s;
                        }
                        if (gx) {
                            const double wk = wv[widx];
                            double* gxrow = gx->data() + ci * t_in;
                            for (std::size_t t = lo; t < hi; ++t) gxrow[t * stride + k - padding] += wk * grow[t];
                        }
                    }
                }
            }
        });
}

Var max_pool1d(Var x, std::size_t kernel, std::size_t stride) {
    require_rank(x, 2, "max_pool1d");
    const std::size_t c = x.shape()[0], t_in = x.shape()[1];
    if (kernel == 0 || stride == 0 || t_in < kernel) throw ShapeError("max_pool1d: invalid kernel/stride for input");
    const std::size_t t_out = (t_in - kernel) / stride + 1;
    const auto& xv = x.value().data;
    Tensor out(Shape{c, t_out});
    std::vector<std::size_t> arg(c * t_out);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t t = 0; t < t_out; ++t) {
            std::size_t best = ch * t_in + t * stride;
            for (std::size_t k = 1; k < kernel; ++k) {
                std::size_t idx = ch * t_in + t * stride + k;
                if (xv[idx] > xv[best]) best = idx;
            }
            arg[ch * t_out + t] = best;
            out.data[ch * t_out + t] = xv[best];
        }
    }
    return x.graph->record(std::move(out), {x}, [ix = x.id, arg = std::move(arg)](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
    });
}

Var transpose(Var a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out(Shape{c, r});
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = x[i * c + j];
    return a.graph->record(std::move(out), {a}, [ia = a.id, r, c](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += go[j * r + i];
    });
}

Var reshape(Var a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    }
    Tensor out(std::move(shape), a.value().data);
    return a.graph->record(std::move(out), {a}, [ia = a.id](Graph& g, std::size_t self) {
        accumulate(g, ia, g.node_grad(self), [](std::size_t) { return 1.0; });
    });
}

Var gather(Var a, std::vector<std::size_t> indices) {
    const auto& x = a.value().data;
    Tensor out(Shape{indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.size()) throw ShapeError("gather: index out of range");
        out.data[i] = x[indices[i]];
    }
    return a.graph->record(std::move(out), {a}, [ia = a.id, indices = std::move(indices)](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t i = 0; i < indices.size(); ++i) gi[indices[i]] += go[i];
    });
}

Var slice(Var a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.numel()) throw ShapeError("slice: range out of bounds");
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return gather(a, std::move(idx));
}

Var gather_rows(Var a, std::vector<std::size_t> rows) {
    require_rank(a, 2, "gather_rows");
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    const auto& x = a.value().data;
    Tensor out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw ShapeError("gather_rows: row index out of range");
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return a.graph->record(std::move(out), {a}, [ia = a.id, d, rows = std::move(rows)](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gi = g.grad_buffer(ia);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gi[rows[i] * d + j] += go[i * d + j];
    });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rank = parts[0].shape().size();
    if (rank == 0 || rank > 2 || axis >= rank) throw ShapeError("concat: unsupported rank/axis");
    Graph* graph = parts[0].graph;

    if (rank == 1 || axis == 0) {
        // Row-major concatenation along the leading axis is flat concatenation.
        Shape shape = parts[0].shape();
        shape[0] = 0;
        std::vector<double> data;
        std::vector<std::size_t> offsets;
        for (const Var& p : parts) {
            if (p.shape().size() != rank || (rank == 2 && p.shape()[1] != parts[0].shape()[1])) {
                throw ShapeError("concat: incompatible part shape " + shape_str(p.shape()));
            }
            offsets.push_back(data.size());
            shape[0] += p.shape()[0];
            data.insert(data.end(), p.value().data.begin(), p.value().data.end());
        }
        std::vector<std::size_t> ids;
        for (const Var& p : parts) ids.push_back(p.id);
        return graph->record(Tensor(std::move(shape), std::move(data)), parts,
                             [ids = std::move(ids), offsets = std::move(offsets)](Graph& g, std::size_t self) {
                                 const auto& go = g.node_grad(self);
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                     if (!g.requires_grad(ids[k])) continue;
                                     auto& gi = g.grad_buffer(ids[k]);
                                     for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[offsets[k] + i];
                                 }
                             });
    }

    const std::size_t rows = parts[0].shape()[0];
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows) {
            throw ShapeError("concat: incompatible part shape " + shape_str(p.shape()));
        }
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    Tensor out(Shape{rows, total});
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& x = parts[k].value().data;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) out.data[r * total + col + c] = x[r * widths[k] + c];
        col += widths[k];
    }
    std::vector<std::size_t> ids;
    for (const Var& p : parts) ids.push_back(p.id);
    return graph->record(std::move(out), parts,
                         [ids = std::move(ids), widths = std::move(widths), rows, total](Graph& g, std::size_t self) {
                             const auto& go = g.node_grad(self);
                             std::size_t col = 0;
                             for (std::size_t k = 0; k < ids.size(); ++k) {
                                 if (g.requires_grad(ids[k])) {
                                     auto& gi = g.grad_buffer(ids[k]);
                                     for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t c = 0; c < widths[k]; ++c)
                                             gi[r * widths[k] + c] += go[r * total + col + c];
                                 }
                                 col += widths[k];
                             }
                         });
}

Var softmax_cross_entropy(Var logits, std::size_t label) {
    require_rank(logits, 1, "softmax_cross_entropy");
    const auto& z = logits.value().data;
    if (label >= z.size()) {
        throw ContractError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(z.size()) + " classes");
    }
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - zmax);
        denom += p[i];
    }
    for (double& v : p) v /= denom;
    const double loss = -(z[label] - zmax - std::log(denom));
    return logits.graph->record(Tensor::scalar(loss), {logits},
                                [il = logits.id, label, p = std::move(p)](Graph& g, std::size_t self) {
                                    const double go = g.node_grad(self)[0];
                                    auto& gi = g.grad_buffer(il);
                                    for (std::size_t i = 0; i < p.size(); ++i)
                                        gi[i] += go * (p[i] - (i == label ? 1.0 : 0.0));
                                });
}

Var median_select(Var x, std::size_t k) {
    if (k == 0 || k % 2 == 0) throw ParameterError("median_select: window size must be odd, got " + std::to_string(k));
    const auto& v = x.value().data;
    const std::size_t n = v.size();
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out(x.shape());
    std::vector<std::size_t> sel(n);
    std::vector<std::size_t> window(k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(j) - half;
            window[j] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(n) - 1));
        }
        // Ties broken by index so selection is deterministic.
        std::nth_element(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(k / 2), window.end(),
                         [&](std::size_t a, std::size_t b) { return v[a] < v[b] || (v[a] == v[b] && a < b); });
        sel[i] = window[k / 2];
        out.data[i] = v[sel[i]];
    }
    return x.graph->record(std::move(out), {x}, [ix = x.id, sel = std::move(sel)](Graph& g, std::size_t self) {
        const auto& go = g.node_grad(self);
        auto& gi = g.grad_buffer(ix);
        for (std::size_t i = 0; i < sel.size(); ++i) gi[sel[i]] += go[i];
    });
}

Var linear_map(std::shared_ptr<const LinearOperator> op, Var x, Shape out_shape) {
    if (x.numel() != op->input_size()) {
        throw ShapeError("linear_map: operator expects " + std::to_string(op->input_size()) + " inputs, got " +
                         shape_str(x.shape()));
    }
    if (out_shape.empty()) out_shape = {op->output_size()};
    if (numel(out_shape) != op->output_size()) throw ShapeError("linear_map: output shape mismatch");
    Tensor out(std::move(out_shape));
    op->apply(x.value().data, out.data);
    return x.graph->record(std::move(out), {x}, [ix = x.id, op = std::move(op)](Graph& g, std::size_t self) {
        op->apply_adjoint_add(g.node_grad(self), g.grad_buffer(ix));
    });
}

Var power_spectrum(Var frames, std::size_t fft_size) {
    require_rank(frames, 2, "power_spectrum");
    const std::size_t n = frames.shape()[0], flen = frames.shape()[1];
    if (fft_size < flen) throw ShapeError("power_spectrum: fft_size smaller than frame length");
    const std::size_t bins = fft_size / 2 + 1;
    const auto& x = frames.value().data;
    Tensor out(Shape{n, bins});
    std::vector<fft::Complex> spectra(n * bins);
    for (std::size_t f = 0; f < n; ++f) {
        auto spec = fft::rfft(std::span<const double>(x.data() + f * flen, flen), fft_size);
        for (std::size_t k = 0; k < bins; ++k) {
            spectra[f * bins + k] = spec[k];
            out.data[f * bins + k] = std::norm(spec[k]);
        }
    }
    return frames.graph->record(
        std::move(out), {frames},
        [ix = frames.id, n, flen, bins, fft_size, spectra = std::move(spectra)](Graph& g, std::size_t self) {
            // dL/dx_t = 2 Re( sum_k g_k conj(X_k) e^{-2 pi i k t / n} ) over the one-sided bins.
            const auto& go = g.node_grad(self);
            auto& gi = g.grad_buffer(ix);
            std::vector<fft::Complex> buf(fft_size);
            for (std::size_t f = 0; f < n; ++f) {
                std::fill(buf.begin(), buf.end(), fft::Complex{});
                for (std::size_t k = 0; k < bins; ++k) buf[k] = go[f * bins + k] * std::conj(spectra[f * bins + k]);
                fft::fft(buf);
                for (std::size_t t = 0; t < flen; ++t) gi[f * flen + t] += 2.0 * buf[t].real();
            }
        });
}

Var standardize_columns(Var x) {
    require_rank(x, 2, "standardize_columns");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    const auto& v = x.value().data;
    std::vector<double> mu(d, 0.0), inv_sigma(d, 1.0);
    std::vector<bool> scaled(d, false);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) mu[c] += v[r * d + c];
    for (double& m : mu) m /= static_cast<double>(n);
    for (std::size_t c = 0; c < d; ++c) {
        double var = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            double e = v[r * d + c] - mu[c];
            var += e * e;
        }
        var /= static_cast<double>(n);
        if (var >= 1e-12) {
            scaled[c] = true;
            inv_sigma[c] = 1.0 / std::sqrt(var);
        }
    }
    Tensor out(x.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = (v[r * d + c] - mu[c]) * inv_sigma[c];
    return x.graph->record(std::move(out), {x},
                           [ix = x.id, n, d, inv_sigma = std::move(inv_sigma), scaled = std::move(scaled)](
                               Graph& g, std::size_t self) {
                               const auto& go = g.node_grad(self);
                               const auto& y = g.node_value(self).data;
                               auto& gi = g.grad_buffer(ix);
                               for (std::size_t c = 0; c < d; ++c) {
                                   double mg = 0.0, mgy = 0.0;
                                   for (std::size_t r = 0; r < n; ++r) {
                                       mg += go[r * d + c];
                                       mgy += go[r * d + c] * y[r * d + c];
                                   }
                                   mg /= static_cast<double>(n);
                                   mgy /= static_cast<double>(n);
                                   for (std::size_t r = 0; r < n; ++r) {
                                       double gr = go[r * d + c] - mg;
                                       if (scaled[c]) gr = inv_sigma[c] * (gr - y[r * d + c] * mgy);
                                       gi[r * d + c] += gr;
                                   }
                               }
                           });
}

Var bpda(Var x, const std::function<Tensor(const Tensor&)>& fn) {
    Tensor out = fn(x.value());
    if (out.shape != x.shape()) throw ShapeError("bpda: wrapped transform changed the shape");
    return x.graph->record(std::move(out), {x}, [ix = x.id](Graph& g, std::size_t self) {
        accumulate(g, ix, g.node_grad(self), [](std::size_t) { return 1.0; });
    });
}

// ---- utilities -------------------------------------------------------------

namespace {

double eval_scalar(const std::function<Var(Graph&, Var)>& f, const Tensor& x) {
    Graph g;
    Var in = g.constant(x);
    return f(g, in).value().item();
}

std::vector<double> eval_grad(const std::function<Var(Graph&, Var)>& f, const Tensor& x) {
    Graph g;
    Var in = g.leaf(x, true);
    Var out = f(g, in);
    g.backward(out);
    return g.grad(in);
}

double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

}  // namespace

GradCheckResult grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x, double h, std::size_t coords,
                           std::uint64_t seed) {
    GradCheckResult res;
    std::vector<std::size_t> idx(x.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (coords < idx.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(coords);
    }
    const std::vector<double> analytic = eval_grad(f, x);
    for (std::size_t i : idx) {
        Tensor point = x;
        std::vector<double> a = analytic;
        for (int attempt = 0; attempt < 4; ++attempt) {
            const double f0 = eval_scalar(f, point);
            Tensor plus = point, minus = point;
            plus.data[i] += h;
            minus.data[i] -= h;
            const double fp = eval_scalar(f, plus), fm = eval_scalar(f, minus);
            const double right = (fp - f0) / h, left = (f0 - fm) / h;
            const double scale = std::max({std::abs(right), std::abs(left), 1e-6});
            // Half-step central difference: on a smooth stretch it agrees with
            // the full step to O(h^2); a kink inside the interval breaks that.
            Tensor hp = point, hm = point;
            hp.data[i] += h / 2;
            hm.data[i] -= h / 2;
            const double full = (fp - fm) / (2.0 * h), half = (eval_scalar(f, hp) - eval_scalar(f, hm)) / h;
            const bool kink = (std::abs(right - left) / scale > 0.05 || rel_error(full, half) > 1e-4) && attempt < 3;
            if (kink) {
                point.data[i] += 1e-3;
                a = eval_grad(f, point);
                ++res.kinks_avoided;
                continue;
            }
            res.max_rel_error = std::max(res.max_rel_error, rel_error(a[i], (fp - fm) / (2.0 * h)));
            break;
        }
        ++res.coords_checked;
    }
    return res;
}

namespace {

void write_le_doubles(std::ostream& out, const std::vector<double>& v) {
    for (double d : v) {
        auto bits = std::bit_cast<std::uint64_t>(d);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        out.write(b, 8);
    }
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out << "tensors " << tensors.size() << "\n";
    for (const auto& [name, t] : tensors) {
        if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
            throw ContractError("checkpoint tensor name must be a non-empty token: '" + name + "'");
        }
        out << name << " " << t.shape.size();
        for (std::size_t d : t.shape) out << " " << d;
        out << "\n";
    }
    for (const auto& [name, t] : tensors) write_le_doubles(out, t.data);
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

NamedTensors load_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string line;
    std::getline(in, line);
    std::istringstream head(line);
    std::string magic;
    std::size_t count = 0;
    if (!(head >> magic >> count) || magic != "tensors") throw FormatError(path.string() + ": bad checkpoint header");
    NamedTensors result;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated checkpoint header");
        std::istringstream ls(line);
        std::string name;
        std::size_t rank = 0;
        if (!(ls >> name >> rank)) throw FormatError(path.string() + ": bad tensor line '" + line + "'");
        Shape shape(rank);
        for (auto& d : shape) {
            if (!(ls >> d)) throw FormatError(path.string() + ": bad tensor shape in '" + line + "'");
        }
        result.emplace_back(name, Tensor(shape));
    }
    for (auto& [name, t] : result) {
        for (double& d : t.data) {
            unsigned char b[8];
            if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError(path.string() + ": truncated tensor data");
            std::uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
            d = std::bit_cast<double>(bits);
        }
    }
    return result;
}

}  // namespace spkdef::grad
