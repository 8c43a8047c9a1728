#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Graph is a tape: nodes are appended in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Nodes whose
// inputs do not require gradients are stored as plain constants and carry no
// backward closure. A graph and its tensors belong to one task at a time.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace spkdef::grad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s);
    Tensor(Shape s, std::vector<double> d);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    double item() const;

    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool operator==(const Tensor&) const = default;
};

// A fixed linear map y = A x with an explicit adjoint. Differentiable
// transforms whose Jacobian does not depend on the input are expressed as one.
class LinearOperator {
public:
    virtual ~LinearOperator() = default;
    virtual std::size_t input_size() const = 0;
    virtual std::size_t output_size() const = 0;
    virtual void apply(std::span<const double> x, std::span<double> y) const = 0;
    // g_in += A^T g_out
    virtual void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const = 0;

    std::vector<double> operator()(std::span<const double> x) const;
};

class DenseOperator final : public LinearOperator {
public:
    DenseOperator(std::size_t rows, std::size_t cols, std::vector<double> a);
    std::size_t input_size() const override { return cols_; }
    std::size_t output_size() const override { return rows_; }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::size_t rows_, cols_;
    std::vector<double> a_;
};

// Sequential composition: second(first(x)).
class ComposedOperator final : public LinearOperator {
public:
    ComposedOperator(std::shared_ptr<const LinearOperator> first, std::shared_ptr<const LinearOperator> second);
    std::size_t input_size() const override { return first_->input_size(); }
    std::size_t output_size() const override { return second_->output_size(); }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void apply_adjoint_add(std::span<const double> g_out, std::span<double> g_in) const override;

private:
    std::shared_ptr<const LinearOperator> first_, second_;
};

class Graph;

// Handle to a node in a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t numel() const { return value().numel(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor t, bool requires_grad = true);
    Var constant(Tensor t) { return leaf(std::move(t), false); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient of the last backward() loss w.r.t. v; zeros if v was unreached.
    std::vector<double> grad(Var v) const;

    // Reverse sweep from a scalar loss. Clears previous gradients first, so
    // repeated calls on the same graph give identical results.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

    // Op-author interface.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    const std::vector<double>& node_grad(std::size_t id) const { return nodes_[id].grad; }
    std::vector<double>& grad_buffer(std::size_t id);
    const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------
// Elementwise ops require identical shapes; there is no broadcasting beyond
// the scalar forms scale/add_scalar.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var log(Var a);
Var exp(Var a);
Var square(Var a);
Var tanh(Var a);
Var sum(Var a);
Var mean(Var a);

// Mean over one axis of a rank-2 tensor: axis 0 -> [cols], axis 1 -> [rows].
Var mean_axis(Var a, std::size_t axis);

// [m x k] * [k x n] -> [m x n]. Rank-1 right operands are treated as [k x 1]
// and produce [m].
Var matmul(Var a, Var b);

// Adds a per-row bias vector to a rank-2 tensor ([C x T] + [C]), or an
// equal-length vector to a rank-1 tensor.
Var add_bias(Var x, Var bias);

// x: [C_in x T], w: [C_out x C_in x K], b: [C_out] -> [C_out x T_out].
Var conv1d(Var x, Var w, Var b, std::size_t stride = 1, std::size_t padding = 0);

// x: [C x T] -> [C x ((T - kernel) / stride + 1)].
Var max_pool1d(Var x, std::size_t kernel, std::size_t stride);

Var transpose(Var a);
Var reshape(Var a, Shape shape);

// Flat-index selection.
Var gather(Var a, std::vector<std::size_t> indices);
Var slice(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::vector<std::size_t> rows);

// Concatenation of rank-1 tensors (axis 0) or rank-2 tensors along axis 0/1.
Var concat(std::span<const Var> parts, std::size_t axis);

// -log softmax(logits)[label] for rank-1 logits.
Var softmax_cross_entropy(Var logits, std::size_t label);

// Sliding-window median of a rank-1 signal with edge replication. Backward
// routes each output's gradient to the input index that was selected.
Var median_select(Var x, std::size_t k);

// y = op(x); out_shape defaults to [op.output_size()].
Var linear_map(std::shared_ptr<const LinearOperator> op, Var x, Shape out_shape = {});

// frames: [N x F] -> [N x (fft_size/2 + 1)] squared DFT magnitudes, each
// frame zero-padded to fft_size. Backward uses the exact adjoint, evaluated
// with an FFT.
Var power_spectrum(Var frames, std::size_t fft_size);

// Per-column standardization (x - mean) / std of a rank-2 tensor, population
// variance. Columns with variance below 1e-12 are only mean-centered.
Var standardize_columns(Var x);

// Backward Pass Differentiable Approximation: forward applies fn exactly,
// backward passes the upstream gradient through unchanged.
Var bpda(Var x, const std::function<Tensor(const Tensor&)>& fn);

// ---- utilities -------------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t kinks_avoided = 0;
};

// Compares backward() against central finite differences on `coords`
// randomly sampled coordinates (all coordinates when coords >= numel).
// Relative error is |a - n| / max(|a|, |n|, 1e-6). A coordinate with a kink
// inside [x-h, x+h] (one-sided differences disagree, or the h and h/2 central
// differences differ by more than 1e-4 relative) is shifted by 1e-3 and the
// comparison is redone at the shifted point, up to three times.
GradCheckResult grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x, double h = 1e-4,
                           std::size_t coords = 20, std::uint64_t seed = 0);

// Checkpoint: a text header "tensors <count>" followed by one line per tensor
// "<name> <rank> <d0> <d1> ...", then the raw little-endian float64 data of
// every tensor in header order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

}  // namespace spkdef::grad
