#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crowdmlp/error.hpp"
#include "crowdmlp/rng.hpp"

namespace crowdmlp {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { Train, Eval };

class Tape;

struct TensorNode {
    Shape shape;
    std::vector<double> data;   // row-major, 64-bit floats
    bool requires_grad = false;
    bool tracked = false;       // true for any node on a gradient path
    std::vector<double> grad;   // same extent as data, present iff requires_grad
    const Tape* producer = nullptr;   // tape that emitted this node; null for leaves
};

// Value-semantic handle onto a shared dense array. Copies alias the same
// storage; ops always allocate fresh output nodes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, RngState& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, double mean, double stddev, RngState& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool enabled);

    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    // Scalar access; throws ContractError unless size() == 1.
    double item() const;
    double at(std::initializer_list<int> index) const;
    void set(std::initializer_list<int> index, double value);

    Tensor detached_copy() const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;
};

// Per-backward gradient buffers, keyed by node. References returned by of()
// stay valid while the map lives (node-based buckets), which the op closures
// rely on; insertion order is kept for the deterministic flush into leaves.
class GradMap {
public:
    std::vector<double>& of(const std::shared_ptr<TensorNode>& node);
    std::vector<double>* find(const TensorNode* node);

    const std::vector<std::shared_ptr<TensorNode>>& insertion_order() const { return order_; }

private:
    std::unordered_map<const TensorNode*, std::vector<double>> grads_;
    std::vector<std::shared_ptr<TensorNode>> order_;
};

// Ordered record of one forward pass. Each recorded step knows how to push
// gradients from its output to its inputs; backward() replays the record in
// reverse exactly once and accumulates the results into leaf .grad buffers.
class Tape {
public:
    Tape() = default;
    explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t recorded_ops() const { return steps_.size(); }

    void record(std::function<void(GradMap&)> step);
    void backward(const Tensor& loss);

private:
    bool grad_enabled_ = true;
    bool consumed_ = false;
    std::vector<std::function<void(GradMap&)>> steps_;
};

// Stateful batch normalization: learnable affine plus running statistics
// that train-mode forwards update with the configured momentum.
struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;   // not learnable
    Tensor running_var;    // not learnable
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNorm make(int features);
    int features() const { return gamma.dim(0); }
};

// ---- primitives -----------------------------------------------------------

// out[i][j] = sum_k x[i][k] * weight[k][j] + bias[j]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

// Cross-correlation of x[Cin x H x W] with kernel[Cout x Cin x k x k].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

Tensor relu(Tape& tape, const Tensor& x);

// x is n x d; statistics are per column over the n rows.
Tensor batch_norm(Tape& tape, const Tensor& x, BatchNorm& bn, Mode mode);
// x is C x H x W; statistics are per channel over the H*W plane.
Tensor batch_norm2d(Tape& tape, const Tensor& x, BatchNorm& bn, Mode mode);

// Element dropout: train mode zeroes entries with probability p and scales
// survivors by 1/(1-p); eval mode is the exact identity (consumes no rng).
Tensor dropout(Tape& tape, const Tensor& x, double p, RngState& rng, Mode mode);
// Whole-row (token) dropout over a tokens x dim matrix.
Tensor row_dropout(Tape& tape, const Tensor& x, double p, RngState& rng, Mode mode);

// 2x2 max pooling with stride 2 on C x H x W (H, W even).
Tensor max_pool2(Tape& tape, const Tensor& x);

Tensor transpose(Tape& tape, const Tensor& x, int axis_a, int axis_b);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor concat(Tape& tape, const std::vector<Tensor>& xs, int axis);
// Mean over one axis; the axis is removed from the shape.
Tensor reduce_mean(Tape& tape, const Tensor& x, int axis);
// Sum of all entries -> scalar.
Tensor reduce_sum(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

// |a - b| for scalar tensors; the L1 atom of the training losses.
Tensor abs_err(Tape& tape, const Tensor& a, const Tensor& b);

// ---- gradient oracle ------------------------------------------------------

// f must route all tensor work through the tape it is handed and must be a
// deterministic function of x (fix any rng seeds inside). Returns the max
// over checked coordinates of |analytic - central_difference| / (|analytic| + 1e-8).
// max_coords > 0 check a deterministic subsample of that many coordinates;
// 0 checks every coordinate.
double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double step, int max_coords = 0,
                         std::uint64_t sample_seed = 0);

} // namespace crowdmlp
