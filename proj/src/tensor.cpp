#include "crowdmlp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "crowdmlp/thread_pool.hpp"

namespace crowdmlp {

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

std::int64_t grain_for(std::int64_t work_per_item) {
    constexpr std::int64_t kTargetWork = 32768;
    return std::max<std::int64_t>(1, kTargetWork / std::max<std::int64_t>(1, work_per_item));
}

// C[n x m] += A[n x k] * B[k x m]
void mm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
    parallel_for(n, grain_for(static_cast<std::int64_t>(k) * m), [=](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            double* crow = c + i * m;
            const double* arow = a + i * k;
            for (int kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                const double* brow = b + static_cast<std::int64_t>(kk) * m;
                for (int j = 0; j < m; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
}

// C[n x k] += A[n x m] * B[k x m]^T
void mm_nt(const double* a, const double* b, double* c, int n, int m, int k) {
    parallel_for(n, grain_for(static_cast<std::int64_t>(k) * m), [=](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const double* arow = a + i * m;
            double* crow = c + i * k;
            for (int j = 0; j < k; ++j) {
                const double* brow = b + static_cast<std::int64_t>(j) * m;
                double acc = 0.0;
                for (int t = 0; t < m; ++t) {
                    acc += arow[t] * brow[t];
                }
                crow[j] += acc;
            }
        }
    });
}

// C[k x m] += A[n x k]^T * B[n x m]
void mm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
    parallel_for(k, grain_for(static_cast<std::int64_t>(n) * m), [=](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            double* crow = c + r * m;
            for (int i = 0; i < n; ++i) {
                const double av = a[static_cast<std::int64_t>(i) * k + r];
                const double* brow = b + static_cast<std::int64_t>(i) * m;
                for (int j = 0; j < m; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
}

bool tracked(const Tensor& t) {
    return t.raw()->requires_grad || t.raw()->tracked;
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.ndim() != 2) {
        throw DimensionError(std::string(what) + " must be 2-d, got shape " + shape_str(t.shape()));
    }
}

} // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int extent : shape) {
        if (extent <= 0) {
            throw DimensionError("shape extents must be positive, got " + shape_str(shape));
        }
        n *= extent;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? ", " : "");
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data.assign(static_cast<std::size_t>(numel(node->shape)), 0.0);
    Tensor t(std::move(node));
    if (requires_grad) {
        t.set_requires_grad(true);
    }
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    Tensor t(std::move(node));
    if (requires_grad) {
        t.set_requires_grad(true);
    }
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, RngState& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, RngState& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) {
        v = rng.normal(mean, stddev);
    }
    return t;
}

void Tensor::set_requires_grad(bool enabled) {
    if (node_->producer != nullptr) {
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = enabled;
    node_->tracked = enabled;
    if (enabled) {
        node_->grad.assign(node_->data.size(), 0.0);
    } else {
        node_->grad.clear();
    }
}

std::vector<double>& Tensor::grad() {
    if (!node_->requires_grad) {
        throw ContractError("tensor does not track gradients");
    }
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad) {
        throw ContractError("tensor does not track gradients");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_->requires_grad) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() requires a single-element tensor, got shape " + shape_str(shape()));
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> index) const {
    const auto strides = row_major_strides(shape());
    if (index.size() != strides.size()) {
        throw DimensionError("index rank does not match tensor rank");
    }
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (int i : index) {
        if (i < 0 || i >= shape()[d]) {
            throw DimensionError("index out of bounds");
        }
        flat += i * strides[d++];
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

void Tensor::set(std::initializer_list<int> index, double value) {
    const auto strides = row_major_strides(shape());
    if (index.size() != strides.size()) {
        throw DimensionError("index rank does not match tensor rank");
    }
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (int i : index) {
        if (i < 0 || i >= shape()[d]) {
            throw DimensionError("index out of bounds");
        }
        flat += i * strides[d++];
    }
    node_->data[static_cast<std::size_t>(flat)] = value;
}

Tensor Tensor::detached_copy() const {
    return Tensor::from_data(shape(), data(), false);
}

// ---- GradMap ---------------------------------------------------------------

std::vector<double>& GradMap::of(const std::shared_ptr<TensorNode>& node) {
    auto it = grads_.find(node.get());
    if (it != grads_.end()) {
        return it->second;
    }
    auto inserted = grads_.emplace(node.get(), std::vector<double>(node->data.size(), 0.0));
    order_.push_back(node);
    return inserted.first->second;
}

std::vector<double>* GradMap::find(const TensorNode* node) {
    auto it = grads_.find(node);
    return it == grads_.end() ? nullptr : &it->second;
}

// ---- Tape ------------------------------------------------------------------

void Tape::record(std::function<void(GradMap&)> step) {
    steps_.push_back(std::move(step));
}

void Tape::backward(const Tensor& loss) {
    if (!grad_enabled_) {
        throw ContractError("backward on a tape created with gradients disabled");
    }
    if (consumed_) {
        throw ContractError("tape has already been replayed; one tape per forward pass");
    }
    if (loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (loss.raw()->producer != this) {
        throw ContractError("loss was not produced on this tape");
    }
    consumed_ = true;

    GradMap grads;
    grads.of(loss.node())[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        (*it)(grads);
    }
    // Leaves collect the summed contributions; intermediate buffers die here.
    for (const auto& node : grads.insertion_order()) {
        if (!node->requires_grad) {
            continue;
        }
        const std::vector<double>* buf = grads.find(node.get());
        for (std::size_t i = 0; i < buf->size(); ++i) {
            node->grad[i] += (*buf)[i];
        }
    }
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor op_output(Tape& tape, Shape shape, bool any_input_tracked) {
    Tensor y = Tensor::zeros(std::move(shape));
    if (tape.grad_enabled()) {
        y.raw()->producer = &tape;
        y.raw()->tracked = any_input_tracked;
    }
    return y;
}

bool should_record(const Tape& tape, const Tensor& y) {
    return tape.grad_enabled() && y.raw()->tracked;
}

} // namespace

// ---- linear / matmul --------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    Tensor y = op_output(tape, {n, m}, tracked(a) || tracked(b));
    mm_nn(a.data().data(), b.data().data(), y.data().data(), n, k, m);
    if (should_record(tape, y)) {
        tape.record([an = a.node(), bn = b.node(), yn = y.node(), n, k, m](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            if (an->tracked || an->requires_grad) {
                mm_nt(gy->data(), bn->data.data(), g.of(an).data(), n, m, k);
            }
            if (bn->tracked || bn->requires_grad) {
                mm_tn(an->data.data(), gy->data(), g.of(bn).data(), n, k, m);
            }
        });
    }
    return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_matrix(x, "linear input");
    require_matrix(weight, "linear weight");
    if (bias.ndim() != 1) {
        throw DimensionError("linear bias must be 1-d, got " + shape_str(bias.shape()));
    }
    const int n = x.dim(0), k = x.dim(1), m = weight.dim(1);
    if (weight.dim(0) != k) {
        throw DimensionError("linear: input width " + std::to_string(k) +
                             " does not match weight rows " + std::to_string(weight.dim(0)));
    }
    if (bias.dim(0) != m) {
        throw DimensionError("linear: bias length " + std::to_string(bias.dim(0)) +
                             " does not match weight cols " + std::to_string(m));
    }
    Tensor y = op_output(tape, {n, m}, tracked(x) || tracked(weight) || tracked(bias));
    double* yd = y.data().data();
    const double* bd = bias.data().data();
    for (int i = 0; i < n; ++i) {
        std::copy(bd, bd + m, yd + static_cast<std::int64_t>(i) * m);
    }
    mm_nn(x.data().data(), weight.data().data(), yd, n, k, m);
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), wn = weight.node(), bn = bias.node(), yn = y.node(), n, k, m](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            if (xn->tracked || xn->requires_grad) {
                mm_nt(gy->data(), wn->data.data(), g.of(xn).data(), n, m, k);
            }
            if (wn->tracked || wn->requires_grad) {
                mm_tn(xn->data.data(), gy->data(), g.of(wn).data(), n, k, m);
            }
            if (bn->tracked || bn->requires_grad) {
                auto& gb = g.of(bn);
                const double* gyd = gy->data();
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < m; ++j) {
                        gb[j] += gyd[static_cast<std::int64_t>(i) * m + j];
                    }
                }
            }
        });
    }
    return y;
}

// ---- conv2d ------------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
    if (x.ndim() != 3 || kernel.ndim() != 4) {
        throw DimensionError("conv2d expects x[C,H,W] and kernel[Co,Ci,k,k]");
    }
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kci != ci) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(kci) +
                             " input channels, image has " + std::to_string(ci));
    }
    if (kh != kw || kh % 2 == 0) {
        throw DimensionError("conv2d: kernel must be square with odd extent, got " +
                             std::to_string(kh) + "x" + std::to_string(kw));
    }
    if (bias.ndim() != 1 || bias.dim(0) != co) {
        throw DimensionError("conv2d: bias must have one entry per output channel");
    }
    if (stride < 1 || padding < 0) {
        throw ParameterError("conv2d: stride must be >= 1 and padding >= 0");
    }
    const int oh_num = h + 2 * padding - kh;
    const int ow_num = w + 2 * padding - kw;
    if (oh_num < 0 || ow_num < 0 || oh_num % stride != 0 || ow_num % stride != 0) {
        throw DimensionError("conv2d: output extent is not integral for input " + shape_str(x.shape()) +
                             ", kernel " + std::to_string(kh) + ", stride " + std::to_string(stride) +
                             ", padding " + std::to_string(padding));
    }
    const int oh = oh_num / stride + 1;
    const int ow = ow_num / stride + 1;

    Tensor y = op_output(tape, {co, oh, ow}, tracked(x) || tracked(kernel) || tracked(bias));
    const double* xd = x.data().data();
    const double* kd = kernel.data().data();
    const double* bd = bias.data().data();
    double* yd = y.data().data();

    // For each kernel tap, the valid output range is a rectangle; sweeping it
    // as shifted row operations avoids per-pixel boundary tests.
    auto tap_range = [stride, padding](int k, int extent, int out_extent, int& o_begin, int& o_end) {
        int begin = 0;
        const int off = padding - k;
        while (begin * stride - off < 0) {
            ++begin;
        }
        int end = out_extent;
        while (end > begin && (end - 1) * stride - off >= extent) {
            --end;
        }
        o_begin = begin;
        o_end = end;
    };

    const std::int64_t work = static_cast<std::int64_t>(ci) * kh * kw * oh * ow;
    parallel_for(co, grain_for(work), [=](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t oc = c0; oc < c1; ++oc) {
            const double* kbase = kd + oc * ci * kh * kw;
            double* ybase = yd + oc * oh * ow;
            std::fill(ybase, ybase + static_cast<std::int64_t>(oh) * ow, bd[oc]);
            for (int icq = 0; icq < ci; ++icq) {
                const double* xplane = xd + static_cast<std::int64_t>(icq) * h * w;
                const double* kplane = kbase + static_cast<std::int64_t>(icq) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    int oy0, oy1;
                    tap_range(ky, h, oh, oy0, oy1);
                    for (int kx = 0; kx < kw; ++kx) {
                        int ox0, ox1;
                        tap_range(kx, w, ow, ox0, ox1);
                        const double kv = kplane[static_cast<std::int64_t>(ky) * kw + kx];
                        if (kv == 0.0) {
                            continue;
                        }
                        for (int oy = oy0; oy < oy1; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            double* yrow = ybase + static_cast<std::int64_t>(oy) * ow;
                            const double* xrow = xplane + static_cast<std::int64_t>(iy) * w
                                                 - padding + kx;
                            if (stride == 1) {
                                for (int ox = ox0; ox < ox1; ++ox) {
                                    yrow[ox] += kv * xrow[ox];
                                }
                            } else {
                                for (int ox = ox0; ox < ox1; ++ox) {
                                    yrow[ox] += kv * xrow[static_cast<std::int64_t>(ox) * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    if (should_record(tape, y)) {
        tape.record([xn = x.node(), kn = kernel.node(), bn = bias.node(), yn = y.node(),
                     tap_range, ci, h, w, co, kh, kw, oh, ow, stride, padding](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            const double* gyd = gy->data();
            if (bn->tracked || bn->requires_grad) {
                auto& gb = g.of(bn);
                for (int oc = 0; oc < co; ++oc) {
                    double acc = 0.0;
                    const double* p = gyd + static_cast<std::int64_t>(oc) * oh * ow;
                    for (int i = 0; i < oh * ow; ++i) {
                        acc += p[i];
                    }
                    gb[oc] += acc;
                }
            }
            if (kn->tracked || kn->requires_grad) {
                auto& gk = g.of(kn);
                double* gkd = gk.data();
                const double* xd = xn->data.data();
                parallel_for(co, grain_for(static_cast<std::int64_t>(ci) * kh * kw * oh * ow),
                             [=](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t oc = c0; oc < c1; ++oc) {
                        const double* gplane = gyd + oc * oh * ow;
                        double* kbase = gkd + oc * ci * kh * kw;
                        for (int icq = 0; icq < ci; ++icq) {
                            const double* xplane = xd + static_cast<std::int64_t>(icq) * h * w;
                            double* kplane = kbase + static_cast<std::int64_t>(icq) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                int oy0, oy1;
                                tap_range(ky, h, oh, oy0, oy1);
                                for (int kx = 0; kx < kw; ++kx) {
                                    int ox0, ox1;
                                    tap_range(kx, w, ow, ox0, ox1);
                                    double acc = 0.0;
                                    for (int oy = oy0; oy < oy1; ++oy) {
                                        const int iy = oy * stride - padding + ky;
                                        const double* grow = gplane + static_cast<std::int64_t>(oy) * ow;
                                        const double* xrow = xplane + static_cast<std::int64_t>(iy) * w
                                                             - padding + kx;
                                        if (stride == 1) {
                                            for (int ox = ox0; ox < ox1; ++ox) {
                                                acc += grow[ox] * xrow[ox];
                                            }
                                        } else {
                                            for (int ox = ox0; ox < ox1; ++ox) {
                                                acc += grow[ox] * xrow[static_cast<std::int64_t>(ox) * stride];
                                            }
                                        }
                                    }
                                    kplane[static_cast<std::int64_t>(ky) * kw + kx] += acc;
                                }
                            }
                        }
                    }
                });
            }
            if (xn->tracked || xn->requires_grad) {
                auto& gx = g.of(xn);
                double* gxd = gx.data();
                const double* kd = kn->data.data();
                parallel_for(ci, grain_for(static_cast<std::int64_t>(co) * kh * kw * oh * ow),
                             [=](std::int64_t i0, std::int64_t i1) {
                    for (std::int64_t icq = i0; icq < i1; ++icq) {
                        double* xplane = gxd + icq * h * w;
                        for (int oc = 0; oc < co; ++oc) {
                            const double* gplane = gyd + static_cast<std::int64_t>(oc) * oh * ow;
                            const double* kplane = kd + (static_cast<std::int64_t>(oc) * ci + icq) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                int oy0, oy1;
                                tap_range(ky, h, oh, oy0, oy1);
                                for (int kx = 0; kx < kw; ++kx) {
                                    int ox0, ox1;
                                    tap_range(kx, w, ow, ox0, ox1);
                                    const double kv = kplane[static_cast<std::int64_t>(ky) * kw + kx];
                                    if (kv == 0.0) {
                                        continue;
                                    }
                                    for (int oy = oy0; oy < oy1; ++oy) {
                                        const int iy = oy * stride - padding + ky;
                                        const double* grow = gplane + static_cast<std::int64_t>(oy) * ow;
                                        double* xrow = xplane + static_cast<std::int64_t>(iy) * w
                                                       - padding + kx;
                                        if (stride == 1) {
                                            for (int ox = ox0; ox < ox1; ++ox) {
                                                xrow[ox] += kv * grow[ox];
                                            }
                                        } else {
                                            for (int ox = ox0; ox < ox1; ++ox) {
                                                xrow[static_cast<std::int64_t>(ox) * stride] += kv * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
    }
    return y;
}

// ---- elementwise -------------------------------------------------------------

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor y = op_output(tape, x.shape(), tracked(x));
    const auto& xd = x.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    }
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node()](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            const auto& xd = xn->data;
            // subgradient 0 at the kink
            for (std::size_t i = 0; i < xd.size(); ++i) {
                if (xd[i] > 0.0) {
                    gx[i] += (*gy)[i];
                }
            }
        });
    }
    return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor y = op_output(tape, a.shape(), tracked(a) || tracked(b));
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        yd[i] = ad[i] + bd[i];
    }
    if (should_record(tape, y)) {
        tape.record([an = a.node(), bn = b.node(), yn = y.node()](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            if (an->tracked || an->requires_grad) {
                auto& ga = g.of(an);
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    ga[i] += (*gy)[i];
                }
            }
            if (bn->tracked || bn->requires_grad) {
                auto& gb = g.of(bn);
                for (std::size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += (*gy)[i];
                }
            }
        });
    }
    return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor y = op_output(tape, a.shape(), tracked(a) || tracked(b));
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        yd[i] = ad[i] * bd[i];
    }
    if (should_record(tape, y)) {
        tape.record([an = a.node(), bn = b.node(), yn = y.node()](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            if (an->tracked || an->requires_grad) {
                auto& ga = g.of(an);
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    ga[i] += (*gy)[i] * bn->data[i];
                }
            }
            if (bn->tracked || bn->requires_grad) {
                auto& gb = g.of(bn);
                for (std::size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += (*gy)[i] * an->data[i];
                }
            }
        });
    }
    return y;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
    Tensor y = op_output(tape, a.shape(), tracked(a));
    const auto& ad = a.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        yd[i] = ad[i] * factor;
    }
    if (should_record(tape, y)) {
        tape.record([an = a.node(), yn = y.node(), factor](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& ga = g.of(an);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += (*gy)[i] * factor;
            }
        });
    }
    return y;
}

// ---- batch norm ---------------------------------------------------------------

BatchNorm BatchNorm::make(int features) {
    if (features < 1) {
        throw ParameterError("batch norm needs at least one feature");
    }
    BatchNorm bn;
    bn.gamma = Tensor::full({features}, 1.0, true);
    bn.beta = Tensor::zeros({features}, true);
    bn.running_mean = Tensor::zeros({features});
    bn.running_var = Tensor::full({features}, 1.0);
    return bn;
}

namespace {

// Shared statistics-normalization core. The input is viewed as `groups`
// feature groups; element (row, feature) sits at base(feature) + row * step.
// For n x d matrices: base = j, step = d. For C x H x W maps: base = c*H*W,
// step = 1 with H*W rows.
struct BnLayout {
    int features = 0;
    std::int64_t rows = 0;
    std::int64_t step = 0;
    std::int64_t base_stride = 0;
};

Tensor batch_norm_core(Tape& tape, const Tensor& x, BatchNorm& bn, Mode mode, const BnLayout& lay) {
    if (bn.features() != lay.features) {
        throw DimensionError("batch norm has " + std::to_string(bn.features()) +
                             " features but input provides " + std::to_string(lay.features));
    }
    const std::int64_t n = lay.rows;
    Tensor y = op_output(tape, x.shape(), tracked(x) || tracked(bn.gamma) || tracked(bn.beta));
    const double* xd = x.data().data();
    double* yd = y.data().data();
    const double* gammad = bn.gamma.data().data();
    const double* betad = bn.beta.data().data();

    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<double>>(lay.features);

    if (mode == Mode::Train) {
        std::vector<double> mean(lay.features), var(lay.features);
        parallel_for(lay.features, grain_for(2 * n), [&](std::int64_t f0, std::int64_t f1) {
            for (std::int64_t f = f0; f < f1; ++f) {
                const std::int64_t base = f * lay.base_stride;
                double m = 0.0;
                for (std::int64_t r = 0; r < n; ++r) {
                    m += xd[base + r * lay.step];
                }
                m /= static_cast<double>(n);
                double v = 0.0;
                for (std::int64_t r = 0; r < n; ++r) {
                    const double dlt = xd[base + r * lay.step] - m;
                    v += dlt * dlt;
                }
                v /= static_cast<double>(n);
                mean[f] = m;
                var[f] = v;
                const double istd = 1.0 / std::sqrt(v + bn.eps);
                (*inv_std)[f] = istd;
                for (std::int64_t r = 0; r < n; ++r) {
                    const std::int64_t idx = base + r * lay.step;
                    const double xh = (xd[idx] - m) * istd;
                    (*xhat)[idx] = xh;
                    yd[idx] = gammad[f] * xh + betad[f];
                }
            }
        });
        auto& rm = bn.running_mean.data();
        auto& rv = bn.running_var.data();
        for (int f = 0; f < lay.features; ++f) {
            rm[f] = (1.0 - bn.momentum) * rm[f] + bn.momentum * mean[f];
            rv[f] = (1.0 - bn.momentum) * rv[f] + bn.momentum * var[f];
        }
    } else {
        const auto& rm = bn.running_mean.data();
        const auto& rv = bn.running_var.data();
        parallel_for(lay.features, grain_for(2 * n), [&](std::int64_t f0, std::int64_t f1) {
            for (std::int64_t f = f0; f < f1; ++f) {
                const std::int64_t base = f * lay.base_stride;
                const double istd = 1.0 / std::sqrt(rv[f] + bn.eps);
                (*inv_std)[f] = istd;
                for (std::int64_t r = 0; r < n; ++r) {
                    const std::int64_t idx = base + r * lay.step;
                    const double xh = (xd[idx] - rm[f]) * istd;
                    (*xhat)[idx] = xh;
                    yd[idx] = gammad[f] * xh + betad[f];
                }
            }
        });
    }

    if (should_record(tape, y)) {
        tape.record([xn = x.node(), gn = bn.gamma.node(), bnn = bn.beta.node(), yn = y.node(),
                     xhat, inv_std, lay, n, mode](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            const double* gyd = gy->data();
            const double* gammad = gn->data.data();
            const bool want_gamma = gn->tracked || gn->requires_grad;
            const bool want_beta = bnn->tracked || bnn->requires_grad;
            const bool want_x = xn->tracked || xn->requires_grad;
            double* ggamma = want_gamma ? g.of(gn).data() : nullptr;
            double* gbeta = want_beta ? g.of(bnn).data() : nullptr;
            double* gx = want_x ? g.of(xn).data() : nullptr;
            parallel_for(lay.features, grain_for(4 * n), [&](std::int64_t f0, std::int64_t f1) {
                for (std::int64_t f = f0; f < f1; ++f) {
                    const std::int64_t base = f * lay.base_stride;
                    double sum_gy = 0.0, sum_gy_xh = 0.0;
                    for (std::int64_t r = 0; r < n; ++r) {
                        const std::int64_t idx = base + r * lay.step;
                        sum_gy += gyd[idx];
                        sum_gy_xh += gyd[idx] * (*xhat)[idx];
                    }
                    if (ggamma) {
                        ggamma[f] += sum_gy_xh;
                    }
                    if (gbeta) {
                        gbeta[f] += sum_gy;
                    }
                    if (gx) {
                        const double istd = (*inv_std)[f];
                        if (mode == Mode::Train) {
                            const double inv_n = 1.0 / static_cast<double>(n);
                            for (std::int64_t r = 0; r < n; ++r) {
                                const std::int64_t idx = base + r * lay.step;
                                gx[idx] += gammad[f] * istd *
                                           (gyd[idx] - sum_gy * inv_n - (*xhat)[idx] * sum_gy_xh * inv_n);
                            }
                        } else {
                            for (std::int64_t r = 0; r < n; ++r) {
                                const std::int64_t idx = base + r * lay.step;
                                gx[idx] += gammad[f] * istd * gyd[idx];
                            }
                        }
                    }
                }
            });
        });
    }
    return y;
}

} // namespace

Tensor batch_norm(Tape& tape, const Tensor& x, BatchNorm& bn, Mode mode) {
    require_matrix(x, "batch_norm input");
    BnLayout lay;
    lay.features = x.dim(1);
    lay.rows = x.dim(0);
    lay.step = x.dim(1);
    lay.base_stride = 1;
    return batch_norm_core(tape, x, bn, mode, lay);
}

Tensor batch_norm2d(Tape& tape, const Tensor& x, BatchNorm& bn, Mode mode) {
    if (x.ndim() != 3) {
        throw DimensionError("batch_norm2d expects x[C,H,W], got " + shape_str(x.shape()));
    }
    BnLayout lay;
    lay.features = x.dim(0);
    lay.rows = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    lay.step = 1;
    lay.base_stride = lay.rows;
    return batch_norm_core(tape, x, bn, mode, lay);
}

// ---- dropout -------------------------------------------------------------------

namespace {

Tensor dropout_impl(Tape& tape, const Tensor& x, double p, RngState& rng, Mode mode, bool whole_rows) {
    if (p < 0.0 || p >= 1.0) {
        throw ParameterError("dropout rate must lie in [0, 1), got " + std::to_string(p));
    }
    if (mode == Mode::Eval) {
        // identity, and no rng consumption, so eval passes stay stateless
        Tensor y = op_output(tape, x.shape(), tracked(x));
        y.data() = x.data();
        if (should_record(tape, y)) {
            tape.record([xn = x.node(), yn = y.node()](GradMap& g) {
                auto* gy = g.find(yn.get());
                if (!gy) {
                    return;
                }
                auto& gx = g.of(xn);
                for (std::size_t i = 0; i < gx.size(); ++i) {
                    gx[i] += (*gy)[i];
                }
            });
        }
        return y;
    }

    const double keep_scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.data().size(), 0.0);
    if (whole_rows) {
        require_matrix(x, "row_dropout input");
        const int rows = x.dim(0), cols = x.dim(1);
        for (int r = 0; r < rows; ++r) {
            const double m = rng.uniform() < p ? 0.0 : keep_scale;
            std::fill_n(mask->begin() + static_cast<std::int64_t>(r) * cols, cols, m);
        }
    } else {
        for (auto& m : *mask) {
            m = rng.uniform() < p ? 0.0 : keep_scale;
        }
    }
    Tensor y = op_output(tape, x.shape(), tracked(x));
    const auto& xd = x.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        yd[i] = xd[i] * (*mask)[i];
    }
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node(), mask](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += (*gy)[i] * (*mask)[i];
            }
        });
    }
    return y;
}

} // namespace

Tensor dropout(Tape& tape, const Tensor& x, double p, RngState& rng, Mode mode) {
    return dropout_impl(tape, x, p, rng, mode, false);
}

Tensor row_dropout(Tape& tape, const Tensor& x, double p, RngState& rng, Mode mode) {
    return dropout_impl(tape, x, p, rng, mode, true);
}

// ---- max pool --------------------------------------------------------------------

Tensor max_pool2(Tape& tape, const Tensor& x) {
    if (x.ndim() != 3) {
        throw DimensionError("max_pool2 expects x[C,H,W], got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("max_pool2 needs even spatial extents, got " + shape_str(x.shape()));
    }
    const int oh = h / 2, ow = w / 2;
    Tensor y = op_output(tape, {c, oh, ow}, tracked(x));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c) * oh * ow);
    const double* xd = x.data().data();
    double* yd = y.data().data();
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = xd + static_cast<std::int64_t>(ch) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                std::int64_t best_idx = static_cast<std::int64_t>(2 * oy) * w + 2 * ox;
                double best = plane[best_idx];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::int64_t idx = static_cast<std::int64_t>(2 * oy + dy) * w + 2 * ox + dx;
                        if (plane[idx] > best) {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                const std::int64_t out_idx = (static_cast<std::int64_t>(ch) * oh + oy) * ow + ox;
                yd[out_idx] = best;
                (*argmax)[out_idx] = static_cast<std::int64_t>(ch) * h * w + best_idx;
            }
        }
    }
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node(), argmax](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            for (std::size_t i = 0; i < gy->size(); ++i) {
                gx[(*argmax)[i]] += (*gy)[i];
            }
        });
    }
    return y;
}

// ---- layout ops -------------------------------------------------------------------

namespace {

// dst[index with axes a,b swapped] = src[index]
void transpose_into(const double* src, const Shape& src_shape, int a, int b, double* dst, bool accumulate) {
    Shape dst_shape = src_shape;
    std::swap(dst_shape[a], dst_shape[b]);
    const auto src_strides = row_major_strides(src_shape);
    const auto dst_strides = row_major_strides(dst_shape);
    const std::int64_t total = numel(src_shape);
    const int nd = static_cast<int>(src_shape.size());
    std::vector<std::int64_t> idx(nd, 0);
    for (std::int64_t flat = 0; flat < total; ++flat) {
        std::int64_t dflat = 0;
        for (int d = 0; d < nd; ++d) {
            int coord = static_cast<int>(idx[d]);
            int dst_axis = d;
            if (d == a) {
                dst_axis = b;
            } else if (d == b) {
                dst_axis = a;
            }
            dflat += coord * dst_strides[dst_axis];
        }
        if (accumulate) {
            dst[dflat] += src[flat];
        } else {
            dst[dflat] = src[flat];
        }
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[d] < src_shape[d]) {
                break;
            }
            idx[d] = 0;
        }
    }
}

} // namespace

Tensor transpose(Tape& tape, const Tensor& x, int axis_a, int axis_b) {
    const int nd = x.ndim();
    if (axis_a < 0 || axis_a >= nd || axis_b < 0 || axis_b >= nd) {
        throw DimensionError("transpose axes out of range for shape " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    std::swap(out_shape[axis_a], out_shape[axis_b]);
    Tensor y = op_output(tape, std::move(out_shape), tracked(x));
    transpose_into(x.data().data(), x.shape(), axis_a, axis_b, y.data().data(), false);
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node(), axis_a, axis_b](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            // swapping the same axes inverts the permutation
            transpose_into(gy->data(), yn->shape, axis_a, axis_b, gx.data(), true);
        });
    }
    return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
                             " changes element count");
    }
    Tensor y = op_output(tape, std::move(shape), tracked(x));
    y.data() = x.data();
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node()](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += (*gy)[i];
            }
        });
    }
    return y;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) {
        throw ParameterError("concat needs at least one input");
    }
    const int nd = xs[0].ndim();
    if (axis < 0 || axis >= nd) {
        throw DimensionError("concat axis out of range");
    }
    Shape out_shape = xs[0].shape();
    int axis_total = 0;
    for (const Tensor& t : xs) {
        if (t.ndim() != nd) {
            throw DimensionError("concat inputs must share rank");
        }
        for (int d = 0; d < nd; ++d) {
            if (d != axis && t.dim(d) != out_shape[d]) {
                throw DimensionError("concat inputs disagree off-axis: " + shape_str(t.shape()) +
                                     " vs " + shape_str(xs[0].shape()));
            }
        }
        axis_total += t.dim(axis);
    }
    out_shape[axis] = axis_total;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) {
        outer *= out_shape[d];
    }
    for (int d = axis + 1; d < nd; ++d) {
        inner *= out_shape[d];
    }

    bool any_tracked = false;
    for (const Tensor& t : xs) {
        any_tracked = any_tracked || tracked(t);
    }
    Tensor y = op_output(tape, out_shape, any_tracked);
    double* yd = y.data().data();
    std::int64_t axis_offset = 0;
    for (const Tensor& t : xs) {
        const std::int64_t a = t.dim(axis);
        const double* td = t.data().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy(td + o * a * inner, td + (o + 1) * a * inner,
                      yd + (o * axis_total + axis_offset) * inner);
        }
        axis_offset += a;
    }

    if (should_record(tape, y)) {
        std::vector<std::shared_ptr<TensorNode>> nodes;
        nodes.reserve(xs.size());
        for (const Tensor& t : xs) {
            nodes.push_back(t.node());
        }
        tape.record([nodes, yn = y.node(), outer, inner, axis_total, axis](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            const double* gyd = gy->data();
            std::int64_t axis_offset = 0;
            for (const auto& node : nodes) {
                const std::int64_t a = node->shape[axis];
                if (node->tracked || node->requires_grad) {
                    auto& gx = g.of(node);
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = gyd + (o * axis_total + axis_offset) * inner;
                        double* dst = gx.data() + o * a * inner;
                        for (std::int64_t i = 0; i < a * inner; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
                axis_offset += a;
            }
        });
    }
    return y;
}

Tensor reduce_mean(Tape& tape, const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0 || axis >= nd) {
        throw DimensionError("reduce_mean axis out of range for shape " + shape_str(x.shape()));
    }
    Shape out_shape;
    for (int d = 0; d < nd; ++d) {
        if (d != axis) {
            out_shape.push_back(x.dim(d));
        }
    }
    if (out_shape.empty()) {
        out_shape.push_back(1);
    }
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) {
        outer *= x.dim(d);
    }
    for (int d = axis + 1; d < nd; ++d) {
        inner *= x.dim(d);
    }
    const std::int64_t n_axis = x.dim(axis);
    Tensor y = op_output(tape, out_shape, tracked(x));
    const double* xd = x.data().data();
    double* yd = y.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::int64_t a = 0; a < n_axis; ++a) {
                acc += xd[(o * n_axis + a) * inner + i];
            }
            yd[o * inner + i] = acc / static_cast<double>(n_axis);
        }
    }
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node(), outer, inner, n_axis](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            const double inv = 1.0 / static_cast<double>(n_axis);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t a = 0; a < n_axis; ++a) {
                    for (std::int64_t i = 0; i < inner; ++i) {
                        gx[(o * n_axis + a) * inner + i] += (*gy)[o * inner + i] * inv;
                    }
                }
            }
        });
    }
    return y;
}

Tensor reduce_sum(Tape& tape, const Tensor& x) {
    Tensor y = op_output(tape, {1}, tracked(x));
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    y.data()[0] = acc;
    if (should_record(tape, y)) {
        tape.record([xn = x.node(), yn = y.node()](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            auto& gx = g.of(xn);
            for (double& v : gx) {
                v += (*gy)[0];
            }
        });
    }
    return y;
}

Tensor abs_err(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.size() != 1 || b.size() != 1) {
        throw DimensionError("abs_err expects scalar tensors");
    }
    const double diff = a.data()[0] - b.data()[0];
    Tensor y = op_output(tape, {1}, tracked(a) || tracked(b));
    y.data()[0] = std::abs(diff);
    if (should_record(tape, y)) {
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        tape.record([an = a.node(), bn = b.node(), yn = y.node(), sign](GradMap& g) {
            auto* gy = g.find(yn.get());
            if (!gy) {
                return;
            }
            if (an->tracked || an->requires_grad) {
                g.of(an)[0] += sign * (*gy)[0];
            }
            if (bn->tracked || bn->requires_grad) {
                g.of(bn)[0] -= sign * (*gy)[0];
            }
        });
    }
    return y;
}

// ---- finite differences ---------------------------------------------------------

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double step, int max_coords,
                         std::uint64_t sample_seed) {
    if (step <= 0.0) {
        throw ParameterError("finite_diff_check requires step > 0");
    }
    Tensor probe = x;
    const bool was_tracking = probe.requires_grad();
    if (!was_tracking) {
        probe.set_requires_grad(true);
    }
    probe.zero_grad();

    {
        Tape tape;
        Tensor y = f(tape, probe);
        if (y.size() != 1) {
            throw ContractError("finite_diff_check requires a scalar-valued function");
        }
        tape.backward(y);
    }
    const std::vector<double> analytic = probe.grad();

    std::vector<std::int64_t> coords;
    const std::int64_t total = probe.size();
    if (max_coords > 0 && max_coords < total) {
        coords.resize(static_cast<std::size_t>(total));
        std::iota(coords.begin(), coords.end(), 0);
        RngState rng(sample_seed ^ (0x5DEECE66Dull * static_cast<std::uint64_t>(total)));
        for (int i = 0; i < max_coords; ++i) {
            const std::int64_t j = rng.uniform_int(i, total - 1);
            std::swap(coords[i], coords[j]);
        }
        coords.resize(static_cast<std::size_t>(max_coords));
    } else {
        coords.resize(static_cast<std::size_t>(total));
        std::iota(coords.begin(), coords.end(), 0);
    }

    auto value_at = [&]() {
        Tape tape(false);
        return f(tape, probe).item();
    };

    double worst = 0.0;
    auto& data = probe.data();
    for (const std::int64_t c : coords) {
        const double original = data[static_cast<std::size_t>(c)];
        data[static_cast<std::size_t>(c)] = original + step;
        const double fp = value_at();
        data[static_cast<std::size_t>(c)] = original - step;
        const double fm = value_at();
        data[static_cast<std::size_t>(c)] = original;
        const double fd = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(c)];
        // The difference quotient carries rounding noise of order
        // eps * |f| / step; below that floor both sides read as zero.
        const double noise = 1024.0 * 2.220446049250313e-16 *
                             std::max(std::abs(fp), std::abs(fm)) / (2.0 * step);
        if (std::abs(a) <= noise && std::abs(fd) <= noise) {
            continue;
        }
        const double rel = std::abs(a - fd) / (std::abs(a) + 1e-8);
        worst = std::max(worst, rel);
    }

    if (!was_tracking) {
        probe.set_requires_grad(false);
    } else {
        probe.zero_grad();
    }
    return worst;
}

} // namespace crowdmlp
