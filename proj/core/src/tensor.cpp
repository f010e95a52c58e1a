#include "sepnorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace sepnorm {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) oss << (i ? "x" : "") << shape[i];
    oss << "]";
    return oss.str();
}

namespace {

thread_local bool g_debug_checks = false;
thread_local std::size_t g_nan_count = 0;

void check_shape(const Shape& shape) {
    for (std::size_t e : shape)
        if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
}

}  // namespace

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }
std::size_t debug_nan_count() { return g_nan_count; }
void reset_debug_nan_count() { g_nan_count = 0; }

Tensor Tensor::zeros(Shape shape) {
    check_shape(shape);
    Tensor t;
    t.data = std::make_shared<std::vector<double>>(numel(shape), 0.0);
    t.shape = std::move(shape);
    return t;
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (numel(shape) != values.size())
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.requires_grad = true;
    t.ensure_grad();
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape));
    return (*data)[0];
}

void Tensor::ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Graph::make_output(Shape shape, bool track) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (track) {
        t.requires_grad = true;
        t.ensure_grad();
        t.graph = this;
        t.node_id = next_id_++;
        tracked_grads_.push_back(t.grad);
    }
    return t;
}

void Graph::record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

void Graph::check_input(const Tensor& t, const char* op) const {
    if (t.graph != nullptr && t.graph != this)
        throw ContractError(std::string(op) + ": input belongs to a different graph");
}

void Graph::backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape));
    if (loss.graph != this)
        throw ContractError("backward: loss was not produced by this graph");
    for (auto& gbuf : tracked_grads_) std::fill(gbuf->begin(), gbuf->end(), 0.0);
    (*loss.grad)[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

namespace {

bool wants_grad(const Tensor& a) { return a.requires_grad; }

// broadcast classification for binary elementwise ops
enum class Bcast { Equal, Scalar, TrailingSuffix };

Bcast classify_bcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) return Bcast::Equal;
    if (b.size() == 1) return Bcast::Scalar;
    if (b.shape.size() < a.shape.size() &&
        std::equal(b.shape.begin(), b.shape.end(), a.shape.end() - b.shape.size()))
        return Bcast::TrailingSuffix;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                     shape_str(b.shape) + " are not broadcast-compatible");
}

template <typename Fwd, typename Bwd>
Tensor binary_op(Graph& g, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    g.check_input(a, name);
    g.check_input(b, name);
    const Bcast bc = classify_bcast(a, b, name);
    const std::size_t n = a.size();
    const std::size_t bn = b.size();
    const bool track = wants_grad(a) || wants_grad(b);
    Tensor out = g.make_output(a.shape, track);
    const double* pa = a.data->data();
    const double* pb = b.data->data();
    double* po = out.data->data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = bc == Bcast::Equal ? i : (bc == Bcast::Scalar ? 0 : i % bn);
        po[i] = fwd(pa[i], pb[j]);
    }
    if (track) {
        g.record([=, adata = a.data, bdata = b.data, agrad = a.grad, bgrad = b.grad,
                  ograd = out.grad]() {
            const double* pa2 = adata->data();
            const double* pb2 = bdata->data();
            const double* go = ograd->data();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t j = bc == Bcast::Equal ? i : (bc == Bcast::Scalar ? 0 : i % bn);
                double da, db;
                bwd(pa2[i], pb2[j], go[i], da, db);
                if (agrad) (*agrad)[i] += da;
                if (bgrad) (*bgrad)[j] += db;
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(Graph& g, const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    g.check_input(a, name);
    const std::size_t n = a.size();
    const bool track = wants_grad(a);
    Tensor out = g.make_output(a.shape, track);
    const double* pa = a.data->data();
    double* po = out.data->data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (track) {
        g.record([=, adata = a.data, agrad = a.grad, ograd = out.grad]() {
            const double* pa2 = adata->data();
            const double* go = ograd->data();
            for (std::size_t i = 0; i < n; ++i) (*agrad)[i] += bwd(pa2[i]) * go[i];
        });
    }
    return out;
}

// plain [m,k]x[k,n] with ikj ordering, out assumed zeroed
void mm(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out += a^T x b where a is [m,k], b is [m,n], out is [k,n]
void mm_at_b(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* orow = out + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out += a x b^T where a is [m,k], b is [n,k], out is [m,n]
void mm_a_bt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] += acc;
        }
    }
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (i != axis) out.push_back(shape[i]);
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    g.check_input(a, "matmul");
    g.check_input(b, "matmul");
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    const bool track = wants_grad(a) || wants_grad(b);
    Tensor out = g.make_output({m, n}, track);
    mm(a.data->data(), b.data->data(), out.data->data(), m, k, n);
    if (track) {
        g.record([=, adata = a.data, bdata = b.data, agrad = a.grad, bgrad = b.grad,
                  ograd = out.grad]() {
            if (agrad) mm_a_bt(ograd->data(), bdata->data(), agrad->data(), m, n, k);
            if (bgrad) mm_at_b(adata->data(), ograd->data(), bgrad->data(), m, k, n);
        });
    }
    return out;
}

Tensor batched_matmul(Graph& g, const Tensor& a, const Tensor& b) {
    g.check_input(a, "batched_matmul");
    g.check_input(b, "batched_matmul");
    if (a.shape.size() != 3 || b.shape.size() != 3 || a.shape[0] != b.shape[0] ||
        a.shape[2] != b.shape[1])
        throw ShapeError("batched_matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    const std::size_t B = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
    const bool track = wants_grad(a) || wants_grad(b);
    Tensor out = g.make_output({B, m, n}, track);
    for (std::size_t c = 0; c < B; ++c)
        mm(a.data->data() + c * m * k, b.data->data() + c * k * n, out.data->data() + c * m * n, m,
           k, n);
    if (track) {
        g.record([=, adata = a.data, bdata = b.data, agrad = a.grad, bgrad = b.grad,
                  ograd = out.grad]() {
            for (std::size_t c = 0; c < B; ++c) {
                const double* go = ograd->data() + c * m * n;
                if (agrad) mm_a_bt(go, bdata->data() + c * k * n, agrad->data() + c * m * k, m, n, k);
                if (bgrad) mm_at_b(adata->data() + c * m * k, go, bgrad->data() + c * k * n, m, k, n);
            }
        });
    }
    return out;
}

Tensor transpose(Graph& g, const Tensor& a) {
    g.check_input(a, "transpose");
    if (a.shape.size() != 2) throw ShapeError("transpose: expected 2-d, got " + shape_str(a.shape));
    const std::size_t m = a.shape[0], n = a.shape[1];
    const bool track = wants_grad(a);
    Tensor out = g.make_output({n, m}, track);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*out.data)[j * m + i] = (*a.data)[i * n + j];
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*agrad)[i * n + j] += (*ograd)[j * m + i];
        });
    }
    return out;
}

Tensor transpose_last2(Graph& g, const Tensor& a) {
    g.check_input(a, "transpose_last2");
    if (a.shape.size() != 3)
        throw ShapeError("transpose_last2: expected 3-d, got " + shape_str(a.shape));
    const std::size_t B = a.shape[0], m = a.shape[1], n = a.shape[2];
    const bool track = wants_grad(a);
    Tensor out = g.make_output({B, n, m}, track);
    for (std::size_t c = 0; c < B; ++c)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                (*out.data)[c * m * n + j * m + i] = (*a.data)[c * m * n + i * n + j];
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t c = 0; c < B; ++c)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        (*agrad)[c * m * n + i * n + j] += (*ograd)[c * m * n + j * m + i];
        });
    }
    return out;
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_op(
        g, a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double go, double& da, double& db) {
            da = go;
            db = go;
        });
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_op(
        g, a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double go, double& da, double& db) {
            da = go;
            db = -go;
        });
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_op(
        g, a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y, double go, double& da, double& db) {
            da = go * y;
            db = go * x;
        });
}

Tensor div(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_op(
        g, a, b, "div",
        [](double x, double y) {
            if (y == 0.0) {
                if (g_debug_checks) ++g_nan_count;
                return std::numeric_limits<double>::quiet_NaN();
            }
            return x / y;
        },
        [](double x, double y, double go, double& da, double& db) {
            da = go / y;
            db = -go * x / (y * y);
        });
}

Tensor add_scalar(Graph& g, const Tensor& a, double c) {
    return unary_op(
        g, a, "add_scalar", [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(Graph& g, const Tensor& a, double c) {
    return unary_op(
        g, a, "mul_scalar", [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor sqrt(Graph& g, const Tensor& a) {
    return unary_op(
        g, a, "sqrt",
        [](double x) {
            if (x < 0.0) {
                if (g_debug_checks) ++g_nan_count;
                return std::numeric_limits<double>::quiet_NaN();
            }
            return std::sqrt(x);
        },
        [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor exp(Graph& g, const Tensor& a) {
    return unary_op(
        g, a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor log(Graph& g, const Tensor& a) {
    return unary_op(
        g, a, "log",
        [](double x) {
            if (x <= 0.0) {
                if (g_debug_checks) ++g_nan_count;
                return std::numeric_limits<double>::quiet_NaN();
            }
            return std::log(x);
        },
        [](double x) { return 1.0 / x; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(Graph& g, const Tensor& a) {
    return unary_op(
        g, a, "gelu",
        [](double x) {
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5 * x * (1.0 + t);
        },
        [](double x) {
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Tensor reduce_sum(Graph& g, const Tensor& a, std::size_t axis) {
    g.check_input(a, "reduce_sum");
    const AxisSplit s = split_axis(a.shape, axis, "reduce_sum");
    const bool track = wants_grad(a);
    Tensor out = g.make_output(drop_axis(a.shape, axis), track);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i)
                (*out.data)[o * s.inner + i] += (*a.data)[(o * s.extent + e) * s.inner + i];
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t e = 0; e < s.extent; ++e)
                    for (std::size_t i = 0; i < s.inner; ++i)
                        (*agrad)[(o * s.extent + e) * s.inner + i] += (*ograd)[o * s.inner + i];
        });
    }
    return out;
}

Tensor reduce_mean(Graph& g, const Tensor& a, std::size_t axis) {
    const AxisSplit s = split_axis(a.shape, axis, "reduce_mean");
    if (s.extent == 0) throw std::domain_error("reduce_mean: zero-extent axis");
    Tensor total = reduce_sum(g, a, axis);
    return mul_scalar(g, total, 1.0 / static_cast<double>(s.extent));
}

Tensor reduce_var(Graph& g, const Tensor& a, std::size_t axis) {
    g.check_input(a, "reduce_var");
    const AxisSplit s = split_axis(a.shape, axis, "reduce_var");
    if (s.extent == 0) throw std::domain_error("reduce_var: zero-extent axis");
    const double inv_n = 1.0 / static_cast<double>(s.extent);
    const bool track = wants_grad(a);
    Tensor out = g.make_output(drop_axis(a.shape, axis), track);
    // two passes: mean, then centered second moment (biased)
    std::vector<double> means(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i)
                means[o * s.inner + i] += (*a.data)[(o * s.extent + e) * s.inner + i] * inv_n;
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const double d =
                    (*a.data)[(o * s.extent + e) * s.inner + i] - means[o * s.inner + i];
                (*out.data)[o * s.inner + i] += d * d * inv_n;
            }
    if (track) {
        g.record([=, adata = a.data, agrad = a.grad, ograd = out.grad]() {
            // d var / d x_e = 2 (x_e - mean) / n  (mean term cancels)
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t e = 0; e < s.extent; ++e)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        const double d =
                            (*adata)[(o * s.extent + e) * s.inner + i] - means[o * s.inner + i];
                        (*agrad)[(o * s.extent + e) * s.inner + i] +=
                            (*ograd)[o * s.inner + i] * 2.0 * d * inv_n;
                    }
        });
    }
    return out;
}

Tensor sum_all(Graph& g, const Tensor& a) {
    g.check_input(a, "sum_all");
    const bool track = wants_grad(a);
    Tensor out = g.make_output({1}, track);
    double acc = 0.0;
    for (double v : *a.data) acc += v;
    (*out.data)[0] = acc;
    if (track) {
        const std::size_t n = a.size();
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            const double go = (*ograd)[0];
            for (std::size_t i = 0; i < n; ++i) (*agrad)[i] += go;
        });
    }
    return out;
}

Tensor expand_last(Graph& g, const Tensor& a, std::size_t n) {
    g.check_input(a, "expand_last");
    if (n == 0) throw ShapeError("expand_last: zero extent");
    Shape shape = a.shape;
    // a 1-d {1} scalar-ish shape expands to {n}, not {1,n}
    if (!(shape.size() == 1 && shape[0] == 1)) shape.push_back(n);
    else shape = Shape{n};
    const std::size_t m = a.size();
    const bool track = wants_grad(a);
    Tensor out = g.make_output(shape, track);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*out.data)[i * n + j] = (*a.data)[i];
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += (*ograd)[i * n + j];
                (*agrad)[i] += acc;
            }
        });
    }
    return out;
}

Tensor softmax(Graph& g, const Tensor& a, std::size_t axis) {
    g.check_input(a, "softmax");
    const AxisSplit s = split_axis(a.shape, axis, "softmax");
    const bool track = wants_grad(a);
    Tensor out = g.make_output(a.shape, track);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < s.extent; ++e)
                mx = std::max(mx, (*a.data)[(o * s.extent + e) * s.inner + i]);
            if (g_debug_checks && std::isnan(mx)) ++g_nan_count;
            double z = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                const double v = std::exp((*a.data)[(o * s.extent + e) * s.inner + i] - mx);
                (*out.data)[(o * s.extent + e) * s.inner + i] = v;
                z += v;
            }
            for (std::size_t e = 0; e < s.extent; ++e)
                (*out.data)[(o * s.extent + e) * s.inner + i] /= z;
        }
    if (track) {
        g.record([=, odata = out.data, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t i = 0; i < s.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t idx = (o * s.extent + e) * s.inner + i;
                        dot += (*ograd)[idx] * (*odata)[idx];
                    }
                    for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t idx = (o * s.extent + e) * s.inner + i;
                        (*agrad)[idx] += (*odata)[idx] * ((*ograd)[idx] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor reshape(Graph& g, const Tensor& a, Shape shape) {
    g.check_input(a, "reshape");
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(shape));
    const std::size_t n = a.size();
    const bool track = wants_grad(a);
    Tensor out = g.make_output(std::move(shape), track);
    std::copy(a.data->begin(), a.data->end(), out.data->begin());
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t i = 0; i < n; ++i) (*agrad)[i] += (*ograd)[i];
        });
    }
    return out;
}

Tensor slice(Graph& g, const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    g.check_input(a, "slice");
    const AxisSplit s = split_axis(a.shape, axis, "slice");
    if (start + len > s.extent)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(s.extent));
    Shape shape = a.shape;
    shape[axis] = len;
    const bool track = wants_grad(a);
    Tensor out = g.make_output(shape, track);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < len; ++e)
            for (std::size_t i = 0; i < s.inner; ++i)
                (*out.data)[(o * len + e) * s.inner + i] =
                    (*a.data)[(o * s.extent + start + e) * s.inner + i];
    if (track) {
        g.record([=, agrad = a.grad, ograd = out.grad]() {
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t e = 0; e < len; ++e)
                    for (std::size_t i = 0; i < s.inner; ++i)
                        (*agrad)[(o * s.extent + start + e) * s.inner + i] +=
                            (*ograd)[(o * len + e) * s.inner + i];
        });
    }
    return out;
}

Tensor concat(Graph& g, const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    for (const Tensor& p : parts) g.check_input(p, "concat");
    const Shape base = parts[0].shape;
    std::size_t total = 0;
    bool track = false;
    for (const Tensor& p : parts) {
        if (p.shape.size() != base.size())
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape));
        for (std::size_t i = 0; i < base.size(); ++i)
            if (i != axis && p.shape[i] != base[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape) + " vs " +
                                 shape_str(base));
        total += p.shape[axis];
        track = track || wants_grad(p);
    }
    Shape shape = base;
    shape[axis] = total;
    Tensor out = g.make_output(shape, track);
    const AxisSplit so = split_axis(shape, axis, "concat");
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t ext = p.shape[axis];
        for (std::size_t o = 0; o < so.outer; ++o)
            for (std::size_t e = 0; e < ext; ++e)
                for (std::size_t i = 0; i < so.inner; ++i)
                    (*out.data)[(o * so.extent + offset + e) * so.inner + i] =
                        (*p.data)[(o * ext + e) * so.inner + i];
        if (track && p.grad) {
            const std::size_t off = offset;
            g.record([=, pgrad = p.grad, ograd = out.grad]() {
                for (std::size_t o = 0; o < so.outer; ++o)
                    for (std::size_t e = 0; e < ext; ++e)
                        for (std::size_t i = 0; i < so.inner; ++i)
                            (*pgrad)[(o * ext + e) * so.inner + i] +=
                                (*ograd)[(o * so.extent + off + e) * so.inner + i];
            });
        }
        offset += ext;
    }
    return out;
}

Tensor gather_rows_batched(Graph& g, const Tensor& table,
                           const std::vector<std::vector<std::size_t>>& indices) {
    g.check_input(table, "gather_rows_batched");
    if (table.shape.size() != 2)
        throw ShapeError("gather_rows_batched: table must be 2-d, got " + shape_str(table.shape));
    const std::size_t P = table.shape[0], d = table.shape[1];
    const std::size_t B = indices.size();
    if (B == 0) throw ShapeError("gather_rows_batched: empty batch");
    const std::size_t k = indices[0].size();
    for (const auto& row : indices) {
        if (row.size() != k) throw ShapeError("gather_rows_batched: ragged index set");
        for (std::size_t idx : row)
            if (idx >= P) throw ShapeError("gather_rows_batched: index out of range");
    }
    const bool track = wants_grad(table);
    Tensor out = g.make_output({B, k, d}, track);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < k; ++e)
            std::copy(table.data->begin() + indices[b][e] * d,
                      table.data->begin() + (indices[b][e] + 1) * d,
                      out.data->begin() + (b * k + e) * d);
    if (track) {
        g.record([=, tgrad = table.grad, ograd = out.grad]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t e = 0; e < k; ++e)
                    for (std::size_t i = 0; i < d; ++i)
                        (*tgrad)[indices[b][e] * d + i] += (*ograd)[(b * k + e) * d + i];
        });
    }
    return out;
}

Tensor gather_positions(Graph& g, const Tensor& x,
                        const std::vector<std::vector<std::size_t>>& indices) {
    g.check_input(x, "gather_positions");
    if (x.shape.size() != 3)
        throw ShapeError("gather_positions: expected 3-d, got " + shape_str(x.shape));
    const std::size_t B = x.shape[0], L = x.shape[1], d = x.shape[2];
    if (indices.size() != B) throw ShapeError("gather_positions: batch size mismatch");
    const std::size_t M = indices[0].size();
    for (const auto& row : indices) {
        if (row.size() != M) throw ShapeError("gather_positions: ragged index set");
        for (std::size_t idx : row)
            if (idx >= L) throw ShapeError("gather_positions: index out of range");
    }
    const bool track = wants_grad(x);
    Tensor out = g.make_output({B, M, d}, track);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < M; ++e)
            std::copy(x.data->begin() + (b * L + indices[b][e]) * d,
                      x.data->begin() + (b * L + indices[b][e] + 1) * d,
                      out.data->begin() + (b * M + e) * d);
    if (track) {
        g.record([=, xgrad = x.grad, ograd = out.grad]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t e = 0; e < M; ++e)
                    for (std::size_t i = 0; i < d; ++i)
                        (*xgrad)[(b * L + indices[b][e]) * d + i] += (*ograd)[(b * M + e) * d + i];
        });
    }
    return out;
}

Tensor scatter_positions(Graph& g, const Tensor& src,
                         const std::vector<std::vector<std::size_t>>& indices,
                         std::size_t total_len, const Tensor& fill) {
    g.check_input(src, "scatter_positions");
    g.check_input(fill, "scatter_positions");
    if (src.shape.size() != 3)
        throw ShapeError("scatter_positions: expected 3-d src, got " + shape_str(src.shape));
    const std::size_t B = src.shape[0], K = src.shape[1], d = src.shape[2];
    if (fill.shape != Shape{d})
        throw ShapeError("scatter_positions: fill must be [d], got " + shape_str(fill.shape));
    if (indices.size() != B) throw ShapeError("scatter_positions: batch size mismatch");
    for (const auto& row : indices) {
        if (row.size() != K) throw ShapeError("scatter_positions: ragged index set");
        for (std::size_t idx : row)
            if (idx >= total_len) throw ShapeError("scatter_positions: index out of range");
    }
    const bool track = wants_grad(src) || wants_grad(fill);
    Tensor out = g.make_output({B, total_len, d}, track);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < total_len; ++l)
            std::copy(fill.data->begin(), fill.data->end(), out.data->begin() + (b * total_len + l) * d);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < K; ++e)
            std::copy(src.data->begin() + (b * K + e) * d, src.data->begin() + (b * K + e + 1) * d,
                      out.data->begin() + (b * total_len + indices[b][e]) * d);
    if (track) {
        g.record([=, sgrad = src.grad, fgrad = fill.grad, ograd = out.grad]() {
            // filled positions feed fill's grad; scattered positions feed src's
            std::vector<char> taken(B * total_len, 0);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t e = 0; e < K; ++e) {
                    taken[b * total_len + indices[b][e]] = 1;
                    if (sgrad)
                        for (std::size_t i = 0; i < d; ++i)
                            (*sgrad)[(b * K + e) * d + i] +=
                                (*ograd)[(b * total_len + indices[b][e]) * d + i];
                }
            if (fgrad)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t l = 0; l < total_len; ++l)
                        if (!taken[b * total_len + l])
                            for (std::size_t i = 0; i < d; ++i)
                                (*fgrad)[i] += (*ograd)[(b * total_len + l) * d + i];
        });
    }
    return out;
}

Tensor tile_rows(Graph& g, const Tensor& v, std::size_t batch) {
    g.check_input(v, "tile_rows");
    if (v.shape.size() != 1) throw ShapeError("tile_rows: expected 1-d, got " + shape_str(v.shape));
    const std::size_t d = v.shape[0];
    const bool track = wants_grad(v);
    Tensor out = g.make_output({batch, 1, d}, track);
    for (std::size_t b = 0; b < batch; ++b)
        std::copy(v.data->begin(), v.data->end(), out.data->begin() + b * d);
    if (track) {
        g.record([=, vgrad = v.grad, ograd = out.grad]() {
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < d; ++i) (*vgrad)[i] += (*ograd)[b * d + i];
        });
    }
    return out;
}

Tensor split_heads(Graph& g, const Tensor& x, std::size_t heads) {
    g.check_input(x, "split_heads");
    if (x.shape.size() != 3 || x.shape[2] % heads != 0)
        throw ShapeError("split_heads: shape " + shape_str(x.shape) + " not divisible into " +
                         std::to_string(heads) + " heads");
    const std::size_t B = x.shape[0], S = x.shape[1], d = x.shape[2], dh = d / heads;
    const bool track = wants_grad(x);
    Tensor out = g.make_output({B * heads, S, dh}, track);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t s = 0; s < S; ++s)
                std::copy(x.data->begin() + (b * S + s) * d + h * dh,
                          x.data->begin() + (b * S + s) * d + (h + 1) * dh,
                          out.data->begin() + ((b * heads + h) * S + s) * dh);
    if (track) {
        g.record([=, xgrad = x.grad, ograd = out.grad]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t s = 0; s < S; ++s)
                        for (std::size_t i = 0; i < dh; ++i)
                            (*xgrad)[(b * S + s) * d + h * dh + i] +=
                                (*ograd)[((b * heads + h) * S + s) * dh + i];
        });
    }
    return out;
}

Tensor merge_heads(Graph& g, const Tensor& x, std::size_t heads) {
    g.check_input(x, "merge_heads");
    if (x.shape.size() != 3 || x.shape[0] % heads != 0)
        throw ShapeError("merge_heads: shape " + shape_str(x.shape) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const std::size_t B = x.shape[0] / heads, S = x.shape[1], dh = x.shape[2], d = dh * heads;
    const bool track = wants_grad(x);
    Tensor out = g.make_output({B, S, d}, track);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t s = 0; s < S; ++s)
                std::copy(x.data->begin() + ((b * heads + h) * S + s) * dh,
                          x.data->begin() + ((b * heads + h) * S + s + 1) * dh,
                          out.data->begin() + (b * S + s) * d + h * dh);
    if (track) {
        g.record([=, xgrad = x.grad, ograd = out.grad]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t s = 0; s < S; ++s)
                        for (std::size_t i = 0; i < dh; ++i)
                            (*xgrad)[((b * heads + h) * S + s) * dh + i] +=
                                (*ograd)[(b * S + s) * d + h * dh + i];
        });
    }
    return out;
}

}  // namespace sepnorm
