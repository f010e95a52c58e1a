#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sepnorm/errors.hpp"

namespace sepnorm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

// Dense 64-bit tensor, row-major. Data and gradient buffers are shared
// so copies alias; intermediates carry the producing graph's identity.
// A tensor participates in at most one graph.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // same length as data when present
    bool requires_grad = false;
    const Graph* graph = nullptr;  // producing graph; null for leaves
    std::size_t node_id = 0;

    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    // leaf with a gradient buffer (a trainable parameter)
    static Tensor param(Shape shape, std::vector<double> values);

    std::size_t size() const { return data ? data->size() : 0; }
    double& at(std::size_t i) { return (*data)[i]; }
    double at(std::size_t i) const { return (*data)[i]; }
    double item() const;

    void ensure_grad();
    void zero_grad();
};

// Append-only tape; recorded adjoints replayed in reverse yield gradients
// for every requires_grad leaf. Rebuilt per training step.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // loss must be a scalar produced by this graph. Leaf gradients
    // accumulate across calls; call zero_grad on leaves between steps.
    void backward(const Tensor& loss);

    std::size_t num_nodes() const { return tape_.size(); }

    // --- op machinery ---
    Tensor make_output(Shape shape, bool track);
    void record(std::function<void()> fn);
    void check_input(const Tensor& t, const char* op) const;

private:
    std::vector<std::function<void()>> tape_;
    std::vector<std::shared_ptr<std::vector<double>>> tracked_grads_;
    std::size_t next_id_ = 1;
};

// Debug-mode NaN accounting: invalid-domain elementwise inputs produce
// quiet NaN and bump a counter instead of throwing.
void set_debug_checks(bool on);
bool debug_checks();
std::size_t debug_nan_count();
void reset_debug_nan_count();

// --- linear algebra ---
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);                 // [m,k]x[k,n]
Tensor batched_matmul(Graph& g, const Tensor& a, const Tensor& b);         // [B,m,k]x[B,k,n]
Tensor transpose(Graph& g, const Tensor& a);                               // [m,n]->[n,m]
Tensor transpose_last2(Graph& g, const Tensor& a);                         // [B,m,n]->[B,n,m]

// --- elementwise; b may be equal-shape, scalar, or a trailing suffix of a ---
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor div(Graph& g, const Tensor& a, const Tensor& b);
Tensor add_scalar(Graph& g, const Tensor& a, double c);
Tensor mul_scalar(Graph& g, const Tensor& a, double c);
Tensor sqrt(Graph& g, const Tensor& a);
Tensor exp(Graph& g, const Tensor& a);
Tensor log(Graph& g, const Tensor& a);
// tanh approximation with c = sqrt(2/pi) = 0.7978845608028654
Tensor gelu(Graph& g, const Tensor& a);

// --- reductions (axis removed from shape; 1-d input reduces to {1}) ---
Tensor reduce_sum(Graph& g, const Tensor& a, std::size_t axis);
Tensor reduce_mean(Graph& g, const Tensor& a, std::size_t axis);
// biased (population) variance
Tensor reduce_var(Graph& g, const Tensor& a, std::size_t axis);
Tensor sum_all(Graph& g, const Tensor& a);

// repeats a along a new trailing axis of extent n
Tensor expand_last(Graph& g, const Tensor& a, std::size_t n);

// max-subtracted, rows sum to 1
Tensor softmax(Graph& g, const Tensor& a, std::size_t axis);

// --- structural ops (copying; gradients flow) ---
Tensor reshape(Graph& g, const Tensor& a, Shape shape);
Tensor slice(Graph& g, const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(Graph& g, const std::vector<Tensor>& parts, std::size_t axis);
// rows of a [P,d] table selected per batch element -> [B,k,d]
Tensor gather_rows_batched(Graph& g, const Tensor& table,
                           const std::vector<std::vector<std::size_t>>& indices);
// positions of x[B,L,d] selected per batch element -> [B,M,d]
Tensor gather_positions(Graph& g, const Tensor& x,
                        const std::vector<std::vector<std::size_t>>& indices);
// inverse of gather_positions: src[B,K,d] placed at indices, fill[d] elsewhere -> [B,L,d]
Tensor scatter_positions(Graph& g, const Tensor& src,
                         const std::vector<std::vector<std::size_t>>& indices,
                         std::size_t total_len, const Tensor& fill);
// v[d] tiled to [B,1,d]
Tensor tile_rows(Graph& g, const Tensor& v, std::size_t batch);
// [B,S,h*dh] -> [B*h,S,dh] and back
Tensor split_heads(Graph& g, const Tensor& x, std::size_t heads);
Tensor merge_heads(Graph& g, const Tensor& x, std::size_t heads);

}  // namespace sepnorm
