// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace craft {

// A named, persistent trainable buffer. Lives outside any tape; gradients
// accumulate here across backward() calls until zero_grad().
struct Parameter {
    std::string name;
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, std::vector<size_t> s);

    size_t size() const { return value.size(); }
    void zero_grad();
};

class Tape;

// Lightweight handle to a node on a tape. Copyable; valid while the tape lives.
class Tensor {
  public:
    Tensor() = default;

    const std::vector<size_t>& shape() const;
    size_t size() const;
    size_t rows() const;  // rank-2 only
    size_t cols() const;  // rank-2 only
    const std::vector<double>& value() const;
    // Gradient of the last backward() w.r.t. this node (empty if untouched).
    const std::vector<double>& grad() const;
    double scalar() const;  // size-1 tensors only
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }

    Tape* tape() const { return tape_; }
    uint32_t id() const { return id_; }

  private:
    friend class Tape;
    Tensor(Tape* tape, uint32_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    uint32_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in execution order, so reverse
// iteration is a reverse topological order of the DAG. Single-threaded; a
// fresh tape per training step (or per inference call) is the intended use.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf referencing a Parameter: value copied in, gradients flushed back
    // into p.grad during backward().
    Tensor param(Parameter& p);
    // Leaf referencing a frozen Parameter: value only, no gradient path.
    Tensor frozen(const Parameter& p);
    // Plain value leaf.
    Tensor constant(std::vector<size_t> shape, std::vector<double> data);
    // Value leaf that collects a gradient readable via Tensor::grad().
    Tensor input(std::vector<size_t> shape, std::vector<double> data);

    // Propagates d(loss)=1 through the graph. loss must be scalar. Node
    // gradients are recomputed from scratch on every call; Parameter
    // gradients accumulate across calls.
    void backward(const Tensor& loss);

    size_t node_count() const { return nodes_.size(); }
    // Diagnostics for the most recent backward() call.
    size_t last_backward_visits() const { return last_visits_; }
    size_t last_backward_closure_calls() const { return last_closure_calls_; }

    // Extension point used by ops (and by modules adding custom gradient
    // rules, e.g. straight-through quantization). backward_fn, if non-null,
    // is invoked once per backward pass with this node's grad materialized.
    Tensor make_node(std::vector<size_t> shape, std::vector<double> value,
                     const std::vector<Tensor>& parents,
                     std::function<void(Tape&, uint32_t)> backward_fn,
                     const char* op_name);

    // Internal node access for backward closures.
    struct Node {
        std::vector<size_t> shape;
        std::vector<double> value;
        std::vector<double> grad;  // lazily materialized
        bool requires_grad = false;
        std::function<void(Tape&, uint32_t)> backward_fn;
    };
    Node& node(uint32_t id) { return nodes_[id]; }
    const Node& node(uint32_t id) const { return nodes_[id]; }
    // Zero-filled grad buffer for a node (materializes on first use).
    std::vector<double>& grad_buf(uint32_t id);

  private:
    friend class Tensor;
    std::deque<Node> nodes_;
    size_t last_visits_ = 0;
    size_t last_closure_calls_ = 0;
};

// --- Op set -----------------------------------------------------------------
// All ops validate shapes (DimensionError) and reject non-finite results
// (NumericError). Rank is at most 2; a scalar has shape {}.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Same-shape addition, or bias-row broadcast: [m,n] + [n].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// Numerically stable log(sigmoid(x)) and log(1 - sigmoid(x)).
Tensor log_sigmoid(const Tensor& a);
Tensor log1m_sigmoid(const Tensor& a);
// Row-wise layer norm with learnable gain/bias (shape [n] each), eps fixed.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Gather rows of table [V,d] by ids; backward scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids);
// Row-wise softmax; causal=true restricts row i to columns <= i (square input).
Tensor softmax_rows(const Tensor& s, bool causal = false);
// Sum over rows of -log softmax(logits)[target]; logits [n,V], targets size n.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int32_t>& targets);
// Cosine similarity of two rank-1 tensors -> scalar. Zero norm -> NumericError.
Tensor cosine(const Tensor& u, const Tensor& v);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Rows [from, to) of a rank-2 tensor.
Tensor slice_rows(const Tensor& a, size_t from, size_t to);
// Forward identity (bit-exact); contributes zero gradient to its parent.
Tensor stop_gradient(const Tensor& a);
// Sum of squared differences -> scalar (composed from primitives).
Tensor squared_l2(const Tensor& a, const Tensor& b);

}  // namespace craft
