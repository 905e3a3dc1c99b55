#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Graph records every operation applied to its Vars; backward() walks the
// tape in reverse and accumulates gradients into the Parameters that were
// bound as leaves. Graphs are cheap, single-use and not thread-safe; the
// Parameters they read may be shared by concurrent graphs as long as nobody
// calls backward().

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ctrlstruct::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
    std::string name;
    Matrix value;
    // Gradient accumulator written by Graph::backward; not part of the value.
    mutable Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }

    void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

/// Handle to a node of a Graph.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Graph* graph() const { return graph_; }
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* g, int id) : graph_(g), id_(id) {}

    Graph* graph_{nullptr};
    int id_{-1};
};

class Graph {
public:
    Graph() { nodes_.reserve(256); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Matrix value);
    Var param(const Parameter& p);

    /// Seeds `out` with `upstream` (same shape) and propagates to every leaf.
    void backward(Var out, const Matrix& upstream);
    /// Scalar output, seed 1.
    void backward(Var out);
    /// Seeds several outputs at once and propagates in a single reverse sweep.
    void backward(const std::vector<std::pair<Var, Matrix>>& seeds);

    const Matrix& value(Var v) const { return value_of(v.id_); }
    const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].grad; }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Used by op implementations.
    using Backward = std::function<void(Graph&, int self)>;
    Var push(Matrix value, bool requires_grad, Backward backward);
    Matrix& grad_ref(int id);
    const Matrix& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Matrix& value_of(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.param ? n.param->value : n.value;
    }
    /// Parameter bound to a leaf node, or nullptr.
    const Parameter* param_of(int id) const { return nodes_[static_cast<std::size_t>(id)].param; }
    bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad{false};
        const Parameter* param{nullptr};
        Backward backward;
    };
    std::vector<Node> nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1 x c row to every row of a (bias broadcast).
Var add_row(Var a, Var row);
Var scale(Var a, double s);
/// Elementwise product.
Var mul(Var a, Var b);

// Elementwise nonlinearities.
Var tanh(Var a);
Var exp(Var a);

// Reductions and indexing.
Var sum(Var a);
/// Rows of `table` selected by ids, in order.
Var gather_rows(Var table, std::span<const int> ids);
/// Sum over rows i of a(i, cols[i]).
Var pick_sum(Var a, std::span<const int> cols);
/// Column mean over the rows selected by `weights` (1 x rows constant weights).
Var weighted_row_sum(Var a, const RowVector& weights);

// Row-wise softmax family. `mask` (optional) is added to the logits before
// normalization; use -inf entries to exclude positions.
Var softmax_rows(Var a, const Matrix* mask = nullptr);
Var log_softmax_rows(Var a, const Matrix* mask = nullptr);

}  // namespace ctrlstruct::nn
