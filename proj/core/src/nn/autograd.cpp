#include "ctrlstruct/nn/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::nn {

const Matrix& Var::value() const { return graph_->value(*this); }

Var Graph::push(Matrix value, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Graph::grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
        const Matrix& v = n.param ? n.param->value : n.value;
        n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
}

Var Graph::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Graph::param(const Parameter& p) {
    const Parameter* ptr = &p;
    Var v = push(Matrix(), true, [ptr](Graph& g, int self) {
        const Matrix& gr = g.grad_of(self);
        if (gr.size() != 0) ptr->grad += gr;
    });
    nodes_.back().param = ptr;
    return v;
}

void Graph::backward(Var out, const Matrix& upstream) {
    if (out.graph_ != this) throw Error("backward: var belongs to another graph");
    const Matrix& v = value(out);
    if (upstream.rows() != v.rows() || upstream.cols() != v.cols()) {
        throw Error("backward: upstream gradient shape mismatch");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(out.id_) = upstream;
    for (int i = out.id_; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
        n.backward(*this, i);
    }
}

void Graph::backward(Var out) {
    backward(out, Matrix::Ones(1, 1));
}

void Graph::backward(const std::vector<std::pair<Var, Matrix>>& seeds) {
    for (auto& n : nodes_) n.grad.resize(0, 0);
    int last = -1;
    for (const auto& [v, up] : seeds) {
        if (v.graph_ != this) throw Error("backward: var belongs to another graph");
        const Matrix& val = value(v);
        if (up.rows() != val.rows() || up.cols() != val.cols()) {
            throw Error("backward: upstream gradient shape mismatch");
        }
        grad_ref(v.id_) += up;
        last = std::max(last, v.id_);
    }
    for (int i = last; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
        n.backward(*this, i);
    }
}

namespace {

inline Graph& graph_of(Var a, Var b) {
    assert(a.graph() == b.graph());
    (void)b;
    return *a.graph();
}

}  // namespace

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const int ia = a.id(), ib = b.id();
    Matrix out = g.value_of(ia) * g.value_of(ib);
    return g.push(std::move(out), g.needs(ia) || g.needs(ib), [ia, ib](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        if (gr.needs(ia)) gr.grad_ref(ia).noalias() += d * gr.value_of(ib).transpose();
        if (gr.needs(ib)) gr.grad_ref(ib).noalias() += gr.value_of(ia).transpose() * d;
    });
}

Var transpose(Var a) {
    Graph& g = *a.graph();
    const int ia = a.id();
    return g.push(g.value_of(ia).transpose(), g.needs(ia), [ia](Graph& gr, int self) {
        gr.grad_ref(ia) += gr.grad_of(self).transpose();
    });
}

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const int ia = a.id(), ib = b.id();
    Matrix out = g.value_of(ia) + g.value_of(ib);
    return g.push(std::move(out), g.needs(ia) || g.needs(ib), [ia, ib](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        if (gr.needs(ia)) gr.grad_ref(ia) += d;
        if (gr.needs(ib)) gr.grad_ref(ib) += d;
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const int ia = a.id(), ib = b.id();
    Matrix out = g.value_of(ia) - g.value_of(ib);
    return g.push(std::move(out), g.needs(ia) || g.needs(ib), [ia, ib](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        if (gr.needs(ia)) gr.grad_ref(ia) += d;
        if (gr.needs(ib)) gr.grad_ref(ib) -= d;
    });
}

Var add_row(Var a, Var row) {
    Graph& g = graph_of(a, row);
    const int ia = a.id(), ir = row.id();
    if (g.value_of(ir).rows() != 1 || g.value_of(ir).cols() != g.value_of(ia).cols()) {
        throw Error("add_row: shape mismatch");
    }
    Matrix out = g.value_of(ia).rowwise() + g.value_of(ir).row(0);
    return g.push(std::move(out), g.needs(ia) || g.needs(ir), [ia, ir](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        if (gr.needs(ia)) gr.grad_ref(ia) += d;
        if (gr.needs(ir)) gr.grad_ref(ir) += d.colwise().sum();
    });
}

Var scale(Var a, double s) {
    Graph& g = *a.graph();
    const int ia = a.id();
    return g.push(g.value_of(ia) * s, g.needs(ia), [ia, s](Graph& gr, int self) {
        gr.grad_ref(ia) += gr.grad_of(self) * s;
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const int ia = a.id(), ib = b.id();
    Matrix out = g.value_of(ia).cwiseProduct(g.value_of(ib));
    return g.push(std::move(out), g.needs(ia) || g.needs(ib), [ia, ib](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        if (gr.needs(ia)) gr.grad_ref(ia) += d.cwiseProduct(gr.value_of(ib));
        if (gr.needs(ib)) gr.grad_ref(ib) += d.cwiseProduct(gr.value_of(ia));
    });
}

Var tanh(Var a) {
    Graph& g = *a.graph();
    const int ia = a.id();
    Matrix out = g.value_of(ia).array().tanh().matrix();
    return g.push(std::move(out), g.needs(ia), [ia](Graph& gr, int self) {
        const Matrix& y = gr.value_of(self);
        gr.grad_ref(ia).array() += gr.grad_of(self).array() * (1.0 - y.array().square());
    });
}

Var exp(Var a) {
    Graph& g = *a.graph();
    const int ia = a.id();
    Matrix out = g.value_of(ia).array().exp().matrix();
    return g.push(std::move(out), g.needs(ia), [ia](Graph& gr, int self) {
        gr.grad_ref(ia).array() += gr.grad_of(self).array() * gr.value_of(self).array();
    });
}

Var sum(Var a) {
    Graph& g = *a.graph();
    const int ia = a.id();
    Matrix out(1, 1);
    out(0, 0) = g.value_of(ia).sum();
    return g.push(std::move(out), g.needs(ia), [ia](Graph& gr, int self) {
        gr.grad_ref(ia).array() += gr.grad_of(self)(0, 0);
    });
}

Var gather_rows(Var table, std::span<const int> ids) {
    Graph& g = *table.graph();
    const int it = table.id();
    const Matrix& t = g.value_of(it);
    Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= t.rows()) throw Error("gather_rows: id out of range");
        out.row(static_cast<Eigen::Index>(r)) = t.row(ids[r]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return g.push(std::move(out), g.needs(it), [it, idx = std::move(idx)](Graph& gr, int self) {
        const Matrix& d = gr.grad_of(self);
        // Scatter straight into a bound parameter to avoid a dense table-sized buffer.
        const Parameter* p = gr.param_of(it);
        Matrix& dt = p ? p->grad : gr.grad_ref(it);
        for (std::size_t r = 0; r < idx.size(); ++r) dt.row(idx[r]) += d.row(static_cast<Eigen::Index>(r));
    });
}

Var pick_sum(Var a, std::span<const int> cols) {
    Graph& g = *a.graph();
    const int ia = a.id();
    const Matrix& v = g.value_of(ia);
    if (static_cast<Eigen::Index>(cols.size()) != v.rows()) throw Error("pick_sum: one column per row required");
    Matrix out(1, 1);
    out(0, 0) = 0.0;
    for (std::size_t r = 0; r < cols.size(); ++r) {
        if (cols[r] < 0 || cols[r] >= v.cols()) throw Error("pick_sum: column out of range");
        out(0, 0) += v(static_cast<Eigen::Index>(r), cols[r]);
    }
    std::vector<int> c(cols.begin(), cols.end());
    return g.push(std::move(out), g.needs(ia), [ia, c = std::move(c)](Graph& gr, int self) {
        const double d = gr.grad_of(self)(0, 0);
        Matrix& da = gr.grad_ref(ia);
        for (std::size_t r = 0; r < c.size(); ++r) da(static_cast<Eigen::Index>(r), c[r]) += d;
    });
}

Var weighted_row_sum(Var a, const RowVector& weights) {
    Graph& g = *a.graph();
    const int ia = a.id();
    if (weights.size() != g.value_of(ia).rows()) throw Error("weighted_row_sum: weight count mismatch");
    Matrix out = weights * g.value_of(ia);
    return g.push(std::move(out), g.needs(ia), [ia, weights](Graph& gr, int self) {
        gr.grad_ref(ia).noalias() += weights.transpose() * gr.grad_of(self);
    });
}

namespace {

Matrix row_softmax(const Matrix& logits, const Matrix* mask) {
    Matrix z = mask ? Matrix(logits + *mask) : logits;
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        if (!std::isfinite(m)) throw Error("softmax: row fully masked");
        auto e = (z.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    return out;
}

}  // namespace

Var softmax_rows(Var a, const Matrix* mask) {
    Graph& g = *a.graph();
    const int ia = a.id();
    Matrix out = row_softmax(g.value_of(ia), mask);
    return g.push(std::move(out), g.needs(ia), [ia](Graph& gr, int self) {
        const Matrix& y = gr.value_of(self);
        const Matrix& d = gr.grad_of(self);
        // dx = y * (d - sum(d * y)) per row
        Eigen::VectorXd dot = (d.cwiseProduct(y)).rowwise().sum();
        Matrix dx = y.cwiseProduct(d - dot.replicate(1, d.cols()));
        gr.grad_ref(ia) += dx;
    });
}

Var log_softmax_rows(Var a, const Matrix* mask) {
    Graph& g = *a.graph();
    const int ia = a.id();
    const Matrix& x = g.value_of(ia);
    Matrix z = mask ? Matrix(x + *mask) : x;
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        if (!std::isfinite(m)) throw Error("log_softmax: row fully masked");
        const double lse = m + std::log((z.row(r).array() - m).exp().sum());
        out.row(r) = z.row(r).array() - lse;
    }
    return g.push(std::move(out), g.needs(ia), [ia](Graph& gr, int self) {
        const Matrix& y = gr.value_of(self);
        const Matrix& d = gr.grad_of(self);
        Matrix p = y.array().exp().matrix();
        Eigen::VectorXd s = d.rowwise().sum();
        Matrix dx = d - p.cwiseProduct(s.replicate(1, d.cols()));
        gr.grad_ref(ia) += dx;
    });
}

}  // namespace ctrlstruct::nn
