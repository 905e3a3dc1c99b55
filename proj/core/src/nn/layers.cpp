#include "ctrlstruct/nn/layers.hpp"

#include <cmath>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::nn {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    // Fill row-major so the draw order does not depend on Eigen's storage order.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Parameter(name + ".weight", uniform(in, out, bound, rng));
    bias = Parameter(name + ".bias", uniform(1, out, bound, rng));
}

Var Linear::operator()(Graph& g, Var x) const {
    return add_row(matmul(x, g.param(weight)), g.param(bias));
}

void Linear::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

Mlp::Mlp(const std::string& name, const std::vector<Eigen::Index>& widths, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        layers.emplace_back(name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
    }
}

Var Mlp::operator()(Graph& g, Var x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i](g, h);
        if (i + 1 < layers.size()) h = tanh(h);
    }
    return h;
}

void Mlp::collect(std::vector<Parameter*>& out) {
    for (auto& l : layers) l.collect(out);
}

Attention::Attention(const std::string& name, Eigen::Index n, int num_heads, Rng& rng) {
    if (num_heads < 1 || n % num_heads != 0) throw ConfigError("attention: heads must divide width");
    const Eigen::Index d = n / num_heads;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(n));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (int h = 0; h < num_heads; ++h) {
        const std::string p = name + ".h" + std::to_string(h);
        Head head;
        head.query = Parameter(p + ".query", uniform(n, d, in_bound, rng));
        head.key = Parameter(p + ".key", uniform(n, d, in_bound, rng));
        head.value = Parameter(p + ".value", uniform(n, d, in_bound, rng));
        head.output = Parameter(p + ".output", uniform(d, n, out_bound, rng));
        heads.push_back(std::move(head));
    }
}

Var Attention::operator()(Graph& g, Var queries, Var keys, const Matrix* mask) const {
    Var out;
    for (const auto& head : heads) {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head.query.value.cols()));
        Var q = matmul(queries, g.param(head.query));
        Var k = matmul(keys, g.param(head.key));
        Var v = matmul(keys, g.param(head.value));
        Var weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d), mask);
        Var o = matmul(matmul(weights, v), g.param(head.output));
        out = out.valid() ? add(out, o) : o;
    }
    return out;
}

void Attention::collect(std::vector<Parameter*>& out) {
    for (auto& h : heads) {
        out.push_back(&h.query);
        out.push_back(&h.key);
        out.push_back(&h.value);
        out.push_back(&h.output);
    }
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Matrix m = Matrix::Ones(rows, cols);
    if (rate <= 0.0) return m;
    std::bernoulli_distribution drop(rate);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = drop(rng) ? 0.0 : keep_scale;
    return m;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const Parameter* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void Adam::step() {
    ++t_;
    const double lr = config_.learning_rate;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad);
        if (lr != 0.0) {
            p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.epsilon);
        }
        p.zero_grad();
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

bool all_finite(const std::vector<Parameter*>& params) {
    for (const Parameter* p : params)
        if (!p->value.allFinite()) return false;
    return true;
}

}  // namespace ctrlstruct::nn
