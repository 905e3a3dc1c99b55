#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctrlstruct/nn/autograd.hpp"

namespace ctrlstruct::nn {

using Rng = std::mt19937_64;

/// Uniform(-bound, bound) matrix.
Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);

/// Affine map x W + b with fan-in scaled uniform init.
struct Linear {
    Parameter weight;  // in x out
    Parameter bias;    // 1 x out

    Linear() = default;
    Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng);

    Var operator()(Graph& g, Var x) const;
    void collect(std::vector<Parameter*>& out);
};

/// Tanh multilayer perceptron; no activation after the last layer.
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    Mlp(const std::string& name, const std::vector<Eigen::Index>& widths, Rng& rng);

    Var operator()(Graph& g, Var x) const;
    void collect(std::vector<Parameter*>& out);
};

/// Multi-head scaled dot-product attention without biases. Each head owns
/// query/key/value maps (n x d) and an output map (d x n); head outputs are summed.
struct Attention {
    struct Head {
        Parameter query, key, value, output;
    };
    std::vector<Head> heads;

    Attention() = default;
    Attention(const std::string& name, Eigen::Index n, int num_heads, Rng& rng);

    /// `mask` is additive with shape (queries x keys); -inf blocks a position.
    Var operator()(Graph& g, Var queries, Var keys, const Matrix* mask) const;
    void collect(std::vector<Parameter*>& out);
};

/// Inverted-dropout keep mask scaled by 1/(1-rate); all ones when rate is 0.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

struct AdamConfig {
    double learning_rate{1e-3};
    double beta1{0.9};
    double beta2{0.999};
    double epsilon{1e-8};
};

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig config);

    /// Applies one update from the accumulated gradients, then zeroes them.
    void step();
    void zero_grad();
    std::int64_t steps() const { return t_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    AdamConfig config_;
    std::int64_t t_{0};
};

/// True when every entry of every parameter is finite.
bool all_finite(const std::vector<Parameter*>& params);

}  // namespace ctrlstruct::nn
