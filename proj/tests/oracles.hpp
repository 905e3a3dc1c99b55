#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. Written from the definitions with plain loops.

#include <cmath>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/contrastive.hpp"

namespace oracles {

using ctrlstruct::nn::Matrix;
using ctrlstruct::nn::Vector;
using ctrlstruct::contrastive::WeakMode;

// Brute-force evaluation straight from the definitions, one term at a time.
inline double sim(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        dot += a(i, c) * b(j, c);
        na += a(i, c) * a(i, c);
        nb += b(j, c) * b(j, c);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// -log(coef * e^{s(a,p)/tau} / sum_{j != a} e^{s(a,j)/tau}) over the rows of `set`.
inline double term(const Matrix& set, Eigen::Index a, Eigen::Index p, double tau, double coef = 1.0) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < set.rows(); ++j)
        if (j != a) denom += std::exp(sim(set, a, set, j) / tau);
    return -std::log(coef * std::exp(sim(set, a, set, p) / tau) / denom);
}

inline double oracle_ac(const Matrix& f, const Matrix& s, double tau) {
    const Eigen::Index n = f.rows();
    Matrix all(2 * n, f.cols());
    all << f, s;
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) total += term(all, i, n + i, tau) + term(all, n + i, i, tau);
    return total / (2.0 * static_cast<double>(n));
}

inline double oracle_sr(const Matrix& seq, const std::vector<bool>& boundary, double tau) {
    double total = 0.0;
    int pairs = 0;
    for (Eigen::Index i = 0; i + 1 < seq.rows(); ++i) {
        if (boundary[static_cast<std::size_t>(i)]) continue;
        total += term(seq, i, i + 1, tau);
        ++pairs;
    }
    return total / pairs;
}

inline double oracle_wr(const Matrix& seq, const std::vector<bool>& boundary, double tau, double lambda1, WeakMode mode) {
    double total = 0.0;
    int pairs = 0;
    for (Eigen::Index i = 1; i < seq.rows(); ++i) {
        if (boundary[static_cast<std::size_t>(i - 1)]) continue;
        total += mode == WeakMode::Literal ? term(seq, i, i - 1, tau, lambda1) : lambda1 * term(seq, i, i - 1, tau);
        ++pairs;
    }
    return total / pairs;
}

inline double choose2(double n) { return n * (n - 1.0) / 2.0; }

inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<std::pair<int, int>, double> table;
    std::map<int, double> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        table[{a[i], b[i]}] += 1;
        ra[a[i]] += 1;
        rb[b[i]] += 1;
    }
    double index = 0, sa = 0, sb = 0;
    for (const auto& [k, v] : table) index += choose2(v);
    for (const auto& [k, v] : ra) sa += choose2(v);
    for (const auto& [k, v] : rb) sb += choose2(v);
    const double expected = sa * sb / choose2(static_cast<double>(a.size()));
    const double max_index = 0.5 * (sa + sb);
    return (index - expected) / (max_index - expected);
}

inline Matrix unit(const Matrix& x) { return x.rowwise().normalized(); }

// Calinski-Harabasz written out from its definition on unit rows.
inline double chi_oracle(const Matrix& x_raw, const std::vector<int>& labels, int k) {
    const Matrix x = unit(x_raw);
    const Eigen::Index u = x.rows();
    const Vector mean = x.colwise().mean().transpose();
    double b = 0, w = 0;
    for (int c = 0; c < k; ++c) {
        Vector cm = Vector::Zero(x.cols());
        int count = 0;
        for (Eigen::Index i = 0; i < u; ++i)
            if (labels[static_cast<std::size_t>(i)] == c) {
                cm += x.row(i).transpose();
                ++count;
            }
        cm /= count;
        b += count * (cm - mean).squaredNorm();
        for (Eigen::Index i = 0; i < u; ++i)
            if (labels[static_cast<std::size_t>(i)] == c) w += (x.row(i).transpose() - cm).squaredNorm();
    }
    return (b / (k - 1)) / (w / static_cast<double>(u - k));
}

inline double dbi_oracle(const Matrix& x_raw, const std::vector<int>& labels, int k) {
    const Matrix x = unit(x_raw);
    std::vector<Vector> cm(static_cast<std::size_t>(k), Vector::Zero(x.cols()));
    std::vector<double> s(static_cast<std::size_t>(k), 0.0);
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        cm[c] += x.row(i).transpose();
        ++count[c];
    }
    for (int c = 0; c < k; ++c) cm[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        s[c] += (x.row(i).transpose() - cm[c]).norm();
    }
    for (int c = 0; c < k; ++c) s[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
    double total = 0;
    for (int i = 0; i < k; ++i) {
        double worst = 0;
        for (int j = 0; j < k; ++j) {
            if (i == j) continue;
            const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
            worst = std::max(worst, (s[a] + s[b]) / (cm[a] - cm[b]).norm());
        }
        total += worst;
    }
    return total / k;
}

// Three unit directions at least 60 degrees apart with small angular noise.
inline std::pair<Matrix, std::vector<int>> three_blobs(double noise, std::uint64_t seed) {
    Matrix centers(3, 3);
    centers << 1, 0, 0, 0, 1, 0, 0, 0, 1;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, noise);
    Matrix x(150, 3);
    std::vector<int> labels(150);
    for (int i = 0; i < 150; ++i) {
        labels[static_cast<std::size_t>(i)] = i / 50;
        for (int c = 0; c < 3; ++c) x(i, c) = centers(i / 50, c) + n(rng);
    }
    return {x, labels};
}

}  // namespace oracles
