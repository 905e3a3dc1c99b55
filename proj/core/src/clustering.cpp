#include "ctrlstruct/clustering.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>
#include <random>

#include "ctrlstruct/error.hpp"
#include "ctrlstruct/hash.hpp"

namespace ctrlstruct::clustering {

void KMeansConfig::validate() const {
    if (k < 2) throw ConfigError("clustering.k must be >= 2");
    if (max_iter < 1) throw ConfigError("clustering.max_iter must be >= 1");
    if (tol < 0.0) throw ConfigError("clustering.tol must be >= 0");
    if (restarts < 1) throw ConfigError("clustering.restarts must be >= 1");
}

Matrix normalize_rows(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double n = x.row(i).norm();
        if (n == 0.0) throw Error("row " + std::to_string(i) + " has zero norm");
        out.row(i) = x.row(i) / n;
    }
    return out;
}

namespace {

std::vector<int> assign_all(const Matrix& unit, const Matrix& centers) {
    const Matrix sims = unit * centers.transpose();
    std::vector<int> labels(static_cast<std::size_t>(unit.rows()));
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < sims.cols(); ++j)
            if (sims(i, j) > sims(i, best)) best = j;
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return labels;
}

Matrix seed_centers(const Matrix& unit, int k, std::mt19937_64& rng) {
    const Eigen::Index u = unit.rows();
    Matrix centers(k, unit.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, u - 1);
    centers.row(0) = unit.row(first(rng));
    Vector nearest = Vector::Constant(u, -2.0);  // best cosine to any chosen center
    std::uniform_real_distribution<double> unit_draw(0.0, 1.0);
    for (int c = 1; c < k; ++c) {
        nearest = nearest.cwiseMax(unit * centers.row(c - 1).transpose());
        Vector weight = (1.0 - nearest.array()).max(0.0).square().matrix();
        const double total = weight.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double r = unit_draw(rng) * total;
            double acc = 0.0;
            pick = u - 1;
            for (Eigen::Index i = 0; i < u; ++i) {
                acc += weight(i);
                if (r < acc && weight(i) > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);
        }
        centers.row(c) = unit.row(pick);
    }
    return centers;
}

// Moves, for each empty cluster, the point farthest from its own center into it.
void reseed_empty(const Matrix& unit, std::vector<int>& labels, Matrix& centers) {
    const int k = static_cast<int>(centers.rows());
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
    for (int e = 0; e < k; ++e) {
        if (sizes[static_cast<std::size_t>(e)] > 0) continue;
        Eigen::Index far = -1;
        double far_dist = -1.0;
        for (Eigen::Index i = 0; i < unit.rows(); ++i) {
            const int l = labels[static_cast<std::size_t>(i)];
            if (sizes[static_cast<std::size_t>(l)] < 2) continue;
            const double d = 1.0 - unit.row(i).dot(centers.row(l));
            if (d > far_dist) {
                far_dist = d;
                far = i;
            }
        }
        if (far < 0) throw Error("spherical_kmeans: cannot fill an empty cluster");
        --sizes[static_cast<std::size_t>(labels[static_cast<std::size_t>(far)])];
        labels[static_cast<std::size_t>(far)] = e;
        sizes[static_cast<std::size_t>(e)] = 1;
        centers.row(e) = unit.row(far);
    }
}

void update_centers(const Matrix& unit, const std::vector<int>& labels, Matrix& centers) {
    Matrix sums = Matrix::Zero(centers.rows(), centers.cols());
    for (Eigen::Index i = 0; i < unit.rows(); ++i) sums.row(labels[static_cast<std::size_t>(i)]) += unit.row(i);
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
        const double n = sums.row(c).norm();
        // A zero mean leaves every center equally good; keep the current one.
        if (n > 0.0) centers.row(c) = sums.row(c) / n;
    }
}

}  // namespace

double cosine_objective(const Matrix& unit_rows, const std::vector<int>& labels, const Matrix& centers) {
    double obj = 0.0;
    for (Eigen::Index i = 0; i < unit_rows.rows(); ++i)
        obj += 1.0 - unit_rows.row(i).dot(centers.row(labels[static_cast<std::size_t>(i)]));
    return obj;
}

namespace {

TopicClusters single_run(const Matrix& unit, const KMeansConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);

    TopicClusters out;
    out.k = config.k;
    out.centers = seed_centers(unit, config.k, rng);
    std::vector<int> labels = assign_all(unit, out.centers);
    double prev = cosine_objective(unit, labels, out.centers);
    out.objective.push_back(prev);

    for (int it = 0; it < config.max_iter; ++it) {
        reseed_empty(unit, labels, out.centers);
        update_centers(unit, labels, out.centers);
        std::vector<int> next = assign_all(unit, out.centers);
        const double obj = cosine_objective(unit, next, out.centers);
        out.objective.push_back(obj);
        out.iterations = it + 1;
        const bool unchanged = next == labels;
        labels = std::move(next);
        if (unchanged || prev - obj < config.tol) break;
        prev = obj;
    }
    // The final assignment may have left a cluster empty (tol or max_iter exit).
    std::vector<int> sizes(static_cast<std::size_t>(config.k), 0);
    for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
    if (std::find(sizes.begin(), sizes.end(), 0) != sizes.end()) {
        reseed_empty(unit, labels, out.centers);
        update_centers(unit, labels, out.centers);
    }
    out.assignments = std::move(labels);
    out.inertia = cosine_objective(unit, out.assignments, out.centers);
    return out;
}

}  // namespace

TopicClusters spherical_kmeans(const Matrix& embeddings, const KMeansConfig& config) {
    config.validate();
    if (embeddings.rows() < config.k) {
        throw ConfigError("spherical_kmeans: " + std::to_string(embeddings.rows()) + " points < k=" +
                          std::to_string(config.k));
    }
    const Matrix unit = normalize_rows(embeddings);
    TopicClusters best = single_run(unit, config, config.seed);
    for (int r = 1; r < config.restarts; ++r) {
        TopicClusters run = single_run(unit, config, derive_seed(config.seed, "restart" + std::to_string(r)));
        if (run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

int assign(const Vector& h, const Matrix& centers) {
    const double n = h.norm();
    if (n == 0.0) throw Error("assign: zero vector");
    if (h.size() != centers.cols()) throw Error("assign: dimension mismatch");
    const Vector sims = centers * (h / n);
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < sims.size(); ++j)
        if (sims(j) > sims(best)) best = j;
    return static_cast<int>(best);
}

namespace {

struct Groups {
    std::vector<int> ids;                    // occupied labels, ascending
    std::map<int, std::vector<Eigen::Index>> members;
    Matrix centroids;                        // one row per occupied label
};

Groups group(const Matrix& unit, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != unit.rows()) throw Error("one label per row required");
    Groups g;
    for (std::size_t i = 0; i < labels.size(); ++i) g.members[labels[i]].push_back(static_cast<Eigen::Index>(i));
    g.centroids = Matrix::Zero(static_cast<Eigen::Index>(g.members.size()), unit.cols());
    Eigen::Index r = 0;
    for (auto& [id, rows] : g.members) {
        g.ids.push_back(id);
        for (auto i : rows) g.centroids.row(r) += unit.row(i);
        g.centroids.row(r) /= static_cast<double>(rows.size());
        ++r;
    }
    return g;
}

}  // namespace

double calinski_harabasz(const Matrix& embeddings, const std::vector<int>& labels) {
    const Matrix unit = normalize_rows(embeddings);
    const Groups g = group(unit, labels);
    const auto k = static_cast<double>(g.ids.size());
    const auto u = static_cast<double>(unit.rows());
    if (g.ids.size() < 2) throw Error("calinski_harabasz: need at least 2 clusters");
    if (u <= k) throw Error("calinski_harabasz: need more points than clusters");
    const nn::RowVector mean = unit.colwise().mean();
    double between = 0.0, within = 0.0;
    Eigen::Index r = 0;
    for (const auto& [id, rows] : g.members) {
        between += static_cast<double>(rows.size()) * (g.centroids.row(r) - mean).squaredNorm();
        for (auto i : rows) within += (unit.row(i) - g.centroids.row(r)).squaredNorm();
        ++r;
    }
    if (within == 0.0) {
        spdlog::warn("calinski_harabasz: zero within-cluster dispersion; returning +inf");
        return kInfinity;
    }
    return (between / (k - 1.0)) / (within / (u - k));
}

double davies_bouldin(const Matrix& embeddings, const std::vector<int>& labels) {
    const Matrix unit = normalize_rows(embeddings);
    const Groups g = group(unit, labels);
    const auto k = static_cast<Eigen::Index>(g.ids.size());
    if (k < 2) throw Error("davies_bouldin: need at least 2 clusters");
    Vector scatter(k);
    Eigen::Index r = 0;
    for (const auto& [id, rows] : g.members) {
        double s = 0.0;
        for (auto i : rows) s += (unit.row(i) - g.centroids.row(r)).norm();
        scatter(r) = s / static_cast<double>(rows.size());
        ++r;
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
        double worst = 0.0;
        for (Eigen::Index j = 0; j < k; ++j) {
            if (i == j) continue;
            const double d = (g.centroids.row(i) - g.centroids.row(j)).norm();
            if (d == 0.0) {
                spdlog::warn("davies_bouldin: coincident centroids; returning +inf");
                return kInfinity;
            }
            worst = std::max(worst, (scatter(i) + scatter(j)) / d);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

}  // namespace ctrlstruct::clustering
