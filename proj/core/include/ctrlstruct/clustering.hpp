#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "ctrlstruct/nn/autograd.hpp"

namespace ctrlstruct::clustering {

using nn::Matrix;
using nn::Vector;

struct KMeansConfig {
    /// 60 is the main-experiment setting; 50 was best on the persona-style corpus.
    int k{60};
    std::uint64_t seed{0};
    int max_iter{200};
    double tol{1e-6};
    /// Independent seedings; the run with the lowest final objective is kept.
    int restarts{10};

    void validate() const;
};

struct TopicClusters {
    int k{0};
    Matrix centers;                 // k x n, unit rows
    std::vector<int> assignments;   // one per input row
    double inertia{0.0};            // sum of cosine distances to the assigned centers
    std::vector<double> objective;  // after seeding, then after every iteration
    int iterations{0};
};

/// Rows scaled to unit norm; throws on a zero row.
Matrix normalize_rows(const Matrix& x);

/// Spherical K-Means with k-means++ seeding on cosine distance, best of
/// `restarts` runs (earliest on ties). Deterministic in (embeddings, config). Empty clusters take the point
/// farthest from its own center; assignment ties go to the lowest cluster id.
TopicClusters spherical_kmeans(const Matrix& embeddings, const KMeansConfig& config);

/// Cosine-nearest center, lowest id on ties. Throws on a zero vector.
int assign(const Vector& h, const Matrix& centers);
inline int assign(const Vector& h, const TopicClusters& clusters) { return assign(h, clusters.centers); }

/// Sum of (1 - cos) between unit rows and their assigned centers.
double cosine_objective(const Matrix& unit_rows, const std::vector<int>& labels, const Matrix& centers);

/// Sentinel returned when an index is unbounded (zero within scatter or coincident centroids).
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// [tr(B)/(k-1)] / [tr(W)/(u-k)] on unit-normalized rows, k = number of occupied labels.
double calinski_harabasz(const Matrix& embeddings, const std::vector<int>& labels);

/// Mean over clusters of max_{j != i} (s_i + s_j) / d_ij on unit-normalized rows.
double davies_bouldin(const Matrix& embeddings, const std::vector<int>& labels);

}  // namespace ctrlstruct::clustering
