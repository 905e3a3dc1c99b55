#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/nn/layers.hpp"

namespace ctrlstruct::structure {

using nn::Matrix;
using nn::Vector;

/// Expert step: in state h_t the expert took action c_{t+1}, the center of
/// the next utterance's cluster.
struct TrajectoryPair {
    Vector state;
    Vector action;
    int state_cluster{0};
    int action_cluster{0};
    int conversation{0};
    int turn{0};
};

struct TrajectorySet {
    std::vector<TrajectoryPair> pairs;
    std::size_t size() const { return pairs.size(); }
};

/// `embeddings` and `labels` hold one row/entry per utterance in corpus order.
TrajectorySet build_trajectories(const corpus::Corpus& corpus, const Matrix& embeddings,
                                 const std::vector<int>& labels, const Matrix& centers);

/// Encodes every utterance in eval mode and assigns it to the nearest center.
TrajectorySet build_trajectories(const corpus::Corpus& corpus, const encoder::EncoderModel& encoder,
                                 const clustering::TopicClusters& clusters);

struct PolicyConfig {
    int hidden{128};
    int epochs{200};
    std::size_t batch_size{64};
    nn::AdamConfig optimizer{};
    /// Fixed isotropic variance of the Gaussian policy.
    double sigma2{1.0};
    bool train_critic{true};
    std::uint64_t seed{0};

    void validate() const;
    nlohmann::json to_json() const;
    static PolicyConfig from_json(const nlohmann::json& j);
};

/// Gaussian policy N(mu(h), sigma2 I). The actor computes mu; the critic is a
/// diagnostic value head that never feeds the actor's objective.
class Policy {
public:
    Policy(const PolicyConfig& config, int dim);

    Vector mean_action(const Vector& state) const;
    double value(const Vector& state) const;

    const PolicyConfig& config() const { return config_; }
    int dim() const { return dim_; }
    double sigma2() const { return config_.sigma2; }

    std::vector<nn::Parameter*> actor_parameters();
    std::vector<nn::Parameter*> critic_parameters();

    nn::Mlp actor;   // n -> hidden -> hidden -> n
    nn::Mlp critic;  // n -> hidden -> hidden -> 1

private:
    PolicyConfig config_;
    int dim_;
};

struct PolicyReport {
    std::vector<double> actor_mse;   // per epoch, mean over pairs of |c - mu(h)|^2
    std::vector<double> critic_mse;  // per epoch
    double final_mse{0.0};
    std::int64_t steps{0};
};

/// Behavioral cloning by mean-squared-error regression of actions on states.
Policy train_policy(const TrajectorySet& trajectories, const PolicyConfig& config, PolicyReport* report = nullptr);

/// Mean over pairs of |c - mu(h)|^2.
double policy_mse(const Policy& policy, const TrajectorySet& trajectories);

/// q_j proportional to exp(-|c_j - mu(h)|^2 / (2 sigma2)).
Vector policy_distribution(const Vector& state, const Policy& policy, const Matrix& centers);

/// Center with the highest cosine similarity to mu(h), lowest id on ties;
/// falls back to argmax of policy_distribution when mu(h) is the zero vector.
int predict_next_cluster(const Vector& state, const Policy& policy, const Matrix& centers);

struct VertexMeta {
    int cluster{0};
    std::size_t size{0};
    std::vector<std::string> samples;
    bool uniform_fallback{false};  // row had no outgoing evidence
};

struct StructureGraph {
    Matrix transitions;  // k x k, row-stochastic
    std::vector<VertexMeta> vertices;
    std::string provenance;  // "policy" or "empirical"

    int k() const { return static_cast<int>(transitions.rows()); }
    nlohmann::json to_json() const;
    static StructureGraph from_json(const nlohmann::json& j);
};

/// Row i = mean policy distribution over the states of cluster i that have a successor.
StructureGraph build_graph(const TrajectorySet& trajectories, const Policy& policy, const Matrix& centers);

/// Row i = successor-label frequencies after label i within conversations.
StructureGraph empirical_transitions(const std::vector<std::vector<int>>& label_sequences, int k,
                                     bool add_one_smoothing = false);

/// Fills vertex sizes and up to `max_samples` sample texts per cluster.
void annotate_vertices(StructureGraph& graph, const corpus::Corpus& corpus, const std::vector<int>& labels,
                       std::size_t max_samples = 3);

enum class ExportFormat { Dot, Json };

/// DOT keeps the top_m outgoing edges per vertex with 2-decimal labels; JSON dumps everything.
std::string export_graph(const StructureGraph& graph, ExportFormat format, int top_m = 3);

void save_policy(const Policy& policy, const std::string& vocab_hash, const std::filesystem::path& path);
Policy load_policy(const std::filesystem::path& path, const std::string& expected_vocab_hash);

}  // namespace ctrlstruct::structure
