#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/nn/autograd.hpp"

namespace ctrlstruct::synthetic {

using nn::Matrix;

/// Topic-templated dialogues driven by a random Markov chain over topics.
///
/// Topic i owns the words "t<i>w<m>" and a set of fixed templates built from
/// them. Every utterance is one template of its topic followed by a bridge
/// word "t<i>b<j>" announcing the topic j of the next turn, so an utterance
/// carries enough information to predict its successor's topic. Optional
/// filler words dilute the topic signal in raw token space.
struct SyntheticConfig {
    int topics{4};
    int conversations{400};
    int min_turns{6};
    int max_turns{12};
    int words_per_topic{4};
    int templates_per_topic{5};
    int template_length{3};
    /// Each chain row is stickiness * e_i + (1 - stickiness) * r, with
    /// r = floor * uniform + (1 - floor) * Dirichlet(1).
    double stickiness{0.7};
    double chain_floor{0.3};
    /// Shared filler words "f<m>" inserted at random positions, the same
    /// pool for every topic. 0 disables them.
    int fillers{8};
    int filler_vocab{16};
    std::uint64_t seed{0};

    void validate() const;
};

struct SyntheticCorpus {
    corpus::Corpus corpus;
    Matrix chain;                          // topics x topics, row-stochastic
    std::vector<std::vector<int>> labels;  // ground-truth topic per utterance
};

SyntheticCorpus make_synthetic(const SyntheticConfig& config);

/// Writes `path` (JSONL) plus `<stem>.chain.json` and `<stem>.labels.json` next to it.
void write_synthetic(const SyntheticCorpus& data, const SyntheticConfig& config, const std::filesystem::path& path);

std::filesystem::path chain_path(const std::filesystem::path& corpus_path);
std::filesystem::path labels_path(const std::filesystem::path& corpus_path);

/// Reads a chain file written by write_synthetic.
Matrix read_chain(const std::filesystem::path& path);
std::vector<std::vector<int>> read_labels(const std::filesystem::path& path);

/// Half the L1 distance between two probability rows.
double total_variation(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q);

}  // namespace ctrlstruct::synthetic
