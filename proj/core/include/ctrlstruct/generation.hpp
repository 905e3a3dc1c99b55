#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/nn/layers.hpp"
#include "ctrlstruct/structure.hpp"

namespace ctrlstruct::generation {

using nn::Matrix;
using nn::Vector;

enum class TeacherTopic { PolicyPredicted, GroundTruth };
std::string_view to_string(TeacherTopic t);
TeacherTopic teacher_topic_from_string(std::string_view s);

enum class Strategy { Greedy, Beam, TopK, TopP };
std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct DecodeConfig {
    Strategy strategy{Strategy::Greedy};
    int beam_width{4};
    int top_k{10};
    double top_p{0.9};
    double temperature{1.0};
    int max_length{24};

    void validate() const;
    nlohmann::json to_json() const;
    static DecodeConfig from_json(const nlohmann::json& j);
};

struct GenerationConfig {
    int dim{64};
    int blocks{2};
    int heads{2};
    bool tied_embeddings{false};
    /// Weight of the topic-control KL term; 0 disables control.
    double lambda2{1.2};
    int context_turns{4};
    int max_context_tokens{128};
    /// Longest response (EOS included) used for training and positions.
    int max_response_length{32};
    TeacherTopic teacher_topic{TeacherTopic::PolicyPredicted};
    int epochs{10};
    std::size_t batch_size{16};
    nn::AdamConfig optimizer{};
    DecodeConfig decode{};
    std::uint64_t seed{0};

    void validate() const;
    nlohmann::json to_json() const;
    static GenerationConfig from_json(const nlohmann::json& j);
};

/// Context encoder (the utterance encoder's token pipeline, per-token outputs
/// kept) plus a causal decoder with cross-attention.
class GeneratorModel {
public:
    struct Block {
        nn::Attention self_attention;
        nn::Attention cross_attention;
        nn::Linear ffn_in;   // n -> 2n
        nn::Linear ffn_out;  // 2n -> n
    };

    GeneratorModel(const GenerationConfig& config, int vocab_size);

    const GenerationConfig& config() const { return config_; }
    int vocab_size() const { return vocab_size_; }
    int dim() const { return config_.dim; }

    std::vector<nn::Parameter*> parameters();

    encoder::EncoderModel context;
    nn::Parameter embedding;  // V x n, decoder input table
    nn::Parameter position;   // max_response_length x n
    std::vector<Block> blocks;
    nn::Linear output;        // n -> V, weight unused when tied
    nn::Parameter tied_bias;  // 1 x V, used when tied

private:
    GenerationConfig config_;
    int vocab_size_;
};

/// Per-token context states (m x n).
nn::Var encode_context(nn::Graph& g, std::span<const int> context, const GeneratorModel& model);
Matrix encode_context(std::span<const int> context, const GeneratorModel& model);

struct DecoderPass {
    nn::Var hidden;  // L x n, last block output
    nn::Var logits;  // L x V
};

/// Teacher-forced decoder pass over `inputs` (starting with BOS).
DecoderPass decoder_forward(nn::Graph& g, nn::Var context_states, std::span<const int> inputs,
                            const GeneratorModel& model);

/// Next-token distribution after `prefix` (which starts with BOS).
Vector decoder_step(const Matrix& context_states, std::span<const int> prefix, const GeneratorModel& model);

/// Row t = next-token distribution after prefix[0..t].
Matrix decoder_distributions(const Matrix& context_states, std::span<const int> prefix, const GeneratorModel& model);

/// D_KL(softmax(h) || softmax(c)).
double kl_control_loss(const Vector& h_gen, const Vector& c_target);
nn::Var kl_control_loss(nn::Var h_gen, const Vector& c_target);

/// One context/response training pair.
struct GenExample {
    std::vector<int> context;   // speaker-tagged history, most recent tokens kept
    std::vector<int> response;  // target tokens ending with EOS
    int conversation{0};
    int turn{0};
    int target_cluster{-1};     // controlling cluster, -1 when unset
};

/// Speaker-tagged tokens of the `turns` utterances before `turn`, truncated
/// from the left to `max_tokens`.
std::vector<int> build_context(const corpus::Conversation& conv, int turn, int turns, int max_tokens);

/// One example per utterance after the first.
std::vector<GenExample> make_examples(const corpus::Corpus& corpus, const GenerationConfig& config);

/// Structure artifacts used to pick controlling clusters.
struct TopicControl {
    const encoder::EncoderModel* encoder{nullptr};
    const clustering::TopicClusters* clusters{nullptr};
    const structure::Policy* policy{nullptr};
};

/// Fills target_cluster: argmax of the policy distribution at the last context
/// utterance, or the reference's assigned cluster.
void assign_targets(std::vector<GenExample>& examples, const corpus::Corpus& corpus, const TopicControl& control,
                    TeacherTopic teacher);

struct GenLossBreakdown {
    double nll{0.0};
    double kl{0.0};
    double total{0.0};
};

/// Sum of token negative log-likelihoods under teacher forcing.
double nll_loss(const GenExample& example, const GeneratorModel& model);

/// l_NLL + lambda2 * KL(mean response hidden state, target center), recorded on `g`.
nn::Var gen_loss(nn::Graph& g, const GenExample& example, const GeneratorModel& model, const Matrix* centers,
                 double lambda2, GenLossBreakdown* breakdown = nullptr);
GenLossBreakdown gen_loss(const GenExample& example, const GeneratorModel& model, const Matrix* centers,
                          double lambda2);

struct GenHistory {
    std::vector<double> nll;  // mean per example, per epoch
    std::vector<double> kl;
    std::int64_t steps{0};
};

/// Adam on the mean gen_loss over mini-batches; examples are visited in a
/// seeded shuffled order.
GeneratorModel train_generator(const std::vector<GenExample>& examples, int vocab_size, const Matrix* centers,
                               const GenerationConfig& config, GenHistory* history = nullptr);

/// Continues training an existing model.
void train_generator(GeneratorModel& model, const std::vector<GenExample>& examples, const Matrix* centers,
                     const GenerationConfig& config, GenHistory* history = nullptr);

/// Keeps the k most probable entries (lowest id on ties) and renormalizes.
Vector filter_top_k(const Vector& probs, int k);
/// Keeps the smallest most-probable prefix with mass >= p and renormalizes.
Vector filter_top_p(const Vector& probs, double p);
/// probs^(1/temperature), renormalized.
Vector apply_temperature(const Vector& probs, double temperature);

using StepFn = std::function<Vector(const std::vector<int>& prefix)>;

/// Highest total log-probability sequence kept by a width-limited beam.
/// Returned tokens exclude BOS and include EOS when one was produced.
std::vector<int> beam_search(const StepFn& step, int width, int max_length, int bos, int eos);

/// Decodes a response (without BOS/EOS). Tokens PAD, BOS, UNK and the speaker
/// tags are never emitted.
std::vector<int> decode(std::span<const int> context, const GeneratorModel& model, const DecodeConfig& config,
                        std::uint64_t seed);

void save_generator(const GeneratorModel& model, const std::string& vocab_hash, const std::filesystem::path& path);
GeneratorModel load_generator(const std::filesystem::path& path, const std::string& expected_vocab_hash);

}  // namespace ctrlstruct::generation
