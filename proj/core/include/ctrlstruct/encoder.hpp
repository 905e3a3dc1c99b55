#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/nn/autograd.hpp"
#include "ctrlstruct/nn/layers.hpp"

namespace ctrlstruct::encoder {

using nn::Matrix;
using nn::Vector;

struct EncoderConfig {
    int dim{64};
    bool use_attention{true};
    double dropout_rate{0.1};
    /// Zero the second projection map so the head starts as the identity.
    bool identity_projection{false};
    std::uint64_t seed{0};

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
    void validate() const;
};

/// Token embeddings -> optional bidirectional self-attention block (residual)
/// -> masked mean-pool -> residual projection head h + W2 tanh(W1 h + b1) + b2.
class EncoderModel {
public:
    EncoderModel(const EncoderConfig& config, int vocab_size);

    const EncoderConfig& config() const { return config_; }
    int vocab_size() const { return vocab_size_; }
    int dim() const { return config_.dim; }

    std::vector<nn::Parameter*> parameters();
    std::vector<const nn::Parameter*> parameters() const;

    nn::Parameter embedding;  // V x n
    nn::Attention attention;  // single head, empty when attention is disabled
    nn::Linear proj_hidden;   // n -> n
    nn::Linear proj_out;      // n -> n

private:
    EncoderConfig config_;
    int vocab_size_;
};

enum class Mode { Eval, Train };

struct EncodeOptions {
    Mode mode{Mode::Eval};
    /// Seeds the dropout masks in Train mode; the same seed gives the same masks.
    std::uint64_t dropout_seed{0};
};

/// Per-token states (m x n) after the embedding, dropout and attention block,
/// before pooling. PAD positions are excluded as attention keys.
nn::Var encode_tokens(nn::Graph& g, std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts = {});

/// Records one forward pass on `g`; returns the 1 x n representation.
nn::Var encode(nn::Graph& g, std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts = {});

/// Forward pass only.
Vector encode(std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts = {});

/// Eval-mode encodings, one row per token sequence.
Matrix encode_all(const std::vector<std::vector<int>>& sequences, const EncoderModel& model);

/// Several forward passes sharing one tape, then one backward sweep.
class EncoderTape {
public:
    explicit EncoderTape(const EncoderModel& model) : model_(&model) {}

    /// Returns the row index of the new output.
    int add(std::span<const int> tokens, EncodeOptions opts);
    /// Outputs stacked as rows.
    Matrix outputs() const;
    /// Accumulates d(loss)/d(params) into the model's gradient buffers,
    /// given upstream gradients on the stacked outputs.
    void backward(const Matrix& upstream);
    std::size_t size() const { return outputs_.size(); }

private:
    const EncoderModel* model_;
    nn::Graph graph_;
    std::vector<nn::Var> outputs_;
    bool consumed_{false};
};

using ParamGrads = std::map<std::string, Matrix>;

/// Exact parameter gradients of sum(upstream .* h) over the given inputs.
/// The model's gradient buffers are reset before and after.
ParamGrads encode_gradients(const std::vector<std::vector<int>>& sequences,
                            const std::vector<EncodeOptions>& options, const EncoderModel& model,
                            const Matrix& upstream);

void save_checkpoint(const EncoderModel& model, const std::string& vocab_hash, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path, const std::string& expected_vocab_hash);

}  // namespace ctrlstruct::encoder
