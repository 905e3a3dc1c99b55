#include "ctrlstruct/encoder.hpp"

#include <cmath>
#include <limits>

#include "ctrlstruct/checkpoint.hpp"
#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/error.hpp"

namespace ctrlstruct::encoder {

using nlohmann::json;

json EncoderConfig::to_json() const {
    return json{{"dim", dim},
                {"use_attention", use_attention},
                {"dropout_rate", dropout_rate},
                {"identity_projection", identity_projection},
                {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
    EncoderConfig c;
    c.dim = j.at("dim").get<int>();
    c.use_attention = j.at("use_attention").get<bool>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.identity_projection = j.at("identity_projection").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

void EncoderConfig::validate() const {
    if (dim < 2) throw ConfigError("encoder.dim must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("encoder.dropout_rate must be in [0,1)");
}

EncoderModel::EncoderModel(const EncoderConfig& config, int vocab_size) : config_(config), vocab_size_(vocab_size) {
    config_.validate();
    if (vocab_size < 1) throw ConfigError("vocabulary is empty");
    nn::Rng rng(config_.seed);
    const Eigen::Index n = config_.dim;
    embedding = nn::Parameter("embedding", nn::uniform(vocab_size, n, 1.0 / std::sqrt(static_cast<double>(n)), rng));
    if (config_.use_attention) attention = nn::Attention("attention", n, 1, rng);
    proj_hidden = nn::Linear("proj_hidden", n, n, rng);
    proj_out = nn::Linear("proj_out", n, n, rng);
    if (config_.identity_projection) {
        proj_out.weight.value.setZero();
        proj_out.bias.value.setZero();
    }
}

std::vector<nn::Parameter*> EncoderModel::parameters() {
    std::vector<nn::Parameter*> out{&embedding};
    attention.collect(out);
    proj_hidden.collect(out);
    proj_out.collect(out);
    return out;
}

std::vector<const nn::Parameter*> EncoderModel::parameters() const {
    auto mut = const_cast<EncoderModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

namespace {

struct TokenPass {
    nn::Var states;
    nn::RowVector pool;  // mean-pool weights over non-PAD positions
    nn::Rng rng;
    bool train;
};

TokenPass token_pass(nn::Graph& g, std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts) {
    if (tokens.empty()) throw Error("encode: empty token sequence");
    const auto m = static_cast<Eigen::Index>(tokens.size());
    const Eigen::Index n = model.dim();
    nn::RowVector pool = nn::RowVector::Zero(m);
    Matrix key_mask = Matrix::Zero(m, m);
    Eigen::Index live = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const int id = tokens[static_cast<std::size_t>(i)];
        if (id < 0 || id >= model.vocab_size()) throw Error("encode: token id " + std::to_string(id) + " out of range");
        if (id == corpus::Vocab::kPad) {
            key_mask.col(i).setConstant(-std::numeric_limits<double>::infinity());
        } else {
            pool(i) = 1.0;
            ++live;
        }
    }
    if (live == 0) throw Error("encode: sequence holds only padding");
    pool /= static_cast<double>(live);

    TokenPass pass{{}, std::move(pool), nn::Rng(opts.dropout_seed),
                   opts.mode == Mode::Train && model.config().dropout_rate > 0.0};
    nn::Var x = nn::gather_rows(g.param(model.embedding), tokens);
    if (pass.train) x = nn::mul(x, g.constant(nn::dropout_mask(m, n, model.config().dropout_rate, pass.rng)));
    if (model.config().use_attention) {
        x = nn::add(x, model.attention(g, x, x, &key_mask));
    }
    pass.states = x;
    return pass;
}

}  // namespace

nn::Var encode_tokens(nn::Graph& g, std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts) {
    return token_pass(g, tokens, model, opts).states;
}

nn::Var encode(nn::Graph& g, std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts) {
    TokenPass pass = token_pass(g, tokens, model, opts);
    const Eigen::Index n = model.dim();
    nn::Var pooled = nn::weighted_row_sum(pass.states, pass.pool);
    nn::Var hidden = nn::tanh(model.proj_hidden(g, pooled));
    if (pass.train) hidden = nn::mul(hidden, g.constant(nn::dropout_mask(1, n, model.config().dropout_rate, pass.rng)));
    return nn::add(pooled, model.proj_out(g, hidden));
}

Vector encode(std::span<const int> tokens, const EncoderModel& model, EncodeOptions opts) {
    nn::Graph g;
    return encode(g, tokens, model, opts).value().row(0).transpose();
}

Matrix encode_all(const std::vector<std::vector<int>>& sequences, const EncoderModel& model) {
    Matrix out(static_cast<Eigen::Index>(sequences.size()), model.dim());
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = encode(sequences[i], model).transpose();
    }
    return out;
}

int EncoderTape::add(std::span<const int> tokens, EncodeOptions opts) {
    if (consumed_) throw Error("EncoderTape: already consumed by backward");
    outputs_.push_back(encode(graph_, tokens, *model_, opts));
    return static_cast<int>(outputs_.size() - 1);
}

Matrix EncoderTape::outputs() const {
    Matrix out(static_cast<Eigen::Index>(outputs_.size()), model_->dim());
    for (std::size_t i = 0; i < outputs_.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = outputs_[i].value();
    return out;
}

void EncoderTape::backward(const Matrix& upstream) {
    if (consumed_) throw Error("EncoderTape: backward called twice");
    if (upstream.rows() != static_cast<Eigen::Index>(outputs_.size()) || upstream.cols() != model_->dim()) {
        throw Error("EncoderTape: upstream gradient does not match the recorded forward passes");
    }
    std::vector<std::pair<nn::Var, Matrix>> seeds;
    seeds.reserve(outputs_.size());
    for (std::size_t i = 0; i < outputs_.size(); ++i) {
        seeds.emplace_back(outputs_[i], upstream.row(static_cast<Eigen::Index>(i)));
    }
    graph_.backward(seeds);
    consumed_ = true;
}

ParamGrads encode_gradients(const std::vector<std::vector<int>>& sequences, const std::vector<EncodeOptions>& options,
                            const EncoderModel& model, const Matrix& upstream) {
    if (options.size() != sequences.size()) throw Error("encode_gradients: one option per sequence required");
    const auto params = model.parameters();
    for (auto* p : params) p->zero_grad();
    EncoderTape tape(model);
    for (std::size_t i = 0; i < sequences.size(); ++i) tape.add(sequences[i], options[i]);
    tape.backward(upstream);
    ParamGrads grads;
    for (auto* p : params) {
        grads[p->name] = p->grad;
        p->zero_grad();
    }
    return grads;
}

void save_checkpoint(const EncoderModel& model, const std::string& vocab_hash, const std::filesystem::path& path) {
    checkpoint::Envelope env;
    env.kind = "encoder";
    env.config = model.config().to_json();
    env.config["vocab_size"] = model.vocab_size();
    env.vocab_hash = vocab_hash;
    env.tensors = checkpoint::tensors_to_json(const_cast<EncoderModel&>(model).parameters());
    checkpoint::write(path, env);
}

EncoderModel load_checkpoint(const std::filesystem::path& path, const std::string& expected_vocab_hash) {
    auto env = checkpoint::read(path, "encoder", expected_vocab_hash);
    EncoderModel model(EncoderConfig::from_json(env.config), env.config.at("vocab_size").get<int>());
    checkpoint::tensors_from_json(env.tensors, model.parameters());
    return model;
}

}  // namespace ctrlstruct::encoder
