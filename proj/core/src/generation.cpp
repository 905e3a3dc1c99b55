#include "ctrlstruct/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "ctrlstruct/checkpoint.hpp"
#include "ctrlstruct/error.hpp"
#include "ctrlstruct/hash.hpp"

namespace ctrlstruct::generation {

using corpus::Vocab;
using nlohmann::json;

std::string_view to_string(TeacherTopic t) {
    return t == TeacherTopic::PolicyPredicted ? "policy_predicted" : "ground_truth";
}

TeacherTopic teacher_topic_from_string(std::string_view s) {
    if (s == "policy_predicted") return TeacherTopic::PolicyPredicted;
    if (s == "ground_truth") return TeacherTopic::GroundTruth;
    throw ConfigError("unknown teacher_topic '" + std::string(s) + "'");
}

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::Greedy: return "greedy";
        case Strategy::Beam: return "beam";
        case Strategy::TopK: return "top_k";
        case Strategy::TopP: return "top_p";
    }
    return "greedy";
}

Strategy strategy_from_string(std::string_view s) {
    if (s == "greedy") return Strategy::Greedy;
    if (s == "beam") return Strategy::Beam;
    if (s == "top_k") return Strategy::TopK;
    if (s == "top_p") return Strategy::TopP;
    throw ConfigError("unknown decoding strategy '" + std::string(s) + "'");
}

void DecodeConfig::validate() const {
    if (beam_width < 1) throw ConfigError("decode.beam_width must be >= 1");
    if (top_k < 1) throw ConfigError("decode.top_k must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("decode.top_p must be in (0,1]");
    if (!(temperature > 0.0)) throw ConfigError("decode.temperature must be > 0");
    if (max_length < 1) throw ConfigError("decode.max_length must be >= 1");
}

json DecodeConfig::to_json() const {
    return json{{"strategy", to_string(strategy)}, {"beam_width", beam_width}, {"top_k", top_k},
                {"top_p", top_p},                  {"temperature", temperature}, {"max_length", max_length}};
}

DecodeConfig DecodeConfig::from_json(const json& j) {
    DecodeConfig c;
    c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    c.beam_width = j.at("beam_width").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.top_p = j.at("top_p").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.max_length = j.at("max_length").get<int>();
    c.validate();
    return c;
}

void GenerationConfig::validate() const {
    if (dim < 2) throw ConfigError("generation.dim must be >= 2");
    if (blocks < 1) throw ConfigError("generation.blocks must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("generation.heads must divide generation.dim");
    if (lambda2 < 0.0) throw ConfigError("generation.lambda2 must be >= 0");
    if (context_turns < 1) throw ConfigError("generation.context_turns must be >= 1");
    if (max_context_tokens < 1) throw ConfigError("generation.max_context_tokens must be >= 1");
    if (max_response_length < 2) throw ConfigError("generation.max_response_length must be >= 2");
    if (epochs < 0) throw ConfigError("generation.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("generation.batch_size must be >= 1");
    decode.validate();
    if (decode.max_length > max_response_length) {
        throw ConfigError("generation.decode.max_length exceeds generation.max_response_length");
    }
}

json GenerationConfig::to_json() const {
    return json{{"dim", dim},
                {"blocks", blocks},
                {"heads", heads},
                {"tied_embeddings", tied_embeddings},
                {"lambda2", lambda2},
                {"context_turns", context_turns},
                {"max_context_tokens", max_context_tokens},
                {"max_response_length", max_response_length},
                {"teacher_topic", to_string(teacher_topic)},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", optimizer.learning_rate},
                {"decode", decode.to_json()},
                {"seed", seed}};
}

GenerationConfig GenerationConfig::from_json(const json& j) {
    GenerationConfig c;
    c.dim = j.at("dim").get<int>();
    c.blocks = j.at("blocks").get<int>();
    c.heads = j.at("heads").get<int>();
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
    c.lambda2 = j.at("lambda2").get<double>();
    c.context_turns = j.at("context_turns").get<int>();
    c.max_context_tokens = j.at("max_context_tokens").get<int>();
    c.max_response_length = j.at("max_response_length").get<int>();
    c.teacher_topic = teacher_topic_from_string(j.at("teacher_topic").get<std::string>());
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.optimizer.learning_rate = j.at("learning_rate").get<double>();
    c.decode = DecodeConfig::from_json(j.at("decode"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

namespace {

encoder::EncoderConfig context_config(const GenerationConfig& c) {
    encoder::EncoderConfig e;
    e.dim = c.dim;
    e.use_attention = true;
    e.dropout_rate = 0.0;
    e.seed = derive_seed(c.seed, "context");
    return e;
}

}  // namespace

GeneratorModel::GeneratorModel(const GenerationConfig& config, int vocab_size)
    : context(context_config(config), vocab_size), config_(config), vocab_size_(vocab_size) {
    config_.validate();
    nn::Rng rng(derive_seed(config_.seed, "decoder"));
    const Eigen::Index n = config_.dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(n));
    embedding = nn::Parameter("decoder.embedding", nn::uniform(vocab_size, n, bound, rng));
    position = nn::Parameter("decoder.position", nn::uniform(config_.max_response_length, n, bound, rng));
    for (int b = 0; b < config_.blocks; ++b) {
        const std::string p = "decoder.block" + std::to_string(b);
        Block block;
        block.self_attention = nn::Attention(p + ".self", n, config_.heads, rng);
        block.cross_attention = nn::Attention(p + ".cross", n, config_.heads, rng);
        block.ffn_in = nn::Linear(p + ".ffn_in", n, 2 * n, rng);
        block.ffn_out = nn::Linear(p + ".ffn_out", 2 * n, n, rng);
        blocks.push_back(std::move(block));
    }
    if (config_.tied_embeddings) {
        tied_bias = nn::Parameter("decoder.tied_bias", Matrix::Zero(1, vocab_size));
    } else {
        output = nn::Linear("decoder.output", n, vocab_size, rng);
    }
}

std::vector<nn::Parameter*> GeneratorModel::parameters() {
    std::vector<nn::Parameter*> out{&context.embedding};
    context.attention.collect(out);
    out.push_back(&embedding);
    out.push_back(&position);
    for (auto& b : blocks) {
        b.self_attention.collect(out);
        b.cross_attention.collect(out);
        b.ffn_in.collect(out);
        b.ffn_out.collect(out);
    }
    if (config_.tied_embeddings) {
        out.push_back(&tied_bias);
    } else {
        output.collect(out);
    }
    return out;
}

nn::Var encode_context(nn::Graph& g, std::span<const int> context, const GeneratorModel& model) {
    return encoder::encode_tokens(g, context, model.context);
}

Matrix encode_context(std::span<const int> context, const GeneratorModel& model) {
    nn::Graph g;
    return encode_context(g, context, model).value();
}

DecoderPass decoder_forward(nn::Graph& g, nn::Var context_states, std::span<const int> inputs,
                            const GeneratorModel& model) {
    const auto L = static_cast<Eigen::Index>(inputs.size());
    if (L == 0) throw Error("decoder: empty prefix");
    if (inputs[0] != Vocab::kBos) throw Error("decoder: prefix must start with BOS");
    if (L > model.config().max_response_length) {
        throw Error("decoder: prefix length " + std::to_string(L) + " exceeds max_response_length " +
                    std::to_string(model.config().max_response_length));
    }
    for (int id : inputs)
        if (id < 0 || id >= model.vocab_size()) throw Error("decoder: token id " + std::to_string(id) + " out of range");

    std::vector<int> positions(static_cast<std::size_t>(L));
    std::iota(positions.begin(), positions.end(), 0);
    Matrix causal = Matrix::Zero(L, L);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = i + 1; j < L; ++j) causal(i, j) = -std::numeric_limits<double>::infinity();

    nn::Var x = nn::add(nn::gather_rows(g.param(model.embedding), inputs),
                        nn::gather_rows(g.param(model.position), positions));
    for (const auto& b : model.blocks) {
        x = nn::add(x, b.self_attention(g, x, x, &causal));
        x = nn::add(x, b.cross_attention(g, x, context_states, nullptr));
        x = nn::add(x, b.ffn_out(g, nn::tanh(b.ffn_in(g, x))));
    }
    DecoderPass pass;
    pass.hidden = x;
    if (model.config().tied_embeddings) {
        pass.logits = nn::add_row(nn::matmul(x, nn::transpose(g.param(model.embedding))), g.param(model.tied_bias));
    } else {
        pass.logits = model.output(g, x);
    }
    return pass;
}

Matrix decoder_distributions(const Matrix& context_states, std::span<const int> prefix, const GeneratorModel& model) {
    nn::Graph g;
    DecoderPass pass = decoder_forward(g, g.constant(context_states), prefix, model);
    return nn::softmax_rows(pass.logits).value();
}

Vector decoder_step(const Matrix& context_states, std::span<const int> prefix, const GeneratorModel& model) {
    const Matrix all = decoder_distributions(context_states, prefix, model);
    return all.row(all.rows() - 1).transpose();
}

namespace {

Vector log_softmax(const Vector& v) {
    const double m = v.maxCoeff();
    const double lse = m + std::log((v.array() - m).exp().sum());
    return (v.array() - lse).matrix();
}

}  // namespace

double kl_control_loss(const Vector& h_gen, const Vector& c_target) {
    if (h_gen.size() != c_target.size()) throw Error("kl_control_loss: dimension mismatch");
    const Vector lp = log_softmax(h_gen);
    const Vector lq = log_softmax(c_target);
    return (lp.array().exp() * (lp - lq).array()).sum();
}

nn::Var kl_control_loss(nn::Var h_gen, const Vector& c_target) {
    if (h_gen.rows() != 1 || h_gen.cols() != c_target.size()) throw Error("kl_control_loss: dimension mismatch");
    nn::Graph& g = *h_gen.graph();
    nn::Var p = nn::softmax_rows(h_gen);
    nn::Var lp = nn::log_softmax_rows(h_gen);
    nn::Var lq = g.constant(log_softmax(c_target).transpose());
    return nn::sum(nn::mul(p, nn::sub(lp, lq)));
}

std::vector<int> build_context(const corpus::Conversation& conv, int turn, int turns, int max_tokens) {
    std::vector<int> out;
    const int first = std::max(0, turn - turns);
    for (int t = first; t < turn; ++t) {
        const auto& u = conv.utterances[static_cast<std::size_t>(t)];
        out.push_back(u.speaker == corpus::Speaker::A ? Vocab::kSpeakerA : Vocab::kSpeakerB);
        out.insert(out.end(), u.tokens.begin(), u.tokens.end());
    }
    if (static_cast<int>(out.size()) > max_tokens) out.erase(out.begin(), out.end() - max_tokens);
    return out;
}

std::vector<GenExample> make_examples(const corpus::Corpus& corpus, const GenerationConfig& config) {
    std::vector<GenExample> out;
    for (std::size_t c = 0; c < corpus.conversations.size(); ++c) {
        const auto& conv = corpus.conversations[c];
        for (std::size_t t = 1; t < conv.utterances.size(); ++t) {
            GenExample ex;
            ex.context = build_context(conv, static_cast<int>(t), config.context_turns, config.max_context_tokens);
            const auto& tokens = conv.utterances[t].tokens;
            const std::size_t keep = std::min(tokens.size(), static_cast<std::size_t>(config.max_response_length - 1));
            ex.response.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
            ex.response.push_back(Vocab::kEos);
            ex.conversation = static_cast<int>(c);
            ex.turn = static_cast<int>(t);
            out.push_back(std::move(ex));
        }
    }
    return out;
}

void assign_targets(std::vector<GenExample>& examples, const corpus::Corpus& corpus, const TopicControl& control,
                    TeacherTopic teacher) {
    if (!control.encoder || !control.clusters) throw MissingArtifactError("clusters", "cluster");
    if (teacher == TeacherTopic::PolicyPredicted && !control.policy) throw MissingArtifactError("policy", "train-policy");
    for (auto& ex : examples) {
        const auto& conv = corpus.conversations.at(static_cast<std::size_t>(ex.conversation));
        if (teacher == TeacherTopic::PolicyPredicted) {
            const auto& prev = conv.utterances.at(static_cast<std::size_t>(ex.turn - 1));
            const Vector h = encoder::encode(prev.tokens, *control.encoder);
            Eigen::Index best = 0;
            structure::policy_distribution(h, *control.policy, control.clusters->centers).maxCoeff(&best);
            ex.target_cluster = static_cast<int>(best);
        } else {
            const auto& ref = conv.utterances.at(static_cast<std::size_t>(ex.turn));
            ex.target_cluster = clustering::assign(encoder::encode(ref.tokens, *control.encoder), *control.clusters);
        }
    }
}

namespace {

std::vector<int> teacher_inputs(const std::vector<int>& response) {
    if (response.empty() || response.back() != Vocab::kEos) throw Error("response must end with EOS");
    std::vector<int> in{Vocab::kBos};
    in.insert(in.end(), response.begin(), response.end() - 1);
    return in;
}

}  // namespace

nn::Var gen_loss(nn::Graph& g, const GenExample& example, const GeneratorModel& model, const Matrix* centers,
                 double lambda2, GenLossBreakdown* breakdown) {
    for (int id : example.response)
        if (id < 0 || id >= model.vocab_size()) throw Error("response token id " + std::to_string(id) + " out of range");
    const std::vector<int> inputs = teacher_inputs(example.response);
    nn::Var ctx = encode_context(g, example.context, model);
    DecoderPass pass = decoder_forward(g, ctx, inputs, model);
    nn::Var nll = nn::scale(nn::pick_sum(nn::log_softmax_rows(pass.logits), example.response), -1.0);

    const bool have_target = centers != nullptr && example.target_cluster >= 0;
    if (lambda2 > 0.0 && !have_target) throw MissingArtifactError("topic targets", "train-policy");
    if (have_target && example.target_cluster >= centers->rows()) throw Error("target cluster out of range");

    GenLossBreakdown parts;
    parts.nll = nll.scalar();
    nn::Var total = nll;
    if (have_target) {
        const Vector c = centers->row(example.target_cluster).transpose();
        const auto L = pass.hidden.rows();
        if (lambda2 > 0.0) {
            nn::Var h_gen = nn::weighted_row_sum(pass.hidden, nn::RowVector::Constant(L, 1.0 / static_cast<double>(L)));
            nn::Var kl = kl_control_loss(h_gen, c);
            parts.kl = kl.scalar();
            total = nn::add(nll, nn::scale(kl, lambda2));
        } else {
            // Diagnostic only: kept off the tape so the loss stays exactly the NLL.
            const Vector h_gen = pass.hidden.value().colwise().mean().transpose();
            parts.kl = kl_control_loss(h_gen, c);
        }
    }
    parts.total = total.scalar();
    if (breakdown) *breakdown = parts;
    return total;
}

GenLossBreakdown gen_loss(const GenExample& example, const GeneratorModel& model, const Matrix* centers,
                          double lambda2) {
    nn::Graph g;
    GenLossBreakdown parts;
    gen_loss(g, example, model, centers, lambda2, &parts);
    return parts;
}

double nll_loss(const GenExample& example, const GeneratorModel& model) {
    return gen_loss(example, model, nullptr, 0.0).nll;
}

void train_generator(GeneratorModel& model, const std::vector<GenExample>& examples, const Matrix* centers,
                     const GenerationConfig& config, GenHistory* history) {
    config.validate();
    if (examples.empty()) throw ConfigError("train_generator: no training pairs");
    nn::Adam opt(model.parameters(), config.optimizer);
    std::mt19937_64 order_rng(derive_seed(config.seed, "order"));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    GenHistory local;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double nll_sum = 0.0, kl_sum = 0.0;
        std::size_t batch = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                nn::Graph g;
                GenLossBreakdown parts;
                nn::Var loss = gen_loss(g, examples[order[i]], model, centers, config.lambda2, &parts);
                if (!std::isfinite(parts.total)) {
                    throw NumericalError("generator loss became non-finite at epoch " + std::to_string(epoch + 1) +
                                         ", batch " + std::to_string(batch + 1));
                }
                g.backward(loss, Matrix::Constant(1, 1, inv_b));
                nll_sum += parts.nll;
                kl_sum += parts.kl;
            }
            opt.step();
            ++local.steps;
        }
        local.nll.push_back(nll_sum / static_cast<double>(examples.size()));
        local.kl.push_back(kl_sum / static_cast<double>(examples.size()));
    }
    if (!nn::all_finite(model.parameters())) throw NumericalError("generator parameters became non-finite");
    if (history) *history = std::move(local);
}

GeneratorModel train_generator(const std::vector<GenExample>& examples, int vocab_size, const Matrix* centers,
                               const GenerationConfig& config, GenHistory* history) {
    GeneratorModel model(config, vocab_size);
    train_generator(model, examples, centers, config, history);
    return model;
}

namespace {

std::vector<int> by_probability(const Vector& probs) {
    std::vector<int> order(static_cast<std::size_t>(probs.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(a) > probs(b); });
    return order;
}

Vector keep_and_normalize(const Vector& probs, const std::vector<int>& keep) {
    Vector out = Vector::Zero(probs.size());
    for (int i : keep) out(i) = probs(i);
    const double s = out.sum();
    if (!(s > 0.0)) throw NumericalError("no probability mass left after filtering");
    return out / s;
}

}  // namespace

Vector filter_top_k(const Vector& probs, int k) {
    if (k < 1) throw ConfigError("top_k must be >= 1");
    auto order = by_probability(probs);
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(k)));
    return keep_and_normalize(probs, order);
}

Vector filter_top_p(const Vector& probs, double p) {
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p must be in (0,1]");
    const auto order = by_probability(probs);
    std::vector<int> keep;
    double mass = 0.0;
    for (int i : order) {
        keep.push_back(i);
        mass += probs(i);
        if (mass >= p) break;
    }
    return keep_and_normalize(probs, keep);
}

Vector apply_temperature(const Vector& probs, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (temperature == 1.0) return probs;
    Vector out = probs.array().pow(1.0 / temperature).matrix();
    return out / out.sum();
}

std::vector<int> beam_search(const StepFn& step, int width, int max_length, int bos, int eos) {
    if (width < 1) throw ConfigError("beam width must be >= 1");
    struct Hyp {
        std::vector<int> seq;
        double score;
        bool done;
    };
    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.seq < b.seq;
    };
    std::vector<Hyp> beams{{{bos}, 0.0, false}};
    for (int t = 0; t < max_length; ++t) {
        std::vector<Hyp> cand;
        bool expanded = false;
        for (const auto& h : beams) {
            if (h.done) {
                cand.push_back(h);
                continue;
            }
            expanded = true;
            const Vector probs = step(h.seq);
            for (Eigen::Index v = 0; v < probs.size(); ++v) {
                if (!(probs(v) > 0.0)) continue;
                Hyp n{h.seq, h.score + std::log(probs(v)), static_cast<int>(v) == eos};
                n.seq.push_back(static_cast<int>(v));
                cand.push_back(std::move(n));
            }
        }
        if (!expanded) break;
        std::sort(cand.begin(), cand.end(), better);
        if (static_cast<int>(cand.size()) > width) cand.resize(static_cast<std::size_t>(width));
        beams = std::move(cand);
    }
    const Hyp& best = *std::min_element(beams.begin(), beams.end(), better);
    return {best.seq.begin() + 1, best.seq.end()};
}

namespace {

Vector allowed_only(Vector probs) {
    for (int id : {Vocab::kPad, Vocab::kUnk, Vocab::kBos, Vocab::kSpeakerA, Vocab::kSpeakerB})
        if (id < probs.size()) probs(id) = 0.0;
    const double s = probs.sum();
    if (!(s > 0.0)) throw NumericalError("decoder assigns no mass to emittable tokens");
    return probs / s;
}

int sample(const Vector& probs, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng) * probs.sum();
    double acc = 0.0;
    int last = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (probs(i) <= 0.0) continue;
        acc += probs(i);
        last = static_cast<int>(i);
        if (r < acc) return last;
    }
    return last;
}

}  // namespace

std::vector<int> decode(std::span<const int> context, const GeneratorModel& model, const DecodeConfig& config,
                        std::uint64_t seed) {
    config.validate();
    if (config.max_length > model.config().max_response_length) {
        throw ConfigError("decode.max_length exceeds the model's max_response_length");
    }
    const Matrix ctx = encode_context(context, model);
    const StepFn step = [&](const std::vector<int>& prefix) {
        return allowed_only(decoder_step(ctx, prefix, model));
    };

    std::vector<int> out;
    if (config.strategy == Strategy::Beam) {
        out = beam_search(step, config.beam_width, config.max_length, Vocab::kBos, Vocab::kEos);
    } else {
        std::mt19937_64 rng(seed);
        std::vector<int> prefix{Vocab::kBos};
        for (int t = 0; t < config.max_length; ++t) {
            const Vector probs = step(prefix);
            int next = 0;
            switch (config.strategy) {
                case Strategy::Greedy: probs.maxCoeff(&next); break;
                case Strategy::TopK: next = sample(filter_top_k(apply_temperature(probs, config.temperature), config.top_k), rng); break;
                case Strategy::TopP: next = sample(filter_top_p(apply_temperature(probs, config.temperature), config.top_p), rng); break;
                case Strategy::Beam: break;
            }
            prefix.push_back(next);
            if (next == Vocab::kEos) break;
        }
        out.assign(prefix.begin() + 1, prefix.end());
    }
    if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
    return out;
}

void save_generator(const GeneratorModel& model, const std::string& vocab_hash, const std::filesystem::path& path) {
    checkpoint::Envelope env;
    env.kind = "generator";
    env.config = model.config().to_json();
    env.config["vocab_size"] = model.vocab_size();
    env.vocab_hash = vocab_hash;
    env.tensors = checkpoint::tensors_to_json(const_cast<GeneratorModel&>(model).parameters());
    checkpoint::write(path, env);
}

GeneratorModel load_generator(const std::filesystem::path& path, const std::string& expected_vocab_hash) {
    auto env = checkpoint::read(path, "generator", expected_vocab_hash);
    const int vocab_size = env.config.at("vocab_size").get<int>();
    json cfg = env.config;
    cfg.erase("vocab_size");
    GeneratorModel model(GenerationConfig::from_json(cfg), vocab_size);
    checkpoint::tensors_from_json(env.tensors, model.parameters());
    return model;
}

}  // namespace ctrlstruct::generation
