#include "ctrlstruct/structure.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ctrlstruct/checkpoint.hpp"
#include "ctrlstruct/error.hpp"
#include "ctrlstruct/hash.hpp"

namespace ctrlstruct::structure {

using nlohmann::json;

TrajectorySet build_trajectories(const corpus::Corpus& corpus, const Matrix& embeddings,
                                 const std::vector<int>& labels, const Matrix& centers) {
    if (static_cast<std::size_t>(embeddings.rows()) != corpus.utterance_count() ||
        labels.size() != corpus.utterance_count()) {
        throw Error("build_trajectories: embeddings/labels do not cover the corpus");
    }
    TrajectorySet set;
    std::size_t row = 0;
    for (std::size_t c = 0; c < corpus.conversations.size(); ++c) {
        const auto& conv = corpus.conversations[c];
        if (conv.utterances.size() < 2) spdlog::warn("conversation '{}' has no transitions", conv.id);
        for (std::size_t t = 0; t + 1 < conv.utterances.size(); ++t) {
            const int next = labels[row + t + 1];
            if (next < 0 || next >= centers.rows()) throw Error("build_trajectories: label out of range");
            TrajectoryPair p;
            p.state = embeddings.row(static_cast<Eigen::Index>(row + t)).transpose();
            p.action = centers.row(next).transpose();
            p.state_cluster = labels[row + t];
            p.action_cluster = next;
            p.conversation = static_cast<int>(c);
            p.turn = static_cast<int>(t);
            set.pairs.push_back(std::move(p));
        }
        row += conv.utterances.size();
    }
    return set;
}

TrajectorySet build_trajectories(const corpus::Corpus& corpus, const encoder::EncoderModel& encoder,
                                 const clustering::TopicClusters& clusters) {
    std::vector<std::vector<int>> seqs;
    for (const auto& conv : corpus.conversations)
        for (const auto& u : conv.utterances) seqs.push_back(u.tokens);
    const Matrix emb = encoder::encode_all(seqs, encoder);
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < emb.rows(); ++i) labels.push_back(clustering::assign(emb.row(i).transpose(), clusters));
    return build_trajectories(corpus, emb, labels, clusters.centers);
}

// ---------------------------------------------------------------------------

void PolicyConfig::validate() const {
    if (hidden < 1) throw ConfigError("policy.hidden must be >= 1");
    if (epochs < 0) throw ConfigError("policy.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("policy.batch_size must be >= 1");
    if (!(sigma2 > 0.0)) throw ConfigError("policy.sigma2 must be > 0");
}

json PolicyConfig::to_json() const {
    return json{{"hidden", hidden},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", optimizer.learning_rate},
                {"sigma2", sigma2},
                {"train_critic", train_critic},
                {"seed", seed}};
}

PolicyConfig PolicyConfig::from_json(const json& j) {
    PolicyConfig c;
    c.hidden = j.at("hidden").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.optimizer.learning_rate = j.at("learning_rate").get<double>();
    c.sigma2 = j.at("sigma2").get<double>();
    c.train_critic = j.at("train_critic").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

Policy::Policy(const PolicyConfig& config, int dim) : config_(config), dim_(dim) {
    config_.validate();
    nn::Rng actor_rng(derive_seed(config_.seed, "actor"));
    nn::Rng critic_rng(derive_seed(config_.seed, "critic"));
    actor = nn::Mlp("actor", {dim, config_.hidden, config_.hidden, dim}, actor_rng);
    critic = nn::Mlp("critic", {dim, config_.hidden, config_.hidden, 1}, critic_rng);
}

Vector Policy::mean_action(const Vector& state) const {
    nn::Graph g;
    return actor(g, g.constant(state.transpose())).value().row(0).transpose();
}

double Policy::value(const Vector& state) const {
    nn::Graph g;
    return critic(g, g.constant(state.transpose())).scalar();
}

std::vector<nn::Parameter*> Policy::actor_parameters() {
    std::vector<nn::Parameter*> out;
    actor.collect(out);
    return out;
}

std::vector<nn::Parameter*> Policy::critic_parameters() {
    std::vector<nn::Parameter*> out;
    critic.collect(out);
    return out;
}

namespace {

Matrix stack_rows(const TrajectorySet& t, const std::vector<std::size_t>& idx, bool actions) {
    const auto& first = actions ? t.pairs[idx[0]].action : t.pairs[idx[0]].state;
    Matrix m(static_cast<Eigen::Index>(idx.size()), first.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        m.row(static_cast<Eigen::Index>(i)) = (actions ? t.pairs[idx[i]].action : t.pairs[idx[i]].state).transpose();
    }
    return m;
}

}  // namespace

Policy train_policy(const TrajectorySet& trajectories, const PolicyConfig& config, PolicyReport* report) {
    config.validate();
    if (trajectories.size() == 0) throw ConfigError("train_policy: no trajectory pairs");
    const int dim = static_cast<int>(trajectories.pairs[0].state.size());
    Policy policy(config, dim);
    nn::Adam actor_opt(policy.actor_parameters(), config.optimizer);
    nn::Adam critic_opt(policy.critic_parameters(), config.optimizer);
    std::mt19937_64 order_rng(derive_seed(config.seed, "batches"));
    std::vector<std::size_t> order(trajectories.size());
    std::iota(order.begin(), order.end(), 0);
    PolicyReport local;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double actor_sum = 0.0, critic_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const Matrix states = stack_rows(trajectories, idx, false);
            const Matrix actions = stack_rows(trajectories, idx, true);
            const double inv_b = 1.0 / static_cast<double>(idx.size());

            nn::Graph g;
            nn::Var diff = nn::sub(g.constant(actions), policy.actor(g, g.constant(states)));
            nn::Var loss = nn::scale(nn::sum(nn::mul(diff, diff)), inv_b);
            if (!std::isfinite(loss.scalar())) {
                throw NumericalError("policy loss became non-finite at epoch " + std::to_string(epoch + 1));
            }
            const Vector per_pair = diff.value().rowwise().squaredNorm();
            g.backward(loss);
            actor_opt.step();
            ++local.steps;
            actor_sum += loss.scalar() * static_cast<double>(idx.size());

            if (config.train_critic) {
                nn::Graph cg;
                nn::Var err = nn::sub(policy.critic(cg, cg.constant(states)), cg.constant(per_pair));
                nn::Var closs = nn::scale(nn::sum(nn::mul(err, err)), inv_b);
                cg.backward(closs);
                critic_opt.step();
                critic_sum += closs.scalar() * static_cast<double>(idx.size());
            }
        }
        local.actor_mse.push_back(actor_sum / static_cast<double>(order.size()));
        local.critic_mse.push_back(critic_sum / static_cast<double>(order.size()));
    }
    if (!nn::all_finite(policy.actor_parameters())) throw NumericalError("policy parameters became non-finite");
    local.final_mse = policy_mse(policy, trajectories);
    if (report) *report = std::move(local);
    return policy;
}

double policy_mse(const Policy& policy, const TrajectorySet& trajectories) {
    if (trajectories.size() == 0) return 0.0;
    std::vector<std::size_t> all(trajectories.size());
    std::iota(all.begin(), all.end(), 0);
    const Matrix states = stack_rows(trajectories, all, false);
    const Matrix actions = stack_rows(trajectories, all, true);
    nn::Graph g;
    const Matrix mu = policy.actor(g, g.constant(states)).value();
    return (actions - mu).rowwise().squaredNorm().mean();
}

Vector policy_distribution(const Vector& state, const Policy& policy, const Matrix& centers) {
    const Vector mu = policy.mean_action(state);
    if (mu.size() != centers.cols()) throw Error("policy_distribution: dimension mismatch");
    Vector logits(centers.rows());
    for (Eigen::Index j = 0; j < centers.rows(); ++j)
        logits(j) = -(centers.row(j).transpose() - mu).squaredNorm() / (2.0 * policy.sigma2());
    logits.array() -= logits.maxCoeff();
    Vector q = logits.array().exp().matrix();
    return q / q.sum();
}

int predict_next_cluster(const Vector& state, const Policy& policy, const Matrix& centers) {
    const Vector mu = policy.mean_action(state);
    if (mu.norm() == 0.0) {
        Eigen::Index best = 0;
        policy_distribution(state, policy, centers).maxCoeff(&best);
        return static_cast<int>(best);
    }
    return clustering::assign(mu, centers);
}

// ---------------------------------------------------------------------------

json StructureGraph::to_json() const {
    json matrix = json::array();
    for (Eigen::Index i = 0; i < transitions.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(transitions.cols()));
        for (Eigen::Index j = 0; j < transitions.cols(); ++j) row[static_cast<std::size_t>(j)] = transitions(i, j);
        matrix.push_back(row);
    }
    json meta = json::array();
    for (const auto& v : vertices) {
        meta.push_back({{"cluster", v.cluster}, {"size", v.size}, {"samples", v.samples},
                        {"uniform_fallback", v.uniform_fallback}});
    }
    return json{{"k", k()}, {"matrix", matrix}, {"vertex_meta", meta}, {"provenance", provenance}};
}

StructureGraph StructureGraph::from_json(const json& j) {
    StructureGraph g;
    const int k = j.at("k").get<int>();
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != k) throw ParseError("graph matrix row count != k");
    g.transitions.resize(k, k);
    for (int i = 0; i < k; ++i) {
        if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != k) throw ParseError("graph matrix is not k x k");
        for (int c = 0; c < k; ++c) g.transitions(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    }
    for (const auto& m : j.at("vertex_meta")) {
        VertexMeta v;
        v.cluster = m.at("cluster").get<int>();
        v.size = m.at("size").get<std::size_t>();
        v.samples = m.at("samples").get<std::vector<std::string>>();
        v.uniform_fallback = m.at("uniform_fallback").get<bool>();
        g.vertices.push_back(std::move(v));
    }
    g.provenance = j.at("provenance").get<std::string>();
    return g;
}

namespace {

std::vector<VertexMeta> default_vertices(int k) {
    std::vector<VertexMeta> v(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) v[static_cast<std::size_t>(i)].cluster = i;
    return v;
}

}  // namespace

StructureGraph build_graph(const TrajectorySet& trajectories, const Policy& policy, const Matrix& centers) {
    const auto k = centers.rows();
    StructureGraph g;
    g.provenance = "policy";
    g.transitions = Matrix::Zero(k, k);
    g.vertices = default_vertices(static_cast<int>(k));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (const auto& p : trajectories.pairs) {
        g.transitions.row(p.state_cluster) += policy_distribution(p.state, policy, centers).transpose();
        ++counts[static_cast<std::size_t>(p.state_cluster)];
    }
    for (Eigen::Index i = 0; i < k; ++i) {
        auto& meta = g.vertices[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(i)] == 0) {
            g.transitions.row(i).setConstant(1.0 / static_cast<double>(k));
            meta.uniform_fallback = true;
        } else {
            // Renormalize instead of dividing by the count so rounding cannot drift the row sum.
            g.transitions.row(i) /= g.transitions.row(i).sum();
        }
    }
    return g;
}

StructureGraph empirical_transitions(const std::vector<std::vector<int>>& label_sequences, int k,
                                     bool add_one_smoothing) {
    if (k < 1) throw ConfigError("empirical_transitions: k must be >= 1");
    StructureGraph g;
    g.provenance = "empirical";
    g.transitions = Matrix::Constant(k, k, add_one_smoothing ? 1.0 : 0.0);
    g.vertices = default_vertices(k);
    for (const auto& seq : label_sequences) {
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            if (seq[t] < 0 || seq[t] >= k || seq[t + 1] < 0 || seq[t + 1] >= k) {
                throw Error("empirical_transitions: label out of range");
            }
            g.transitions(seq[t], seq[t + 1]) += 1.0;
        }
    }
    for (int i = 0; i < k; ++i) {
        const double total = g.transitions.row(i).sum();
        if (total == 0.0) {
            g.transitions.row(i).setConstant(1.0 / k);
            g.vertices[static_cast<std::size_t>(i)].uniform_fallback = true;
        } else {
            g.transitions.row(i) /= total;
        }
    }
    return g;
}

void annotate_vertices(StructureGraph& graph, const corpus::Corpus& corpus, const std::vector<int>& labels,
                       std::size_t max_samples) {
    std::size_t row = 0;
    for (auto& v : graph.vertices) {
        v.size = 0;
        v.samples.clear();
    }
    for (const auto& conv : corpus.conversations) {
        for (const auto& u : conv.utterances) {
            if (row >= labels.size()) throw Error("annotate_vertices: labels do not cover the corpus");
            const int l = labels[row++];
            if (l < 0 || l >= graph.k()) continue;
            auto& v = graph.vertices[static_cast<std::size_t>(l)];
            ++v.size;
            if (v.samples.size() < max_samples) v.samples.push_back(u.text);
        }
    }
}

namespace {

std::string dot_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out.push_back(c);
    }
    return out;
}

}  // namespace

std::string export_graph(const StructureGraph& graph, ExportFormat format, int top_m) {
    if (format == ExportFormat::Json) return graph.to_json().dump(2) + "\n";
    if (top_m < 1) throw ConfigError("export_graph: top_m must be >= 1");
    std::ostringstream out;
    out << "digraph dialogue_structure {\n";
    out << "  node [shape=box];\n";
    const int k = graph.k();
    for (int i = 0; i < k; ++i) {
        std::string label = "topic " + std::to_string(i);
        if (static_cast<std::size_t>(i) < graph.vertices.size()) {
            const auto& v = graph.vertices[static_cast<std::size_t>(i)];
            for (std::size_t s = 0; s < std::min<std::size_t>(3, v.samples.size()); ++s) label += "\n" + v.samples[s];
        }
        out << "  c" << i << " [label=\"" << dot_escape(label) << "\"];\n";
    }
    for (int i = 0; i < k; ++i) {
        std::vector<int> order(static_cast<std::size_t>(k));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return graph.transitions(i, a) > graph.transitions(i, b); });
        for (int e = 0; e < std::min(top_m, k); ++e) {
            const int j = order[static_cast<std::size_t>(e)];
            const double p = graph.transitions(i, j);
            if (p <= 0.0) break;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f", p);
            out << "  c" << i << " -> c" << j << " [label=\"" << buf << "\"];\n";
        }
    }
    out << "}\n";
    return out.str();
}

void save_policy(const Policy& policy, const std::string& vocab_hash, const std::filesystem::path& path) {
    auto& mut = const_cast<Policy&>(policy);
    auto params = mut.actor_parameters();
    auto critic = mut.critic_parameters();
    params.insert(params.end(), critic.begin(), critic.end());
    checkpoint::Envelope env;
    env.kind = "policy";
    env.config = policy.config().to_json();
    env.config["dim"] = policy.dim();
    env.vocab_hash = vocab_hash;
    env.tensors = checkpoint::tensors_to_json(params);
    checkpoint::write(path, env);
}

Policy load_policy(const std::filesystem::path& path, const std::string& expected_vocab_hash) {
    auto env = checkpoint::read(path, "policy", expected_vocab_hash);
    Policy policy(PolicyConfig::from_json(env.config), env.config.at("dim").get<int>());
    auto params = policy.actor_parameters();
    auto critic = policy.critic_parameters();
    params.insert(params.end(), critic.begin(), critic.end());
    checkpoint::tensors_from_json(env.tensors, params);
    return policy;
}

}  // namespace ctrlstruct::structure
