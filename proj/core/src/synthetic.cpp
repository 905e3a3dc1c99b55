#include "ctrlstruct/synthetic.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::synthetic {

using nlohmann::json;

void SyntheticConfig::validate() const {
    if (topics < 2) throw ConfigError("synthetic: topics must be >= 2");
    if (conversations < 1) throw ConfigError("synthetic: conversations must be >= 1");
    if (min_turns < 2 || max_turns < min_turns) throw ConfigError("synthetic: need 2 <= min_turns <= max_turns");
    if (words_per_topic < 1 || templates_per_topic < 1 || template_length < 1) {
        throw ConfigError("synthetic: template sizes must be >= 1");
    }
    if (chain_floor < 0.0 || chain_floor > 1.0) throw ConfigError("synthetic: chain_floor must be in [0,1]");
    if (stickiness < 0.0 || stickiness >= 1.0) throw ConfigError("synthetic: stickiness must be in [0,1)");
    if (fillers < 0 || filler_vocab < 1) throw ConfigError("synthetic: need fillers >= 0 and filler_vocab >= 1");
}

namespace {

std::string topic_word(int topic, int m) { return "t" + std::to_string(topic) + "w" + std::to_string(m); }
std::string bridge_word(int topic, int next) { return "t" + std::to_string(topic) + "b" + std::to_string(next); }

int draw(const Eigen::RowVectorXd& p, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (r < acc) return static_cast<int>(j);
    }
    return static_cast<int>(p.size() - 1);
}

std::string add_fillers(const std::string& text, const SyntheticConfig& config, std::mt19937_64& rng) {
    std::vector<std::string> words;
    std::istringstream in(text);
    for (std::string w; in >> w;) words.push_back(std::move(w));
    std::uniform_int_distribution<int> filler(0, config.filler_vocab - 1);
    for (int f = 0; f < config.fillers; ++f) {
        std::uniform_int_distribution<std::size_t> pos(0, words.size());
        const auto at = pos(rng);
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), "f" + std::to_string(filler(rng)));
    }
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

}  // namespace

SyntheticCorpus make_synthetic(const SyntheticConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const int k = config.topics;

    SyntheticCorpus out;
    out.chain.resize(k, k);
    std::gamma_distribution<double> gamma(1.0, 1.0);
    for (int i = 0; i < k; ++i) {
        Eigen::RowVectorXd row(k);
        for (int j = 0; j < k; ++j) row(j) = gamma(rng);
        row /= row.sum();
        out.chain.row(i) = (1.0 - config.stickiness) * (config.chain_floor / k + (1.0 - config.chain_floor) * row.array());
        out.chain(i, i) += config.stickiness;
        out.chain.row(i) /= out.chain.row(i).sum();
    }

    std::vector<std::string> templates;  // topic-major
    std::uniform_int_distribution<int> word(0, config.words_per_topic - 1);
    for (int i = 0; i < k; ++i) {
        for (int t = 0; t < config.templates_per_topic; ++t) {
            std::string text;
            for (int w = 0; w < config.template_length; ++w) {
                if (w) text.push_back(' ');
                text += topic_word(i, word(rng));
            }
            templates.push_back(std::move(text));
        }
    }

    std::uniform_int_distribution<int> turns(config.min_turns, config.max_turns);
    std::uniform_int_distribution<int> first_topic(0, k - 1);
    std::uniform_int_distribution<int> pick_template(0, config.templates_per_topic - 1);
    for (int c = 0; c < config.conversations; ++c) {
        corpus::Conversation conv;
        conv.id = "syn-" + std::to_string(c);
        const int m = turns(rng);
        std::vector<int> topics;
        int topic = first_topic(rng);
        for (int t = 0; t < m; ++t) {
            const int next = draw(out.chain.row(topic), rng);
            corpus::Utterance u;
            u.conv_id = conv.id;
            u.turn_index = t;
            u.speaker = t % 2 == 0 ? corpus::Speaker::A : corpus::Speaker::B;
            const auto& tmpl = templates[static_cast<std::size_t>(topic * config.templates_per_topic + pick_template(rng))];
            u.text = tmpl + " " + bridge_word(topic, next);
            if (config.fillers > 0) u.text = add_fillers(u.text, config, rng);
            conv.utterances.push_back(std::move(u));
            topics.push_back(topic);
            topic = next;
        }
        out.corpus.conversations.push_back(std::move(conv));
        out.labels.push_back(std::move(topics));
    }
    return out;
}

std::filesystem::path chain_path(const std::filesystem::path& corpus_path) {
    return corpus_path.parent_path() / (corpus_path.stem().string() + ".chain.json");
}

std::filesystem::path labels_path(const std::filesystem::path& corpus_path) {
    return corpus_path.parent_path() / (corpus_path.stem().string() + ".labels.json");
}

void write_synthetic(const SyntheticCorpus& data, const SyntheticConfig& config, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream out(path);
        if (!out) throw Error("cannot write " + path.string());
        corpus::write_jsonl(data.corpus, out);
    }
    json rows = json::array();
    for (Eigen::Index i = 0; i < data.chain.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(data.chain.cols()));
        for (Eigen::Index j = 0; j < data.chain.cols(); ++j) r[static_cast<std::size_t>(j)] = data.chain(i, j);
        rows.push_back(r);
    }
    json chain{{"k", config.topics},
               {"matrix", rows},
               {"generator",
                {{"conversations", config.conversations},
                 {"min_turns", config.min_turns},
                 {"max_turns", config.max_turns},
                 {"words_per_topic", config.words_per_topic},
                 {"templates_per_topic", config.templates_per_topic},
                 {"template_length", config.template_length},
                 {"stickiness", config.stickiness},
                 {"chain_floor", config.chain_floor},
                 {"fillers", config.fillers},
                 {"filler_vocab", config.filler_vocab},
                 {"seed", config.seed}}}};
    std::ofstream(chain_path(path)) << chain.dump(2) << '\n';
    std::ofstream(labels_path(path)) << json{{"labels", data.labels}}.dump() << '\n';
}

Matrix read_chain(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    const json j = json::parse(in);
    const auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.size()) throw ParseError("chain matrix is not square");
        for (std::size_t c = 0; c < rows.size(); ++c) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
    return m;
}

std::vector<std::vector<int>> read_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return json::parse(in).at("labels").get<std::vector<std::vector<int>>>();
}

double total_variation(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q) {
    if (p.size() != q.size()) throw Error("total_variation: size mismatch");
    return 0.5 * (p - q).cwiseAbs().sum();
}

}  // namespace ctrlstruct::synthetic
