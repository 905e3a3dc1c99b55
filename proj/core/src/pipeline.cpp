#include "ctrlstruct/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "ctrlstruct/checkpoint.hpp"
#include "ctrlstruct/error.hpp"
#include "ctrlstruct/eval.hpp"
#include "ctrlstruct/hash.hpp"

namespace ctrlstruct::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Matrix;
using nn::Vector;

namespace {

struct StageName {
    Stage stage;
    const char* name;
};

constexpr StageName kStageNames[] = {
    {Stage::Ingest, "ingest"},
    {Stage::TrainEncoder, "train-encoder"},
    {Stage::Embed, "embed"},
    {Stage::Cluster, "cluster"},
    {Stage::TrainPolicy, "train-policy"},
    {Stage::BuildGraph, "build-graph"},
    {Stage::TrainGenerator, "train-generator"},
    {Stage::Generate, "generate"},
    {Stage::Evaluate, "evaluate"},
    {Stage::ExportGraph, "export-graph"},
    {Stage::All, "all"},
};

}  // namespace

std::string_view to_string(Stage s) {
    for (const auto& e : kStageNames)
        if (e.stage == s) return e.name;
    return "all";
}

Stage stage_from_string(std::string_view s) {
    for (const auto& e : kStageNames)
        if (s == e.name) return e.stage;
    throw ConfigError("unknown stage '" + std::string(s) + "'");
}

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> stages{Stage::Ingest,     Stage::TrainEncoder, Stage::Embed,
                                           Stage::Cluster,    Stage::TrainPolicy,  Stage::BuildGraph,
                                           Stage::TrainGenerator, Stage::Generate, Stage::Evaluate};
    return stages;
}

std::uint64_t stage_seed(std::uint64_t global, Stage stage) { return derive_seed(global, to_string(stage)); }

// ---------------------------------------------------------------------------
// Configuration

json default_config_json() {
    const encoder::EncoderConfig enc;
    const contrastive::ContrastiveConfig con;
    const clustering::KMeansConfig km;
    const structure::PolicyConfig pol;
    const generation::GenerationConfig gen;
    const CorpusSettings cs;
    json views = json::array();
    for (const auto& s : con.view_strategies) views.push_back({{"kind", corpus::to_string(s.kind)}, {"rate", s.rate}});
    json gen_json = gen.to_json();
    gen_json.erase("dim");
    gen_json.erase("seed");
    return json{
        {"seed", 0u},
        {"corpus",
         {{"path", ""},
          {"format", cs.format},
          {"test_fraction", cs.test_fraction},
          {"min_freq", cs.min_freq},
          {"max_tokens", cs.max_tokens},
          {"synonyms", ""}}},
        {"encoder",
         {{"dim", enc.dim},
          {"use_attention", enc.use_attention},
          {"dropout_rate", enc.dropout_rate},
          {"identity_projection", enc.identity_projection}}},
        {"contrastive",
         {{"temperature", con.temperature},
          {"lambda1", con.lambda1},
          {"lambda1_mode", contrastive::to_string(con.lambda1_mode)},
          {"epochs", con.epochs},
          {"batch_size", con.batch_size},
          {"learning_rate", con.optimizer.learning_rate},
          {"ablation", contrastive::to_string(con.ablation)},
          {"view_strategies", views}}},
        {"clustering", {{"k", km.k}, {"max_iter", km.max_iter}, {"tol", km.tol}, {"restarts", km.restarts}}},
        {"policy",
         {{"hidden", pol.hidden},
          {"epochs", pol.epochs},
          {"batch_size", pol.batch_size},
          {"learning_rate", pol.optimizer.learning_rate},
          {"sigma2", pol.sigma2},
          {"train_critic", pol.train_critic}}},
        {"graph", {{"top_m", 3}}},
        {"generation", gen_json},
        {"eval", {{"phi", eval::kDefaultPhi}}},
    };
}

namespace {

const char* type_name(const json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number_integer()) return "integer";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

void merge_strict(json& base, const json& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config key '" + (path.empty() ? "<root>" : path) + "' must be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        auto it = base.find(key);
        if (it == base.end()) throw ConfigError("unknown config key '" + here + "'");
        json& def = *it;
        bool ok = false;
        if (def.is_object()) {
            merge_strict(def, value, here);
            continue;
        }
        if (def.is_boolean()) ok = value.is_boolean();
        else if (def.is_number_unsigned()) ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
        else if (def.is_number_integer()) ok = value.is_number_integer();
        else if (def.is_number()) ok = value.is_number();
        else if (def.is_string()) ok = value.is_string();
        else if (def.is_array()) ok = value.is_array();
        if (!ok) {
            throw ConfigError("config key '" + here + "' expects " + type_name(def) + ", got " + type_name(value));
        }
        def = value;
    }
}

}  // namespace

RunConfig RunConfig::from_json(const json& user, const fs::path& base_dir) {
    json m = default_config_json();
    merge_strict(m, user, "");
    RunConfig c;
    try {
        c.seed = m.at("seed").get<std::uint64_t>();

        const json& cj = m.at("corpus");
        const auto corpus_path = cj.at("path").get<std::string>();
        c.corpus.path = corpus_path.empty() || fs::path(corpus_path).is_absolute() ? fs::path(corpus_path)
                                                                                   : (base_dir / corpus_path).lexically_normal();
        c.corpus.format = cj.at("format").get<std::string>();
        if (c.corpus.format != "jsonl" && c.corpus.format != "dailydialog") {
            throw ConfigError("corpus.format must be 'jsonl' or 'dailydialog'");
        }
        c.corpus.test_fraction = cj.at("test_fraction").get<double>();
        if (c.corpus.test_fraction < 0.0 || c.corpus.test_fraction >= 1.0) {
            throw ConfigError("corpus.test_fraction must be in [0,1)");
        }
        c.corpus.min_freq = cj.at("min_freq").get<int>();
        c.corpus.max_tokens = cj.at("max_tokens").get<int>();
        if (c.corpus.min_freq < 1) throw ConfigError("corpus.min_freq must be >= 1");
        if (c.corpus.max_tokens < 1) throw ConfigError("corpus.max_tokens must be >= 1");
        const auto syn = cj.at("synonyms").get<std::string>();
        c.corpus.synonyms = syn.empty() || fs::path(syn).is_absolute() ? fs::path(syn) : (base_dir / syn).lexically_normal();

        const json& ej = m.at("encoder");
        c.encoder.dim = ej.at("dim").get<int>();
        c.encoder.use_attention = ej.at("use_attention").get<bool>();
        c.encoder.dropout_rate = ej.at("dropout_rate").get<double>();
        c.encoder.identity_projection = ej.at("identity_projection").get<bool>();
        c.encoder.validate();

        const json& tj = m.at("contrastive");
        c.contrastive.temperature = tj.at("temperature").get<double>();
        c.contrastive.lambda1 = tj.at("lambda1").get<double>();
        c.contrastive.lambda1_mode = contrastive::weak_mode_from_string(tj.at("lambda1_mode").get<std::string>());
        c.contrastive.epochs = tj.at("epochs").get<int>();
        c.contrastive.batch_size = tj.at("batch_size").get<std::size_t>();
        c.contrastive.optimizer.learning_rate = tj.at("learning_rate").get<double>();
        c.contrastive.ablation = contrastive::ablation_from_string(tj.at("ablation").get<std::string>());
        c.contrastive.view_strategies.clear();
        for (const auto& v : tj.at("view_strategies")) {
            if (!v.is_object() || !v.contains("kind") || !v.contains("rate") || v.size() != 2) {
                throw ConfigError("contrastive.view_strategies entries must be {\"kind\", \"rate\"}");
            }
            c.contrastive.view_strategies.push_back(
                {corpus::augmentation_from_string(v.at("kind").get<std::string>()), v.at("rate").get<double>()});
        }
        c.contrastive.validate();

        const json& kj = m.at("clustering");
        c.clustering.k = kj.at("k").get<int>();
        c.clustering.max_iter = kj.at("max_iter").get<int>();
        c.clustering.tol = kj.at("tol").get<double>();
        c.clustering.restarts = kj.at("restarts").get<int>();
        c.clustering.validate();

        const json& pj = m.at("policy");
        c.policy.hidden = pj.at("hidden").get<int>();
        c.policy.epochs = pj.at("epochs").get<int>();
        c.policy.batch_size = pj.at("batch_size").get<std::size_t>();
        c.policy.optimizer.learning_rate = pj.at("learning_rate").get<double>();
        c.policy.sigma2 = pj.at("sigma2").get<double>();
        c.policy.train_critic = pj.at("train_critic").get<bool>();
        c.policy.validate();

        c.graph_top_m = m.at("graph").at("top_m").get<int>();
        if (c.graph_top_m < 1) throw ConfigError("graph.top_m must be >= 1");

        json gj = m.at("generation");
        gj["dim"] = c.encoder.dim;
        gj["seed"] = 0u;
        c.generation = generation::GenerationConfig::from_json(gj);

        c.phi = m.at("eval").at("phi").get<std::vector<double>>();
        if (c.phi.empty()) throw ConfigError("eval.phi must not be empty");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

json RunConfig::to_json() const {
    json j = default_config_json();
    j["seed"] = seed;
    j["corpus"] = {{"path", corpus.path.string()},      {"format", corpus.format},
                   {"test_fraction", corpus.test_fraction}, {"min_freq", corpus.min_freq},
                   {"max_tokens", corpus.max_tokens},    {"synonyms", corpus.synonyms.string()}};
    j["encoder"] = {{"dim", encoder.dim},
                    {"use_attention", encoder.use_attention},
                    {"dropout_rate", encoder.dropout_rate},
                    {"identity_projection", encoder.identity_projection}};
    json con = contrastive.to_json();
    for (const char* k : {"seed", "beta1", "beta2", "epsilon"}) con.erase(k);
    j["contrastive"] = con;
    j["clustering"] = {{"k", clustering.k},
                       {"max_iter", clustering.max_iter},
                       {"tol", clustering.tol},
                       {"restarts", clustering.restarts}};
    json pol = policy.to_json();
    pol.erase("seed");
    j["policy"] = pol;
    j["graph"] = {{"top_m", graph_top_m}};
    json gen = generation.to_json();
    gen.erase("dim");
    gen.erase("seed");
    j["generation"] = gen;
    j["eval"] = {{"phi", phi}};
    return j;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

fs::path default_run_dir(const fs::path& config_path) {
    const char* root = std::getenv("CTRLSTRUCT_RUN_ROOT");
    const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
    return base / config_path.stem();
}

// ---------------------------------------------------------------------------
// Artifact helpers

namespace {

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write " + path.string());
        out << text;
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j, int indent = 2) { write_text(path, j.dump(indent) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return json::parse(in);
}

json matrix_json(const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    return json{{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

Matrix matrix_from_json(const json& j) {
    const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || static_cast<Eigen::Index>(data.size()) != shape[0] * shape[1]) {
        throw ParseError("matrix shape does not match its data");
    }
    Matrix m(shape[0], shape[1]);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = data[static_cast<std::size_t>(i * m.cols() + c)];
    return m;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

const std::map<std::string, std::string>& producers() {
    static const std::map<std::string, std::string> m{
        {artifact::kTrainCorpus, "ingest"},        {artifact::kTestCorpus, "ingest"},
        {artifact::kVocab, "ingest"},              {artifact::kEncoder, "train-encoder"},
        {artifact::kEmbeddings, "embed"},          {artifact::kClusters, "cluster"},
        {artifact::kPolicy, "train-policy"},       {artifact::kGraph, "build-graph"},
        {artifact::kGenerator, "train-generator"}, {artifact::kGenerations, "generate"},
    };
    return m;
}

fs::path require(const fs::path& dir, const char* rel) {
    const fs::path p = dir / rel;
    if (!fs::exists(p)) throw MissingArtifactError(rel, producers().at(rel));
    return p;
}

corpus::Vocab load_vocab(const fs::path& dir) {
    return corpus::Vocab::from_json(read_json(require(dir, artifact::kVocab)));
}

corpus::Corpus load_corpus(const fs::path& dir, const char* rel, const corpus::Vocab& vocab, int max_tokens) {
    corpus::Corpus c = corpus::parse_jsonl(require(dir, rel)).corpus;
    corpus::assign_tokens(c, vocab, static_cast<std::size_t>(max_tokens));
    return c;
}

json clusters_json(const clustering::TopicClusters& c) {
    return json{{"k", c.k},
                {"centers", matrix_json(c.centers)},
                {"assignments", c.assignments},
                {"inertia", c.inertia},
                {"objective", c.objective},
                {"iterations", c.iterations}};
}

clustering::TopicClusters load_clusters(const fs::path& dir) {
    const json j = read_json(require(dir, artifact::kClusters));
    clustering::TopicClusters c;
    c.k = j.at("k").get<int>();
    c.centers = matrix_from_json(j.at("centers"));
    c.assignments = j.at("assignments").get<std::vector<int>>();
    c.inertia = j.at("inertia").get<double>();
    c.objective = j.at("objective").get<std::vector<double>>();
    c.iterations = j.at("iterations").get<int>();
    return c;
}

Matrix load_embeddings(const fs::path& dir) { return matrix_from_json(read_json(require(dir, artifact::kEmbeddings))); }

encoder::EncoderModel load_encoder(const fs::path& dir, const corpus::Vocab& vocab) {
    return encoder::load_checkpoint(require(dir, artifact::kEncoder), vocab.hash());
}

std::vector<std::vector<int>> label_sequences(const corpus::Corpus& c, const std::vector<int>& labels) {
    std::vector<std::vector<int>> out;
    std::size_t row = 0;
    for (const auto& conv : c.conversations) {
        out.emplace_back(labels.begin() + static_cast<std::ptrdiff_t>(row),
                         labels.begin() + static_cast<std::ptrdiff_t>(row + conv.utterances.size()));
        row += conv.utterances.size();
    }
    return out;
}

std::vector<std::vector<int>> utterance_tokens(const corpus::Corpus& c) {
    std::vector<std::vector<int>> out;
    for (const auto& conv : c.conversations)
        for (const auto& u : conv.utterances) out.push_back(u.tokens);
    return out;
}

std::string context_text(const corpus::Conversation& conv, int turn, int turns) {
    std::string out;
    for (int t = std::max(0, turn - turns); t < turn; ++t) {
        const auto& u = conv.utterances[static_cast<std::size_t>(t)];
        if (!out.empty()) out.push_back(' ');
        out += u.speaker == corpus::Speaker::A ? "[A] " : "[B] ";
        out += u.text;
    }
    return out;
}

class RunLock {
public:
    explicit RunLock(const fs::path& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            if (errno == EEXIST) {
                throw Error("run directory is locked (" + path.string() + " exists; remove it if no run is active)");
            }
            throw Error("cannot create lock file " + path.string() + ": " + std::strerror(errno));
        }
    }
    ~RunLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
    int fd_{-1};
};

}  // namespace

// ---------------------------------------------------------------------------
// Stages

Pipeline::Pipeline(RunConfig config, fs::path run_dir) : config_(std::move(config)), dir_(std::move(run_dir)) {}

void Pipeline::run(Stage stage) {
    fs::create_directories(dir_);
    RunLock lock(dir_ / artifact::kLock);
    write_json(dir_ / artifact::kConfig, config_.to_json());
    if (stage == Stage::All) {
        for (Stage s : all_stages()) run_one(s);
    } else {
        run_one(stage);
    }
}

void Pipeline::run_one(Stage stage) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t seed = stage_seed(config_.seed, stage);
    const RunConfig& cfg = config_;
    std::vector<std::string> inputs;   // run-relative paths or external files
    std::vector<std::string> outputs;  // run-relative paths
    auto in = [&](const char* rel) {
        inputs.emplace_back(rel);
        return require(dir_, rel);
    };
    auto out = [&](const char* rel) {
        outputs.emplace_back(rel);
        return dir_ / rel;
    };
    spdlog::info("stage {}: start", to_string(stage));

    switch (stage) {
        case Stage::Ingest: {
            if (cfg.corpus.path.empty()) throw ConfigError("corpus.path is required for ingest");
            if (!fs::exists(cfg.corpus.path)) throw ConfigError("corpus file not found: " + cfg.corpus.path.string());
            inputs.push_back(cfg.corpus.path.string());
            const corpus::ParseResult parsed = cfg.corpus.format == "jsonl" ? corpus::parse_jsonl(cfg.corpus.path)
                                                                             : corpus::parse_dailydialog(cfg.corpus.path);
            auto [train, test] = corpus::split(parsed.corpus, cfg.corpus.test_fraction);
            const corpus::Vocab vocab = corpus::Vocab::build(train, cfg.corpus.min_freq);
            std::ostringstream tr, te;
            corpus::write_jsonl(train, tr);
            corpus::write_jsonl(test, te);
            write_text(out(artifact::kTrainCorpus), tr.str());
            write_text(out(artifact::kTestCorpus), te.str());
            write_json(out(artifact::kVocab), vocab.to_json());
            spdlog::info("ingest: {} train / {} test conversations, vocabulary {}", train.conversations.size(),
                         test.conversations.size(), vocab.size());
            break;
        }
        case Stage::TrainEncoder: {
            in(artifact::kVocab);
            in(artifact::kTrainCorpus);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus train = load_corpus(dir_, artifact::kTrainCorpus, vocab, cfg.corpus.max_tokens);
            std::optional<corpus::SynonymTable> synonyms;
            if (!cfg.corpus.synonyms.empty()) {
                inputs.push_back(cfg.corpus.synonyms.string());
                synonyms = corpus::load_synonyms(cfg.corpus.synonyms, vocab);
            }
            encoder::EncoderConfig ec = cfg.encoder;
            ec.seed = derive_seed(seed, "init");
            encoder::EncoderModel model(ec, vocab.size());
            contrastive::ContrastiveConfig cc = cfg.contrastive;
            cc.seed = seed;
            const auto history = contrastive::train_encoder(model, train, vocab, cc, synonyms ? &*synonyms : nullptr);
            encoder::save_checkpoint(model, vocab.hash(), out(artifact::kEncoder));
            json epochs = json::array();
            for (const auto& e : history.epochs) epochs.push_back(e.to_json());
            write_json(out(artifact::kEncoderHistory),
                       json{{"epochs", epochs}, {"steps", history.steps}, {"ablation", contrastive::to_string(cc.ablation)}});
            break;
        }
        case Stage::Embed: {
            in(artifact::kVocab);
            in(artifact::kTrainCorpus);
            in(artifact::kEncoder);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus train = load_corpus(dir_, artifact::kTrainCorpus, vocab, cfg.corpus.max_tokens);
            const auto model = load_encoder(dir_, vocab);
            const Matrix emb = encoder::encode_all(utterance_tokens(train), model);
            for (Eigen::Index i = 0; i < emb.rows(); ++i)
                if (emb.row(i).norm() == 0.0) throw NumericalError("embedding " + std::to_string(i) + " is the zero vector");
            write_json(out(artifact::kEmbeddings), matrix_json(emb), -1);
            break;
        }
        case Stage::Cluster: {
            in(artifact::kEmbeddings);
            const Matrix emb = load_embeddings(dir_);
            clustering::KMeansConfig kc = cfg.clustering;
            kc.seed = seed;
            const auto clusters = clustering::spherical_kmeans(emb, kc);
            json j = clusters_json(clusters);
            j["chi"] = finite_or_null(clustering::calinski_harabasz(emb, clusters.assignments));
            j["dbi"] = finite_or_null(clustering::davies_bouldin(emb, clusters.assignments));
            write_json(out(artifact::kClusters), j, -1);
            break;
        }
        case Stage::TrainPolicy: {
            in(artifact::kVocab);
            in(artifact::kTrainCorpus);
            in(artifact::kEmbeddings);
            in(artifact::kClusters);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus train = load_corpus(dir_, artifact::kTrainCorpus, vocab, cfg.corpus.max_tokens);
            const auto clusters = load_clusters(dir_);
            const auto traj = structure::build_trajectories(train, load_embeddings(dir_), clusters.assignments,
                                                            clusters.centers);
            structure::PolicyConfig pc = cfg.policy;
            pc.seed = seed;
            structure::PolicyReport report;
            const auto policy = structure::train_policy(traj, pc, &report);
            structure::save_policy(policy, vocab.hash(), out(artifact::kPolicy));
            write_json(out(artifact::kPolicyReport), json{{"pairs", traj.size()},
                                                          {"final_mse", report.final_mse},
                                                          {"actor_mse", report.actor_mse},
                                                          {"critic_mse", report.critic_mse},
                                                          {"steps", report.steps}});
            break;
        }
        case Stage::BuildGraph: {
            in(artifact::kVocab);
            in(artifact::kTrainCorpus);
            in(artifact::kEmbeddings);
            in(artifact::kClusters);
            in(artifact::kPolicy);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus train = load_corpus(dir_, artifact::kTrainCorpus, vocab, cfg.corpus.max_tokens);
            const auto clusters = load_clusters(dir_);
            const auto policy = structure::load_policy(dir_ / artifact::kPolicy, vocab.hash());
            const auto traj = structure::build_trajectories(train, load_embeddings(dir_), clusters.assignments,
                                                            clusters.centers);
            auto graph = structure::build_graph(traj, policy, clusters.centers);
            structure::annotate_vertices(graph, train, clusters.assignments);
            auto empirical = structure::empirical_transitions(label_sequences(train, clusters.assignments), clusters.k);
            structure::annotate_vertices(empirical, train, clusters.assignments);
            write_json(out(artifact::kGraph), graph.to_json());
            write_json(out(artifact::kEmpiricalGraph), empirical.to_json());
            break;
        }
        case Stage::TrainGenerator: {
            in(artifact::kVocab);
            in(artifact::kTrainCorpus);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus train = load_corpus(dir_, artifact::kTrainCorpus, vocab, cfg.corpus.max_tokens);
            generation::GenerationConfig gc = cfg.generation;
            gc.seed = seed;
            auto examples = generation::make_examples(train, gc);
            const bool need_policy = gc.teacher_topic == generation::TeacherTopic::PolicyPredicted;
            const bool have = fs::exists(dir_ / artifact::kEncoder) && fs::exists(dir_ / artifact::kClusters) &&
                              (!need_policy || fs::exists(dir_ / artifact::kPolicy));
            std::optional<clustering::TopicClusters> clusters;
            if (have || gc.lambda2 > 0.0) {
                in(artifact::kEncoder);
                in(artifact::kClusters);
                if (need_policy) in(artifact::kPolicy);
                const auto enc = load_encoder(dir_, vocab);
                clusters = load_clusters(dir_);
                std::optional<structure::Policy> policy;
                if (need_policy) policy = structure::load_policy(dir_ / artifact::kPolicy, vocab.hash());
                generation::assign_targets(examples, train, {&enc, &*clusters, policy ? &*policy : nullptr},
                                           gc.teacher_topic);
            }
            generation::GenHistory history;
            const auto model = generation::train_generator(examples, vocab.size(), clusters ? &clusters->centers : nullptr,
                                                           gc, &history);
            generation::save_generator(model, vocab.hash(), out(artifact::kGenerator));
            write_json(out(artifact::kGeneratorHistory),
                       json{{"examples", examples.size()}, {"nll", history.nll}, {"kl", history.kl}, {"steps", history.steps}});
            break;
        }
        case Stage::Generate: {
            in(artifact::kVocab);
            in(artifact::kTestCorpus);
            in(artifact::kGenerator);
            in(artifact::kEncoder);
            in(artifact::kClusters);
            in(artifact::kPolicy);
            const corpus::Vocab vocab = load_vocab(dir_);
            const corpus::Corpus test = load_corpus(dir_, artifact::kTestCorpus, vocab, cfg.corpus.max_tokens);
            const auto model = generation::load_generator(dir_ / artifact::kGenerator, vocab.hash());
            const auto enc = load_encoder(dir_, vocab);
            const auto clusters = load_clusters(dir_);
            const auto policy = structure::load_policy(dir_ / artifact::kPolicy, vocab.hash());
            const auto& mc = model.config();
            std::vector<eval::GenerationRecord> records;
            for (const auto& conv : test.conversations) {
                for (std::size_t t = 1; t < conv.utterances.size(); ++t) {
                    const int turn = static_cast<int>(t);
                    const auto ctx = generation::build_context(conv, turn, mc.context_turns, mc.max_context_tokens);
                    const auto ids = generation::decode(ctx, model, cfg.generation.decode,
                                                        derive_seed(seed, conv.id + ":" + std::to_string(turn)));
                    eval::GenerationRecord r;
                    r.conv_id = conv.id;
                    r.turn_index = turn;
                    r.context = context_text(conv, turn, mc.context_turns);
                    r.reference = conv.utterances[t].text;
                    r.hypothesis = corpus::detokenize(ids, vocab);
                    r.decode_config = cfg.generation.decode.to_json();
                    r.predicted_cluster = structure::predict_next_cluster(
                        encoder::encode(conv.utterances[t - 1].tokens, enc), policy, clusters.centers);
                    r.reference_cluster = clustering::assign(encoder::encode(conv.utterances[t].tokens, enc), clusters);
                    records.push_back(std::move(r));
                }
            }
            if (records.empty()) throw ConfigError("generate: the test split holds no context/response pairs");
            std::ostringstream s;
            eval::write_generations(records, s);
            write_text(out(artifact::kGenerations), s.str());
            break;
        }
        case Stage::Evaluate: {
            in(artifact::kVocab);
            in(artifact::kGenerations);
            in(artifact::kEncoder);
            in(artifact::kClusters);
            in(artifact::kEmbeddings);
            const corpus::Vocab vocab = load_vocab(dir_);
            const auto records = eval::read_generations(dir_ / artifact::kGenerations);
            const auto enc = load_encoder(dir_, vocab);
            const auto clusters = load_clusters(dir_);
            const Matrix emb = load_embeddings(dir_);
            const auto report = eval::evaluate_run(records, vocab, enc, clusters, cfg.phi, &emb);
            write_json(out(artifact::kReport), report.to_json());
            write_text(out(artifact::kReportTable), report.to_table());
            spdlog::info("evaluate: HTHA {:.4f}, BLEU-1 {:.4f}", report.htha, report.bleu1);
            break;
        }
        case Stage::ExportGraph: {
            in(artifact::kGraph);
            const auto graph = structure::StructureGraph::from_json(read_json(dir_ / artifact::kGraph));
            write_text(out(artifact::kGraphDot), structure::export_graph(graph, structure::ExportFormat::Dot, cfg.graph_top_m));
            break;
        }
        case Stage::All:
            throw Error("run_one: 'all' is not a single stage");
    }

    json input_hashes = json::object(), output_hashes = json::object();
    for (const auto& p : inputs) {
        const fs::path abs = fs::path(p).is_absolute() || !fs::exists(dir_ / p) ? fs::path(p) : dir_ / p;
        input_hashes[p] = sha256_file(abs);
    }
    for (const auto& p : outputs) output_hashes[p] = sha256_file(dir_ / p);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const json entry{{"stage", to_string(stage)},
                     {"config_hash", cfg.hash()},
                     {"seed", seed},
                     {"input_hashes", input_hashes},
                     {"output_hashes", output_hashes},
                     {"wall_time", wall},
                     {"hyperparameters",
                      {{"temperature", cfg.contrastive.temperature},
                       {"lambda1", cfg.contrastive.lambda1},
                       {"lambda2", cfg.generation.lambda2},
                       {"epochs", cfg.contrastive.epochs},
                       {"k", cfg.clustering.k}}}};
    std::ofstream(dir_ / artifact::kManifest, std::ios::app) << entry.dump() << '\n';
    spdlog::info("stage {}: done in {:.2f}s", to_string(stage), wall);
}

// ---------------------------------------------------------------------------
// Chat

LoadedRun load_run(const fs::path& dir) {
    LoadedRun r;
    r.vocab = load_vocab(dir);
    const json cfg = fs::exists(dir / artifact::kConfig) ? read_json(dir / artifact::kConfig) : json::object();
    const int max_tokens = cfg.contains("corpus") ? cfg["corpus"].value("max_tokens", 32) : 32;
    r.train = load_corpus(dir, artifact::kTrainCorpus, r.vocab, max_tokens);
    r.encoder.emplace(load_encoder(dir, r.vocab));
    r.clusters = load_clusters(dir);
    r.policy.emplace(structure::load_policy(require(dir, artifact::kPolicy), r.vocab.hash()));
    r.generator.emplace(generation::load_generator(require(dir, artifact::kGenerator), r.vocab.hash()));
    r.graph = structure::StructureGraph::from_json(read_json(require(dir, artifact::kGraph)));
    return r;
}

std::string run_chat(const fs::path& run_dir, const ChatOptions& options, std::istream& in, std::ostream& out) {
    const LoadedRun run = load_run(run_dir);
    std::ostringstream transcript;
    auto say = [&](const std::string& line) {
        out << line << '\n';
        transcript << line << '\n';
    };
    out << "type a message; /topics lists topics, /quit exits\n";
    corpus::Conversation history;
    history.id = "chat";
    std::string line;
    int turn = 0;
    while (true) {
        out << "> " << std::flush;
        if (!std::getline(in, line)) break;
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
        if (line == "/quit") break;
        if (line == "/topics") {
            for (const auto& v : run.graph.vertices) {
                std::string s = "topic " + std::to_string(v.cluster) + " (" + std::to_string(v.size) + " utterances)";
                for (const auto& sample : v.samples) s += " | " + sample;
                say(s);
            }
            continue;
        }
        say("user: " + line);
        corpus::Utterance u;
        u.conv_id = history.id;
        u.turn_index = turn++;
        u.speaker = corpus::Speaker::A;
        u.text = line;
        u.tokens = corpus::tokenize(line, run.vocab);
        if (u.tokens.empty()) u.tokens.push_back(corpus::Vocab::kUnk);
        history.utterances.push_back(u);

        const Vector h = encoder::encode(u.tokens, *run.encoder);
        const Vector q = structure::policy_distribution(h, *run.policy, run.clusters.centers);
        const int predicted = structure::predict_next_cluster(h, *run.policy, run.clusters.centers);
        const auto ctx = generation::build_context(history, static_cast<int>(history.utterances.size()),
                                                   options.context_turns, options.max_context_tokens);
        const auto ids = generation::decode(ctx, *run.generator, options.decode,
                                            derive_seed(options.seed, "chat:" + std::to_string(turn)));
        const std::string reply = corpus::detokenize(ids, run.vocab);
        say("bot: " + reply);

        std::vector<int> order(static_cast<std::size_t>(q.size()));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int c) { return q(a) > q(c); });
        std::ostringstream info;
        info << std::fixed << std::setprecision(3) << "next topic: " << predicted << " (p=" << q(predicted) << "); top-3:";
        for (std::size_t i = 0; i < std::min<std::size_t>(3, order.size()); ++i) info << ' ' << order[i] << " (" << q(order[i]) << ")";
        say(info.str());

        corpus::Utterance bot;
        bot.conv_id = history.id;
        bot.turn_index = turn++;
        bot.speaker = corpus::Speaker::B;
        bot.text = reply;
        bot.tokens = ids;
        if (bot.tokens.empty()) bot.tokens.push_back(corpus::Vocab::kUnk);
        history.utterances.push_back(std::move(bot));
    }
    write_text(run_dir / "chat" / "transcript.txt", transcript.str());
    return transcript.str();
}

}  // namespace ctrlstruct::pipeline
