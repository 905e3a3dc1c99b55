#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/contrastive.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/generation.hpp"
#include "ctrlstruct/structure.hpp"

namespace ctrlstruct::pipeline {

enum class Stage {
    Ingest,
    TrainEncoder,
    Embed,
    Cluster,
    TrainPolicy,
    BuildGraph,
    TrainGenerator,
    Generate,
    Evaluate,
    ExportGraph,
    All,
};

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

/// Stages run by `all`, in order. export-graph is on demand only.
const std::vector<Stage>& all_stages();

struct CorpusSettings {
    std::filesystem::path path;
    std::string format{"jsonl"};  // "jsonl" or "dailydialog"
    double test_fraction{0.1};
    int min_freq{2};
    int max_tokens{32};
    std::filesystem::path synonyms;  // optional lexicon for synonym_sub views
};

struct RunConfig {
    std::uint64_t seed{0};
    CorpusSettings corpus;
    encoder::EncoderConfig encoder;
    contrastive::ContrastiveConfig contrastive;
    clustering::KMeansConfig clustering;
    structure::PolicyConfig policy;
    generation::GenerationConfig generation;
    int graph_top_m{3};
    std::vector<double> phi;

    /// The user-visible effective configuration (defaults merged in).
    nlohmann::json to_json() const;
    std::string hash() const;

    /// Strict parse: unknown keys and wrong types are ConfigErrors naming the
    /// key path. Relative corpus paths resolve against `base_dir`.
    static RunConfig from_json(const nlohmann::json& user, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
};

/// Every key with its default value.
nlohmann::json default_config_json();

/// Run directory for a config file when --run-dir is absent:
/// $CTRLSTRUCT_RUN_ROOT (or ./runs) / <config stem>.
std::filesystem::path default_run_dir(const std::filesystem::path& config_path);

/// Stage-specific seed derived from the global seed.
std::uint64_t stage_seed(std::uint64_t global, Stage stage);

/// Files produced by the pipeline, relative to the run directory.
namespace artifact {
inline constexpr const char* kTrainCorpus = "corpus/train.jsonl";
inline constexpr const char* kTestCorpus = "corpus/test.jsonl";
inline constexpr const char* kVocab = "corpus/vocab.json";
inline constexpr const char* kEncoder = "encoder/encoder.json";
inline constexpr const char* kEncoderHistory = "encoder/history.json";
inline constexpr const char* kEmbeddings = "embeddings/train.json";
inline constexpr const char* kClusters = "clusters/clusters.json";
inline constexpr const char* kPolicy = "policy/policy.json";
inline constexpr const char* kPolicyReport = "policy/report.json";
inline constexpr const char* kGraph = "graph/graph.json";
inline constexpr const char* kEmpiricalGraph = "graph/empirical.json";
inline constexpr const char* kGraphDot = "graph/graph.dot";
inline constexpr const char* kGenerator = "generator/generator.json";
inline constexpr const char* kGeneratorHistory = "generator/history.json";
inline constexpr const char* kGenerations = "generations/test.jsonl";
inline constexpr const char* kReport = "reports/eval.json";
inline constexpr const char* kReportTable = "reports/eval.txt";
inline constexpr const char* kManifest = "manifest.jsonl";
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kLock = "run.lock";
}  // namespace artifact

/// Runs stages against one run directory.
class Pipeline {
public:
    Pipeline(RunConfig config, std::filesystem::path run_dir);

    /// Runs one stage (or all nine for Stage::All) under the run-directory lock.
    void run(Stage stage);

    const RunConfig& config() const { return config_; }
    const std::filesystem::path& dir() const { return dir_; }

private:
    void run_one(Stage stage);

    RunConfig config_;
    std::filesystem::path dir_;
};

/// Artifacts loaded back from a finished run.
struct LoadedRun {
    corpus::Corpus train;
    corpus::Vocab vocab;
    std::optional<encoder::EncoderModel> encoder;
    clustering::TopicClusters clusters;
    std::optional<structure::Policy> policy;
    std::optional<generation::GeneratorModel> generator;
    structure::StructureGraph graph;
};

/// Loads everything the chat session needs; throws MissingArtifactError.
LoadedRun load_run(const std::filesystem::path& run_dir);

struct ChatOptions {
    generation::DecodeConfig decode;
    std::uint64_t seed{0};
    int context_turns{4};
    int max_context_tokens{128};
};

/// Line-oriented chat loop. `/topics` lists clusters with samples, `/quit`
/// ends the session, empty lines re-prompt. The transcript is returned and
/// also written to <run_dir>/chat/transcript.txt.
std::string run_chat(const std::filesystem::path& run_dir, const ChatOptions& options, std::istream& in,
                     std::ostream& out);

}  // namespace ctrlstruct::pipeline
