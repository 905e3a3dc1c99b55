#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>
#include <sstream>

#include "ctrlstruct/error.hpp"
#include "ctrlstruct/pipeline.hpp"
#include "ctrlstruct/synthetic.hpp"

namespace fs = std::filesystem;
using namespace ctrlstruct;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kNumerical = 4 };

std::vector<double> parse_phi(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--phi: '" + item + "' is not a number");
        }
    }
    if (out.empty()) throw ConfigError("--phi: empty list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dialogue structure discovery and topic-controlled response generation"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Run one pipeline stage, or all of them");
    fs::path config_path, run_dir;
    std::string stage = "all";
    std::optional<std::uint64_t> seed_override;
    std::string phi;
    pipe->add_option("--config", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
    pipe->add_option("--stage", stage,
                     "ingest, train-encoder, embed, cluster, train-policy, build-graph, train-generator, generate, "
                     "evaluate, export-graph or all")
        ->capture_default_str();
    pipe->add_option("--run-dir", run_dir, "Run directory (default: $CTRLSTRUCT_RUN_ROOT or ./runs, plus the config name)");
    pipe->add_option("--seed", seed_override, "Override the global seed");
    pipe->add_option("--phi", phi, "Comma-separated soft topic-hit thresholds");

    // chat
    auto* chat = app.add_subcommand("chat", "Talk to a trained run");
    fs::path chat_dir;
    std::string strategy;
    std::uint64_t chat_seed = 0;
    chat->add_option("--run-dir", chat_dir, "Run directory of a finished pipeline")->required()->check(CLI::ExistingDirectory);
    chat->add_option("--strategy", strategy, "greedy, beam, top_k or top_p (default: the run's setting)");
    chat->add_option("--seed", chat_seed, "Sampling seed")->capture_default_str();

    // make-synthetic
    auto* syn = app.add_subcommand("make-synthetic", "Write a topic-templated corpus with its ground-truth chain");
    synthetic::SyntheticConfig sc;
    fs::path syn_out;
    syn->add_option("--topics", sc.topics, "Number of topics")->capture_default_str();
    syn->add_option("--conversations", sc.conversations, "Number of conversations")->capture_default_str();
    syn->add_option("--min-turns", sc.min_turns)->capture_default_str();
    syn->add_option("--max-turns", sc.max_turns)->capture_default_str();
    syn->add_option("--words-per-topic", sc.words_per_topic)->capture_default_str();
    syn->add_option("--templates-per-topic", sc.templates_per_topic)->capture_default_str();
    syn->add_option("--stickiness", sc.stickiness, "Extra self-transition mass per chain row")->capture_default_str();
    syn->add_option("--template-length", sc.template_length)->capture_default_str();
    syn->add_option("--chain-floor", sc.chain_floor, "Uniform mass mixed into every chain row")->capture_default_str();
    syn->add_option("--fillers", sc.fillers, "Shared filler words per utterance")->capture_default_str();
    syn->add_option("--filler-vocab", sc.filler_vocab)->capture_default_str();
    syn->add_option("--seed", sc.seed)->capture_default_str();
    syn->add_option("--out", syn_out, "Output JSONL path")->required();

    CLI11_PARSE(app, argc, argv);

    auto logger = spdlog::stderr_color_mt("ctrlstruct");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*pipe) {
            auto config = pipeline::RunConfig::load(config_path);
            if (seed_override) config.seed = *seed_override;
            if (!phi.empty()) config.phi = parse_phi(phi);
            const auto target = pipeline::stage_from_string(stage);
            if (run_dir.empty()) run_dir = pipeline::default_run_dir(config_path);
            pipeline::Pipeline p(std::move(config), run_dir);
            p.run(target);
            std::cout << "run directory: " << p.dir().string() << '\n';
        } else if (*chat) {
            const auto cfg = pipeline::RunConfig::load(chat_dir / pipeline::artifact::kConfig);
            pipeline::ChatOptions opts;
            opts.decode = cfg.generation.decode;
            if (!strategy.empty()) opts.decode.strategy = generation::strategy_from_string(strategy);
            opts.seed = chat_seed;
            opts.context_turns = cfg.generation.context_turns;
            opts.max_context_tokens = cfg.generation.max_context_tokens;
            pipeline::run_chat(chat_dir, opts, std::cin, std::cout);
        } else if (*syn) {
            const auto data = synthetic::make_synthetic(sc);
            synthetic::write_synthetic(data, sc, syn_out);
            std::cout << "wrote " << syn_out.string() << ", " << synthetic::chain_path(syn_out).string() << ", "
                      << synthetic::labels_path(syn_out).string() << '\n';
        }
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return kConfig;
    } catch (const ParseError& e) {
        spdlog::error("{}", e.what());
        return kConfig;
    } catch (const MissingArtifactError& e) {
        spdlog::error("{}", e.what());
        return kMissing;
    } catch (const NumericalError& e) {
        spdlog::error("{}", e.what());
        return kNumerical;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kFailure;
    }
    return kOk;
}
