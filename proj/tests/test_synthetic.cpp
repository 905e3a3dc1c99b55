#include <doctest.h>

#include "ctrlstruct/error.hpp"
#include "ctrlstruct/structure.hpp"
#include "ctrlstruct/synthetic.hpp"
#include "support.hpp"

using namespace ctrlstruct;
using namespace ctrlstruct::synthetic;

TEST_CASE("synthetic corpus shape") {
    SyntheticConfig cfg;
    cfg.conversations = 30;
    cfg.seed = 3;
    const auto data = make_synthetic(cfg);
    REQUIRE(data.corpus.conversations.size() == 30);
    REQUIRE(data.labels.size() == 30);
    for (std::size_t c = 0; c < 30; ++c) {
        const auto& conv = data.corpus.conversations[c];
        CHECK(conv.utterances.size() >= 6);
        CHECK(conv.utterances.size() <= 12);
        CHECK(data.labels[c].size() == conv.utterances.size());
        for (std::size_t t = 0; t < conv.utterances.size(); ++t) {
            const std::string& text = conv.utterances[t].text;
            const std::string topic = "t" + std::to_string(data.labels[c][t]) + "w";
            CHECK(text.find(topic) != std::string::npos);
            if (t + 1 < conv.utterances.size()) {
                const std::string bridge =
                    "t" + std::to_string(data.labels[c][t]) + "b" + std::to_string(data.labels[c][t + 1]);
                CHECK(text.find(bridge) != std::string::npos);
            }
        }
    }
    for (Eigen::Index i = 0; i < data.chain.rows(); ++i) CHECK(data.chain.row(i).sum() == doctest::Approx(1.0));
    CHECK(data.chain.minCoeff() > 0.0);
}

TEST_CASE("same seed, same corpus") {
    SyntheticConfig cfg;
    cfg.conversations = 10;
    const auto a = make_synthetic(cfg);
    const auto b = make_synthetic(cfg);
    CHECK(a.chain == b.chain);
    CHECK(a.labels == b.labels);
    cfg.seed = 1;
    CHECK(make_synthetic(cfg).labels != a.labels);
}

TEST_CASE("files written next to the corpus") {
    testing_support::TempDir dir("synthetic");
    SyntheticConfig cfg;
    cfg.conversations = 12;
    const auto data = make_synthetic(cfg);
    const auto path = dir / "toy.jsonl";
    write_synthetic(data, cfg, path);
    CHECK(std::filesystem::exists(path));
    CHECK(chain_path(path) == dir / "toy.chain.json");
    CHECK(labels_path(path) == dir / "toy.labels.json");
    CHECK((read_chain(chain_path(path)) - data.chain).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(read_labels(labels_path(path)) == data.labels);
    const auto parsed = corpus::parse_jsonl(path);
    CHECK(parsed.corpus.conversations.size() == 12);
    CHECK(parsed.corpus.conversations[0].utterances[0].text == data.corpus.conversations[0].utterances[0].text);
}

TEST_CASE("empirical transitions of ground-truth labels approach the chain") {
    SyntheticConfig cfg;
    cfg.conversations = 2000;
    cfg.seed = 11;
    const auto data = make_synthetic(cfg);
    const auto g = structure::empirical_transitions(data.labels, cfg.topics);
    for (int i = 0; i < cfg.topics; ++i) CHECK(total_variation(g.transitions.row(i), data.chain.row(i)) <= 0.05);
}

TEST_CASE("total variation") {
    Eigen::RowVectorXd p(3), q(3);
    p << 0.5, 0.5, 0.0;
    q << 0.0, 0.5, 0.5;
    CHECK(total_variation(p, q) == doctest::Approx(0.5));
    CHECK(total_variation(p, p) == 0.0);
}

TEST_CASE("invalid configuration") {
    SyntheticConfig cfg;
    cfg.stickiness = 1.0;
    CHECK_THROWS_AS(make_synthetic(cfg), ConfigError);
    cfg = {};
    cfg.min_turns = 1;
    CHECK_THROWS_AS(make_synthetic(cfg), ConfigError);
}
