#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/error.hpp"
#include "support.hpp"

using namespace ctrlstruct;
using namespace ctrlstruct::corpus;

TEST_CASE("jsonl ingestion") {
    SUBCASE("one line, four utterances") {
        std::istringstream in(
            R"({"id":"x","utterances":[{"speaker":"A","text":"a"},{"speaker":"B","text":"b"},)"
            R"({"speaker":"A","text":"c"},{"speaker":"B","text":"d"}]})"
            "\n");
        const auto r = parse_jsonl(in);
        REQUIRE(r.corpus.conversations.size() == 1);
        CHECK(r.corpus.conversations[0].utterances.size() == 4);
        CHECK(r.corpus.conversations[0].utterances[3].turn_index == 3);
        CHECK(r.skipped_short == 0);
    }
    SUBCASE("single-utterance conversation is skipped") {
        std::istringstream in(R"({"id":"x","utterances":[{"speaker":"A","text":"alone"}]})"
                              "\n");
        const auto r = parse_jsonl(in);
        CHECK(r.corpus.conversations.empty());
        CHECK(r.skipped_short == 1);
    }
    SUBCASE("malformed line reports its number") {
        std::istringstream in(R"({"id":"x","utterances":[{"speaker":"A","text":"a"},{"speaker":"B","text":"b"}]})"
                              "\n{not json\n");
        try {
            parse_jsonl(in);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("200 conversations round-trip through write_jsonl") {
        std::vector<std::vector<std::string>> convs;
        std::size_t total = 0;
        for (int i = 0; i < 200; ++i) {
            std::vector<std::string> c;
            for (int t = 0; t < 2 + i % 5; ++t) c.push_back("w" + std::to_string(t) + " x" + std::to_string(i));
            total += c.size();
            convs.push_back(c);
        }
        std::ostringstream out;
        write_jsonl(testing_support::make_corpus(convs), out);
        // Independent count: one conversation per non-empty line, utterances by "speaker" occurrences.
        std::size_t lines = 0, speakers = 0;
        {
            std::istringstream scan(out.str());
            for (std::string line; std::getline(scan, line);) {
                if (line.empty()) continue;
                ++lines;
                for (std::size_t p = line.find("\"speaker\""); p != std::string::npos;
                     p = line.find("\"speaker\"", p + 1))
                    ++speakers;
            }
        }
        std::istringstream in(out.str());
        const auto r = parse_jsonl(in);
        CHECK(r.corpus.conversations.size() == 200);
        CHECK(lines == 200);
        CHECK(r.corpus.utterance_count() == total);
        CHECK(speakers == total);
    }
}

TEST_CASE("dailydialog ingestion") {
    SUBCASE("two utterances") {
        std::istringstream in("hi __eou__ hello __eou__\n");
        const auto r = parse_dailydialog(in);
        REQUIRE(r.corpus.conversations.size() == 1);
        CHECK(r.corpus.conversations[0].utterances.size() == 2);
        CHECK(r.corpus.conversations[0].utterances[1].text == "hello");
        CHECK(r.corpus.conversations[0].utterances[1].speaker == Speaker::B);
    }
    SUBCASE("no separator") {
        std::istringstream in("just one line\n");
        const auto r = parse_dailydialog(in);
        CHECK(r.corpus.conversations.empty());
        CHECK(r.skipped_short == 1);
    }
    SUBCASE("2/3/4 utterances") {
        std::istringstream in("a __eou__ b __eou__\nc __eou__ d __eou__ e __eou__\nf __eou__ g __eou__ h __eou__ i __eou__\n");
        const auto r = parse_dailydialog(in);
        CHECK(r.corpus.conversations.size() == 3);
        CHECK(r.corpus.utterance_count() == 9);
        CHECK(r.corpus.transition_count() == 6);
    }
}

TEST_CASE("tokenization") {
    const auto corpus = testing_support::make_corpus({{"Hello! hello world", "hello world !"}});
    const Vocab vocab = Vocab::build(corpus, 1);

    CHECK(split_words("Hello!") == std::vector<std::string>{"hello", "!"});
    CHECK(tokenize("Hello!", vocab) == std::vector<int>{vocab.id("hello"), vocab.id("!")});
    CHECK(tokenize("zebra", vocab) == std::vector<int>{Vocab::kUnk});

    std::string long_text;
    for (int i = 0; i < 40; ++i) long_text += (i % 2 ? "hello " : "world ");
    const auto ids = tokenize(long_text, vocab, 32);
    CHECK(ids.size() == 32);
    CHECK(ids.front() == vocab.id("world"));

    // Specials come first, then descending frequency.
    CHECK(vocab.token(Vocab::kPad) != vocab.token(Vocab::kUnk));
    CHECK(vocab.id("hello") == Vocab::kNumSpecial);
    CHECK(Vocab::from_json(vocab.to_json()).hash() == vocab.hash());
}

TEST_CASE("min_freq filters rare words") {
    const auto corpus = testing_support::make_corpus({{"common rare", "common"}});
    const Vocab vocab = Vocab::build(corpus, 2);
    CHECK(vocab.contains("common"));
    CHECK_FALSE(vocab.contains("rare"));
}

TEST_CASE("augmentation") {
    auto corpus = testing_support::make_corpus({{"a b c d e f g h", "p q r s"}});
    const Vocab vocab = Vocab::build(corpus, 1);
    assign_tokens(corpus, vocab);
    const auto& conv = corpus.conversations[0];
    const auto& u = conv.utterances[0];
    AugmentContext ctx{&vocab, &conv, nullptr};

    SUBCASE("dropout keeps text and sets the flag") {
        const auto v = augment(u, {AugmentationKind::Dropout, 0.0}, 1, ctx);
        CHECK(v.tokens == u.tokens);
        CHECK(v.dropout);
    }
    SUBCASE("rate 0 is the identity for every strategy") {
        SynonymTable syn{{u.tokens[0], {u.tokens[1]}}};
        AugmentContext with_syn{&vocab, &conv, &syn};
        for (auto k : {AugmentationKind::ContextInsert, AugmentationKind::RandomReplace, AugmentationKind::SynonymSub}) {
            CHECK(augment(u, {k, 0.0}, 3, with_syn).tokens == u.tokens);
        }
    }
    SUBCASE("context insert at 0.25 on 8 tokens replays the seeded sampler") {
        const std::uint64_t seed = 42;
        const auto v = augment(u, {AugmentationKind::ContextInsert, 0.25}, seed, ctx);
        REQUIRE(v.tokens.size() == 10);

        std::vector<int> pool;
        for (const auto& other : conv.utterances) pool.insert(pool.end(), other.tokens.begin(), other.tokens.end());
        std::vector<int> expected = u.tokens;
        std::mt19937_64 rng(seed);
        for (int i = 0; i < 2; ++i) {
            std::uniform_int_distribution<std::size_t> pos(0, expected.size());
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            const auto at = pos(rng);
            expected.insert(expected.begin() + static_cast<std::ptrdiff_t>(at), pool[pick(rng)]);
        }
        CHECK(v.tokens == expected);
        // Every inserted token comes from the conversation multiset.
        for (int t : v.tokens) CHECK(std::find(pool.begin(), pool.end(), t) != pool.end());
    }
    SUBCASE("random replace changes exactly edit_count positions at most, never to specials") {
        const auto v = augment(u, {AugmentationKind::RandomReplace, 0.5}, 7, ctx);
        REQUIRE(v.tokens.size() == u.tokens.size());
        std::size_t changed = 0;
        for (std::size_t i = 0; i < u.tokens.size(); ++i) {
            changed += v.tokens[i] != u.tokens[i];
            CHECK_FALSE(Vocab::is_special(v.tokens[i]));
        }
        CHECK(changed <= edit_count(0.5, 8));
    }
    SUBCASE("synonym substitution needs a lexicon") {
        CHECK_THROWS_AS(augment(u, {AugmentationKind::SynonymSub, 0.5}, 1, ctx), ConfigError);
    }
    SUBCASE("synonym substitution at rate 1 swaps every eligible token") {
        SynonymTable syn{{u.tokens[0], {vocab.id("p")}}};
        AugmentContext with_syn{&vocab, &conv, &syn};
        const auto v = augment(u, {AugmentationKind::SynonymSub, 1.0}, 1, with_syn);
        CHECK(v.tokens[0] == vocab.id("p"));
        CHECK(std::equal(v.tokens.begin() + 1, v.tokens.end(), u.tokens.begin() + 1));
    }
    SUBCASE("deterministic given the seed") {
        const AugmentationStrategy s{AugmentationKind::RandomReplace, 0.4};
        CHECK(augment(u, s, 5, ctx).tokens == augment(u, s, 5, ctx).tokens);
    }
    CHECK(edit_count(0.25, 8) == 2);
    CHECK(edit_count(0.1, 5) == 1);  // 0.5 rounds up
    CHECK(edit_count(0.0, 100) == 0);
}

TEST_CASE("synonym lexicon keeps in-vocabulary entries only") {
    const auto corpus = testing_support::make_corpus({{"big large huge", "big"}});
    const Vocab vocab = Vocab::build(corpus, 1);
    std::istringstream in("big\tlarge,enormous,huge\nlarge\tbig\n");
    const auto table = load_synonyms(in, vocab);
    CHECK(table.at(vocab.id("big")) == std::vector<int>{vocab.id("large"), vocab.id("huge")});
    CHECK(table.at(vocab.id("large")) == std::vector<int>{vocab.id("big")});
}

TEST_CASE("batch stream") {
    auto build = [](const std::vector<int>& lengths) {
        std::vector<std::vector<std::string>> convs;
        for (int len : lengths) {
            std::vector<std::string> c;
            for (int t = 0; t < len; ++t) c.push_back("w" + std::to_string(t));
            convs.push_back(c);
        }
        auto corpus = testing_support::make_corpus(convs);
        return corpus;
    };

    SUBCASE("one 4-utterance conversation, N=4") {
        auto corpus = build({4});
        const Vocab vocab = Vocab::build(corpus, 1);
        assign_tokens(corpus, vocab);
        const auto batches = batch_stream(corpus, {4}, 1, vocab);
        REQUIRE(batches.size() == 1);
        CHECK(batches[0].crosses_boundary == std::vector<bool>{false, false, false});
    }
    SUBCASE("two 2-utterance conversations, N=4") {
        auto corpus = build({2, 2});
        const Vocab vocab = Vocab::build(corpus, 1);
        assign_tokens(corpus, vocab);
        const auto batches = batch_stream(corpus, {4}, 1, vocab);
        REQUIRE(batches.size() == 1);
        CHECK(batches[0].crosses_boundary == std::vector<bool>{false, true, false});
    }
    SUBCASE("10 utterances, N=4") {
        auto corpus = build({3, 3, 4});
        const Vocab vocab = Vocab::build(corpus, 1);
        assign_tokens(corpus, vocab);
        const auto batches = batch_stream(corpus, {4}, 9, vocab);
        REQUIRE(batches.size() == 3);
        CHECK(batches[0].size() == 4);
        CHECK(batches[1].size() == 4);
        CHECK(batches[2].size() == 2);
        // Utterance order inside each conversation is preserved.
        std::vector<UtteranceRef> all;
        for (const auto& b : batches) all.insert(all.end(), b.refs.begin(), b.refs.end());
        for (std::size_t i = 1; i < all.size(); ++i) {
            if (all[i].conversation == all[i - 1].conversation) CHECK(all[i].turn == all[i - 1].turn + 1);
        }
        for (const auto& b : batches) {
            CHECK(b.first_views.size() == b.size());
            CHECK(b.crosses_boundary.size() == b.size() - 1);
        }
    }
    SUBCASE("batch size 1 is rejected") {
        auto corpus = build({2});
        const Vocab vocab = Vocab::build(corpus, 1);
        CHECK_THROWS_AS(batch_stream(corpus, {1}, 1, vocab), ConfigError);
    }
}

TEST_CASE("split keeps the tail for testing and at least one training conversation") {
    auto corpus = testing_support::make_corpus({{"a", "b"}, {"c", "d"}, {"e", "f"}, {"g", "h"}});
    auto [train, test] = split(corpus, 0.25);
    CHECK(train.conversations.size() == 3);
    CHECK(test.conversations.size() == 1);
    CHECK(test.conversations[0].id == "c3");
    auto [train2, test2] = split(corpus, 0.99);
    CHECK(train2.conversations.size() == 1);
    CHECK(test2.conversations.size() == 3);
    CHECK_THROWS_AS(split(corpus, 1.0), ConfigError);
}
