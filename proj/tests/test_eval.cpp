#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "ctrlstruct/error.hpp"
#include "ctrlstruct/eval.hpp"
#include "support.hpp"

using namespace ctrlstruct;
using namespace ctrlstruct::eval;

namespace {

Sentence words(const std::string& s) {
    Sentence out;
    std::istringstream in(s);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

std::vector<Sentence> corpus_of(std::initializer_list<const char*> texts) {
    std::vector<Sentence> out;
    for (const char* t : texts) out.push_back(words(t));
    return out;
}

// Naive loops: n-grams as joined strings, clipping by explicit counting.
double naive_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs, int max_n) {
    double log_sum = 0.0;
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        hyp_len += hyps[i].size();
        ref_len += refs[i].size();
    }
    for (int n = 1; n <= max_n; ++n) {
        double matched = 0, total = 0;
        for (std::size_t i = 0; i < hyps.size(); ++i) {
            auto grams = [n](const Sentence& s) {
                std::vector<std::string> g;
                for (std::size_t a = 0; a + static_cast<std::size_t>(n) <= s.size(); ++a) {
                    std::string key;
                    for (int b = 0; b < n; ++b) key += s[a + static_cast<std::size_t>(b)] + "\x1f";
                    g.push_back(key);
                }
                return g;
            };
            const auto hg = grams(hyps[i]);
            const auto rg = grams(refs[i]);
            std::vector<bool> used(rg.size(), false);
            for (const auto& g : hg) {
                for (std::size_t r = 0; r < rg.size(); ++r) {
                    if (!used[r] && rg[r] == g) {
                        used[r] = true;
                        matched += 1;
                        break;
                    }
                }
            }
            total += static_cast<double>(hg.size());
        }
        const double p = total == 0 ? 0.0 : matched / total;
        log_sum += std::log(std::max(p, kBleuEpsilon));
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return bp * std::exp(log_sum / max_n);
}

std::size_t naive_lcs(const Sentence& a, const Sentence& b, std::size_t i = 0, std::size_t j = 0) {
    if (i == a.size() || j == b.size()) return 0;
    if (a[i] == b[j]) return 1 + naive_lcs(a, b, i + 1, j + 1);
    return std::max(naive_lcs(a, b, i + 1, j), naive_lcs(a, b, i, j + 1));
}

double naive_distinct(const std::vector<Sentence>& hyps, int n) {
    std::vector<Sentence> all;
    for (const auto& h : hyps)
        for (std::size_t a = 0; a + static_cast<std::size_t>(n) <= h.size(); ++a)
            all.emplace_back(h.begin() + static_cast<std::ptrdiff_t>(a), h.begin() + static_cast<std::ptrdiff_t>(a) + n);
    if (all.empty()) return 0.0;
    std::size_t unique = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        bool seen = false;
        for (std::size_t j = 0; j < i && !seen; ++j) seen = all[j] == all[i];
        if (!seen) ++unique;
    }
    return static_cast<double>(unique) / static_cast<double>(all.size());
}

std::vector<Sentence> random_corpus(std::mt19937_64& rng, std::size_t count) {
    std::uniform_int_distribution<int> len(1, 6), word(0, 4);
    std::vector<Sentence> out(count);
    for (auto& s : out) {
        const int n = len(rng);
        for (int i = 0; i < n; ++i) s.push_back(std::string(1, static_cast<char>('a' + word(rng))));
    }
    return out;
}

}  // namespace

TEST_CASE("BLEU") {
    CHECK(bleu(corpus_of({"the cat sat"}), corpus_of({"the cat sat"}), 2) == doctest::Approx(1.0));
    CHECK(bleu(corpus_of({"the cat"}), corpus_of({"the cat sat"}), 1) == doctest::Approx(0.60653).epsilon(1e-5));
    CHECK(bleu(corpus_of({"x y"}), corpus_of({"a b"}), 1) < 1e-8);
    CHECK(bleu(corpus_of({"x y"}), corpus_of({"a b"}), 2) == doctest::Approx(kBleuEpsilon));
    CHECK_THROWS_AS(bleu(corpus_of({"a"}), corpus_of({"a", "b"}), 1), Error);
}

TEST_CASE("distinct-n") {
    CHECK(distinct_n(corpus_of({"a a a"}), 1) == doctest::Approx(1.0 / 3.0));
    CHECK(distinct_n(corpus_of({"a b", "c d"}), 1) == doctest::Approx(1.0));
    const auto base = corpus_of({"a b c", "c d"});
    auto doubled = base;
    doubled.insert(doubled.end(), base.begin(), base.end());
    CHECK(distinct_n(doubled, 1) == doctest::Approx(0.5 * distinct_n(base, 1)));
    CHECK(distinct_n(corpus_of({"a", "b"}), 2) == 0.0);
}

TEST_CASE("ROUGE-L") {
    CHECK(rouge_l(corpus_of({"a b c"}), corpus_of({"a b c"})) == doctest::Approx(1.0));
    CHECK(rouge_l(corpus_of({"the cat sat"}), corpus_of({"the cat"})) == doctest::Approx(0.8));
    const auto hyp = words("d c b a");
    const auto ref = words("a b c d");
    CHECK(lcs_length(hyp, ref) == 1);
    CHECK(lcs_length(hyp, ref) == naive_lcs(hyp, ref));
    CHECK(rouge_l({hyp}, {ref}) == doctest::Approx(0.25));
    CHECK(rouge_l(corpus_of({"x"}), corpus_of({"y"})) == 0.0);
}

TEST_CASE("metrics match naive loops on random tiny corpora") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const auto hyps = random_corpus(rng, 4);
        const auto refs = random_corpus(rng, 4);
        for (int n : {1, 2}) {
            CHECK(bleu(hyps, refs, n) == doctest::Approx(naive_bleu(hyps, refs, n)).epsilon(1e-12));
            CHECK(distinct_n(hyps, n) == doctest::Approx(naive_distinct(hyps, n)).epsilon(1e-12));
        }
        double rouge = 0.0;
        for (std::size_t i = 0; i < hyps.size(); ++i) {
            const auto l = static_cast<double>(naive_lcs(hyps[i], refs[i]));
            CHECK(lcs_length(hyps[i], refs[i]) == static_cast<std::size_t>(l));
            if (l == 0) continue;
            const double p = l / static_cast<double>(hyps[i].size()), r = l / static_cast<double>(refs[i].size());
            rouge += 2 * p * r / (p + r);
        }
        CHECK(rouge_l(hyps, refs) == doctest::Approx(rouge / 4.0).epsilon(1e-12));
    }
}

TEST_CASE("topic hit") {
    Matrix centers(4, 2);
    centers << 1, 0, 0.9, std::sqrt(1 - 0.81), 0, 1, -1, 0;
    CHECK(topic_hit({2, 2, 2}, {2, 2, 2}, centers, 1.0) == 1.0);
    CHECK(topic_hit({0, 1, 2}, {0, 1, 3}, centers, 1.0) == doctest::Approx(2.0 / 3.0));

    // Pairs: (0,1) sim 0.9, (1,0) sim 0.9, (0,2) sim 0, (2,3) sim 0.
    const std::vector<int> gen{0, 1, 0, 2}, ref{1, 0, 2, 3};
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        const double s = centers.row(gen[i]).normalized().dot(centers.row(ref[i]).normalized());
        if (s >= 0.85) ++hits;
    }
    CHECK(hits == 2);
    CHECK(topic_hit(gen, ref, centers, 0.85) == doctest::Approx(0.5));
    CHECK(topic_hit(gen, ref, centers, 0.95) == 0.0);

    double previous = 0.0;
    for (double phi : kDefaultPhi) {
        const double v = topic_hit(gen, ref, centers, phi);
        CHECK(v >= previous);
        previous = v;
    }
    CHECK_THROWS_AS(topic_hit({4}, {0}, centers, 1.0), Error);
}

TEST_CASE("F1 scores") {
    // Confusion (rows = reference, columns = generated):
    //   ref 0: 2 -> 0, 1 -> 1
    //   ref 1: 1 -> 1, 1 -> 2
    //   ref 2: 1 -> 2
    const std::vector<int> gen{0, 0, 1, 1, 2, 2}, ref{0, 0, 0, 1, 1, 2};
    const auto f = f1_scores(gen, ref, 3);
    const double f0 = 2 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0);
    const double f1 = 2 * 0.5 * 0.5 / 1.0;
    const double f2 = 2 * 0.5 * 1.0 / 1.5;
    CHECK(f.macro == doctest::Approx((f0 + f1 + f2) / 3.0));
    CHECK(f.micro == doctest::Approx(4.0 / 6.0));

    const auto perfect = f1_scores({0, 1, 2}, {0, 1, 2}, 3);
    CHECK(perfect.macro == 1.0);
    CHECK(perfect.micro == 1.0);
    const auto wrong = f1_scores({1, 2, 0}, {0, 1, 2}, 3);
    CHECK(wrong.macro == 0.0);
    CHECK(wrong.micro == 0.0);
    // Absent classes count as 0 in the macro average.
    CHECK(f1_scores({0, 0}, {0, 0}, 2).macro == doctest::Approx(0.5));
}

TEST_CASE("generation records") {
    GenerationRecord r;
    r.conv_id = "c1";
    r.turn_index = 2;
    r.context = "hi";
    r.reference = "hello there";
    r.hypothesis = "hello";
    r.decode_config = {{"strategy", "greedy"}};
    r.predicted_cluster = 1;
    r.reference_cluster = 0;
    std::stringstream buf;
    write_generations({r, r}, buf);
    const auto back = read_generations(buf);
    REQUIRE(back.size() == 2);
    CHECK(back[1].hypothesis == "hello");
    CHECK(back[1].decode_config == r.decode_config);

    std::stringstream bad;
    write_generations({r}, bad);
    bad << "{\"conv_id\": \"c2\"}\n";
    try {
        read_generations(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("evaluating a perfect copy") {
    auto corpus = testing_support::make_corpus(
        {{"hello there friend", "how are you", "good thanks"}, {"the weather is nice", "yes very sunny"}});
    const auto vocab = corpus::Vocab::build(corpus, 1);
    encoder::EncoderConfig ecfg;
    ecfg.dim = 8;
    const encoder::EncoderModel enc(ecfg, vocab.size());
    std::vector<std::vector<int>> seqs;
    for (const auto& conv : corpus.conversations)
        for (const auto& u : conv.utterances) seqs.push_back(corpus::tokenize(u.text, vocab));
    const Matrix emb = encoder::encode_all(seqs, enc);
    clustering::KMeansConfig kcfg;
    kcfg.k = 2;
    const auto clusters = clustering::spherical_kmeans(emb, kcfg);

    std::vector<GenerationRecord> records;
    for (const auto& conv : corpus.conversations)
        for (const auto& u : conv.utterances) {
            GenerationRecord r;
            r.conv_id = conv.id;
            r.reference = r.hypothesis = u.text;
            records.push_back(r);
        }
    const auto rep = evaluate_run(records, vocab, enc, clusters, kDefaultPhi, &emb);
    CHECK(rep.bleu1 == doctest::Approx(1.0));
    CHECK(rep.bleu2 == doctest::Approx(1.0));
    CHECK(rep.rouge_l == doctest::Approx(1.0));
    CHECK(rep.htha == 1.0);
    CHECK(rep.micro_f1 == 1.0);
    CHECK(rep.macro_f1 == 1.0);
    CHECK(rep.examples == 5);
    CHECK(rep.clusters == 2);
    REQUIRE(rep.stha.size() == kDefaultPhi.size());
    CHECK(rep.stha[0].second == rep.htha);
    CHECK(std::isfinite(rep.chi));

    const auto j = rep.to_json();
    CHECK(j.at("stha").at("1.00") == rep.htha);
    CHECK(j.at("config").at("k") == 2);
    CHECK(j.at("config").at("phi").size() == 5);
    CHECK(rep.to_table().find("STHA@0.85") != std::string::npos);

    const auto no_train = evaluate_run(records, vocab, enc, clusters);
    CHECK(no_train.to_json().at("chi").is_null());

    records[0].hypothesis = "";
    CHECK_NOTHROW(evaluate_run(records, vocab, enc, clusters));
}
