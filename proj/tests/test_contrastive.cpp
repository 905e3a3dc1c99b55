#include <doctest.h>

#include <cmath>

#include "ctrlstruct/contrastive.hpp"
#include "ctrlstruct/error.hpp"
#include "ctrlstruct/synthetic.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ctrlstruct;
using namespace ctrlstruct::contrastive;
using testing_support::random_matrix;
using testing_support::rel_err;
using namespace oracles;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
    Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

}  // namespace

TEST_CASE("cosine similarity") {
    Vector v(3), x(2), y(2), z(2);
    v << 1.0, -2.0, 0.5;
    x << 1.0, 0.0;
    y << 0.0, 1.0;
    z << 1.0, 1.0;
    CHECK(cosine_sim(v, v) == doctest::Approx(1.0));
    CHECK(cosine_sim(x, y) == 0.0);
    CHECK(cosine_sim(z, x) == doctest::Approx(0.70710678).epsilon(1e-8));
    CHECK_THROWS_AS(cosine_sim(x, Vector::Zero(2)), Error);
}

TEST_CASE("absolute correlation") {
    SUBCASE("N=1 leaves only the positive in the denominator") {
        const Matrix f = rows({{1.0, 2.0}}), s = rows({{-0.3, 0.4}});
        CHECK(std::abs(loss_ac(f, s, 0.05).value) < 1e-12);
    }
    SUBCASE("N=2 hand vectors, tau 1 and tau 0.05") {
        const Matrix f = rows({{1.0, 0.0}, {0.0, 1.0}});
        const Matrix s = rows({{1.0, 1.0}, {-1.0, 2.0}});
        CHECK(rel_err(loss_ac(f, s, 1.0).value, oracle_ac(f, s, 1.0)) < 1e-9);
        CHECK(rel_err(loss_ac(f, s, 0.05).value, oracle_ac(f, s, 0.05)) < 1e-9);
    }
}

TEST_CASE("strong relativity") {
    SUBCASE("N=2 orthogonal, tau 1: one denominator term") {
        const Matrix seq = rows({{1.0, 0.0}, {0.0, 1.0}});
        CHECK(std::abs(loss_sr(seq, {false}, 1.0).value) < 1e-12);
    }
    SUBCASE("N=3 hand vectors") {
        const Matrix seq = rows({{1.0, 0.2}, {0.3, 1.0}, {-0.5, 0.7}});
        CHECK(rel_err(loss_sr(seq, {false, false}, 1.0).value, oracle_sr(seq, {false, false}, 1.0)) < 1e-9);
    }
    SUBCASE("directional: anchoring a versus b differs") {
        const Matrix ab = rows({{1.0, 0.2, 0.0}, {0.3, 1.0, 0.1}, {-0.5, 0.7, 2.0}});
        Matrix ba = ab;
        ba.row(0) = ab.row(1);
        ba.row(1) = ab.row(0);
        const double forward = term(ab, 0, 1, 1.0), backward = term(ba, 0, 1, 1.0);
        CHECK(std::abs(forward - backward) > 1e-3);
    }
    SUBCASE("boundary pairs are skipped") {
        std::mt19937_64 rng(3);
        const Matrix seq = random_matrix(5, 4, rng);
        const std::vector<bool> b{false, true, false, true};
        CHECK(rel_err(loss_sr(seq, b, 0.1).value, oracle_sr(seq, b, 0.1)) < 1e-9);
        CHECK_THROWS_AS(loss_sr(seq, {true, true, true, true}, 0.1), Error);
    }
}

TEST_CASE("weak relativity") {
    const Matrix seq = rows({{1.0, 0.2}, {0.3, 1.0}, {-0.5, 0.7}});
    const std::vector<bool> b{false, false};
    // Same backward pairs in SR form: anchor i+1, positive i.
    const double sr_form = (term(seq, 1, 0, 1.0) + term(seq, 2, 1, 1.0)) / 2.0;

    SUBCASE("literal offset is -ln(lambda1)") {
        const double v = loss_wr(seq, b, 1.0, 0.2, WeakMode::Literal).value;
        CHECK(v - sr_form == doctest::Approx(1.60944).epsilon(1e-5));
        CHECK(rel_err(v, oracle_wr(seq, b, 1.0, 0.2, WeakMode::Literal)) < 1e-9);
    }
    SUBCASE("lambda1 = 1 literal equals the SR form") {
        CHECK(rel_err(loss_wr(seq, b, 1.0, 1.0, WeakMode::Literal).value, sr_form) < 1e-12);
    }
    SUBCASE("weighted scales the SR form") {
        CHECK(rel_err(loss_wr(seq, b, 1.0, 0.2, WeakMode::Weighted).value, 0.2 * sr_form) < 1e-9);
    }
    CHECK_THROWS_AS(loss_wr(seq, b, 1.0, 0.0, WeakMode::Literal), ConfigError);
}

TEST_CASE("total loss composition and ablations") {
    std::mt19937_64 rng(21);
    const Matrix f = random_matrix(4, 3, rng), s = random_matrix(4, 3, rng), seq = random_matrix(4, 3, rng);
    const std::vector<bool> b{false, false, false};
    ContrastiveConfig cfg;
    const auto full = total_loss(f, s, seq, b, cfg);
    const double want = oracle_ac(f, s, cfg.temperature) + oracle_sr(seq, b, cfg.temperature) +
                        oracle_wr(seq, b, cfg.temperature, cfg.lambda1, cfg.lambda1_mode);
    CHECK(rel_err(full.parts.total, want) < 1e-9);
    CHECK(full.parts.rc == doctest::Approx(full.parts.sr + full.parts.wr));

    cfg.ablation = Ablation::NoWeakRelativity;
    const auto no_wr = total_loss(f, s, seq, b, cfg);
    CHECK(no_wr.parts.wr == 0.0);
    CHECK(no_wr.parts.total == doctest::Approx(no_wr.parts.ac + no_wr.parts.sr));
    CHECK(no_wr.grad_seq.isApprox(loss_sr(seq, b, cfg.temperature).grad));

    const auto all_boundaries = total_loss(f, s, seq, {true, true, true}, ContrastiveConfig{});
    CHECK(all_boundaries.parts.rc == 0.0);
    CHECK(all_boundaries.grad_seq.isZero());
}

TEST_CASE("default hyperparameters are wired") {
    ContrastiveConfig cfg;
    CHECK(cfg.temperature == 0.05);
    CHECK(cfg.lambda1 == 0.2);
    CHECK(cfg.epochs == 20);
}

TEST_CASE("random tiny batches agree with the brute-force oracle") {
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<int> size(2, 8), dim(2, 8);
    std::uniform_real_distribution<double> taus(0.05, 1.0);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = size(rng), d = dim(rng);
        const double tau = taus(rng);
        const Matrix f = random_matrix(n, d, rng), s = random_matrix(n, d, rng), seq = random_matrix(n, d, rng);
        std::vector<bool> b(static_cast<std::size_t>(n - 1), false);
        for (std::size_t i = 0; i + 1 < b.size(); i += 3) b[i + 1] = trial % 2 == 0;
        CHECK(rel_err(loss_ac(f, s, tau).value, oracle_ac(f, s, tau)) < 1e-9);
        CHECK(rel_err(loss_sr(seq, b, tau).value, oracle_sr(seq, b, tau)) < 1e-9);
        for (auto mode : {WeakMode::Literal, WeakMode::Weighted}) {
            CHECK(rel_err(loss_wr(seq, b, tau, 0.2, mode).value, oracle_wr(seq, b, tau, 0.2, mode)) < 1e-9);
        }
    }
}

TEST_CASE("loss gradients with respect to representations match central differences") {
    std::mt19937_64 rng(77);
    const Matrix f = random_matrix(4, 5, rng), s = random_matrix(4, 5, rng), seq = random_matrix(4, 5, rng);
    const std::vector<bool> b{false, true, false};
    ContrastiveConfig cfg;
    cfg.lambda1_mode = WeakMode::Weighted;
    const auto out = total_loss(f, s, seq, b, cfg);
    auto value = [&](const Matrix& ff, const Matrix& ss, const Matrix& qq) {
        return total_loss(ff, ss, qq, b, cfg).parts.total;
    };
    const double h = 1e-6;
    double worst = 0.0;
    for (int which = 0; which < 3; ++which) {
        const Matrix& analytic = which == 0 ? out.grad_first : which == 1 ? out.grad_second : out.grad_seq;
        for (Eigen::Index i = 0; i < 4; ++i) {
            for (Eigen::Index j = 0; j < 5; ++j) {
                Matrix up[3] = {f, s, seq}, dn[3] = {f, s, seq};
                up[which](i, j) += h;
                dn[which](i, j) -= h;
                const double num = (value(up[0], up[1], up[2]) - value(dn[0], dn[1], dn[2])) / (2 * h);
                worst = std::max(worst, testing_support::grad_err(analytic(i, j), num, 1e-4));
            }
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("train_encoder") {
    synthetic::SyntheticConfig sc;
    sc.conversations = 12;
    sc.seed = 4;
    auto data = synthetic::make_synthetic(sc);
    const auto vocab = corpus::Vocab::build(data.corpus, 1);
    corpus::assign_tokens(data.corpus, vocab);
    encoder::EncoderConfig ec;
    ec.dim = 8;

    SUBCASE("learning rate 0 leaves parameters unchanged") {
        encoder::EncoderModel m(ec, vocab.size());
        const Matrix before = m.embedding.value;
        ContrastiveConfig cfg;
        cfg.epochs = 2;
        cfg.optimizer.learning_rate = 0.0;
        const auto h = train_encoder(m, data.corpus, vocab, cfg);
        CHECK(m.embedding.value == before);
        CHECK(h.epochs.size() == 2);
    }
    SUBCASE("step accounting: one epoch over two batches") {
        encoder::EncoderModel m(ec, vocab.size());
        ContrastiveConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = (data.corpus.utterance_count() + 1) / 2;
        const auto h = train_encoder(m, data.corpus, vocab, cfg);
        CHECK(h.steps == 2);
    }
    SUBCASE("no_total ablation skips training") {
        encoder::EncoderModel m(ec, vocab.size());
        const Matrix before = m.embedding.value;
        ContrastiveConfig cfg;
        cfg.ablation = Ablation::NoTotalLoss;
        const auto h = train_encoder(m, data.corpus, vocab, cfg);
        CHECK(m.embedding.value == before);
        CHECK(h.steps == 0);
    }
}

TEST_CASE("twenty epochs on a 200-conversation synthetic corpus lower the loss") {
    synthetic::SyntheticConfig sc;
    sc.conversations = 200;
    sc.seed = 9;
    auto data = synthetic::make_synthetic(sc);
    const auto vocab = corpus::Vocab::build(data.corpus, 1);
    corpus::assign_tokens(data.corpus, vocab);
    encoder::EncoderConfig ec;
    ec.dim = 16;
    encoder::EncoderModel m(ec, vocab.size());
    ContrastiveConfig cfg;
    cfg.seed = 2;
    const auto h = train_encoder(m, data.corpus, vocab, cfg);
    REQUIRE(h.epochs.size() == 20);
    CHECK(h.epochs.back().total < h.epochs.front().total);
}
