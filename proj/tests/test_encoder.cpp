#include <doctest.h>

#include "ctrlstruct/checkpoint.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/error.hpp"
#include "support.hpp"

using namespace ctrlstruct;
using namespace ctrlstruct::encoder;
using testing_support::random_matrix;

namespace {

Vector softmax(const Vector& v) {
    Vector e = (v.array() - v.maxCoeff()).exp().matrix();
    return e / e.sum();
}

// Plain matrix arithmetic, no tape.
Vector oracle_encode(const std::vector<int>& tokens, const EncoderModel& m) {
    const auto L = static_cast<Eigen::Index>(tokens.size());
    Matrix x(L, m.dim());
    for (Eigen::Index i = 0; i < L; ++i) x.row(i) = m.embedding.value.row(tokens[static_cast<std::size_t>(i)]);
    if (m.config().use_attention) {
        Matrix o = Matrix::Zero(L, m.dim());
        for (const auto& h : m.attention.heads) {
            const Matrix q = x * h.query.value, k = x * h.key.value, v = x * h.value.value;
            const double s = 1.0 / std::sqrt(static_cast<double>(h.query.value.cols()));
            Matrix a(L, L);
            for (Eigen::Index i = 0; i < L; ++i) a.row(i) = softmax((q.row(i) * k.transpose() * s).transpose()).transpose();
            o += a * v * h.output.value;
        }
        x += o;
    }
    const Vector pooled = x.colwise().mean().transpose();
    const Vector hidden =
        (pooled.transpose() * m.proj_hidden.weight.value + m.proj_hidden.bias.value).array().tanh().matrix().transpose();
    return pooled + (hidden.transpose() * m.proj_out.weight.value + m.proj_out.bias.value).transpose();
}

}  // namespace

TEST_CASE("single token with attention off and identity projection returns its embedding") {
    EncoderConfig cfg;
    cfg.dim = 8;
    cfg.use_attention = false;
    cfg.identity_projection = true;
    EncoderModel m(cfg, 20);
    const std::vector<int> one{7};
    const Vector h = encode(one, m);
    CHECK((h - m.embedding.value.row(7).transpose()).norm() < 1e-15);

    const std::vector<int> two{7, 7};
    CHECK((encode(two, m) - h).norm() < 1e-15);
}

TEST_CASE("forward pass matches an independent evaluation") {
    EncoderConfig cfg;
    cfg.dim = 8;
    cfg.seed = 3;
    EncoderModel m(cfg, 20);
    const std::vector<int> toks{6, 11, 19};
    const Vector got = encode(toks, m);
    const Vector want = oracle_encode(toks, m);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-9);

    cfg.use_attention = false;
    EncoderModel plain(cfg, 20);
    CHECK((encode(toks, plain) - oracle_encode(toks, plain)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("padding is ignored by pooling and attention") {
    EncoderConfig cfg;
    cfg.dim = 8;
    EncoderModel m(cfg, 20);
    const std::vector<int> a{6, 9}, b{6, 9, corpus::Vocab::kPad};
    CHECK((encode(a, m) - encode(b, m)).norm() < 1e-12);
    const std::vector<int> pads{corpus::Vocab::kPad, corpus::Vocab::kPad};
    CHECK_THROWS_AS(encode(pads, m), Error);
}

TEST_CASE("eval mode is deterministic, train mode depends on the dropout seed") {
    EncoderConfig cfg;
    cfg.dim = 16;
    cfg.dropout_rate = 0.3;
    EncoderModel m(cfg, 30);
    const std::vector<int> toks{6, 7, 8, 9};
    CHECK(encode(toks, m) == encode(toks, m));
    const Vector t1 = encode(toks, m, {Mode::Train, 1});
    CHECK(t1 == encode(toks, m, {Mode::Train, 1}));
    CHECK(t1 != encode(toks, m, {Mode::Train, 2}));
}

TEST_CASE("encoder gradients") {
    EncoderConfig cfg;
    cfg.dim = 8;
    cfg.dropout_rate = 0.2;
    cfg.seed = 4;
    EncoderModel m(cfg, 20);
    const std::vector<std::vector<int>> seqs{{6, 7, 8}, {9, 10}, {11, 12, 13, 6}};
    const std::vector<EncodeOptions> opts{{Mode::Train, 1}, {Mode::Train, 2}, {Mode::Eval, 0}};
    std::mt19937_64 rng(8);
    const Matrix upstream = random_matrix(3, 8, rng);

    SUBCASE("zero upstream gives zero gradients") {
        const auto g = encode_gradients(seqs, opts, m, Matrix::Zero(3, 8));
        for (const auto& [name, grad] : g) CHECK_MESSAGE(grad.isZero(), name);
    }
    SUBCASE("reproducible bit for bit") {
        const auto g1 = encode_gradients(seqs, opts, m, upstream);
        const auto g2 = encode_gradients(seqs, opts, m, upstream);
        for (const auto& [name, grad] : g1) CHECK(grad == g2.at(name));
    }
    SUBCASE("central differences with eps 1e-4") {
        const auto grads = encode_gradients(seqs, opts, m, upstream);
        auto params = m.parameters();
        std::vector<Matrix> analytic;
        for (auto* p : params) analytic.push_back(grads.at(p->name));
        auto loss = [&]() {
            double s = 0.0;
            for (std::size_t i = 0; i < seqs.size(); ++i)
                s += upstream.row(static_cast<Eigen::Index>(i)).dot(encode(seqs[i], m, opts[i]).transpose());
            return s;
        };
        std::string worst;
        const double err = testing_support::max_param_grad_err(params, analytic, loss, 1e-4, 1, &worst);
        CHECK_MESSAGE(err < 1e-4, worst);
    }
}

TEST_CASE("checkpoint round trip and header checks") {
    testing_support::TempDir dir("encoder");
    EncoderConfig cfg;
    cfg.dim = 8;
    cfg.seed = 12;
    EncoderModel m(cfg, 20);
    const auto path = dir / "enc.json";
    save_checkpoint(m, "abc", path);

    const EncoderModel back = load_checkpoint(path, "abc");
    const auto a = m.parameters();
    const auto b = back.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);

    CHECK_THROWS_AS(load_checkpoint(path, "other"), CheckpointError);

    auto text = testing_support::read_file(path);
    const auto at = text.find("\"format_version\":1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 18, "\"format_version\":7");
    testing_support::write_file(path, text);
    try {
        load_checkpoint(path, "abc");
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        const std::string what = e.what();
        CHECK(what.find('7') != std::string::npos);
        CHECK(what.find('1') != std::string::npos);
    }
}

TEST_CASE("invalid configuration") {
    EncoderConfig cfg;
    cfg.dim = 1;
    CHECK_THROWS_AS(EncoderModel(cfg, 10), ConfigError);
    cfg.dim = 8;
    cfg.dropout_rate = 1.0;
    CHECK_THROWS_AS(EncoderModel(cfg, 10), ConfigError);
}
