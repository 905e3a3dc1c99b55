#include "ctrlstruct/contrastive.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::contrastive {

using nlohmann::json;

std::string_view to_string(WeakMode m) { return m == WeakMode::Literal ? "literal" : "weighted"; }

std::string_view to_string(Ablation a) {
    switch (a) {
        case Ablation::Full: return "full";
        case Ablation::NoWeakRelativity: return "no_wr";
        case Ablation::NoTotalLoss: return "no_total";
    }
    return "?";
}

WeakMode weak_mode_from_string(std::string_view s) {
    if (s == "literal") return WeakMode::Literal;
    if (s == "weighted") return WeakMode::Weighted;
    throw ConfigError("lambda1_mode must be 'literal' or 'weighted'");
}

Ablation ablation_from_string(std::string_view s) {
    for (auto a : {Ablation::Full, Ablation::NoWeakRelativity, Ablation::NoTotalLoss})
        if (to_string(a) == s) return a;
    throw ConfigError("ablation must be one of full, no_wr, no_total");
}

void ContrastiveConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("contrastive.temperature must be > 0");
    if (!(lambda1 > 0.0 && lambda1 <= 1.0)) throw ConfigError("contrastive.lambda1 must be in (0,1]");
    if (batch_size < 2) throw ConfigError("contrastive.batch_size must be >= 2");
    if (epochs < 0) throw ConfigError("contrastive.epochs must be >= 0");
}

json ContrastiveConfig::to_json() const {
    json views = json::array();
    for (const auto& s : view_strategies) views.push_back({{"kind", corpus::to_string(s.kind)}, {"rate", s.rate}});
    return json{{"temperature", temperature},
                {"lambda1", lambda1},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", optimizer.learning_rate},
                {"beta1", optimizer.beta1},
                {"beta2", optimizer.beta2},
                {"epsilon", optimizer.epsilon},
                {"lambda1_mode", to_string(lambda1_mode)},
                {"ablation", to_string(ablation)},
                {"seed", seed},
                {"view_strategies", views}};
}

json LossBreakdown::to_json() const {
    return json{{"loss_ac", ac}, {"loss_sr", sr}, {"loss_wr", wr}, {"loss_rc", rc}, {"loss_total", total}};
}

double cosine_sim(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw Error("cosine_sim: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw Error("cosine_sim: zero-norm vector");
    return a.dot(b) / (na * nb);
}

namespace {

struct Term {
    Eigen::Index anchor;
    Eigen::Index positive;
    double weight;
};

Matrix normalize_rows(const Matrix& h, Vector& norms) {
    norms = h.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i)
        if (norms(i) == 0.0) throw Error("contrastive loss: zero-norm representation");
    return norms.cwiseInverse().asDiagonal() * h;
}

// Sum over terms of weight * (-s(a,p)/tau + logsumexp_{j != a} s(a,j)/tau), with
// the gradient taken through the row normalization.
LossGrad anchor_terms(const Matrix& h, const std::vector<Term>& terms, double tau) {
    Vector norms;
    const Matrix u = normalize_rows(h, norms);
    const Matrix s = (u * u.transpose()) / tau;
    const Eigen::Index m = h.rows();
    Matrix ds = Matrix::Zero(m, m);
    double value = 0.0;
    for (const auto& t : terms) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != t.anchor) mx = std::max(mx, s(t.anchor, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != t.anchor) z += std::exp(s(t.anchor, j) - mx);
        const double lse = mx + std::log(z);
        value += t.weight * (lse - s(t.anchor, t.positive));
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != t.anchor) ds(t.anchor, j) += t.weight * std::exp(s(t.anchor, j) - lse);
        ds(t.anchor, t.positive) -= t.weight;
    }
    // s = u u^T / tau  =>  du = (ds + ds^T) u / tau
    const Matrix du = ((ds + ds.transpose()) * u) / tau;
    // u = h / |h|  =>  dh = (du - u (u . du)) / |h|
    Matrix dh(m, h.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
        const double proj = u.row(i).dot(du.row(i));
        dh.row(i) = (du.row(i) - proj * u.row(i)) / norms(i);
    }
    return {value, std::move(dh)};
}

std::vector<Eigen::Index> valid_pairs(Eigen::Index n, const std::vector<bool>& crosses_boundary) {
    if (static_cast<Eigen::Index>(crosses_boundary.size()) != std::max<Eigen::Index>(n - 1, 0)) {
        throw Error("boundary mask must have one entry per adjacent pair");
    }
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i + 1 < n; ++i)
        if (!crosses_boundary[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
}

LossGrad sr_impl(const Matrix& seq, const std::vector<Eigen::Index>& pairs, double tau) {
    std::vector<Term> terms;
    const double w = 1.0 / static_cast<double>(pairs.size());
    for (auto i : pairs) terms.push_back({i, i + 1, w});
    return anchor_terms(seq, terms, tau);
}

LossGrad wr_impl(const Matrix& seq, const std::vector<Eigen::Index>& pairs, double tau, double lambda1,
                 WeakMode mode) {
    std::vector<Term> terms;
    const double w = (mode == WeakMode::Weighted ? lambda1 : 1.0) / static_cast<double>(pairs.size());
    for (auto i : pairs) terms.push_back({i + 1, i, w});
    LossGrad out = anchor_terms(seq, terms, tau);
    // Literal: each term carries -ln(lambda1); averaged over the pairs it stays -ln(lambda1).
    if (mode == WeakMode::Literal) out.value -= std::log(lambda1);
    return out;
}

void check_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be > 0");
}

}  // namespace

LossGrad loss_ac(const Matrix& first, const Matrix& second, double tau) {
    check_tau(tau);
    const Eigen::Index n = first.rows();
    if (n == 0) throw Error("loss_ac: empty batch");
    if (second.rows() != n || second.cols() != first.cols()) throw Error("loss_ac: view shapes differ");
    Matrix all(2 * n, first.cols());
    all << first, second;
    std::vector<Term> terms;
    const double w = 1.0 / (2.0 * static_cast<double>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        terms.push_back({i, n + i, w});
        terms.push_back({n + i, i, w});
    }
    return anchor_terms(all, terms, tau);
}

LossGrad loss_sr(const Matrix& seq, const std::vector<bool>& crosses_boundary, double tau) {
    check_tau(tau);
    if (seq.rows() < 2) throw Error("loss_sr: need at least 2 utterances");
    const auto pairs = valid_pairs(seq.rows(), crosses_boundary);
    if (pairs.empty()) throw Error("loss_sr: no valid adjacent pair");
    return sr_impl(seq, pairs, tau);
}

LossGrad loss_wr(const Matrix& seq, const std::vector<bool>& crosses_boundary, double tau, double lambda1,
                 WeakMode mode) {
    check_tau(tau);
    if (!(lambda1 > 0.0)) throw ConfigError("lambda1 must be > 0");
    if (seq.rows() < 2) throw Error("loss_wr: need at least 2 utterances");
    const auto pairs = valid_pairs(seq.rows(), crosses_boundary);
    if (pairs.empty()) throw Error("loss_wr: no valid adjacent pair");
    return wr_impl(seq, pairs, tau, lambda1, mode);
}

BatchLoss total_loss(const Matrix& first, const Matrix& second, const Matrix& seq,
                     const std::vector<bool>& crosses_boundary, const ContrastiveConfig& config) {
    BatchLoss out;
    const Eigen::Index n = seq.rows();
    auto ac = loss_ac(first, second, config.temperature);
    out.parts.ac = ac.value;
    out.grad_first = ac.grad.topRows(n);
    out.grad_second = ac.grad.bottomRows(n);
    out.grad_seq = Matrix::Zero(n, seq.cols());

    const auto pairs = valid_pairs(n, crosses_boundary);
    if (!pairs.empty()) {
        auto sr = sr_impl(seq, pairs, config.temperature);
        out.parts.sr = sr.value;
        out.grad_seq += sr.grad;
        if (config.ablation != Ablation::NoWeakRelativity) {
            auto wr = wr_impl(seq, pairs, config.temperature, config.lambda1, config.lambda1_mode);
            out.parts.wr = wr.value;
            out.grad_seq += wr.grad;
        }
    }
    out.parts.rc = out.parts.sr + out.parts.wr;
    out.parts.total = out.parts.ac + out.parts.rc;
    return out;
}

TrainHistory train_encoder(encoder::EncoderModel& model, const corpus::Corpus& corpus, const corpus::Vocab& vocab,
                           const ContrastiveConfig& config, const corpus::SynonymTable* synonyms) {
    config.validate();
    TrainHistory history;
    if (config.ablation == Ablation::NoTotalLoss) return history;
    if (corpus.conversations.empty()) throw ConfigError("train_encoder: empty corpus");

    const auto start = std::chrono::steady_clock::now();
    nn::Adam optimizer(model.parameters(), config.optimizer);
    std::mt19937_64 rng(config.seed);
    corpus::BatchConfig batch_config{config.batch_size, config.view_strategies};

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = corpus::batch_stream(corpus, batch_config, rng(), vocab, synonyms);
        LossBreakdown mean;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            encoder::EncoderTape tape(model);
            const std::size_t n = batch.size();
            for (std::size_t i = 0; i < n; ++i) tape.add(batch.tokens[i], {encoder::Mode::Train, rng()});
            for (std::size_t i = 0; i < n; ++i) tape.add(batch.first_views[i].tokens, {encoder::Mode::Train, rng()});
            for (std::size_t i = 0; i < n; ++i) tape.add(batch.second_views[i].tokens, {encoder::Mode::Train, rng()});
            const Matrix out = tape.outputs();
            const auto ni = static_cast<Eigen::Index>(n);
            const Matrix seq = out.topRows(ni);
            const Matrix first = out.middleRows(ni, ni);
            const Matrix second = out.bottomRows(ni);
            auto loss = total_loss(first, second, seq, batch.crosses_boundary, config);
            if (!std::isfinite(loss.parts.total)) {
                throw NumericalError("contrastive loss became non-finite at epoch " + std::to_string(epoch + 1) +
                                     ", batch " + std::to_string(b + 1));
            }
            Matrix upstream(3 * ni, out.cols());
            upstream << loss.grad_seq, loss.grad_first, loss.grad_second;
            tape.backward(upstream);
            optimizer.step();
            ++history.steps;
            mean.ac += loss.parts.ac;
            mean.sr += loss.parts.sr;
            mean.wr += loss.parts.wr;
            mean.rc += loss.parts.rc;
            mean.total += loss.parts.total;
        }
        const double k = batches.empty() ? 1.0 : static_cast<double>(batches.size());
        mean.ac /= k;
        mean.sr /= k;
        mean.wr /= k;
        mean.rc /= k;
        mean.total /= k;
        history.epochs.push_back(mean);
    }
    if (!nn::all_finite(model.parameters())) throw NumericalError("encoder parameters became non-finite");
    history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return history;
}

}  // namespace ctrlstruct::contrastive
