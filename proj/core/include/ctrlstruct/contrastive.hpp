#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/nn/layers.hpp"

namespace ctrlstruct::contrastive {

using nn::Matrix;
using nn::Vector;

/// Where the weak-relativity coefficient enters the loss.
enum class WeakMode {
    Literal,   // inside the log: -log(lambda1 * e^s / sum), a constant offset of -ln(lambda1)
    Weighted,  // outside: lambda1 * (-log(e^s / sum))
};

enum class Ablation {
    Full,
    NoWeakRelativity,  // loss_wr dropped from the total
    NoTotalLoss,       // no contrastive training at all; encoder stays at init
};

std::string_view to_string(WeakMode m);
std::string_view to_string(Ablation a);
WeakMode weak_mode_from_string(std::string_view s);
Ablation ablation_from_string(std::string_view s);

struct ContrastiveConfig {
    double temperature{0.05};
    double lambda1{0.2};
    int epochs{20};
    /// Desk-scale default; 256 (main setup) and 128 (appendix) are the reported values.
    std::size_t batch_size{32};
    nn::AdamConfig optimizer{};
    WeakMode lambda1_mode{WeakMode::Literal};
    Ablation ablation{Ablation::Full};
    std::uint64_t seed{0};
    /// Each view draws one strategy uniformly from this list. synonym_sub
    /// needs a lexicon, so it is left out of the default.
    std::vector<corpus::AugmentationStrategy> view_strategies{{corpus::AugmentationKind::ContextInsert, 0.2},
                                                              {corpus::AugmentationKind::RandomReplace, 0.2},
                                                              {corpus::AugmentationKind::Dropout, 0.0}};

    void validate() const;
    nlohmann::json to_json() const;
};

struct LossBreakdown {
    double ac{0.0};
    double sr{0.0};
    double wr{0.0};
    double rc{0.0};
    double total{0.0};

    nlohmann::json to_json() const;
};

/// A scalar loss together with its gradient with respect to the input rows.
struct LossGrad {
    double value{0.0};
    Matrix grad;
};

/// a.b / (|a||b|); throws on a zero vector.
double cosine_sim(const Vector& a, const Vector& b);

/// Absolute correlation over paired views (row i of `first` with row i of
/// `second`). Every anchor is contrasted with the other 2N-1 views; the result
/// is the symmetric average over both view orders. Gradient rows are
/// [d first; d second].
LossGrad loss_ac(const Matrix& first, const Matrix& second, double tau);

/// Strong relativity: anchor i, positive i+1, for every adjacent pair whose
/// `crosses_boundary` flag is false; averaged over those pairs.
LossGrad loss_sr(const Matrix& seq, const std::vector<bool>& crosses_boundary, double tau);

/// Weak relativity: anchor i+1, positive i, same pair set and normalizer as loss_sr.
LossGrad loss_wr(const Matrix& seq, const std::vector<bool>& crosses_boundary, double tau, double lambda1,
                 WeakMode mode);

struct BatchLoss {
    LossBreakdown parts;
    Matrix grad_seq;
    Matrix grad_first;
    Matrix grad_second;
};

/// loss_total = loss_ac + loss_sr + loss_wr (ablation aware). A batch without
/// any valid adjacent pair contributes zero relative-correlation loss.
BatchLoss total_loss(const Matrix& first, const Matrix& second, const Matrix& seq,
                     const std::vector<bool>& crosses_boundary, const ContrastiveConfig& config);

struct TrainHistory {
    std::vector<LossBreakdown> epochs;
    std::int64_t steps{0};
    double wall_seconds{0.0};
};

/// Optimizes `model` in place on the total contrastive loss.
/// Throws NumericalError naming epoch and batch if the loss turns non-finite.
TrainHistory train_encoder(encoder::EncoderModel& model, const corpus::Corpus& corpus, const corpus::Vocab& vocab,
                           const ContrastiveConfig& config, const corpus::SynonymTable* synonyms = nullptr);

}  // namespace ctrlstruct::contrastive
