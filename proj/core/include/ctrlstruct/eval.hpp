#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/encoder.hpp"

namespace ctrlstruct::eval {

using nn::Matrix;
using Sentence = std::vector<std::string>;

/// Floor for zero-count n-gram precisions.
inline constexpr double kBleuEpsilon = 1e-9;

/// Soft topic-hit thresholds, strictest first.
inline const std::vector<double> kDefaultPhi{1.0, 0.95, 0.90, 0.85, 0.80};

/// Corpus BLEU: clipped n-gram precisions for orders 1..max_n, geometric mean,
/// times the brevity penalty over total lengths.
double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references, int max_n);

/// Unique n-grams over total n-grams, pooled across all hypotheses.
double distinct_n(const std::vector<Sentence>& hypotheses, int n);

std::size_t lcs_length(const Sentence& a, const Sentence& b);

/// Mean over pairs of the balanced LCS F1.
double rouge_l(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references);

/// Fraction of pairs whose centers have cosine >= phi; equal labels always hit.
double topic_hit(const std::vector<int>& generated, const std::vector<int>& reference, const Matrix& centers,
                 double phi);

struct F1Scores {
    double macro{0.0};
    double micro{0.0};
};

/// Per-class F1 with 0/0 = 0, macro-averaged over all k classes; micro pools counts.
F1Scores f1_scores(const std::vector<int>& generated, const std::vector<int>& reference, int k);

/// One line of a generation output file.
struct GenerationRecord {
    std::string conv_id;
    int turn_index{0};
    std::string context;
    std::string reference;
    std::string hypothesis;
    nlohmann::json decode_config;
    int predicted_cluster{-1};
    int reference_cluster{-1};

    nlohmann::json to_json() const;
};

void write_generations(const std::vector<GenerationRecord>& records, std::ostream& out);
/// Throws ParseError naming the line of the first schema violation.
std::vector<GenerationRecord> read_generations(std::istream& in);
std::vector<GenerationRecord> read_generations(const std::filesystem::path& path);

struct EvalReport {
    double bleu1{0.0};
    double bleu2{0.0};
    double distinct1{0.0};
    double distinct2{0.0};
    double rouge_l{0.0};
    double htha{0.0};
    std::vector<std::pair<double, double>> stha;  // (phi, value) in the order given
    double macro_f1{0.0};
    double micro_f1{0.0};
    double chi{0.0};
    double dbi{0.0};
    std::size_t examples{0};
    int clusters{0};
    nlohmann::json config;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

/// Pseudo-labels both sides with encoder + nearest center and assembles every
/// metric. CHI/DBI are computed on `train_embeddings` with the fitted labels
/// when given. An empty hypothesis is encoded as a single UNK token.
EvalReport evaluate_run(const std::vector<GenerationRecord>& records, const corpus::Vocab& vocab,
                        const encoder::EncoderModel& encoder, const clustering::TopicClusters& clusters,
                        const std::vector<double>& phi = kDefaultPhi, const Matrix* train_embeddings = nullptr);

}  // namespace ctrlstruct::eval
