#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace ctrlstruct::corpus {

enum class Speaker { A, B };

std::string_view to_string(Speaker s);

struct Utterance {
    std::string conv_id;
    int turn_index{0};
    Speaker speaker{Speaker::A};
    std::string text;
    std::vector<int> tokens;  // filled by assign_tokens
};

struct Conversation {
    std::string id;
    std::vector<Utterance> utterances;
};

struct Corpus {
    std::vector<Conversation> conversations;

    std::size_t utterance_count() const;
    /// Number of (utterance, successor) pairs inside conversations.
    std::size_t transition_count() const;
};

struct ParseResult {
    Corpus corpus;
    std::size_t skipped_short{0};  // conversations with fewer than 2 utterances
};

/// JSONL: one {"id", "utterances": [{"speaker", "text"}, ...]} object per line.
ParseResult parse_jsonl(std::istream& in);
ParseResult parse_jsonl(const std::filesystem::path& path);

/// DailyDialog text: one conversation per line, utterances split by `__eou__`.
ParseResult parse_dailydialog(std::istream& in);
ParseResult parse_dailydialog(const std::filesystem::path& path);

void write_jsonl(const Corpus& corpus, std::ostream& out);

/// Deterministic split: the last `test_fraction` of conversations (file order)
/// form the test part; at least one conversation always stays in training.
std::pair<Corpus, Corpus> split(const Corpus& corpus, double test_fraction);

// ---------------------------------------------------------------------------
// Tokenization

inline constexpr std::size_t kDefaultMaxTokens = 32;

/// Lowercased words; whitespace separates, each punctuation character is its own word.
std::vector<std::string> split_words(std::string_view text);

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr int kSpeakerA = 4;
    static constexpr int kSpeakerB = 5;
    static constexpr int kNumSpecial = 6;

    /// Words with frequency >= min_freq, ordered by descending count then lexicographically.
    static Vocab build(const Corpus& corpus, int min_freq = 2);
    static Vocab from_tokens(std::vector<std::string> tokens, int min_freq);

    int id(std::string_view word) const;
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(id_to_token_.size()); }
    int min_freq() const { return min_freq_; }
    bool contains(std::string_view word) const;
    static bool is_special(int id) { return id < kNumSpecial; }

    /// SHA-256 over the ordered token list; identifies the id assignment.
    std::string hash() const;

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    int min_freq_{2};
};

/// Words -> ids (OOV -> UNK), truncated on the right to max_tokens.
std::vector<int> tokenize(std::string_view text, const Vocab& vocab,
                          std::size_t max_tokens = kDefaultMaxTokens);

/// Joins ids back to space-separated words (specials other than UNK dropped).
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

/// Fills Utterance::tokens for every utterance of the corpus.
void assign_tokens(Corpus& corpus, const Vocab& vocab, std::size_t max_tokens = kDefaultMaxTokens);

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentationKind { ContextInsert, RandomReplace, SynonymSub, Dropout };

std::string_view to_string(AugmentationKind k);
AugmentationKind augmentation_from_string(std::string_view s);

struct AugmentationStrategy {
    AugmentationKind kind{AugmentationKind::Dropout};
    double rate{0.0};
};

/// word id -> synonym ids (only synonyms present in the vocabulary are kept).
using SynonymTable = std::unordered_map<int, std::vector<int>>;

/// TSV lexicon: `word<TAB>syn1,syn2,...` per line.
SynonymTable load_synonyms(std::istream& in, const Vocab& vocab);
SynonymTable load_synonyms(const std::filesystem::path& path, const Vocab& vocab);

struct UtteranceView {
    std::vector<int> tokens;
    bool dropout{false};  // encoder applies an independent dropout mask
};

struct AugmentContext {
    const Vocab* vocab{nullptr};
    const Conversation* conversation{nullptr};  // required by ContextInsert
    const SynonymTable* synonyms{nullptr};      // required by SynonymSub
};

/// Number of edit positions for a rate over `len` tokens (round half up).
std::size_t edit_count(double rate, std::size_t len);

UtteranceView augment(const Utterance& u, const AugmentationStrategy& s, std::uint64_t seed,
                      const AugmentContext& ctx);

// ---------------------------------------------------------------------------
// Batching

struct UtteranceRef {
    int conversation{0};
    int turn{0};
};

struct Batch {
    std::vector<UtteranceRef> refs;
    std::vector<std::vector<int>> tokens;
    /// crosses_boundary[i] is true when positions (i, i+1) belong to different conversations.
    std::vector<bool> crosses_boundary;
    std::vector<UtteranceView> first_views;
    std::vector<UtteranceView> second_views;

    std::size_t size() const { return refs.size(); }
};

struct BatchConfig {
    std::size_t batch_size{32};
    /// Each view draws one of these uniformly; Dropout-only by default.
    std::vector<AugmentationStrategy> view_strategies{{AugmentationKind::Dropout, 0.0}};
};

/// One epoch of contiguous batches over a seeded conversation-order shuffle.
std::vector<Batch> batch_stream(const Corpus& corpus, const BatchConfig& config, std::uint64_t seed,
                                const Vocab& vocab, const SynonymTable* synonyms = nullptr);

}  // namespace ctrlstruct::corpus
