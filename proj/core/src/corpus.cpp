#include "ctrlstruct/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ctrlstruct/error.hpp"
#include "ctrlstruct/hash.hpp"

namespace ctrlstruct::corpus {

using nlohmann::json;

std::string_view to_string(Speaker s) { return s == Speaker::A ? "A" : "B"; }

std::size_t Corpus::utterance_count() const {
    std::size_t n = 0;
    for (const auto& c : conversations) n += c.utterances.size();
    return n;
}

std::size_t Corpus::transition_count() const {
    std::size_t n = 0;
    for (const auto& c : conversations)
        if (!c.utterances.empty()) n += c.utterances.size() - 1;
    return n;
}

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

// Speakers are assigned by alternation from the first utterance.
Conversation make_conversation(std::string id, const std::vector<std::string>& texts) {
    Conversation conv;
    conv.id = std::move(id);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Utterance u;
        u.conv_id = conv.id;
        u.turn_index = static_cast<int>(i);
        u.speaker = (i % 2 == 0) ? Speaker::A : Speaker::B;
        u.text = texts[i];
        conv.utterances.push_back(std::move(u));
    }
    return conv;
}

void add_or_skip(ParseResult& result, std::string id, std::vector<std::string> texts, std::size_t line) {
    if (texts.size() < 2) {
        ++result.skipped_short;
        spdlog::warn("line {}: conversation '{}' has {} utterance(s); skipped", line, id, texts.size());
        return;
    }
    result.corpus.conversations.push_back(make_conversation(std::move(id), texts));
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus file " + path.string());
    return in;
}

}  // namespace

ParseResult parse_jsonl(std::istream& in) {
    ParseResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
        }
        if (!obj.is_object() || !obj.contains("utterances") || !obj["utterances"].is_array()) {
            throw ParseError("expected object with an \"utterances\" array", line_no);
        }
        std::string id;
        if (obj.contains("id")) {
            id = obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump();
        } else {
            id = "conv-" + std::to_string(line_no);
        }
        std::vector<std::string> texts;
        for (const auto& u : obj["utterances"]) {
            if (!u.is_object() || !u.contains("text") || !u["text"].is_string()) {
                throw ParseError("utterance without string \"text\"", line_no);
            }
            std::string text = trim(u["text"].get<std::string>());
            if (text.empty()) throw ParseError("empty utterance text", line_no);
            texts.push_back(std::move(text));
        }
        add_or_skip(result, std::move(id), std::move(texts), line_no);
    }
    return result;
}

ParseResult parse_jsonl(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    return parse_jsonl(in);
}

ParseResult parse_dailydialog(std::istream& in) {
    static constexpr std::string_view kSep = "__eou__";
    ParseResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        std::vector<std::string> segments;
        std::size_t start = 0;
        while (true) {
            auto pos = line.find(kSep, start);
            segments.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
            if (pos == std::string::npos) break;
            start = pos + kSep.size();
        }
        if (!segments.empty() && segments.back().empty()) segments.pop_back();
        for (const auto& s : segments) {
            if (s.empty()) throw ParseError("empty utterance text", line_no);
        }
        add_or_skip(result, "dd-" + std::to_string(line_no), std::move(segments), line_no);
    }
    return result;
}

ParseResult parse_dailydialog(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    return parse_dailydialog(in);
}

void write_jsonl(const Corpus& corpus, std::ostream& out) {
    for (const auto& conv : corpus.conversations) {
        json utts = json::array();
        for (const auto& u : conv.utterances) {
            utts.push_back({{"speaker", std::string(to_string(u.speaker))}, {"text", u.text}});
        }
        out << json{{"id", conv.id}, {"utterances", utts}}.dump() << '\n';
    }
}

std::pair<Corpus, Corpus> split(const Corpus& corpus, double test_fraction) {
    if (test_fraction < 0.0 || test_fraction >= 1.0) throw ConfigError("test_fraction must be in [0,1)");
    const std::size_t n = corpus.conversations.size();
    std::size_t n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n)));
    if (n_test >= n) n_test = n > 0 ? n - 1 : 0;
    Corpus train, test;
    train.conversations.assign(corpus.conversations.begin(), corpus.conversations.end() - static_cast<std::ptrdiff_t>(n_test));
    test.conversations.assign(corpus.conversations.end() - static_cast<std::ptrdiff_t>(n_test), corpus.conversations.end());
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (c < 128 && std::ispunct(c)) {
            flush();
            words.emplace_back(1, ch);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return words;
}

namespace {

const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> kSpecial = {"<pad>", "<unk>", "<s>", "</s>", "[A]", "[B]"};
    return kSpecial;
}

}  // namespace

Vocab Vocab::from_tokens(std::vector<std::string> tokens, int min_freq) {
    Vocab v;
    v.min_freq_ = min_freq;
    v.id_to_token_ = std::move(tokens);
    for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
        if (!v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int>(i)).second) {
            throw ParseError("duplicate vocabulary token '" + v.id_to_token_[i] + "'");
        }
    }
    if (v.id_to_token_.size() < static_cast<std::size_t>(kNumSpecial) ||
        !std::equal(special_tokens().begin(), special_tokens().end(), v.id_to_token_.begin())) {
        throw ParseError("vocabulary does not start with the special tokens");
    }
    return v;
}

Vocab Vocab::build(const Corpus& corpus, int min_freq) {
    if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
    std::map<std::string, std::size_t> counts;
    for (const auto& conv : corpus.conversations)
        for (const auto& u : conv.utterances)
            for (auto& w : split_words(u.text)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [w, c] : counts) {
        if (c >= static_cast<std::size_t>(min_freq) &&
            std::find(special_tokens().begin(), special_tokens().end(), w) == special_tokens().end()) {
            kept.emplace_back(w, c);
        }
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens = special_tokens();
    for (auto& [w, c] : kept) tokens.push_back(w);
    return from_tokens(std::move(tokens), min_freq);
}

int Vocab::id(std::string_view word) const {
    auto it = token_to_id_.find(std::string(word));
    return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view word) const { return token_to_id_.count(std::string(word)) > 0; }

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw Error("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Vocab::hash() const {
    std::string joined;
    for (const auto& t : id_to_token_) {
        joined += t;
        joined.push_back('\n');
    }
    return sha256_hex(joined);
}

json Vocab::to_json() const { return json{{"min_freq", min_freq_}, {"tokens", id_to_token_}}; }

Vocab Vocab::from_json(const json& j) {
    return from_tokens(j.at("tokens").get<std::vector<std::string>>(), j.at("min_freq").get<int>());
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab, std::size_t max_tokens) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
        if (ids.size() >= max_tokens) break;
        ids.push_back(vocab.id(w));
    }
    return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (Vocab::is_special(id) && id != Vocab::kUnk) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

void assign_tokens(Corpus& corpus, const Vocab& vocab, std::size_t max_tokens) {
    for (auto& conv : corpus.conversations) {
        for (auto& u : conv.utterances) {
            u.tokens = tokenize(u.text, vocab, max_tokens);
            if (u.tokens.empty()) {
                throw ParseError("utterance " + conv.id + "/" + std::to_string(u.turn_index) +
                                 " is empty after tokenization");
            }
        }
    }
}

// ---------------------------------------------------------------------------

std::string_view to_string(AugmentationKind k) {
    switch (k) {
        case AugmentationKind::ContextInsert: return "context_insert";
        case AugmentationKind::RandomReplace: return "random_replace";
        case AugmentationKind::SynonymSub: return "synonym_sub";
        case AugmentationKind::Dropout: return "dropout";
    }
    return "?";
}

AugmentationKind augmentation_from_string(std::string_view s) {
    for (auto k : {AugmentationKind::ContextInsert, AugmentationKind::RandomReplace, AugmentationKind::SynonymSub,
                   AugmentationKind::Dropout}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown augmentation strategy '" + std::string(s) + "'");
}

SynonymTable load_synonyms(std::istream& in, const Vocab& vocab) {
    SynonymTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("synonym line without TAB", line_no);
        const std::string word = trim(line.substr(0, tab));
        if (!vocab.contains(word)) continue;
        std::vector<int> syns;
        std::stringstream ss(line.substr(tab + 1));
        std::string syn;
        while (std::getline(ss, syn, ',')) {
            syn = trim(syn);
            if (!syn.empty() && syn != word && vocab.contains(syn)) syns.push_back(vocab.id(syn));
        }
        if (!syns.empty()) {
            auto& dst = table[vocab.id(word)];
            dst.insert(dst.end(), syns.begin(), syns.end());
        }
    }
    return table;
}

SynonymTable load_synonyms(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open synonym lexicon " + path.string());
    return load_synonyms(in, vocab);
}

std::size_t edit_count(double rate, std::size_t len) {
    return static_cast<std::size_t>(std::floor(rate * static_cast<double>(len) + 0.5));
}

UtteranceView augment(const Utterance& u, const AugmentationStrategy& s, std::uint64_t seed,
                      const AugmentContext& ctx) {
    if (s.rate < 0.0 || s.rate > 1.0) throw ConfigError("augmentation rate must be in [0,1]");
    UtteranceView view{u.tokens, false};
    std::mt19937_64 rng(seed);
    switch (s.kind) {
        case AugmentationKind::Dropout:
            view.dropout = true;
            break;
        case AugmentationKind::ContextInsert: {
            if (ctx.conversation == nullptr) throw ConfigError("context_insert needs the parent conversation");
            std::vector<int> pool;
            for (const auto& other : ctx.conversation->utterances)
                pool.insert(pool.end(), other.tokens.begin(), other.tokens.end());
            const std::size_t n = edit_count(s.rate, u.tokens.size());
            if (pool.empty()) break;
            for (std::size_t i = 0; i < n; ++i) {
                std::uniform_int_distribution<std::size_t> pos(0, view.tokens.size());
                std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                const std::size_t at = pos(rng);
                const int tok = pool[pick(rng)];
                view.tokens.insert(view.tokens.begin() + static_cast<std::ptrdiff_t>(at), tok);
            }
            break;
        }
        case AugmentationKind::RandomReplace: {
            if (ctx.vocab == nullptr) throw ConfigError("random_replace needs the vocabulary");
            const std::size_t n = std::min(edit_count(s.rate, u.tokens.size()), u.tokens.size());
            if (n == 0 || ctx.vocab->size() <= Vocab::kNumSpecial) break;
            std::vector<std::size_t> order(view.tokens.size());
            std::iota(order.begin(), order.end(), 0);
            std::uniform_int_distribution<int> word(Vocab::kNumSpecial, ctx.vocab->size() - 1);
            for (std::size_t i = 0; i < n; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
                std::swap(order[i], order[pick(rng)]);
                view.tokens[order[i]] = word(rng);
            }
            break;
        }
        case AugmentationKind::SynonymSub: {
            if (ctx.synonyms == nullptr) throw ConfigError("synonym_sub requires a synonym lexicon");
            std::bernoulli_distribution take(s.rate);
            for (auto& tok : view.tokens) {
                auto it = ctx.synonyms->find(tok);
                if (it == ctx.synonyms->end() || it->second.empty()) continue;
                if (!take(rng)) continue;
                std::uniform_int_distribution<std::size_t> pick(0, it->second.size() - 1);
                tok = it->second[pick(rng)];
            }
            break;
        }
    }
    return view;
}

std::vector<Batch> batch_stream(const Corpus& corpus, const BatchConfig& config, std::uint64_t seed,
                                const Vocab& vocab, const SynonymTable* synonyms) {
    if (config.batch_size < 2) throw ConfigError("batch_size must be >= 2 (no negatives otherwise)");
    if (config.view_strategies.empty()) throw ConfigError("at least one view strategy is required");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(corpus.conversations.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<UtteranceRef> stream;
    for (std::size_t ci : order) {
        const auto& conv = corpus.conversations[ci];
        for (std::size_t t = 0; t < conv.utterances.size(); ++t)
            stream.push_back({static_cast<int>(ci), static_cast<int>(t)});
    }

    std::uniform_int_distribution<std::size_t> strategy(0, config.view_strategies.size() - 1);
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < stream.size(); start += config.batch_size) {
        const std::size_t end = std::min(stream.size(), start + config.batch_size);
        Batch b;
        for (std::size_t i = start; i < end; ++i) {
            const auto ref = stream[i];
            const auto& conv = corpus.conversations[static_cast<std::size_t>(ref.conversation)];
            const auto& u = conv.utterances[static_cast<std::size_t>(ref.turn)];
            b.refs.push_back(ref);
            b.tokens.push_back(u.tokens);
            if (i + 1 < end) b.crosses_boundary.push_back(stream[i + 1].conversation != ref.conversation);
            AugmentContext ctx{&vocab, &conv, synonyms};
            const auto& s1 = config.view_strategies[strategy(rng)];
            const auto seed1 = rng();
            const auto& s2 = config.view_strategies[strategy(rng)];
            const auto seed2 = rng();
            b.first_views.push_back(augment(u, s1, seed1, ctx));
            b.second_views.push_back(augment(u, s2, seed2, ctx));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace ctrlstruct::corpus
