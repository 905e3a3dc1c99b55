#include "ctrlstruct/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::eval {

using nlohmann::json;

namespace {

void check_aligned(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw Error(std::string(what) + ": " + std::to_string(a) + " hypotheses vs " + std::to_string(b) +
                    " references");
    }
}

std::map<Sentence, std::size_t> ngram_counts(const Sentence& s, int n) {
    std::map<Sentence, std::size_t> counts;
    const auto un = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + un <= s.size(); ++i) ++counts[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                                       s.begin() + static_cast<std::ptrdiff_t>(i + un))];
    return counts;
}

}  // namespace

double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references, int max_n) {
    check_aligned(hypotheses.size(), references.size(), "bleu");
    if (hypotheses.empty()) throw Error("bleu: empty corpus");
    if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        std::size_t matched = 0, total = 0;
        for (std::size_t i = 0; i < hypotheses.size(); ++i) {
            const auto hyp = ngram_counts(hypotheses[i], n);
            const auto ref = ngram_counts(references[i], n);
            for (const auto& [gram, count] : hyp) {
                total += count;
                auto it = ref.find(gram);
                if (it != ref.end()) matched += std::min(count, it->second);
            }
        }
        const double p = (total == 0 || matched == 0) ? kBleuEpsilon : static_cast<double>(matched) / total;
        log_sum += std::log(p);
    }
    std::size_t c = 0, r = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        c += hypotheses[i].size();
        r += references[i].size();
    }
    if (c == 0) return 0.0;
    const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    return bp * std::exp(log_sum / max_n);
}

double distinct_n(const std::vector<Sentence>& hypotheses, int n) {
    if (hypotheses.empty()) throw Error("distinct_n: empty corpus");
    if (n < 1) throw ConfigError("distinct_n: n must be >= 1");
    std::set<Sentence> unique;
    std::size_t total = 0;
    for (const auto& h : hypotheses) {
        for (const auto& [gram, count] : ngram_counts(h, n)) {
            unique.insert(gram);
            total += count;
        }
    }
    if (total == 0) {
        spdlog::warn("distinct_n: every hypothesis is shorter than {} tokens", n);
        return 0.0;
    }
    return static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
    check_aligned(hypotheses.size(), references.size(), "rouge_l");
    if (hypotheses.empty()) throw Error("rouge_l: empty corpus");
    double sum = 0.0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const auto lcs = static_cast<double>(lcs_length(hypotheses[i], references[i]));
        if (lcs == 0.0) continue;
        const double p = lcs / static_cast<double>(hypotheses[i].size());
        const double r = lcs / static_cast<double>(references[i].size());
        sum += 2.0 * p * r / (p + r);
    }
    return sum / static_cast<double>(hypotheses.size());
}

double topic_hit(const std::vector<int>& generated, const std::vector<int>& reference, const Matrix& centers,
                 double phi) {
    check_aligned(generated.size(), reference.size(), "topic_hit");
    if (generated.empty()) throw Error("topic_hit: empty label lists");
    const auto k = static_cast<int>(centers.rows());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const int g = generated[i], r = reference[i];
        if (g < 0 || g >= k || r < 0 || r >= k) throw Error("topic_hit: unknown label");
        if (g == r) {
            ++hits;
            continue;
        }
        const double sim = centers.row(g).dot(centers.row(r)) / (centers.row(g).norm() * centers.row(r).norm());
        if (sim >= phi) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(generated.size());
}

F1Scores f1_scores(const std::vector<int>& generated, const std::vector<int>& reference, int k) {
    check_aligned(generated.size(), reference.size(), "f1_scores");
    if (k < 1) throw ConfigError("f1_scores: k must be >= 1");
    std::vector<double> tp(static_cast<std::size_t>(k), 0.0), fp = tp, fn = tp;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const int g = generated[i], r = reference[i];
        if (g < 0 || g >= k || r < 0 || r >= k) throw Error("f1_scores: unknown label");
        if (g == r) {
            tp[static_cast<std::size_t>(g)] += 1.0;
        } else {
            fp[static_cast<std::size_t>(g)] += 1.0;
            fn[static_cast<std::size_t>(r)] += 1.0;
        }
    }
    auto ratio = [](double a, double b) { return b == 0.0 ? 0.0 : a / b; };
    F1Scores out;
    double tp_all = 0.0, fp_all = 0.0;
    for (std::size_t c = 0; c < tp.size(); ++c) {
        const double p = ratio(tp[c], tp[c] + fp[c]);
        const double r = ratio(tp[c], tp[c] + fn[c]);
        out.macro += ratio(2.0 * p * r, p + r);
        tp_all += tp[c];
        fp_all += fp[c];
    }
    out.macro /= static_cast<double>(k);
    out.micro = ratio(tp_all, tp_all + fp_all);
    return out;
}

json GenerationRecord::to_json() const {
    return json{{"conv_id", conv_id},
                {"turn_index", turn_index},
                {"context", context},
                {"reference", reference},
                {"hypothesis", hypothesis},
                {"decode_config", decode_config},
                {"predicted_cluster", predicted_cluster},
                {"reference_cluster", reference_cluster}};
}

void write_generations(const std::vector<GenerationRecord>& records, std::ostream& out) {
    for (const auto& r : records) out << r.to_json().dump() << '\n';
}

std::vector<GenerationRecord> read_generations(std::istream& in) {
    std::vector<GenerationRecord> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            GenerationRecord r;
            r.conv_id = j.at("conv_id").get<std::string>();
            r.turn_index = j.at("turn_index").get<int>();
            r.context = j.at("context").get<std::string>();
            r.reference = j.at("reference").get<std::string>();
            r.hypothesis = j.at("hypothesis").get<std::string>();
            r.decode_config = j.at("decode_config");
            r.predicted_cluster = j.at("predicted_cluster").get<int>();
            r.reference_cluster = j.at("reference_cluster").get<int>();
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(std::string("generation record: ") + e.what(), number);
        }
    }
    return out;
}

std::vector<GenerationRecord> read_generations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return read_generations(in);
}

namespace {

std::string phi_key(double phi) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << phi;
    return s.str();
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

json EvalReport::to_json() const {
    json stha_json = json::object();
    for (const auto& [phi, v] : stha) stha_json[phi_key(phi)] = v;
    return json{{"bleu1", bleu1},
                {"bleu2", bleu2},
                {"distinct1", distinct1},
                {"distinct2", distinct2},
                {"rouge_l", rouge_l},
                {"htha", htha},
                {"stha", stha_json},
                {"macro_f1", macro_f1},
                {"micro_f1", micro_f1},
                {"chi", finite_or_null(chi)},
                {"dbi", finite_or_null(dbi)},
                {"examples", examples},
                {"clusters", clusters},
                {"config", config}};
}

std::string EvalReport::to_table() const {
    std::vector<std::pair<std::string, double>> rows{
        {"BLEU-1", bleu1}, {"BLEU-2", bleu2}, {"Distinct-1", distinct1}, {"Distinct-2", distinct2},
        {"ROUGE-L", rouge_l}, {"HTHA", htha}};
    for (const auto& [phi, v] : stha) rows.emplace_back("STHA@" + phi_key(phi), v);
    rows.emplace_back("macro-F1", macro_f1);
    rows.emplace_back("micro-F1", micro_f1);
    rows.emplace_back("CHI", chi);
    rows.emplace_back("DBI", dbi);
    std::ostringstream out;
    out << std::left << std::setw(12) << "metric" << std::right << std::setw(14) << "value" << '\n';
    for (const auto& [name, v] : rows) {
        out << std::left << std::setw(12) << name << std::right << std::setw(14) << std::fixed << std::setprecision(6)
            << v << '\n';
    }
    out << std::left << std::setw(12) << "examples" << std::right << std::setw(14) << examples << '\n';
    out << std::left << std::setw(12) << "clusters" << std::right << std::setw(14) << clusters << '\n';
    return out.str();
}

EvalReport evaluate_run(const std::vector<GenerationRecord>& records, const corpus::Vocab& vocab,
                        const encoder::EncoderModel& encoder, const clustering::TopicClusters& clusters,
                        const std::vector<double>& phi, const Matrix* train_embeddings) {
    if (records.empty()) throw Error("evaluate_run: no generation records");
    std::vector<Sentence> hyps, refs;
    std::vector<int> gen_labels, ref_labels;
    auto label = [&](const std::string& text) {
        std::vector<int> ids = corpus::tokenize(text, vocab);
        if (ids.empty()) ids.push_back(corpus::Vocab::kUnk);
        return clustering::assign(encoder::encode(ids, encoder), clusters);
    };
    for (const auto& r : records) {
        hyps.push_back(corpus::split_words(r.hypothesis));
        refs.push_back(corpus::split_words(r.reference));
        gen_labels.push_back(label(r.hypothesis));
        ref_labels.push_back(label(r.reference));
    }

    EvalReport rep;
    rep.examples = records.size();
    rep.clusters = clusters.k;
    rep.bleu1 = bleu(hyps, refs, 1);
    rep.bleu2 = bleu(hyps, refs, 2);
    rep.distinct1 = distinct_n(hyps, 1);
    rep.distinct2 = distinct_n(hyps, 2);
    rep.rouge_l = rouge_l(hyps, refs);
    rep.htha = topic_hit(gen_labels, ref_labels, clusters.centers, 1.0);
    for (double p : phi) rep.stha.emplace_back(p, topic_hit(gen_labels, ref_labels, clusters.centers, p));
    const F1Scores f1 = f1_scores(gen_labels, ref_labels, clusters.k);
    rep.macro_f1 = f1.macro;
    rep.micro_f1 = f1.micro;
    if (train_embeddings) {
        rep.chi = clustering::calinski_harabasz(*train_embeddings, clusters.assignments);
        rep.dbi = clustering::davies_bouldin(*train_embeddings, clusters.assignments);
    } else {
        rep.chi = rep.dbi = std::numeric_limits<double>::quiet_NaN();
    }
    rep.config = json{{"phi", phi}, {"k", clusters.k}};
    return rep;
}

}  // namespace ctrlstruct::eval
