#include "ctrlstruct/checkpoint.hpp"

#include <fstream>

#include "ctrlstruct/error.hpp"

namespace ctrlstruct::checkpoint {

using nlohmann::json;

json tensors_to_json(const std::vector<nn::Parameter*>& params) {
    json out = json::object();
    for (const nn::Parameter* p : params) {
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(p->value.size()));
        for (Eigen::Index r = 0; r < p->value.rows(); ++r)
            for (Eigen::Index c = 0; c < p->value.cols(); ++c) data.push_back(p->value(r, c));
        out[p->name] = json{{"shape", {p->value.rows(), p->value.cols()}}, {"data", std::move(data)}};
    }
    return out;
}

void tensors_from_json(const json& tensors, const std::vector<nn::Parameter*>& params) {
    for (nn::Parameter* p : params) {
        if (!tensors.contains(p->name)) throw CheckpointError("checkpoint lacks tensor '" + p->name + "'");
        const auto& t = tensors.at(p->name);
        const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
        const auto data = t.at("data").get<std::vector<double>>();
        if (shape.size() != 2 || shape[0] != p->value.rows() || shape[1] != p->value.cols() ||
            data.size() != static_cast<std::size_t>(shape[0] * shape[1])) {
            throw CheckpointError("tensor '" + p->name + "' has an unexpected shape");
        }
        std::size_t i = 0;
        for (Eigen::Index r = 0; r < shape[0]; ++r)
            for (Eigen::Index c = 0; c < shape[1]; ++c) p->value(r, c) = data[i++];
        p->zero_grad();
    }
}

void write(const std::filesystem::path& path, const Envelope& env) {
    json j{{"format_version", env.format_version},
           {"kind", env.kind},
           {"config", env.config},
           {"vocab_hash", env.vocab_hash},
           {"tensors", env.tensors}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

Envelope read(const std::filesystem::path& path, const std::string& expected_kind,
              const std::string& expected_vocab_hash) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw CheckpointError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    Envelope env;
    env.format_version = j.at("format_version").get<int>();
    if (env.format_version != kFormatVersion) {
        throw CheckpointError("checkpoint format version " + std::to_string(env.format_version) +
                              " is not supported (expected " + std::to_string(kFormatVersion) + ")");
    }
    env.kind = j.at("kind").get<std::string>();
    if (env.kind != expected_kind) {
        throw CheckpointError("checkpoint holds a '" + env.kind + "', expected '" + expected_kind + "'");
    }
    env.vocab_hash = j.at("vocab_hash").get<std::string>();
    if (!expected_vocab_hash.empty() && env.vocab_hash != expected_vocab_hash) {
        throw CheckpointError("vocabulary hash mismatch: checkpoint " + env.vocab_hash + ", current " +
                              expected_vocab_hash);
    }
    env.config = j.at("config");
    env.tensors = j.at("tensors");
    return env;
}

}  // namespace ctrlstruct::checkpoint
