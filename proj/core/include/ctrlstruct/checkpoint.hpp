#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrlstruct/nn/autograd.hpp"

namespace ctrlstruct::checkpoint {

inline constexpr int kFormatVersion = 1;

/// Versioned JSON envelope shared by every model checkpoint:
/// {format_version, kind, config, vocab_hash, tensors: {name: {shape, data}}}.
struct Envelope {
    int format_version{kFormatVersion};
    std::string kind;
    nlohmann::json config;
    std::string vocab_hash;
    nlohmann::json tensors;
};

nlohmann::json tensors_to_json(const std::vector<nn::Parameter*>& params);
/// Copies named tensors into `params`; every name must be present with a matching shape.
void tensors_from_json(const nlohmann::json& tensors, const std::vector<nn::Parameter*>& params);

void write(const std::filesystem::path& path, const Envelope& env);

/// Reads and validates the header. Throws CheckpointError on version, kind or
/// vocabulary hash mismatch (an empty expected hash skips the hash check).
Envelope read(const std::filesystem::path& path, const std::string& expected_kind,
              const std::string& expected_vocab_hash);

}  // namespace ctrlstruct::checkpoint
