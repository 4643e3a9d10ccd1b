#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "moflow/model.hpp"

namespace moflow {

// flat dotted-key experiment record; every default overridable per key
struct RunConfig {
    std::string vocab_preset = "qm9";  // qm9 | zinc250k
    model::ModelConfig model;

    std::size_t train_epochs = 10;
    std::size_t train_batch_size = 256;
    double train_learning_rate = 0.001;

    double temperature = 0.85;
    std::size_t sample_count = 10000;

    double opt_lambda = 0.1;
    std::size_t opt_steps = 10;
    double opt_delta = 0.4;
    std::string opt_property = "heavy_atoms";
    std::size_t fingerprint_bits = 1024;

    std::string dataset_path;
    std::string checkpoint_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;  // mandatory at validation time

    void validate() const;  // throws ConfigError naming the field
};

// parses `key = value` lines; '#' comments and blank lines skipped;
// unknown keys rejected with their path
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& c);  // canonical round-trip form

}  // namespace moflow
