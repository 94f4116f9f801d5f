#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "obd/decomposer.hpp"

namespace obd {

// One configuration drives every subcommand; each reads the subset it
// documents. Validation happens in the run_* functions so the CLI and tests
// share it. Fields mirror the flag names.
struct RunConfig {
    std::uint64_t seed = 1;

    // Toy model and corpus.
    std::size_t vocab_size = 12;
    std::size_t embed_dim = 8;
    std::size_t hidden_dim = 8;
    bool tied_head = true;
    std::size_t num_sequences = 24;
    std::size_t sequence_length = 33;
    double temperature = 1.0;
    bool track_cross = false;

    // Decomposition knobs. Exactly one of rank/ratio for the commands that
    // truncate; dampening is applied where covariances are consumed, not
    // where they are collected.
    double dampening = 0.1;
    std::optional<std::size_t> rank;
    std::optional<double> ratio;
    Mode mode = Mode::Obd;
    std::string layer = "layer1";

    // Compensation stage.
    std::string method = "rtn";  // "rtn" or "prune24"
    int bits = 3;
    bool per_channel = true;

    // KV-cache synthesis.
    std::size_t kv_tokens = 96;
    std::size_t kv_dim = 16;
    std::size_t heads = 0;  // 0 skips the per-head V decomposition
    std::size_t head_dim = 4;
    std::size_t v_input_dim = 16;

    // Directories. out_dir is required; relative paths land under the run
    // root (env OBD_RUN_ROOT, else "runs"). The *_dir inputs name earlier
    // runs' output directories.
    std::string out_dir;
    std::string collect_dir;
    std::string decompose_dir;
    std::string compensate_dir;
};

// Resolves a possibly-relative run directory against the run root. The env
// var OBD_RUN_ROOT is the only environment override the tool honors.
std::string resolve_run_dir(const std::string& dir);

// Each writes its artifacts plus report.json into the resolved out_dir and
// returns the report. Failures: std::invalid_argument for bad configuration,
// NumericalError subtypes for kernel failures, std::runtime_error for IO.
nlohmann::json run_collect(const RunConfig& cfg);
nlohmann::json run_decompose(const RunConfig& cfg);
nlohmann::json run_compensate(const RunConfig& cfg);
nlohmann::json run_kv_compress(const RunConfig& cfg);
nlohmann::json run_diagnose(const RunConfig& cfg);
nlohmann::json run_eval(const RunConfig& cfg);

}  // namespace obd
