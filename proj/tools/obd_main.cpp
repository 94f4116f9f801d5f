#include <cstdio>
#include <exception>
#include <iostream>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "obd/decomposer.hpp"
#include "obd/errors.hpp"
#include "obd/runner.hpp"
#include "obd/verify.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

void add_model_flags(CLI::App* cmd, obd::RunConfig& cfg, bool& untied) {
    cmd->add_option("--seed", cfg.seed, "Base seed; the corpus uses seed+1");
    cmd->add_option("--vocab", cfg.vocab_size, "Vocabulary size");
    cmd->add_option("--embed-dim", cfg.embed_dim, "Embedding width");
    cmd->add_option("--hidden-dim", cfg.hidden_dim, "Hidden width");
    cmd->add_flag("--untied", untied, "Give the output head its own weights");
    cmd->add_option("--sequences", cfg.num_sequences, "Corpus sequence count");
    cmd->add_option("--length", cfg.sequence_length, "Tokens per sequence");
    cmd->add_option("--temperature", cfg.temperature, "Softmax temperature for traces");
}

void add_truncation_flags(CLI::App* cmd, obd::RunConfig& cfg, std::string& mode_name) {
    cmd->add_option("--rank", cfg.rank, "Adapter rank (exclusive with --ratio)");
    cmd->add_option("--ratio", cfg.ratio, "Parameter-reduction ratio in [0,1)");
    cmd->add_option("--mode", mode_name,
                    "Decomposition mode: plain-svd, input-whiten, output-whiten, obd");
    cmd->add_option("--dampening", cfg.dampening, "Covariance dampening fraction");
    cmd->add_option("--layer", cfg.layer, "Layer to decompose");
}

void print_losses(const nlohmann::json& table) {
    for (const auto& [mode, loss] : table.items()) {
        if (loss.is_object()) {
            std::printf("  %-14s kfac %.6e  actual %.6e\n", mode.c_str(),
                        loss.at("kfac_loss").get<double>(),
                        loss.at("actual_delta_l").get<double>());
        } else {
            std::printf("  %-14s kfac %.6e\n", mode.c_str(), loss.get<double>());
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Loss-aware low-rank weight factorization under Kronecker-factored curvature"};
    app.require_subcommand(1);

    obd::RunConfig cfg;
    bool untied = false;
    bool global_scale = false;
    std::string mode_name = "obd";

    CLI::App* collect = app.add_subcommand(
        "collect", "Build the toy model and corpus, run traces, store weights and covariances");
    add_model_flags(collect, cfg, untied);
    collect->add_flag("--rho", cfg.track_cross,
                      "Track the input/gradient cross moment for the correlation diagnostic");
    collect->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* decompose =
        app.add_subcommand("decompose", "Factor one layer's weights into a low-rank pair");
    decompose->add_option("--from", cfg.collect_dir, "Collect run to read")->required();
    add_truncation_flags(decompose, cfg, mode_name);
    decompose->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* compensate = app.add_subcommand(
        "compensate", "Quantize or prune one layer, then fit a low-rank adapter to the residual");
    compensate->add_option("--from", cfg.collect_dir, "Collect run to read")->required();
    add_truncation_flags(compensate, cfg, mode_name);
    compensate->add_option("--method", cfg.method, "Compression step: rtn or prune24");
    compensate->add_option("--bits", cfg.bits, "RTN bit width");
    compensate->add_flag("--global-scale", global_scale,
                         "RTN with one scale for the whole matrix instead of per row");
    compensate->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* kv = app.add_subcommand(
        "kv-compress", "Fit the K compressor on synthetic keys; optionally decompose V per head");
    kv->add_option("--seed", cfg.seed, "Seed for key and curvature synthesis");
    kv->add_option("--rank", cfg.rank, "Retained rank")->required();
    kv->add_option("--tokens", cfg.kv_tokens, "Synthetic token count");
    kv->add_option("--dim", cfg.kv_dim, "Key dimension");
    kv->add_option("--heads", cfg.heads, "Head count for the V decomposition (0 skips it)");
    kv->add_option("--head-dim", cfg.head_dim, "Rows per head in the V projection");
    kv->add_option("--v-input", cfg.v_input_dim, "Input dimension of the V projection");
    kv->add_option("--dampening", cfg.dampening, "Curvature dampening fraction");
    kv->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* diagnose = app.add_subcommand(
        "diagnose", "Per-layer correlation factor and covariance eigen-spectra as CSV");
    add_model_flags(diagnose, cfg, untied);
    diagnose->add_option("--dampening", cfg.dampening, "Covariance dampening fraction");
    diagnose->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* eval = app.add_subcommand(
        "eval", "Mean loss and perplexity of the stored model, optionally after an edit");
    eval->add_option("--from", cfg.collect_dir, "Collect run to read")->required();
    eval->add_option("--decomposed", cfg.decompose_dir, "Decompose run supplying the edit");
    eval->add_option("--compensated", cfg.compensate_dir, "Compensate run supplying the edit");
    add_truncation_flags(eval, cfg, mode_name);
    eval->add_option("--out", cfg.out_dir, "Output directory (under the run root)");

    CLI::App* verify =
        app.add_subcommand("verify", "Run the numerical self-check suites and print pass/fail");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        cfg.tied_head = !untied;
        cfg.per_channel = !global_scale;
        cfg.mode = obd::mode_from_string(mode_name);

        nlohmann::json report;
        if (collect->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "collect";
            report = obd::run_collect(cfg);
            std::printf("collect: %zu positions, mean loss %.6f, perplexity %.4f\n",
                        report.at("total_positions").get<std::size_t>(),
                        report.at("mean_loss").get<double>(),
                        report.at("perplexity").get<double>());
        } else if (decompose->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "decompose";
            report = obd::run_decompose(cfg);
            std::printf("decompose %s: mode %s rank %zu achieved ratio %.4f kfac loss %.6e\n",
                        report.at("layer").get<std::string>().c_str(),
                        report.at("mode").get<std::string>().c_str(),
                        report.at("rank").get<std::size_t>(),
                        report.at("achieved_ratio").get<double>(),
                        report.at("kfac_loss").get<double>());
            print_losses(report.at("mode_losses"));
        } else if (compensate->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "compensate";
            report = obd::run_compensate(cfg);
            std::printf(
                "compensate %s (%s): rank %zu adapter loss %.6e (uncompensated %.6e)\n",
                report.at("layer").get<std::string>().c_str(),
                report.at("method").get<std::string>().c_str(),
                report.at("rank").get<std::size_t>(), report.at("kfac_loss").get<double>(),
                report.at("uncompensated_kfac_loss").get<double>());
            print_losses(report.at("mode_losses"));
        } else if (kv->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "kv-compress";
            report = obd::run_kv_compress(cfg);
            std::printf("kv-compress: rank %zu/%zu ratio %.4f metric error %.6e dropped %.6e\n",
                        report.at("rank").get<std::size_t>(), report.at("dim").get<std::size_t>(),
                        report.at("compression_ratio").get<double>(),
                        report.at("kfac_error").get<double>(),
                        report.at("dropped_eigensum").get<double>());
        } else if (diagnose->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "diagnose";
            report = obd::run_diagnose(cfg);
            for (const auto& [layer, entry] : report.at("layers").items()) {
                std::printf("diagnose %s: rho %.6f over %zu tokens\n", layer.c_str(),
                            entry.at("rho").get<double>(), entry.at("tokens").get<std::size_t>());
            }
        } else if (eval->parsed()) {
            if (cfg.out_dir.empty()) cfg.out_dir = "eval";
            report = obd::run_eval(cfg);
            std::printf("eval: mean loss %.6f -> %.6f (delta %.6e), perplexity %.4f -> %.4f\n",
                        report.at("mean_loss").get<double>(),
                        report.at("edited_mean_loss").get<double>(),
                        report.at("delta_l").get<double>(),
                        report.at("perplexity").get<double>(),
                        report.at("edited_perplexity").get<double>());
            if (report.contains("mode_table")) print_losses(report.at("mode_table").at("losses"));
        } else if (verify->parsed()) {
            return obd::run_verification_suites(std::cout) ? 0 : kExitNumerical;
        }
        if (!cfg.out_dir.empty()) {
            std::printf("wrote %s/report.json\n", obd::resolve_run_dir(cfg.out_dir).c_str());
        }
        return 0;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    }
}
