#include "obd/runner.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

#include "obd/covariance.hpp"
#include "obd/errors.hpp"
#include "obd/factorizations.hpp"
#include "obd/kvcache.hpp"
#include "obd/matrix.hpp"
#include "obd/rng.hpp"
#include "obd/tensor_manifest.hpp"
#include "obd/toymodel.hpp"

namespace obd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr Mode kAllModes[] = {Mode::PlainSvd, Mode::InputWhiten, Mode::OutputWhiten, Mode::Obd};

class Timer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_report(const std::string& dir, const json& report) {
    std::ofstream stream(fs::path(dir) / "report.json", std::ios::trunc);
    if (!stream) {
        throw std::runtime_error("cannot write report.json under " + dir);
    }
    stream << report.dump(2) << "\n";
}

json read_report(const std::string& dir) {
    const fs::path path = fs::path(dir) / "report.json";
    std::ifstream stream(path);
    if (!stream) {
        throw std::invalid_argument("no report.json under " + dir);
    }
    json report;
    try {
        stream >> report;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed " + path.string() + ": " + e.what());
    }
    return report;
}

std::map<std::string, Matrix> tensor_map(const std::string& dir) {
    std::map<std::string, Matrix> out;
    for (NamedTensor& t : read_tensors(dir)) {
        out.emplace(std::move(t.name), std::move(t.value));
    }
    return out;
}

const Matrix& require_tensor(const std::map<std::string, Matrix>& tensors,
                             const std::string& name, const std::string& dir) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw std::invalid_argument("tensor \"" + name + "\" not found under " + dir);
    }
    return it->second;
}

ToyModelConfig model_config_from(const RunConfig& cfg) {
    ToyModelConfig model_config;
    model_config.vocab_size = cfg.vocab_size;
    model_config.embed_dim = cfg.embed_dim;
    model_config.hidden_dim = cfg.hidden_dim;
    model_config.tied_head = cfg.tied_head;
    return model_config;
}

CorpusConfig corpus_config_from(const RunConfig& cfg) {
    CorpusConfig corpus_config;
    corpus_config.vocab_size = cfg.vocab_size;
    corpus_config.num_sequences = cfg.num_sequences;
    corpus_config.sequence_length = cfg.sequence_length;
    corpus_config.seed = cfg.seed + 1;
    return corpus_config;
}

// Rebuilds the model and corpus a collect run used, from its report and
// tensors. The corpus is regenerated from the recorded seed rather than
// stored token by token.
struct CollectedRun {
    ToyModel model;
    SyntheticCorpus corpus;
    double temperature = 1.0;
    std::map<std::string, Matrix> tensors;
    std::string dir;
};

CollectedRun load_collect(const std::string& collect_dir) {
    if (collect_dir.empty()) {
        throw std::invalid_argument("this command needs --from <collect dir>");
    }
    CollectedRun run;
    run.dir = resolve_run_dir(collect_dir);
    const json report = read_report(run.dir);
    json model_json, corpus_json;
    try {
        model_json = report.at("model");
        corpus_json = report.at("corpus");
        run.temperature = report.at("config").at("temperature").get<double>();
    } catch (const json::exception& e) {
        throw std::runtime_error("report under " + run.dir +
                                 " is not a collect report: " + e.what());
    }

    run.tensors = tensor_map(run.dir);
    ToyModelConfig config;
    config.vocab_size = model_json.at("vocab_size").get<std::size_t>();
    config.embed_dim = model_json.at("embed_dim").get<std::size_t>();
    config.hidden_dim = model_json.at("hidden_dim").get<std::size_t>();
    config.tied_head = model_json.at("tied_head").get<bool>();
    run.model.config = config;
    run.model.embedding = require_tensor(run.tensors, "embedding", run.dir);
    run.model.layer1 = require_tensor(run.tensors, "layer1", run.dir);
    run.model.layer2 = require_tensor(run.tensors, "layer2", run.dir);
    if (!config.tied_head) {
        run.model.head = require_tensor(run.tensors, "head", run.dir);
    }

    CorpusConfig corpus_config;
    corpus_config.vocab_size = config.vocab_size;
    corpus_config.num_sequences = corpus_json.at("num_sequences").get<std::size_t>();
    corpus_config.sequence_length = corpus_json.at("sequence_length").get<std::size_t>();
    corpus_config.seed = corpus_json.at("seed").get<std::uint64_t>();
    run.corpus = SyntheticCorpus::generate(corpus_config);
    return run;
}

CovariancePair load_pair(const CollectedRun& run, const std::string& layer, double dampening) {
    const Matrix& c_x = require_tensor(run.tensors, "c_x_" + layer, run.dir);
    const Matrix& c_g = require_tensor(run.tensors, "c_g_" + layer, run.dir);
    return pair_from_matrices(c_x, c_g, dampening);
}

json four_mode_losses(const Matrix& w, const CovariancePair& pair, std::size_t rank) {
    json table;
    for (Mode mode : kAllModes) {
        CompressionSpec spec;
        spec.rank = rank;
        spec.mode = mode;
        spec.dampening = pair.dampening;
        table[to_string(mode)] = decompose(w, pair, spec).kfac_loss;
    }
    return table;
}

std::size_t resolve_requested_rank(const RunConfig& cfg, std::size_t m, std::size_t n) {
    CompressionSpec spec;
    spec.rank = cfg.rank;
    spec.ratio = cfg.ratio;
    return spec.resolve_rank(m, n);
}

json requested_truncation(const RunConfig& cfg) {
    json requested;
    if (cfg.rank) requested["rank"] = *cfg.rank;
    if (cfg.ratio) requested["ratio"] = *cfg.ratio;
    return requested;
}

json corpus_echo(const RunConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},
            {"num_sequences", cfg.num_sequences},
            {"sequence_length", cfg.sequence_length},
            {"seed", cfg.seed + 1}};
}

json model_echo(const RunConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},
            {"embed_dim", cfg.embed_dim},
            {"hidden_dim", cfg.hidden_dim},
            {"tied_head", cfg.tied_head},
            {"seed", cfg.seed}};
}

std::string csv_double(double v) {
    char buffer[40];
    std::snprintf(buffer, sizeof(buffer), "%.17g", v);
    return buffer;
}

}  // namespace

std::string resolve_run_dir(const std::string& dir) {
    if (dir.empty()) {
        throw std::invalid_argument("run directory must not be empty");
    }
    fs::path path(dir);
    if (path.is_absolute()) return path.string();
    const char* root = std::getenv("OBD_RUN_ROOT");
    return (fs::path(root && *root ? root : "runs") / path).string();
}

json run_collect(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    const ToyModel model = ToyModel::random_init(model_config_from(cfg), cfg.seed);
    const SyntheticCorpus corpus = SyntheticCorpus::generate(corpus_config_from(cfg));
    const CollectedTraces traces = collect_traces(model, corpus, cfg.temperature, cfg.track_cross);
    const double mean_loss = evaluate_mean_loss(model, corpus);

    std::vector<NamedTensor> tensors;
    tensors.push_back({"embedding", model.embedding, "f64"});
    tensors.push_back({"layer1", model.layer1, "f64"});
    tensors.push_back({"layer2", model.layer2, "f64"});
    if (!cfg.tied_head) tensors.push_back({"head", model.head, "f64"});

    json layers;
    for (const std::string& layer : model.traced_layers()) {
        const CovarianceAccumulator& acc = traces.accumulators.at(layer);
        // Raw normalized moments are stored; dampening is a knob of the run
        // that consumes them.
        const CovariancePair pair = finalize(acc, 0.0);
        tensors.push_back({"c_x_" + layer, pair.c_x, "f64"});
        tensors.push_back({"c_g_" + layer, pair.c_g, "f64"});
        json entry = {{"tokens", acc.tokens_seen}};
        if (cfg.track_cross) entry["rho"] = correlation_factor(acc);
        layers[layer] = entry;
    }
    write_tensors(out, tensors);

    json report;
    report["command"] = "collect";
    report["config"] = {{"temperature", cfg.temperature}, {"track_cross", cfg.track_cross}};
    report["model"] = model_echo(cfg);
    report["corpus"] = corpus_echo(cfg);
    report["seed"] = cfg.seed;
    report["layers"] = layers;
    report["total_positions"] = traces.total_positions;
    report["total_loss"] = traces.total_loss;
    report["mean_loss"] = mean_loss;
    report["perplexity"] = std::exp(mean_loss);
    report["timings"] = {{"total_seconds", timer.seconds()}};
    write_report(out, report);
    return report;
}

json run_decompose(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    const CollectedRun run = load_collect(cfg.collect_dir);
    const Matrix& w = run.model.weights(cfg.layer);
    const CovariancePair pair = load_pair(run, cfg.layer, cfg.dampening);

    CompressionSpec spec;
    spec.rank = cfg.rank;
    spec.ratio = cfg.ratio;
    spec.mode = cfg.mode;
    spec.dampening = cfg.dampening;
    const LowRankFactors factors = decompose(w, pair, spec);
    const Matrix w_approx = matmul(factors.b, factors.a);

    write_tensors(out, {{"b", factors.b, "f64"},
                        {"a", factors.a, "f64"},
                        {"w_approx", w_approx, "f64"}});

    json report;
    report["command"] = "decompose";
    report["inputs"] = {{"collect", cfg.collect_dir}};
    report["seed"] = cfg.seed;
    report["layer"] = cfg.layer;
    report["mode"] = to_string(factors.mode);
    report["requested"] = requested_truncation(cfg);
    report["rank"] = factors.rank;
    report["achieved_ratio"] = achieved_ratio(w.rows(), w.cols(), factors.rank);
    report["dampening"] = cfg.dampening;
    report["kfac_loss"] = factors.kfac_loss;
    report["mode_losses"] = four_mode_losses(w, pair, factors.rank);
    report["timings"] = {{"total_seconds", timer.seconds()}};
    write_report(out, report);
    return report;
}

json run_compensate(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    const CollectedRun run = load_collect(cfg.collect_dir);
    const Matrix& w = run.model.weights(cfg.layer);
    const CovariancePair pair = load_pair(run, cfg.layer, cfg.dampening);

    const Matrix w_hat = [&]() -> Matrix {
        if (cfg.method == "rtn") return quantize_rtn(w, cfg.bits, cfg.per_channel);
        if (cfg.method == "prune24") return prune_24(w);
        throw std::invalid_argument("unknown compensation method \"" + cfg.method +
                                    "\" (expected rtn or prune24)");
    }();

    const std::size_t rank = resolve_requested_rank(cfg, w.rows(), w.cols());
    const LowRankFactors factors = compensate(w, w_hat, pair, rank, cfg.mode);
    Matrix compensated = matmul(factors.b, factors.a);
    compensated += w_hat;

    write_tensors(out, {{"w_hat", w_hat, "f64"},
                        {"b", factors.b, "f64"},
                        {"a", factors.a, "f64"},
                        {"w_compensated", compensated, "f64"}});

    json mode_table;
    for (Mode mode : kAllModes) {
        mode_table[to_string(mode)] = compensate(w, w_hat, pair, rank, mode).kfac_loss;
    }

    Matrix residual = w;
    residual -= w_hat;
    json report;
    report["command"] = "compensate";
    report["inputs"] = {{"collect", cfg.collect_dir}};
    report["seed"] = cfg.seed;
    report["layer"] = cfg.layer;
    report["method"] = cfg.method;
    if (cfg.method == "rtn") {
        report["bits"] = cfg.bits;
        report["per_channel"] = cfg.per_channel;
    }
    report["mode"] = to_string(factors.mode);
    report["requested"] = requested_truncation(cfg);
    report["rank"] = factors.rank;
    report["achieved_ratio"] = achieved_ratio(w.rows(), w.cols(), factors.rank);
    report["dampening"] = cfg.dampening;
    report["uncompensated_kfac_loss"] = kfac_loss(residual, pair);
    report["kfac_loss"] = factors.kfac_loss;
    report["mode_losses"] = mode_table;
    report["timings"] = {{"total_seconds", timer.seconds()}};
    write_report(out, report);
    return report;
}

json run_kv_compress(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    if (cfg.ratio) {
        throw std::invalid_argument("kv-compress takes --rank, not --ratio");
    }
    if (!cfg.rank) {
        throw std::invalid_argument("kv-compress needs --rank");
    }
    if (cfg.kv_dim < 1 || cfg.kv_tokens < 2) {
        throw std::invalid_argument("kv-compress needs kv_dim >= 1 and kv_tokens >= 2");
    }
    const std::size_t d = cfg.kv_dim;
    const std::size_t t = cfg.kv_tokens;
    Rng rng(cfg.seed);

    // Synthetic anisotropic keys: isotropic samples pushed through a mixing
    // map whose columns decay geometrically, so the scatter has structure
    // worth truncating.
    Matrix mix(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        double column_scale = 1.0;
        for (std::size_t j = 0; j < d; ++j) {
            mix(i, j) = rng.normal() * column_scale;
            column_scale *= 0.8;
        }
    }
    Matrix z(t, d);
    for (double& v : z.data()) v = rng.normal();
    const Matrix k = matmul(z, mix);

    const std::size_t grad_samples = 2 * d + 4;
    Matrix g(d, grad_samples);
    for (double& v : g.data()) v = rng.normal();
    Matrix h_k = matmul(g, transpose(g));
    h_k *= 1.0 / static_cast<double>(grad_samples);
    h_k = dampen(h_k, cfg.dampening);

    const KCompressor comp = fit_k_compressor(k, h_k, *cfg.rank);
    const Matrix codes = compress(comp, k);
    const Matrix k_hat = reconstruct(comp, codes);

    Matrix residual = k;
    residual -= k_hat;
    const Matrix h_res = matmul(residual, h_k);
    double metric_error = 0.0;
    for (std::size_t i = 0; i < residual.rows(); ++i) {
        for (std::size_t j = 0; j < residual.cols(); ++j) {
            metric_error += residual(i, j) * h_res(i, j);
        }
    }
    double dropped = 0.0;
    for (std::size_t i = comp.rank; i < comp.scatter_eigenvalues.size(); ++i) {
        dropped += comp.scatter_eigenvalues[i];
    }

    std::vector<NamedTensor> tensors = {{"k", k, "f64"},
                                        {"h_k", h_k, "f64"},
                                        {"l_k", comp.l_k.l, "f64"},
                                        {"u_r", comp.u_r, "f64"},
                                        {"reconstruct", comp.reconstruct, "f64"},
                                        {"codes", codes, "f64"},
                                        {"k_hat", k_hat, "f64"}};

    json report;
    report["command"] = "kv-compress";
    report["seed"] = cfg.seed;
    report["dim"] = d;
    report["tokens"] = t;
    report["rank"] = comp.rank;
    report["dampening"] = cfg.dampening;
    report["compression_ratio"] = comp.compression_ratio();
    report["kfac_error"] = metric_error;
    report["dropped_eigensum"] = dropped;
    report["scatter_eigenvalues"] = comp.scatter_eigenvalues;

    if (cfg.heads > 0) {
        if (cfg.head_dim < 1 || cfg.v_input_dim < 1) {
            throw std::invalid_argument("per-head V decomposition needs positive dims");
        }
        HeadPartition part;
        part.num_heads = cfg.heads;
        part.head_dim = cfg.head_dim;
        Matrix w_v(part.rows(), cfg.v_input_dim);
        for (double& v : w_v.data()) v = rng.normal();
        const std::size_t x_samples = 2 * cfg.v_input_dim + 4;
        Matrix x(cfg.v_input_dim, x_samples);
        for (double& v : x.data()) v = rng.normal();
        Matrix c_x = matmul(x, transpose(x));
        c_x *= 1.0 / static_cast<double>(x_samples);
        std::vector<Matrix> per_head_c_g;
        for (std::size_t head = 0; head < cfg.heads; ++head) {
            const std::size_t g_samples = 2 * cfg.head_dim + 4;
            Matrix gh(cfg.head_dim, g_samples);
            for (double& v : gh.data()) v = rng.normal();
            Matrix c_g = matmul(gh, transpose(gh));
            c_g *= 1.0 / static_cast<double>(g_samples);
            per_head_c_g.push_back(std::move(c_g));
        }
        const std::size_t v_rank =
            std::min(*cfg.rank, std::min(cfg.head_dim, cfg.v_input_dim));
        const std::vector<LowRankFactors> heads =
            decompose_v_per_head(w_v, c_x, per_head_c_g, part, v_rank, cfg.dampening);
        json per_head;
        tensors.push_back({"w_v", w_v, "f64"});
        for (std::size_t head = 0; head < heads.size(); ++head) {
            const std::string suffix = "head" + std::to_string(head);
            tensors.push_back({"b_" + suffix, heads[head].b, "f64"});
            tensors.push_back({"a_" + suffix, heads[head].a, "f64"});
            per_head.push_back({{"head", head}, {"kfac_loss", heads[head].kfac_loss}});
        }
        report["v_per_head"] = {{"heads", cfg.heads},
                                {"head_dim", cfg.head_dim},
                                {"input_dim", cfg.v_input_dim},
                                {"rank", v_rank},
                                {"losses", per_head}};
    }

    write_tensors(out, tensors);
    report["timings"] = {{"total_seconds", timer.seconds()}};
    write_report(out, report);
    return report;
}

json run_diagnose(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    const ToyModel model = ToyModel::random_init(model_config_from(cfg), cfg.seed);
    const SyntheticCorpus corpus = SyntheticCorpus::generate(corpus_config_from(cfg));
    const CollectedTraces traces = collect_traces(model, corpus, cfg.temperature, true);

    fs::create_directories(out);
    std::ofstream csv(fs::path(out) / "diagnose.csv", std::ios::trunc);
    if (!csv) {
        throw std::runtime_error("cannot write diagnose.csv under " + out);
    }
    csv << "layer,rho,side,index,eigenvalue\n";

    json layers;
    for (const std::string& layer : model.traced_layers()) {
        const CovarianceAccumulator& acc = traces.accumulators.at(layer);
        const double rho = correlation_factor(acc);
        const CovariancePair pair = finalize(acc, cfg.dampening);
        const EigResult ex = sym_eig(pair.c_x);
        const EigResult eg = sym_eig(pair.c_g);
        for (std::size_t i = 0; i < ex.lambda.size(); ++i) {
            csv << layer << "," << csv_double(rho) << ",input," << i << ","
                << csv_double(ex.lambda[i]) << "\n";
        }
        for (std::size_t i = 0; i < eg.lambda.size(); ++i) {
            csv << layer << "," << csv_double(rho) << ",gradient," << i << ","
                << csv_double(eg.lambda[i]) << "\n";
        }
        layers[layer] = {{"rho", rho},
                         {"tokens", acc.tokens_seen},
                         {"c_x_eigenvalues", ex.lambda},
                         {"c_g_eigenvalues", eg.lambda}};
    }

    json report;
    report["command"] = "diagnose";
    report["seed"] = cfg.seed;
    report["config"] = {{"temperature", cfg.temperature}, {"dampening", cfg.dampening}};
    report["model"] = model_echo(cfg);
    report["corpus"] = corpus_echo(cfg);
    report["layers"] = layers;
    report["csv"] = "diagnose.csv";
    report["timings"] = {{"total_seconds", timer.seconds()}};
    write_report(out, report);
    return report;
}

json run_eval(const RunConfig& cfg) {
    Timer timer;
    const std::string out = resolve_run_dir(cfg.out_dir);
    if (!cfg.decompose_dir.empty() && !cfg.compensate_dir.empty()) {
        throw std::invalid_argument("--decomposed and --compensated are mutually exclusive");
    }
    const CollectedRun run = load_collect(cfg.collect_dir);
    const double base_loss = evaluate_mean_loss(run.model, run.corpus);

    json report;
    report["command"] = "eval";
    report["inputs"] = {{"collect", cfg.collect_dir}};
    report["seed"] = cfg.seed;
    report["mean_loss"] = base_loss;
    report["perplexity"] = std::exp(base_loss);

    ToyModel edited = run.model;
    std::string edited_layer;
    if (!cfg.decompose_dir.empty()) {
        const std::string dir = resolve_run_dir(cfg.decompose_dir);
        const json factor_report = read_report(dir);
        const auto tensors = tensor_map(dir);
        edited_layer = factor_report.at("layer").get<std::string>();
        edited.weights(edited_layer) = require_tensor(tensors, "w_approx", dir);
        report["inputs"]["decompose"] = cfg.decompose_dir;
        report["edited"] = {{"layer", edited_layer},
                            {"mode", factor_report.at("mode")},
                            {"rank", factor_report.at("rank")},
                            {"kfac_loss", factor_report.at("kfac_loss")}};
    } else if (!cfg.compensate_dir.empty()) {
        const std::string dir = resolve_run_dir(cfg.compensate_dir);
        const json factor_report = read_report(dir);
        const auto tensors = tensor_map(dir);
        edited_layer = factor_report.at("layer").get<std::string>();
        edited.weights(edited_layer) = require_tensor(tensors, "w_compensated", dir);
        report["inputs"]["compensate"] = cfg.compensate_dir;
        report["edited"] = {{"layer", edited_layer},
                            {"mode", factor_report.at("mode")},
                            {"method", factor_report.at("method")},
                            {"rank", factor_report.at("rank")},
                            {"kfac_loss", factor_report.at("kfac_loss")}};
    }

    const double edited_loss = evaluate_mean_loss(edited, run.corpus);
    report["edited_mean_loss"] = edited_loss;
    report["edited_perplexity"] = std::exp(edited_loss);
    report["delta_l"] = edited_loss - base_loss;

    // With a truncation request the report carries the whole four-mode
    // comparison: predicted curvature loss and measured loss shift per mode,
    // for the configured layer.
    if (cfg.rank || cfg.ratio) {
        const Matrix& w = run.model.weights(cfg.layer);
        const CovariancePair pair = load_pair(run, cfg.layer, cfg.dampening);
        const std::size_t rank = resolve_requested_rank(cfg, w.rows(), w.cols());
        json table;
        for (Mode mode : kAllModes) {
            CompressionSpec spec;
            spec.rank = rank;
            spec.mode = mode;
            spec.dampening = cfg.dampening;
            const LowRankFactors factors = decompose(w, pair, spec);
            ToyModel swapped = run.model;
            swapped.weights(cfg.layer) = matmul(factors.b, factors.a);
            const double actual = evaluate_mean_loss(swapped, run.corpus) - base_loss;
            table[to_string(mode)] = {{"kfac_loss", factors.kfac_loss},
                                      {"actual_delta_l", actual}};
        }
        report["mode_table"] = {{"layer", cfg.layer},
                                {"rank", rank},
                                {"achieved_ratio", achieved_ratio(w.rows(), w.cols(), rank)},
                                {"dampening", cfg.dampening},
                                {"losses", table}};
    }

    report["timings"] = {{"total_seconds", timer.seconds()}};
    fs::create_directories(out);
    write_report(out, report);
    return report;
}

}  // namespace obd
