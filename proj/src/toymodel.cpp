#include "obd/toymodel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "obd/errors.hpp"
#include "obd/rng.hpp"

namespace obd {

namespace {

void require_tokens_in_vocab(const std::vector<std::size_t>& sequence, std::size_t vocab) {
    if (sequence.empty()) {
        throw std::invalid_argument("sequence must contain at least one token");
    }
    for (std::size_t token : sequence) {
        if (token >= vocab) {
            throw std::invalid_argument("token " + std::to_string(token) +
                                        " outside vocabulary of size " + std::to_string(vocab));
        }
    }
}

struct Nudge {
    enum class Site { none, layer1, layer2, head } site = Site::none;
    std::size_t row = 0;
    std::size_t position = 0;
    double eps = 0.0;
};

struct PositionState {
    std::vector<double> x;   // d, embedding row of the input token
    std::vector<double> y1;  // h
    std::vector<double> a1;  // h
    std::vector<double> y2;  // d
    std::vector<double> z;   // V, logits
};

std::vector<double> matvec(const Matrix& w, const std::vector<double>& v) {
    std::vector<double> out(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j) sum += w(i, j) * v[j];
        out[i] = sum;
    }
    return out;
}

std::vector<double> matvec_transposed(const Matrix& w, const std::vector<double>& v) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += w(i, j) * v[i];
    }
    return out;
}

PositionState run_position(const ToyModel& model, std::size_t token, std::size_t position,
                           const Nudge& nudge) {
    const std::size_t d = model.config.embed_dim;
    PositionState state;
    state.x.resize(d);
    for (std::size_t j = 0; j < d; ++j) state.x[j] = model.embedding(token, j);

    state.y1 = matvec(model.layer1, state.x);
    if (nudge.site == Nudge::Site::layer1 && nudge.position == position) {
        state.y1[nudge.row] += nudge.eps;
    }
    state.a1.resize(state.y1.size());
    for (std::size_t i = 0; i < state.y1.size(); ++i) state.a1[i] = std::tanh(state.y1[i]);

    state.y2 = matvec(model.layer2, state.a1);
    if (nudge.site == Nudge::Site::layer2 && nudge.position == position) {
        state.y2[nudge.row] += nudge.eps;
    }

    state.z = matvec(model.head_weights(), state.y2);
    if (nudge.site == Nudge::Site::head && nudge.position == position) {
        state.z[nudge.row] += nudge.eps;
    }
    return state;
}

// Temperature-scaled softmax probabilities and the cross-entropy against the
// target, computed through a shifted log-sum-exp.
double position_loss(const std::vector<double>& z, double temperature, std::size_t target,
                     std::vector<double>* probs_out) {
    const std::size_t v = z.size();
    std::vector<double> scaled(v);
    for (std::size_t i = 0; i < v; ++i) scaled[i] = z[i] / temperature;
    const double peak = *std::max_element(scaled.begin(), scaled.end());
    double sum = 0.0;
    for (double s : scaled) sum += std::exp(s - peak);
    const double lse = peak + std::log(sum);
    if (probs_out) {
        probs_out->resize(v);
        for (std::size_t i = 0; i < v; ++i) (*probs_out)[i] = std::exp(scaled[i] - lse);
    }
    return lse - scaled[target];
}

double forward_loss(const ToyModel& model, const std::vector<std::size_t>& sequence,
                    double temperature, const Nudge& nudge) {
    double loss = 0.0;
    for (std::size_t t = 0; t + 1 < sequence.size(); ++t) {
        PositionState state = run_position(model, sequence[t], t, nudge);
        loss += position_loss(state.z, temperature, sequence[t + 1], nullptr);
    }
    return loss;
}

}  // namespace

ToyModel ToyModel::random_init(const ToyModelConfig& config, std::uint64_t seed, double scale) {
    if (config.vocab_size < 2 || config.embed_dim < 1 || config.hidden_dim < 1) {
        throw std::invalid_argument("toy model dims must be positive with vocab of at least 2");
    }
    Rng rng(seed);
    auto fill = [&rng](Matrix& w, double s) {
        for (double& v : w.data()) v = s * rng.normal();
    };
    ToyModel model;
    model.config = config;
    model.embedding = Matrix(config.vocab_size, config.embed_dim);
    model.layer1 = Matrix(config.hidden_dim, config.embed_dim);
    model.layer2 = Matrix(config.embed_dim, config.hidden_dim);
    fill(model.embedding, scale);
    fill(model.layer1, scale / std::sqrt(static_cast<double>(config.embed_dim)));
    fill(model.layer2, scale / std::sqrt(static_cast<double>(config.hidden_dim)));
    if (!config.tied_head) {
        model.head = Matrix(config.vocab_size, config.embed_dim);
        fill(model.head, scale / std::sqrt(static_cast<double>(config.embed_dim)));
    }
    return model;
}

std::vector<std::string> ToyModel::traced_layers() const {
    std::vector<std::string> names{"layer1", "layer2"};
    if (!config.tied_head) names.push_back("head");
    return names;
}

Matrix& ToyModel::weights(const std::string& layer_name) {
    if (layer_name == "embedding") return embedding;
    if (layer_name == "layer1") return layer1;
    if (layer_name == "layer2") return layer2;
    if (layer_name == "head" && !config.tied_head) return head;
    throw std::invalid_argument("unknown layer \"" + layer_name + "\"");
}

const Matrix& ToyModel::weights(const std::string& layer_name) const {
    return const_cast<ToyModel*>(this)->weights(layer_name);
}

Matrix forward(const ToyModel& model, const std::vector<std::size_t>& sequence) {
    require_tokens_in_vocab(sequence, model.config.vocab_size);
    Matrix logits(sequence.size(), model.config.vocab_size);
    Nudge none;
    for (std::size_t t = 0; t < sequence.size(); ++t) {
        PositionState state = run_position(model, sequence[t], t, none);
        for (std::size_t i = 0; i < state.z.size(); ++i) logits(t, i) = state.z[i];
    }
    check_finite(logits, "forward");
    return logits;
}

BackwardResult loss_and_backward(const ToyModel& model, const std::vector<std::size_t>& sequence,
                                 double temperature) {
    require_tokens_in_vocab(sequence, model.config.vocab_size);
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive, got " +
                                    std::to_string(temperature));
    }
    const std::size_t v = model.config.vocab_size;
    const std::size_t d = model.config.embed_dim;
    const std::size_t h = model.config.hidden_dim;
    const std::size_t positions = sequence.size() - 1;

    BackwardResult result;
    result.positions = positions;
    result.gradients.emplace("embedding", Matrix(v, d));
    result.gradients.emplace("layer1", Matrix(h, d));
    result.gradients.emplace("layer2", Matrix(d, h));
    if (!model.config.tied_head) result.gradients.emplace("head", Matrix(v, d));
    if (positions == 0) return result;

    Matrix x_l1(d, positions), g_l1(h, positions);
    Matrix x_l2(h, positions), g_l2(d, positions);
    Matrix x_head(d, positions), g_head(v, positions);

    Matrix& grad_emb = result.gradients.at("embedding");
    Matrix& grad_l1 = result.gradients.at("layer1");
    Matrix& grad_l2 = result.gradients.at("layer2");

    Nudge none;
    for (std::size_t t = 0; t < positions; ++t) {
        const std::size_t token = sequence[t];
        const std::size_t target = sequence[t + 1];
        PositionState state = run_position(model, token, t, none);

        std::vector<double> probs;
        result.loss += position_loss(state.z, temperature, target, &probs);

        std::vector<double> dz(v);
        for (std::size_t i = 0; i < v; ++i) {
            dz[i] = (probs[i] - (i == target ? 1.0 : 0.0)) / temperature;
        }

        if (model.config.tied_head) {
            for (std::size_t i = 0; i < v; ++i) {
                for (std::size_t j = 0; j < d; ++j) grad_emb(i, j) += dz[i] * state.y2[j];
            }
        } else {
            Matrix& grad_head = result.gradients.at("head");
            for (std::size_t i = 0; i < v; ++i) {
                for (std::size_t j = 0; j < d; ++j) grad_head(i, j) += dz[i] * state.y2[j];
            }
            for (std::size_t j = 0; j < d; ++j) x_head(j, t) = state.y2[j];
            for (std::size_t i = 0; i < v; ++i) g_head(i, t) = dz[i];
        }

        std::vector<double> dy2 = matvec_transposed(model.head_weights(), dz);
        for (std::size_t j = 0; j < h; ++j) x_l2(j, t) = state.a1[j];
        for (std::size_t i = 0; i < d; ++i) g_l2(i, t) = dy2[i];
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < h; ++j) grad_l2(i, j) += dy2[i] * state.a1[j];
        }

        std::vector<double> da1 = matvec_transposed(model.layer2, dy2);
        std::vector<double> dy1(h);
        for (std::size_t i = 0; i < h; ++i) {
            dy1[i] = da1[i] * (1.0 - state.a1[i] * state.a1[i]);
        }
        for (std::size_t j = 0; j < d; ++j) x_l1(j, t) = state.x[j];
        for (std::size_t i = 0; i < h; ++i) g_l1(i, t) = dy1[i];
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < d; ++j) grad_l1(i, j) += dy1[i] * state.x[j];
        }

        std::vector<double> dx = matvec_transposed(model.layer1, dy1);
        for (std::size_t j = 0; j < d; ++j) grad_emb(token, j) += dx[j];
    }

    result.x_capture.emplace("layer1", std::move(x_l1));
    result.g_capture.emplace("layer1", std::move(g_l1));
    result.x_capture.emplace("layer2", std::move(x_l2));
    result.g_capture.emplace("layer2", std::move(g_l2));
    if (!model.config.tied_head) {
        result.x_capture.emplace("head", std::move(x_head));
        result.g_capture.emplace("head", std::move(g_head));
    }
    return result;
}

double loss_with_nudge(const ToyModel& model, const std::vector<std::size_t>& sequence,
                       double temperature, const std::string& layer_name, std::size_t row,
                       std::size_t position, double eps) {
    require_tokens_in_vocab(sequence, model.config.vocab_size);
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
    Nudge nudge;
    if (layer_name == "layer1") {
        nudge.site = Nudge::Site::layer1;
    } else if (layer_name == "layer2") {
        nudge.site = Nudge::Site::layer2;
    } else if (layer_name == "head" && !model.config.tied_head) {
        nudge.site = Nudge::Site::head;
    } else {
        throw std::invalid_argument("cannot nudge layer \"" + layer_name + "\"");
    }
    nudge.row = row;
    nudge.position = position;
    nudge.eps = eps;
    return forward_loss(model, sequence, temperature, nudge);
}

SyntheticCorpus SyntheticCorpus::generate(const CorpusConfig& config) {
    if (config.vocab_size < 2) {
        throw std::invalid_argument("corpus vocabulary must have at least 2 symbols");
    }
    if (config.sequence_length < 1) {
        throw std::invalid_argument("corpus sequences must have at least 1 token");
    }
    Rng rng(config.seed);
    const std::size_t v = config.vocab_size;

    // Peaked stochastic rows: softmax of doubled Gaussian scores. The
    // sharpening keeps the chain far from uniform so activation covariances
    // are anisotropic.
    auto softmax_row = [&rng, v]() {
        std::vector<double> row(v);
        double peak = -1e300;
        for (double& s : row) {
            s = 2.0 * rng.normal();
            peak = std::max(peak, s);
        }
        double sum = 0.0;
        for (double& s : row) {
            s = std::exp(s - peak);
            sum += s;
        }
        for (double& s : row) s /= sum;
        return row;
    };

    std::vector<double> initial = softmax_row();
    std::vector<std::vector<double>> transitions;
    transitions.reserve(v);
    for (std::size_t i = 0; i < v; ++i) transitions.push_back(softmax_row());

    auto sample = [&rng](const std::vector<double>& dist) {
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < dist.size(); ++i) {
            acc += dist[i];
            if (u < acc) return i;
        }
        return dist.size() - 1;
    };

    SyntheticCorpus corpus;
    corpus.sequences.reserve(config.num_sequences);
    for (std::size_t s = 0; s < config.num_sequences; ++s) {
        std::vector<std::size_t> seq(config.sequence_length);
        seq[0] = sample(initial);
        for (std::size_t t = 1; t < config.sequence_length; ++t) {
            seq[t] = sample(transitions[seq[t - 1]]);
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

CollectedTraces collect_traces(const ToyModel& model, const SyntheticCorpus& corpus,
                               double temperature, bool track_cross) {
    if (corpus.sequences.empty()) {
        throw std::invalid_argument("collect_traces: corpus is empty");
    }
    const std::size_t v = model.config.vocab_size;
    const std::size_t d = model.config.embed_dim;
    const std::size_t h = model.config.hidden_dim;

    CollectedTraces out;
    out.accumulators.emplace("layer1", CovarianceAccumulator("layer1", d, h, track_cross));
    out.accumulators.emplace("layer2", CovarianceAccumulator("layer2", h, d, track_cross));
    if (!model.config.tied_head) {
        out.accumulators.emplace("head", CovarianceAccumulator("head", d, v, track_cross));
    }

    std::map<std::string, std::vector<Matrix>> x_parts, g_parts;
    for (const auto& sequence : corpus.sequences) {
        BackwardResult back = loss_and_backward(model, sequence, temperature);
        out.total_loss += back.loss;
        out.total_positions += back.positions;
        if (back.positions == 0) continue;
        for (const auto& [name, x_batch] : back.x_capture) {
            const Matrix& g_batch = back.g_capture.at(name);
            accumulate(out.accumulators.at(name), x_batch, g_batch);
            x_parts[name].push_back(x_batch);
            g_parts[name].push_back(g_batch);
        }
    }

    auto concatenate = [](const std::vector<Matrix>& parts) {
        std::size_t total = 0;
        for (const Matrix& p : parts) total += p.cols();
        Matrix out_m(parts.front().rows(), total);
        std::size_t offset = 0;
        for (const Matrix& p : parts) {
            for (std::size_t i = 0; i < p.rows(); ++i) {
                for (std::size_t j = 0; j < p.cols(); ++j) out_m(i, offset + j) = p(i, j);
            }
            offset += p.cols();
        }
        return out_m;
    };
    for (const auto& [name, parts] : x_parts) {
        out.bundle.x.emplace(name, concatenate(parts));
        out.bundle.g.emplace(name, concatenate(g_parts.at(name)));
    }
    out.bundle.tokens = out.total_positions;
    return out;
}

double evaluate_mean_loss(const ToyModel& model, const SyntheticCorpus& corpus) {
    if (corpus.sequences.empty()) {
        throw std::invalid_argument("evaluate_mean_loss: corpus is empty");
    }
    double total = 0.0;
    std::size_t positions = 0;
    Nudge none;
    for (const auto& sequence : corpus.sequences) {
        require_tokens_in_vocab(sequence, model.config.vocab_size);
        total += forward_loss(model, sequence, 1.0, none);
        positions += sequence.size() - 1;
    }
    if (positions == 0) {
        throw std::invalid_argument("evaluate_mean_loss: corpus has no predicted positions");
    }
    return total / static_cast<double>(positions);
}

Matrix quantize_rtn(const Matrix& w, int bits, bool per_channel) {
    if (bits < 2 || bits > 16) {
        throw std::invalid_argument("quantization bits must lie in [2,16], got " +
                                    std::to_string(bits));
    }
    const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
    Matrix out(w.rows(), w.cols());

    auto quantize_range = [&](std::size_t row_begin, std::size_t row_end) {
        double scale = 0.0;
        for (std::size_t i = row_begin; i < row_end; ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) scale = std::max(scale, std::fabs(w(i, j)));
        }
        if (scale == 0.0) return;
        for (std::size_t i = row_begin; i < row_end; ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) {
                const double q = std::round((w(i, j) * qmax) / scale);
                out(i, j) = (q * scale) / qmax;
            }
        }
    };

    if (per_channel) {
        for (std::size_t i = 0; i < w.rows(); ++i) quantize_range(i, i + 1);
    } else {
        quantize_range(0, w.rows());
    }
    return out;
}

Matrix prune_24(const Matrix& w) {
    Matrix out = w;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t group = 0; group + 4 <= w.cols(); group += 4) {
            std::array<std::size_t, 4> idx{0, 1, 2, 3};
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                const double fa = std::fabs(w(i, group + a));
                const double fb = std::fabs(w(i, group + b));
                if (fa != fb) return fa < fb;
                return a < b;
            });
            out(i, group + idx[0]) = 0.0;
            out(i, group + idx[1]) = 0.0;
        }
    }
    return out;
}

}  // namespace obd
