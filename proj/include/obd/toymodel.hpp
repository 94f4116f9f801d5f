#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "obd/covariance.hpp"
#include "obd/matrix.hpp"

namespace obd {

// Tiny next-token model: embedding lookup, linear, tanh, linear, projection
// to vocabulary logits. The head is the embedding matrix when tied, a
// separate V×d weight otherwise. Linear layers act on column vectors, so
// layer1 maps d→h and layer2 maps h→d.
struct ToyModelConfig {
    std::size_t vocab_size = 12;
    std::size_t embed_dim = 8;
    std::size_t hidden_dim = 8;
    bool tied_head = true;
};

struct ToyModel {
    ToyModelConfig config;
    Matrix embedding;  // V×d
    Matrix layer1;     // h×d
    Matrix layer2;     // d×h
    Matrix head;       // V×d, used only when the head is untied

    static ToyModel random_init(const ToyModelConfig& config, std::uint64_t seed,
                                double scale = 1.0);

    // Traced linear layers, in forward order: layer1, layer2, and the head
    // when untied. The embedding lookup is not a linear layer over
    // activations and is never traced.
    std::vector<std::string> traced_layers() const;
    Matrix& weights(const std::string& layer_name);
    const Matrix& weights(const std::string& layer_name) const;
    const Matrix& head_weights() const { return config.tied_head ? embedding : head; }
};

// Logits for every input position, one row per position (T×V). Rejects
// out-of-vocabulary tokens.
Matrix forward(const ToyModel& model, const std::vector<std::size_t>& sequence);

// Loss, parameter gradients, and per-layer activation/gradient captures for
// one sequence. The loss is the summed next-token cross-entropy of
// temperature-scaled logits over positions 1..T−1; captures hold one column
// per predicted position and are absent when the sequence has none.
struct BackwardResult {
    double loss = 0.0;
    std::map<std::string, Matrix> gradients;  // every weight, by name
    std::map<std::string, Matrix> x_capture;  // traced layers: inputs, n×P
    std::map<std::string, Matrix> g_capture;  // traced layers: ∂loss/∂y, m×P
    std::size_t positions = 0;
};

BackwardResult loss_and_backward(const ToyModel& model, const std::vector<std::size_t>& sequence,
                                 double temperature);

// Forward pass with one activation entry nudged by eps at a traced layer's
// output, returning the perturbed loss. Drives central-difference checks of
// the captured activation gradients.
double loss_with_nudge(const ToyModel& model, const std::vector<std::size_t>& sequence,
                       double temperature, const std::string& layer_name, std::size_t row,
                       std::size_t position, double eps);

// Seeded order-1 Markov chain corpus. Transition rows are softmax of scaled
// Gaussian scores, which makes them peaked enough to produce anisotropic
// activation statistics.
struct CorpusConfig {
    std::size_t vocab_size = 12;
    std::size_t num_sequences = 24;
    std::size_t sequence_length = 33;
    std::uint64_t seed = 1;
};

struct SyntheticCorpus {
    std::vector<std::vector<std::size_t>> sequences;

    static SyntheticCorpus generate(const CorpusConfig& config);
};

// Concatenated per-layer captures across a corpus plus streaming covariance
// accumulators for the same layers.
struct TraceBundle {
    std::map<std::string, Matrix> x;
    std::map<std::string, Matrix> g;
    std::size_t tokens = 0;
};

struct CollectedTraces {
    TraceBundle bundle;
    std::map<std::string, CovarianceAccumulator> accumulators;
    double total_loss = 0.0;
    std::size_t total_positions = 0;
};

CollectedTraces collect_traces(const ToyModel& model, const SyntheticCorpus& corpus,
                               double temperature, bool track_cross = false);

// Mean per-position next-token loss at temperature 1. Perplexity is its exp.
double evaluate_mean_loss(const ToyModel& model, const SyntheticCorpus& corpus);

// Symmetric round-to-nearest quantization at the given bit width. Scales are
// per output row when per_channel is set, global otherwise; zero rows stay
// zero.
Matrix quantize_rtn(const Matrix& w, int bits, bool per_channel = true);

// 2:4 structured magnitude pruning: in each contiguous group of 4 along the
// input dimension, the 2 smallest-magnitude entries are zeroed, ties broken
// toward the lower index. A trailing partial group is left untouched.
Matrix prune_24(const Matrix& w);

}  // namespace obd
