#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pmnet/optim.hpp"
#include "pmnet/tensor.hpp"
#include "pmnet/text.hpp"

namespace pmnet {

enum class Variant : std::uint8_t { PM1 = 1, PM2 = 2 };

std::string variant_name(Variant variant);
Variant variant_from_name(const std::string& name);

// Three parallel filter banks over windows of width 3, 4 and 5. The PM1
// encoder reads a single channel and runs once per instance; the PM2 encoder
// reads the pair stacked as two channels.
struct EncoderParams {
    static constexpr std::array<std::size_t, 3> kWidths{3, 4, 5};

    std::size_t channels = 1;
    std::size_t feature_maps = 100;
    std::array<Tensor, 3> weights;  // width x H x C x F each
    std::array<Tensor, 3> biases;   // F each

    std::size_t output_dim() const { return kWidths.size() * feature_maps; }
};

// Two fully connected layers on top of the encoder output. PM1 consumes the
// concatenated pair encodings (2 * output_dim wide), PM2 a single encoding.
struct HeadParams {
    Tensor w1;  // in x hidden
    Tensor b1;  // hidden
    Tensor w2;  // hidden x 2
    Tensor b2;  // 2
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 5;
    std::uint64_t seed = 0;
    std::size_t hidden_dim = 256;   // width of the first fully connected layer
    std::size_t feature_maps = 100;
    bool finetune_embeddings = true;
};

// The trained matching function f(x1, x2).
struct MatchModel {
    Variant variant = Variant::PM2;
    std::size_t seq_len = 0;    // L
    std::size_t embed_dim = 0;  // H
    std::size_t hidden_dim = 0;
    EncoderParams encoder;
    HeadParams head;
    EmbeddingTable embeddings;
    Vocab vocab;

    // Trainable tensors in serialization order (embeddings first when tuned).
    std::vector<Tensor> parameters() const;
};

MatchModel init_model(Variant variant, Vocab vocab, EmbeddingTable embeddings,
                      std::size_t seq_len, const TrainConfig& config);

// Embedding matrix of one instance: row p embeds token_ids[p].
Tensor embed(const Instance& instance, const EmbeddingTable& table, Tape* tape = nullptr);

// conv -> relu -> max-over-time per filter width, concatenated in width order.
Tensor cnn_encode(const Tensor& x, const EncoderParams& encoder, Tape* tape = nullptr);

// Probability 2-vectors; element 1 is the same-class probability.
Tensor pm1_forward(const Tensor& x1, const Tensor& x2, const MatchModel& model,
                   Tape* tape = nullptr);
Tensor pm2_forward(const Tensor& x1, const Tensor& x2, const MatchModel& model,
                   Tape* tape = nullptr);
Tensor pair_forward(const MatchModel& model, const Instance& a, const Instance& b,
                    Tape* tape = nullptr);

// Same-class probability of (a, b) in argument order. Pure; safe to call from
// concurrent workers on a finalized model.
double match_prob(const MatchModel& model, const Instance& a, const Instance& b);

// Mini-batch cross-entropy training over the pair dataset. The shuffle is
// reseeded per epoch from config.seed, so a fixed seed fixes the whole run.
// Returns the mean per-pair loss of each epoch.
std::vector<double> train(MatchModel& model, const PairDataset& pairs, const TrainConfig& config);

void save_model(const MatchModel& model, const std::string& path);
MatchModel load_model(const std::string& path);

}  // namespace pmnet
