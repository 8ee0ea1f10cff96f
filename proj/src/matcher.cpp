#include "pmnet/matcher.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pmnet/error.hpp"
#include "pmnet/rng.hpp"

namespace pmnet {

std::string variant_name(Variant variant) {
    return variant == Variant::PM1 ? "pm1" : "pm2";
}

Variant variant_from_name(const std::string& name) {
    if (name == "pm1" || name == "1") return Variant::PM1;
    if (name == "pm2" || name == "2") return Variant::PM2;
    throw UsageError("unknown variant \"" + name + "\" (expected pm1 or pm2)");
}

std::vector<Tensor> MatchModel::parameters() const {
    std::vector<Tensor> params;
    if (embeddings.trainable) params.push_back(embeddings.weights);
    for (std::size_t i = 0; i < EncoderParams::kWidths.size(); ++i) {
        params.push_back(encoder.weights[i]);
        params.push_back(encoder.biases[i]);
    }
    params.push_back(head.w1);
    params.push_back(head.b1);
    params.push_back(head.w2);
    params.push_back(head.b2);
    return params;
}

namespace {

// Uniform +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

MatchModel init_model(Variant variant, Vocab vocab, EmbeddingTable embeddings,
                      std::size_t seq_len, const TrainConfig& config) {
    if (seq_len < EncoderParams::kWidths.back()) {
        throw ShapeError("init_model: sequence length " + std::to_string(seq_len) +
                         " is shorter than the widest filter (" +
                         std::to_string(EncoderParams::kWidths.back()) + ")");
    }
    if (embeddings.rows() != vocab.size()) {
        throw ShapeError("init_model: embedding table has " + std::to_string(embeddings.rows()) +
                         " rows for a vocab of " + std::to_string(vocab.size()));
    }

    MatchModel model;
    model.variant = variant;
    model.seq_len = seq_len;
    model.embed_dim = embeddings.dim();
    model.hidden_dim = config.hidden_dim;
    model.vocab = std::move(vocab);
    model.embeddings = std::move(embeddings);
    model.embeddings.trainable = config.finetune_embeddings;
    model.embeddings.weights.set_requires_grad(config.finetune_embeddings);

    const std::size_t channels = variant == Variant::PM2 ? 2 : 1;
    const std::size_t maps = config.feature_maps;
    const std::size_t height = model.embed_dim;

    Rng rng(Rng::mix(config.seed, 0x10));
    model.encoder.channels = channels;
    model.encoder.feature_maps = maps;
    for (std::size_t i = 0; i < EncoderParams::kWidths.size(); ++i) {
        const std::size_t width = EncoderParams::kWidths[i];
        model.encoder.weights[i] =
            glorot({width, height, channels, maps}, width * height * channels, maps, rng);
        model.encoder.biases[i] = Tensor::zeros({maps}, true);
    }

    const std::size_t head_in =
        variant == Variant::PM1 ? 2 * model.encoder.output_dim() : model.encoder.output_dim();
    model.head.w1 = glorot({head_in, config.hidden_dim}, head_in, config.hidden_dim, rng);
    model.head.b1 = Tensor::zeros({config.hidden_dim}, true);
    model.head.w2 = glorot({config.hidden_dim, 2}, config.hidden_dim, 2, rng);
    model.head.b2 = Tensor::zeros({2}, true);
    return model;
}

Tensor embed(const Instance& instance, const EmbeddingTable& table, Tape* tape) {
    return embedding_lookup(table.weights, instance.token_ids, tape);
}

Tensor cnn_encode(const Tensor& x, const EncoderParams& encoder, Tape* tape) {
    if (x.rank() != 3 || x.shape()[2] != encoder.channels) {
        throw ShapeError("cnn_encode: expected LxHx" + std::to_string(encoder.channels) +
                         " input, got " + shape_str(x.shape()));
    }
    if (x.shape()[0] < EncoderParams::kWidths.back()) {
        throw ShapeError("cnn_encode: input length " + std::to_string(x.shape()[0]) +
                         " is shorter than the widest filter (" +
                         std::to_string(EncoderParams::kWidths.back()) + ")");
    }
    std::vector<Tensor> pooled;
    pooled.reserve(EncoderParams::kWidths.size());
    for (std::size_t i = 0; i < EncoderParams::kWidths.size(); ++i) {
        Tensor maps = conv_valid(x, encoder.weights[i], encoder.biases[i], tape);
        pooled.push_back(max_over_time(relu(maps, tape), tape));
    }
    return concat(pooled, tape);
}

namespace {

// relu(x * W1 + b1) * W2 + b2 -> softmax, on a rank-1 encoding.
Tensor head_forward(const Tensor& encoding, const MatchModel& model, Tape* tape) {
    Tensor row = reshape(encoding, {1, encoding.size()}, tape);
    Tensor hidden = relu(
        add(matmul(row, model.head.w1, tape), reshape(model.head.b1, {1, model.hidden_dim}, tape),
            tape),
        tape);
    Tensor logits =
        add(matmul(hidden, model.head.w2, tape), reshape(model.head.b2, {1, 2}, tape), tape);
    return softmax(reshape(logits, {2}, tape), tape);
}

}  // namespace

Tensor pm1_forward(const Tensor& x1, const Tensor& x2, const MatchModel& model, Tape* tape) {
    if (model.variant != Variant::PM1) {
        throw UsageError("pm1_forward: model variant is " + variant_name(model.variant));
    }
    const std::size_t len = x1.shape()[0], height = x1.shape()[1];
    Tensor r1 = cnn_encode(reshape(x1, {len, height, 1}, tape), model.encoder, tape);
    Tensor r2 = cnn_encode(reshape(x2, {len, height, 1}, tape), model.encoder, tape);
    return head_forward(concat({r1, r2}, tape), model, tape);
}

Tensor pm2_forward(const Tensor& x1, const Tensor& x2, const MatchModel& model, Tape* tape) {
    if (model.variant != Variant::PM2) {
        throw UsageError("pm2_forward: model variant is " + variant_name(model.variant));
    }
    Tensor stacked = stack_channels(x1, x2, tape);
    return head_forward(cnn_encode(stacked, model.encoder, tape), model, tape);
}

Tensor pair_forward(const MatchModel& model, const Instance& a, const Instance& b, Tape* tape) {
    Tensor x1 = embed(a, model.embeddings, tape);
    Tensor x2 = embed(b, model.embeddings, tape);
    return model.variant == Variant::PM1 ? pm1_forward(x1, x2, model, tape)
                                         : pm2_forward(x1, x2, model, tape);
}

double match_prob(const MatchModel& model, const Instance& a, const Instance& b) {
    return pair_forward(model, a, b, nullptr)[1];
}

std::vector<double> train(MatchModel& model, const PairDataset& pairs, const TrainConfig& config) {
    if (pairs.empty()) throw UsageError("train: empty pair dataset");
    if (config.batch_size == 0 || config.epochs == 0) {
        throw UsageError("train: batch size and epochs must be positive");
    }

    Optimizer optimizer(config.optimizer, config.learning_rate, model.parameters());
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> epoch_losses;
    epoch_losses.reserve(config.epochs);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(Rng::mix(config.seed, 0x5000 + epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(start + config.batch_size, order.size());
            Tape tape;
            optimizer.zero_grad();

            std::vector<Tensor> rows;
            std::vector<std::int32_t> labels;
            rows.reserve(end - start);
            labels.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const PairExample& pair = pairs[order[i]];
                rows.push_back(pair_forward(model, pair.a, pair.b, &tape));
                labels.push_back(pair.label);
            }
            Tensor loss = cross_entropy(stack_rows(rows, &tape), labels, &tape);
            tape.backward(loss);
            optimizer.step();

            loss_sum += loss.value() * static_cast<double>(end - start);
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
    }
    return epoch_losses;
}

// Model file layout (little-endian throughout):
//   magic "PMNETv1\0"
//   u8   variant (1 | 2)
//   u32  L, H, d_fc, V
//   parameter tensors, each as u32 rank, u32 dims[rank], f64 data[numel]:
//     embeddings VxH,
//     per width 3,4,5: conv weight, conv bias,
//     head w1, b1, w2, b2
//   vocabulary: V tokens in id order, each u32 byte length + UTF-8 bytes.
namespace {

constexpr char kMagic[8] = {'P', 'M', 'N', 'E', 'T', 'v', '1', '\0'};

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void bytes(const void* data, std::size_t n) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    }

    void u8(std::uint8_t v) { bytes(&v, 1); }

    void u32(std::uint32_t v) {
        unsigned char buf[4];
        for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(buf, 4);
    }

    void f64(double v) {
        static_assert(sizeof(double) == 8);
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        bytes(buf, 8);
    }

    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) f64(v);
    }

private:
    std::ostream& out_;
};

class Reader {
public:
    Reader(std::istream& in, const std::string& path) : in_(in), path_(path) {}

    std::size_t offset() const { return offset_; }

    void bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError("load_model: " + path_ + ": truncated at offset " +
                              std::to_string(offset_));
        }
        offset_ += n;
    }

    std::uint8_t u8() {
        std::uint8_t v = 0;
        bytes(&v, 1);
        return v;
    }

    std::uint32_t u32() {
        unsigned char buf[4];
        bytes(buf, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
        return v;
    }

    double f64() {
        unsigned char buf[8];
        bytes(buf, 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return std::bit_cast<double>(bits);
    }

    Tensor tensor(const Shape& expected, bool requires_grad) {
        const std::size_t header_offset = offset_;
        const std::uint32_t rank = u32();
        Shape shape(rank);
        for (std::uint32_t i = 0; i < rank; ++i) shape[i] = u32();
        if (shape != expected) {
            throw FormatError("load_model: " + path_ + ": tensor at offset " +
                              std::to_string(header_offset) + " has shape " + shape_str(shape) +
                              ", expected " + shape_str(expected));
        }
        std::size_t numel = 1;
        for (std::size_t d : shape) numel *= d;
        std::vector<double> values(numel);
        for (std::size_t i = 0; i < numel; ++i) values[i] = f64();
        return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
    }

private:
    std::istream& in_;
    std::string path_;
    std::size_t offset_ = 0;
};

}  // namespace

void save_model(const MatchModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_model: cannot open " + path + " for writing");

    Writer w(out);
    w.bytes(kMagic, sizeof(kMagic));
    w.u8(static_cast<std::uint8_t>(model.variant));
    w.u32(static_cast<std::uint32_t>(model.seq_len));
    w.u32(static_cast<std::uint32_t>(model.embed_dim));
    w.u32(static_cast<std::uint32_t>(model.hidden_dim));
    w.u32(static_cast<std::uint32_t>(model.vocab.size()));

    w.tensor(model.embeddings.weights);
    for (std::size_t i = 0; i < EncoderParams::kWidths.size(); ++i) {
        w.tensor(model.encoder.weights[i]);
        w.tensor(model.encoder.biases[i]);
    }
    w.tensor(model.head.w1);
    w.tensor(model.head.b1);
    w.tensor(model.head.w2);
    w.tensor(model.head.b2);

    for (std::size_t id = 0; id < model.vocab.size(); ++id) {
        const std::string& token = model.vocab.token(static_cast<std::int32_t>(id));
        w.u32(static_cast<std::uint32_t>(token.size()));
        w.bytes(token.data(), token.size());
    }
    out.flush();
    if (!out) throw IoError("save_model: write to " + path + " failed");
}

MatchModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_model: cannot open " + path);

    Reader r(in, path);
    char magic[8];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("load_model: " + path + ": bad magic bytes at offset 0");
    }

    const std::uint8_t variant_byte = r.u8();
    if (variant_byte != 1 && variant_byte != 2) {
        throw FormatError("load_model: " + path + ": bad variant byte at offset 8");
    }

    MatchModel model;
    model.variant = static_cast<Variant>(variant_byte);
    model.seq_len = r.u32();
    model.embed_dim = r.u32();
    model.hidden_dim = r.u32();
    const std::uint32_t vocab_size = r.u32();
    if (model.seq_len == 0 || model.embed_dim == 0 || model.hidden_dim == 0 || vocab_size < 2) {
        throw FormatError("load_model: " + path + ": bad header field before offset " +
                          std::to_string(r.offset()));
    }

    const std::size_t channels = model.variant == Variant::PM2 ? 2 : 1;
    model.embeddings.weights = r.tensor({vocab_size, model.embed_dim}, true);
    model.embeddings.trainable = true;

    // Feature map count is recovered from the first conv tensor.
    {
        const std::size_t probe_offset = r.offset();
        const std::uint32_t rank = r.u32();
        if (rank != 4) {
            throw FormatError("load_model: " + path + ": conv tensor at offset " +
                              std::to_string(probe_offset) + " has rank " + std::to_string(rank));
        }
        Shape shape(4);
        for (int i = 0; i < 4; ++i) shape[i] = r.u32();
        if (shape[0] != EncoderParams::kWidths[0] || shape[1] != model.embed_dim ||
            shape[2] != channels || shape[3] == 0) {
            throw FormatError("load_model: " + path + ": conv tensor at offset " +
                              std::to_string(probe_offset) + " has shape " + shape_str(shape));
        }
        model.encoder.channels = channels;
        model.encoder.feature_maps = shape[3];
        std::size_t numel = shape[0] * shape[1] * shape[2] * shape[3];
        std::vector<double> values(numel);
        for (std::size_t i = 0; i < numel; ++i) values[i] = r.f64();
        model.encoder.weights[0] = Tensor::from_data(std::move(shape), std::move(values), true);
    }
    const std::size_t maps = model.encoder.feature_maps;
    model.encoder.biases[0] = r.tensor({maps}, true);
    for (std::size_t i = 1; i < EncoderParams::kWidths.size(); ++i) {
        model.encoder.weights[i] =
            r.tensor({EncoderParams::kWidths[i], model.embed_dim, channels, maps}, true);
        model.encoder.biases[i] = r.tensor({maps}, true);
    }

    const std::size_t head_in = model.variant == Variant::PM1 ? 2 * model.encoder.output_dim()
                                                              : model.encoder.output_dim();
    model.head.w1 = r.tensor({head_in, model.hidden_dim}, true);
    model.head.b1 = r.tensor({model.hidden_dim}, true);
    model.head.w2 = r.tensor({model.hidden_dim, 2}, true);
    model.head.b2 = r.tensor({2}, true);

    Vocab vocab;
    for (std::uint32_t id = 0; id < vocab_size; ++id) {
        const std::uint32_t length = r.u32();
        std::string token(length, '\0');
        if (length > 0) r.bytes(token.data(), length);
        if (id >= 2) {
            if (vocab.add(token) != static_cast<std::int32_t>(id)) {
                throw FormatError("load_model: " + path + ": duplicate vocab token \"" + token +
                                  "\" before offset " + std::to_string(r.offset()));
            }
        }
    }
    model.vocab = std::move(vocab);
    if (model.vocab.size() != vocab_size) {
        throw FormatError("load_model: " + path + ": vocab size mismatch");
    }
    return model;
}

}  // namespace pmnet
