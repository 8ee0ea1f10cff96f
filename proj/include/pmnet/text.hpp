#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pmnet/tensor.hpp"

namespace pmnet {

enum class TokenizeMode {
    Lower,         // lowercase, whitespace split
    Pretokenized,  // whitespace split only, case preserved
};

// Token ids with two reserved slots. Ids >= 2 are assigned to corpus tokens.
class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;

    Vocab();

    std::int32_t add(std::string token);            // returns existing id on repeat
    std::int32_t id_of(std::string_view token) const;  // kUnk when absent
    bool contains(std::string_view token) const;
    const std::string& token(std::int32_t id) const;
    std::size_t size() const noexcept { return tokens_.size(); }

private:
    std::unordered_map<std::string, std::int32_t> ids_;
    std::vector<std::string> tokens_;
};

// V x H embedding matrix; row id 0 (PAD) is all zeros.
struct EmbeddingTable {
    Tensor weights;
    bool trainable = true;

    std::size_t rows() const { return weights.shape()[0]; }
    std::size_t dim() const { return weights.shape()[1]; }
};

// Fixed-length encoded text with an optional class label (-1 when absent).
struct Instance {
    std::vector<std::int32_t> token_ids;
    std::int32_t label = -1;
};

// One same/different-class training pair (label 1 iff same class).
struct PairExample {
    Instance a;
    Instance b;
    std::int32_t label = 0;
};

using PairDataset = std::vector<PairExample>;

// Instances grouped by class id; ids index class_names and follow first
// appearance order in the source file.
struct LabeledDataset {
    std::vector<std::string> class_names;
    std::vector<std::vector<Instance>> groups;

    std::size_t num_classes() const { return class_names.size(); }
    std::size_t total_instances() const;
};

std::vector<std::string> tokenize(std::string_view text, TokenizeMode mode = TokenizeMode::Lower);

// Ids from 2 upward in descending-frequency order, ties broken lexicographically.
Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t min_freq);

// Text embedding file: optional "V H" header line, then "word v1 .. vH" lines.
// In-vocab words take file vectors; PAD is zero; UNK and words missing from
// the file draw uniformly from [-0.25, 0.25] under the seed.
EmbeddingTable load_embeddings(const std::string& path, const Vocab& vocab, std::size_t dim,
                               std::uint64_t seed, bool trainable = true);

// No-file variant: every non-PAD row is drawn uniformly from [-0.25, 0.25].
EmbeddingTable init_embeddings(const Vocab& vocab, std::size_t dim, std::uint64_t seed,
                               bool trainable = true);

// Reads the width of the first data vector in an embedding file.
std::size_t probe_embedding_dim(const std::string& path);

// Maps tokens to ids (UNK for unknown), truncates the tail past seq_len, pads
// with PAD up to seq_len.
std::vector<std::int32_t> encode(const std::vector<std::string>& tokens, const Vocab& vocab,
                                 std::size_t seq_len);

// Token lists of every instance line in a TSV dataset file, for vocab building.
std::vector<std::vector<std::string>> read_token_lists(const std::string& path, TokenizeMode mode);

// TSV loader: one "label<TAB>text" instance per line, '#' lines ignored.
// When base_names is given its classes take the leading ids (possibly with
// empty groups) and new names are appended in first-appearance order.
LabeledDataset load_dataset(const std::string& path, const Vocab& vocab, std::size_t seq_len,
                            TokenizeMode mode = TokenizeMode::Lower,
                            const std::vector<std::string>* base_names = nullptr);

}  // namespace pmnet
