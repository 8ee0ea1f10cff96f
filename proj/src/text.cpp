#include "pmnet/text.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "pmnet/error.hpp"
#include "pmnet/rng.hpp"

namespace pmnet {

std::size_t LabeledDataset::total_instances() const {
    std::size_t n = 0;
    for (const auto& group : groups) n += group.size();
    return n;
}

Vocab::Vocab() {
    tokens_ = {"<pad>", "<unk>"};
    ids_ = {{"<pad>", kPad}, {"<unk>", kUnk}};
}

std::int32_t Vocab::add(std::string token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens_.size());
    ids_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
}

std::int32_t Vocab::id_of(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
    return ids_.find(std::string(token)) != ids_.end();
}

const std::string& Vocab::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw UsageError("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> tokenize(std::string_view text, TokenizeMode mode) {
    std::vector<std::string> out;
    std::string current;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!current.empty()) out.push_back(std::move(current));
            current.clear();
            continue;
        }
        if (mode == TokenizeMode::Lower) {
            ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
        current.push_back(ch);
    }
    if (!current.empty()) out.push_back(std::move(current));
    return out;
}

Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t min_freq) {
    if (min_freq == 0) throw UsageError("build_vocab: min_freq must be positive");
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& tokens : corpus) {
        for (const auto& token : tokens) ++counts[token];
    }

    std::vector<std::pair<std::string, std::size_t>> kept;
    kept.reserve(counts.size());
    for (auto& [token, count] : counts) {
        if (count >= min_freq) kept.emplace_back(token, count);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab vocab;
    for (auto& [token, count] : kept) vocab.add(std::move(token));
    return vocab;
}

namespace {

bool parse_double(std::string_view text, double& out) {
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc() && ptr == end;
}

bool parse_size(std::string_view text, std::size_t& out) {
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

void fill_random_row(double* row, std::size_t dim, Rng& rng) {
    for (std::size_t j = 0; j < dim; ++j) row[j] = rng.uniform(-0.25, 0.25);
}

}  // namespace

EmbeddingTable load_embeddings(const std::string& path, const Vocab& vocab, std::size_t dim,
                               std::uint64_t seed, bool trainable) {
    if (dim == 0) throw UsageError("load_embeddings: embedding size must be positive");
    std::ifstream in(path);
    if (!in) throw IoError("load_embeddings: cannot open " + path);

    Tensor weights = Tensor::zeros({vocab.size(), dim});
    std::vector<char> from_file(vocab.size(), 0);

    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        auto fields = split_ws(line);
        if (fields.empty()) continue;

        if (first) {
            first = false;
            // Optional "V H" header.
            std::size_t v = 0, h = 0;
            if (fields.size() == 2 && parse_size(fields[0], v) && parse_size(fields[1], h)) {
                if (h != dim) {
                    throw FormatError("load_embeddings: file header declares size " +
                                      std::to_string(h) + ", expected " + std::to_string(dim));
                }
                continue;
            }
        }

        if (fields.size() != dim + 1) {
            throw ParseError("load_embeddings: line " + std::to_string(line_no) + ": expected " +
                             std::to_string(dim) + " values, got " +
                             std::to_string(fields.size() - 1));
        }
        std::vector<double> values(dim);
        for (std::size_t j = 0; j < dim; ++j) {
            if (!parse_double(fields[j + 1], values[j])) {
                throw ParseError("load_embeddings: line " + std::to_string(line_no) +
                                 ": bad float \"" + std::string(fields[j + 1]) + "\"");
            }
        }
        const std::string word(fields[0]);
        if (vocab.contains(word)) {
            const auto id = static_cast<std::size_t>(vocab.id_of(word));
            std::copy(values.begin(), values.end(), weights.data().data() + id * dim);
            from_file[id] = 1;
        }
    }

    // PAD is zero and UNK is random regardless of file contents; out-of-file
    // rows draw from the seeded generator in ascending id order.
    Rng rng(seed);
    std::fill_n(weights.data().data() + Vocab::kPad * dim, dim, 0.0);
    from_file[Vocab::kPad] = 1;
    from_file[Vocab::kUnk] = 0;
    for (std::size_t id = 0; id < vocab.size(); ++id) {
        if (!from_file[id]) fill_random_row(weights.data().data() + id * dim, dim, rng);
    }

    EmbeddingTable table{weights, trainable};
    table.weights.set_requires_grad(trainable);
    return table;
}

EmbeddingTable init_embeddings(const Vocab& vocab, std::size_t dim, std::uint64_t seed,
                               bool trainable) {
    if (dim == 0) throw UsageError("init_embeddings: embedding size must be positive");
    Tensor weights = Tensor::zeros({vocab.size(), dim});
    Rng rng(seed);
    for (std::size_t id = 1; id < vocab.size(); ++id) {
        fill_random_row(weights.data().data() + id * dim, dim, rng);
    }
    EmbeddingTable table{weights, trainable};
    table.weights.set_requires_grad(trainable);
    return table;
}

std::size_t probe_embedding_dim(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("probe_embedding_dim: cannot open " + path);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        auto fields = split_ws(line);
        if (fields.empty()) continue;
        if (first) {
            first = false;
            std::size_t v = 0, h = 0;
            if (fields.size() == 2 && parse_size(fields[0], v) && parse_size(fields[1], h)) {
                return h;
            }
        }
        if (fields.size() < 2) {
            throw FormatError("probe_embedding_dim: no vector values in " + path);
        }
        return fields.size() - 1;
    }
    throw FormatError("probe_embedding_dim: empty embedding file " + path);
}

std::vector<std::int32_t> encode(const std::vector<std::string>& tokens, const Vocab& vocab,
                                 std::size_t seq_len) {
    if (seq_len == 0) throw UsageError("encode: sequence length must be positive");
    std::vector<std::int32_t> ids;
    ids.reserve(seq_len);
    for (const auto& token : tokens) {
        if (ids.size() == seq_len) break;  // cut the tail
        ids.push_back(vocab.id_of(token));
    }
    ids.resize(seq_len, Vocab::kPad);
    return ids;
}

namespace {

struct TsvRow {
    std::string label;
    std::string text;
    std::size_t line_no;
};

std::vector<TsvRow> read_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open " + path);

    std::vector<TsvRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw ParseError("load_dataset: " + path + " line " + std::to_string(line_no) +
                             ": missing tab separator");
        }
        std::string label = line.substr(0, tab);
        if (label.empty()) {
            throw ParseError("load_dataset: " + path + " line " + std::to_string(line_no) +
                             ": empty label");
        }
        rows.push_back({std::move(label), line.substr(tab + 1), line_no});
    }
    return rows;
}

}  // namespace

std::vector<std::vector<std::string>> read_token_lists(const std::string& path,
                                                       TokenizeMode mode) {
    std::vector<std::vector<std::string>> out;
    for (const auto& row : read_tsv(path)) out.push_back(tokenize(row.text, mode));
    return out;
}

LabeledDataset load_dataset(const std::string& path, const Vocab& vocab, std::size_t seq_len,
                            TokenizeMode mode, const std::vector<std::string>* base_names) {
    LabeledDataset dataset;
    std::unordered_map<std::string, std::int32_t> label_ids;
    if (base_names) {
        for (const auto& name : *base_names) {
            label_ids.emplace(name, static_cast<std::int32_t>(dataset.class_names.size()));
            dataset.class_names.push_back(name);
            dataset.groups.emplace_back();
        }
    }

    for (const auto& row : read_tsv(path)) {
        auto it = label_ids.find(row.label);
        std::int32_t id;
        if (it == label_ids.end()) {
            id = static_cast<std::int32_t>(dataset.class_names.size());
            label_ids.emplace(row.label, id);
            dataset.class_names.push_back(row.label);
            dataset.groups.emplace_back();
        } else {
            id = it->second;
        }
        Instance instance;
        instance.token_ids = encode(tokenize(row.text, mode), vocab, seq_len);
        instance.label = id;
        dataset.groups[static_cast<std::size_t>(id)].push_back(std::move(instance));
    }

    if (dataset.total_instances() == 0) {
        throw FormatError("load_dataset: " + path + " contains no instances");
    }
    return dataset;
}

}  // namespace pmnet
