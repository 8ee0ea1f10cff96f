#include "pmnet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "pmnet/error.hpp"
#include "pmnet/rng.hpp"

namespace pmnet {

std::string f1_average_name(F1Average avg) {
    return avg == F1Average::SeenPlusReject ? "seen+reject" : "seen";
}

F1Average f1_average_from_name(const std::string& name) {
    if (name == "seen+reject") return F1Average::SeenPlusReject;
    if (name == "seen") return F1Average::SeenOnly;
    throw UsageError("unknown f1-over value \"" + name + "\" (expected seen or seen+reject)");
}

namespace {

std::string optimizer_name(OptimizerKind kind) {
    return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "sgd") return OptimizerKind::SGD;
    throw UsageError("unknown optimizer \"" + name + "\" (expected adam or sgd)");
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig config;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "dataset") config.dataset = value.get<std::string>();
            else if (key == "test_dataset") config.test_dataset = value.get<std::string>();
            else if (key == "embeddings") config.embeddings = value.get<std::string>();
            else if (key == "output") config.output = value.get<std::string>();
            else if (key == "variant") config.variant = variant_from_name(value.get<std::string>());
            else if (key == "seen_classes") config.seen_classes = value.get<std::size_t>();
            else if (key == "seen_ratio") config.seen_ratio = value.get<std::string>();
            else if (key == "memory_size") config.memory_size = value.get<std::size_t>();
            else if (key == "optimizer")
                config.train.optimizer = optimizer_from_name(value.get<std::string>());
            else if (key == "learning_rate") config.train.learning_rate = value.get<double>();
            else if (key == "batch_size") config.train.batch_size = value.get<std::size_t>();
            else if (key == "epochs") config.train.epochs = value.get<std::size_t>();
            else if (key == "hidden_dim") config.train.hidden_dim = value.get<std::size_t>();
            else if (key == "feature_maps") config.train.feature_maps = value.get<std::size_t>();
            else if (key == "finetune_embeddings")
                config.train.finetune_embeddings = value.get<bool>();
            else if (key == "seq_len") config.seq_len = value.get<std::size_t>();
            else if (key == "embed_dim") config.embed_dim = value.get<std::size_t>();
            else if (key == "min_freq") config.min_freq = value.get<std::size_t>();
            else if (key == "threshold_mode")
                config.threshold_mode = threshold_mode_from_name(value.get<std::string>());
            else if (key == "alpha") config.alpha = value.get<double>();
            else if (key == "seed") config.seed = value.get<std::uint64_t>();
            else if (key == "pretokenized") config.pretokenized = value.get<bool>();
            else if (key == "pair_both_orders") config.pair_both_orders = value.get<bool>();
            else if (key == "f1_over") config.f1_over = f1_average_from_name(value.get<std::string>());
            else throw UsageError("config: unknown key \"" + key + "\"");
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("config: bad value for \"" + key + "\": " + e.what());
        }
    }
    config.train.seed = config.seed;
    return config;
}

nlohmann::json config_to_json(const ExperimentConfig& config) {
    return {
        {"dataset", config.dataset},
        {"test_dataset", config.test_dataset},
        {"embeddings", config.embeddings},
        {"output", config.output},
        {"variant", variant_name(config.variant)},
        {"seen_classes", config.seen_classes},
        {"seen_ratio", config.seen_ratio},
        {"memory_size", config.memory_size},
        {"optimizer", optimizer_name(config.train.optimizer)},
        {"learning_rate", config.train.learning_rate},
        {"batch_size", config.train.batch_size},
        {"epochs", config.train.epochs},
        {"hidden_dim", config.train.hidden_dim},
        {"feature_maps", config.train.feature_maps},
        {"finetune_embeddings", config.train.finetune_embeddings},
        {"seq_len", config.seq_len},
        {"embed_dim", config.embed_dim},
        {"min_freq", config.min_freq},
        {"threshold_mode", threshold_mode_name(config.threshold_mode)},
        {"alpha", config.alpha},
        {"seed", config.seed},
        {"pretokenized", config.pretokenized},
        {"pair_both_orders", config.pair_both_orders},
        {"f1_over", f1_average_name(config.f1_over)},
    };
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_config: " + path + ": " + e.what());
    }
    return config_from_json(j);
}

std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> split_seen_unseen(
    const std::vector<std::int32_t>& class_ids, std::size_t n_seen, std::uint64_t seed) {
    if (n_seen < 2 || n_seen >= class_ids.size()) {
        throw UsageError("split_seen_unseen: n_seen=" + std::to_string(n_seen) +
                         " must be in [2, " + std::to_string(class_ids.size()) + ")");
    }
    std::vector<std::int32_t> shuffled(class_ids);
    Rng rng(seed);
    rng.shuffle(shuffled);

    std::vector<std::int32_t> seen(shuffled.begin(), shuffled.begin() + n_seen);
    std::vector<std::int32_t> unseen(shuffled.begin() + n_seen, shuffled.end());
    std::sort(seen.begin(), seen.end());
    std::sort(unseen.begin(), unseen.end());
    return {std::move(seen), std::move(unseen)};
}

LabeledDataset project_seen(const LabeledDataset& dataset,
                            const std::vector<std::int32_t>& seen_ids) {
    std::vector<std::int32_t> ordered(seen_ids);
    std::sort(ordered.begin(), ordered.end());

    LabeledDataset projected;
    for (std::int32_t id : ordered) {
        if (id < 0 || static_cast<std::size_t>(id) >= dataset.num_classes()) {
            throw UsageError("project_seen: class id " + std::to_string(id) +
                             " not in the dataset");
        }
        const auto new_id = static_cast<std::int32_t>(projected.class_names.size());
        projected.class_names.push_back(dataset.class_names[static_cast<std::size_t>(id)]);
        projected.groups.push_back(dataset.groups[static_cast<std::size_t>(id)]);
        for (Instance& instance : projected.groups.back()) instance.label = new_id;
    }
    return projected;
}

std::vector<std::int32_t> relabel_test(const LabeledDataset& test,
                                       const std::vector<std::int32_t>& seen_ids) {
    std::vector<std::int32_t> ordered(seen_ids);
    std::sort(ordered.begin(), ordered.end());
    const auto reject = reject_label(ordered.size());

    std::vector<std::int32_t> gold;
    gold.reserve(test.total_instances());
    for (std::size_t c = 0; c < test.num_classes(); ++c) {
        const auto it = std::lower_bound(ordered.begin(), ordered.end(),
                                         static_cast<std::int32_t>(c));
        const bool is_seen = it != ordered.end() && *it == static_cast<std::int32_t>(c);
        const std::int32_t label =
            is_seen ? static_cast<std::int32_t>(it - ordered.begin()) : reject;
        gold.insert(gold.end(), test.groups[c].size(), label);
    }
    return gold;
}

F1Result macro_f1(const std::vector<std::int32_t>& predicted,
                  const std::vector<std::int32_t>& gold, std::size_t n_seen,
                  const std::vector<std::string>& seen_names, F1Average average) {
    if (predicted.size() != gold.size()) {
        throw UsageError("macro_f1: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(gold.size()) + " gold labels");
    }
    if (seen_names.size() != n_seen) {
        throw UsageError("macro_f1: " + std::to_string(seen_names.size()) + " names for " +
                         std::to_string(n_seen) + " seen classes");
    }
    const std::size_t num_classes = n_seen + 1;  // + rejection pseudo-class

    F1Result result;
    result.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] < 0 || static_cast<std::size_t>(predicted[i]) >= num_classes ||
            gold[i] < 0 || static_cast<std::size_t>(gold[i]) >= num_classes) {
            throw UsageError("macro_f1: label outside [0, " + std::to_string(num_classes) +
                             ") at position " + std::to_string(i));
        }
        ++result.confusion[static_cast<std::size_t>(gold[i])][static_cast<std::size_t>(predicted[i])];
    }

    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t tp = result.confusion[c][c];
        std::size_t gold_count = 0, pred_count = 0;
        for (std::size_t o = 0; o < num_classes; ++o) {
            gold_count += result.confusion[c][o];
            pred_count += result.confusion[o][c];
        }
        ClassMetrics metrics;
        metrics.name = c < n_seen ? seen_names[c] : "<reject>";
        metrics.support = gold_count;
        metrics.precision = pred_count == 0 ? 0.0
                                            : static_cast<double>(tp) /
                                                  static_cast<double>(pred_count);
        metrics.recall =
            gold_count == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(gold_count);
        metrics.f1 = (metrics.precision + metrics.recall) == 0.0
                         ? 0.0
                         : 2.0 * metrics.precision * metrics.recall /
                               (metrics.precision + metrics.recall);
        result.per_class.push_back(std::move(metrics));
    }

    const std::size_t averaged = average == F1Average::SeenOnly ? n_seen : num_classes;
    double acc = 0.0;
    for (std::size_t c = 0; c < averaged; ++c) acc += result.per_class[c].f1;
    result.macro_f1 = acc / static_cast<double>(averaged);
    return result;
}

namespace {

std::size_t resolve_seen_count(const ExperimentConfig& config, std::size_t total_classes) {
    if (config.seen_classes > 0) return config.seen_classes;
    if (config.seen_ratio.empty()) {
        throw UsageError("config: set seen_classes or seen_ratio");
    }
    const auto colon = config.seen_ratio.find(':');
    if (colon == std::string::npos) {
        throw UsageError("config: seen_ratio \"" + config.seen_ratio +
                         "\" is not of the form seen:unseen");
    }
    std::size_t seen = 0, unseen = 0;
    try {
        seen = std::stoul(config.seen_ratio.substr(0, colon));
        unseen = std::stoul(config.seen_ratio.substr(colon + 1));
    } catch (const std::exception&) {
        throw UsageError("config: seen_ratio \"" + config.seen_ratio +
                         "\" is not of the form seen:unseen");
    }
    if (seen + unseen != total_classes) {
        throw UsageError("config: seen_ratio " + config.seen_ratio + " does not sum to the " +
                         std::to_string(total_classes) + " dataset classes");
    }
    return seen;
}

class StageTimer {
public:
    explicit StageTimer(std::map<std::string, double>& timings) : timings_(timings) {}

    template <typename Fn>
    auto run(const std::string& name, Fn&& fn) -> decltype(fn()) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            try {
                fn();
            } catch (const Error& e) {
                throw Error(e.kind(), name + ": " + e.what());
            }
            record(name, start);
        } else {
            try {
                auto value = fn();
                record(name, start);
                return value;
            } catch (const Error& e) {
                throw Error(e.kind(), name + ": " + e.what());
            }
        }
    }

private:
    void record(const std::string& name, std::chrono::steady_clock::time_point start) {
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        timings_[name] = elapsed.count();
    }

    std::map<std::string, double>& timings_;
};

}  // namespace

Report run_experiment(const ExperimentConfig& config) {
    Report report;
    report.config = config_to_json(config);
    StageTimer timer(report.timings);
    const auto total_start = std::chrono::steady_clock::now();

    const TokenizeMode mode = config.tokenize_mode();

    struct Loaded {
        Vocab vocab;
        EmbeddingTable embeddings;
        LabeledDataset train;
        LabeledDataset test;
    };
    Loaded loaded = timer.run("load", [&]() {
        Loaded out;
        out.vocab = build_vocab(read_token_lists(config.dataset, mode), config.min_freq);
        if (!config.embeddings.empty()) {
            const std::size_t dim = probe_embedding_dim(config.embeddings);
            out.embeddings = load_embeddings(config.embeddings, out.vocab, dim,
                                             Rng::mix(config.seed, 2),
                                             config.train.finetune_embeddings);
        } else {
            out.embeddings = init_embeddings(out.vocab, config.embed_dim, Rng::mix(config.seed, 2),
                                             config.train.finetune_embeddings);
        }
        out.train = load_dataset(config.dataset, out.vocab, config.seq_len, mode);
        out.test = load_dataset(config.test_dataset, out.vocab, config.seq_len, mode,
                                &out.train.class_names);
        return out;
    });

    auto [seen_ids, unseen_ids] = timer.run("split", [&]() {
        const std::size_t total = loaded.train.num_classes();
        std::vector<std::int32_t> ids(total);
        std::iota(ids.begin(), ids.end(), 0);
        return split_seen_unseen(ids, resolve_seen_count(config, total), Rng::mix(config.seed, 1));
    });
    for (std::int32_t id : seen_ids) {
        report.seen_classes.push_back(loaded.train.class_names[static_cast<std::size_t>(id)]);
    }
    for (std::int32_t id : unseen_ids) {
        report.unseen_classes.push_back(loaded.train.class_names[static_cast<std::size_t>(id)]);
    }

    const LabeledDataset seen_train = project_seen(loaded.train, seen_ids);
    const std::size_t n_seen = seen_train.num_classes();

    PairDataset pairs = timer.run("pairs", [&]() {
        return build_pairs(seen_train, Rng::mix(config.seed, 3), config.pair_both_orders);
    });

    TrainConfig train_config = config.train;
    train_config.seed = config.seed;
    MatchModel model = timer.run("train", [&]() {
        MatchModel m = init_model(config.variant, loaded.vocab, loaded.embeddings, config.seq_len,
                                  train_config);
        report.epoch_losses = train(m, pairs, train_config);
        return m;
    });

    Memory memory = timer.run("memory", [&]() {
        std::vector<std::int32_t> ids(n_seen);
        std::iota(ids.begin(), ids.end(), 0);
        return build_memory(seen_train, ids, config.memory_size, Rng::mix(config.seed, 4));
    });

    Thresholds thresholds = timer.run("thresholds", [&]() {
        return fit_thresholds(model, seen_train, memory, config.alpha, config.threshold_mode);
    });

    std::vector<std::int32_t> predicted = timer.run("score", [&]() {
        std::vector<std::int32_t> out;
        out.reserve(loaded.test.total_instances());
        for (const auto& group : loaded.test.groups) {
            for (const Instance& instance : group) {
                const Decision decision =
                    decide(score_all(model, memory, instance), thresholds);
                out.push_back(decision.is_reject ? reject_label(n_seen) : decision.class_id);
            }
        }
        return out;
    });

    timer.run("metrics", [&]() {
        const std::vector<std::int32_t> gold = relabel_test(loaded.test, seen_ids);
        report.metrics =
            macro_f1(predicted, gold, n_seen, seen_train.class_names, config.f1_over);
    });

    report.thresholds = std::move(thresholds);
    report.memory = std::move(memory);
    const std::chrono::duration<double> total = std::chrono::steady_clock::now() - total_start;
    report.timings["total"] = total.count();
    return report;
}

nlohmann::json report_to_json(const Report& report) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const ClassMetrics& m : report.metrics.per_class) {
        per_class.push_back({
            {"name", m.name},
            {"precision", m.precision},
            {"recall", m.recall},
            {"f1", m.f1},
            {"support", m.support},
        });
    }
    return {
        {"config", report.config},
        {"seen_classes", report.seen_classes},
        {"unseen_classes", report.unseen_classes},
        {"epoch_losses", report.epoch_losses},
        {"thresholds", thresholds_to_json(report.thresholds)},
        {"memory", memory_to_json(report.memory, report.seen_classes)},
        {"macro_f1", report.metrics.macro_f1},
        {"per_class", per_class},
        {"confusion", report.metrics.confusion},
        {"timings", report.timings},
    };
}

namespace {

std::string config_row_label(const nlohmann::json& config, std::size_t n_seen,
                             std::size_t n_unseen) {
    const std::string variant = config.value("variant", "pm2") == "pm1" ? "PM-Net 1" : "PM-Net 2";
    const auto k = config.value("memory_size", std::size_t{0});
    const auto seed = config.value("seed", std::uint64_t{0});
    return variant + "-K=" + std::to_string(k) + " (" + std::to_string(n_seen) + ":" +
           std::to_string(n_unseen) + ", seed " + std::to_string(seed) + ")";
}

}  // namespace

std::string report_table(const std::vector<Report>& reports) {
    std::size_t width = std::string("config").size();
    std::vector<std::pair<std::string, double>> rows;
    for (const Report& report : reports) {
        std::string label = config_row_label(report.config, report.seen_classes.size(),
                                             report.unseen_classes.size());
        width = std::max(width, label.size());
        rows.emplace_back(std::move(label), report.metrics.macro_f1);
    }

    std::string out;
    auto append_row = [&](const std::string& left, const std::string& right) {
        out += "| " + left + std::string(width - left.size(), ' ') + " | " + right + "\n";
    };
    append_row("config", "macro-F1(%)");
    out += "|" + std::string(width + 2, '-') + "|------------\n";
    for (const auto& [label, value] : rows) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", value * 100.0);
        append_row(label, buf);
    }
    return out;
}

std::string emit_report(const Report& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("emit_report: cannot write " + path);
    out << report_to_json(report).dump(2) << "\n";
    out.flush();
    if (!out) throw IoError("emit_report: write to " + path + " failed");

    const std::string table = report_table({report});
    std::filesystem::path table_path(path);
    table_path.replace_extension(".txt");
    std::ofstream table_out(table_path);
    if (!table_out) throw IoError("emit_report: cannot write " + table_path.string());
    table_out << table;
    return table;
}

namespace {

double variant_gradient_error(Variant variant, std::uint64_t seed) {
    Vocab vocab;
    for (int i = 0; i < 8; ++i) vocab.add("t" + std::to_string(i));

    TrainConfig config;
    config.hidden_dim = 5;
    config.feature_maps = 2;
    config.seed = seed;

    const std::size_t seq_len = 6, embed_dim = 4;
    EmbeddingTable embeddings =
        init_embeddings(vocab, embed_dim, Rng::mix(seed, 0x77), /*trainable=*/true);
    MatchModel model = init_model(variant, vocab, std::move(embeddings), seq_len, config);

    Rng rng(Rng::mix(seed, 0x78));
    auto make_instance = [&]() {
        Instance instance;
        for (std::size_t p = 0; p < seq_len; ++p) {
            instance.token_ids.push_back(static_cast<std::int32_t>(rng.uniform_index(vocab.size())));
        }
        return instance;
    };
    std::vector<PairExample> pairs;
    const std::vector<std::int32_t> labels = {1, 0, 0, 1};
    for (std::int32_t y : labels) pairs.push_back({make_instance(), make_instance(), y});

    auto forward = [&](Tape* tape) {
        std::vector<Tensor> rows;
        rows.reserve(pairs.size());
        for (const PairExample& pair : pairs) {
            rows.push_back(pair_forward(model, pair.a, pair.b, tape));
        }
        return cross_entropy(stack_rows(rows, tape), labels, tape);
    };

    GradCheckOptions options;
    options.seed = Rng::mix(seed, 0x79);
    return grad_check(forward, model.parameters(), options);
}

}  // namespace

GradCheckSummary run_gradient_checks(std::uint64_t seed) {
    GradCheckSummary summary;
    summary.pm1_error = variant_gradient_error(Variant::PM1, seed);
    summary.pm2_error = variant_gradient_error(Variant::PM2, seed);
    return summary;
}

void write_synth_corpus(const std::string& dir, std::uint64_t seed, const SynthOptions& options) {
    if (options.classes < 2 || options.keywords_per_class == 0 || options.min_tokens == 0 ||
        options.max_tokens < options.min_tokens) {
        throw UsageError("write_synth_corpus: degenerate corpus options");
    }
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("write_synth_corpus: cannot create " + dir + ": " + ec.message());

    std::vector<std::string> fillers;
    for (std::size_t j = 0; j < options.shared_fillers; ++j) {
        fillers.push_back("f" + std::to_string(j));
    }

    Rng rng(Rng::mix(seed, 0x51));
    auto make_line = [&](std::size_t c) {
        std::string line = "class" + std::to_string(c);
        line += '\t';
        const std::size_t len =
            options.min_tokens + rng.uniform_index(options.max_tokens - options.min_tokens + 1);
        for (std::size_t t = 0; t < len; ++t) {
            if (t) line += ' ';
            if (options.shared_fillers == 0 || rng.uniform(0.0, 1.0) < options.keyword_prob) {
                line += "k" + std::to_string(c) + "w" +
                        std::to_string(rng.uniform_index(options.keywords_per_class));
            } else {
                line += fillers[rng.uniform_index(fillers.size())];
            }
        }
        return line;
    };

    const auto train_path = std::filesystem::path(dir) / "train.tsv";
    const auto test_path = std::filesystem::path(dir) / "test.tsv";
    std::ofstream train_out(train_path);
    std::ofstream test_out(test_path);
    if (!train_out || !test_out) {
        throw IoError("write_synth_corpus: cannot write into " + dir);
    }
    for (std::size_t c = 0; c < options.classes; ++c) {
        for (std::size_t i = 0; i < options.train_per_class; ++i) train_out << make_line(c) << "\n";
        for (std::size_t i = 0; i < options.test_per_class; ++i) test_out << make_line(c) << "\n";
    }
    train_out.flush();
    test_out.flush();
    if (!train_out || !test_out) throw IoError("write_synth_corpus: write into " + dir + " failed");
}

}  // namespace pmnet
