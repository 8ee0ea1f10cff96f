#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "pmnet/error.hpp"
#include "pmnet/harness.hpp"
#include "pmnet/matcher.hpp"
#include "pmnet/openworld.hpp"
#include "pmnet/rng.hpp"
#include "pmnet/text.hpp"

namespace {

using namespace pmnet;

// Flags collected as optionals so a --config file can be loaded first and
// only explicitly passed flags override it.
struct Flags {
    std::optional<std::string> config_path;
    std::optional<std::string> dataset;
    std::optional<std::string> test_dataset;
    std::optional<std::string> embeddings;
    std::optional<std::string> output;
    std::optional<std::string> variant;
    std::optional<std::string> seen_ratio;
    std::optional<std::string> threshold_mode;
    std::optional<std::string> optimizer;
    std::optional<std::string> f1_over;
    std::optional<std::size_t> seen_classes;
    std::optional<std::size_t> memory_size;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> hidden_dim;
    std::optional<std::size_t> feature_maps;
    std::optional<std::size_t> seq_len;
    std::optional<std::size_t> embed_dim;
    std::optional<std::size_t> min_freq;
    std::optional<double> learning_rate;
    std::optional<double> alpha;
    std::optional<std::uint64_t> seed;
    bool pretokenized = false;
    bool both_orders = false;
    bool freeze_embeddings = false;
    bool f1_seen_only = false;
};

void add_config_flag(CLI::App* sub, Flags& flags) {
    sub->add_option("--config", flags.config_path, "JSON config file; flags override its fields");
}

void add_data_flags(CLI::App* sub, Flags& flags) {
    sub->add_option("--dataset", flags.dataset, "training TSV (label<TAB>text per line)");
    sub->add_option("--seq-len,-L", flags.seq_len, "instance length after padding/cutting");
    sub->add_option("--min-freq", flags.min_freq, "vocabulary frequency cutoff");
    sub->add_flag("--pretokenized", flags.pretokenized,
                  "split on whitespace only, keep case (for pre-segmented corpora)");
}

void add_train_flags(CLI::App* sub, Flags& flags) {
    sub->add_option("--embeddings", flags.embeddings, "pre-trained embedding text file");
    sub->add_option("--embed-dim,-H", flags.embed_dim,
                    "embedding size when no embedding file is given");
    sub->add_option("--variant", flags.variant, "pm1 or pm2");
    sub->add_option("--optimizer", flags.optimizer, "adam or sgd");
    sub->add_option("--lr", flags.learning_rate, "learning rate");
    sub->add_option("--batch-size", flags.batch_size, "mini-batch size");
    sub->add_option("--epochs", flags.epochs, "training epochs");
    sub->add_option("--hidden-dim", flags.hidden_dim, "fully connected hidden width");
    sub->add_option("--feature-maps", flags.feature_maps, "feature maps per filter width");
    sub->add_flag("--freeze-embeddings", flags.freeze_embeddings,
                  "do not fine-tune the embedding table");
    sub->add_flag("--both-orders", flags.both_orders, "add every training pair in both orders");
}

void add_openworld_flags(CLI::App* sub, Flags& flags) {
    sub->add_option("-K,--memory-size", flags.memory_size, "reference instances per seen class");
    sub->add_option("--alpha", flags.alpha, "threshold fit alpha");
    sub->add_option("--threshold-mode", flags.threshold_mode, "scalar or perclass");
}

ExperimentConfig resolve_config(const Flags& flags) {
    ExperimentConfig config;
    if (flags.config_path) config = load_config(*flags.config_path);
    if (flags.dataset) config.dataset = *flags.dataset;
    if (flags.test_dataset) config.test_dataset = *flags.test_dataset;
    if (flags.embeddings) config.embeddings = *flags.embeddings;
    if (flags.output) config.output = *flags.output;
    if (flags.variant) config.variant = variant_from_name(*flags.variant);
    if (flags.seen_classes) config.seen_classes = *flags.seen_classes;
    if (flags.seen_ratio) config.seen_ratio = *flags.seen_ratio;
    if (flags.memory_size) config.memory_size = *flags.memory_size;
    if (flags.optimizer) {
        config.train.optimizer =
            *flags.optimizer == "sgd" ? OptimizerKind::SGD : OptimizerKind::Adam;
        if (*flags.optimizer != "sgd" && *flags.optimizer != "adam") {
            throw UsageError("unknown optimizer \"" + *flags.optimizer + "\"");
        }
    }
    if (flags.learning_rate) config.train.learning_rate = *flags.learning_rate;
    if (flags.batch_size) config.train.batch_size = *flags.batch_size;
    if (flags.epochs) config.train.epochs = *flags.epochs;
    if (flags.hidden_dim) config.train.hidden_dim = *flags.hidden_dim;
    if (flags.feature_maps) config.train.feature_maps = *flags.feature_maps;
    if (flags.freeze_embeddings) config.train.finetune_embeddings = false;
    if (flags.seq_len) config.seq_len = *flags.seq_len;
    if (flags.embed_dim) config.embed_dim = *flags.embed_dim;
    if (flags.min_freq) config.min_freq = *flags.min_freq;
    if (flags.threshold_mode) config.threshold_mode = threshold_mode_from_name(*flags.threshold_mode);
    if (flags.alpha) config.alpha = *flags.alpha;
    if (flags.seed) config.seed = *flags.seed;
    if (flags.pretokenized) config.pretokenized = true;
    if (flags.both_orders) config.pair_both_orders = true;
    if (flags.f1_over) config.f1_over = f1_average_from_name(*flags.f1_over);
    if (flags.f1_seen_only) config.f1_over = F1Average::SeenOnly;
    config.train.seed = config.seed;
    return config;
}

void require(bool condition, const std::string& message) {
    if (!condition) throw UsageError(message);
}

void write_json_file(const nlohmann::json& j, const std::string& path, const char* who) {
    std::ofstream out(path);
    if (!out) throw IoError(std::string(who) + ": cannot write " + path);
    out << j.dump(2) << "\n";
    out.flush();
    if (!out) throw IoError(std::string(who) + ": write to " + path + " failed");
}

nlohmann::json read_json_file(const std::string& path, const char* who) {
    std::ifstream in(path);
    if (!in) throw IoError(std::string(who) + ": cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string(who) + ": " + path + ": " + e.what());
    }
    return j;
}

struct DataBundle {
    Vocab vocab;
    EmbeddingTable embeddings;
    LabeledDataset dataset;
};

DataBundle load_training_data(const ExperimentConfig& config) {
    require(!config.dataset.empty(), "--dataset (or a config with one) is required");
    DataBundle bundle;
    const TokenizeMode mode = config.tokenize_mode();
    bundle.vocab = build_vocab(read_token_lists(config.dataset, mode), config.min_freq);
    if (!config.embeddings.empty()) {
        const std::size_t dim = probe_embedding_dim(config.embeddings);
        bundle.embeddings = load_embeddings(config.embeddings, bundle.vocab, dim,
                                            Rng::mix(config.seed, 2),
                                            config.train.finetune_embeddings);
    } else {
        bundle.embeddings = init_embeddings(bundle.vocab, config.embed_dim,
                                            Rng::mix(config.seed, 2),
                                            config.train.finetune_embeddings);
    }
    bundle.dataset = load_dataset(config.dataset, bundle.vocab, config.seq_len, mode);
    return bundle;
}

int cmd_synth(const std::string& out_dir, std::uint64_t seed, const SynthOptions& options) {
    write_synth_corpus(out_dir, seed, options);
    std::cout << "wrote " << (std::filesystem::path(out_dir) / "train.tsv").string() << " and "
              << (std::filesystem::path(out_dir) / "test.tsv").string() << "\n";
    return 0;
}

int cmd_build_pairs(const Flags& flags) {
    ExperimentConfig config = resolve_config(flags);
    DataBundle bundle = load_training_data(config);
    PairDataset pairs =
        build_pairs(bundle.dataset, Rng::mix(config.seed, 3), config.pair_both_orders);

    std::size_t positives = 0;
    nlohmann::json rows = nlohmann::json::array();
    for (const PairExample& pair : pairs) {
        positives += pair.label == 1;
        rows.push_back({{"y", pair.label}, {"a", pair.a.token_ids}, {"b", pair.b.token_ids}});
    }
    const nlohmann::json out = {
        {"count", pairs.size()},
        {"positives", positives},
        {"negatives", pairs.size() - positives},
        {"pairs", rows},
    };
    const std::string path = config.output == "report.json" ? "pairs.json" : config.output;
    write_json_file(out, path, "build-pairs");
    std::cout << "built " << pairs.size() << " pairs (" << positives << " positive, "
              << pairs.size() - positives << " negative) -> " << path << "\n";
    return 0;
}

int cmd_train(const Flags& flags) {
    ExperimentConfig config = resolve_config(flags);
    DataBundle bundle = load_training_data(config);
    PairDataset pairs =
        build_pairs(bundle.dataset, Rng::mix(config.seed, 3), config.pair_both_orders);

    TrainConfig train_config = config.train;
    MatchModel model = init_model(config.variant, bundle.vocab, bundle.embeddings, config.seq_len,
                                  train_config);
    const std::vector<double> losses = train(model, pairs, train_config);
    for (std::size_t e = 0; e < losses.size(); ++e) {
        std::printf("epoch %zu  loss %.6f\n", e + 1, losses[e]);
    }

    const std::string path = config.output == "report.json" ? "model.bin" : config.output;
    save_model(model, path);
    std::cout << "saved " << variant_name(model.variant) << " model -> " << path << "\n";
    return 0;
}

int cmd_fit_thresholds(const Flags& flags, const std::string& model_path) {
    ExperimentConfig config = resolve_config(flags);
    require(!config.dataset.empty(), "--dataset (or a config with one) is required");
    MatchModel model = load_model(model_path);

    LabeledDataset dataset =
        load_dataset(config.dataset, model.vocab, model.seq_len, config.tokenize_mode());
    std::vector<std::int32_t> ids(dataset.num_classes());
    std::iota(ids.begin(), ids.end(), 0);
    Memory memory = build_memory(dataset, ids, config.memory_size, Rng::mix(config.seed, 4));
    Thresholds thresholds =
        fit_thresholds(model, dataset, memory, config.alpha, config.threshold_mode);

    nlohmann::json out = memory_to_json(memory, dataset.class_names);
    out["thresholds"] = thresholds_to_json(thresholds);
    const std::string path = config.output == "report.json" ? "memory.json" : config.output;
    write_json_file(out, path, "fit-thresholds");

    std::cout << "thresholds (" << threshold_mode_name(thresholds.mode) << ", alpha "
              << thresholds.alpha << "):";
    for (double t : thresholds.values) std::printf(" %.6f", t);
    std::cout << "\nwrote memory + thresholds -> " << path << "\n";
    return 0;
}

struct MemoryFile {
    Memory memory;
    std::vector<std::string> class_names;
    Thresholds thresholds;
};

MemoryFile load_memory_file(const std::string& path) {
    const nlohmann::json j = read_json_file(path, "memory");
    MemoryFile file;
    file.memory = memory_from_json(j, &file.class_names);
    if (!j.contains("thresholds")) {
        throw FormatError("memory: " + path + " has no \"thresholds\" section");
    }
    file.thresholds = thresholds_from_json(j["thresholds"]);
    return file;
}

int cmd_eval(const Flags& flags, const std::string& model_path, const std::string& memory_path,
             const std::string& test_path) {
    ExperimentConfig config = resolve_config(flags);
    MatchModel model = load_model(model_path);
    MemoryFile mem = load_memory_file(memory_path);

    LabeledDataset test = load_dataset(test_path, model.vocab, model.seq_len,
                                       config.tokenize_mode(), &mem.class_names);
    const std::size_t n_seen = mem.class_names.size();

    std::vector<std::int32_t> predicted;
    std::vector<std::int32_t> gold;
    for (std::size_t c = 0; c < test.num_classes(); ++c) {
        for (const Instance& instance : test.groups[c]) {
            const Decision decision =
                decide(score_all(model, mem.memory, instance), mem.thresholds);
            predicted.push_back(decision.is_reject ? reject_label(n_seen) : decision.class_id);
            gold.push_back(c < n_seen ? static_cast<std::int32_t>(c) : reject_label(n_seen));
        }
    }

    const F1Result result = macro_f1(predicted, gold, n_seen, mem.class_names, config.f1_over);
    nlohmann::json per_class = nlohmann::json::array();
    for (const ClassMetrics& m : result.per_class) {
        per_class.push_back({{"name", m.name},
                             {"precision", m.precision},
                             {"recall", m.recall},
                             {"f1", m.f1},
                             {"support", m.support}});
    }
    const nlohmann::json out = {
        {"macro_f1", result.macro_f1},
        {"f1_over", f1_average_name(config.f1_over)},
        {"per_class", per_class},
        {"confusion", result.confusion},
    };
    const std::string path = config.output == "report.json" ? "eval.json" : config.output;
    write_json_file(out, path, "eval");
    std::printf("macro-F1 %.2f%% over %zu instances -> %s\n", result.macro_f1 * 100.0,
                predicted.size(), path.c_str());
    return 0;
}

int cmd_predict(const Flags& flags, const std::string& model_path, const std::string& memory_path,
                const std::string& text) {
    ExperimentConfig config = resolve_config(flags);
    MatchModel model = load_model(model_path);
    MemoryFile mem = load_memory_file(memory_path);

    Instance instance;
    instance.token_ids =
        encode(tokenize(text, config.tokenize_mode()), model.vocab, model.seq_len);
    const ClassProbabilities probabilities = score_all(model, mem.memory, instance);
    const Decision decision = decide(probabilities, mem.thresholds);

    if (decision.is_reject) {
        std::cout << "decision: <reject>\n";
    } else {
        std::cout << "decision: " << mem.class_names[static_cast<std::size_t>(decision.class_id)]
                  << "\n";
    }
    std::cout << "p:";
    for (double p : probabilities) std::printf(" %.6f", p);
    std::cout << "\n";
    return 0;
}

int cmd_run(const Flags& flags, std::size_t repeats) {
    ExperimentConfig config = resolve_config(flags);
    require(!config.dataset.empty(), "--dataset (or a config with one) is required");
    require(!config.test_dataset.empty(), "--test-dataset (or a config with one) is required");

    std::vector<Report> reports;
    for (std::size_t r = 0; r < repeats; ++r) {
        ExperimentConfig run_config = config;
        run_config.seed = config.seed + r;
        run_config.train.seed = run_config.seed;

        std::string path = run_config.output;
        if (repeats > 1) {
            std::filesystem::path p(path);
            const std::string stem = p.stem().string() + "_seed" + std::to_string(run_config.seed);
            p.replace_filename(stem + p.extension().string());
            path = p.string();
        }
        Report report = run_experiment(run_config);
        emit_report(report, path);
        std::printf("seed %llu: macro-F1 %.2f%% -> %s\n",
                    static_cast<unsigned long long>(run_config.seed),
                    report.metrics.macro_f1 * 100.0, path.c_str());
        reports.push_back(std::move(report));
    }
    std::cout << report_table(reports);
    return 0;
}

int cmd_gradcheck(double tolerance, std::uint64_t seed) {
    const GradCheckSummary summary = run_gradient_checks(seed);
    std::printf("pm1 max relative error %.3e\n", summary.pm1_error);
    std::printf("pm2 max relative error %.3e\n", summary.pm2_error);
    if (summary.worst() > tolerance) {
        std::printf("FAIL: exceeds tolerance %.3e\n", tolerance);
        return 3;
    }
    std::printf("OK (tolerance %.3e)\n", tolerance);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pmnet: pairwise matching networks for open-world text classification"};
    app.require_subcommand(1);

    Flags flags;

    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark corpus");
    std::string synth_out;
    std::uint64_t synth_seed = 7;
    SynthOptions synth_options;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_option("--classes", synth_options.classes, "number of classes");
    synth->add_option("--train-per-class", synth_options.train_per_class, "training instances");
    synth->add_option("--test-per-class", synth_options.test_per_class, "test instances");

    auto* build_pairs_cmd = app.add_subcommand("build-pairs", "construct the pair-wise dataset");
    add_config_flag(build_pairs_cmd, flags);
    add_data_flags(build_pairs_cmd, flags);
    build_pairs_cmd->add_option("--seed", flags.seed, "sampling seed");
    build_pairs_cmd->add_option("--out", flags.output, "output JSON (default pairs.json)");
    build_pairs_cmd->add_flag("--both-orders", flags.both_orders,
                              "add every pair in both orders");

    auto* train_cmd = app.add_subcommand("train", "train a matching model on one dataset");
    add_config_flag(train_cmd, flags);
    add_data_flags(train_cmd, flags);
    add_train_flags(train_cmd, flags);
    train_cmd->add_option("--seed", flags.seed, "run seed");
    train_cmd->add_option("--out", flags.output, "model file (default model.bin)");

    auto* fit_cmd = app.add_subcommand("fit-thresholds",
                                       "build per-class memory and fit rejection thresholds");
    std::string fit_model_path;
    add_config_flag(fit_cmd, flags);
    add_data_flags(fit_cmd, flags);
    add_openworld_flags(fit_cmd, flags);
    fit_cmd->add_option("--model", fit_model_path, "trained model file")->required();
    fit_cmd->add_option("--seed", flags.seed, "memory sampling seed");
    fit_cmd->add_option("--out", flags.output, "output JSON (default memory.json)");

    auto* eval_cmd = app.add_subcommand("eval", "score a test set against memory + thresholds");
    std::string eval_model_path, eval_memory_path, eval_test_path;
    add_config_flag(eval_cmd, flags);
    eval_cmd->add_option("--model", eval_model_path, "trained model file")->required();
    eval_cmd->add_option("--memory", eval_memory_path, "memory + thresholds JSON")->required();
    eval_cmd->add_option("--test", eval_test_path, "test TSV")->required();
    eval_cmd->add_option("--f1-over", flags.f1_over, "seen or seen+reject");
    eval_cmd->add_option("--out", flags.output, "report JSON (default eval.json)");
    eval_cmd->add_flag("--pretokenized", flags.pretokenized, "whitespace-split only");

    auto* predict_cmd = app.add_subcommand("predict", "classify or reject one text");
    std::string predict_model_path, predict_memory_path, predict_text;
    predict_cmd->add_option("--model", predict_model_path, "trained model file")->required();
    predict_cmd->add_option("--memory", predict_memory_path, "memory + thresholds JSON")
        ->required();
    predict_cmd->add_option("--text", predict_text, "input text")->required();
    predict_cmd->add_flag("--pretokenized", flags.pretokenized, "whitespace-split only");

    auto* run_cmd = app.add_subcommand("run", "end-to-end open-world experiment");
    std::size_t run_repeats = 1;
    add_config_flag(run_cmd, flags);
    add_data_flags(run_cmd, flags);
    add_train_flags(run_cmd, flags);
    add_openworld_flags(run_cmd, flags);
    run_cmd->add_option("--test-dataset", flags.test_dataset, "test TSV");
    run_cmd->add_option("--seen-classes", flags.seen_classes, "number of seen classes");
    run_cmd->add_option("--seen-ratio", flags.seen_ratio, "seen:unseen split, e.g. 7:3");
    run_cmd->add_option("--seed", flags.seed, "run seed");
    run_cmd->add_option("--seeds", run_repeats, "repeat with seed, seed+1, ...");
    run_cmd->add_option("--f1-over", flags.f1_over, "seen or seen+reject");
    run_cmd->add_option("--out", flags.output, "report JSON path");

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of both variants");
    double gradcheck_tolerance = 1e-4;
    std::uint64_t gradcheck_seed = 7;
    gradcheck_cmd->add_option("--tolerance", gradcheck_tolerance, "max relative error");
    gradcheck_cmd->add_option("--seed", gradcheck_seed, "fixture seed");

    try {
        app.parse(argc, argv);

        if (synth->parsed()) return cmd_synth(synth_out, synth_seed, synth_options);
        if (build_pairs_cmd->parsed()) return cmd_build_pairs(flags);
        if (train_cmd->parsed()) return cmd_train(flags);
        if (fit_cmd->parsed()) return cmd_fit_thresholds(flags, fit_model_path);
        if (eval_cmd->parsed()) return cmd_eval(flags, eval_model_path, eval_memory_path,
                                                eval_test_path);
        if (predict_cmd->parsed()) return cmd_predict(flags, predict_model_path,
                                                      predict_memory_path, predict_text);
        if (run_cmd->parsed()) return cmd_run(flags, run_repeats);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_tolerance, gradcheck_seed);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << "run '" << (argc > 0 ? argv[0] : "pmnet") << " --help' for usage\n";
        return 1;
    } catch (const pmnet::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == pmnet::ErrorKind::Usage ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
