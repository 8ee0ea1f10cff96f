#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmnet/matcher.hpp"
#include "pmnet/openworld.hpp"
#include "pmnet/text.hpp"

#include "json.hpp"

namespace pmnet {

enum class F1Average {
    SeenPlusReject,  // mean over the m seen classes plus the rejection pseudo-class
    SeenOnly,
};

std::string f1_average_name(F1Average avg);
F1Average f1_average_from_name(const std::string& name);

struct ExperimentConfig {
    std::string dataset;       // training TSV
    std::string test_dataset;  // test TSV
    std::string embeddings;    // optional embedding file
    std::string output = "report.json";
    Variant variant = Variant::PM2;
    std::size_t seen_classes = 0;  // 0 = derive from seen_ratio
    std::string seen_ratio;        // "7:3" = 7 seen, 3 unseen
    std::size_t memory_size = 15;  // K
    TrainConfig train;
    std::size_t seq_len = 40;
    std::size_t embed_dim = 50;  // used when no embedding file is given
    std::size_t min_freq = 1;
    ThresholdMode threshold_mode = ThresholdMode::Scalar;
    double alpha = 3.0;
    std::uint64_t seed = 0;
    bool pretokenized = false;
    bool pair_both_orders = false;
    F1Average f1_over = F1Average::SeenPlusReject;

    TokenizeMode tokenize_mode() const {
        return pretokenized ? TokenizeMode::Pretokenized : TokenizeMode::Lower;
    }
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::string& path);

struct ClassMetrics {
    std::string name;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct F1Result {
    double macro_f1 = 0.0;
    std::vector<ClassMetrics> per_class;                // m seen classes then the reject row
    std::vector<std::vector<std::size_t>> confusion;    // gold x predicted, (m+1)^2
};

struct Report {
    nlohmann::json config;
    std::vector<std::string> seen_classes;
    std::vector<std::string> unseen_classes;
    std::vector<double> epoch_losses;
    Thresholds thresholds;
    Memory memory;
    F1Result metrics;
    std::map<std::string, double> timings;  // seconds; excluded from determinism comparisons
};

// Uniform random split of the class ids into n_seen seen and the rest unseen;
// both halves come back sorted.
std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> split_seen_unseen(
    const std::vector<std::int32_t>& class_ids, std::size_t n_seen, std::uint64_t seed);

// Restriction of a dataset to the seen classes, reindexed 0..m-1 in ascending
// original-id order.
LabeledDataset project_seen(const LabeledDataset& dataset,
                            const std::vector<std::int32_t>& seen_ids);

// Gold labels in the projected space: seen classes keep their (projected)
// ids, every unseen class maps to the rejection label m. Instances follow
// class-id order, matching the scoring loop.
std::vector<std::int32_t> relabel_test(const LabeledDataset& test,
                                       const std::vector<std::int32_t>& seen_ids);

inline std::int32_t reject_label(std::size_t n_seen) {
    return static_cast<std::int32_t>(n_seen);
}

// Per-class F1 over the m seen classes plus the rejection pseudo-class.
// Classes absent from both pred and gold contribute F1 = 0.
F1Result macro_f1(const std::vector<std::int32_t>& predicted,
                  const std::vector<std::int32_t>& gold, std::size_t n_seen,
                  const std::vector<std::string>& seen_names,
                  F1Average average = F1Average::SeenPlusReject);

// split -> pairs -> train -> memory -> thresholds -> score and decide every
// test instance -> macro-F1. Deterministic given the config seed.
Report run_experiment(const ExperimentConfig& config);

nlohmann::json report_to_json(const Report& report);

// Writes the JSON report to `path` and a Table-1-shaped text table next to it
// (same path with a .txt extension). Returns the table text.
std::string emit_report(const Report& report, const std::string& path);

std::string report_table(const std::vector<Report>& reports);

struct GradCheckSummary {
    double pm1_error = 0.0;
    double pm2_error = 0.0;

    double worst() const { return pm1_error > pm2_error ? pm1_error : pm2_error; }
};

// End-to-end gradient check of the pair-loss for both variants at a tiny
// configuration (L=6, H=4, 2 feature maps per width, hidden 5), comparing
// every parameter against central finite differences.
GradCheckSummary run_gradient_checks(std::uint64_t seed = 7);

struct SynthOptions {
    std::size_t classes = 10;
    std::size_t keywords_per_class = 30;
    std::size_t shared_fillers = 50;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 20;
    std::size_t min_tokens = 8;
    std::size_t max_tokens = 20;
    double keyword_prob = 0.7;
};

// Writes <dir>/train.tsv and <dir>/test.tsv: each class owns a disjoint
// keyword vocabulary, instances mix keywords with a shared filler pool.
void write_synth_corpus(const std::string& dir, std::uint64_t seed,
                        const SynthOptions& options = {});

}  // namespace pmnet
