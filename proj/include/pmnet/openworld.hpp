#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pmnet/matcher.hpp"
#include "pmnet/text.hpp"

#include "json.hpp"

namespace pmnet {

// K reference instances per seen class, class ids ascending. source_rows
// tracks which dataset rows were sampled (kept in memory only; the JSON form
// stores token ids and class ids).
struct Memory {
    std::vector<std::int32_t> class_ids;
    std::vector<std::vector<Instance>> instances;
    std::vector<std::vector<std::size_t>> source_rows;

    std::size_t num_classes() const { return class_ids.size(); }
};

using ClassProbabilities = std::vector<double>;

enum class ThresholdMode { Scalar, PerClass };

std::string threshold_mode_name(ThresholdMode mode);
ThresholdMode threshold_mode_from_name(const std::string& name);

struct Thresholds {
    ThresholdMode mode = ThresholdMode::Scalar;
    double alpha = 3.0;
    std::vector<double> values;  // one value, or one per seen class
};

struct Decision {
    bool is_reject = false;
    std::int32_t class_id = -1;

    static Decision reject() { return {true, -1}; }
    static Decision seen(std::int32_t id) { return {false, id}; }
};

// One positive and one negative pair per training instance: the positive
// partner is drawn uniformly from the instance's class (excluding itself),
// the negative by sampling another class uniformly, then an instance within
// it. both_orders additionally appends every pair with arguments swapped.
PairDataset build_pairs(const LabeledDataset& dataset, std::uint64_t seed,
                        bool both_orders = false);

// Uniform sample of K instances per seen class, without replacement.
Memory build_memory(const LabeledDataset& dataset, const std::vector<std::int32_t>& seen_ids,
                    std::size_t memory_size, std::uint64_t seed);

// Mean after dropping one occurrence of the max and one of the min; plain
// mean when fewer than 3 values.
double trimmed_mean(std::vector<double> values);

// Trimmed mean of match_prob(model, x, m) over the class memory, with the
// test instance always the first argument.
double class_score(const MatchModel& model, std::span<const Instance> class_memory,
                   const Instance& x);

// class_score against every seen class, in class-id order. The match_prob
// fan-out runs on up to PMNET_THREADS workers (0 = sequential).
ClassProbabilities score_all(const MatchModel& model, const Memory& memory, const Instance& x);

// Half-Gaussian fit of one class's same-class scores: each score y adds a
// mirror point 1 + (1 - y), sigma is fitted with the mean pinned at 1 over
// the doubled sample, and the threshold is max(0.5, 1 - alpha * sigma).
double fit_threshold_from_scores(std::span<const double> scores, double alpha);

// fit_threshold_from_scores per seen class, scoring every training instance
// of the class that is not in its memory. Scalar mode averages the per-class
// thresholds into one.
Thresholds fit_thresholds(const MatchModel& model, const LabeledDataset& train,
                          const Memory& memory, double alpha, ThresholdMode mode);

// Scalar mode: reject iff max(P) < threshold, else the argmax class.
// Per-class mode: reject iff every p_i < t_i, else the argmax among passing
// classes. Argmax ties break to the smallest class id.
Decision decide(std::span<const double> probabilities, const Thresholds& thresholds);

// Number of scoring workers: PMNET_THREADS when set (0 and 1 mean
// sequential), hardware concurrency otherwise.
std::size_t scoring_threads();

nlohmann::json memory_to_json(const Memory& memory, const std::vector<std::string>& class_names);
Memory memory_from_json(const nlohmann::json& j, std::vector<std::string>* class_names = nullptr);
nlohmann::json thresholds_to_json(const Thresholds& thresholds);
Thresholds thresholds_from_json(const nlohmann::json& j);

}  // namespace pmnet
