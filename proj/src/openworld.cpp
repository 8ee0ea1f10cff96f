#include "pmnet/openworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "pmnet/error.hpp"
#include "pmnet/rng.hpp"

namespace pmnet {

std::string threshold_mode_name(ThresholdMode mode) {
    return mode == ThresholdMode::Scalar ? "scalar" : "perclass";
}

ThresholdMode threshold_mode_from_name(const std::string& name) {
    if (name == "scalar") return ThresholdMode::Scalar;
    if (name == "perclass" || name == "per-class") return ThresholdMode::PerClass;
    throw UsageError("unknown threshold mode \"" + name + "\" (expected scalar or perclass)");
}

PairDataset build_pairs(const LabeledDataset& dataset, std::uint64_t seed, bool both_orders) {
    const std::size_t num_classes = dataset.num_classes();
    if (num_classes < 2) {
        throw UsageError("build_pairs: need at least 2 classes, got " +
                         std::to_string(num_classes));
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (dataset.groups[c].size() < 2) {
            throw UsageError("build_pairs: class \"" + dataset.class_names[c] + "\" has " +
                             std::to_string(dataset.groups[c].size()) +
                             " instances; need at least 2");
        }
    }

    Rng rng(seed);
    PairDataset pairs;
    pairs.reserve(2 * dataset.total_instances() * (both_orders ? 2 : 1));
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto& group = dataset.groups[c];
        for (std::size_t j = 0; j < group.size(); ++j) {
            // Positive partner: same class, excluding the instance itself.
            std::size_t partner = rng.uniform_index(group.size() - 1);
            if (partner >= j) ++partner;
            pairs.push_back({group[j], group[partner], 1});

            // Negative: another class uniformly, then an instance within it.
            std::size_t other = rng.uniform_index(num_classes - 1);
            if (other >= c) ++other;
            const auto& other_group = dataset.groups[other];
            pairs.push_back({group[j], other_group[rng.uniform_index(other_group.size())], 0});
        }
    }

    if (both_orders) {
        const std::size_t n = pairs.size();
        for (std::size_t i = 0; i < n; ++i) {
            pairs.push_back({pairs[i].b, pairs[i].a, pairs[i].label});
        }
    }
    return pairs;
}

Memory build_memory(const LabeledDataset& dataset, const std::vector<std::int32_t>& seen_ids,
                    std::size_t memory_size, std::uint64_t seed) {
    if (memory_size == 0) throw UsageError("build_memory: K must be at least 1");
    if (seen_ids.empty()) throw UsageError("build_memory: empty seen class set");

    std::vector<std::int32_t> ordered(seen_ids);
    std::sort(ordered.begin(), ordered.end());

    Rng rng(seed);
    Memory memory;
    for (std::int32_t id : ordered) {
        if (id < 0 || static_cast<std::size_t>(id) >= dataset.num_classes()) {
            throw UsageError("build_memory: class id " + std::to_string(id) +
                             " not in the dataset");
        }
        const auto& group = dataset.groups[static_cast<std::size_t>(id)];
        if (group.size() < memory_size) {
            throw UsageError("build_memory: class \"" +
                             dataset.class_names[static_cast<std::size_t>(id)] + "\" has " +
                             std::to_string(group.size()) + " instances, fewer than K=" +
                             std::to_string(memory_size));
        }

        // Partial Fisher-Yates; the first K slots are the sample, in order.
        std::vector<std::size_t> rows(group.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        for (std::size_t t = 0; t < memory_size; ++t) {
            std::swap(rows[t], rows[t + rng.uniform_index(rows.size() - t)]);
        }
        rows.resize(memory_size);

        std::vector<Instance> picked;
        picked.reserve(memory_size);
        for (std::size_t row : rows) picked.push_back(group[row]);
        memory.class_ids.push_back(id);
        memory.instances.push_back(std::move(picked));
        memory.source_rows.push_back(std::move(rows));
    }
    return memory;
}

double trimmed_mean(std::vector<double> values) {
    if (values.empty()) throw UsageError("trimmed_mean: empty value list");
    std::sort(values.begin(), values.end());
    std::size_t lo = 0, hi = values.size();
    if (values.size() >= 3) {
        ++lo;  // one occurrence of the min
        --hi;  // one occurrence of the max
    }
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += values[i];
    return acc / static_cast<double>(hi - lo);
}

std::size_t scoring_threads() {
    if (const char* env = std::getenv("PMNET_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 0) {
            throw UsageError("PMNET_THREADS: expected a nonnegative integer, got \"" +
                             std::string(env) + "\"");
        }
        return v <= 1 ? 1 : static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

namespace {

// Static partition over [0, n); each index is processed exactly once, so the
// results are identical for any worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min(scoring_threads(), n == 0 ? std::size_t{1} : n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += workers) body(i);
        });
    }
    for (auto& t : threads) t.join();
}

}  // namespace

double class_score(const MatchModel& model, std::span<const Instance> class_memory,
                   const Instance& x) {
    if (class_memory.empty()) throw UsageError("class_score: empty class memory");
    std::vector<double> probs(class_memory.size());
    for (std::size_t j = 0; j < class_memory.size(); ++j) {
        probs[j] = match_prob(model, x, class_memory[j]);
    }
    return trimmed_mean(std::move(probs));
}

ClassProbabilities score_all(const MatchModel& model, const Memory& memory, const Instance& x) {
    if (memory.num_classes() == 0) throw UsageError("score_all: empty memory");

    std::vector<std::pair<std::size_t, std::size_t>> tasks;
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        for (std::size_t j = 0; j < memory.instances[i].size(); ++j) tasks.emplace_back(i, j);
    }
    std::vector<std::vector<double>> probs(memory.num_classes());
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        probs[i].resize(memory.instances[i].size());
    }
    parallel_for(tasks.size(), [&](std::size_t t) {
        const auto [i, j] = tasks[t];
        probs[i][j] = match_prob(model, x, memory.instances[i][j]);
    });

    ClassProbabilities out(memory.num_classes());
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        out[i] = trimmed_mean(std::move(probs[i]));
    }
    return out;
}

double fit_threshold_from_scores(std::span<const double> scores, double alpha) {
    if (scores.empty()) throw UsageError("fit_threshold_from_scores: no scores");
    if (!(alpha > 0.0)) throw UsageError("fit_threshold_from_scores: alpha must be positive");
    double acc = 0.0;
    for (double y : scores) {
        const double mirrored = 1.0 + (1.0 - y);
        acc += (y - 1.0) * (y - 1.0);
        acc += (mirrored - 1.0) * (mirrored - 1.0);
    }
    const double sigma = std::sqrt(acc / (2.0 * static_cast<double>(scores.size())));
    return std::max(0.5, 1.0 - alpha * sigma);
}

Thresholds fit_thresholds(const MatchModel& model, const LabeledDataset& train,
                          const Memory& memory, double alpha, ThresholdMode mode) {
    if (!(alpha > 0.0)) throw UsageError("fit_thresholds: alpha must be positive");
    if (memory.num_classes() == 0) throw UsageError("fit_thresholds: empty memory");

    std::vector<double> per_class(memory.num_classes());
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        const auto id = static_cast<std::size_t>(memory.class_ids[i]);
        if (id >= train.num_classes()) {
            throw UsageError("fit_thresholds: memory class id " + std::to_string(memory.class_ids[i]) +
                             " not in the training set");
        }
        const auto& group = train.groups[id];

        // Score every training instance of the class that is not in memory.
        std::vector<char> in_memory(group.size(), 0);
        if (i < memory.source_rows.size()) {
            for (std::size_t row : memory.source_rows[i]) {
                if (row < group.size()) in_memory[row] = 1;
            }
        }
        std::vector<std::size_t> targets;
        for (std::size_t row = 0; row < group.size(); ++row) {
            if (!in_memory[row]) targets.push_back(row);
        }
        if (targets.empty()) {
            throw UsageError("fit_thresholds: class \"" + train.class_names[id] +
                             "\" has no training instances outside its memory");
        }

        std::vector<double> scores(targets.size());
        parallel_for(targets.size(), [&](std::size_t t) {
            scores[t] = class_score(model, memory.instances[i], group[targets[t]]);
        });
        per_class[i] = fit_threshold_from_scores(scores, alpha);
    }

    Thresholds thresholds;
    thresholds.mode = mode;
    thresholds.alpha = alpha;
    if (mode == ThresholdMode::PerClass) {
        thresholds.values = std::move(per_class);
    } else {
        double mean = 0.0;
        for (double t : per_class) mean += t;
        thresholds.values = {mean / static_cast<double>(per_class.size())};
    }
    return thresholds;
}

Decision decide(std::span<const double> probabilities, const Thresholds& thresholds) {
    if (probabilities.empty()) throw UsageError("decide: empty probability vector");
    if (thresholds.values.empty()) throw UsageError("decide: no threshold values");

    if (thresholds.mode == ThresholdMode::Scalar) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < probabilities.size(); ++i) {
            if (probabilities[i] > probabilities[best]) best = i;
        }
        if (probabilities[best] < thresholds.values[0]) return Decision::reject();
        return Decision::seen(static_cast<std::int32_t>(best));
    }

    if (thresholds.values.size() != probabilities.size()) {
        throw UsageError("decide: " + std::to_string(thresholds.values.size()) +
                         " per-class thresholds for " + std::to_string(probabilities.size()) +
                         " classes");
    }
    bool any = false;
    std::size_t best = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        if (probabilities[i] < thresholds.values[i]) continue;
        if (!any || probabilities[i] > probabilities[best]) {
            any = true;
            best = i;
        }
    }
    if (!any) return Decision::reject();
    return Decision::seen(static_cast<std::int32_t>(best));
}

nlohmann::json memory_to_json(const Memory& memory, const std::vector<std::string>& class_names) {
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        const auto id = static_cast<std::size_t>(memory.class_ids[i]);
        nlohmann::json instances = nlohmann::json::array();
        for (const Instance& inst : memory.instances[i]) instances.push_back(inst.token_ids);
        classes.push_back({
            {"id", memory.class_ids[i]},
            {"name", id < class_names.size() ? class_names[id] : std::to_string(id)},
            {"instances", instances},
        });
    }
    return {{"classes", classes}};
}

Memory memory_from_json(const nlohmann::json& j, std::vector<std::string>* class_names) {
    if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty()) {
        throw FormatError("memory: missing or empty \"classes\" array");
    }
    Memory memory;
    if (class_names) class_names->clear();
    for (const auto& entry : j["classes"]) {
        if (!entry.contains("id") || !entry.contains("instances")) {
            throw FormatError("memory: class entry missing \"id\" or \"instances\"");
        }
        const auto id = entry["id"].get<std::int32_t>();
        std::vector<Instance> instances;
        for (const auto& ids : entry["instances"]) {
            Instance inst;
            inst.token_ids = ids.get<std::vector<std::int32_t>>();
            inst.label = id;
            instances.push_back(std::move(inst));
        }
        if (instances.empty()) {
            throw FormatError("memory: class " + std::to_string(id) + " has no instances");
        }
        memory.class_ids.push_back(id);
        memory.instances.push_back(std::move(instances));
        memory.source_rows.emplace_back();
        if (class_names) {
            class_names->push_back(entry.value("name", std::to_string(id)));
        }
    }
    return memory;
}

nlohmann::json thresholds_to_json(const Thresholds& thresholds) {
    return {
        {"mode", threshold_mode_name(thresholds.mode)},
        {"alpha", thresholds.alpha},
        {"values", thresholds.values},
    };
}

Thresholds thresholds_from_json(const nlohmann::json& j) {
    if (!j.contains("mode") || !j.contains("alpha") || !j.contains("values")) {
        throw FormatError("thresholds: expected \"mode\", \"alpha\" and \"values\"");
    }
    Thresholds thresholds;
    thresholds.mode = threshold_mode_from_name(j["mode"].get<std::string>());
    thresholds.alpha = j["alpha"].get<double>();
    thresholds.values = j["values"].get<std::vector<double>>();
    if (thresholds.values.empty()) throw FormatError("thresholds: empty \"values\"");
    for (double t : thresholds.values) {
        if (!(t >= 0.5 && t <= 1.0)) {
            throw FormatError("thresholds: value " + std::to_string(t) + " outside [0.5, 1]");
        }
    }
    return thresholds;
}

}  // namespace pmnet
