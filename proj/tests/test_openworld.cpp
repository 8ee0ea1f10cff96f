#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "pmnet/error.hpp"
#include "pmnet/openworld.hpp"
#include "pmnet/rng.hpp"
#include "pmnet/text.hpp"

using namespace pmnet;

namespace {

Instance make_instance(std::initializer_list<std::int32_t> ids, std::int32_t label) {
    Instance instance;
    instance.token_ids = ids;
    instance.label = label;
    return instance;
}

// Random dataset with num_classes classes holding 2..max_size instances each.
LabeledDataset random_dataset(Rng& rng, std::size_t num_classes, std::size_t max_size,
                              std::size_t seq_len = 4) {
    LabeledDataset dataset;
    for (std::size_t c = 0; c < num_classes; ++c) {
        dataset.class_names.push_back("class" + std::to_string(c));
        std::vector<Instance> group;
        const std::size_t count = 2 + rng.uniform_index(max_size - 1);
        for (std::size_t i = 0; i < count; ++i) {
            Instance instance;
            for (std::size_t p = 0; p < seq_len; ++p) {
                instance.token_ids.push_back(static_cast<std::int32_t>(rng.uniform_index(20)));
            }
            instance.label = static_cast<std::int32_t>(c);
            group.push_back(std::move(instance));
        }
        dataset.groups.push_back(std::move(group));
    }
    return dataset;
}

// Independent trimmed-mean oracle: insertion sort, drop the ends, average the
// middle in ascending order.
double sort_slice_oracle(std::vector<double> values) {
    for (std::size_t i = 1; i < values.size(); ++i) {
        double v = values[i];
        std::size_t j = i;
        while (j > 0 && values[j - 1] > v) {
            values[j] = values[j - 1];
            --j;
        }
        values[j] = v;
    }
    std::size_t lo = 0, hi = values.size();
    if (values.size() >= 3) {
        lo = 1;
        hi = values.size() - 1;
    }
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += values[i];
    return acc / static_cast<double>(hi - lo);
}

MatchModel scoring_model(std::uint64_t seed = 3) {
    Vocab vocab;
    for (int i = 0; i < 8; ++i) vocab.add("t" + std::to_string(i));
    TrainConfig config;
    config.hidden_dim = 5;
    config.feature_maps = 2;
    config.seed = seed;
    EmbeddingTable embeddings = init_embeddings(vocab, 4, Rng::mix(seed, 0xE), true);
    return init_model(Variant::PM2, vocab, std::move(embeddings), 6, config);
}

Instance model_instance(const MatchModel& model, Rng& rng) {
    Instance instance;
    for (std::size_t p = 0; p < model.seq_len; ++p) {
        instance.token_ids.push_back(
            static_cast<std::int32_t>(rng.uniform_index(model.vocab.size())));
    }
    return instance;
}

}  // namespace

TEST_CASE("trimmed_mean drops one max and one min occurrence") {
    CHECK(trimmed_mean({0.1, 0.2, 0.3, 0.4, 0.9}) == doctest::Approx(0.3));
    CHECK(trimmed_mean({0.7}) == 0.7);
    CHECK(trimmed_mean({0.4, 0.8}) == doctest::Approx(0.6));
    CHECK(trimmed_mean(std::vector<double>(15, 0.6)) == 0.6);
    CHECK_THROWS_AS(trimmed_mean({}), UsageError);
}

TEST_CASE("trimmed_mean equals the sort-and-slice oracle exactly") {
    Rng rng(71);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(100);
        std::vector<double> values(n);
        for (double& v : values) v = rng.uniform(0.0, 1.0);
        const double got = trimmed_mean(values);
        CHECK(got == sort_slice_oracle(values));
        const double lo = *std::min_element(values.begin(), values.end());
        const double hi = *std::max_element(values.begin(), values.end());
        CHECK(got >= lo);
        CHECK(got <= hi);
    }
}

TEST_CASE("score_all matches independent class_score calls") {
    MatchModel model = scoring_model();
    Rng rng(73);

    Memory memory;
    for (std::int32_t c = 0; c < 2; ++c) {
        std::vector<Instance> group;
        for (int j = 0; j < 5; ++j) group.push_back(model_instance(model, rng));
        memory.class_ids.push_back(c);
        memory.instances.push_back(std::move(group));
        memory.source_rows.emplace_back();
    }

    const Instance probe = model_instance(model, rng);
    const ClassProbabilities all = score_all(model, memory, probe);
    REQUIRE(all.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(all[i] == class_score(model, memory.instances[i], probe));
        CHECK(all[i] >= 0.0);
        CHECK(all[i] <= 1.0);
    }
    // Scoring is order-free within one class memory.
    std::reverse(memory.instances[0].begin(), memory.instances[0].end());
    CHECK(score_all(model, memory, probe)[0] == all[0]);
}

TEST_CASE("class_score rejects an empty memory") {
    MatchModel model = scoring_model();
    Rng rng(75);
    const Instance probe = model_instance(model, rng);
    CHECK_THROWS_AS(class_score(model, {}, probe), UsageError);
}

TEST_CASE("build_pairs yields 2N balanced, label-consistent pairs") {
    Rng rng(79);
    for (int trial = 0; trial < 50; ++trial) {
        LabeledDataset dataset = random_dataset(rng, 2 + rng.uniform_index(4), 6);
        const std::size_t n = dataset.total_instances();
        PairDataset pairs = build_pairs(dataset, rng.next_u64());
        REQUIRE(pairs.size() == 2 * n);

        std::size_t positives = 0;
        for (const PairExample& pair : pairs) {
            positives += pair.label == 1;
            CHECK((pair.label == 1) == (pair.a.label == pair.b.label));
        }
        CHECK(positives == n);
    }
}

TEST_CASE("build_pairs on 2x2 data forces the unique positive partners") {
    LabeledDataset dataset;
    dataset.class_names = {"a", "b"};
    dataset.groups = {
        {make_instance({1, 0}, 0), make_instance({2, 0}, 0)},
        {make_instance({3, 0}, 1), make_instance({4, 0}, 1)},
    };
    PairDataset pairs = build_pairs(dataset, 123);
    REQUIRE(pairs.size() == 8);
    for (const PairExample& pair : pairs) {
        if (pair.label == 1) {
            // The only same-class partner is the other instance.
            CHECK(pair.a.token_ids != pair.b.token_ids);
            CHECK(pair.a.label == pair.b.label);
        }
    }
}

TEST_CASE("build_pairs both-orders augmentation doubles and mirrors") {
    Rng rng(83);
    LabeledDataset dataset = random_dataset(rng, 3, 4);
    const std::size_t n = dataset.total_instances();
    PairDataset pairs = build_pairs(dataset, 9, true);
    REQUIRE(pairs.size() == 4 * n);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        CHECK(pairs[i].a.token_ids == pairs[2 * n + i].b.token_ids);
        CHECK(pairs[i].b.token_ids == pairs[2 * n + i].a.token_ids);
        CHECK(pairs[i].label == pairs[2 * n + i].label);
    }
}

TEST_CASE("build_pairs rejects singleton classes naming them") {
    LabeledDataset dataset;
    dataset.class_names = {"ok", "lonely"};
    dataset.groups = {
        {make_instance({1}, 0), make_instance({2}, 0)},
        {make_instance({3}, 1)},
    };
    CHECK_THROWS_WITH_AS(build_pairs(dataset, 1), doctest::Contains("lonely"), UsageError);
    LabeledDataset single;
    single.class_names = {"only"};
    single.groups = {{make_instance({1}, 0), make_instance({2}, 0)}};
    CHECK_THROWS_AS(build_pairs(single, 1), UsageError);
}

TEST_CASE("build_memory samples K distinct instances per class") {
    Rng rng(89);
    LabeledDataset dataset = random_dataset(rng, 3, 12);
    std::vector<std::int32_t> seen = {0, 1, 2};

    Memory memory = build_memory(dataset, seen, 3, 17);
    REQUIRE(memory.num_classes() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(memory.instances[i].size() == 3);
        std::set<std::size_t> rows(memory.source_rows[i].begin(), memory.source_rows[i].end());
        CHECK(rows.size() == 3);  // sampled without replacement
        for (const Instance& instance : memory.instances[i]) {
            CHECK(instance.label == memory.class_ids[i]);
        }
    }

    // Same seed reproduces the exact memory.
    Memory again = build_memory(dataset, seen, 3, 17);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(memory.source_rows[i] == again.source_rows[i]);
    }
}

TEST_CASE("build_memory with K equal to the class size keeps the whole class") {
    LabeledDataset dataset;
    dataset.class_names = {"a", "b"};
    dataset.groups = {
        {make_instance({1}, 0), make_instance({2}, 0), make_instance({3}, 0)},
        {make_instance({4}, 1), make_instance({5}, 1), make_instance({6}, 1)},
    };
    Memory memory = build_memory(dataset, {0, 1}, 3, 5);
    for (std::size_t i = 0; i < 2; ++i) {
        std::set<std::size_t> rows(memory.source_rows[i].begin(), memory.source_rows[i].end());
        CHECK(rows == std::set<std::size_t>{0, 1, 2});
    }
    CHECK_THROWS_AS(build_memory(dataset, {0, 1}, 4, 5), UsageError);
}

TEST_CASE("fit_threshold_from_scores reproduces the hand-derived example") {
    // scores {0.8, 0.9}: squared deviations 0.04 + 0.01, doubled by the
    // mirror points, over 2n = 4 -> sigma = sqrt(0.025), t = 1 - 3 sigma.
    const double t = fit_threshold_from_scores(std::vector<double>{0.8, 0.9}, 3.0);
    CHECK(std::abs(t - 0.5256583509747431) <= 1e-12);
    CHECK(t == doctest::Approx(0.525658).epsilon(1e-6));

    CHECK(fit_threshold_from_scores(std::vector<double>{1.0, 1.0, 1.0}, 3.0) == 1.0);
    CHECK(fit_threshold_from_scores(std::vector<double>{0.0, 0.1}, 3.0) == 0.5);  // floor
}

TEST_CASE("fit_thresholds stays within [0.5, 1] and needs off-memory data") {
    MatchModel model = scoring_model(7);
    Rng rng(91);
    LabeledDataset dataset;
    for (std::int32_t c = 0; c < 3; ++c) {
        dataset.class_names.push_back("class" + std::to_string(c));
        std::vector<Instance> group;
        for (int i = 0; i < 8; ++i) {
            Instance instance = model_instance(model, rng);
            instance.label = c;
            group.push_back(std::move(instance));
        }
        dataset.groups.push_back(std::move(group));
    }

    Memory memory = build_memory(dataset, {0, 1, 2}, 4, 23);
    for (ThresholdMode mode : {ThresholdMode::Scalar, ThresholdMode::PerClass}) {
        Thresholds thresholds = fit_thresholds(model, dataset, memory, 3.0, mode);
        CHECK(thresholds.values.size() == (mode == ThresholdMode::Scalar ? 1 : 3));
        for (double t : thresholds.values) {
            CHECK(t >= 0.5);
            CHECK(t <= 1.0);
        }
    }

    // K = class size leaves nothing to score against.
    Memory everything = build_memory(dataset, {0, 1, 2}, 8, 23);
    CHECK_THROWS_AS(fit_thresholds(model, dataset, everything, 3.0, ThresholdMode::Scalar),
                    UsageError);
}

TEST_CASE("decide follows the printed decision rule") {
    Thresholds scalar{ThresholdMode::Scalar, 3.0, {0.5}};
    const Decision reject = decide(std::vector<double>{0.3, 0.2}, scalar);
    CHECK(reject.is_reject);

    const Decision seen = decide(std::vector<double>{0.3, 0.9}, scalar);
    CHECK_FALSE(seen.is_reject);
    CHECK(seen.class_id == 1);

    Thresholds per_class{ThresholdMode::PerClass, 3.0, {0.65, 0.75}};
    CHECK(decide(std::vector<double>{0.6, 0.7}, per_class).is_reject);
    const Decision passing = decide(std::vector<double>{0.66, 0.7}, per_class);
    CHECK_FALSE(passing.is_reject);
    CHECK(passing.class_id == 0);
}

TEST_CASE("decide matches brute-force rule evaluation on random draws") {
    Rng rng(97);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t m = 1 + rng.uniform_index(6);
        std::vector<double> p(m);
        for (double& v : p) v = rng.uniform(0.0, 1.0);

        const double threshold = rng.uniform(0.5, 1.0);
        Thresholds scalar{ThresholdMode::Scalar, 3.0, {threshold}};
        const Decision got = decide(p, scalar);

        // Brute force: examine every class independently.
        bool any_at_or_above = false;
        std::size_t argmax = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (p[i] >= threshold) any_at_or_above = true;
            if (p[i] > p[argmax]) argmax = i;
        }
        if (!any_at_or_above) {
            CHECK(got.is_reject);
        } else {
            CHECK_FALSE(got.is_reject);
            CHECK(got.class_id == static_cast<std::int32_t>(argmax));
        }

        // Raising the scalar threshold never flips a reject back to seen.
        if (got.is_reject) {
            Thresholds higher{ThresholdMode::Scalar, 3.0,
                              {std::min(1.0, threshold + rng.uniform(0.0, 0.3))}};
            CHECK(decide(p, higher).is_reject);
        }
    }
}

TEST_CASE("decide breaks argmax ties toward the smaller class id") {
    Thresholds scalar{ThresholdMode::Scalar, 3.0, {0.5}};
    const Decision tied = decide(std::vector<double>{0.8, 0.8, 0.6}, scalar);
    CHECK(tied.class_id == 0);
}

TEST_CASE("memory and thresholds survive the JSON round trip") {
    MatchModel model = scoring_model(5);
    Rng rng(101);
    Memory memory;
    for (std::int32_t c = 0; c < 2; ++c) {
        std::vector<Instance> group;
        for (int j = 0; j < 3; ++j) {
            Instance instance = model_instance(model, rng);
            instance.label = c;
            group.push_back(std::move(instance));
        }
        memory.class_ids.push_back(c);
        memory.instances.push_back(std::move(group));
        memory.source_rows.emplace_back();
    }

    std::vector<std::string> names = {"alpha", "beta"};
    std::vector<std::string> restored_names;
    Memory restored = memory_from_json(memory_to_json(memory, names), &restored_names);
    CHECK(restored_names == names);
    REQUIRE(restored.num_classes() == memory.num_classes());
    for (std::size_t i = 0; i < memory.num_classes(); ++i) {
        CHECK(restored.class_ids[i] == memory.class_ids[i]);
        REQUIRE(restored.instances[i].size() == memory.instances[i].size());
        for (std::size_t j = 0; j < memory.instances[i].size(); ++j) {
            CHECK(restored.instances[i][j].token_ids == memory.instances[i][j].token_ids);
        }
    }

    Thresholds thresholds{ThresholdMode::PerClass, 2.5, {0.7, 0.9}};
    Thresholds round = thresholds_from_json(thresholds_to_json(thresholds));
    CHECK(round.mode == thresholds.mode);
    CHECK(round.alpha == thresholds.alpha);
    CHECK(round.values == thresholds.values);

    CHECK_THROWS_AS(thresholds_from_json(nlohmann::json{{"mode", "scalar"}}), FormatError);
    CHECK_THROWS_AS(
        thresholds_from_json(nlohmann::json{
            {"mode", "scalar"}, {"alpha", 3.0}, {"values", {0.2}}}),
        FormatError);
}
