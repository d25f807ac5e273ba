#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hgpe/train.hpp"
#include "test_util.hpp"

using namespace hgpe;
using namespace hgpe::test;

TEST_SUITE_BEGIN("training");

TEST_CASE("toy dataset is deterministic, balanced and in range") {
    ToyDataset a = make_toy_dataset(42, 64);
    ToyDataset b = make_toy_dataset(42, 64);
    CHECK(bit_equal(a.images, b.images));
    CHECK(a.labels == b.labels);

    ToyDataset c = make_toy_dataset(43, 64);
    CHECK_FALSE(bit_equal(a.images, c.images));

    int ones = 0;
    for (int l : a.labels) ones += l;
    CHECK(ones == 32);
    for (int64_t i = 0; i < a.images.numel(); ++i) {
        CHECK(a.images[i] > -0.1);
        CHECK(a.images[i] < 1.1);
    }
}

TEST_CASE("untrained model sits at chance accuracy") {
    TrainToyOptions opt;
    opt.steps = 0;
    opt.seed = 3;
    TrainLog log = train_toy(ModelConfig::micro(), opt);
    CHECK(log.steps.empty());
    CHECK(log.final_train_accuracy == doctest::Approx(0.5).epsilon(0.2));
}

TEST_CASE("short runs are deterministic per seed") {
    TrainToyOptions opt;
    opt.steps = 6;
    opt.seed = 5;
    TrainLog a = train_toy(ModelConfig::micro(), opt);
    TrainLog b = train_toy(ModelConfig::micro(), opt);
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i) {
        CHECK(a.steps[i].loss == b.steps[i].loss);
        CHECK(a.steps[i].accuracy == b.steps[i].accuracy);
    }
    CHECK(a.final_train_accuracy == b.final_train_accuracy);

    opt.seed = 6;
    TrainLog c = train_toy(ModelConfig::micro(), opt);
    CHECK(a.steps[0].loss != c.steps[0].loss);
}

TEST_CASE("loss decreases over a short run") {
    TrainToyOptions opt;
    opt.steps = 12;
    opt.seed = 1;
    TrainLog log = train_toy(ModelConfig::micro(), opt);
    REQUIRE(log.steps.size() == 12);
    CHECK(log.steps.back().loss < log.steps.front().loss);
    for (const auto& s : log.steps) CHECK(std::isfinite(s.loss));
}

TEST_CASE("metrics file format: step loss accuracy per line") {
    TrainToyOptions opt;
    opt.steps = 3;
    opt.seed = 2;
    TrainLog log = train_toy(ModelConfig::micro(), opt);
    const std::string path =
        (std::filesystem::temp_directory_path() / "hgpe_metrics_test.txt").string();
    write_metrics(log, path);
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        int step;
        double loss, acc;
        REQUIRE(std::sscanf(line.c_str(), "%d %lf %lf", &step, &loss, &acc) == 3);
        CHECK(step == lines);
        ++lines;
    }
    CHECK(lines == 3);
    std::remove(path.c_str());
}

TEST_SUITE_END();
