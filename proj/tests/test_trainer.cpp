// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lbt/trainer.hpp"
#include "scratch.hpp"

using namespace lbt;
using scratch::TempDir;
namespace fs = std::filesystem;

namespace {

RunConfig blobs_config(const fs::path& out, const std::string& extra = "") {
    RunConfig cfg = parse_config(R"(
mode = quantized
optimizer = momentum
learning_rate = 0.05
lazy = true
architecture = mlp
hidden = 16
epochs = 3
batch_size = 16
seed = 3
dataset = blobs
blobs_classes = 4
blobs_per_class = 30
blobs_test_per_class = 10
blobs_dim = 6
blobs_spread = 3
log_interval = 2
)");
    apply_config_text(cfg, extra);
    cfg.output_dir = out.string();
    return cfg;
}

} // namespace

TEST(Config, ParseAndRoundTrip) {
    const RunConfig cfg = parse_config("# comment\n  weight_bits = 6  # trailing\n\noptimizer=adam\nlazy = yes\nlearning_rate = 1e-3\n");
    EXPECT_EQ(cfg.weight_bits, 6);
    EXPECT_EQ(cfg.optimizer.kind, OptimizerKind::adam);
    EXPECT_TRUE(cfg.optimizer.lazy);
    EXPECT_EQ(cfg.optimizer.learning_rate, 1e-3);
    EXPECT_EQ(cfg.activation_bits, 8);

    const RunConfig back = parse_config(cfg.to_text());
    EXPECT_EQ(back.to_text(), cfg.to_text());
    RunConfig odd = cfg;
    odd.optimizer.learning_rate = 0.1 + 0.2;
    odd.blobs_spread = 1.0 / 3.0;
    EXPECT_EQ(parse_config(odd.to_text()).optimizer.learning_rate, odd.optimizer.learning_rate);
    EXPECT_EQ(parse_config(odd.to_text()).blobs_spread, odd.blobs_spread);
}

TEST(Config, Errors) {
    auto message = [](const std::string& text) {
        try {
            parse_config(text, "x.cfg");
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_EQ(message("a = 1\n").rfind("x.cfg:1: unknown config key 'a'", 0), 0u);
    EXPECT_NE(message("\nweight_bits = eight\n").find("x.cfg:2:"), std::string::npos);
    EXPECT_NE(message("weight_bits\n").find("expected key = value"), std::string::npos);
    EXPECT_NE(message("mode = int8\n").find("mode"), std::string::npos);
    EXPECT_NE(message("lazy = maybe\n").find("lazy"), std::string::npos);

    auto invalid = [](const std::string& text) {
        RunConfig c = parse_config("dataset = blobs\n" + text);
        EXPECT_THROW(c.validate(), Error) << text;
    };
    invalid("epochs = 0");
    invalid("weight_bits = 1");
    invalid("classifier_gradient_bits = 33");
    invalid("architecture = resnet");
    invalid("dataset = cifar");
    invalid("acc_bits = 8\nweight_bits = 12");
    invalid("learning_rate = 0");
    invalid("batch_size = 0");
    EXPECT_THROW(parse_config("dataset = mnist").validate(), Error);
    EXPECT_NO_THROW(parse_config("dataset = blobs").validate());

    try {
        load_config("/nonexistent/run.cfg");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/run.cfg"), std::string::npos);
    }
    RunConfig c;
    apply_override(c, "hidden=12");
    EXPECT_EQ(c.hidden, 12u);
    EXPECT_THROW(apply_override(c, "hidden"), Error);
}

TEST(Config, Architectures) {
    RunConfig cfg;
    cfg.classifier_gradient_bits = 12;
    const auto lenet = build_layers(cfg, {1, 28, 28}, 10);
    ASSERT_EQ(lenet.size(), 9u);
    EXPECT_EQ(lenet[6].in, 256u);
    EXPECT_EQ(lenet[8].out, 10u);
    EXPECT_EQ(lenet[8].gradient_bits, 12);
    EXPECT_EQ(lenet[6].gradient_bits, 8);
    EXPECT_EQ(infer_shapes(lenet, {1, 28, 28}).back(), (Shape{10}));
    cfg.architecture = "linear";
    EXPECT_EQ(build_layers(cfg, {1, 1, 5}, 3).size(), 1u);
    cfg.architecture = "lenet";
    EXPECT_THROW(build_layers(cfg, {5}, 3), Error);
}

TEST(Metrics, RowFormat) {
    EXPECT_EQ(std::string(kMetricsHeader),
              "kind,step,epoch,learning_rate,train_loss,eval_accuracy,acc_saturation_count,zeroed_gradient_fraction");
    MetricsRecord m{"step", 100, 1, 0.01, 0.5, std::nullopt, 3, 0.25};
    EXPECT_EQ(metrics_row(m), "step,100,1,0.01,0.5,,3,0.250000");
    m.kind = "epoch";
    m.eval_accuracy = 0.98765;
    EXPECT_EQ(metrics_row(m), "epoch,100,1,0.01,0.5,0.987650,3,0.250000");
}

TEST(Checkpoint, EncodingAndErrors) {
    Checkpoint ck;
    ck.records.push_back(TensorRecord::from(Role::weight, 2, QTensor({2, 2}, {1, -2, 127, -128}, {8, -5})));
    ck.records.push_back(TensorRecord::from(Role::bias, 0, RealTensor({2}, {0.5, -1e-300})));
    ck.records.push_back(TensorRecord::bytes(Role::config_text, 0, {'a', '=', '1'}));
    const auto bytes = ck.encode();
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "LBT1");
    EXPECT_EQ(TensorRecord::get_le<std::uint32_t>(bytes, 4), 1u);
    EXPECT_EQ(TensorRecord::get_le<std::uint32_t>(bytes, 8), 3u);

    const Checkpoint back = Checkpoint::decode(bytes);
    EXPECT_EQ(back.encode(), bytes);
    EXPECT_EQ(back.get(Role::weight, 2).to_qtensor(), QTensor({2, 2}, {1, -2, 127, -128}, {8, -5}));
    EXPECT_EQ(back.get(Role::bias).to_real().values, (std::vector<double>{0.5, -1e-300}));
    EXPECT_THROW(back.get(Role::weight, 0), Error);
    EXPECT_THROW(back.get(Role::bias).to_qtensor(), Error);

    auto bad = bytes;
    std::copy_n("XXXX", 4, bad.begin());
    try {
        Checkpoint::decode(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    }
    bad = bytes;
    bad[4] = 2;
    EXPECT_THROW(Checkpoint::decode(bad), Error);
    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
        try {
            Checkpoint::decode(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
            FAIL() << cut;
        } catch (const Error& e) {
            EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << cut;
        }
    }
}

TEST(TrainerStateRecord, RoundTrip) {
    TrainerState s;
    s.step = 17;
    s.epoch = 2;
    s.position = 48;
    s.window_loss = 0.123;
    s.best_accuracy = 0.75;
    const auto b = s.encode();
    EXPECT_EQ(b.size(), TrainerState::kEncodedSize);
    EXPECT_EQ(TrainerState::decode(b).encode(), b);
    EXPECT_THROW(TrainerState::decode(std::vector<std::uint8_t>(79)), Error);
}

TEST(Data, PermutationAndSplit) {
    const auto p0 = epoch_permutation(100, 5, 0), p1 = epoch_permutation(100, 5, 1);
    auto sorted = p0;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_EQ(p0, epoch_permutation(100, 5, 0));
    EXPECT_NE(p0, p1);
    EXPECT_NE(p0, epoch_permutation(100, 6, 0));

    TempDir dir;
    const Datasets d = load_datasets(blobs_config(dir.path()));
    EXPECT_EQ(d.train.size(), 120u);
    EXPECT_EQ(d.eval.size(), 40u);
    EXPECT_EQ(d.train.labels[29], 0);
    EXPECT_EQ(d.train.labels[30], 1);
    EXPECT_EQ(d.eval.labels[10], 1);
    RunConfig same = blobs_config(dir.path(), "blobs_test_per_class = 0");
    EXPECT_EQ(load_datasets(same).eval.images.values, load_datasets(same).train.images.values);
}

TEST(Train, WritesMetricsAndCheckpoints) {
    TempDir dir;
    const RunConfig cfg = blobs_config(dir.path());
    const TrainResult r = train(cfg);
    ASSERT_TRUE(r.final_accuracy.has_value());
    EXPECT_GE(*r.final_accuracy, 0.0);
    EXPECT_LE(*r.final_accuracy, 1.0);
    EXPECT_TRUE(fs::exists(dir / "final.lbt"));
    EXPECT_TRUE(fs::exists(dir / "best.lbt"));

    const auto rows = scratch::lines(scratch::slurp(dir / "metrics.csv"));
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows[0], kMetricsHeader);
    int steps = 0, epochs = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        EXPECT_EQ(std::count(rows[i].begin(), rows[i].end(), ','), 7) << rows[i];
        if (rows[i].rfind("step,", 0) == 0) ++steps;
        if (rows[i].rfind("epoch,", 0) == 0) ++epochs;
    }
    EXPECT_EQ(epochs, 3);
    EXPECT_EQ(steps, 24 / 2); // 8 updates per epoch, logged every 2
    EXPECT_EQ(r.final_metrics.kind, "epoch");
    EXPECT_EQ(r.final_metrics.step, 24u);
    EXPECT_EQ(*r.final_metrics.eval_accuracy, *r.final_accuracy);
}

TEST(Train, IdenticalRunsAreByteIdentical) {
    for (const std::string mode : {"mode = fp_reference", "lazy = false", "optimizer = adam\nstate_bits = 16"}) {
        TempDir a_dir;
        const fs::path a = a_dir / "a", b = a_dir / "b";
        train(blobs_config(a, mode));
        train(blobs_config(b, mode));
        EXPECT_EQ(scratch::slurp(a / "metrics.csv"), scratch::slurp(b / "metrics.csv")) << mode;
        EXPECT_EQ(scratch::slurp(a / "final.lbt"), scratch::slurp(b / "final.lbt")) << mode;
        EXPECT_EQ(scratch::slurp(a / "best.lbt"), scratch::slurp(b / "best.lbt")) << mode;
    }
}

TEST(Train, ResumeMatchesUnbrokenRun) {
    const std::vector<std::string> modes = {"", "mode = fp_reference", "lazy = false",
                                            "optimizer = adam\nlearning_rate = 0.01\nstate_bits = 16",
                                            "lr_decay_factor = 0.5\nlr_decay_interval = 5"};
    for (const auto& mode : modes) {
        for (std::uint64_t stop : {5u, 8u, 13u}) {
            TempDir dir;
            const fs::path whole = dir / "whole", part = dir / "part";
            train(blobs_config(whole, mode));

            RunConfig first = blobs_config(part, mode);
            first.max_steps = stop;
            const TrainResult r1 = train(first);
            EXPECT_TRUE(r1.stopped_early);
            RunConfig second = blobs_config(part, mode);
            second.resume = (part / "final.lbt").string();
            const TrainResult r2 = train(second);
            EXPECT_FALSE(r2.stopped_early);

            EXPECT_EQ(scratch::slurp(whole / "metrics.csv"), scratch::slurp(part / "metrics.csv")) << mode << " @" << stop;
            EXPECT_EQ(scratch::slurp(whole / "final.lbt"), scratch::slurp(part / "final.lbt")) << mode << " @" << stop;
            EXPECT_EQ(scratch::slurp(whole / "best.lbt"), scratch::slurp(part / "best.lbt")) << mode << " @" << stop;
        }
    }
}

TEST(Train, SaveLoadSaveIsByteIdentical) {
    for (const std::string mode : {"", "mode = fp_reference", "optimizer = adam"}) {
        TempDir dir;
        const RunConfig cfg = blobs_config(dir.path(), mode);
        train(cfg);
        const Checkpoint ck = Checkpoint::load(dir / "final.lbt");
        const RunConfig stored = checkpoint_config(ck);
        const Datasets data = load_datasets(stored);
        const std::string original = scratch::slurp(dir / "final.lbt");
        if (stored.mode == Mode::fp_reference) {
            Model<RealBackend> m(stored, data.train.sample_shape(), data.train.num_classes);
            const TrainerState st = restore_checkpoint(ck, m);
            make_checkpoint(stored, m, st).save(dir / "again.lbt");
        } else {
            Model<QuantBackend> m(stored, data.train.sample_shape(), data.train.num_classes);
            const TrainerState st = restore_checkpoint(ck, m);
            make_checkpoint(stored, m, st).save(dir / "again.lbt");
        }
        EXPECT_EQ(scratch::slurp(dir / "again.lbt"), original) << mode;
        EXPECT_TRUE(stored.output_dir.empty());
    }
}

TEST(Evaluate, ReloadReproducesAccuracy) {
    TempDir dir;
    for (const std::string mode : {"", "mode = fp_reference"}) {
        const RunConfig cfg = blobs_config(dir.path(), mode);
        const TrainResult r = train(cfg);
        const Datasets data = load_datasets(cfg);
        EXPECT_EQ(evaluate_checkpoint(dir / "final.lbt", data.eval), *r.final_accuracy) << mode;
    }
    EXPECT_THROW(evaluate_checkpoint(dir / "final.lbt", synth_blobs(4, 3, 7, 1.0, 1)), Error);
    scratch::spit(dir / "bogus.lbt", "XXXXjunk");
    EXPECT_THROW(evaluate_checkpoint(dir / "bogus.lbt", synth_blobs(4, 3, 6, 1.0, 1)), Error);
}

TEST(Evaluate, ZeroWeightsPickClassZero) {
    TempDir dir;
    const RunConfig cfg = blobs_config(dir.path());
    Dataset d = synth_blobs(10, 10, 6, 3.0, 4);
    for (std::size_t i = 0; i < d.size(); i += 3) d.labels[i] = 0;
    const double freq = static_cast<double>(std::count(d.labels.begin(), d.labels.end(), 0)) / static_cast<double>(d.size());

    Model<QuantBackend> q(cfg, d.sample_shape(), 10);
    for (auto& p : q.net.params()) {
        std::fill(p.weight.theta.codes.begin(), p.weight.theta.codes.end(), 0);
        std::fill(p.bias.theta.codes.begin(), p.bias.theta.codes.end(), 0);
    }
    EXPECT_EQ(evaluate(q.net, d), freq);

    Model<RealBackend> r(cfg, d.sample_shape(), 10);
    for (auto& p : r.net.params()) {
        std::fill(p.weight.values.begin(), p.weight.values.end(), 0.0);
        std::fill(p.bias.values.begin(), p.bias.values.end(), 0.0);
    }
    EXPECT_EQ(evaluate(r.net, d), freq);
    EXPECT_THROW(evaluate(r.net, synth_blobs(10, 1, 5, 1.0, 1)), Error);
}

TEST(Train, SeparableBlobsReachFullAccuracy) {
    TempDir dir;
    const RunConfig cfg = blobs_config(dir.path(), R"(
mode = fp_reference
optimizer = sgd
learning_rate = 0.1
architecture = linear
epochs = 5
blobs_classes = 3
blobs_per_class = 50
blobs_test_per_class = 0
blobs_dim = 8
blobs_spread = 100
)");
    EXPECT_EQ(*train(cfg).final_accuracy, 1.0);
}

TEST(Train, NonFiniteLossAborts) {
    TempDir dir;
    const RunConfig cfg = blobs_config(dir.path(), "mode = fp_reference\noptimizer = sgd\nlearning_rate = 1e305\nblobs_spread = 1e3");
    try {
        train(cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss at step"), std::string::npos) << e.what();
    }
}

TEST(Train, ResumeRejectsMismatchedGeometry) {
    TempDir dir;
    train(blobs_config(dir / "a"));
    RunConfig other = blobs_config(dir / "b", "hidden = 7");
    other.resume = (dir / "a" / "final.lbt").string();
    EXPECT_THROW(train(other), Error);
}
