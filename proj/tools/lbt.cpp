// SPDX-License-Identifier: Apache-2.0
//
// lbt: command-line front end for the low-bit training library.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lbt/lbt.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitAbort = 3;

// Bad argument values; reported like a parse error.
struct UsageError : lbt::Error {
    using lbt::Error::Error;
};

template <class Query>
void check_args(const Query& q) {
    try {
        q.validate();
    } catch (const lbt::Error& e) {
        throw UsageError(e.what());
    }
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
    lbt::RunConfig cfg;
    try {
        cfg = lbt::load_config(config_path);
        for (const auto& o : overrides) lbt::apply_override(cfg, o);
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "lbt train: " << e.what() << '\n';
        return kExitUsage;
    }
    try {
        const auto r = lbt::train(cfg);
        const auto& m = r.final_metrics;
        std::printf("step=%llu\nepoch=%d\ntrain_loss=%.6f\n", static_cast<unsigned long long>(m.step), m.epoch, m.train_loss);
        if (r.final_accuracy) std::printf("accuracy=%.6f\n", *r.final_accuracy);
        std::printf("checkpoint=%s\n", r.checkpoint.string().c_str());
    } catch (const std::exception& e) {
        std::cerr << "lbt train: aborted: " << e.what() << '\n';
        return kExitAbort;
    }
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& labels) {
    const int classes = lbt::checkpoint_num_classes(lbt::Checkpoint::load(checkpoint));
    const auto ds = lbt::load_idx_dataset(data, labels.empty() ? lbt::sibling_labels_path(data) : std::filesystem::path(labels), classes);
    std::printf("accuracy=%.6f\n", lbt::evaluate_checkpoint(checkpoint, ds));
    return kExitOk;
}

int cmd_bitwidth(int classes, double alpha) {
    const lbt::AdvisorQuery q{classes, alpha};
    check_args(q);
    std::printf("required_bits=%d\n", lbt::required_bits(q));
    std::printf("bits,feasible\n");
    for (const auto& row : lbt::feasibility_table(q, 2, 16)) std::printf("%d,%d\n", row.bits, row.feasible ? 1 : 0);
    return kExitOk;
}

int cmd_analyze(const lbt::SweepSpec& spec, const std::string& out) {
    check_args(spec);
    const auto result = lbt::run_sweep(spec);
    if (out == "-") {
        lbt::write_sweep_csv(std::cout, result);
        return kExitOk;
    }
    std::ofstream f(out);
    if (!f) throw lbt::Error("cannot write " + out);
    lbt::write_sweep_csv(f, result);
    if (!f) throw lbt::Error("write failed: " + out);
    std::cerr << "wrote " << result.cells.size() << " cells to " << out << '\n';
    return kExitOk;
}

int cmd_gen_data(int classes, std::size_t per_class, std::size_t dim, double spread, std::uint64_t seed, const std::string& out) {
    const auto ds = lbt::synth_blobs(classes, per_class, dim, spread, seed);
    const std::filesystem::path images = out + "-images.idx";
    const std::filesystem::path labels = out + "-labels.idx";
    lbt::write_idx_features(images, ds.images);
    lbt::write_idx_labels(labels, ds.labels);
    std::printf("images=%s\nlabels=%s\nsamples=%zu\n", images.string().c_str(), labels.string().c_str(), ds.size());
    return kExitOk;
}

int cmd_inspect(const std::string& path) {
    const auto ck = lbt::Checkpoint::load(path);
    std::printf("magic=LBT1\nversion=%u\nrecords=%zu\n", lbt::kCheckpointVersion, ck.records.size());
    std::printf("role,index,shape,bit_width,exponent,payload_bytes\n");
    for (const auto& r : ck.records)
        std::printf("%s,%u,%s,%d,%d,%zu\n", lbt::role_name(r.role), r.index, lbt::shape_str(r.shape).c_str(), r.bit_width, r.exponent,
                    r.payload.size());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-bit neural network training laboratory"};
    app.require_subcommand(1, 1);

    auto* train = app.add_subcommand("train", "Train a network from a config file");
    std::string config_path;
    std::vector<std::string> overrides;
    train->add_option("--config", config_path, "Config file (key = value lines)")->required();
    train->add_option("--override", overrides, "Replace one config key, as key=value (repeatable)");

    auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on an IDX dataset");
    std::string ck_path, data_path, labels_path;
    eval->add_option("--checkpoint", ck_path, "LBT1 checkpoint")->required();
    eval->add_option("--data", data_path, "IDX images file")->required();
    eval->add_option("--labels", labels_path, "IDX labels file (default: sibling of --data)");

    auto* bitwidth = app.add_subcommand("bitwidth", "Minimum classifier bit-width for a class count");
    int bw_classes = 0;
    double alpha = lbt::kDefaultAlpha;
    bitwidth->add_option("--classes", bw_classes, "Number of classes")->required();
    bitwidth->add_option("--alpha", alpha, "Round-off budget")->capture_default_str();

    auto* analyze = app.add_subcommand("analyze", "Sweep softmax-gradient zeroing over class counts and bit-widths");
    lbt::SweepSpec spec;
    std::string out_csv;
    analyze->add_option("--classes", spec.class_sizes, "Class counts, comma separated")->required()->delimiter(',');
    analyze->add_option("--bits", spec.bit_widths, "Bit-widths, comma separated")->required()->delimiter(',');
    analyze->add_option("--sigma", spec.logit_scale, "Std-dev of simulated logits")->capture_default_str();
    analyze->add_option("--samples", spec.samples, "Samples per cell")->capture_default_str();
    analyze->add_option("--seed", spec.seed, "RNG seed")->capture_default_str();
    analyze->add_option("--out", out_csv, "Output CSV path, or - for stdout")->required();

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic Gaussian-blobs dataset as IDX files");
    int gen_classes = 10;
    std::size_t per_class = 100, dim = 16;
    double spread = 3.0;
    std::uint64_t gen_seed = 7;
    std::string gen_out;
    gen->add_option("--classes", gen_classes, "Number of classes")->capture_default_str();
    gen->add_option("--per-class", per_class, "Samples per class")->capture_default_str();
    gen->add_option("--dim", dim, "Feature dimension")->capture_default_str();
    gen->add_option("--spread", spread, "Distance of class centers from the origin")->capture_default_str();
    gen->add_option("--seed", gen_seed, "RNG seed")->capture_default_str();
    gen->add_option("--out", gen_out, "Output prefix; writes PREFIX-images.idx and PREFIX-labels.idx")->required();

    auto* inspect = app.add_subcommand("inspect-checkpoint", "List the records of an LBT1 checkpoint");
    std::string inspect_path;
    inspect->add_option("checkpoint", inspect_path, "LBT1 checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "lbt: " << e.what() << "\n\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help();
        return kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, overrides);
        if (eval->parsed()) return cmd_eval(ck_path, data_path, labels_path);
        if (bitwidth->parsed()) return cmd_bitwidth(bw_classes, alpha);
        if (analyze->parsed()) return cmd_analyze(spec, out_csv);
        if (gen->parsed()) return cmd_gen_data(gen_classes, per_class, dim, spread, gen_seed, gen_out);
        if (inspect->parsed()) return cmd_inspect(inspect_path);
    } catch (const UsageError& e) {
        std::cerr << "lbt: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "lbt: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}
