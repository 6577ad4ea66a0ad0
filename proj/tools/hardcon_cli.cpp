// hardcon: generate the arithmetic dataset, train, sweep, and measure
// embedding distances between equivalent sequences.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hardcon/experiment.hpp"

namespace {

using namespace hardcon;
using experiment::ExperimentConfig;

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, data_error = 3, numerical_error = 4 };

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::uint64_t> seeds;
    std::optional<std::string> method;
    std::optional<double> fraction;
    std::optional<double> coverage;
    std::optional<double> lambda_equ;
    std::optional<double> lambda_ent;
    std::optional<double> lambda_ops;
    std::optional<int> workers;
    std::optional<std::string> out;
    std::optional<std::string> data_dir;
    std::optional<std::string> student_init;
    std::optional<std::string> annotations;
    std::optional<int> max_epochs;
    std::vector<std::string> methods;
    std::vector<double> fractions;
    std::vector<double> lambda_grid;
    bool ops = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON config file; flags override its values");
        app->add_option("--seed", seed, "Random seed");
        app->add_option("--seeds", seeds, "Several seeds (one run each)");
        app->add_option("--method", method,
                        "baseline | data_augmentation | soft_reg | soft_reg_projection | full");
        app->add_option("--fraction", fraction, "Fraction of the training split to use");
        app->add_option("--coverage", coverage, "Fraction of eligible equivalence classes annotated");
        app->add_option("--lambda-equ", lambda_equ, "Weight of the equivalence regularizer");
        app->add_option("--lambda-ent", lambda_ent, "Weight of the entailment regularizer");
        app->add_option("--lambda-ops", lambda_ops, "Weight of the ops regularizer");
        app->add_option("--workers", workers, "Parallel sweep cells");
        app->add_option("--out", out, "Output directory");
        app->add_option("--data-dir", data_dir, "Directory holding train/val/test.tsv");
        app->add_option("--student-init", student_init, "fine_tune | from_scratch");
        app->add_option("--annotations", annotations, "Annotation file indexing train.tsv");
        app->add_option("--max-epochs", max_epochs, "Phase 1 epoch cap");
        app->add_option("--methods", methods, "Sweep methods");
        app->add_option("--fractions", fractions, "Sweep fractions");
        app->add_option("--lambda-grid", lambda_grid, "Sweep values of the equivalence weight");
        app->add_flag("--ops", ops, "Also annotate op-set membership");
    }

    ExperimentConfig resolve() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config);
        if (seed) c.seeds = {*seed};
        if (!seeds.empty()) c.seeds = seeds;
        if (method) c.method = experiment::parse_method(*method);
        if (fraction) c.fraction = *fraction;
        if (coverage) c.coverage = *coverage;
        if (lambda_equ) c.lambda.equ = *lambda_equ;
        if (lambda_ent) c.lambda.ent = *lambda_ent;
        if (lambda_ops) c.lambda.ops = *lambda_ops;
        if (workers) c.workers = *workers;
        if (out) c.out_dir = *out;
        if (data_dir) c.data_dir = *data_dir;
        if (student_init) c.student_init = experiment::parse_student_init(*student_init);
        if (annotations) c.annotations = *annotations;
        if (max_epochs) c.max_epochs = *max_epochs;
        if (!methods.empty()) {
            c.sweep_methods.clear();
            for (const auto& m : methods) c.sweep_methods.push_back(experiment::parse_method(m));
        }
        if (!fractions.empty()) c.sweep_fractions = fractions;
        if (!lambda_grid.empty()) c.sweep_lambda_equ = lambda_grid;
        if (ops) c.ops_annotations = true;
        c.validate();
        return c;
    }
};

void echo_config(const ExperimentConfig& c) { std::cout << "config " << c.to_json().dump() << "\n"; }

int run_generate(const Overrides& o) {
    ExperimentConfig c = o.resolve();
    if (!o.out) c.out_dir = c.data_dir;
    echo_config(c);
    const experiment::GenerateSummary s = experiment::generate_files(c);
    std::cout << "instances " << s.instances << " (train " << s.train << ", val " << s.val << ", test " << s.test
              << ")\n"
              << "sequences " << s.sequences << "\n"
              << "equivalence annotations " << s.equivalence_annotations << "\n";
    if (c.ops_annotations) std::cout << "ops annotations " << s.ops_annotations << "\n";
    std::cout << "class sizes (distinct train sequences per class):\n";
    for (const char* bucket : {"1", "2-9", "10-99", "100-999", "1000+"}) {
        const auto it = s.class_size_histogram.find(bucket);
        std::cout << "  " << bucket << ": " << (it == s.class_size_histogram.end() ? 0 : it->second) << "\n";
    }
    return ok;
}

int run_train(const Overrides& o) {
    const ExperimentConfig c = o.resolve();
    echo_config(c);
    const auto summary = experiment::train_command(c, &std::cerr);
    for (const auto& r : summary["runs"]) {
        std::cout << "seed " << r["seed"] << " test_accuracy " << r["test_accuracy"].get<double>() << " -> "
                  << r["file"].get<std::string>() << "\n";
    }
    std::cout << "test_accuracy mean " << summary["test_accuracy_mean"].get<double>() << " std "
              << summary["test_accuracy_std"].get<double>() << "\n";
    return ok;
}

int run_sweep(const Overrides& o) {
    const ExperimentConfig c = o.resolve();
    echo_config(c);
    const auto data = experiment::load_data(c);
    std::cout << experiment::sweep_command(c, data, &std::cerr);
    return ok;
}

int run_embed_stats(const Overrides& o, const std::string& checkpoint) {
    const ExperimentConfig c = o.resolve();
    const auto data = experiment::load_data(c);
    const nn::ToyModel model = nn::load_model(checkpoint);
    const auto report = experiment::embedding_stats(model, data.dataset.test, data.vocab);
    nlohmann::json j = report.to_json();
    j["checkpoint"] = checkpoint;
    j["data_checksum"] = data.checksum;
    const std::string text = j.dump(2) + "\n";
    if (o.out) {
        experiment::write_file(*o.out, text);
    }
    std::cout << text;
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Constraint-shaped embeddings on a sequential arithmetic task"};
    app.require_subcommand(1);

    Overrides gen_o, train_o, sweep_o, stats_o;
    auto* gen = app.add_subcommand("generate", "Write train/val/test splits and annotation files");
    gen_o.attach(gen);
    auto* train = app.add_subcommand("train", "Train one configuration for each seed");
    train_o.attach(train);
    auto* sweep = app.add_subcommand("sweep", "Run method x fraction x seed, cached per cell");
    sweep_o.attach(sweep);
    auto* stats = app.add_subcommand("embed-stats", "Distances between equivalent test-sequence embeddings");
    stats_o.attach(stats);
    std::string checkpoint;
    stats->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        if (*gen) return run_generate(gen_o);
        if (*train) return run_train(train_o);
        if (*sweep) return run_sweep(sweep_o);
        if (*stats) return run_embed_stats(stats_o, checkpoint);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return data_error;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return numerical_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure;
    }
    return failure;
}
