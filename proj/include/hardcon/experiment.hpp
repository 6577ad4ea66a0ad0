#pragma once

// Experiment runner behind the command-line tool: configuration, dataset
// files, single runs, cached multi-seed sweeps and embedding statistics.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hardcon/arith_task.hpp"
#include "hardcon/constraints.hpp"
#include "hardcon/error.hpp"
#include "hardcon/nn.hpp"
#include "hardcon/training.hpp"

namespace hardcon::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Method { baseline, data_augmentation, soft_reg, soft_reg_projection, full };

inline std::string to_string(Method m) {
    switch (m) {
    case Method::baseline: return "baseline";
    case Method::data_augmentation: return "data_augmentation";
    case Method::soft_reg: return "soft_reg";
    case Method::soft_reg_projection: return "soft_reg_projection";
    case Method::full: return "full";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::baseline, Method::data_augmentation, Method::soft_reg, Method::soft_reg_projection,
                     Method::full}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown method '" + s + "'");
}

inline std::string to_string(training::StudentInit s) {
    return s == training::StudentInit::fine_tune ? "fine_tune" : "from_scratch";
}

inline training::StudentInit parse_student_init(const std::string& s) {
    if (s == "fine_tune") return training::StudentInit::fine_tune;
    if (s == "from_scratch") return training::StudentInit::from_scratch;
    throw ConfigError("unknown student init '" + s + "' (expected fine_tune or from_scratch)");
}

/// Shortest round-trip decimal, used in file names and CSV rows.
inline std::string format_number(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

struct ExperimentConfig {
    Method method = Method::full;
    double fraction = 1.0;
    double coverage = 1.0;
    LambdaWeights lambda{0.5, 0.1, 0.1};
    std::vector<std::uint64_t> seeds{0};
    training::StudentInit student_init = training::StudentInit::fine_tune;
    bool ops_annotations = false;
    std::size_t batch_size = 64;
    int patience = 3;
    int max_epochs = 100;
    int distill_max_epochs = 100;
    double distill_rel_tol = 1e-3;
    int distill_patience = 3;
    bool distill_unannotated = false;
    double augmentation_prob = 0.5;
    int projection_steps = 10;
    double projection_step_size = 0.01;

    // Dataset generation.
    int min_operand = -9;
    int max_operand = 9;
    std::uint64_t data_seed = 0;
    std::size_t val_size = 20000;
    std::size_t test_size = 20000;

    // Sweep grid.
    std::vector<Method> sweep_methods{Method::baseline, Method::soft_reg, Method::full};
    std::vector<double> sweep_fractions{0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0};
    std::vector<double> sweep_lambda_equ;  // empty: use lambda.equ

    // Paths and execution; not part of a run's identity.
    std::string data_dir = "data";
    std::string out_dir = "results";
    std::string annotations;  // optional annotation file indexing train.tsv
    int workers = 1;

    void validate() const {
        if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
        if (!(coverage >= 0.0 && coverage <= 1.0)) throw ConfigError("coverage must be in [0, 1]");
        lambda.validate();
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        if (min_operand > max_operand) throw ConfigError("operand range is empty");
        if (val_size == 0 || test_size == 0) throw ConfigError("validation and test sizes must be positive");
        for (double f : sweep_fractions) {
            if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sweep fractions must be in (0, 1]");
        }
        for (double l : sweep_lambda_equ) {
            if (!(l >= 0.0)) throw ConfigError("sweep lambda values must be non-negative");
        }
        phase_config(method).validate();
    }

    training::PhaseConfig phase_config(Method m) const {
        training::PhaseConfig p;
        p.batch_size = batch_size;
        p.patience = patience;
        p.max_epochs = max_epochs;
        p.student_init = student_init;
        p.distill_max_epochs = distill_max_epochs;
        p.distill_rel_tol = distill_rel_tol;
        p.distill_patience = distill_patience;
        p.distill_unannotated = distill_unannotated;
        p.projection.steps = projection_steps;
        p.projection.step_size = projection_step_size;
        p.lambda = lambda;
        p.project = false;
        p.augmentation_prob = 0.0;
        switch (m) {
        case Method::baseline: p.lambda = {}; break;
        case Method::data_augmentation:
            p.lambda = {};
            p.augmentation_prob = augmentation_prob;
            break;
        case Method::soft_reg: break;
        case Method::soft_reg_projection:
        case Method::full: p.project = true; break;
        }
        return p;
    }

    json to_json() const {
        json j;
        j["method"] = to_string(method);
        j["fraction"] = fraction;
        j["coverage"] = coverage;
        j["lambda_equ"] = lambda.equ;
        j["lambda_ent"] = lambda.ent;
        j["lambda_ops"] = lambda.ops;
        j["seeds"] = seeds;
        j["student_init"] = to_string(student_init);
        j["ops_annotations"] = ops_annotations;
        j["batch_size"] = batch_size;
        j["patience"] = patience;
        j["max_epochs"] = max_epochs;
        j["distill_max_epochs"] = distill_max_epochs;
        j["distill_rel_tol"] = distill_rel_tol;
        j["distill_patience"] = distill_patience;
        j["distill_unannotated"] = distill_unannotated;
        j["augmentation_prob"] = augmentation_prob;
        j["projection_steps"] = projection_steps;
        j["projection_step_size"] = projection_step_size;
        j["min_operand"] = min_operand;
        j["max_operand"] = max_operand;
        j["data_seed"] = data_seed;
        j["val_size"] = val_size;
        j["test_size"] = test_size;
        std::vector<std::string> methods;
        for (Method m : sweep_methods) methods.push_back(to_string(m));
        j["sweep_methods"] = methods;
        j["sweep_fractions"] = sweep_fractions;
        j["sweep_lambda_equ"] = sweep_lambda_equ;
        j["data_dir"] = data_dir;
        j["out_dir"] = out_dir;
        j["annotations"] = annotations;
        j["workers"] = workers;
        return j;
    }

    /// Overrides defaults with the keys present in `j`. A run-result document
    /// (with a "config" member) is accepted too.
    static ExperimentConfig from_json(const json& doc) {
        const json& j = doc.contains("config") && doc["config"].is_object() ? doc["config"] : doc;
        if (!j.is_object()) throw ConfigError("config must be a JSON object");
        static const std::vector<std::string> known{
            "method", "fraction", "coverage", "lambda_equ", "lambda_ent", "lambda_ops", "seeds", "student_init",
            "ops_annotations", "batch_size", "patience", "max_epochs", "distill_max_epochs", "distill_rel_tol",
            "distill_patience", "distill_unannotated", "augmentation_prob", "projection_steps",
            "projection_step_size", "min_operand", "max_operand", "data_seed", "val_size", "test_size",
            "sweep_methods", "sweep_fractions", "sweep_lambda_equ", "data_dir", "out_dir", "annotations", "workers"};
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
                throw ConfigError("unknown config key '" + it.key() + "'");
            }
        }
        ExperimentConfig c;
        try {
            auto get = [&](const char* key, auto& field) {
                if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
            };
            if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
            get("fraction", c.fraction);
            get("coverage", c.coverage);
            get("lambda_equ", c.lambda.equ);
            get("lambda_ent", c.lambda.ent);
            get("lambda_ops", c.lambda.ops);
            get("seeds", c.seeds);
            if (j.contains("student_init")) c.student_init = parse_student_init(j["student_init"].get<std::string>());
            get("ops_annotations", c.ops_annotations);
            get("batch_size", c.batch_size);
            get("patience", c.patience);
            get("max_epochs", c.max_epochs);
            get("distill_max_epochs", c.distill_max_epochs);
            get("distill_rel_tol", c.distill_rel_tol);
            get("distill_patience", c.distill_patience);
            get("distill_unannotated", c.distill_unannotated);
            get("augmentation_prob", c.augmentation_prob);
            get("projection_steps", c.projection_steps);
            get("projection_step_size", c.projection_step_size);
            get("min_operand", c.min_operand);
            get("max_operand", c.max_operand);
            get("data_seed", c.data_seed);
            get("val_size", c.val_size);
            get("test_size", c.test_size);
            if (j.contains("sweep_methods")) {
                c.sweep_methods.clear();
                for (const auto& m : j["sweep_methods"]) c.sweep_methods.push_back(parse_method(m.get<std::string>()));
            }
            get("sweep_fractions", c.sweep_fractions);
            get("sweep_lambda_equ", c.sweep_lambda_equ);
            get("data_dir", c.data_dir);
            get("out_dir", c.out_dir);
            get("annotations", c.annotations);
            get("workers", c.workers);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad config value: ") + e.what());
        }
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path);
        try {
            return from_json(json::parse(is));
        } catch (const json::parse_error& e) {
            throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
        }
    }
};

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Data files

struct LoadedData {
    arith::OpVocabulary vocab;
    arith::Dataset dataset;
    std::string checksum;  // over the three split files
    std::optional<AnnotationSet> annotations;
};

inline std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

inline void write_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << content;
    if (!os) throw DataError("write failed for " + path.string());
}

inline LoadedData load_data(const ExperimentConfig& cfg) {
    LoadedData data{arith::OpVocabulary(cfg.min_operand, cfg.max_operand), {}, {}, std::nullopt};
    std::uint64_t h = 1469598103934665603ULL;
    const fs::path dir(cfg.data_dir);
    for (auto [name, split] : {std::pair{"train.tsv", &data.dataset.train}, std::pair{"val.tsv", &data.dataset.val},
                               std::pair{"test.tsv", &data.dataset.test}}) {
        const std::string bytes = read_file(dir / name);
        h = fnv1a(bytes, h);
        std::istringstream is(bytes);
        try {
            *split = arith::read_instances(is, data.vocab);
        } catch (const VocabularyError& e) {
            throw DataError(std::string(name) + ": " + e.what());
        }
        if (split->empty()) throw DataError(std::string(name) + " is empty");
    }
    data.checksum = hex(h);
    if (!cfg.annotations.empty()) {
        data.annotations = load_annotations(cfg.annotations);
        data.checksum = hex(fnv1a(read_file(cfg.annotations), h));
    }
    return data;
}

struct GenerateSummary {
    std::size_t instances = 0;
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
    std::size_t sequences = 0;
    std::size_t equivalence_annotations = 0;
    std::size_t ops_annotations = 0;
    std::map<std::string, std::size_t> class_size_histogram;  // distinct train sequences per class

    json to_json() const {
        return {{"instances", instances},
                {"train", train},
                {"val", val},
                {"test", test},
                {"sequences", sequences},
                {"equivalence_annotations", equivalence_annotations},
                {"ops_annotations", ops_annotations},
                {"class_size_histogram", class_size_histogram}};
    }
};

inline std::string size_bucket(std::size_t n) {
    if (n <= 1) return "1";
    if (n < 10) return "2-9";
    if (n < 100) return "10-99";
    if (n < 1000) return "100-999";
    return "1000+";
}

/// Writes train/val/test.tsv and equ_annotations.txt (plus ops_annotations.txt
/// when enabled) into cfg.out_dir.
inline GenerateSummary generate_files(const ExperimentConfig& cfg) {
    const arith::OpVocabulary vocab(cfg.min_operand, cfg.max_operand);
    const arith::Dataset ds = arith::generate_dataset(vocab, cfg.data_seed, {cfg.val_size, cfg.test_size});
    const fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
    arith::save_instances((dir / "train.tsv").string(), ds.train);
    arith::save_instances((dir / "val.tsv").string(), ds.val);
    arith::save_instances((dir / "test.tsv").string(), ds.test);
    const AnnotationSet equ = arith::annotate_equivalences(ds.train, cfg.coverage, cfg.data_seed);
    save_annotations((dir / "equ_annotations.txt").string(), equ);
    GenerateSummary s;
    if (cfg.ops_annotations) {
        const AnnotationSet ops = arith::annotate_ops_membership(ds.train, vocab);
        save_annotations((dir / "ops_annotations.txt").string(), ops);
        s.ops_annotations = ops.size();
    }
    s.instances = ds.total();
    s.train = ds.train.size();
    s.val = ds.val.size();
    s.test = ds.test.size();
    s.sequences = arith::enumerate_sequences(vocab).size();
    s.equivalence_annotations = equ.size();
    for (const auto& [map, members] : arith::equivalence_classes(ds.train)) {
        std::set<arith::OpSequence> distinct;
        for (std::size_t i : members) distinct.insert(ds.train[i].seq);
        ++s.class_size_histogram[size_bucket(distinct.size())];
    }
    return s;
}

// ---------------------------------------------------------------------------
// Embedding statistics

struct EmbeddingReport {
    std::size_t sequences = 0;
    std::size_t pairs = 0;
    double mean_l2 = 0.0;
    double median_l2 = 0.0;
    double mean_cosine = 0.0;
    double median_cosine = 0.0;

    json to_json() const {
        return {{"sequences", sequences}, {"pairs", pairs},          {"mean_l2", mean_l2},
                {"median_l2", median_l2}, {"mean_cosine", mean_cosine}, {"median_cosine", median_cosine}};
    }
};

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// 1 - cos(a, b); two zero vectors are at distance 0, one zero vector at 1.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 && bb == 0.0) return 0.0;
    if (aa == 0.0 || bb == 0.0) return 1.0;
    return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

/// Distances between embeddings of every pair of distinct, equivalent
/// sequences occurring in `split`.
inline EmbeddingReport embedding_stats(const nn::ToyModel& model, std::span<const arith::Instance> split,
                                       const arith::OpVocabulary& vocab) {
    std::map<arith::AffineMap, std::vector<arith::OpSequence>> classes;
    std::set<arith::OpSequence> seen;
    for (const auto& inst : split) {
        if (seen.insert(inst.seq).second) classes[arith::canonical_affine(inst.seq)].push_back(inst.seq);
    }
    EmbeddingReport r;
    r.sequences = seen.size();
    std::vector<double> l2s, coss;
    for (auto& [map, seqs] : classes) {
        if (seqs.size() < 2) continue;
        std::vector<std::vector<double>> xs;
        xs.reserve(seqs.size());
        for (const auto& s : seqs) xs.push_back(training::embed(model, s, vocab));
        for (std::size_t a = 0; a < xs.size(); ++a) {
            for (std::size_t b = a + 1; b < xs.size(); ++b) {
                l2s.push_back(l2_distance(xs[a], xs[b]));
                coss.push_back(cosine_distance(xs[a], xs[b]));
            }
        }
    }
    r.pairs = l2s.size();
    if (r.pairs > 0) {
        r.mean_l2 = std::accumulate(l2s.begin(), l2s.end(), 0.0) / static_cast<double>(r.pairs);
        r.mean_cosine = std::accumulate(coss.begin(), coss.end(), 0.0) / static_cast<double>(r.pairs);
        r.median_l2 = median(std::move(l2s));
        r.median_cosine = median(std::move(coss));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Single runs

struct RunOutput {
    json result;
    std::string curves_csv;
    nn::ToyModel model;
    std::optional<nn::ToyModel> teacher;  // method=full only
};

inline std::string curves_header() { return "phase,epoch,train_loss,train_task_loss,val_loss,val_acc\n"; }

inline void append_curves(std::string& csv, const std::vector<training::EpochRecord>& epochs) {
    for (const auto& e : epochs) {
        csv += e.phase + "," + std::to_string(e.epoch) + "," + format_number(e.train_loss) + "," +
               format_number(e.train_task_loss) + "," + format_number(e.val_loss) + "," + format_number(e.val_acc) +
               "\n";
    }
}

inline json epochs_json(const std::vector<training::EpochRecord>& epochs) {
    json out = json::array();
    for (const auto& e : epochs) {
        out.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"train_task_loss", e.train_task_loss},
                       {"val_loss", e.val_loss},
                       {"val_acc", e.val_acc}});
    }
    return out;
}

inline std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(1000 + stream)};
    nn::Rng rng(seq);
    return rng();
}

inline bool same_values(const std::vector<nn::NamedTensor>& a, const std::vector<nn::NamedTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second.values() != b[i].second.values()) return false;
    }
    return true;
}

/// The config describing exactly one run (single seed), as embedded in its result.
inline ExperimentConfig run_config(ExperimentConfig cfg, std::uint64_t seed) {
    cfg.seeds = {seed};
    return cfg;
}

/// Subsamples the training split, builds annotations, runs phase 1 and (for
/// method=full) phase 2, and evaluates on the test split.
inline RunOutput run_single(const LoadedData& data, const ExperimentConfig& base, std::uint64_t seed,
                            std::ostream* log = nullptr) {
    const ExperimentConfig cfg = run_config(base, seed);
    cfg.validate();
    const auto& ds = data.dataset;
    const std::vector<std::size_t> subset =
        arith::sample_fraction(ds.train.size(), cfg.fraction, derived_seed(seed, 1));
    std::vector<arith::Instance> train;
    train.reserve(subset.size());
    for (std::size_t i : subset) train.push_back(ds.train[i]);

    AnnotationSet annotations;
    if (cfg.method != Method::baseline) {
        if (data.annotations) {
            std::unordered_map<std::size_t, std::size_t> keep;
            for (std::size_t k = 0; k < subset.size(); ++k) keep.emplace(subset[k], k);
            annotations = data.annotations->remapped(keep);
        } else {
            annotations = arith::annotate_equivalences(train, cfg.coverage, derived_seed(seed, 2));
            if (cfg.ops_annotations) annotations.memberships = arith::annotate_ops_membership(train, data.vocab).memberships;
        }
    }
    const training::PhaseConfig pcfg = cfg.phase_config(cfg.method);
    training::TrainingData td{&data.vocab, &train, &ds.val, training::AnnotationIndex(train, annotations), log};

    json result;
    result["format"] = "hardcon-run 1";
    result["config"] = cfg.to_json();
    result["seed"] = seed;
    result["method"] = to_string(cfg.method);
    result["data"] = {{"checksum", data.checksum},
                      {"train_instances", train.size()},
                      {"val_instances", ds.val.size()},
                      {"test_instances", ds.test.size()},
                      {"equivalence_annotations", annotations.equivalences.size()},
                      {"entailment_annotations", annotations.entailments.size()},
                      {"ops_annotations", annotations.memberships.size()}};

    training::Phase1Result p1 = training::phase1_run(td, pcfg, seed);
    const training::EvalResult teacher_test = training::evaluate(p1.model, ds.test, data.vocab);
    result["phase1"] = {{"epochs", epochs_json(p1.epochs)},
                        {"best_epoch", p1.best_epoch},
                        {"best_val_acc", p1.best_val_acc},
                        {"early_stopped", p1.early_stopped},
                        {"degenerate_entailments", p1.degenerate_entailments},
                        {"test_accuracy", teacher_test.accuracy},
                        {"test_loss", teacher_test.mean_loss}};
    RunOutput out;
    out.curves_csv = curves_header();
    append_curves(out.curves_csv, p1.epochs);
    out.model = p1.model;
    training::EvalResult final_test = teacher_test;

    if (cfg.method == Method::full) {
        const std::uint64_t hash_before = p1.targets.hash();
        training::Phase2Result p2 = training::phase2_distill(p1.model, p1.targets, td, pcfg, seed);
        const std::uint64_t hash_after = p1.targets.hash();
        final_test = training::evaluate(p2.student, ds.test, data.vocab);
        result["phase2"] = {{"epochs", epochs_json(p2.epochs)},
                            {"student_init", to_string(pcfg.student_init)},
                            {"targets", p1.targets.size()},
                            {"targets_hash_before", hex(hash_before)},
                            {"targets_hash_after", hex(hash_after)},
                            {"frozen_parameters_unchanged",
                             same_values(p1.model.frozen_parameters(), p2.student.frozen_parameters())},
                            {"initial_distill_loss", p2.initial_loss},
                            {"final_distill_loss", p2.final_loss},
                            {"converged", p2.converged},
                            {"test_accuracy", final_test.accuracy},
                            {"test_loss", final_test.mean_loss}};
        append_curves(out.curves_csv, p2.epochs);
        out.teacher = std::move(p1.model);
        out.model = std::move(p2.student);
    }
    result["test_accuracy"] = final_test.accuracy;
    result["test_loss"] = final_test.mean_loss;
    result["embedding"] = embedding_stats(out.model, ds.test, data.vocab).to_json();
    out.result = std::move(result);
    return out;
}

inline std::string run_stem(const ExperimentConfig& cfg, std::uint64_t seed) {
    return to_string(cfg.method) + "_f" + format_number(cfg.fraction) + "_s" + std::to_string(seed);
}

/// Writes <stem>.json, <stem>.csv and <stem>.ckpt into the output directory.
inline void write_run(const fs::path& dir, const std::string& stem, const RunOutput& run) {
    write_file(dir / (stem + ".json"), run.result.dump(2) + "\n");
    write_file(dir / (stem + ".csv"), run.curves_csv);
    nn::save_model((dir / (stem + ".ckpt")).string(), run.model);
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1); 0 for one value
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

/// One run per seed, then summary.json with the mean/std of test accuracy.
inline json train_command(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    const LoadedData data = load_data(cfg);
    const fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
    std::vector<double> accs;
    json runs = json::array();
    for (std::uint64_t seed : cfg.seeds) {
        RunOutput run = run_single(data, cfg, seed, log);
        const std::string stem = run_stem(cfg, seed);
        write_run(dir, stem, run);
        accs.push_back(run.result["test_accuracy"].get<double>());
        runs.push_back({{"seed", seed}, {"file", stem + ".json"}, {"test_accuracy", accs.back()}});
    }
    const MeanStd ms = mean_std(accs);
    json summary = {{"config", cfg.to_json()},
                    {"runs", runs},
                    {"test_accuracy_mean", ms.mean},
                    {"test_accuracy_std", ms.std}};
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
    ExperimentConfig config;  // single seed, method, fraction and lambda set
    std::string label;        // method column of the curves file
    std::string key;          // cache key
};

/// Identity of a run: its config without paths and execution knobs, plus the
/// data checksum.
inline std::string cell_key(const ExperimentConfig& cfg, const std::string& data_checksum) {
    json j = cfg.to_json();
    for (const char* k : {"data_dir", "out_dir", "annotations", "workers", "sweep_methods", "sweep_fractions",
                          "sweep_lambda_equ"}) {
        j.erase(k);
    }
    return hex(fnv1a(j.dump() + "|" + data_checksum));
}

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg, const std::string& data_checksum) {
    if (cfg.sweep_methods.empty() || cfg.sweep_fractions.empty()) throw ConfigError("sweep grid is empty");
    std::vector<double> lambdas = cfg.sweep_lambda_equ;
    const bool lambda_grid = !lambdas.empty();
    if (!lambda_grid) lambdas = {cfg.lambda.equ};
    std::vector<SweepCell> cells;
    for (Method m : cfg.sweep_methods) {
        const bool uses_lambda = m == Method::soft_reg || m == Method::soft_reg_projection || m == Method::full;
        for (double f : cfg.sweep_fractions) {
            for (double l : (uses_lambda ? lambdas : std::vector<double>{cfg.lambda.equ})) {
                for (std::uint64_t seed : cfg.seeds) {
                    SweepCell c;
                    c.config = cfg;
                    c.config.method = m;
                    c.config.fraction = f;
                    c.config.lambda.equ = l;
                    c.config.seeds = {seed};
                    c.label = to_string(m);
                    if (lambda_grid && uses_lambda) c.label += "[lambda_equ=" + format_number(l) + "]";
                    c.key = cell_key(c.config, data_checksum);
                    cells.push_back(std::move(c));
                }
            }
        }
    }
    return cells;
}

struct CellOutcome {
    std::optional<double> test_accuracy;
    std::string error;
    bool cached = false;
};

/// Runs every cell not already in <out>/cells/, `workers` at a time, and
/// writes sweep.csv (per-cell rows, then mean and std rows per group).
inline std::string sweep_command(const ExperimentConfig& cfg, const LoadedData& data,
                                 std::ostream* progress = nullptr) {
    cfg.validate();
    const std::vector<SweepCell> cells = sweep_cells(cfg, data.checksum);
    const fs::path dir(cfg.out_dir);
    const fs::path cache = dir / "cells";
    std::error_code ec;
    fs::create_directories(cache, ec);
    if (ec) throw DataError("cannot create output directory " + cache.string() + ": " + ec.message());

    std::vector<CellOutcome> outcomes(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t k = next++; k < cells.size(); k = next++) {
            const SweepCell& cell = cells[k];
            const fs::path file = cache / (cell.key + ".json");
            CellOutcome& out = outcomes[k];
            try {
                if (fs::exists(file)) {
                    const json cached = json::parse(read_file(file));
                    out.test_accuracy = cached.at("test_accuracy").get<double>();
                    out.cached = true;
                } else {
                    RunOutput run = run_single(data, cell.config, cell.config.seeds.front());
                    const fs::path tmp = cache / (cell.key + ".tmp");
                    write_file(tmp, run.result.dump(2) + "\n");
                    write_file(cache / (cell.key + ".csv"), run.curves_csv);
                    nn::save_model((cache / (cell.key + ".ckpt")).string(), run.model);
                    if (run.teacher) nn::save_model((cache / (cell.key + ".teacher.ckpt")).string(), *run.teacher);
                    fs::rename(tmp, file);
                    out.test_accuracy = run.result["test_accuracy"].get<double>();
                }
            } catch (const std::exception& e) {
                out.error = e.what();
            }
            if (progress) {
                std::lock_guard lock(log_mutex);
                *progress << "[" << (k + 1) << "/" << cells.size() << "] " << cell.label << " fraction "
                          << format_number(cell.config.fraction) << " seed " << cell.config.seeds.front() << ": "
                          << (out.test_accuracy ? format_number(*out.test_accuracy) : "error: " + out.error)
                          << (out.cached ? " (cached)" : "") << "\n";
                progress->flush();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < cfg.workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::string csv = "method,fraction,seed,test_accuracy\n";
    std::map<std::pair<std::string, double>, std::vector<double>> groups;
    std::vector<std::pair<std::string, double>> order;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        const auto& c = cells[k];
        const auto group = std::pair{c.label, c.config.fraction};
        if (!groups.count(group)) order.push_back(group);
        auto& g = groups[group];
        csv += c.label + "," + format_number(c.config.fraction) + "," + std::to_string(c.config.seeds.front()) + ",";
        if (outcomes[k].test_accuracy) {
            csv += format_number(*outcomes[k].test_accuracy) + "\n";
            g.push_back(*outcomes[k].test_accuracy);
        } else {
            csv += "error\n";
        }
    }
    for (const auto& group : order) {
        const MeanStd ms = mean_std(groups[group]);
        csv += group.first + "," + format_number(group.second) + ",mean," + format_number(ms.mean) + "\n";
        csv += group.first + "," + format_number(group.second) + ",std," + format_number(ms.std) + "\n";
    }
    write_file(dir / "sweep.csv", csv);
    json errors = json::array();
    for (std::size_t k = 0; k < cells.size(); ++k) {
        if (!outcomes[k].error.empty()) errors.push_back({{"cell", cells[k].key}, {"error", outcomes[k].error}});
    }
    write_file(dir / "sweep.json",
               json{{"config", cfg.to_json()}, {"cells", cells.size()}, {"errors", errors}}.dump(2) + "\n");
    return csv;
}

/// Path of a cell's cached result inside a sweep output directory.
inline fs::path cell_result_path(const ExperimentConfig& sweep_cfg, const SweepCell& cell) {
    return fs::path(sweep_cfg.out_dir) / "cells" / (cell.key + ".json");
}

} // namespace hardcon::experiment
