// Acceptance suite: one PASS/FAIL line per criterion.
//
//   hardcon_acceptance [work_dir]
//
// work_dir holds the generated dataset and the sweep cell cache; a second run
// reuses finished cells.

#include <bit>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "fd.hpp"
#include "hardcon/experiment.hpp"

using namespace hardcon;
namespace fs = std::filesystem;
using experiment::ExperimentConfig;
using experiment::Method;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

// Keeps coordinates away from the L1 kink at zero.
void push_from_zero(std::vector<double>& v) {
    for (double& x : v) x = x >= 0 ? x + 0.05 : x - 0.05;
}

std::vector<std::size_t> random_members(std::mt19937_64& rng, std::size_t vocab) {
    std::vector<std::size_t> m;
    for (std::size_t k = 0; k < vocab; ++k) {
        if (rng() % 8 == 0) m.push_back(k);
    }
    return m;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = Clock::now();
    const arith::OpVocabulary vocab;
    std::mt19937_64 rng(2024);
    const int configs = 100;
    double model_worst = 0.0, equ_worst = 0.0, ent_worst = 0.0, ops_worst = 0.0;
    std::size_t probes = 0;
    for (int c = 0; c < configs; ++c) {
        nn::Rng init(rng());
        nn::ToyModel m(training::model_dims(vocab), init);
        for (auto& [name, t] : m.named_parameters()) {
            if (t.shape().size() == 1) {
                for (double& v : t.data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
            }
        }
        std::vector<std::size_t> tokens(1 + rng() % 3);
        for (auto& t : tokens) t = rng() % vocab.size();
        const int digit = static_cast<int>(rng() % 19) - 9;
        const double target = std::uniform_real_distribution<double>(-10, 10)(rng);
        auto loss = [&](Tape& t) { return square(t, sub(t, m.forward(t, digit, tokens), Tensor::scalar(target))); };
        const std::vector<Tensor> params = m.parameters();
        const auto analytic = testing::analytic_gradients(params, loss);
        // Per tensor: coordinates the loss touches, plus uniform ones.
        std::vector<std::pair<std::size_t, std::size_t>> coords;
        for (std::size_t p = 0; p < params.size(); ++p) {
            std::vector<std::size_t> touched;
            for (std::size_t k = 0; k < analytic[p].size(); ++k) {
                if (analytic[p][k] != 0.0) touched.push_back(k);
            }
            for (int s = 0; s < 6 && !touched.empty(); ++s) coords.emplace_back(p, touched[rng() % touched.size()]);
            for (int s = 0; s < 2; ++s) coords.emplace_back(p, rng() % params[p].size());
        }
        probes += coords.size();
        model_worst = std::max(model_worst, testing::gradient_error_at(params, loss, analytic, coords));

        std::vector<double> av = uniform(rng, 64, -1, 1), bv = uniform(rng, 64, -1, 1);
        push_from_zero(av);
        push_from_zero(bv);
        if (std::abs(l1(av) - l1(bv)) < 0.5) bv[0] += bv[0] > 0 ? 1.0 : -1.0;
        Tensor a = Tensor::vector(av, true), b = Tensor::vector(bv, true);
        equ_worst = std::max(equ_worst, testing::max_gradient_error({a, b}, [&](Tape& t) { return reg_equivalence(t, a, b); }));
        ent_worst = std::max(ent_worst, testing::max_gradient_error({a, b}, [&](Tape& t) { return reg_entailment(t, a, b); }));
        nn::Rng bank_rng(rng());
        HalfSpaceBank bank(vocab.ids(), 64, bank_rng);
        for (double& v : bank.b().data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        const auto members = random_members(rng, vocab.size());
        ops_worst = std::max(ops_worst, testing::max_gradient_error({a, bank.w(), bank.b()},
                                                                    [&](Tape& t) { return reg_ops(t, a, members, bank); }));
    }
    const double elapsed = seconds_since(t0);
    const double worst = std::max({model_worst, equ_worst, ent_worst, ops_worst});
    return {worst < 1e-4 && elapsed < 120.0,
            std::to_string(configs) + " configurations each; max relative error model " + fmt(model_worst) +
                " (" + std::to_string(probes) + " probes), equ " + fmt(equ_worst) + ", ent " + fmt(ent_worst) +
                ", ops " + fmt(ops_worst) + "; " + fmt(elapsed, 3) + " s"};
}

Outcome projections() {
    std::mt19937_64 rng(77);
    const arith::OpVocabulary vocab;
    const ProjectionConfig cfg;
    Tape tape;
    tape.set_recording(false);
    int equ_bad = 0, ent_bad = 0, ops_bad = 0;
    double worst_norm_gap = 0.0, worst_ops_increase = -1e300;
    const int draws = 1000;
    for (int d = 0; d < draws; ++d) {
        const Tensor a = Tensor::vector(uniform(rng, 64, -1, 1));
        const Tensor b = Tensor::vector(uniform(rng, 64, -2, 2));
        const auto e = project_equivalence(tape, a, b);
        equ_bad += e.first.values() == e.second.values() ? 0 : 1;

        const auto p = project_entailment(tape, a, b, cfg.eps_norm);
        const double gap = std::abs(l1(p.first.values()) - l1(p.second.values()));
        worst_norm_gap = std::max(worst_norm_gap, gap);
        bool direction = !p.degenerate;
        for (const auto& [in, out] : {std::pair{a, p.first}, std::pair{b, p.second}}) {
            const double s = l1(out.values()) / l1(in.values());
            for (std::size_t i = 0; i < 64; ++i) {
                direction = direction && s > 0.0 && std::abs(out.values()[i] - s * in.values()[i]) <= 1e-12;
            }
        }
        ent_bad += gap <= 1e-9 && direction ? 0 : 1;

        nn::Rng bank_rng(rng());
        const HalfSpaceBank bank(vocab.ids(), 64, bank_rng);
        const auto members = random_members(rng, vocab.size());
        const auto x = uniform(rng, 64, -1, 1);
        const auto labels = bank.labels(members);
        const auto projected = project_ops(tape, Tensor::vector(x), members, bank, cfg).values();
        const double increase = ops_loss(projected, labels, bank) - ops_loss(x, labels, bank);
        worst_ops_increase = std::max(worst_ops_increase, increase);
        ops_bad += increase <= 1e-9 ? 0 : 1;
    }
    return {equ_bad + ent_bad + ops_bad == 0,
            std::to_string(draws) + " draws at dim 64; equivalence violations " + std::to_string(equ_bad) +
                ", entailment violations " + std::to_string(ent_bad) + " (max L1 gap " + fmt(worst_norm_gap) +
                "), ops violations " + std::to_string(ops_bad) + " (max loss change " + fmt(worst_ops_increase) + ")"};
}

// Evaluates the rendered text of a sequence, independently of OpToken arithmetic.
long long eval_text(long long digit, const std::string& text) {
    std::istringstream is(text);
    std::string tok;
    long long v = digit;
    while (is >> tok) {
        const long long c = std::strtoll(tok.c_str() + 1, nullptr, 10);
        v = tok[0] == '*' ? v * c : tok[0] == '+' ? v + c : v - c;
    }
    return v;
}

Outcome oracle() {
    const auto t0 = Clock::now();
    const auto seqs = arith::enumerate_sequences(arith::OpVocabulary{});
    std::size_t violations = 0, checked = 0;
    for (const auto& s : seqs) {
        const arith::AffineMap m = arith::canonical_affine(s);
        const std::string text = arith::to_string(s);
        for (int d = arith::kMinDigit; d <= arith::kMaxDigit; ++d) {
            const std::int64_t v = arith::eval_sequence(d, s);
            violations += (m.a * d + m.b == v && v == eval_text(d, text)) ? 0 : 1;
            ++checked;
        }
    }
    std::vector<arith::OpToken> s1{arith::parse_token("+1"), arith::parse_token("*2")};
    std::vector<arith::OpToken> s2{arith::parse_token("*2"), arith::parse_token("-2"), arith::parse_token("+4")};
    const bool exemplar = arith::equivalent(arith::OpSequence::from(s1), arith::OpSequence::from(s2));
    const double elapsed = seconds_since(t0);
    return {seqs.size() == 56354 && violations == 0 && exemplar && elapsed < 60.0,
            std::to_string(seqs.size()) + " sequences, " + std::to_string(checked) + " evaluations, " +
                std::to_string(violations) + " violations; [+1,*2] ~ [*2,-2,+4]: " + (exemplar ? "yes" : "no") +
                "; " + fmt(elapsed, 3) + " s"};
}

std::uint64_t parameter_hash(const nn::ToyModel& m) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : m.named_parameters()) {
        for (double v : t.values()) {
            const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            h = experiment::fnv1a(std::string_view(reinterpret_cast<const char*>(&bits), sizeof bits), h);
        }
    }
    return h;
}

struct Subset {
    std::vector<arith::Instance> train;
    AnnotationSet annotations;
};

// The training subset and annotations a run with this config and seed uses.
Subset subset_for(const experiment::LoadedData& data, const ExperimentConfig& cfg, std::uint64_t seed) {
    Subset s;
    for (std::size_t i : arith::sample_fraction(data.dataset.train.size(), cfg.fraction, experiment::derived_seed(seed, 1))) {
        s.train.push_back(data.dataset.train[i]);
    }
    s.annotations = arith::annotate_equivalences(s.train, cfg.coverage, experiment::derived_seed(seed, 2));
    return s;
}

Outcome reduction(const experiment::LoadedData& data) {
    ExperimentConfig cfg;
    cfg.fraction = 0.01;
    cfg.max_epochs = 3;
    cfg.lambda = {0.0, 0.0, 0.0};
    const std::uint64_t seed = 0;
    const Subset s = subset_for(data, cfg, seed);
    auto trajectory = [&](Method m, const AnnotationSet& annotations) {
        const training::TrainingData td{&data.vocab, &s.train, &data.dataset.val,
                                        training::AnnotationIndex(s.train, annotations), nullptr};
        std::vector<std::uint64_t> hashes;
        const auto r = training::phase1_run(td, cfg.phase_config(m), seed,
                                            [&](const nn::ToyModel& model) { hashes.push_back(parameter_hash(model)); });
        return std::pair{hashes, r.epochs.size()};
    };
    const auto [base, base_epochs] = trajectory(Method::baseline, AnnotationSet{});
    const auto [soft, soft_epochs] = trajectory(Method::soft_reg, s.annotations);
    std::size_t first_diff = 0;
    while (first_diff < std::min(base.size(), soft.size()) && base[first_diff] == soft[first_diff]) ++first_diff;
    const bool same = base == soft && !base.empty() && base_epochs == 3 && soft_epochs == 3;
    return {same, std::to_string(base.size()) + " optimizer steps over " + std::to_string(base_epochs) +
                      " epochs on " + std::to_string(s.train.size()) + " instances (" +
                      std::to_string(s.annotations.equivalences.size()) + " equivalence annotations ignored at weight 0); " +
                      (same ? "all parameter hashes identical" : "first difference at step " + std::to_string(first_diff))};
}

// ---------------------------------------------------------------------------
// Sweep-based criteria

struct Cell {
    Method method;
    double fraction;
    std::uint64_t seed;
    json result;
};

struct Group {
    std::vector<double> values;
    double mean() const { return experiment::mean_std(values).mean; }
    double se() const { return experiment::mean_std(values).std / std::sqrt(static_cast<double>(values.size())); }
};

const std::vector<double> kFractions{0.01, 0.05, 0.1};

ExperimentConfig sweep_config(const fs::path& work) {
    ExperimentConfig cfg;
    cfg.seeds = {0, 1, 2, 3};
    cfg.sweep_methods = {Method::baseline, Method::soft_reg, Method::full};
    cfg.sweep_fractions = kFractions;
    cfg.data_dir = (work / "data").string();
    cfg.out_dir = (work / "sweep").string();
    return cfg;
}

std::vector<Cell> run_sweep(const ExperimentConfig& cfg, const experiment::LoadedData& data) {
    std::cout << "running sweep into " << cfg.out_dir << " (progress on stderr)" << std::endl;
    experiment::sweep_command(cfg, data, &std::cerr);
    std::vector<Cell> cells;
    for (const auto& c : experiment::sweep_cells(cfg, data.checksum)) {
        const fs::path file = experiment::cell_result_path(cfg, c);
        if (!fs::exists(file)) throw std::runtime_error("sweep cell failed: " + c.label + " fraction " +
                                                        experiment::format_number(c.config.fraction));
        cells.push_back({c.config.method, c.config.fraction, c.config.seeds.front(),
                         json::parse(experiment::read_file(file))});
    }
    return cells;
}

Group collect(const std::vector<Cell>& cells, Method m, double f, const std::function<double(const json&)>& get) {
    Group g;
    for (const auto& c : cells) {
        if (c.method == m && c.fraction == f) g.values.push_back(get(c.result));
    }
    return g;
}

double test_accuracy(const json& r) { return r.at("test_accuracy").get<double>(); }

Outcome ordering(const std::vector<Cell>& cells) {
    bool pass = true;
    std::string detail;
    for (double f : kFractions) {
        const Group b = collect(cells, Method::baseline, f, test_accuracy);
        const Group s = collect(cells, Method::soft_reg, f, test_accuracy);
        const Group u = collect(cells, Method::full, f, test_accuracy);
        const double margin = u.mean() - b.mean();
        const double se = std::sqrt(u.se() * u.se() + b.se() * b.se());
        const bool ordered = u.mean() >= s.mean() && s.mean() >= b.mean();
        pass = pass && ordered;
        detail += "\n      fraction " + experiment::format_number(f) + ": baseline " + fmt(b.mean()) + "+-" + fmt(b.se(), 2) +
                  ", soft_reg " + fmt(s.mean()) + "+-" + fmt(s.se(), 2) + ", full " + fmt(u.mean()) + "+-" +
                  fmt(u.se(), 2) + "; full-baseline " + fmt(margin) + " (" + fmt(margin / se, 3) + " SE); " +
                  (ordered ? "ordered" : "NOT ordered");
        if (f == kFractions.front()) pass = pass && margin > 0.0 && margin >= 2.0 * se;
    }
    return {pass, "4 seeds per cell, mean +- standard error" + detail};
}

Outcome collapse(const std::vector<Cell>& cells) {
    auto l2 = [](const json& r) { return r.at("embedding").at("mean_l2").get<double>(); };
    bool pass = true;
    std::string detail;
    for (double f : kFractions) {
        const double full = collect(cells, Method::full, f, l2).mean();
        const double base = collect(cells, Method::baseline, f, l2).mean();
        const double ratio = full / base;
        pass = pass && ratio < 0.1;
        detail += "\n      fraction " + experiment::format_number(f) + ": full " + fmt(full) + " vs baseline " +
                  fmt(base) + " -> " + fmt(100.0 * ratio, 3) + "%";
    }
    return {pass, "mean L2 between equivalent held-out sequences, full (fine-tuned student) / baseline" + detail};
}

Outcome distillation(const std::vector<Cell>& cells) {
    auto teacher = [](const json& r) { return r.at("phase1").at("test_accuracy").get<double>(); };
    auto student = [](const json& r) { return r.at("phase2").at("test_accuracy").get<double>(); };
    bool pass = true;
    std::string detail;
    for (double f : kFractions) {
        const double t = collect(cells, Method::full, f, teacher).mean();
        const double s = collect(cells, Method::full, f, student).mean();
        pass = pass && s >= t - 0.005;
        detail += "\n      fraction " + experiment::format_number(f) + ": teacher " + fmt(t) + ", student " + fmt(s) +
                  " (" + (s - t >= 0 ? "+" : "") + fmt(s - t, 3) + ")";
    }
    return {pass, "phase 2 test accuracy vs phase 1 teacher, mean of 4 seeds" + detail};
}

std::vector<std::uint64_t> bits(const std::vector<nn::NamedTensor>& params) {
    std::vector<std::uint64_t> out;
    for (const auto& [name, t] : params) {
        for (double v : t.values()) out.push_back(std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

Outcome frozen(const std::vector<Cell>& cells, const experiment::LoadedData& data) {
    // Direct instrumented run.
    ExperimentConfig cfg;
    cfg.fraction = 0.01;
    cfg.max_epochs = 2;
    cfg.distill_max_epochs = 3;
    const std::uint64_t seed = 9;
    const Subset s = subset_for(data, cfg, seed);
    const training::TrainingData td{&data.vocab, &s.train, &data.dataset.val,
                                    training::AnnotationIndex(s.train, s.annotations), nullptr};
    const auto pcfg = cfg.phase_config(Method::full);
    const auto p1 = training::phase1_run(td, pcfg, seed);
    const auto frozen_before = bits(p1.model.frozen_parameters());
    const std::uint64_t hash_before = p1.targets.hash();
    std::vector<std::vector<double>> target_values;
    for (const auto& [i, x] : p1.targets.all()) target_values.push_back(x);
    const auto p2 = training::phase2_distill(p1.model, p1.targets, td, pcfg, seed);
    std::vector<std::vector<double>> target_after;
    for (const auto& [i, x] : p1.targets.all()) target_after.push_back(x);
    const bool direct = bits(p2.student.frozen_parameters()) == frozen_before && p1.targets.hash() == hash_before &&
                        target_after == target_values &&
                        bits(p2.student.encoder_parameters()) != bits(p1.model.encoder_parameters());

    // Every full run of the sweep records the same checks.
    std::size_t runs = 0, held = 0;
    for (const auto& c : cells) {
        if (c.method != Method::full) continue;
        ++runs;
        const json& p = c.result.at("phase2");
        held += p.at("frozen_parameters_unchanged").get<bool>() && p.at("targets_hash_before") == p.at("targets_hash_after");
    }
    return {direct && held == runs && runs > 0,
            "instrumented run (" + std::to_string(p1.targets.size()) + " targets, " + std::to_string(p2.epochs.size()) +
                " distillation epochs): " + (direct ? "head, digit embedding and targets bit-identical" : "VIOLATED") +
                "; sweep full runs holding both invariants: " + std::to_string(held) + "/" + std::to_string(runs)};
}

// ---------------------------------------------------------------------------
// Determinism of the command-line tool

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(HARDCON_CLI) + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::uint64_t> tree_checksums(const fs::path& root) {
    std::map<std::string, std::uint64_t> out;
    if (fs::is_regular_file(root)) {
        out[root.filename().string()] = experiment::fnv1a(experiment::read_file(root));
        return out;
    }
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = experiment::fnv1a(experiment::read_file(e.path()));
    }
    return out;
}

Outcome determinism(const fs::path& work) {
    const fs::path dir = work / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    experiment::write_file(dir / "cfg.json", R"({"max_epochs": 1, "distill_max_epochs": 2, "seeds": [5]})");
    const std::string cfg = " --config " + (dir / "cfg.json").string() + " --data-dir " + (work / "data").string();
    const fs::path out = dir / "out";
    const fs::path ckpt = dir / "ckpt";
    struct Command {
        std::string name;
        std::string args;
    };
    const std::vector<Command> commands{
        {"generate", "generate --out " + out.string()},
        {"train", "train" + cfg + " --method full --fraction 0.01 --out " + out.string()},
        {"sweep", "sweep" + cfg + " --methods baseline soft_reg --fractions 0.01 --out " + out.string()},
        {"embed-stats", "embed-stats" + cfg + " --checkpoint " + ckpt.string() + " --out " + out.string()},
    };
    // embed-stats reads a checkpoint produced by a one-epoch baseline run.
    if (run_cli("train" + cfg + " --method baseline --fraction 0.01 --out " + (dir / "model").string(), dir / "model.log") != 0) {
        return {false, "could not train the checkpoint for embed-stats"};
    }
    fs::copy_file(dir / "model" / "baseline_f0.01_s5.ckpt", ckpt);
    bool pass = true;
    std::string detail;
    for (const auto& c : commands) {
        std::map<std::string, std::uint64_t> first;
        for (int attempt = 0; attempt < 2; ++attempt) {
            fs::remove_all(out);
            const int code = run_cli(c.args, dir / (c.name + ".log"));
            if (code != 0) {
                pass = false;
                detail += "\n      " + c.name + ": exit code " + std::to_string(code);
                break;
            }
            const auto sums = tree_checksums(out);
            if (attempt == 0) {
                first = sums;
            } else {
                const bool same = sums == first && !sums.empty();
                pass = pass && same;
                detail += "\n      " + c.name + ": " + std::to_string(sums.size()) + " file(s) " +
                          (same ? "checksum-identical" : "DIFFER");
            }
        }
    }
    return {pass, "each command run twice with the same config and seed" + detail};
}

// ---------------------------------------------------------------------------

experiment::LoadedData prepare_data(const fs::path& work) {
    ExperimentConfig cfg;
    cfg.data_dir = (work / "data").string();
    cfg.out_dir = cfg.data_dir;
    if (!fs::exists(work / "data" / "test.tsv")) {
        std::cout << "generating dataset into " << cfg.data_dir << std::endl;
        experiment::generate_files(cfg);
    }
    return experiment::load_data(cfg);
}

} // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path(HARDCON_ACCEPTANCE_DIR);
    fs::create_directories(work);
    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& check) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << " ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
    };

    report(1, "gradient correctness", gradients);
    report(2, "projection exactness", projections);
    report(3, "oracle equivalence", oracle);

    std::optional<experiment::LoadedData> data;
    try {
        data = prepare_data(work);
    } catch (const std::exception& e) {
        std::cout << "dataset unavailable: " << e.what() << std::endl;
    }
    auto need_data = [&]() -> const experiment::LoadedData& {
        if (!data) throw std::runtime_error("dataset unavailable");
        return *data;
    };
    report(4, "reduction to baseline", [&] { return reduction(need_data()); });

    std::vector<Cell> cells;
    std::string sweep_error;
    try {
        cells = run_sweep(sweep_config(work), need_data());
    } catch (const std::exception& e) {
        sweep_error = e.what();
    }
    auto need_cells = [&]() -> const std::vector<Cell>& {
        if (!sweep_error.empty()) throw std::runtime_error("sweep failed: " + sweep_error);
        return cells;
    };
    report(5, "method ordering", [&] { return ordering(need_cells()); });
    report(6, "embedding collapse", [&] { return collapse(need_cells()); });
    report(7, "distillation non-degradation", [&] { return distillation(need_cells()); });
    report(8, "frozen head and targets", [&] { return frozen(need_cells(), need_data()); });
    report(9, "determinism", [&] { return determinism(work); });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
