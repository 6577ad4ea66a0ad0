#pragma once

// Two-phase training. Phase 1 trains every layer on the task loss plus soft
// regularizers, with annotated embeddings projected onto their constraint set
// before the head; it early-stops on validation accuracy and restores the best
// epoch. The projected embeddings of the annotated training instances are then
// frozen as targets. Phase 2 retrains only the encoder to regress onto those
// targets while the digit embedding and head stay fixed.

#include <algorithm>
#include <array>
#include <bit>
#include <ostream>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hardcon/arith_task.hpp"
#include "hardcon/autodiff.hpp"
#include "hardcon/constraints.hpp"
#include "hardcon/error.hpp"
#include "hardcon/nn.hpp"
#include "hardcon/optim.hpp"

namespace hardcon::training {

using arith::Instance;
using arith::OpSequence;
using arith::OpVocabulary;
using nn::Rng;
using nn::ToyModel;

enum class StudentInit { from_scratch, fine_tune };

struct PhaseConfig {
    std::size_t batch_size = 64;
    LambdaWeights lambda{0.5, 0.1, 0.1};
    bool project = false;  // in-network projection during phase 1
    ProjectionConfig projection;
    int patience = 3;
    int max_epochs = 100;
    StudentInit student_init = StudentInit::fine_tune;
    int distill_max_epochs = 100;
    double distill_rel_tol = 1e-3;  // relative improvement below this counts as a stall
    int distill_patience = 3;       // consecutive stalls that end phase 2
    bool distill_unannotated = false;
    double augmentation_prob = 0.0;  // equivalent-sequence substitution probability
    double adadelta_rho = 0.95;
    double adadelta_eps = 1e-6;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        lambda.validate();
        projection.validate();
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (max_epochs < 1 || distill_max_epochs < 1) throw ConfigError("max epochs must be >= 1");
        if (!(distill_rel_tol >= 0.0) || distill_patience < 1) throw ConfigError("bad distillation stopping rule");
        if (!(augmentation_prob >= 0.0 && augmentation_prob <= 1.0)) throw ConfigError("augmentation probability must be in [0, 1]");
    }
};

/// Independent random streams derived from one run seed.
enum class Stream : std::uint64_t { init = 1, shuffle, partners, augmentation, bank, student, distill_shuffle };

inline Rng make_rng(std::uint64_t seed, Stream stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return Rng(seq);
}

struct TokenIds {
    std::array<std::size_t, arith::kMaxOps> ids{};
    std::size_t count = 0;

    std::span<const std::size_t> span() const { return {ids.data(), count}; }
};

inline TokenIds token_ids(const OpSequence& seq, const OpVocabulary& vocab) {
    TokenIds t;
    for (const auto& op : seq) t.ids[t.count++] = vocab.id(op);
    return t;
}

// ---------------------------------------------------------------------------
// Annotation lookup

/// Partner tables over the training split. Equivalence partners of i are the
/// members of i's connected component (equivalence is transitive) whose
/// sequence differs from i's; entailment partners are direct consequences.
class AnnotationIndex {
public:
    AnnotationIndex() = default;

    AnnotationIndex(const std::vector<Instance>& train, const AnnotationSet& annotations) : train_(&train) {
        const std::size_t n = train.size();
        auto check = [n](std::size_t i) {
            if (i >= n) throw DataError("annotation references instance " + std::to_string(i) + " outside the training split");
        };
        // Union-find over equivalence edges.
        std::vector<std::size_t> parent(n);
        std::iota(parent.begin(), parent.end(), std::size_t{0});
        auto find = [&](std::size_t i) {
            while (parent[i] != i) i = parent[i] = parent[parent[i]];
            return i;
        };
        std::vector<bool> linked(n, false);
        for (const auto& e : annotations.equivalences) {
            check(e.first);
            check(e.second);
            if (e.first == e.second) throw DataError("equivalence links an instance to itself");
            linked[e.first] = linked[e.second] = true;
            const std::size_t a = find(e.first), b = find(e.second);
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
        component_.assign(n, kNone);
        std::map<std::size_t, std::size_t> root_to_component;
        for (std::size_t i = 0; i < n; ++i) {
            if (!linked[i]) continue;
            auto [it, inserted] = root_to_component.emplace(find(i), components_.size());
            if (inserted) components_.emplace_back();
            components_[it->second].push_back(i);
            component_[i] = it->second;
        }
        has_distinct_.assign(components_.size(), false);
        for (std::size_t c = 0; c < components_.size(); ++c) {
            const auto& first = train[components_[c].front()].seq;
            for (std::size_t i : components_[c]) {
                if (!(train[i].seq == first)) {
                    has_distinct_[c] = true;
                    break;
                }
            }
        }
        consequences_.assign(n, {});
        for (const auto& e : annotations.entailments) {
            check(e.premise);
            check(e.consequence);
            consequences_[e.premise].push_back(e.consequence);
        }
        membership_.assign(n, kNone);
        for (std::size_t k = 0; k < annotations.memberships.size(); ++k) {
            check(annotations.memberships[k].instance);
            membership_[annotations.memberships[k].instance] = k;
        }
        memberships_ = annotations.memberships;
        entailments_ = annotations.entailments;
    }

    bool has_equivalence_partner(std::size_t i) const {
        return component_[i] != kNone && has_distinct_[component_[i]];
    }

    /// Uniform over the component members with a different sequence.
    template <typename R>
    std::size_t sample_equivalence_partner(std::size_t i, R& rng) const {
        const auto& members = components_[component_[i]];
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        const auto& seq = (*train_)[i].seq;
        while (true) {
            const std::size_t j = members[pick(rng)];
            if (!((*train_)[j].seq == seq)) return j;
        }
    }

    /// Members of i's component that count as its equivalence partners.
    std::vector<std::size_t> equivalence_partners(std::size_t i) const {
        std::vector<std::size_t> out;
        if (component_[i] == kNone) return out;
        for (std::size_t j : components_[component_[i]]) {
            if (!((*train_)[j].seq == (*train_)[i].seq)) out.push_back(j);
        }
        return out;
    }

    const std::vector<std::size_t>& consequences(std::size_t i) const { return consequences_[i]; }

    const std::vector<std::size_t>* memberships(std::size_t i) const {
        return membership_[i] == kNone ? nullptr : &memberships_[membership_[i]].ops;
    }

    const std::vector<std::vector<std::size_t>>& equivalence_components() const { return components_; }
    const std::vector<Entailment>& entailments() const { return entailments_; }
    const std::vector<OpsMembership>& all_memberships() const { return memberships_; }

    bool has_equivalences() const { return !components_.empty(); }
    bool has_entailments() const { return !entailments_.empty(); }
    bool has_memberships() const { return !memberships_.empty(); }

private:
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

    const std::vector<Instance>* train_ = nullptr;
    std::vector<std::size_t> component_;
    std::vector<std::vector<std::size_t>> components_;
    std::vector<bool> has_distinct_;
    std::vector<std::vector<std::size_t>> consequences_;
    std::vector<std::size_t> membership_;
    std::vector<OpsMembership> memberships_;
    std::vector<Entailment> entailments_;
};

// ---------------------------------------------------------------------------
// Batches

struct BatchEntry {
    std::size_t instance = 0;
    OpSequence seq;  // the instance's sequence, or an equivalent substitute
    std::optional<std::size_t> equ_partner;
    std::optional<std::size_t> ent_partner;
    const std::vector<std::size_t>* ops = nullptr;
};

struct Batch {
    std::vector<BatchEntry> entries;
};

struct BatchOptions {
    bool equivalence = false;
    bool entailment = false;
    bool ops = false;
    double augmentation_prob = 0.0;
};

inline BatchOptions batch_options(const PhaseConfig& cfg, const AnnotationIndex& index) {
    BatchOptions o;
    o.equivalence = index.has_equivalences() && (cfg.lambda.equ > 0.0 || cfg.project);
    o.entailment = index.has_entailments() && (cfg.lambda.ent > 0.0 || cfg.project);
    o.ops = index.has_memberships() && (cfg.lambda.ops > 0.0 || cfg.project);
    o.augmentation_prob = index.has_equivalences() ? cfg.augmentation_prob : 0.0;
    return o;
}

/// Instances plus at most one sampled partner per family.
template <typename R>
Batch build_batch(const std::vector<Instance>& train, const AnnotationIndex& index,
                  std::span<const std::size_t> batch_indices, R& rng, const BatchOptions& options) {
    Batch batch;
    batch.entries.reserve(batch_indices.size());
    std::bernoulli_distribution substitute(options.augmentation_prob);
    for (std::size_t i : batch_indices) {
        detail::require(i < train.size(), "build_batch: instance index out of range");
        BatchEntry e;
        e.instance = i;
        e.seq = train[i].seq;
        if (options.augmentation_prob > 0.0 && index.has_equivalence_partner(i) && substitute(rng)) {
            e.seq = train[index.sample_equivalence_partner(i, rng)].seq;
        }
        if (options.equivalence && index.has_equivalence_partner(i)) {
            e.equ_partner = index.sample_equivalence_partner(i, rng);
        }
        if (options.entailment && !index.consequences(i).empty()) {
            const auto& c = index.consequences(i);
            std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
            e.ent_partner = c[pick(rng)];
        }
        if (options.ops) e.ops = index.memberships(i);
        batch.entries.push_back(std::move(e));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Steps and evaluation

struct StepLosses {
    double objective = 0.0;  // batch mean of the combined objective
    double task = 0.0;       // batch mean squared error
    double equ = 0.0;        // sums of regularizer values
    double ent = 0.0;
    double ops = 0.0;
    std::size_t degenerate_entailments = 0;
};

/// Everything a phase 1 step needs besides the batch.
struct Phase1Context {
    const OpVocabulary* vocab = nullptr;
    const std::vector<Instance>* train = nullptr;
    ToyModel model;
    HalfSpaceBank bank;  // undefined unless ops annotations are in use
};

inline void require_finite(double v, const char* what, std::size_t detail_value) {
    if (!std::isfinite(v)) {
        throw NumericalError(std::string(what) + " is not finite (value " + std::to_string(v) + ", at " +
                             std::to_string(detail_value) + ")");
    }
}

/// Forward over the batch, regularizers on raw embeddings, projections feeding
/// the head, backward of the combined objective, one optimizer step.
inline StepLosses phase1_step(const Batch& batch, Phase1Context& ctx, optim::AdaDelta& optimizer,
                              const PhaseConfig& cfg) {
    detail::require(!batch.entries.empty(), "phase1_step: empty batch");
    const auto& train = *ctx.train;
    const auto& vocab = *ctx.vocab;
    StepLosses losses;
    Tape tape;
    RegularizerTerms terms;
    std::vector<Tensor> task_terms;
    task_terms.reserve(batch.entries.size());
    for (const auto& e : batch.entries) {
        const Instance& inst = train[e.instance];
        const Tensor x = ctx.model.encode(tape, token_ids(e.seq, vocab).span());
        Tensor projected = x;
        if (e.equ_partner) {
            const Tensor other = ctx.model.encode(tape, token_ids(train[*e.equ_partner].seq, vocab).span());
            if (cfg.lambda.equ > 0.0) {
                terms.equ.push_back(reg_equivalence(tape, x, other));
                losses.equ += terms.equ.back().item();
            }
            if (cfg.project) projected = project_equivalence(tape, projected, other).first;
        }
        if (e.ent_partner) {
            const Tensor consequence = ctx.model.encode(tape, token_ids(train[*e.ent_partner].seq, vocab).span());
            if (cfg.lambda.ent > 0.0) {
                terms.ent.push_back(reg_entailment(tape, x, consequence));
                losses.ent += terms.ent.back().item();
            }
            if (cfg.project) {
                auto pair = project_entailment(tape, projected, consequence, cfg.projection.eps_norm);
                losses.degenerate_entailments += pair.degenerate ? 1 : 0;
                projected = pair.first;
            }
        }
        if (e.ops) {
            if (cfg.lambda.ops > 0.0) {
                terms.ops.push_back(reg_ops(tape, x, *e.ops, ctx.bank));
                losses.ops += terms.ops.back().item();
            }
            if (cfg.project) projected = project_ops(tape, projected, *e.ops, ctx.bank, cfg.projection);
        }
        const Tensor prediction = ctx.model.predict(tape, projected, inst.digit);
        task_terms.push_back(square(tape, sub(tape, prediction, Tensor::scalar(static_cast<double>(inst.target)))));
    }
    const Tensor task = add_all(tape, task_terms);
    const Tensor objective = combined_objective(tape, task, terms, cfg.lambda);
    const double inv = 1.0 / static_cast<double>(batch.entries.size());
    const Tensor loss = scale(tape, objective, inv);
    losses.objective = loss.item();
    losses.task = task.item() * inv;
    require_finite(losses.objective, "phase 1 objective", batch.entries.front().instance);
    tape.backward(loss);
    optimizer.step();
    optimizer.zero_grad();
    return losses;
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::size_t count = 0;
};

/// Correct when |prediction - target| < 0.5. Raw embeddings, no projection.
inline bool prediction_correct(double prediction, double target) { return std::abs(prediction - target) < 0.5; }

inline EvalResult evaluate(const ToyModel& model, std::span<const Instance> split, const OpVocabulary& vocab) {
    detail::require(!split.empty(), "evaluate: empty split");
    Tape tape;
    tape.set_recording(false);
    std::size_t correct = 0;
    double loss = 0.0;
    // Embeddings depend on the sequence only; reuse them across digits.
    std::map<OpSequence, Tensor> cache;
    for (const Instance& inst : split) {
        auto it = cache.find(inst.seq);
        if (it == cache.end()) it = cache.emplace(inst.seq, model.encode(tape, token_ids(inst.seq, vocab).span())).first;
        const double prediction = model.predict(tape, it->second, inst.digit).item();
        const double target = static_cast<double>(inst.target);
        correct += prediction_correct(prediction, target) ? 1 : 0;
        loss += (prediction - target) * (prediction - target);
    }
    const double n = static_cast<double>(split.size());
    return {static_cast<double>(correct) / n, loss / n, split.size()};
}

/// Raw embedding x of a sequence, as plain values.
inline std::vector<double> embed(const ToyModel& model, const OpSequence& seq, const OpVocabulary& vocab) {
    Tape tape;
    tape.set_recording(false);
    return model.encode(tape, token_ids(seq, vocab).span()).values();
}

// ---------------------------------------------------------------------------
// Distillation targets

/// Frozen projected embeddings keyed by training-instance index.
class DistillTargets {
public:
    DistillTargets() = default;
    explicit DistillTargets(std::map<std::size_t, std::vector<double>> targets) : targets_(std::move(targets)) {}

    std::size_t size() const { return targets_.size(); }
    bool empty() const { return targets_.empty(); }
    bool contains(std::size_t i) const { return targets_.count(i) != 0; }
    const std::vector<double>& at(std::size_t i) const { return targets_.at(i); }
    const std::map<std::size_t, std::vector<double>>& all() const { return targets_; }

    std::vector<std::size_t> instances() const {
        std::vector<std::size_t> out;
        out.reserve(targets_.size());
        for (const auto& [i, x] : targets_) out.push_back(i);
        return out;
    }

    /// FNV-1a over indices and value bits.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](std::uint64_t v) {
            for (int b = 0; b < 8; ++b) {
                h ^= (v >> (8 * b)) & 0xffU;
                h *= 1099511628211ULL;
            }
        };
        for (const auto& [i, x] : targets_) {
            mix(i);
            for (double v : x) mix(std::bit_cast<std::uint64_t>(v));
        }
        return h;
    }

private:
    std::map<std::size_t, std::vector<double>> targets_;
};

/// Teacher embeddings of the annotated instances pushed through the
/// projections: equivalence components collapse to their mean, then each
/// entailment pair is rescaled in annotation order, then ops targets descend
/// on the ops loss.
inline DistillTargets compute_targets(const ToyModel& teacher, const HalfSpaceBank& bank, const OpVocabulary& vocab,
                                      const std::vector<Instance>& train, const AnnotationIndex& index,
                                      const BatchOptions& families, const PhaseConfig& cfg) {
    std::map<OpSequence, std::vector<double>> cache;
    auto teacher_x = [&](std::size_t i) -> const std::vector<double>& {
        auto it = cache.find(train[i].seq);
        if (it == cache.end()) it = cache.emplace(train[i].seq, embed(teacher, train[i].seq, vocab)).first;
        return it->second;
    };
    std::map<std::size_t, std::vector<double>> targets;
    auto current = [&](std::size_t i) -> std::vector<double>& {
        auto it = targets.find(i);
        if (it == targets.end()) it = targets.emplace(i, teacher_x(i)).first;
        return it->second;
    };
    if (families.equivalence) {
        for (const auto& members : index.equivalence_components()) {
            std::vector<double> mean(teacher.dims().dim, 0.0);
            for (std::size_t i : members) {
                const auto& x = teacher_x(i);
                for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += x[j];
            }
            for (double& v : mean) v /= static_cast<double>(members.size());
            for (std::size_t i : members) targets[i] = mean;
        }
    }
    if (families.entailment) {
        Tape tape;
        tape.set_recording(false);
        for (const auto& e : index.entailments()) {
            const Tensor p = Tensor::vector(current(e.premise));
            const Tensor c = Tensor::vector(current(e.consequence));
            const auto pair = project_entailment(tape, p, c, cfg.projection.eps_norm);
            current(e.premise) = pair.first.values();
            current(e.consequence) = pair.second.values();
        }
    }
    if (families.ops) {
        for (const auto& m : index.all_memberships()) {
            auto& x = current(m.instance);
            x = descend_ops(x, m.ops, bank, cfg.projection);
        }
    }
    if (cfg.distill_unannotated) {
        for (std::size_t i = 0; i < train.size(); ++i) current(i);
    }
    return DistillTargets(std::move(targets));
}

// ---------------------------------------------------------------------------
// Phases

struct EpochRecord {
    std::string phase;  // "phase1" or "phase2"
    int epoch = 0;      // 1-based within the phase
    double train_loss = 0.0;
    double train_task_loss = 0.0;  // phase 1 only
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainingData {
    const OpVocabulary* vocab = nullptr;
    const std::vector<Instance>* train = nullptr;
    const std::vector<Instance>* val = nullptr;
    AnnotationIndex index;
    std::ostream* log = nullptr;  // one line per epoch when set
};

inline void log_epoch(std::ostream* log, const EpochRecord& e) {
    if (log == nullptr) return;
    *log << e.phase << " epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss
         << " val_acc " << e.val_acc << std::endl;
}

struct Phase1Result {
    ToyModel model;
    HalfSpaceBank bank;
    DistillTargets targets;
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val_acc = 0.0;
    bool early_stopped = false;
    std::size_t degenerate_entailments = 0;
};

inline nn::ModelDims model_dims(const OpVocabulary& vocab) { return {vocab.size(), arith::kDigitCount, 64}; }

/// Trains until early stopping fires or max_epochs, restores the best epoch
/// and, when projections are enabled, computes the distillation targets.
/// `on_step` (optional) observes the model after every optimizer step.
template <typename StepObserver>
Phase1Result phase1_run(const TrainingData& data, const PhaseConfig& cfg, std::uint64_t seed, StepObserver&& on_step) {
    cfg.validate();
    if (data.train == nullptr || data.train->empty()) throw ConfigError("empty training set");
    detail::require(data.val != nullptr && !data.val->empty(), "phase1_run: empty validation split");
    const auto& train = *data.train;
    const BatchOptions families = batch_options(cfg, data.index);

    Rng init_rng = make_rng(seed, Stream::init);
    Phase1Context ctx{data.vocab, data.train, ToyModel(model_dims(*data.vocab), init_rng), {}};
    std::vector<Tensor> params = ctx.model.parameters();
    if (families.ops) {
        Rng bank_rng = make_rng(seed, Stream::bank);
        ctx.bank = HalfSpaceBank(data.vocab->ids(), ctx.model.dims().dim, bank_rng);
        params.push_back(ctx.bank.w());
        params.push_back(ctx.bank.b());
    }
    optim::AdaDelta optimizer(params, cfg.adadelta_rho, cfg.adadelta_eps);
    optim::EarlyStopper stopper(cfg.patience);

    Rng shuffle_rng = make_rng(seed, Stream::shuffle);
    Rng partner_rng = make_rng(seed, Stream::partners);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    Phase1Result result;
    ToyModel best = ctx.model.clone();
    HalfSpaceBank best_bank = families.ops ? ctx.bank.clone() : HalfSpaceBank{};
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double objective = 0.0, task = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const Batch batch = build_batch(train, data.index, std::span(order).subspan(start, end - start),
                                            partner_rng, families);
            const StepLosses l = phase1_step(batch, ctx, optimizer, cfg);
            objective += l.objective;
            task += l.task;
            result.degenerate_entailments += l.degenerate_entailments;
            ++batches;
            on_step(ctx.model);
        }
        const EvalResult val = evaluate(ctx.model, *data.val, *data.vocab);
        result.epochs.push_back({"phase1", epoch, objective / static_cast<double>(batches),
                                 task / static_cast<double>(batches), val.mean_loss, val.accuracy});
        log_epoch(data.log, result.epochs.back());
        const bool stop = stopper.update(val.accuracy);
        if (stopper.improved()) {
            best.assign(ctx.model);
            if (families.ops) best_bank = ctx.bank.clone();
            result.best_epoch = epoch;
            result.best_val_acc = val.accuracy;
        }
        if (stop) {
            result.early_stopped = true;
            break;
        }
    }
    result.model = std::move(best);
    result.bank = std::move(best_bank);
    if (cfg.project) {
        result.targets = compute_targets(result.model, result.bank, *data.vocab, train, data.index, families, cfg);
    }
    return result;
}

inline Phase1Result phase1_run(const TrainingData& data, const PhaseConfig& cfg, std::uint64_t seed) {
    return phase1_run(data, cfg, seed, [](const ToyModel&) {});
}

struct Phase2Result {
    ToyModel student;
    std::vector<EpochRecord> epochs;
    double initial_loss = 0.0;  // mean ||x' - x||^2 over targets before training
    double final_loss = 0.0;    // same, after training
    bool converged = false;
};

/// Mean squared distance between the model's embeddings and the targets.
inline double distillation_loss(const ToyModel& model, const DistillTargets& targets, const OpVocabulary& vocab,
                                const std::vector<Instance>& train) {
    std::map<OpSequence, std::vector<double>> cache;
    double total = 0.0;
    for (const auto& [i, target] : targets.all()) {
        auto it = cache.find(train[i].seq);
        if (it == cache.end()) it = cache.emplace(train[i].seq, embed(model, train[i].seq, vocab)).first;
        for (std::size_t j = 0; j < target.size(); ++j) {
            const double d = target[j] - it->second[j];
            total += d * d;
        }
    }
    return total / static_cast<double>(targets.size());
}

/// Retrains only the encoder (operation embeddings + GRU) to regress onto the
/// frozen targets. Stops after `distill_patience` consecutive epochs with
/// relative improvement below `distill_rel_tol`, or at distill_max_epochs.
inline Phase2Result phase2_distill(const ToyModel& teacher, const DistillTargets& targets, const TrainingData& data,
                                   const PhaseConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (targets.empty()) throw ConfigError("distillation requires at least one annotated target");
    const auto& train = *data.train;
    const auto& vocab = *data.vocab;
    Phase2Result result;
    result.student = teacher.clone();
    if (cfg.student_init == StudentInit::from_scratch) {
        Rng rng = make_rng(seed, Stream::student);
        result.student.reinit_encoder(rng);
    }
    std::vector<Tensor> params;
    for (auto& [name, t] : result.student.encoder_parameters()) params.push_back(t);
    optim::AdaDelta optimizer(params, cfg.adadelta_rho, cfg.adadelta_eps);

    result.initial_loss = distillation_loss(result.student, targets, vocab, train);
    std::vector<std::size_t> order = targets.instances();
    Rng shuffle_rng = make_rng(seed, Stream::distill_shuffle);
    double previous = std::numeric_limits<double>::infinity();
    int stalls = 0;
    for (int epoch = 1; epoch <= cfg.distill_max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            Tape tape;
            std::vector<Tensor> terms;
            terms.reserve(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                const Tensor x = result.student.encode(tape, token_ids(train[i].seq, vocab).span());
                terms.push_back(reg_equivalence(tape, x, Tensor::vector(targets.at(i))));
            }
            const Tensor sum_loss = add_all(tape, terms);
            total += sum_loss.item();
            const Tensor loss = scale(tape, sum_loss, 1.0 / static_cast<double>(end - start));
            require_finite(loss.item(), "distillation loss", order[start]);
            tape.backward(loss);
            optimizer.step();
            optimizer.zero_grad();
        }
        const double mean_loss = total / static_cast<double>(order.size());
        const EvalResult val = evaluate(result.student, *data.val, vocab);
        result.epochs.push_back({"phase2", epoch, mean_loss, 0.0, val.mean_loss, val.accuracy});
        log_epoch(data.log, result.epochs.back());
        const double improvement = previous > 0.0 && std::isfinite(previous) ? (previous - mean_loss) / previous
                                   : std::isfinite(previous)                  ? 0.0
                                                                              : 1.0;
        stalls = improvement < cfg.distill_rel_tol ? stalls + 1 : 0;
        previous = mean_loss;
        if (stalls >= cfg.distill_patience) {
            result.converged = true;
            break;
        }
    }
    result.final_loss = distillation_loss(result.student, targets, vocab, train);
    return result;
}

} // namespace hardcon::training
