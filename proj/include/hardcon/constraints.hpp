#pragma once

// Constraint families on learned embeddings: equivalence (x1 = x2), entailment
// (||x_premise||_1 >= ||x_consequence||_1) and operation-set membership
// (intersection of learned half-spaces). Each family has a soft regularizer, a
// projection onto its feasible set, and a feasibility check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/error.hpp"

namespace hardcon {

// ---------------------------------------------------------------------------
// Annotations

struct Equivalence {
    std::size_t first = 0;
    std::size_t second = 0;

    // Symmetric: (i, j) and (j, i) are the same annotation.
    friend bool operator==(const Equivalence& a, const Equivalence& b) {
        return (a.first == b.first && a.second == b.second) ||
               (a.first == b.second && a.second == b.first);
    }
};

struct Entailment {
    std::size_t premise = 0;
    std::size_t consequence = 0;

    friend bool operator==(const Entailment&, const Entailment&) = default;
};

struct OpsMembership {
    std::size_t instance = 0;
    std::vector<std::size_t> ops;  // sorted, unique operation ids

    friend bool operator==(const OpsMembership&, const OpsMembership&) = default;
};

using ConstraintAnnotation = std::variant<Equivalence, Entailment, OpsMembership>;

/// Annotations grouped by family, in file order.
struct AnnotationSet {
    std::vector<Equivalence> equivalences;
    std::vector<Entailment> entailments;
    std::vector<OpsMembership> memberships;

    bool empty() const { return equivalences.empty() && entailments.empty() && memberships.empty(); }
    std::size_t size() const { return equivalences.size() + entailments.size() + memberships.size(); }

    void add(const ConstraintAnnotation& a) {
        std::visit(
            [this](const auto& v) {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, Equivalence>) {
                    equivalences.push_back(v);
                } else if constexpr (std::is_same_v<T, Entailment>) {
                    entailments.push_back(v);
                } else {
                    memberships.push_back(v);
                }
            },
            a);
    }

    /// Keeps only annotations whose instances are all in `keep` (old index ->
    /// new index), remapping indices.
    AnnotationSet remapped(const std::unordered_map<std::size_t, std::size_t>& keep) const {
        AnnotationSet out;
        auto find = [&](std::size_t i, std::size_t& j) {
            auto it = keep.find(i);
            if (it == keep.end()) return false;
            j = it->second;
            return true;
        };
        for (const auto& e : equivalences) {
            Equivalence r;
            if (find(e.first, r.first) && find(e.second, r.second)) out.equivalences.push_back(r);
        }
        for (const auto& e : entailments) {
            Entailment r;
            if (find(e.premise, r.premise) && find(e.consequence, r.consequence)) out.entailments.push_back(r);
        }
        for (const auto& m : memberships) {
            OpsMembership r{0, m.ops};
            if (find(m.instance, r.instance)) out.memberships.push_back(std::move(r));
        }
        return out;
    }
};

// Text format, one record per line:
//   EQU i j
//   ENT premise consequence
//   OPS i k1,k2,...      (op list may be empty)
// Blank lines and lines starting with '#' are ignored.

inline void write_annotations(std::ostream& os, const AnnotationSet& set) {
    for (const auto& e : set.equivalences) os << "EQU " << e.first << ' ' << e.second << '\n';
    for (const auto& e : set.entailments) os << "ENT " << e.premise << ' ' << e.consequence << '\n';
    for (const auto& m : set.memberships) {
        os << "OPS " << m.instance;
        for (std::size_t k = 0; k < m.ops.size(); ++k) os << (k ? ',' : ' ') << m.ops[k];
        os << '\n';
    }
}

inline AnnotationSet read_annotations(std::istream& is) {
    AnnotationSet set;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) {
        throw DataError("annotation line " + std::to_string(line_no) + ": " + why + ": '" + line + "'");
    };
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "EQU" || tag == "ENT") {
            long long i = -1, j = -1;
            if (!(ls >> i >> j) || i < 0 || j < 0) fail("expected two non-negative indices");
            std::string rest;
            if (ls >> rest) fail("trailing fields");
            if (tag == "EQU") {
                if (i == j) fail("equivalence links an instance to itself");
                set.equivalences.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
            } else {
                set.entailments.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
            }
        } else if (tag == "OPS") {
            long long i = -1;
            if (!(ls >> i) || i < 0) fail("expected an instance index");
            OpsMembership m{static_cast<std::size_t>(i), {}};
            std::string list;
            if (ls >> list) {
                std::istringstream ids(list);
                std::string id;
                while (std::getline(ids, id, ',')) {
                    if (id.empty() || !std::all_of(id.begin(), id.end(), ::isdigit)) fail("bad op id list");
                    m.ops.push_back(std::stoull(id));
                }
                std::string rest;
                if (ls >> rest) fail("trailing fields");
            }
            std::sort(m.ops.begin(), m.ops.end());
            m.ops.erase(std::unique(m.ops.begin(), m.ops.end()), m.ops.end());
            set.memberships.push_back(std::move(m));
        } else {
            fail("unknown record tag");
        }
    }
    return set;
}

inline AnnotationSet load_annotations(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open annotation file " + path);
    return read_annotations(is);
}

inline void save_annotations(const std::string& path, const AnnotationSet& set) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write annotation file " + path);
    write_annotations(os, set);
    if (!os) throw DataError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Learned half-spaces {x : w_k x + b_k >= 0}, one per vocabulary operation.

class HalfSpaceBank {
public:
    HalfSpaceBank() = default;

    /// Uniform(-1/sqrt(dim), 1/sqrt(dim)) normals, zero offsets.
    template <typename Rng>
    HalfSpaceBank(std::vector<std::size_t> vocab, std::size_t dim, Rng& rng) : vocab_(std::move(vocab)) {
        const double s = 1.0 / std::sqrt(static_cast<double>(dim));
        std::uniform_real_distribution<double> u(-s, s);
        std::vector<double> w(vocab_.size() * dim);
        for (double& v : w) v = u(rng);
        w_ = Tensor::from(std::move(w), {vocab_.size(), dim}, true);
        b_ = Tensor::zeros({vocab_.size()}, true);
        index_rows();
    }

    HalfSpaceBank(std::vector<std::size_t> vocab, Tensor w, Tensor b)
        : vocab_(std::move(vocab)), w_(std::move(w)), b_(std::move(b)) {
        detail::require(w_.shape().size() == 2 && w_.shape()[0] == vocab_.size() && b_.size() == vocab_.size(),
                        "HalfSpaceBank: one (w_k, b_k) per vocabulary operation required");
        index_rows();
    }

    std::size_t size() const { return vocab_.size(); }
    std::size_t dim() const { return w_.shape()[1]; }
    const std::vector<std::size_t>& vocab() const { return vocab_; }
    const Tensor& w() const { return w_; }
    const Tensor& b() const { return b_; }
    Tensor& w() { return w_; }
    Tensor& b() { return b_; }
    bool defined() const { return w_.defined(); }

    std::size_t row_of(std::size_t op) const {
        auto it = rows_.find(op);
        if (it == rows_.end()) throw VocabularyError("operation id " + std::to_string(op) + " not in vocabulary");
        return it->second;
    }

    /// 0/1 label per row: 1 when the row's operation is a member.
    std::vector<double> labels(const std::vector<std::size_t>& members) const {
        std::vector<double> y(size(), 0.0);
        for (std::size_t op : members) y[row_of(op)] = 1.0;
        return y;
    }

    HalfSpaceBank clone() const { return HalfSpaceBank(vocab_, w_.clone(), b_.clone()); }

private:
    void index_rows() {
        rows_.clear();
        for (std::size_t k = 0; k < vocab_.size(); ++k) rows_.emplace(vocab_[k], k);
    }

    std::vector<std::size_t> vocab_;
    Tensor w_;
    Tensor b_;
    std::unordered_map<std::size_t, std::size_t> rows_;
};

struct ProjectionConfig {
    int p = 1;              // norm order of the entailment constraint
    int steps = 10;         // descent steps of the ops projection
    double step_size = 0.01;
    double eps_norm = 1e-8; // entailment projection skipped below this norm

    void validate() const {
        if (p != 1) throw ConfigError("only the L1 norm (p = 1) is supported for entailment");
        if (steps < 1) throw ConfigError("projection steps must be >= 1");
        if (!(step_size > 0.0)) throw ConfigError("projection step size must be > 0");
        if (!(eps_norm >= 0.0)) throw ConfigError("eps_norm must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Soft regularizers

namespace detail {

inline void require_same_dim(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(what) + ": dimension mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
}

} // namespace detail

/// ||x2 - x1||_2^2
inline Tensor reg_equivalence(Tape& tape, const Tensor& x1, const Tensor& x2) {
    detail::require_same_dim(x1, x2, "reg_equivalence");
    return l2_norm_squared(tape, sub(tape, x2, x1));
}

/// max(0, ||x_consequence||_1 - ||x_premise||_1)
inline Tensor reg_entailment(Tape& tape, const Tensor& premise, const Tensor& consequence) {
    detail::require_same_dim(premise, consequence, "reg_entailment");
    return relu(tape, sub(tape, l1_norm(tape, consequence), l1_norm(tape, premise)));
}

/// Binary cross-entropy of sigmoid(w_k x + b_k) against membership of o_k,
/// summed over the whole vocabulary.
inline Tensor reg_ops(Tape& tape, const Tensor& x, const std::vector<std::size_t>& members,
                      const HalfSpaceBank& bank) {
    detail::require(x.shape().size() == 1 && x.size() == bank.dim(), "reg_ops: embedding/bank dimension mismatch");
    const std::vector<double> y = bank.labels(members);
    return bce_with_logits(tape, affine(tape, bank.w(), x, bank.b()), y);
}

/// Value of reg_ops on plain vectors.
inline double ops_loss(std::span<const double> x, std::span<const double> labels, const HalfSpaceBank& bank) {
    const std::size_t d = bank.dim();
    const auto w = bank.w().data();
    const auto b = bank.b().data();
    double loss = 0.0;
    for (std::size_t k = 0; k < bank.size(); ++k) {
        double z = b[k];
        for (std::size_t j = 0; j < d; ++j) z += w[k * d + j] * x[j];
        loss += labels[k] > 0.5 ? detail::softplus(-z) : detail::softplus(z);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Projections

struct ProjectedPair {
    Tensor first;
    Tensor second;
    bool degenerate = false;  // entailment only: pair passed through unmodified
};

/// Both outputs are the same tensor holding (x1 + x2) / 2.
inline ProjectedPair project_equivalence(Tape& tape, const Tensor& x1, const Tensor& x2) {
    detail::require_same_dim(x1, x2, "project_equivalence");
    Tensor m = scale(tape, add(tape, x1, x2), 0.5);
    return {m, m, false};
}

/// Rescales both vectors to the mean of their L1 norms. Directions are kept.
inline ProjectedPair project_entailment(Tape& tape, const Tensor& premise, const Tensor& consequence,
                                        double eps_norm = 1e-8) {
    detail::require_same_dim(premise, consequence, "project_entailment");
    Tensor n1 = l1_norm(tape, premise);
    Tensor n2 = l1_norm(tape, consequence);
    if (n1.item() < eps_norm || n2.item() < eps_norm) {
        return {premise, consequence, true};
    }
    Tensor target = scale(tape, add(tape, n1, n2), 0.5);
    Tensor p = scale_by(tape, premise, div(tape, target, n1));
    Tensor c = scale_by(tape, consequence, div(tape, target, n2));
    return {p, c, false};
}

/// `steps` gradient-descent steps on reg_ops from x with the bank held constant.
inline std::vector<double> descend_ops(std::span<const double> x, const std::vector<std::size_t>& members,
                                       const HalfSpaceBank& bank, const ProjectionConfig& cfg) {
    detail::require(x.size() == bank.dim(), "project_ops: embedding/bank dimension mismatch");
    const std::vector<double> y = bank.labels(members);
    const std::size_t d = bank.dim();
    const auto w = bank.w().data();
    const auto b = bank.b().data();
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> grad(d);
    for (int t = 0; t < cfg.steps; ++t) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t k = 0; k < bank.size(); ++k) {
            const double* wk = w.data() + k * d;
            double z = b[k];
            for (std::size_t j = 0; j < d; ++j) z += wk[j] * cur[j];
            const double r = detail::sigmoid(z) - y[k];
            for (std::size_t j = 0; j < d; ++j) grad[j] += r * wk[j];
        }
        for (std::size_t j = 0; j < d; ++j) cur[j] -= cfg.step_size * grad[j];
    }
    return cur;
}

/// Ops projection inside the network: the gradient w.r.t. x is approximated by
/// the identity.
inline Tensor project_ops(Tape& tape, const Tensor& x, const std::vector<std::size_t>& members,
                          const HalfSpaceBank& bank, const ProjectionConfig& cfg) {
    return straight_through(tape, x, descend_ops(x.data(), members, bank, cfg));
}

// ---------------------------------------------------------------------------
// Feasibility

inline bool satisfies_equivalence(std::span<const double> x1, std::span<const double> x2) {
    return std::equal(x1.begin(), x1.end(), x2.begin(), x2.end());
}

inline double l1(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += std::abs(v);
    return s;
}

inline bool satisfies_entailment(std::span<const double> premise, std::span<const double> consequence,
                                 double tol = 0.0) {
    return l1(premise) + tol >= l1(consequence);
}

/// w_k x + b_k >= 0 for every member, < 0 for every non-member.
inline bool satisfies_ops(std::span<const double> x, const std::vector<std::size_t>& members,
                          const HalfSpaceBank& bank) {
    const std::vector<double> y = bank.labels(members);
    const std::size_t d = bank.dim();
    for (std::size_t k = 0; k < bank.size(); ++k) {
        double z = bank.b().data()[k];
        for (std::size_t j = 0; j < d; ++j) z += bank.w().data()[k * d + j] * x[j];
        if ((y[k] > 0.5) != (z >= 0.0)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Combined objective

struct LambdaWeights {
    double equ = 0.0;
    double ent = 0.0;
    double ops = 0.0;

    void validate() const {
        if (!(equ >= 0.0) || !(ent >= 0.0) || !(ops >= 0.0)) {
            throw ConfigError("regularizer weights must be non-negative");
        }
    }
    bool all_zero() const { return equ == 0.0 && ent == 0.0 && ops == 0.0; }
};

/// Per-batch regularizer terms; only instances with a partner/annotation contribute.
struct RegularizerTerms {
    std::vector<Tensor> equ;
    std::vector<Tensor> ent;
    std::vector<Tensor> ops;
};

/// task + lambda_equ * sum(equ) + lambda_ent * sum(ent) + lambda_ops * sum(ops).
/// Families with zero weight or no terms are skipped, so the result is the
/// task loss itself when nothing contributes.
inline Tensor combined_objective(Tape& tape, const Tensor& task_loss, const RegularizerTerms& terms,
                                 const LambdaWeights& lambda) {
    lambda.validate();
    Tensor total = task_loss;
    auto include = [&](const std::vector<Tensor>& family, double weight) {
        if (weight == 0.0 || family.empty()) return;
        total = add(tape, total, scale(tape, add_all(tape, family), weight));
    };
    include(terms.equ, lambda.equ);
    include(terms.ent, lambda.ent);
    include(terms.ops, lambda.ops);
    return total;
}

} // namespace hardcon
