#pragma once

// Sequential-arithmetic benchmark: a digit in [-9, 9] goes through 1-3
// operations (add or multiply by an integer operand), applied left to right
// without precedence. Every sequence realizes an exact affine map x -> a*x + b,
// which serves as the equivalence oracle.

#include <algorithm>
#include <array>
#include <charconv>
#include <compare>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hardcon/constraints.hpp"
#include "hardcon/error.hpp"

namespace hardcon::arith {

enum class OpKind : std::uint8_t { add, mul };

struct OpToken {
    OpKind kind = OpKind::add;
    int operand = 0;

    friend auto operator<=>(const OpToken&, const OpToken&) = default;
};

/// Renders "+c" for non-negative additions, "-c" for negative additions and
/// "*c" for multiplications (c may be negative: "*-3").
inline std::string to_string(const OpToken& t) {
    if (t.kind == OpKind::mul) return "*" + std::to_string(t.operand);
    return (t.operand < 0 ? "-" : "+") + std::to_string(std::abs(t.operand));
}

inline OpToken parse_token(std::string_view s) {
    auto bad = [&] { return DataError("bad operation token '" + std::string(s) + "'"); };
    if (s.size() < 2) throw bad();
    OpToken t;
    std::string_view digits = s.substr(1);
    int value = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
    if (ec != std::errc() || ptr != digits.data() + digits.size()) throw bad();
    switch (s[0]) {
    case '+':
        if (value < 0) throw bad();
        t = {OpKind::add, value};
        break;
    case '-':
        if (value <= 0) throw bad();
        t = {OpKind::add, -value};
        break;
    case '*': t = {OpKind::mul, value}; break;
    default: throw bad();
    }
    return t;
}

inline constexpr std::size_t kMaxOps = 3;

/// 1-3 operations, stored inline.
class OpSequence {
public:
    OpSequence() = default;
    OpSequence(std::initializer_list<OpToken> ops) {
        if (ops.size() < 1 || ops.size() > kMaxOps) throw ContractViolation("sequence length must be in [1, 3]");
        for (const auto& t : ops) ops_[size_++] = t;
    }

    static OpSequence from(std::span<const OpToken> ops) {
        if (ops.size() < 1 || ops.size() > kMaxOps) throw ContractViolation("sequence length must be in [1, 3]");
        OpSequence s;
        for (const auto& t : ops) s.ops_[s.size_++] = t;
        return s;
    }

    std::size_t size() const { return size_; }
    const OpToken& operator[](std::size_t i) const { return ops_[i]; }
    const OpToken* begin() const { return ops_.data(); }
    const OpToken* end() const { return ops_.data() + size_; }

    friend bool operator==(const OpSequence& a, const OpSequence& b) {
        return std::equal(a.begin(), a.end(), b.begin(), b.end());
    }
    friend auto operator<=>(const OpSequence& a, const OpSequence& b) {
        return std::lexicographical_compare_three_way(a.begin(), a.end(), b.begin(), b.end());
    }

private:
    std::array<OpToken, kMaxOps> ops_{};
    std::uint8_t size_ = 0;
};

inline std::string to_string(const OpSequence& seq) {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) out += (i ? " " : "") + to_string(seq[i]);
    return out;
}

/// Operations with operands in [min_operand, max_operand]: all additions in
/// operand order, then all multiplications. Ids index this order.
class OpVocabulary {
public:
    explicit OpVocabulary(int min_operand = -9, int max_operand = 9) : min_(min_operand), max_(max_operand) {
        if (min_ > max_) throw ConfigError("operand range is empty");
    }

    int min_operand() const { return min_; }
    int max_operand() const { return max_; }
    std::size_t operands() const { return static_cast<std::size_t>(max_ - min_ + 1); }
    std::size_t size() const { return 2 * operands(); }

    bool contains(const OpToken& t) const { return t.operand >= min_ && t.operand <= max_; }

    std::size_t id(const OpToken& t) const {
        if (!contains(t)) throw VocabularyError("operation " + to_string(t) + " not in vocabulary");
        const std::size_t offset = static_cast<std::size_t>(t.operand - min_);
        return t.kind == OpKind::add ? offset : operands() + offset;
    }

    OpToken token(std::size_t id) const {
        if (id >= size()) throw VocabularyError("operation id " + std::to_string(id) + " out of range");
        const bool mul = id >= operands();
        const int operand = min_ + static_cast<int>(mul ? id - operands() : id);
        return {mul ? OpKind::mul : OpKind::add, operand};
    }

    std::vector<std::size_t> ids() const {
        std::vector<std::size_t> v(size());
        std::iota(v.begin(), v.end(), std::size_t{0});
        return v;
    }

private:
    int min_;
    int max_;
};

/// x -> a*x + b
struct AffineMap {
    std::int64_t a = 1;
    std::int64_t b = 0;

    friend auto operator<=>(const AffineMap&, const AffineMap&) = default;
};

inline constexpr int kMinDigit = -9;
inline constexpr int kMaxDigit = 9;
inline constexpr std::size_t kDigitCount = kMaxDigit - kMinDigit + 1;

/// Left-to-right fold of the operations over the digit.
inline std::int64_t eval_sequence(std::int64_t digit, const OpSequence& seq) {
    std::int64_t v = digit;
    for (const auto& t : seq) v = t.kind == OpKind::add ? v + t.operand : v * t.operand;
    return v;
}

/// Composition from the identity (1, 0): add c maps (a, b) -> (a, b + c);
/// multiply by c maps (a, b) -> (c*a, c*b).
inline AffineMap canonical_affine(const OpSequence& seq) {
    AffineMap m;
    for (const auto& t : seq) {
        if (t.kind == OpKind::add) {
            m.b += t.operand;
        } else {
            m.a *= t.operand;
            m.b *= t.operand;
        }
    }
    return m;
}

inline bool equivalent(const OpSequence& s1, const OpSequence& s2) {
    return canonical_affine(s1) == canonical_affine(s2);
}

struct Instance {
    int digit = 0;
    OpSequence seq;
    std::int64_t target = 0;

    friend bool operator==(const Instance&, const Instance&) = default;
};

/// All sequences of length 1..3 over the vocabulary, by length then
/// lexicographically by token id.
inline std::vector<OpSequence> enumerate_sequences(const OpVocabulary& vocab) {
    const std::size_t n = vocab.size();
    std::vector<OpSequence> out;
    out.reserve(n + n * n + n * n * n);
    std::array<OpToken, kMaxOps> buf{};
    for (std::size_t len = 1; len <= kMaxOps; ++len) {
        std::vector<std::size_t> idx(len, 0);
        while (true) {
            for (std::size_t k = 0; k < len; ++k) buf[k] = vocab.token(idx[k]);
            out.push_back(OpSequence::from(std::span<const OpToken>(buf.data(), len)));
            std::size_t k = len;
            while (k > 0 && ++idx[k - 1] == n) idx[--k] = 0;
            if (k == 0) break;
        }
    }
    return out;
}

struct SplitSizes {
    std::size_t val = 20000;
    std::size_t test = 20000;
};

struct Dataset {
    std::vector<Instance> train;
    std::vector<Instance> val;
    std::vector<Instance> test;

    std::size_t total() const { return train.size() + val.size() + test.size(); }
};

/// Every (digit, sequence) instance, then a uniformly random disjoint val/test
/// carve-out; each split keeps the canonical enumeration order.
inline Dataset generate_dataset(const OpVocabulary& vocab, std::uint64_t seed, SplitSizes sizes = {}) {
    const std::vector<OpSequence> seqs = enumerate_sequences(vocab);
    std::vector<Instance> all;
    all.reserve(seqs.size() * kDigitCount);
    for (const auto& s : seqs) {
        for (int d = kMinDigit; d <= kMaxDigit; ++d) all.push_back({d, s, eval_sequence(d, s)});
    }
    if (sizes.val + sizes.test >= all.size()) throw ConfigError("validation + test sizes exceed the instance count");
    std::vector<std::size_t> perm(all.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::uint8_t> split(all.size(), 0);
    for (std::size_t i = 0; i < sizes.val; ++i) split[perm[i]] = 1;
    for (std::size_t i = sizes.val; i < sizes.val + sizes.test; ++i) split[perm[i]] = 2;
    Dataset ds;
    ds.train.reserve(all.size() - sizes.val - sizes.test);
    ds.val.reserve(sizes.val);
    ds.test.reserve(sizes.test);
    for (std::size_t i = 0; i < all.size(); ++i) {
        (split[i] == 0 ? ds.train : split[i] == 1 ? ds.val : ds.test).push_back(all[i]);
    }
    return ds;
}

/// Uniform random subset of round(fraction * n) instances (at least one), in
/// original order.
inline std::vector<std::size_t> sample_fraction(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("training fraction must be in (0, 1]");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (fraction == 1.0) return idx;
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------------
// Annotations

/// Groups instances by the affine map of their sequence (ordered by (a, b)).
inline std::map<AffineMap, std::vector<std::size_t>> equivalence_classes(const std::vector<Instance>& instances) {
    std::map<AffineMap, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < instances.size(); ++i) classes[canonical_affine(instances[i].seq)].push_back(i);
    return classes;
}

/// Samples round(coverage * m) of the m classes holding at least two distinct
/// sequences; each sampled class is linked by a random spanning tree whose
/// edges always join instances with different sequences.
inline AnnotationSet annotate_equivalences(const std::vector<Instance>& train, double coverage, std::uint64_t seed) {
    if (!(coverage >= 0.0 && coverage <= 1.0)) throw ConfigError("annotation coverage must be in [0, 1]");
    AnnotationSet out;
    if (coverage == 0.0) return out;
    std::vector<std::vector<std::size_t>> eligible;
    for (auto& [map, members] : equivalence_classes(train)) {
        const auto& first = train[members.front()].seq;
        const bool distinct = std::any_of(members.begin(), members.end(),
                                          [&](std::size_t i) { return !(train[i].seq == first); });
        if (distinct) eligible.push_back(members);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    const std::size_t take = static_cast<std::size_t>(std::llround(coverage * static_cast<double>(eligible.size())));
    eligible.resize(take);
    // Output in class order for stable files.
    std::sort(eligible.begin(), eligible.end());
    for (auto& members : eligible) {
        std::shuffle(members.begin(), members.end(), rng);
        // Put an instance with a different sequence in second position.
        auto other = std::find_if(members.begin() + 1, members.end(),
                                  [&](std::size_t i) { return !(train[i].seq == train[members[0]].seq); });
        std::iter_swap(members.begin() + 1, other);
        for (std::size_t k = 1; k < members.size(); ++k) {
            std::uniform_int_distribution<std::size_t> pick(0, k - 1);
            std::size_t j;
            do {
                j = members[pick(rng)];
            } while (train[j].seq == train[members[k]].seq);
            out.equivalences.push_back({j, members[k]});
        }
    }
    return out;
}

/// Each instance annotated with the distinct operation ids of its sequence.
inline AnnotationSet annotate_ops_membership(const std::vector<Instance>& train, const OpVocabulary& vocab) {
    AnnotationSet out;
    out.memberships.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        OpsMembership m{i, {}};
        for (const auto& t : train[i].seq) m.ops.push_back(vocab.id(t));
        std::sort(m.ops.begin(), m.ops.end());
        m.ops.erase(std::unique(m.ops.begin(), m.ops.end()), m.ops.end());
        out.memberships.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files: one instance per line, "digit<TAB>op1 op2 op3<TAB>target".

inline void write_instances(std::ostream& os, const std::vector<Instance>& instances) {
    for (const auto& inst : instances) os << inst.digit << '\t' << to_string(inst.seq) << '\t' << inst.target << '\n';
}

inline std::vector<Instance> read_instances(std::istream& is, const OpVocabulary& vocab) {
    std::vector<Instance> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fail = [&](const std::string& why) {
            return DataError("dataset line " + std::to_string(line_no) + ": " + why);
        };
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) throw fail("expected three tab-separated fields");
        Instance inst;
        const std::string_view sv(line);
        auto parse_int = [&](std::string_view f, auto& value) {
            auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
            if (ec != std::errc() || p != f.data() + f.size()) throw fail("bad integer '" + std::string(f) + "'");
        };
        parse_int(sv.substr(0, t1), inst.digit);
        parse_int(sv.substr(t2 + 1), inst.target);
        if (inst.digit < kMinDigit || inst.digit > kMaxDigit) throw fail("digit out of range");
        std::vector<OpToken> ops;
        std::string_view rest = sv.substr(t1 + 1, t2 - t1 - 1);
        while (!rest.empty()) {
            const auto sp = rest.find(' ');
            const auto tok = rest.substr(0, sp);
            if (!tok.empty()) {
                ops.push_back(parse_token(tok));
                if (!vocab.contains(ops.back())) throw VocabularyError("operation " + std::string(tok) + " not in vocabulary");
            }
            rest = sp == std::string_view::npos ? std::string_view{} : rest.substr(sp + 1);
        }
        if (ops.empty() || ops.size() > kMaxOps) throw fail("sequence length must be in [1, 3]");
        inst.seq = OpSequence::from(ops);
        if (eval_sequence(inst.digit, inst.seq) != inst.target) throw fail("target inconsistent with the sequence");
        out.push_back(inst);
    }
    return out;
}

inline void save_instances(const std::string& path, const std::vector<Instance>& instances) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write dataset file " + path);
    write_instances(os, instances);
    if (!os) throw DataError("write failed for " + path);
}

inline std::vector<Instance> load_instances(const std::string& path, const OpVocabulary& vocab) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open dataset file " + path);
    return read_instances(is, vocab);
}

} // namespace hardcon::arith
