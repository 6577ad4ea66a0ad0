#pragma once

// Toy-task model: operation tokens -> embedding -> GRU -> final state x; digit
// -> embedding v; gated-tanh MLP over [x; v] -> scalar prediction.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/error.hpp"

namespace hardcon::nn {

using Rng = std::mt19937_64;

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-s, s);
    for (double& v : t.data()) v = u(rng);
}

inline void init_zero(Tensor& t) {
    for (double& v : t.data()) v = 0.0;
}

using NamedTensor = std::pair<std::string, Tensor>;

class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t vocab_size, std::size_t dim)
        : weights_(Tensor::zeros({vocab_size, dim}, true)) {}

    std::size_t vocab_size() const { return weights_.shape()[0]; }
    std::size_t dim() const { return weights_.shape()[1]; }
    Tensor& weights() { return weights_; }
    const Tensor& weights() const { return weights_; }

    void init(Rng& rng) { init_uniform(weights_, dim(), rng); }

    Tensor lookup(Tape& tape, std::size_t index) const {
        if (index >= vocab_size()) {
            throw VocabularyError("embedding index " + std::to_string(index) + " out of range (vocabulary size " +
                                  std::to_string(vocab_size()) + ")");
        }
        return row(tape, weights_, index);
    }

private:
    Tensor weights_;
};

/// z = sigmoid(W_z [h; e] + b_z), r = sigmoid(W_r [h; e] + b_r),
/// h~ = tanh(W_h [r*h; e] + b_h), h <- (1 - z)*h + z*h~.
class GruEncoder {
public:
    GruEncoder() = default;
    GruEncoder(std::size_t input_dim, std::size_t hidden_dim)
        : input_dim_(input_dim), hidden_dim_(hidden_dim),
          w_z_(Tensor::zeros({hidden_dim, hidden_dim + input_dim}, true)),
          w_r_(Tensor::zeros({hidden_dim, hidden_dim + input_dim}, true)),
          w_h_(Tensor::zeros({hidden_dim, hidden_dim + input_dim}, true)),
          b_z_(Tensor::zeros({hidden_dim}, true)),
          b_r_(Tensor::zeros({hidden_dim}, true)),
          b_h_(Tensor::zeros({hidden_dim}, true)) {}

    std::size_t input_dim() const { return input_dim_; }
    std::size_t hidden_dim() const { return hidden_dim_; }

    void init(Rng& rng) {
        for (Tensor* w : {&w_z_, &w_r_, &w_h_}) init_uniform(*w, hidden_dim_ + input_dim_, rng);
        for (Tensor* b : {&b_z_, &b_r_, &b_h_}) init_zero(*b);
    }

    Tensor step(Tape& tape, const Tensor& h, const Tensor& e) const {
        const Tensor he = concat(tape, h, e);
        const Tensor z = sigmoid(tape, affine(tape, w_z_, he, b_z_));
        const Tensor r = sigmoid(tape, affine(tape, w_r_, he, b_r_));
        const Tensor rhe = concat(tape, mul(tape, r, h), e);
        const Tensor candidate = tanh(tape, affine(tape, w_h_, rhe, b_h_));
        return add(tape, mul(tape, one_minus(tape, z), h), mul(tape, z, candidate));
    }

    std::vector<NamedTensor> named_parameters(const std::string& prefix) const {
        return {{prefix + "w_z", w_z_}, {prefix + "w_r", w_r_}, {prefix + "w_h", w_h_},
                {prefix + "b_z", b_z_}, {prefix + "b_r", b_r_}, {prefix + "b_h", b_h_}};
    }

private:
    std::size_t input_dim_ = 0;
    std::size_t hidden_dim_ = 0;
    Tensor w_z_, w_r_, w_h_;
    Tensor b_z_, b_r_, b_h_;
};

/// Final GRU state over the embedded tokens, starting from zero; one cell
/// update per token.
inline Tensor encode_ops(Tape& tape, std::span<const std::size_t> tokens, const EmbeddingTable& table,
                         const GruEncoder& gru) {
    detail::require(!tokens.empty(), "encode_ops: empty sequence");
    Tensor h = Tensor::zeros({gru.hidden_dim()});
    for (std::size_t id : tokens) h = gru.step(tape, h, table.lookup(tape, id));
    return h;
}

/// tanh(A u + a) * sigmoid(B u + b), then a linear map to a scalar.
class GatedTanhHead {
public:
    GatedTanhHead() = default;
    GatedTanhHead(std::size_t input_dim, std::size_t hidden_dim)
        : tanh_w_(Tensor::zeros({hidden_dim, input_dim}, true)),
          tanh_b_(Tensor::zeros({hidden_dim}, true)),
          gate_w_(Tensor::zeros({hidden_dim, input_dim}, true)),
          gate_b_(Tensor::zeros({hidden_dim}, true)),
          out_w_(Tensor::zeros({1, hidden_dim}, true)),
          out_b_(Tensor::zeros({1}, true)) {}

    std::size_t input_dim() const { return tanh_w_.shape()[1]; }
    std::size_t hidden_dim() const { return tanh_w_.shape()[0]; }

    void init(Rng& rng) {
        init_uniform(tanh_w_, input_dim(), rng);
        init_uniform(gate_w_, input_dim(), rng);
        init_uniform(out_w_, hidden_dim(), rng);
        init_zero(tanh_b_);
        init_zero(gate_b_);
        init_zero(out_b_);
    }

    Tensor gated_tanh(Tape& tape, const Tensor& u) const {
        return mul(tape, tanh(tape, affine(tape, tanh_w_, u, tanh_b_)), sigmoid(tape, affine(tape, gate_w_, u, gate_b_)));
    }

    Tensor forward(Tape& tape, const Tensor& u) const {
        return affine(tape, out_w_, gated_tanh(tape, u), out_b_);
    }

    std::vector<NamedTensor> named_parameters(const std::string& prefix) const {
        return {{prefix + "tanh_w", tanh_w_}, {prefix + "tanh_b", tanh_b_}, {prefix + "gate_w", gate_w_},
                {prefix + "gate_b", gate_b_}, {prefix + "out_w", out_w_},   {prefix + "out_b", out_b_}};
    }

private:
    Tensor tanh_w_, tanh_b_;
    Tensor gate_w_, gate_b_;
    Tensor out_w_, out_b_;
};

struct ModelDims {
    std::size_t op_vocab = 38;
    std::size_t digits = 19;
    std::size_t dim = 64;

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Number of scalar parameters of ToyModel.
constexpr std::size_t parameter_count(const ModelDims& d) {
    const std::size_t gru = 3 * (d.dim * 2 * d.dim + d.dim);
    const std::size_t head = 2 * (d.dim * 2 * d.dim + d.dim) + d.dim + 1;
    return d.op_vocab * d.dim + d.digits * d.dim + gru + head;
}

/// Encoder f (operation embeddings + GRU), digit embedder g and head h.
/// Copies share parameter storage; use clone() for an independent model.
class ToyModel {
public:
    ToyModel() = default;
    explicit ToyModel(const ModelDims& dims, int min_digit = -9)
        : dims_(dims), min_digit_(min_digit),
          op_embed_(dims.op_vocab, dims.dim),
          gru_(dims.dim, dims.dim),
          digit_embed_(dims.digits, dims.dim),
          head_(2 * dims.dim, dims.dim) {}

    ToyModel(const ModelDims& dims, Rng& rng, int min_digit = -9) : ToyModel(dims, min_digit) {
        op_embed_.init(rng);
        gru_.init(rng);
        digit_embed_.init(rng);
        head_.init(rng);
    }

    const ModelDims& dims() const { return dims_; }
    const EmbeddingTable& op_embedding() const { return op_embed_; }
    const EmbeddingTable& digit_embedding() const { return digit_embed_; }
    const GruEncoder& gru() const { return gru_; }
    const GatedTanhHead& head() const { return head_; }

    /// Fresh random encoder parameters (operation embeddings and GRU).
    void reinit_encoder(Rng& rng) {
        op_embed_.init(rng);
        gru_.init(rng);
    }

    Tensor encode(Tape& tape, std::span<const std::size_t> tokens) const {
        detail::require(!tokens.empty() && tokens.size() <= 3, "sequence length must be in [1, 3]");
        return encode_ops(tape, tokens, op_embed_, gru_);
    }

    Tensor digit_vector(Tape& tape, int digit) const {
        const long index = static_cast<long>(digit) - min_digit_;
        if (index < 0 || index >= static_cast<long>(dims_.digits)) {
            throw ContractViolation("digit " + std::to_string(digit) + " out of range");
        }
        return digit_embed_.lookup(tape, static_cast<std::size_t>(index));
    }

    /// Head applied to an (optionally projected) operation embedding x.
    Tensor predict(Tape& tape, const Tensor& x, int digit) const {
        return head_.forward(tape, concat(tape, x, digit_vector(tape, digit)));
    }

    Tensor forward(Tape& tape, int digit, std::span<const std::size_t> tokens) const {
        return predict(tape, encode(tape, tokens), digit);
    }

    std::vector<NamedTensor> encoder_parameters() const {
        std::vector<NamedTensor> out{{"op_embed.weights", op_embed_.weights()}};
        for (auto& p : gru_.named_parameters("gru.")) out.push_back(std::move(p));
        return out;
    }

    std::vector<NamedTensor> frozen_parameters() const {
        std::vector<NamedTensor> out{{"digit_embed.weights", digit_embed_.weights()}};
        for (auto& p : head_.named_parameters("head.")) out.push_back(std::move(p));
        return out;
    }

    std::vector<NamedTensor> named_parameters() const {
        auto out = encoder_parameters();
        for (auto& p : frozen_parameters()) out.push_back(std::move(p));
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.size();
        return n;
    }

    ToyModel clone() const {
        ToyModel copy(dims_, min_digit_);
        copy.assign(*this);
        return copy;
    }

    /// Copies parameter values from `other` (same dims) into this model's storage.
    void assign(const ToyModel& other) {
        detail::require(dims_ == other.dims_, "assign: model dimensions differ");
        auto dst = named_parameters();
        auto src = other.named_parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
        }
    }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) t.zero_grad();
    }

private:
    ModelDims dims_;
    int min_digit_ = -9;
    EmbeddingTable op_embed_;
    GruEncoder gru_;
    EmbeddingTable digit_embed_;
    GatedTanhHead head_;
};

// ---------------------------------------------------------------------------
// Checkpoints. Text format:
//   hardcon-checkpoint 1
//   tensor <name> <rank> <d0> [<d1> ...]
//   <values, space separated, shortest round-trip decimal>
//   ...
//   end

inline constexpr const char* kCheckpointHeader = "hardcon-checkpoint 1";

namespace detail {

inline void append_double(std::string& out, double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, p);
}

} // namespace detail

inline void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
    os << kCheckpointHeader << '\n';
    std::string line;
    for (const auto& [name, t] : tensors) {
        os << "tensor " << name << ' ' << t.shape().size();
        for (std::size_t d : t.shape()) os << ' ' << d;
        os << '\n';
        line.clear();
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (i) line += ' ';
            detail::append_double(line, t.data()[i]);
        }
        os << line << '\n';
    }
    os << "end\n";
}

inline std::map<std::string, Tensor> read_tensors(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointHeader) {
        throw DataError("not a checkpoint (expected header '" + std::string(kCheckpointHeader) + "')");
    }
    std::map<std::string, Tensor> out;
    while (std::getline(is, line)) {
        if (line == "end") return out;
        std::istringstream hs(line);
        std::string tag, name;
        std::size_t rank = 0;
        if (!(hs >> tag >> name >> rank) || tag != "tensor" || rank == 0) throw DataError("bad checkpoint tensor header: " + line);
        Shape shape(rank);
        for (auto& d : shape) {
            if (!(hs >> d)) throw DataError("bad checkpoint shape for " + name);
        }
        const std::size_t n = hardcon::detail::shape_size(shape);
        std::string values;
        if (!std::getline(is, values)) throw DataError("truncated checkpoint at " + name);
        std::vector<double> data;
        data.reserve(n);
        const char* p = values.data();
        const char* end = values.data() + values.size();
        while (p < end) {
            while (p < end && *p == ' ') ++p;
            if (p == end) break;
            double v = 0.0;
            auto [q, ec] = std::from_chars(p, end, v);
            if (ec != std::errc()) throw DataError("bad checkpoint value in " + name);
            data.push_back(v);
            p = q;
        }
        if (data.size() != n) throw DataError("checkpoint tensor " + name + " has wrong element count");
        out.emplace(name, Tensor::from(std::move(data), std::move(shape), true));
    }
    throw DataError("checkpoint missing 'end' marker");
}

/// Copies checkpoint values into the model; every parameter must be present
/// with the same shape.
inline void load_parameters(ToyModel& model, const std::map<std::string, Tensor>& tensors) {
    for (auto& [name, t] : model.named_parameters()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw DataError("checkpoint is missing tensor " + name);
        if (it->second.shape() != t.shape()) {
            throw DataError("checkpoint/model shape mismatch for " + name + ": " +
                            hardcon::detail::shape_string(it->second.shape()) + " vs " +
                            hardcon::detail::shape_string(t.shape()));
        }
        std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    }
}

inline void save_model(const std::string& path, const ToyModel& model) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write checkpoint " + path);
    write_tensors(os, model.named_parameters());
    if (!os) throw DataError("write failed for " + path);
}

/// Builds a model whose dimensions are read from the checkpoint itself.
inline ToyModel load_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open checkpoint " + path);
    const auto tensors = read_tensors(is);
    auto shape_of = [&](const std::string& name) -> const Shape& {
        auto it = tensors.find(name);
        if (it == tensors.end() || it->second.shape().size() != 2) throw DataError("checkpoint is missing tensor " + name);
        return it->second.shape();
    };
    ModelDims dims;
    dims.op_vocab = shape_of("op_embed.weights")[0];
    dims.dim = shape_of("op_embed.weights")[1];
    dims.digits = shape_of("digit_embed.weights")[0];
    ToyModel model(dims);
    load_parameters(model, tensors);
    return model;
}

} // namespace hardcon::nn
