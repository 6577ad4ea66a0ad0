#include <filesystem>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fd.hpp"
#include "hardcon/arith_task.hpp"
#include "hardcon/nn.hpp"
#include "hardcon/optim.hpp"

using namespace hardcon;
using namespace hardcon::nn;

namespace {

std::vector<std::size_t> ids(const arith::OpVocabulary& vocab, std::initializer_list<const char*> tokens) {
    std::vector<std::size_t> out;
    for (const char* t : tokens) out.push_back(vocab.id(arith::parse_token(t)));
    return out;
}

} // namespace

TEST(EmbeddingTable, LookupReturnsRow) {
    EmbeddingTable table(4, 3);
    for (std::size_t i = 0; i < table.weights().size(); ++i) table.weights().data()[i] = static_cast<double>(i);
    Tape tape;
    EXPECT_EQ(table.lookup(tape, 2).values(), (std::vector<double>{6, 7, 8}));
    EXPECT_THROW(table.lookup(tape, 4), VocabularyError);
}

TEST(Init, UniformWithinFanInBound) {
    Rng rng(1);
    ToyModel m(ModelDims{}, rng);
    for (const auto& [name, t] : m.named_parameters()) {
        const bool bias = t.shape().size() == 1;
        const double fan_in = name.find("embed") != std::string::npos ? 64.0 : static_cast<double>(t.cols());
        for (double v : t.values()) {
            if (bias) {
                EXPECT_EQ(v, 0.0) << name;
            } else {
                EXPECT_LE(std::abs(v), 1.0 / std::sqrt(fan_in)) << name;
            }
        }
    }
}

TEST(ParameterCount, FullSizeModel) {
    ToyModel m(ModelDims{});
    EXPECT_EQ(m.parameter_count(), 44993u);
    EXPECT_EQ(parameter_count(ModelDims{}), 44993u);
    // 38*64 + 19*64 + 3*(64*128 + 64) + 2*(64*128 + 64) + 64 + 1
    EXPECT_EQ(parameter_count(ModelDims{38, 19, 64}), 2432u + 1216u + 24768u + 16577u);
    EXPECT_EQ(ToyModel(ModelDims{20, 10, 8}).parameter_count(), parameter_count(ModelDims{20, 10, 8}));
}

TEST(Encode, ZeroParametersGiveZeroVector) {
    const arith::OpVocabulary vocab;
    ToyModel m(ModelDims{});
    Tape tape;
    const Tensor x = m.encode(tape, ids(vocab, {"+1", "*2", "-3"}));
    ASSERT_EQ(x.size(), 64u);
    for (double v : x.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(m.forward(tape, 3, ids(vocab, {"+1"})).item(), 0.0);
}

TEST(Encode, OrderMattersAndIsDeterministic) {
    const arith::OpVocabulary vocab;
    Rng rng(2);
    ToyModel m(ModelDims{}, rng);
    Tape tape;
    const auto a = m.encode(tape, ids(vocab, {"+1", "*2"})).values();
    const auto b = m.encode(tape, ids(vocab, {"*2", "+1"})).values();
    const auto a2 = m.encode(tape, ids(vocab, {"+1", "*2"})).values();
    EXPECT_NE(a, b);
    EXPECT_EQ(a, a2);
}

TEST(Encode, PerformsOneCellUpdatePerToken) {
    const arith::OpVocabulary vocab;
    Rng rng(3);
    ToyModel m(ModelDims{}, rng);
    const auto tokens = ids(vocab, {"-4", "*7", "+0"});
    Tape tape;
    Tensor h = Tensor::zeros({64});
    for (std::size_t t : tokens) h = m.gru().step(tape, h, m.op_embedding().lookup(tape, t));
    EXPECT_EQ(m.encode(tape, tokens).values(), h.values());
    EXPECT_THROW(m.encode(tape, std::vector<std::size_t>{}), ContractViolation);
    EXPECT_THROW(m.encode(tape, std::vector<std::size_t>{0, 1, 2, 3}), ContractViolation);
    EXPECT_THROW(m.encode(tape, std::vector<std::size_t>{38}), VocabularyError);
}

TEST(Gru, HiddenStateStaysInsideUnitBox) {
    Rng rng(4);
    GruEncoder gru(8, 8);
    gru.init(rng);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        Tensor h = Tensor::zeros({8});
        for (int step = 0; step < 3; ++step) {
            std::vector<double> e(8);
            for (double& v : e) v = u(rng);
            h = gru.step(tape, h, Tensor::vector(e));
            for (double v : h.values()) {
                EXPECT_GT(v, -1.0);
                EXPECT_LT(v, 1.0);
            }
        }
    }
}

TEST(GatedTanh, MatchesDefinition) {
    Rng rng(5);
    GatedTanhHead head(4, 3);
    head.init(rng);
    const auto params = head.named_parameters("");
    auto find = [&](const std::string& n) {
        for (const auto& [name, t] : params) {
            if (name == n) return t;
        }
        throw std::runtime_error("missing " + n);
    };
    const Tensor A = find("tanh_w"), a = find("tanh_b"), B = find("gate_w"), b = find("gate_b");
    const std::vector<double> u{0.3, -1.2, 0.7, 2.0};
    Tape tape;
    const auto out = head.gated_tanh(tape, Tensor::vector(u)).values();
    for (std::size_t i = 0; i < 3; ++i) {
        double za = a.values()[i], zb = b.values()[i];
        for (std::size_t j = 0; j < 4; ++j) {
            za += A.values()[i * 4 + j] * u[j];
            zb += B.values()[i * 4 + j] * u[j];
        }
        EXPECT_NEAR(out[i], std::tanh(za) / (1.0 + std::exp(-zb)), 1e-15);
    }
}

TEST(Model, FiniteDifferencesAllParameters) {
    const arith::OpVocabulary vocab;
    std::mt19937_64 pick(6);
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(100 + trial);
        ToyModel m(ModelDims{38, 19, 5}, rng);
        // Non-zero biases so their gradients are exercised at a generic point.
        for (auto& [name, t] : m.named_parameters()) {
            if (t.shape().size() == 1) {
                for (double& v : t.data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
            }
        }
        const std::vector<std::size_t> tokens{pick() % 38, pick() % 38, pick() % 38};
        const int digit = static_cast<int>(pick() % 19) - 9;
        const double target = 17.0;
        auto loss = [&](Tape& t) {
            const Tensor pred = m.forward(t, digit, tokens);
            return square(t, sub(t, pred, Tensor::scalar(target)));
        };
        EXPECT_LT(hardcon::testing::max_gradient_error(m.parameters(), loss), 1e-4) << "trial " << trial;
    }
}

TEST(Model, CanFitTheWorkedExamples) {
    // Capacity check on the two worked examples {3,+1,*2}=8 and {4,*2,-2,+4}=10
    // plus a handful of neighbours.
    const arith::OpVocabulary vocab;
    struct Item {
        int digit;
        std::vector<std::size_t> tokens;
        double target;
    };
    std::vector<Item> items{{3, ids(vocab, {"+1", "*2"}), 8.0},
                            {4, ids(vocab, {"*2", "-2", "+4"}), 10.0},
                            {0, ids(vocab, {"+1", "*2"}), 2.0},
                            {-3, ids(vocab, {"*2", "-2", "+4"}), -4.0}};
    Rng rng(7);
    ToyModel m(ModelDims{}, rng);
    optim::AdaDelta opt(m.parameters());
    for (int step = 0; step < 3000; ++step) {
        Tape tape;
        std::vector<Tensor> terms;
        for (const auto& it : items) {
            terms.push_back(square(tape, sub(tape, m.forward(tape, it.digit, it.tokens), Tensor::scalar(it.target))));
        }
        tape.backward(add_all(tape, terms));
        opt.step();
        opt.zero_grad();
    }
    Tape tape;
    tape.set_recording(false);
    EXPECT_NEAR(m.forward(tape, 3, items[0].tokens).item(), 8.0, 0.5);
    EXPECT_NEAR(m.forward(tape, 4, items[1].tokens).item(), 10.0, 0.5);
}

TEST(Model, CloneIsIndependentAndAssignCopies) {
    Rng rng(8);
    ToyModel a(ModelDims{}, rng);
    ToyModel b = a.clone();
    EXPECT_EQ(a.named_parameters()[0].second.values(), b.named_parameters()[0].second.values());
    b.named_parameters()[0].second.data()[0] += 1.0;
    EXPECT_NE(a.named_parameters()[0].second.values(), b.named_parameters()[0].second.values());
    a.assign(b);
    EXPECT_EQ(a.named_parameters()[0].second.values(), b.named_parameters()[0].second.values());
    EXPECT_FALSE(a.named_parameters()[0].second.same_storage(b.named_parameters()[0].second));
}

TEST(Model, ReinitEncoderLeavesFrozenPartsAlone) {
    Rng rng(9);
    ToyModel a(ModelDims{}, rng);
    ToyModel b = a.clone();
    Rng other(10);
    b.reinit_encoder(other);
    for (std::size_t i = 0; i < a.frozen_parameters().size(); ++i) {
        EXPECT_EQ(a.frozen_parameters()[i].second.values(), b.frozen_parameters()[i].second.values());
    }
    EXPECT_NE(a.encoder_parameters()[0].second.values(), b.encoder_parameters()[0].second.values());
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(11);
    ToyModel m(ModelDims{}, rng);
    m.named_parameters()[0].second.data()[0] = 0.1 + 0.2;  // not representable in short decimal
    const auto path = std::filesystem::temp_directory_path() / "hardcon_test_roundtrip.ckpt";
    save_model(path.string(), m);
    const ToyModel loaded = load_model(path.string());
    ASSERT_EQ(loaded.dims(), m.dims());
    const auto a = m.named_parameters();
    const auto b = loaded.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(a[i].second.values(), b[i].second.values());
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsMalformedInput) {
    std::istringstream no_header("tensor x 1 2\n1 2\nend\n");
    EXPECT_THROW(read_tensors(no_header), DataError);
    std::istringstream short_values(std::string(kCheckpointHeader) + "\ntensor x 1 3\n1 2\nend\n");
    EXPECT_THROW(read_tensors(short_values), DataError);
    std::istringstream no_end(std::string(kCheckpointHeader) + "\ntensor x 1 2\n1 2\n");
    EXPECT_THROW(read_tensors(no_end), DataError);

    ToyModel small(ModelDims{38, 19, 8});
    std::ostringstream os;
    write_tensors(os, small.named_parameters());
    std::istringstream is(os.str());
    ToyModel full(ModelDims{});
    EXPECT_THROW(load_parameters(full, read_tensors(is)), DataError);
}
