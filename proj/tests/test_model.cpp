#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "moflow/model.hpp"
#include "support/molgen.hpp"

using namespace moflow;
using namespace moflow::model;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab = VocabularyConfig::qm9();
    cfg.bond_coupling_layers = 2;
    cfg.conv_hidden = {8};
    cfg.atom_coupling_layers = 4;
    cfg.gcn_dim = 8;
    cfg.mlp_hidden = {8};
    return cfg;
}

GraphTensorPair sample_pair(Rng& rng, const VocabularyConfig& v) {
    Molecule m = testsupport::random_molecule(rng, v.n_max);
    return dequantize(encode_onehot(m, v), rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
    return d;
}

}  // namespace

TEST_CASE("latent sizes follow the configuration") {
    MoFlowModel m(small_config(), 1);
    CHECK(m.atom_latent_size() == 9 * 5);
    CHECK(m.bond_latent_size() == 4 * 9 * 9);
}

TEST_CASE("likelihood decomposes exactly into bond and atom terms") {
    MoFlowModel m(small_config(), 2);
    Rng rng(3);
    GraphTensorPair p = sample_pair(rng, m.config().vocab);
    EncodeResult r = m.encode(p);
    CHECK(r.log_likelihood == doctest::Approx(r.bond_term + r.atom_term).epsilon(1e-12));
    CHECK(std::isfinite(r.log_likelihood));
    CHECK(r.z.z_atom.size() == m.atom_latent_size());
    CHECK(r.z.z_bond.size() == m.bond_latent_size());
}

TEST_CASE("invert is the exact continuous inverse of encode") {
    MoFlowModel m(small_config(), 4);
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        GraphTensorPair p = sample_pair(rng, m.config().vocab);
        GraphTensorPair back = m.invert(m.encode(p).z);
        CHECK(max_abs_diff(back.A, p.A) < 1e-6);
        CHECK(max_abs_diff(back.B, p.B) < 1e-6);
    }
}

TEST_CASE("decode(encode(x)) recovers the molecule untrained") {
    MoFlowModel m(small_config(), 6);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Molecule mol = testsupport::random_molecule(rng, 9);
        GraphTensorPair p = dequantize(encode_onehot(mol, m.config().vocab), rng);
        Molecule back = m.decode(m.encode(p).z, false);
        CHECK(back == mol);
    }
}

TEST_CASE("encode validates input shapes") {
    MoFlowModel m(small_config(), 8);
    GraphTensorPair bad;
    bad.A = Tensor({9, 4});  // wrong k
    bad.B = Tensor({4, 9, 9});
    CHECK_THROWS_AS(m.encode(bad), DimensionError);
    bad.A = Tensor({9, 5});
    bad.B = Tensor({4, 8, 8});
    CHECK_THROWS_AS(m.encode(bad), DimensionError);
}

TEST_CASE("sampling respects the temperature") {
    MoFlowModel m(small_config(), 9);
    Rng rng(10);
    std::vector<LatentVector> zero = m.sample_prior(3, 0.0, rng);
    for (const LatentVector& z : zero) {
        for (std::size_t i = 0; i < z.z_atom.size(); ++i) CHECK(z.z_atom[i] == 0.0);
        for (std::size_t i = 0; i < z.z_bond.size(); ++i) CHECK(z.z_bond[i] == 0.0);
    }
    // log sigma starts at zero: samples at t=0.85 have std 0.85
    std::vector<LatentVector> hot = m.sample_prior(2000, 0.85, rng);
    double sq = 0.0;
    std::size_t count = 0;
    for (const LatentVector& z : hot) {
        for (std::size_t i = 0; i < z.z_atom.size(); ++i) sq += z.z_atom[i] * z.z_atom[i];
        count += z.z_atom.size();
    }
    CHECK(std::sqrt(sq / count) == doctest::Approx(0.85).epsilon(0.02));
}

TEST_CASE("zero latents round-trip through invert/encode") {
    MoFlowModel m(small_config(), 11);
    LatentVector z;
    z.z_atom = Tensor({m.atom_latent_size()}, 0.0);
    z.z_bond = Tensor({m.bond_latent_size()}, 0.0);
    GraphTensorPair back = m.invert(z);
    EncodeResult r = m.encode(back);
    CHECK(max_abs_diff(r.z.z_atom, z.z_atom) < 1e-6);
    CHECK(max_abs_diff(r.z.z_bond, z.z_bond) < 1e-6);
}

TEST_CASE("one Adam step on a batch reduces the NLL") {
    MoFlowModel m(small_config(), 12);
    Rng rng(13);
    std::vector<GraphTensorPair> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(sample_pair(rng, m.config().vocab));
    // initialize data-dependent layers first
    {
        layers::Tape warm;
        m.nll(warm, batch, layers::Mode::Training);
    }
    double before;
    {
        layers::Tape t;
        before = m.nll(t, batch, layers::Mode::Frozen).value().item();
    }
    Adam opt(m.params(), 0.002);
    for (int step = 0; step < 5; ++step) {
        layers::Tape t;
        layers::Var loss = m.nll(t, batch, layers::Mode::Frozen);
        t.backward(loss);
        opt.step(t);
    }
    double after;
    {
        layers::Tape t;
        after = m.nll(t, batch, layers::Mode::Frozen).value().item();
    }
    CHECK(after < before);
}

TEST_CASE("train runs, reports finite per-epoch NLL, and checkpoints") {
    MoFlowModel m(small_config(), 14);
    Rng rng(15);
    std::vector<Molecule> dataset;
    for (int i = 0; i < 24; ++i) dataset.push_back(testsupport::random_molecule(rng, 9));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 99;
    std::vector<std::size_t> seen;
    tc.on_epoch = [&](std::size_t e, double nll) {
        seen.push_back(e);
        CHECK(std::isfinite(nll));
    };
    std::vector<double> nll = m.train(dataset, tc);
    CHECK(nll.size() == 2);
    CHECK(seen == std::vector<std::size_t>{1, 2});
}

TEST_CASE("checkpoint round trip preserves every encoding") {
    const std::string path = "model_test_roundtrip.ckpt";
    MoFlowModel m(small_config(), 16);
    Rng rng(17);
    // move actnorms off their defaults so the test is not trivially passing
    std::vector<GraphTensorPair> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(sample_pair(rng, m.config().vocab));
    {
        layers::Tape warm;
        m.nll(warm, batch, layers::Mode::Training);
    }
    m.save(path);
    MoFlowModel loaded = MoFlowModel::load(path);
    CHECK(loaded.config().vocab.n_max == 9);
    CHECK(loaded.config().atom_coupling_layers == 4);
    for (int trial = 0; trial < 5; ++trial) {
        GraphTensorPair p = sample_pair(rng, m.config().vocab);
        EncodeResult a = m.encode(p);
        EncodeResult b = loaded.encode(p);
        CHECK(a.log_likelihood == doctest::Approx(b.log_likelihood).epsilon(1e-12));
        CHECK(max_abs_diff(a.z.z_atom, b.z.z_atom) == 0.0);
        CHECK(max_abs_diff(a.z.z_bond, b.z.z_bond) == 0.0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects corrupt files") {
    const std::string path = "model_test_corrupt.ckpt";
    SUBCASE("bad magic") {
        std::ofstream out(path, std::ios::binary);
        out << "NOTMAGIC" << std::string(64, '\0');
        out.close();
        CHECK_THROWS_AS(MoFlowModel::load(path), IoError);
    }
    SUBCASE("bad version") {
        MoFlowModel m(small_config(), 18);
        m.save(path);
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t v = 999;
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
        f.close();
        CHECK_THROWS_AS(MoFlowModel::load(path), IoError);
    }
    SUBCASE("truncated") {
        MoFlowModel m(small_config(), 19);
        m.save(path);
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(MoFlowModel::load(path), IoError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(MoFlowModel::load("does_not_exist.ckpt"), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("decode applies validity correction by default") {
    MoFlowModel m(small_config(), 20);
    Rng rng(21);
    std::vector<LatentVector> zs = m.sample_prior(20, 1.0, rng);
    for (const LatentVector& z : zs) {
        Molecule mol = m.decode(z);
        CHECK(validity::check_valency(mol).valid);
        if (!mol.empty()) CHECK(validity::largest_component(mol) == mol);
    }
}
