#include <benchmark/benchmark.h>

#include "moflow/chemio.hpp"
#include "moflow/eval.hpp"
#include "moflow/model.hpp"

using namespace moflow;

namespace {

model::ModelConfig small_config() {
    model::ModelConfig mc;
    mc.vocab = VocabularyConfig::qm9();
    mc.bond_coupling_layers = 4;
    mc.squeeze_factor = 3;
    mc.conv_hidden = {32};
    mc.atom_coupling_layers = 8;
    mc.gcn_dim = 16;
    mc.mlp_hidden = {32};
    return mc;
}

void BM_Encode(benchmark::State& state) {
    model::MoFlowModel m(small_config(), 7);
    Molecule mol = chem::parse_smiles("CC(=O)NC1CC1");
    GraphTensorPair pair = encode_onehot(mol, m.config().vocab);
    for (auto _ : state) {
        benchmark::DoNotOptimize(m.encode(pair));
    }
}
BENCHMARK(BM_Encode);

void BM_Decode(benchmark::State& state) {
    model::MoFlowModel m(small_config(), 7);
    Rng rng(11);
    auto zs = m.sample_prior(1, 0.85, rng);
    for (auto _ : state) {
        benchmark::DoNotOptimize(m.decode(zs[0]));
    }
}
BENCHMARK(BM_Decode);

void BM_CanonicalKey(benchmark::State& state) {
    Molecule mol = chem::parse_smiles("C1CC1C(=O)NC(C)C#N");
    for (auto _ : state) {
        benchmark::DoNotOptimize(chem::canonical_key(mol));
    }
}
BENCHMARK(BM_CanonicalKey);

void BM_Fingerprint(benchmark::State& state) {
    Molecule mol = chem::parse_smiles("C1CC1C(=O)NC(C)C#N");
    for (auto _ : state) {
        benchmark::DoNotOptimize(eval::fingerprint(mol));
    }
}
BENCHMARK(BM_Fingerprint);

}  // namespace

BENCHMARK_MAIN();
