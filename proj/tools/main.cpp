// moflow command-line driver: datasets, training, generation, evaluation.
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moflow/errors.hpp"
#include "moflow/eval.hpp"
#include "moflow/model.hpp"
#include "moflow/runconfig.hpp"
#include "moflow/validity.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moflow;

namespace {

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for hashing: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return fnv1a(ss.str());
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
    std::string out_dir;
    std::string dataset;
    std::optional<double> temperature;
    std::optional<std::size_t> count;
    std::optional<double> delta;
    std::optional<std::size_t> steps;
    std::optional<double> lambda;
    bool no_correction = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "run config file");
    cmd->add_option("--seed", o.seed, "RNG seed (overrides config)");
    cmd->add_option("--checkpoint", o.checkpoint, "model checkpoint path");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--dataset", o.dataset, "SMILES dataset path (overrides config)");
    cmd->add_option("--temperature", o.temperature, "sampling temperature");
    cmd->add_option("--count", o.count, "sample / item count");
    cmd->add_option("--delta", o.delta, "similarity threshold");
    cmd->add_option("--steps", o.steps, "optimization steps");
    cmd->add_option("--lambda", o.lambda, "ascent step size");
    cmd->add_flag("--no-correction", o.no_correction, "skip validity correction");
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    if (o.seed) c.seed = *o.seed;
    if (!o.checkpoint.empty()) c.checkpoint_path = o.checkpoint;
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    if (!o.dataset.empty()) c.dataset_path = o.dataset;
    if (o.temperature) c.temperature = *o.temperature;
    if (o.count) c.sample_count = *o.count;
    if (o.delta) c.opt_delta = *o.delta;
    if (o.steps) c.opt_steps = *o.steps;
    if (o.lambda) c.opt_lambda = *o.lambda;
    c.validate();
    return c;
}

model::MoFlowModel make_model(const RunConfig& c, bool require_checkpoint) {
    if (!c.checkpoint_path.empty()) return model::MoFlowModel::load(c.checkpoint_path);
    if (require_checkpoint) throw IoError("a checkpoint is required (--checkpoint)");
    return model::MoFlowModel(c.model, *c.seed);
}

void write_manifest(const RunConfig& c, const std::string& command,
                    const std::vector<std::string>& outputs) {
    json j;
    j["command"] = command;
    j["seed"] = *c.seed;
    j["config_hash"] = hex64(fnv1a(dump_run_config(c)));
    j["checkpoint_hash"] =
        c.checkpoint_path.empty() ? "none" : hex64(fnv1a_file(c.checkpoint_path));
    j["outputs"] = outputs;
    std::ofstream os(c.out_dir + "/manifest.json");
    if (!os) throw IoError("cannot write manifest in " + c.out_dir);
    os << j.dump(2) << "\n";
}

std::vector<Molecule> load_dataset(const RunConfig& c) {
    if (c.dataset_path.empty()) throw ConfigError("paths.dataset: required");
    return chem::load_smiles_file(c.dataset_path);
}

std::string format_metrics(const eval::MetricsReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << "generated = " << r.n_generated << "\n"
       << "valid = " << r.n_valid << "\n"
       << "unique_valid = " << r.n_unique_valid << "\n"
       << "novel_valid = " << r.n_novel_valid << "\n"
       << "nuv_count = " << r.n_nuv << "\n"
       << "validity = " << r.validity << "\n"
       << "uniqueness = " << r.uniqueness << "\n"
       << "uniqueness_all = " << r.uniqueness_all << "\n"
       << "novelty = " << r.novelty << "\n"
       << "nuv = " << r.nuv << "\n"
       << "reconstruction = " << r.reconstruction << "\n";
    return os.str();
}

json metrics_json(const eval::MetricsReport& r) {
    json j;
    j["generated"] = r.n_generated;
    j["valid"] = r.n_valid;
    j["unique_valid"] = r.n_unique_valid;
    j["novel_valid"] = r.n_novel_valid;
    j["nuv_count"] = r.n_nuv;
    j["validity"] = r.validity;
    j["uniqueness"] = r.uniqueness;
    j["uniqueness_all"] = r.uniqueness_all;
    j["novelty"] = r.novelty;
    j["nuv"] = r.nuv;
    j["reconstruction"] = r.reconstruction;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os << text;
}

std::string smiles_or_empty(const Molecule& m) {
    return m.empty() ? std::string("*") : chem::write_smiles(m);
}

// ------------------------------------------------------------ subcommands

int cmd_preprocess(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    std::vector<std::string> kept;
    std::size_t skipped = 0;
    for (const Molecule& m : mols) {
        try {
            encode_onehot(m, c.model.vocab);  // fits the vocabulary?
            kept.push_back(chem::write_smiles(m));
        } catch (const CapacityError&) {
            ++skipped;
        } catch (const VocabularyError&) {
            ++skipped;
        }
    }
    chem::save_smiles_file(c.out_dir + "/preprocessed.smi", kept);
    std::cout << "kept " << kept.size() << " molecules, skipped " << skipped << "\n";
    write_manifest(c, "preprocess", {"preprocessed.smi"});
    return 0;
}

int cmd_train(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    model::MoFlowModel m(c.model, *c.seed);
    model::TrainConfig tc;
    tc.epochs = c.train_epochs;
    tc.batch_size = c.train_batch_size;
    tc.learning_rate = c.train_learning_rate;
    tc.seed = *c.seed;
    tc.on_epoch = [](std::size_t e, double nll) {
        std::cout << "epoch " << e << " nll " << nll << "\n";
    };
    std::vector<double> history = m.train(mols, tc);
    m.save(c.out_dir + "/model.ckpt");
    std::ostringstream hs;
    hs.precision(17);
    for (std::size_t i = 0; i < history.size(); ++i) {
        hs << (i + 1) << " " << history[i] << "\n";
    }
    write_text(c.out_dir + "/train_nll.txt", hs.str());
    write_manifest(c, "train", {"model.ckpt", "train_nll.txt"});
    return 0;
}

int cmd_generate(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    model::MoFlowModel m = make_model(c, false);
    Rng rng(*c.seed);
    std::vector<model::LatentVector> zs = m.sample_prior(c.sample_count, c.temperature, rng);
    std::vector<Molecule> mols;
    std::vector<std::string> lines;
    mols.reserve(zs.size());
    for (const auto& z : zs) {
        mols.push_back(m.decode(z, !o.no_correction));
        lines.push_back(smiles_or_empty(mols.back()));
    }
    chem::save_smiles_file(c.out_dir + "/generated.smi", lines);
    std::set<std::string> train_keys;
    std::size_t dataset_size = mols.size();
    if (!c.dataset_path.empty()) {
        std::vector<Molecule> train = load_dataset(c);
        dataset_size = train.size();
        for (const Molecule& t : train) train_keys.insert(chem::canonical_key(t));
    }
    eval::MetricsReport rep = eval::metrics(mols, train_keys, 0, dataset_size);
    write_text(c.out_dir + "/metrics.txt", format_metrics(rep));
    write_text(c.out_dir + "/metrics.json", metrics_json(rep).dump(2) + "\n");
    std::cout << format_metrics(rep);
    write_manifest(c, "generate", {"generated.smi", "metrics.txt", "metrics.json"});
    return 0;
}

int cmd_reconstruct(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    model::MoFlowModel m = make_model(c, false);
    std::size_t ok = 0;
    for (const Molecule& mol : mols) {
        GraphTensorPair pair = encode_onehot(mol, c.model.vocab);
        model::EncodeResult enc = m.encode(pair);
        Molecule back = m.decode(enc.z, false);
        if (chem::canonical_key(back) == chem::canonical_key(mol)) ++ok;
    }
    const double rate = mols.empty() ? 0.0 : static_cast<double>(ok) / mols.size();
    std::ostringstream os;
    os.precision(10);
    os << "reconstructed = " << ok << " / " << mols.size() << "\n"
       << "reconstruction = " << rate << "\n";
    std::cout << os.str();
    write_text(c.out_dir + "/reconstruct.txt", os.str());
    write_manifest(c, "reconstruct", {"reconstruct.txt"});
    return 0;
}

int cmd_encode(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    model::MoFlowModel m = make_model(c, false);
    std::ostringstream os;
    os.precision(17);
    for (const Molecule& mol : mols) {
        model::EncodeResult enc = m.encode(encode_onehot(mol, c.model.vocab));
        os << chem::write_smiles(mol) << "\t" << enc.log_likelihood << "\t";
        Tensor flat = eval::flatten_latent(enc.z);
        for (std::size_t i = 0; i < flat.size(); ++i) {
            os << (i ? "," : "") << flat[i];
        }
        os << "\n";
    }
    write_text(c.out_dir + "/latents.tsv", os.str());
    write_manifest(c, "encode", {"latents.tsv"});
    return 0;
}

int cmd_interpolate(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    if (mols.size() < 2) throw ConfigError("interpolate needs at least two dataset molecules");
    model::MoFlowModel m = make_model(c, false);
    const std::size_t count = std::max<std::size_t>(o.count.value_or(11), 2);
    model::LatentVector z0 = m.encode(encode_onehot(mols[0], c.model.vocab)).z;
    model::LatentVector z1 = m.encode(encode_onehot(mols[1], c.model.vocab)).z;
    std::vector<Molecule> path = eval::interpolate(m, z0, z1, count, !o.no_correction);
    std::vector<std::string> lines;
    for (const Molecule& p : path) lines.push_back(smiles_or_empty(p));
    chem::save_smiles_file(c.out_dir + "/interpolation.smi", lines);
    write_manifest(c, "interpolate", {"interpolation.smi"});
    return 0;
}

int cmd_grid(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    if (mols.empty()) throw ConfigError("grid needs a seed molecule in the dataset");
    model::MoFlowModel m = make_model(c, false);
    const std::size_t side = o.count.value_or(5);
    const double extent = o.lambda.value_or(1.0);
    std::vector<std::pair<double, double>> steps;
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t cidx = 0; cidx < side; ++cidx) {
            const double ly = side == 1 ? 0.0 : -extent + 2.0 * extent * r / (side - 1);
            const double lx = side == 1 ? 0.0 : -extent + 2.0 * extent * cidx / (side - 1);
            steps.emplace_back(lx, ly);
        }
    }
    model::LatentVector z = m.encode(encode_onehot(mols[0], c.model.vocab)).z;
    Rng rng(*c.seed);
    std::vector<Molecule> out = eval::grid_neighborhood(m, z, steps, rng, !o.no_correction);
    std::vector<std::string> lines;
    eval::Fingerprint seed_fp = eval::fingerprint(mols[0], c.fingerprint_bits);
    std::ostringstream heat;
    heat.precision(10);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t cidx = 0; cidx < side; ++cidx) {
            const Molecule& mol = out[r * side + cidx];
            lines.push_back(smiles_or_empty(mol));
            heat << (cidx ? "," : "")
                 << eval::tanimoto(seed_fp, eval::fingerprint(mol, c.fingerprint_bits));
        }
        heat << "\n";
    }
    chem::save_smiles_file(c.out_dir + "/grid.smi", lines);
    write_text(c.out_dir + "/grid_similarity.csv", heat.str());
    write_manifest(c, "grid", {"grid.smi", "grid_similarity.csv"});
    return 0;
}

eval::PropertyRegressor fit_regressor(const model::MoFlowModel& m,
                                      const std::vector<Molecule>& mols, const RunConfig& c) {
    eval::PropertyFn prop = eval::property_fn(c.opt_property);
    std::vector<Tensor> xs;
    std::vector<double> ys;
    for (const Molecule& mol : mols) {
        xs.push_back(eval::flatten_latent(m.encode(encode_onehot(mol, c.model.vocab)).z));
        ys.push_back(prop(mol));
    }
    Rng rng(*c.seed + 17);
    eval::PropertyRegressor r(xs[0].size(), 18, rng);
    r.fit(xs, ys, 200, 0.01, *c.seed);
    return r;
}

int cmd_optimize(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    if (mols.empty()) throw ConfigError("optimize needs dataset molecules");
    model::MoFlowModel m = make_model(c, false);
    eval::PropertyRegressor r = fit_regressor(m, mols, c);
    model::LatentVector z = m.encode(encode_onehot(mols[0], c.model.vocab)).z;
    auto traj = eval::optimize_property(m, z, r, c.opt_lambda, c.opt_steps, !o.no_correction);
    std::ostringstream os;
    os.precision(10);
    for (const auto& p : traj) os << smiles_or_empty(p.molecule) << "\t" << p.score << "\n";
    write_text(c.out_dir + "/optimize.tsv", os.str());
    write_manifest(c, "optimize", {"optimize.tsv"});
    return 0;
}

int cmd_constrained(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> mols = load_dataset(c);
    if (mols.empty()) throw ConfigError("constrained-optimize needs dataset molecules");
    model::MoFlowModel m = make_model(c, false);
    eval::PropertyRegressor r = fit_regressor(m, mols, c);
    eval::PropertyFn prop = eval::property_fn(c.opt_property);
    const std::size_t n_seeds = std::min<std::size_t>(o.count.value_or(10), mols.size());
    std::size_t successes = 0;
    std::ostringstream os;
    os.precision(10);
    for (std::size_t i = 0; i < n_seeds; ++i) {
        eval::ConstrainedResult res =
            eval::constrained_optimize(m, mols[i], prop, r, c.opt_delta, c.opt_lambda,
                                       c.opt_steps);
        successes += res.success ? 1 : 0;
        os << chem::write_smiles(mols[i]) << "\t" << (res.success ? 1 : 0) << "\t"
           << res.improvement << "\t" << res.similarity << "\t"
           << (res.success ? smiles_or_empty(res.best) : std::string("-")) << "\n";
    }
    os << "# success_rate = " << static_cast<double>(successes) / n_seeds << "\n";
    write_text(c.out_dir + "/constrained.tsv", os.str());
    std::cout << "success " << successes << " / " << n_seeds << "\n";
    write_manifest(c, "constrained-optimize", {"constrained.tsv"});
    return 0;
}

int cmd_metrics(const CommonOpts& o, const std::string& generated_path) {
    RunConfig c = resolve_config(o);
    fs::create_directories(c.out_dir);
    std::vector<Molecule> gen = chem::load_smiles_file(generated_path);
    std::set<std::string> train_keys;
    std::size_t dataset_size = gen.size();
    if (!c.dataset_path.empty()) {
        std::vector<Molecule> train = load_dataset(c);
        dataset_size = train.size();
        for (const Molecule& t : train) train_keys.insert(chem::canonical_key(t));
    }
    eval::MetricsReport rep = eval::metrics(gen, train_keys, 0, dataset_size);
    write_text(c.out_dir + "/metrics.txt", format_metrics(rep));
    write_text(c.out_dir + "/metrics.json", metrics_json(rep).dump(2) + "\n");
    std::cout << format_metrics(rep);
    write_manifest(c, "metrics", {"metrics.txt", "metrics.json"});
    return 0;
}

int cmd_selfcheck(const CommonOpts& o) {
    RunConfig c = resolve_config(o);
    // small random model: invertibility, logdet sanity, gradient checks
    model::ModelConfig mc;
    mc.vocab = VocabularyConfig::qm9();
    mc.vocab.n_max = 4;
    mc.bond_coupling_layers = 2;
    mc.squeeze_factor = 2;
    mc.conv_hidden = {8};
    mc.atom_coupling_layers = 2;
    mc.gcn_dim = 8;
    mc.mlp_hidden = {8};
    model::MoFlowModel m(mc, *c.seed);
    Rng rng(*c.seed + 1);
    bool ok = true;

    // continuous round trip
    for (int trial = 0; trial < 5; ++trial) {
        auto zs = m.sample_prior(1, 1.0, rng);
        GraphTensorPair pair = m.invert(zs[0]);
        model::EncodeResult enc = m.encode(pair);
        double err = 0.0;
        for (std::size_t i = 0; i < enc.z.z_atom.size(); ++i) {
            err = std::max(err, std::fabs(enc.z.z_atom[i] - zs[0].z_atom[i]));
        }
        for (std::size_t i = 0; i < enc.z.z_bond.size(); ++i) {
            err = std::max(err, std::fabs(enc.z.z_bond[i] - zs[0].z_bond[i]));
        }
        if (err > 1e-5) {
            std::cerr << "selfcheck: round-trip error " << err << "\n";
            ok = false;
        }
    }

    // likelihood decomposition
    {
        Molecule mol = chem::parse_smiles("C=O");
        model::EncodeResult enc = m.encode(encode_onehot(mol, mc.vocab));
        if (std::fabs(enc.log_likelihood - (enc.bond_term + enc.atom_term)) > 1e-12) {
            std::cerr << "selfcheck: likelihood decomposition violated\n";
            ok = false;
        }
        if (!std::isfinite(enc.log_likelihood)) {
            std::cerr << "selfcheck: non-finite likelihood\n";
            ok = false;
        }
    }

    // gradient check through the conditional flow w.r.t. the atom matrix
    {
        Molecule mol = chem::parse_smiles("CO");
        GraphTensorPair pair = encode_onehot(mol, mc.vocab);
        Rng nrng(*c.seed + 2);
        pair = dequantize(pair, nrng);
        flow::GraphNormed gn = flow::graphnorm(resolve_bond_onehot(pair.B),
                                               VocabularyConfig::virtual_bond_channel());
        flow::GraphCondition cond = flow::GraphCondition::from({gn});
        model::ModelAccess access(m);
        Tensor a = pair.A.reshaped({1, mc.vocab.n_max, mc.vocab.k()});
        const double err = ad::finite_diff_check(
            [&](layers::Tape& t, layers::Var x) {
                layers::ForwardResult fw = access.atom().forward(t, x, cond, ad::Mode::Frozen);
                return ad::add(ad::sum(fw.output), fw.logdet);
            },
            a, 1e-5);
        if (err > 1e-4) {
            std::cerr << "selfcheck: gradient check failed, rel err " << err << "\n";
            ok = false;
        }
    }

    if (!ok) return 3;
    std::cout << "selfcheck ok\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moflow: invertible-flow molecular graph generation"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string generated_path;
    auto* preprocess = app.add_subcommand("preprocess", "filter a dataset to the vocabulary");
    auto* train = app.add_subcommand("train", "maximum-likelihood training");
    auto* generate = app.add_subcommand("generate", "sample molecules from the prior");
    auto* reconstruct = app.add_subcommand("reconstruct", "dataset round-trip rate");
    auto* encode = app.add_subcommand("encode", "emit latent codes and likelihoods");
    auto* interpolate = app.add_subcommand("interpolate", "latent path between two molecules");
    auto* grid = app.add_subcommand("grid", "decode a latent neighborhood grid");
    auto* optimize = app.add_subcommand("optimize", "gradient ascent on a property");
    auto* constrained =
        app.add_subcommand("constrained-optimize", "similarity-constrained optimization");
    auto* metrics = app.add_subcommand("metrics", "compute generation metrics");
    metrics->add_option("--generated", generated_path, "generated SMILES file")->required();
    auto* selfcheck = app.add_subcommand("selfcheck", "run internal property suites");
    for (CLI::App* cmd : {preprocess, train, generate, reconstruct, encode, interpolate, grid,
                          optimize, constrained, metrics, selfcheck}) {
        add_common(cmd, o);
    }

    try {
        app.parse(argc, argv);
        if (preprocess->parsed()) return cmd_preprocess(o);
        if (train->parsed()) return cmd_train(o);
        if (generate->parsed()) return cmd_generate(o);
        if (reconstruct->parsed()) return cmd_reconstruct(o);
        if (encode->parsed()) return cmd_encode(o);
        if (interpolate->parsed()) return cmd_interpolate(o);
        if (grid->parsed()) return cmd_grid(o);
        if (optimize->parsed()) return cmd_optimize(o);
        if (constrained->parsed()) return cmd_constrained(o);
        if (metrics->parsed()) return cmd_metrics(o, generated_path);
        if (selfcheck->parsed()) return cmd_selfcheck(o);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
