#include "moflow/runconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "moflow/errors.hpp"

namespace moflow {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_size(key, item));
    }
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
    return out;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

}  // namespace

void RunConfig::validate() const {
    if (!seed) throw ConfigError("seed: required but not set");
    if (vocab_preset != "qm9" && vocab_preset != "zinc250k") {
        throw ConfigError("vocab.preset: unknown preset '" + vocab_preset + "'");
    }
    if (temperature < 0.0) throw ConfigError("sample.temperature: must be >= 0");
    if (opt_delta < 0.0 || opt_delta > 1.0) throw ConfigError("optimize.delta: must be in [0,1]");
    if (train_batch_size == 0) throw ConfigError("train.batch_size: must be >= 1");
    if (fingerprint_bits == 0) throw ConfigError("fingerprint.bits: must be >= 1");
    model.validate();
}

RunConfig parse_run_config(const std::string& text) {
    // two passes so the preset is applied before any explicit overrides
    std::vector<std::pair<std::string, std::string>> entries;
    {
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const std::size_t eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            }
            entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
    }
    RunConfig c;
    for (const auto& [key, val] : entries) {
        if (key == "vocab.preset") {
            c.vocab_preset = val;
            if (val == "zinc250k") {
                c.model.vocab = VocabularyConfig::zinc250k();
                c.model.squeeze_factor = 2;
                c.model.atom_coupling_layers = 38;
                c.model.conv_hidden = {512, 512};
                c.model.gcn_dim = 256;
                c.model.mlp_hidden = {512, 64};
            } else if (val == "qm9") {
                c.model.vocab = VocabularyConfig::qm9();
            } else {
                throw ConfigError("vocab.preset: unknown preset '" + val + "'");
            }
        }
    }
    for (const auto& [key, val] : entries) {
        if (key == "vocab.preset") {
            continue;  // handled above
        } else if (key == "vocab.n_max") {
            c.model.vocab.n_max = parse_size(key, val);
        } else if (key == "model.bond_coupling_layers") {
            c.model.bond_coupling_layers = parse_size(key, val);
        } else if (key == "model.squeeze_factor") {
            c.model.squeeze_factor = parse_size(key, val);
        } else if (key == "model.conv_hidden") {
            c.model.conv_hidden = parse_size_list(key, val);
        } else if (key == "model.atom_coupling_layers") {
            c.model.atom_coupling_layers = parse_size(key, val);
        } else if (key == "model.gcn_dim") {
            c.model.gcn_dim = parse_size(key, val);
        } else if (key == "model.mlp_hidden") {
            c.model.mlp_hidden = parse_size_list(key, val);
        } else if (key == "train.epochs") {
            c.train_epochs = parse_size(key, val);
        } else if (key == "train.batch_size") {
            c.train_batch_size = parse_size(key, val);
        } else if (key == "train.learning_rate") {
            c.train_learning_rate = parse_double(key, val);
        } else if (key == "sample.temperature") {
            c.temperature = parse_double(key, val);
        } else if (key == "sample.count") {
            c.sample_count = parse_size(key, val);
        } else if (key == "optimize.lambda") {
            c.opt_lambda = parse_double(key, val);
        } else if (key == "optimize.steps") {
            c.opt_steps = parse_size(key, val);
        } else if (key == "optimize.delta") {
            c.opt_delta = parse_double(key, val);
        } else if (key == "optimize.property") {
            c.opt_property = val;
        } else if (key == "fingerprint.bits") {
            c.fingerprint_bits = parse_size(key, val);
        } else if (key == "paths.dataset") {
            c.dataset_path = val;
        } else if (key == "paths.checkpoint") {
            c.checkpoint_path = val;
        } else if (key == "paths.out") {
            c.out_dir = val;
        } else if (key == "seed") {
            c.seed = parse_size(key, val);
        } else {
            throw ConfigError("unknown config key: " + key);
        }
    }
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
    std::ostringstream os;
    os << "vocab.preset = " << c.vocab_preset << "\n";
    os << "vocab.n_max = " << c.model.vocab.n_max << "\n";
    os << "model.bond_coupling_layers = " << c.model.bond_coupling_layers << "\n";
    os << "model.squeeze_factor = " << c.model.squeeze_factor << "\n";
    os << "model.conv_hidden = " << join(c.model.conv_hidden) << "\n";
    os << "model.atom_coupling_layers = " << c.model.atom_coupling_layers << "\n";
    os << "model.gcn_dim = " << c.model.gcn_dim << "\n";
    os << "model.mlp_hidden = " << join(c.model.mlp_hidden) << "\n";
    os << "train.epochs = " << c.train_epochs << "\n";
    os << "train.batch_size = " << c.train_batch_size << "\n";
    os << "train.learning_rate = " << c.train_learning_rate << "\n";
    os << "sample.temperature = " << c.temperature << "\n";
    os << "sample.count = " << c.sample_count << "\n";
    os << "optimize.lambda = " << c.opt_lambda << "\n";
    os << "optimize.steps = " << c.opt_steps << "\n";
    os << "optimize.delta = " << c.opt_delta << "\n";
    os << "optimize.property = " << c.opt_property << "\n";
    os << "fingerprint.bits = " << c.fingerprint_bits << "\n";
    if (!c.dataset_path.empty()) os << "paths.dataset = " << c.dataset_path << "\n";
    if (!c.checkpoint_path.empty()) os << "paths.checkpoint = " << c.checkpoint_path << "\n";
    os << "paths.out = " << c.out_dir << "\n";
    if (c.seed) os << "seed = " << *c.seed << "\n";
    return os.str();
}

}  // namespace moflow
