#include "requant/config.hpp"

#include "requant/errors.hpp"
#include "requant/rng.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace requant {

namespace {

enum class ValueType { integer, real, boolean, text, real_list, size_list, choice };

struct KeySpec {
    const char* key;
    ValueType type;
    const char* fallback;
    std::vector<std::string> choices = {};
    bool is_path = false;
};

const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> s = {
        {"seed", ValueType::integer, "1"},
        {"input_dim", ValueType::integer, "32"},
        {"hidden", ValueType::size_list, "64,64"},
        {"classes", ValueType::integer, "8"},
        {"activation", ValueType::choice, "relu", {"relu", "tanh"}},
        {"generator", ValueType::choice, "gaussian_clusters", {"gaussian_clusters", "overlapping_clusters"}},
        {"calib_n", ValueType::integer, "256"},
        {"heldout_n", ValueType::integer, "256"},
        {"train_steps", ValueType::integer, "300"},
        {"lr", ValueType::real, "0.05"},
        {"batch_size", ValueType::integer, "32"},
        {"mode", ValueType::choice, "uniform", {"uniform", "kmeans"}},
        {"bits", ValueType::integer, "3"},
        {"group_size", ValueType::integer, "32"},
        {"int_range", ValueType::choice, "symmetric", {"symmetric", "paper"}},
        {"kmeans_iters", ValueType::integer, "30"},
        {"act_exponent", ValueType::real, "0"},
        {"ro", ValueType::real, "0.45"},
        {"rs", ValueType::real, "0.05"},
        {"alpha", ValueType::real, "0.1"},
        {"beta", ValueType::real, "0.025"},
        {"intervals", ValueType::integer, "32"},
        {"interval_list", ValueType::size_list, "4,8,16,32"},
        {"lambdas", ValueType::real_list, "0.1,0.05,0.01,0.005,0.001"},
        {"coverage_percents", ValueType::real_list, "0.15,0.71,1,5,5.25,10,25,50,100"},
        {"fisher_sign", ValueType::choice, "paper", {"paper", "conventional"}},
        {"quadrature", ValueType::choice, "right", {"right", "midpoint"}},
        {"include_bias", ValueType::boolean, "false"},
        {"significant_scope", ValueType::choice, "global", {"global", "per_layer"}},
        {"out_dir", ValueType::text, "out", {}, true},
        {"checkpoint", ValueType::text, "", {}, true},
        {"calib", ValueType::text, "", {}, true},
        {"heldout", ValueType::text, "", {}, true},
        {"artifact", ValueType::text, "", {}, true},
    };
    return s;
}

const KeySpec& find_key(const std::string& key) {
    for (const auto& k : schema()) {
        if (key == k.key) {
            return k;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(trim(item));
    }
    return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno != 0) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
    return x;
}

double parse_real(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno != 0 || !std::isfinite(x)) {
        throw ConfigError("config key '" + key + "' expects a finite number, got '" + v + "'");
    }
    return x;
}

void validate_value(const KeySpec& spec, const std::string& v) {
    switch (spec.type) {
        case ValueType::integer:
            if (parse_int(spec.key, v) < 0) {
                throw ConfigError("config key '" + std::string(spec.key) + "' must be >= 0");
            }
            break;
        case ValueType::real:
            parse_real(spec.key, v);
            break;
        case ValueType::boolean:
            if (v != "true" && v != "false") {
                throw ConfigError("config key '" + std::string(spec.key) + "' expects true or false");
            }
            break;
        case ValueType::text:
            break;
        case ValueType::real_list:
            for (const auto& item : split_list(v)) {
                parse_real(spec.key, item);
            }
            break;
        case ValueType::size_list:
            for (const auto& item : split_list(v)) {
                if (parse_int(spec.key, item) < 1) {
                    throw ConfigError("config key '" + std::string(spec.key) + "' entries must be >= 1");
                }
            }
            break;
        case ValueType::choice:
            if (std::find(spec.choices.begin(), spec.choices.end(), v) == spec.choices.end()) {
                throw ConfigError("config key '" + std::string(spec.key) + "' does not accept '" + v + "'");
            }
            break;
    }
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    for (const auto& k : schema()) {
        values_[k.key] = k.fallback;
    }
}

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> out = [] {
        std::vector<std::string> k;
        for (const auto& s : schema()) {
            k.push_back(s.key);
        }
        return k;
    }();
    return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    const auto& spec = find_key(key);
    const std::string v = trim(value);
    validate_value(spec, v);
    values_[key] = v;
}

void ExperimentConfig::load_text(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

void ExperimentConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    load_text(ss.str());
}

const std::string& ExperimentConfig::get(const std::string& key) const {
    find_key(key);
    return values_.at(key);
}

std::int64_t ExperimentConfig::get_int(const std::string& key) const { return parse_int(key, get(key)); }

double ExperimentConfig::get_double(const std::string& key) const { return parse_real(key, get(key)); }

bool ExperimentConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

std::vector<double> ExperimentConfig::get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(get(key))) {
        out.push_back(parse_real(key, item));
    }
    return out;
}

std::vector<std::size_t> ExperimentConfig::get_sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(get(key))) {
        out.push_back(static_cast<std::size_t>(parse_int(key, item)));
    }
    return out;
}

std::string ExperimentConfig::canonical_text() const {
    std::string out;
    for (const auto& [key, value] : values_) {
        if (find_key(key).is_path) {
            continue;
        }
        out += key + "=" + value + "\n";
    }
    return out;
}

std::string ExperimentConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_text())));
    return buf;
}

ComputationSpec ExperimentConfig::computation_spec() const {
    ComputationSpec spec;
    spec.input_dim = static_cast<std::size_t>(get_int("input_dim"));
    spec.hidden = get_sizes("hidden");
    spec.classes = static_cast<std::size_t>(get_int("classes"));
    spec.activation = get("activation") == "tanh" ? Activation::tanh : Activation::relu;
    spec.validate();
    return spec;
}

GeneratorKind ExperimentConfig::generator() const {
    return get("generator") == "overlapping_clusters" ? GeneratorKind::overlapping_clusters
                                                      : GeneratorKind::gaussian_clusters;
}

TrainOptions ExperimentConfig::train_options() const {
    TrainOptions t;
    t.steps = static_cast<std::size_t>(get_int("train_steps"));
    t.learning_rate = get_double("lr");
    t.batch_size = static_cast<std::size_t>(get_int("batch_size"));
    return t;
}

QuantConfig ExperimentConfig::quant_config() const {
    QuantConfig q;
    q.bits = static_cast<int>(get_int("bits"));
    q.mode = get("mode") == "kmeans" ? QuantMode::kmeans_codebook : QuantMode::uniform_group;
    q.group_size = static_cast<std::size_t>(get_int("group_size"));
    q.int_range = get("int_range") == "paper" ? IntRange::paper_literal : IntRange::symmetric_standard;
    q.kmeans_iters = static_cast<std::size_t>(get_int("kmeans_iters"));
    q.seed = derive_seed(seed(), "quantizer");
    q.act_exponent = get_double("act_exponent");
    q.validate();
    return q;
}

PipelineOptions ExperimentConfig::pipeline_options() const {
    PipelineOptions p;
    p.r_o = get_double("ro");
    p.r_s = get_double("rs");
    p.alpha = get_double("alpha");
    p.beta = get_double("beta");
    p.intervals = static_cast<std::size_t>(get_int("intervals"));
    p.include_bias = get_bool("include_bias");
    p.per_layer_significant = get("significant_scope") == "per_layer";
    p.rule = get("quadrature") == "midpoint" ? QuadratureRule::midpoint : QuadratureRule::right_endpoint;
    if (p.intervals == 0) {
        throw ConfigError("intervals must be >= 1");
    }
    return p;
}

void ExperimentConfig::validate() const {
    computation_spec().validate();
    quant_config().validate();
    const auto p = pipeline_options();
    if (!(p.alpha > 0.0 && p.alpha <= 1.0)) {
        throw ParameterError("alpha must lie in (0, 1]");
    }
    if (!(p.r_o >= 0.0 && p.r_o <= 100.0)) {
        throw ParameterError("ro must lie in [0, 100]");
    }
    detach_pass_count(p.r_s, p.beta);
}

FisherSign ExperimentConfig::fisher_sign() const {
    return get("fisher_sign") == "conventional" ? FisherSign::conventional : FisherSign::paper;
}

std::filesystem::path ExperimentConfig::path_or(const std::string& key, const std::string& fallback) const {
    const auto& v = get(key);
    return v.empty() ? out_dir() / fallback : std::filesystem::path(v);
}

std::string Table::to_tsv(const std::string& config_hash) const {
    std::string out = "# config_hash\t" + config_hash + "\n";
    auto emit = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            out += cells[i];
            out += i + 1 < cells.size() ? '\t' : '\n';
        }
    };
    emit(header);
    for (const auto& row : rows) {
        emit(row);
    }
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9e", v);
    return buf;
}

std::string fmt(std::size_t v) { return std::to_string(v); }

}  // namespace requant
