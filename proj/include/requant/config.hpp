#pragma once

// Experiment configuration: a flat key/value map validated against a fixed
// schema. Files use one `key = value` per line; `#` starts a comment.

#include "requant/model_zoo.hpp"
#include "requant/pipeline.hpp"
#include "requant/quantizers.hpp"
#include "requant/sensitivity.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace requant {

class ExperimentConfig {
public:
    /// All schema keys at their defaults.
    ExperimentConfig();

    /// Sets a key after validating it; throws ConfigError on unknown keys or bad values.
    void set(const std::string& key, const std::string& value);
    void load_file(const std::filesystem::path& path);
    void load_text(const std::string& text);

    const std::string& get(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;
    std::vector<std::size_t> get_sizes(const std::string& key) const;

    /// Sorted `key=value` lines of every experiment-defining key (paths excluded).
    std::string canonical_text() const;
    /// FNV-1a 64 of canonical_text(), as 16 hex digits.
    std::string hash() const;

    static const std::vector<std::string>& keys();

    /// Cross-key checks run before any command does work.
    void validate() const;

    // Typed views.
    std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
    ComputationSpec computation_spec() const;
    GeneratorKind generator() const;
    TrainOptions train_options() const;
    QuantConfig quant_config() const;
    PipelineOptions pipeline_options() const;
    FisherSign fisher_sign() const;
    std::filesystem::path out_dir() const { return get("out_dir"); }
    /// Explicit path if set, else out_dir / fallback.
    std::filesystem::path path_or(const std::string& key, const std::string& fallback) const;

private:
    std::map<std::string, std::string> values_;
};

/// Tab-separated table with a header row, preceded by a `# config_hash` line.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }
    std::string to_tsv(const std::string& config_hash) const;
};

/// Fixed scientific formatting (%.9e) used in every report cell.
std::string fmt(double v);
std::string fmt(std::size_t v);

}  // namespace requant
