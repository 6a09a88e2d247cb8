#include "requant/commands.hpp"
#include "requant/errors.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

using namespace requant;

int main(int argc, char** argv) {
    CLI::App app{"Post-quantization integral and Dense-and-Sparse requantization on toy MLPs"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::map<std::string, std::optional<std::string>> flag_values = {
        {"seed", {}}, {"out_dir", {}},   {"bits", {}},  {"group_size", {}}, {"mode", {}},       {"ro", {}},
        {"rs", {}},   {"alpha", {}},     {"beta", {}},  {"intervals", {}},  {"checkpoint", {}}, {"calib", {}},
        {"artifact", {}},
    };

    app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "extra key=value overrides");
    auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
        app.add_option(name, flag_values[key], help);
    };
    flag("--seed", "seed", "master seed");
    flag("--out-dir", "out_dir", "directory for reports and artifacts");
    flag("--bits", "bits", "code bits N");
    flag("--group-size", "group_size", "uniform quantizer group size");
    flag("--mode", "mode", "uniform or kmeans");
    flag("--ro", "ro", "outlier ratio in percent");
    flag("--rs", "rs", "significant-weight ratio in percent");
    flag("--alpha", "alpha", "temperature grid step");
    flag("--beta", "beta", "percent detached per pass");
    flag("--intervals", "intervals", "PQI rectangle count");
    flag("--checkpoint", "checkpoint", "model checkpoint path");
    flag("--calib", "calib", "calibration set path");
    flag("--artifact", "artifact", "quantized artifact path");

    const std::vector<std::pair<std::string, std::function<CommandResult(const ExperimentConfig&)>>> commands = {
        {"train", cmd_train},     {"quantize", cmd_quantize}, {"taylor-study", cmd_taylor_study},
        {"pqi", cmd_pqi},         {"requant", cmd_requant},   {"eval", cmd_eval},
    };
    for (const auto& [name, fn] : commands) {
        app.add_subcommand(name)->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg;
        if (!config_path.empty()) {
            cfg.load_file(config_path);
        }
        for (const auto& [key, value] : flag_values) {
            if (value) {
                cfg.set(key, *value);
            }
        }
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            }
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        for (const auto& [name, fn] : commands) {
            if (app.got_subcommand(name)) {
                const auto result = fn(cfg);
                for (const auto& p : result.outputs) {
                    std::printf("wrote %s\n", p.string().c_str());
                }
                for (const auto& f : result.failed_checks) {
                    std::fprintf(stderr, "check failed: %s\n", f.c_str());
                }
                return result.failed_checks.empty() ? 0 : kExitCheckFailed;
            }
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "%s error: %s\n", to_string(e.kind()), e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
