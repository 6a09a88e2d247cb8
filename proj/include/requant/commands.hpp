#pragma once

// Subcommand bodies shared by the CLI, the CLI tests and the acceptance suite.
// Every command writes its reports under the config's out_dir.

#include "requant/config.hpp"
#include "requant/errors.hpp"
#include "requant/model_zoo.hpp"
#include "requant/quantizers.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace requant {

/// A trained model plus its calibration and held-out sets.
struct Rig {
    ComputationSpec spec;
    WeightVector weights;
    CalibSet calib;
    CalibSet heldout;
    TrainResult train;
};

/// Generates data and trains from scratch, entirely in memory.
Rig build_rig(const ExperimentConfig& cfg);

/// Loads the checkpoint and data files named by the config (or their
/// defaults under out_dir).
Rig load_rig(const ExperimentConfig& cfg);

struct CommandResult {
    std::vector<std::filesystem::path> outputs;
    std::vector<std::string> failed_checks;  // empty when all invariant checks passed
};

CommandResult cmd_train(const ExperimentConfig& cfg);
CommandResult cmd_quantize(const ExperimentConfig& cfg);
CommandResult cmd_taylor_study(const ExperimentConfig& cfg);
CommandResult cmd_pqi(const ExperimentConfig& cfg);
CommandResult cmd_requant(const ExperimentConfig& cfg);
CommandResult cmd_eval(const ExperimentConfig& cfg);

struct EvalReport {
    double calib_loss = 0.0;
    double error_rate = 0.0;
    StorageReport storage;
    double max_matvec_diff = 0.0;  // sparse path vs dense reconstruction, over all samples and layers
};

EvalReport evaluate_artifact(const QuantizedModel& qm, const CalibSet& calib);

/// Exit code for an exception kind: config 2, format 3, numerical 4, training 5.
int exit_code_for(ErrorKind kind);
inline constexpr int kExitCheckFailed = 6;

}  // namespace requant
