#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prefalign/adam.hpp"
#include "prefalign/model.hpp"

namespace prefalign {

// Position of a trainer inside its run: completed optimizer steps, the epoch
// being processed, and the next batch index within that epoch.
struct TrainerState {
    int step = 0;
    int epoch = 0;
    int batch_idx = 0;
};

// Snapshots model weights, trainer position, and the full state of every named
// optimizer into a single checkpoint file, so a run can resume bit-exactly.
void save_trainer_state(const std::string& path, const PolicyModel& model,
                        const std::vector<std::pair<std::string, Adam*>>& optimizers,
                        const TrainerState& state);

TrainerState load_trainer_state(const std::string& path, PolicyModel& model,
                                const std::vector<std::pair<std::string, Adam*>>& optimizers);

}  // namespace prefalign
