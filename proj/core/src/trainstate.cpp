#include "prefalign/trainstate.hpp"

#include <algorithm>
#include <cstdint>
#include <stdexcept>

#include "prefalign/checkpoint.hpp"

namespace prefalign {

namespace {

double state_scalar(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& t : tensors) {
        if (t.name == name) return t.data.at(0);
    }
    throw std::runtime_error("trainer state missing '" + name + "'");
}

}  // namespace

void save_trainer_state(const std::string& path, const PolicyModel& model,
                        const std::vector<std::pair<std::string, Adam*>>& optimizers,
                        const TrainerState& state) {
    auto tensors = model.export_tensors();
    tensors.push_back({"trainer.step", {}, {static_cast<double>(state.step)}});
    tensors.push_back({"trainer.epoch", {}, {static_cast<double>(state.epoch)}});
    tensors.push_back({"trainer.batch_idx", {}, {static_cast<double>(state.batch_idx)}});
    for (const auto& [prefix, opt] : optimizers) {
        tensors.push_back({"trainer." + prefix + ".t", {}, {static_cast<double>(opt->t())}});
        for (std::size_t i = 0; i < opt->params().size(); ++i) {
            const Shape shape{static_cast<std::int64_t>(opt->moments1()[i].size())};
            tensors.push_back(
                {"trainer." + prefix + ".m." + std::to_string(i), shape, opt->moments1()[i]});
            tensors.push_back(
                {"trainer." + prefix + ".v." + std::to_string(i), shape, opt->moments2()[i]});
        }
    }
    write_checkpoint(path, tensors);
}

TrainerState load_trainer_state(const std::string& path, PolicyModel& model,
                                const std::vector<std::pair<std::string, Adam*>>& optimizers) {
    auto tensors = read_checkpoint(path);
    model.import_tensors(tensors);
    TrainerState st;
    st.step = static_cast<int>(state_scalar(tensors, "trainer.step"));
    st.epoch = static_cast<int>(state_scalar(tensors, "trainer.epoch"));
    st.batch_idx = static_cast<int>(state_scalar(tensors, "trainer.batch_idx"));
    for (const auto& [prefix, opt] : optimizers) {
        opt->set_t(static_cast<std::int64_t>(state_scalar(tensors, "trainer." + prefix + ".t")));
        for (std::size_t i = 0; i < opt->params().size(); ++i) {
            for (const char* which : {"m", "v"}) {
                const std::string name =
                    "trainer." + prefix + "." + std::string(which) + "." + std::to_string(i);
                auto it = std::find_if(tensors.begin(), tensors.end(),
                                       [&](const NamedTensor& t) { return t.name == name; });
                if (it == tensors.end()) {
                    throw std::runtime_error("trainer state missing '" + name + "'");
                }
                auto& slot = (which[0] == 'm') ? opt->moments1()[i] : opt->moments2()[i];
                if (it->data.size() != slot.size()) {
                    throw std::runtime_error("trainer state '" + name + "' has wrong size");
                }
                slot = it->data;
            }
        }
    }
    return st;
}

}  // namespace prefalign
