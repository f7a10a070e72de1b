#include "prefalign/rundir.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prefalign {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

RunDir::RunDir(std::string path, const RunConfig& config) : path_(std::move(path)), config_(config) {
    fs::create_directories(path_);
    fs::create_directories(fs::path(path_) / "checkpoints");
    fs::create_directories(fs::path(path_) / "markers");

    const std::string snapshot_path = file("config.json");
    const ordered_json mine = config_.to_json();
    if (fs::exists(snapshot_path)) {
        std::ifstream is(snapshot_path);
        ordered_json stored = ordered_json::parse(is, nullptr, false);
        if (stored.is_discarded()) {
            throw std::runtime_error("run dir '" + path_ + "' has a corrupt config snapshot");
        }
        auto diff = config_diff(stored, mine);
        if (!diff.empty()) {
            std::ostringstream os;
            os << "config does not match the snapshot in '" << path_ << "'; differing keys:";
            for (const auto& k : diff) os << " " << k;
            os << " (start a fresh run dir or restore the original config)";
            throw std::runtime_error(os.str());
        }
    } else {
        std::ofstream os(snapshot_path, std::ios::trunc);
        os << mine.dump(2) << "\n";
        if (!os) throw std::runtime_error("cannot write config snapshot to '" + path_ + "'");
    }
}

std::string RunDir::file(const std::string& name) const {
    return (fs::path(path_) / name).string();
}

std::string RunDir::checkpoint(const std::string& name) const {
    return (fs::path(path_) / "checkpoints" / name).string();
}

void RunDir::append_metrics(const ordered_json& row) {
    std::ofstream os(file("metrics.jsonl"), std::ios::app);
    os << row.dump() << "\n";
    if (!os) throw std::runtime_error("cannot append to metrics.jsonl in '" + path_ + "'");
}

void RunDir::append_timing(const std::string& stage, std::int64_t step, double wall_ms) {
    ordered_json row;
    row["stage"] = stage;
    row["step"] = step;
    row["wall_ms"] = wall_ms;
    std::ofstream os(file("timings.jsonl"), std::ios::app);
    os << row.dump() << "\n";
}

bool RunDir::stage_done(const std::string& stage) const {
    return fs::exists(fs::path(path_) / "markers" / (stage + ".done"));
}

void RunDir::mark_done(const std::string& stage) {
    std::ofstream os((fs::path(path_) / "markers" / (stage + ".done")).string(), std::ios::trunc);
    os << "done\n";
}

void RunDir::truncate_metrics_after(const std::string& stage, std::int64_t step) {
    const std::string mpath = file("metrics.jsonl");
    if (!fs::exists(mpath)) return;
    std::ifstream is(mpath);
    std::vector<std::string> kept;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ordered_json row = ordered_json::parse(line, nullptr, false);
        if (!row.is_discarded() && row.contains("stage") && row["stage"] == stage &&
            row.contains("step") && row["step"].get<std::int64_t>() > step) {
            continue;
        }
        kept.push_back(line);
    }
    is.close();
    std::ofstream os(mpath, std::ios::trunc);
    for (const auto& l : kept) os << l << "\n";
}

}  // namespace prefalign
