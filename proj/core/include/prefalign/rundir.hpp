#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "prefalign/runconfig.hpp"

namespace prefalign {

// A run directory: immutable config snapshot, metrics/timings logs, stage
// markers, and checkpoints. Metrics lines hold only deterministic fields so
// identical seeds give byte-identical metrics.jsonl; wall-clock timings go to
// a separate sidecar that replay comparisons ignore.
class RunDir {
public:
    // Opens (creating if needed) `path`. On first open the config is written
    // as the snapshot; on later opens the snapshot must match exactly or this
    // throws listing the differing key paths.
    RunDir(std::string path, const RunConfig& config);

    const std::string& path() const { return path_; }
    const RunConfig& config() const { return config_; }

    std::string file(const std::string& name) const;
    std::string checkpoint(const std::string& name) const;  // <path>/checkpoints/<name>

    // Appends one compact JSON line to metrics.jsonl.
    void append_metrics(const nlohmann::ordered_json& row);
    // Appends {stage, step, wall_ms} to timings.jsonl (non-deterministic lane).
    void append_timing(const std::string& stage, std::int64_t step, double wall_ms);

    bool stage_done(const std::string& stage) const;
    void mark_done(const std::string& stage);

    // Drops metrics lines recorded after `step` for `stage` (used on resume so
    // a rerun of a partially-logged step never duplicates lines).
    void truncate_metrics_after(const std::string& stage, std::int64_t step);

private:
    std::string path_;
    RunConfig config_;
};

}  // namespace prefalign
