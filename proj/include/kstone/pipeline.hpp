#pragma once

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace kstone::pipeline {

/// Stage names in dependency order.
inline const std::vector<std::string> kStages = {"pad", "train_gen", "generate", "upscale",
                                                 "evaluate", "patchify", "grid"};

struct StageRecord {
    std::string name;
    std::string status; // "ran", "cached" or "disabled"
    std::string stamp;
    std::vector<std::string> outputs; // paths relative to the run directory
};

struct PipelineRun {
    std::filesystem::path run_dir;
    nlohmann::json config; // resolved snapshot, replayable
    std::vector<StageRecord> stages;

    nlohmann::json to_json() const;
    static PipelineRun from_json(const nlohmann::json& j, const std::filesystem::path& run_dir);
};

using Logger = std::function<void(const std::string&)>;

/// Resolves relative paths against `base`, fills defaults and validates.
nlohmann::json resolve_config(nlohmann::json cfg, const std::filesystem::path& base);

/// Runs the enabled stages. A stage whose stamp (config + upstream stamps)
/// matches a completed earlier run is reused. Failures raise StageError and
/// leave earlier outputs in place. Writes <run_dir>/run.json.
PipelineRun run_pipeline(const std::filesystem::path& config_path, const Logger& log = {});
PipelineRun run_pipeline(const nlohmann::json& config, const std::filesystem::path& base, const Logger& log = {});

PipelineRun load_run(const std::filesystem::path& run_dir);

/// Renders <run_dir>/report: per-view property distribution plots, the side by
/// side heatmap, drift and SIFID tables and the results table, all read from
/// recorded stage outputs. Returns the report directory.
std::filesystem::path emit_report(const PipelineRun& run);

/// Run directory for a config: its "output_dir", else $KSTONE_CACHE_ROOT/<stem>, else runs/<stem>.
std::filesystem::path default_run_dir(const nlohmann::json& config, const std::filesystem::path& config_path);

} // namespace kstone::pipeline
