#pragma once

#include "kstone/classify.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kstone::grid {

/// Dataset keys used by the grid: "synthetic", "ccd", "endoscopic".
/// "synthetic+ccd" denotes the concatenation of the first two.
std::string dataset_label(const std::string& key);

struct ExperimentRow {
    View view = View::SUR;
    std::string dataset_i;                 // dataset key
    std::optional<std::string> dataset_ii; // empty for Baseline rows
    std::string configuration;             // "Baseline", "Two-Step TL*", "Two-Step TL"
};

/// Eight rows per view in the order Baseline (synthetic, ccd, endoscopic),
/// Two-Step TL* (synthetic->ccd, ccd->synthetic), Two-Step TL (synthetic,
/// ccd, synthetic+ccd -> endoscopic).
std::vector<ExperimentRow> table_rows(const std::vector<View>& views);

struct GridSpec {
    std::vector<View> views{View::SUR, View::SEC};
    /// key -> directory holding train/ and test/ patch sets (patchify output)
    std::map<std::string, std::filesystem::path> datasets;
    cls::BackboneSpec backbone;
    cls::HeadSpec head;
    cls::TrainConfig step1 = cls::TrainConfig::defaults(cls::Stage::STEP1);
    cls::TrainConfig step2 = cls::TrainConfig::defaults(cls::Stage::STEP2);
    int seeds = 5;
    std::uint64_t base_seed = 0;
    std::string initialization_label; // defaults from the backbone init

    static GridSpec from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
    nlohmann::json to_json() const;
};

GridSpec load_grid_spec(const std::filesystem::path& path);

struct RowResult {
    ExperimentRow row;
    cls::EvalResult accuracy_i;
    std::optional<cls::EvalResult> accuracy_ii;
};

struct GridResult {
    std::string initialization;
    std::string model;
    int seeds = 0;
    std::vector<RowResult> rows;

    nlohmann::json to_json() const;
    static GridResult from_json(const nlohmann::json& j);
    /// Fixed-width text table with the columns View, Initialization, Dataset I,
    /// Dataset II, Model, Accuracy I, Accuracy II, Configuration.
    std::string format_table() const;
    std::string to_csv() const;
};

using Logger = std::function<void(const std::string&)>;

/// Checks every referenced patch set exists before any training starts.
void check_datasets(const GridSpec& spec, const std::vector<ExperimentRow>& rows);

GridResult run_experiment_grid(const GridSpec& spec, const std::vector<ExperimentRow>& rows,
                               const Logger& log = {});
GridResult run_experiment_grid(const GridSpec& spec, const Logger& log = {});

/// results.json, results.csv and results.txt
void write_grid_result(const GridResult& r, const std::filesystem::path& dir);

} // namespace kstone::grid
