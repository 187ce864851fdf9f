#include "kstone/grid.hpp"

#include "kstone/error.hpp"

#include <fstream>
#include <sstream>

namespace kstone::grid {

namespace fs = std::filesystem;

std::string dataset_label(const std::string& key) {
    if (key == "synthetic") return "Synthetic";
    if (key == "ccd") return "CCD-camera";
    if (key == "endoscopic") return "Endoscopic";
    if (key == "synthetic+ccd") return "Synthetic + CCD-camera";
    throw ConfigError("unknown dataset key '" + key + "'");
}

std::vector<ExperimentRow> table_rows(const std::vector<View>& views) {
    std::vector<ExperimentRow> rows;
    for (View v : views) {
        for (const char* d : {"synthetic", "ccd", "endoscopic"}) rows.push_back({v, d, std::nullopt, "Baseline"});
        rows.push_back({v, "synthetic", std::string("ccd"), "Two-Step TL*"});
        rows.push_back({v, "ccd", std::string("synthetic"), "Two-Step TL*"});
        for (const char* d : {"synthetic", "ccd", "synthetic+ccd"})
            rows.push_back({v, d, std::string("endoscopic"), "Two-Step TL"});
    }
    return rows;
}

namespace {

std::string default_init_label(cls::Init i) {
    switch (i) {
    case cls::Init::GENERIC_PRETRAINED: return "Pretrained";
    case cls::Init::FROM_CHECKPOINT: return "Checkpoint";
    case cls::Init::SCRATCH: return "Scratch";
    }
    return "?";
}

std::string model_label(const std::string& arch) {
    if (arch == "resnet50") return "ResNet50";
    if (arch == "small_cnn") return "SmallCNN";
    return arch;
}

std::vector<std::string> parts_of(const std::string& key) {
    if (key == "synthetic+ccd") return {"synthetic", "ccd"};
    return {key};
}

patch::PatchSet filter_view(const patch::PatchSet& ps, View v) {
    patch::PatchSet out;
    out.name = ps.name + "_" + to_string(v);
    out.patch_size = ps.patch_size;
    for (const auto& p : ps.patches)
        if (p.view == v) out.patches.push_back(p);
    return out;
}

nlohmann::json eval_json(const cls::EvalResult& e) {
    return {{"mean", e.accuracy_mean}, {"std", e.accuracy_std}, {"runs", e.runs},
            {"per_class", e.per_class_accuracy}, {"view", to_string(e.view)}, {"label", e.config_label}};
}

cls::EvalResult eval_from_json(const nlohmann::json& j) {
    cls::EvalResult e;
    e.accuracy_mean = j.at("mean");
    e.accuracy_std = j.at("std");
    e.runs = j.at("runs").get<std::vector<double>>();
    e.per_class_accuracy = j.at("per_class").get<std::map<std::string, double>>();
    e.view = parse_view(j.at("view"));
    e.config_label = j.at("label");
    return e;
}

std::size_t display_width(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
}

} // namespace

GridSpec GridSpec::from_json(const nlohmann::json& j, const fs::path& base) {
    GridSpec g;
    try {
        if (j.contains("views")) {
            g.views.clear();
            for (const auto& v : j["views"]) g.views.push_back(parse_view(v.get<std::string>()));
        }
        for (const auto& [k, v] : j.at("datasets").items()) {
            dataset_label(k);
            fs::path p = v.get<std::string>();
            if (p.is_relative() && !base.empty()) p = base / p;
            g.datasets[k] = p;
        }
        if (j.contains("backbone")) {
            const auto& b = j["backbone"];
            g.backbone.architecture = b.value("architecture", g.backbone.architecture);
            if (b.contains("init")) g.backbone.init = cls::parse_init(b["init"].get<std::string>());
            if (b.contains("weights") && !b["weights"].is_null()) {
                fs::path w = b["weights"].get<std::string>();
                if (w.is_relative() && !base.empty()) w = base / w;
                g.backbone.weights = w;
            }
        }
        if (j.contains("head")) {
            const auto& h = j["head"];
            g.head.widths = h.value("widths", g.head.widths);
            g.head.batch_norm = h.value("batch_norm", g.head.batch_norm);
            g.head.dropout = h.value("dropout", g.head.dropout);
        }
        g.step1 = cls::TrainConfig::from_json(j.value("step1", nlohmann::json::object()), cls::Stage::STEP1);
        g.step2 = cls::TrainConfig::from_json(j.value("step2", nlohmann::json::object()), cls::Stage::STEP2);
        g.seeds = j.value("seeds", g.seeds);
        g.base_seed = j.value("base_seed", g.base_seed);
        g.initialization_label = j.value("initialization_label", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid spec: ") + e.what());
    } catch (const Error& e) {
        throw ConfigError(std::string("grid spec: ") + e.what());
    }
    if (g.seeds < 1) throw ConfigError("grid spec: seeds must be at least 1");
    g.backbone.validate();
    g.head.validate();
    return g;
}

nlohmann::json GridSpec::to_json() const {
    nlohmann::json j;
    std::vector<std::string> vs;
    for (View v : views) vs.push_back(to_string(v));
    j["views"] = vs;
    for (const auto& [k, p] : datasets) j["datasets"][k] = p.string();
    j["backbone"] = {{"architecture", backbone.architecture}, {"init", cls::to_string(backbone.init)}};
    if (backbone.weights) j["backbone"]["weights"] = backbone.weights->string();
    j["head"] = {{"widths", head.widths}, {"batch_norm", head.batch_norm}, {"dropout", head.dropout}};
    j["step1"] = step1.to_json();
    j["step2"] = step2.to_json();
    j["seeds"] = seeds;
    j["base_seed"] = base_seed;
    if (!initialization_label.empty()) j["initialization_label"] = initialization_label;
    return j;
}

GridSpec load_grid_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grid spec " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return GridSpec::from_json(j, path.parent_path());
}

void check_datasets(const GridSpec& spec, const std::vector<ExperimentRow>& rows) {
    std::vector<std::string> missing;
    auto need = [&](const std::string& key) {
        for (const auto& part : parts_of(key)) {
            auto it = spec.datasets.find(part);
            if (it == spec.datasets.end()) {
                missing.push_back(part + " (not configured)");
                continue;
            }
            for (const char* side : {"train", "test"})
                if (!fs::exists(it->second / side / "index.csv"))
                    missing.push_back(part + " (" + (it->second / side / "index.csv").string() + ")");
        }
    };
    for (const auto& r : rows) {
        need(r.dataset_i);
        if (r.dataset_ii) need(*r.dataset_ii);
    }
    if (missing.empty()) return;
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string msg = "missing patch sets:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
}

GridResult run_experiment_grid(const GridSpec& spec, const std::vector<ExperimentRow>& rows, const Logger& log) {
    check_datasets(spec, rows);
    GridResult out;
    out.initialization = spec.initialization_label.empty() ? default_init_label(spec.backbone.init)
                                                           : spec.initialization_label;
    out.model = model_label(spec.backbone.architecture);
    out.seeds = spec.seeds;

    std::map<std::string, std::pair<patch::PatchSet, patch::PatchSet>> loaded;
    auto sets = [&](const std::string& key, View v) {
        patch::PatchSet tr, te;
        for (const auto& part : parts_of(key)) {
            auto it = loaded.find(part);
            if (it == loaded.end()) {
                const fs::path dir = spec.datasets.at(part);
                it = loaded.emplace(part, std::make_pair(patch::load_patchset(dir / "train"),
                                                         patch::load_patchset(dir / "test"))).first;
            }
            tr = tr.patches.empty() ? filter_view(it->second.first, v)
                                    : patch::concat(tr, filter_view(it->second.first, v), key);
            te = te.patches.empty() ? filter_view(it->second.second, v)
                                    : patch::concat(te, filter_view(it->second.second, v), key);
        }
        tr.name = key + "_" + to_string(v) + "_train";
        te.name = key + "_" + to_string(v) + "_test";
        return std::make_pair(tr, te);
    };

    struct Stage1 {
        std::shared_ptr<cls::Classifier> model;
        cls::RunResult result;
    };
    std::map<std::string, Stage1> cache; // "view|dataset|seed"
    std::vector<std::vector<cls::RunResult>> acc_i(rows.size()), acc_ii(rows.size());
    for (int s = 0; s < spec.seeds; ++s) {
        const std::uint64_t seed = spec.base_seed + static_cast<std::uint64_t>(s);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& row = rows[r];
            const std::string key = to_string(row.view) + "|" + row.dataset_i + "|" + std::to_string(seed);
            auto it = cache.find(key);
            if (it == cache.end()) {
                const auto [tr, te] = sets(row.dataset_i, row.view);
                cls::TrainConfig c1 = spec.step1;
                c1.seed = seed;
                if (log) log("step 1: " + to_string(row.view) + " " + row.dataset_i + " seed " + std::to_string(seed));
                Stage1 st;
                st.model = cls::train_step1(spec.backbone, spec.head, tr, c1);
                st.result = cls::evaluate(*st.model, te);
                it = cache.emplace(key, std::move(st)).first;
            }
            acc_i[r].push_back(it->second.result);
            if (row.dataset_ii) {
                const auto [tr, te] = sets(*row.dataset_ii, row.view);
                cls::TrainConfig c2 = spec.step2;
                c2.seed = mix_seed(seed, 2);
                if (log)
                    log("step 2: " + to_string(row.view) + " " + row.dataset_i + " -> " + *row.dataset_ii + " seed " +
                        std::to_string(seed));
                auto m2 = cls::train_step2(*it->second.model, tr, c2);
                acc_ii[r].push_back(cls::evaluate(*m2, te));
            }
        }
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
        RowResult rr;
        rr.row = rows[r];
        rr.accuracy_i = cls::aggregate(acc_i[r], rows[r].view, rows[r].configuration);
        if (rows[r].dataset_ii) rr.accuracy_ii = cls::aggregate(acc_ii[r], rows[r].view, rows[r].configuration);
        out.rows.push_back(std::move(rr));
    }
    return out;
}

GridResult run_experiment_grid(const GridSpec& spec, const Logger& log) {
    return run_experiment_grid(spec, table_rows(spec.views), log);
}

nlohmann::json GridResult::to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json o{{"view", to_string(r.row.view)},
                         {"dataset_i", r.row.dataset_i},
                         {"dataset_ii", r.row.dataset_ii ? nlohmann::json(*r.row.dataset_ii) : nlohmann::json()},
                         {"configuration", r.row.configuration},
                         {"accuracy_i", eval_json(r.accuracy_i)}};
        o["accuracy_ii"] = r.accuracy_ii ? eval_json(*r.accuracy_ii) : nlohmann::json();
        rs.push_back(o);
    }
    return {{"initialization", initialization}, {"model", model}, {"seeds", seeds},
            {"std_source", "sample standard deviation over seeded runs"}, {"rows", rs}};
}

GridResult GridResult::from_json(const nlohmann::json& j) {
    GridResult g;
    g.initialization = j.at("initialization");
    g.model = j.at("model");
    g.seeds = j.at("seeds");
    for (const auto& o : j.at("rows")) {
        RowResult r;
        r.row.view = parse_view(o.at("view"));
        r.row.dataset_i = o.at("dataset_i");
        if (!o.at("dataset_ii").is_null()) r.row.dataset_ii = o["dataset_ii"].get<std::string>();
        r.row.configuration = o.at("configuration");
        r.accuracy_i = eval_from_json(o.at("accuracy_i"));
        if (!o.at("accuracy_ii").is_null()) r.accuracy_ii = eval_from_json(o["accuracy_ii"]);
        g.rows.push_back(std::move(r));
    }
    return g;
}

std::string GridResult::format_table() const {
    std::vector<std::vector<std::string>> cells;
    cells.push_back({"View", "Initialization", "Dataset I", "Dataset II", "Model", "Accuracy I", "Accuracy II",
                     "Configuration"});
    for (const auto& r : rows)
        cells.push_back({to_string(r.row.view), initialization, dataset_label(r.row.dataset_i),
                         r.row.dataset_ii ? dataset_label(*r.row.dataset_ii) : "No-TL", model,
                         cls::format_accuracy(r.accuracy_i.accuracy_mean, r.accuracy_i.accuracy_std),
                         r.accuracy_ii ? cls::format_accuracy(r.accuracy_ii->accuracy_mean, r.accuracy_ii->accuracy_std)
                                       : "No-TL",
                         r.row.configuration});
    std::vector<std::size_t> w(8, 0);
    for (const auto& row : cells)
        for (std::size_t c = 0; c < 8; ++c) w[c] = std::max(w[c], display_width(row[c]));
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < 8; ++c) {
            os << row[c];
            if (c + 1 < 8) os << std::string(w[c] - display_width(row[c]) + 2, ' ');
        }
        os << "\n";
    };
    line(cells[0]);
    std::size_t total = 0;
    for (auto x : w) total += x + 2;
    os << std::string(total - 2, '-') << "\n";
    for (std::size_t i = 1; i < cells.size(); ++i) line(cells[i]);
    os << "\nmean ± sample std over " << seeds << " seeded run(s)\n";
    return os.str();
}

std::string GridResult::to_csv() const {
    std::ostringstream os;
    os << "view,initialization,dataset_i,dataset_ii,model,configuration,accuracy_i_mean,accuracy_i_std,"
          "accuracy_ii_mean,accuracy_ii_std,accuracy_i_runs,accuracy_ii_runs\n";
    auto runs = [](const std::vector<double>& v) {
        std::ostringstream s;
        for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ";" : "") << v[i];
        return s.str();
    };
    for (const auto& r : rows) {
        os << to_string(r.row.view) << "," << initialization << "," << r.row.dataset_i << ","
           << (r.row.dataset_ii ? *r.row.dataset_ii : "") << "," << model << "," << r.row.configuration << ","
           << r.accuracy_i.accuracy_mean << "," << r.accuracy_i.accuracy_std << ",";
        if (r.accuracy_ii) os << r.accuracy_ii->accuracy_mean << "," << r.accuracy_ii->accuracy_std;
        else os << ",";
        os << "," << runs(r.accuracy_i.runs) << "," << (r.accuracy_ii ? runs(r.accuracy_ii->runs) : "") << "\n";
    }
    return os.str();
}

void write_grid_result(const GridResult& r, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream(dir / "results.json") << r.to_json().dump(2) << "\n";
    std::ofstream(dir / "results.csv") << r.to_csv();
    std::ofstream(dir / "results.txt") << r.format_table();
}

} // namespace kstone::grid
