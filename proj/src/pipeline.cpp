#include "kstone/pipeline.hpp"

#include "kstone/dataset.hpp"
#include "kstone/diffusion.hpp"
#include "kstone/error.hpp"
#include "kstone/eval.hpp"
#include "kstone/grid.hpp"
#include "kstone/patchify.hpp"
#include "kstone/rng.hpp"
#include "kstone/upscale.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace kstone::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
}

/// Content stamp of a manifest: its text plus the size of every image.
std::string manifest_stamp(const fs::path& manifest) {
    std::string acc = read_text(manifest);
    for (const auto& r : load_manifest(manifest).records) acc += std::to_string(fs::file_size(r.path)) + ";";
    return hex(stable_hash(acc));
}

const json kDefaults = json::parse(R"({
  "seed": 0,
  "views": ["SUR", "SEC"],
  "inputs": {},
  "stages": {}
})");

const std::map<std::string, json> kStageDefaults = {
    {"pad", json::parse(R"({"canvas": "4288x2848", "fill": "#000000"})")},
    {"train_gen", json::parse(R"({"timesteps": 100, "beta_min": 0.0001, "beta_max": 0.02, "channels": 64,
        "depth": 4, "embed_dim": 32, "epochs": 20, "steps_per_epoch": 50, "batch": 4, "learning_rate": 0.001,
        "scale_factor": 1.3333333333333333, "min_size": 32, "train_size": "264x200", "truncate_fraction": 0.4,
        "probe_samples": 8})")},
    {"generate", json::parse(R"({"per_model": 25, "size": "264x200"})")},
    {"upscale", json::parse(R"({"mode": "bicubic", "fuse_weight": 0.5})")},
    {"evaluate", json::parse(R"({"threshold": 0.2, "extractor": {"kind": "cnn", "seed": 0}, "sifid": true})")},
    {"patchify", json::parse(R"({"size": 256, "per_cell": 1000, "ratio": 0.8, "stone_fraction": 0.9,
        "background_threshold": 0.0392156862745098})")},
    {"grid", json::parse(R"({"backbone": {"architecture": "resnet50", "init": "generic"}, "seeds": 5})")},
};

json merge(json base, const json& over) {
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
            base[it.key()] = merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
    return base;
}

fs::path resolve_path(const std::string& s, const fs::path& base) {
    fs::path p = s;
    return p.is_relative() ? (base / p).lexically_normal() : p;
}

bool enabled(const json& cfg, const std::string& stage) {
    return cfg["stages"].contains(stage) && cfg["stages"][stage].value("enabled", true);
}

struct Context {
    fs::path run_dir;
    json cfg;
    Logger log;
    std::map<std::string, std::string> stamps; // stage -> stamp of its products
    std::vector<StageRecord> records;

    fs::path dir(const std::string& stage) const { return run_dir / stage; }
    void say(const std::string& m) const {
        if (log) log(m);
    }
};

std::vector<std::string> list_outputs(const fs::path& stage_dir, const fs::path& run_dir) {
    std::vector<std::string> out;
    if (!fs::exists(stage_dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(stage_dir))
        if (e.is_regular_file() && e.path().filename() != "stamp.txt")
            out.push_back(e.path().lexically_relative(run_dir).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

std::optional<std::string> completed_stamp(const fs::path& stage_dir) {
    const fs::path f = stage_dir / "stamp.txt";
    if (!fs::exists(f)) return std::nullopt;
    std::string s = read_text(f);
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
}

// Inputs of downstream stages ---------------------------------------------------

struct Source {
    fs::path manifest;
    std::string stamp;
};

std::optional<Source> stage_manifest(const Context& c, const std::string& stage) {
    if (!c.stamps.count(stage)) return std::nullopt;
    return Source{c.dir(stage) / "manifest.txt", c.stamps.at(stage)};
}

std::optional<Source> input_manifest(const Context& c, const std::string& key) {
    if (!c.cfg["inputs"].contains(key)) return std::nullopt;
    const fs::path p = c.cfg["inputs"][key].get<std::string>();
    if (!fs::exists(p)) throw ConfigError("input '" + key + "' not found: " + p.string());
    return Source{p, manifest_stamp(p)};
}

Source need(const std::optional<Source>& s, const std::string& stage, const std::string& what) {
    if (!s) throw StageError(stage, "needs " + what + " (enable the producing stage or set it under \"inputs\")");
    return *s;
}

std::optional<Source> ccd_source(const Context& c) {
    if (auto s = stage_manifest(c, "pad")) return s;
    return input_manifest(c, "ccd");
}

std::optional<Source> synthetic_source(const Context& c) {
    if (auto s = stage_manifest(c, "upscale")) return s;
    if (auto s = stage_manifest(c, "generate")) return s;
    return input_manifest(c, "synthetic");
}

// Stages -----------------------------------------------------------------------

using StageFn = std::function<void(Context&, const json&, const fs::path&)>;

void stage_pad(Context& c, const json& s, const fs::path& out) {
    const Source src = need(input_manifest(c, "ccd"), "pad", "a CCD manifest");
    const DatasetManifest m = load_manifest(src.manifest);
    const Size canvas = parse_size(s["canvas"].get<std::string>());
    const Rgb fill = parse_hex_color(s["fill"].get<std::string>());
    pad_dataset(m, canvas, fill, out);
}

std::string cell_name(const StoneClass& c, View v) { return c.code + "_" + to_string(v); }

void stage_train_gen(Context& c, const json& s, const fs::path& out) {
    const Source src = need(ccd_source(c), "train_gen", "a CCD manifest");
    const DatasetManifest m = load_manifest(src.manifest);
    const auto schedule = diffusion::make_schedule(s["timesteps"], s["beta_min"], s["beta_max"]);
    diffusion::DenoiserConfig dc;
    dc.channels = s["channels"];
    dc.depth = s["depth"];
    dc.embed_dim = s["embed_dim"];
    fs::create_directories(out);
    json models = json::array();
    const std::uint64_t seed = c.cfg["seed"];
    const std::string cell_stamp = hex(stable_hash(s.dump() + src.stamp + std::to_string(seed)));
    for (const auto& view_name : c.cfg["views"]) {
        const View v = parse_view(view_name.get<std::string>());
        for (const auto& code : family_codes(m.records.front().stone_class.taxonomy)) {
            std::vector<Image> imgs;
            StoneClass cls;
            for (const auto& r : m.records)
                if (r.view == v && r.stone_class.code == code) {
                    imgs.push_back(load_image(r.path));
                    cls = r.stone_class;
                }
            if (imgs.empty()) continue;
            const std::string name = cell_name(cls, v);
            const fs::path ckpt = out / (name + ".ckpt");
            const fs::path done = out / (name + ".done");
            models.push_back(name + ".ckpt");
            if (fs::exists(ckpt) && fs::exists(done) && read_text(done) == cell_stamp) {
                c.say("  train_gen " + name + ": cached");
                continue;
            }
            diffusion::TrainOptions o;
            o.epochs = s["epochs"];
            o.steps_per_epoch = s["steps_per_epoch"];
            o.batch = s["batch"];
            o.learning_rate = s["learning_rate"];
            o.scale_factor = s["scale_factor"];
            o.min_size = s["min_size"];
            o.train_size = parse_size(s["train_size"].get<std::string>());
            o.truncate_fraction = s["truncate_fraction"];
            o.probe_samples = s["probe_samples"];
            o.seed = mix_seed(seed, stable_hash(name));
            c.say("  train_gen " + name + ": " + std::to_string(imgs.size()) + " image(s)");
            auto model = diffusion::train_model(imgs, dc, schedule, o);
            model.stone_class = cls;
            model.view = v;
            diffusion::save_checkpoint(model, ckpt);
            diffusion::write_loss_log(model.losses, out / (name + ".losses.jsonl"));
            write_text(done, cell_stamp);
        }
    }
    write_text(out / "models.json", json{{"models", models}}.dump(2) + "\n");
}

void stage_generate(Context& c, const json& s, const fs::path& out) {
    if (!c.stamps.count("train_gen")) throw StageError("generate", "needs trained models (enable train_gen)");
    const json models = json::parse(read_text(c.dir("train_gen") / "models.json"));
    std::vector<diffusion::DiffusionModelState> states;
    for (const auto& name : models["models"]) states.push_back(diffusion::load_checkpoint(c.dir("train_gen") / name.get<std::string>()));
    if (states.empty()) throw StageError("generate", "no trained models");
    diffusion::generate_dataset(states, s["per_model"], c.cfg["seed"], out, parse_size(s["size"].get<std::string>()));
}

upscale::Upscaler make_upscaler(const json& s) {
    upscale::Upscaler u;
    const std::string mode = s["mode"];
    if (mode == "bicubic") {
        u.kind = upscale::UpscalerKind::BICUBIC;
    } else if (mode == "learned") {
        u.kind = upscale::UpscalerKind::LEARNED;
        if (!s.contains("weights")) throw ConfigError("learned upscaling needs \"weights\"");
        u.weights = upscale::load_weights(s["weights"].get<std::string>());
    } else {
        throw ConfigError("unknown upscale mode '" + mode + "'");
    }
    return u;
}

void stage_upscale(Context& c, const json& s, const fs::path& out) {
    const Source src = need(stage_manifest(c, "generate") ? stage_manifest(c, "generate") : input_manifest(c, "synthetic"),
                            "upscale", "generated images");
    upscale::upscale_directory(src.manifest.parent_path(), out, make_upscaler(s), s["fuse_weight"]);
}

eval::FeatureExtractor make_extractor(const json& e) {
    if (e.is_string()) return eval::load_extractor(e.get<std::string>());
    return eval::FeatureExtractor(eval::ExtractorDescriptor::from_json(e));
}

void stage_evaluate(Context& c, const json& s, const fs::path& out) {
    const Source real = s.contains("real") ? Source{s["real"].get<std::string>(), {}}
                                           : need(ccd_source(c), "evaluate", "a real manifest");
    const Source syn = s.contains("synthetic") ? Source{s["synthetic"].get<std::string>(), {}}
                                               : need(synthetic_source(c), "evaluate", "a synthetic manifest");
    const DatasetManifest a = load_manifest(real.manifest);
    const DatasetManifest b = load_manifest(syn.manifest);
    const auto extractor = make_extractor(s["extractor"]);
    json summary = json::object();
    for (const auto& vn : c.cfg["views"]) {
        const View v = parse_view(vn.get<std::string>());
        c.say("  evaluate " + to_string(v));
        const auto report = eval::evaluate_suite(a, b, v, s["threshold"]);
        const Image ha = eval::heatmap(a, v), hb = eval::heatmap(b, v);
        std::optional<eval::SIFIDResult> sf;
        if (s["sifid"].get<bool>()) sf = eval::sifid_corpus(a, b, v, extractor);
        eval::write_eval_bundle(out / to_string(v), report, ha, hb, sf);
        summary[to_string(v)] = {{"per_property", report.per_property}, {"flags", report.flags}};
        if (sf) summary[to_string(v)]["sifid"] = {{"mean", sf->mean}, {"std", sf->std}};
    }
    write_text(out / "summary.json", summary.dump(2) + "\n");
}

void stage_patchify(Context& c, const json& s, const fs::path& out) {
    patch::PatchOptions po;
    po.size = s["size"];
    po.stone_fraction = s["stone_fraction"];
    po.background_threshold = s["background_threshold"];
    std::vector<std::pair<std::string, Source>> sets;
    if (auto x = ccd_source(c)) sets.emplace_back("ccd", *x);
    if (auto x = synthetic_source(c)) sets.emplace_back("synthetic", *x);
    if (auto x = input_manifest(c, "endoscopic")) sets.emplace_back("endoscopic", *x);
    if (sets.empty()) throw StageError("patchify", "no datasets to patchify");
    std::set<View> views;
    for (const auto& v : c.cfg["views"]) views.insert(parse_view(v.get<std::string>()));
    for (const auto& [key, src] : sets) {
        c.say("  patchify " + key);
        DatasetManifest m = load_manifest(src.manifest);
        std::erase_if(m.records, [&](const ImageRecord& r) { return !views.count(r.view); });
        auto split = patch::build_split_patch_dataset(m, s["per_cell"], s["ratio"],
                                                      c.cfg["seed"], po);
        patch::require_no_leakage(split.train, split.test);
        patch::save_split(split, out / key);
    }
}

void stage_grid(Context& c, const json& s, const fs::path& out) {
    if (!c.stamps.count("patchify")) throw StageError("grid", "needs patch sets (enable patchify)");
    json spec = s;
    spec.erase("enabled");
    spec["views"] = c.cfg["views"];
    spec["datasets"] = json::object();
    for (const char* key : {"synthetic", "ccd", "endoscopic"})
        if (fs::exists(c.dir("patchify") / key)) spec["datasets"][key] = (c.dir("patchify") / key).string();
    if (!spec.contains("base_seed")) spec["base_seed"] = c.cfg["seed"];
    const auto g = grid::GridSpec::from_json(spec);
    std::vector<grid::ExperimentRow> rows;
    auto available = [&](const std::string& key) {
        if (key == "synthetic+ccd") return g.datasets.count("synthetic") && g.datasets.count("ccd");
        return g.datasets.count(key) > 0;
    };
    for (const auto& r : grid::table_rows(g.views)) {
        const bool ok = available(r.dataset_i) && (!r.dataset_ii || available(*r.dataset_ii));
        if (ok || !s.value("skip_unavailable_rows", true)) rows.push_back(r);
    }
    const auto result = grid::run_experiment_grid(g, rows, [&](const std::string& m) { c.say("  " + m); });
    grid::write_grid_result(result, out);
}

const std::map<std::string, StageFn> kStageFns = {
    {"pad", stage_pad},         {"train_gen", stage_train_gen}, {"generate", stage_generate}, {"upscale", stage_upscale},
    {"evaluate", stage_evaluate}, {"patchify", stage_patchify}, {"grid", stage_grid},
};

/// Stamps of everything a stage reads, so a change upstream invalidates it.
std::string upstream_stamp(const Context& c, const std::string& stage) {
    std::string acc;
    for (const auto& [k, v] : c.stamps) acc += k + "=" + v + ";";
    for (auto it = c.cfg["inputs"].begin(); it != c.cfg["inputs"].end(); ++it) {
        const fs::path p = it.value().get<std::string>();
        acc += it.key() + "=" + (fs::exists(p) ? manifest_stamp(p) : std::string("missing")) + ";";
    }
    const json& scfg = c.cfg["stages"][stage];
    for (const char* k : {"real", "synthetic"})
        if (scfg.contains(k)) acc += std::string(k) + "=" + manifest_stamp(scfg[k].get<std::string>()) + ";";
    acc += "seed=" + c.cfg["seed"].dump() + ";views=" + c.cfg["views"].dump() + ";stage=" + stage;
    return acc;
}

} // namespace

json resolve_config(json cfg, const fs::path& base) {
    if (!cfg.is_object()) throw ConfigError("pipeline config must be a JSON object");
    cfg = merge(kDefaults, cfg);
    for (const auto& [k, v] : cfg["stages"].items()) {
        if (!kStageDefaults.count(k)) throw ConfigError("unknown stage '" + k + "' in config");
        if (!v.is_object()) throw ConfigError("stage '" + k + "' must be an object");
    }
    for (auto& [name, def] : kStageDefaults)
        if (cfg["stages"].contains(name)) cfg["stages"][name] = merge(def, cfg["stages"][name]);
    for (auto it = cfg["inputs"].begin(); it != cfg["inputs"].end(); ++it) {
        if (it.key() != "ccd" && it.key() != "endoscopic" && it.key() != "synthetic")
            throw ConfigError("unknown input '" + it.key() + "' (expected ccd, endoscopic or synthetic)");
        it.value() = resolve_path(it.value().get<std::string>(), base).string();
    }
    auto& st = cfg["stages"];
    if (st.contains("upscale") && st["upscale"].contains("weights"))
        st["upscale"]["weights"] = resolve_path(st["upscale"]["weights"], base).string();
    if (st.contains("evaluate") && st["evaluate"]["extractor"].is_string())
        st["evaluate"]["extractor"] = resolve_path(st["evaluate"]["extractor"], base).string();
    if (st.contains("evaluate"))
        for (const char* k : {"real", "synthetic"})
            if (st["evaluate"].contains(k)) {
                const fs::path p = resolve_path(st["evaluate"][k], base);
                if (!fs::exists(p)) throw ConfigError(std::string("evaluate.") + k + " not found: " + p.string());
                st["evaluate"][k] = p.string();
            }
    if (st.contains("grid") && st["grid"].contains("backbone") && st["grid"]["backbone"].contains("weights") &&
        st["grid"]["backbone"]["weights"].is_string())
        st["grid"]["backbone"]["weights"] = resolve_path(st["grid"]["backbone"]["weights"], base).string();
    for (const auto& v : cfg["views"]) parse_view(v.get<std::string>());
    if (cfg.contains("output_dir")) cfg["output_dir"] = resolve_path(cfg["output_dir"], base).string();
    return cfg;
}

fs::path default_run_dir(const json& config, const fs::path& config_path) {
    if (config.contains("output_dir")) return config["output_dir"].get<std::string>();
    const std::string stem = config_path.empty() ? "run" : config_path.stem().string();
    if (const char* root = std::getenv("KSTONE_CACHE_ROOT"); root && *root) return fs::path(root) / stem;
    return fs::path("runs") / stem;
}

json PipelineRun::to_json() const {
    json st = json::array();
    for (const auto& s : stages)
        st.push_back({{"name", s.name}, {"status", s.status}, {"stamp", s.stamp}, {"outputs", s.outputs}});
    json seeds{{"pipeline", config["seed"]}};
    if (config["stages"].contains("grid"))
        seeds["grid_base"] = config["stages"]["grid"].value("base_seed", config["seed"].get<std::uint64_t>());
    return {{"config", config}, {"stages", st}, {"seeds", seeds}};
}

PipelineRun PipelineRun::from_json(const json& j, const fs::path& run_dir) {
    PipelineRun r;
    r.run_dir = run_dir;
    r.config = j.at("config");
    for (const auto& s : j.at("stages"))
        r.stages.push_back({s.at("name"), s.at("status"), s.at("stamp"), s.at("outputs").get<std::vector<std::string>>()});
    return r;
}

PipelineRun run_pipeline(const json& raw, const fs::path& base, const Logger& log) {
    Context c;
    c.cfg = resolve_config(raw, base);
    c.run_dir = default_run_dir(c.cfg, {});
    c.cfg["output_dir"] = c.run_dir.string();
    c.log = log;
    fs::create_directories(c.run_dir);
    PipelineRun run;
    run.run_dir = c.run_dir;
    run.config = c.cfg;
    auto flush = [&] {
        run.stages = c.records;
        write_text(c.run_dir / "run.json", run.to_json().dump(2) + "\n");
    };
    for (const auto& name : kStages) {
        StageRecord rec;
        rec.name = name;
        const fs::path out = c.dir(name);
        if (!enabled(c.cfg, name)) {
            // earlier outputs of a disabled stage still feed later stages
            if (auto prev = completed_stamp(out)) {
                c.stamps[name] = *prev;
                rec.stamp = *prev;
                rec.outputs = list_outputs(out, c.run_dir);
            }
            rec.status = "disabled";
            c.records.push_back(rec);
            continue;
        }
        const json& scfg = c.cfg["stages"][name];
        std::string stamp;
        try {
            stamp = hex(stable_hash(scfg.dump() + "|" + upstream_stamp(c, name)));
        } catch (const Error& e) {
            flush();
            throw StageError(name, e.what());
        }
        rec.stamp = stamp;
        if (completed_stamp(out) == stamp) {
            c.say("stage " + name + ": cached");
            rec.status = "cached";
        } else {
            c.say("stage " + name + ": running");
            try {
                if (fs::exists(out / "stamp.txt")) fs::remove(out / "stamp.txt");
                if (name != "train_gen" && fs::exists(out)) fs::remove_all(out);
                kStageFns.at(name)(c, scfg, out);
            } catch (const StageError&) {
                flush();
                throw;
            } catch (const std::exception& e) {
                flush();
                throw StageError(name, e.what());
            }
            write_text(out / "stamp.txt", stamp + "\n");
            rec.status = "ran";
        }
        c.stamps[name] = stamp;
        rec.outputs = list_outputs(out, c.run_dir);
        c.records.push_back(rec);
    }
    flush();
    return run;
}

PipelineRun run_pipeline(const fs::path& config_path, const Logger& log) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open pipeline config " + config_path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(config_path.string() + ": " + e.what());
    }
    const fs::path base = fs::absolute(config_path).parent_path();
    if (!j.contains("output_dir")) j["output_dir"] = fs::absolute(default_run_dir(j, config_path)).string();
    return run_pipeline(j, base, log);
}

PipelineRun load_run(const fs::path& run_dir) {
    const fs::path f = run_dir / "run.json";
    if (!fs::exists(f)) throw ConfigError("no run manifest at " + f.string());
    return PipelineRun::from_json(json::parse(read_text(f)), run_dir);
}

} // namespace kstone::pipeline
