#include "doctest.h"
#include "test_util.hpp"
#include "toy_pipeline.hpp"

#include "kstone/error.hpp"
#include "kstone/grid.hpp"
#include "kstone/pipeline.hpp"

#include <fstream>
#include <sstream>

using namespace kstone;
using namespace kstone::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const StageRecord& stage(const PipelineRun& r, const std::string& name) {
    for (const auto& s : r.stages)
        if (s.name == name) return s;
    FAIL("no stage " << name);
    throw;
}

} // namespace

TEST_CASE("two runs of the same config produce identical artefacts") {
    testing::TempDir dir("pipe_det");
    const auto cfg1 = testing::toy_pipeline_config(dir / "data", dir / "run1");
    auto cfg2 = cfg1;
    cfg2["output_dir"] = (dir / "run2").string();
    const auto r1 = run_pipeline(cfg1, dir.path());
    const auto r2 = run_pipeline(cfg2, dir.path());
    for (const auto& s : r1.stages) CHECK_MESSAGE(s.status == "ran", s.name);
    const char* files[] = {"pad/manifest.txt",
                           "generate/manifest.txt",
                           "upscale/manifest.txt",
                           "evaluate/SUR/drift.json",
                           "evaluate/SUR/sifid.json",
                           "patchify/ccd/train/index.csv",
                           "patchify/ccd/test/index.csv",
                           "patchify/synthetic/train/index.csv",
                           "patchify/endoscopic/test/index.csv",
                           "grid/results.json"};
    for (const char* f : files) CHECK_MESSAGE(slurp(dir / "run1" / f) == slurp(dir / "run2" / f), f);
    for (const auto& s : r1.stages) CHECK(stage(r2, s.name).stamp == s.stamp);

    const auto g = grid::GridResult::from_json(nlohmann::json::parse(slurp(dir / "run1" / "grid/results.json")));
    CHECK(g.rows.size() == 8);

    SUBCASE("a rerun reuses every stage") {
        const auto again = run_pipeline(cfg1, dir.path());
        for (const auto& s : again.stages) CHECK_MESSAGE(s.status == "cached", s.name);
        CHECK(slurp(dir / "run1/evaluate/SUR/drift.json") == slurp(dir / "run2/evaluate/SUR/drift.json"));
    }
    SUBCASE("a changed stage invalidates itself and what follows") {
        auto changed = cfg1;
        changed["stages"]["patchify"]["per_cell"] = 2;
        changed["stages"].erase("grid");
        const auto r = run_pipeline(changed, dir.path());
        CHECK(stage(r, "evaluate").status == "cached");
        CHECK(stage(r, "patchify").status == "ran");
        CHECK(stage(r, "grid").status == "disabled");
    }
    SUBCASE("the report renders from recorded outputs") {
        const auto loaded = load_run(dir / "run1");
        CHECK(loaded.stages.size() == kStages.size());
        const fs::path rep = emit_report(loaded);
        for (const char* p : {"brightness", "rms_contrast", "mean_rel_r", "mean_rel_g", "mean_rel_b"})
            CHECK(fs::exists(rep / (std::string("hist_SUR_") + p + ".png")));
        CHECK(fs::exists(rep / "heatmap_SUR.png"));
        CHECK(slurp(rep / "drift.txt").find("brightness") != std::string::npos);
        CHECK(slurp(rep / "sifid.txt").find("SUR: mean") != std::string::npos);
        CHECK(slurp(rep / "results.txt") == g.format_table());
    }
}

TEST_CASE("an evaluate-only run needs no upstream stages") {
    testing::TempDir dir("pipe_eval");
    toy::ToyOptions o;
    o.per_cell = 2;
    o.endo_size = {48, 40};
    const std::string real = toy::make_toy_corpus(dir / "a", o).endo_manifest.string();
    o.seed = 5;
    o.noise = 0.2;
    const std::string fake = toy::make_toy_corpus(dir / "b", o).endo_manifest.string();
    nlohmann::json only = {{"output_dir", (dir / "run").string()},
                           {"views", {"SUR", "SEC"}},
                           {"stages", {{"evaluate", {{"real", real}, {"synthetic", fake}, {"sifid", false}}}}}};
    const auto r = run_pipeline(only, dir.path());
    CHECK(stage(r, "evaluate").status == "ran");
    CHECK(stage(r, "pad").status == "disabled");
    CHECK(fs::exists(dir / "run/evaluate/SEC/drift.json"));
    CHECK_FALSE(fs::exists(dir / "run/evaluate/SEC/sifid.json"));
    const fs::path rep = emit_report(load_run(dir / "run"));
    CHECK(fs::exists(rep / "hist_SEC_mean_rel_b.png"));
    CHECK_FALSE(fs::exists(rep / "results.txt"));
}

TEST_CASE("failures name the stage and keep earlier outputs") {
    testing::TempDir dir("pipe_fail");
    auto cfg = testing::toy_pipeline_config(dir / "data", dir / "run", false);
    cfg["stages"] = {{"pad", {{"canvas", "80x64"}}}, {"patchify", {{"size", 512}, {"per_cell", 2}}}};
    try {
        run_pipeline(cfg, dir.path());
        FAIL("expected a stage failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == "patchify");
    }
    CHECK(fs::exists(dir / "run/pad/manifest.txt"));
    CHECK(fs::exists(dir / "run/pad/stamp.txt"));
    CHECK_FALSE(fs::exists(dir / "run/patchify/stamp.txt"));
    const auto r = load_run(dir / "run");
    CHECK(stage(r, "pad").status == "ran");
}

TEST_CASE("config errors surface before work starts") {
    testing::TempDir dir("pipe_cfg");
    CHECK_THROWS_AS(resolve_config(nlohmann::json::parse(R"({"stages": {"paint": {}}})"), dir.path()), ConfigError);
    CHECK_THROWS_AS(resolve_config(nlohmann::json::parse(R"({"inputs": {"photos": "x"}})"), dir.path()), ConfigError);
    CHECK_THROWS_AS(resolve_config(nlohmann::json::parse(R"({"views": ["TOP"]})"), dir.path()), Error);
    PipelineRun empty;
    empty.run_dir = dir.path();
    empty.config = resolve_config(nlohmann::json::object(), dir.path());
    CHECK_THROWS_WITH_AS(emit_report(empty), doctest::Contains("no stage outputs"), ConfigError);
}

TEST_CASE("run directory defaults") {
    const nlohmann::json with_dir = {{"output_dir", "/tmp/x"}};
    CHECK(default_run_dir(with_dir, "a/b.json") == fs::path("/tmp/x"));
    ::setenv("KSTONE_CACHE_ROOT", "/tmp/cache", 1);
    CHECK(default_run_dir(nlohmann::json::object(), "a/b.json") == fs::path("/tmp/cache/b"));
    ::unsetenv("KSTONE_CACHE_ROOT");
    CHECK(default_run_dir(nlohmann::json::object(), "a/b.json") == fs::path("runs/b"));
}
