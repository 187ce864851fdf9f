#include "doctest.h"
#include "test_util.hpp"

#include "kstone/error.hpp"
#include "kstone/patchify.hpp"
#include "kstone/toy.hpp"

#include <fstream>
#include <sstream>

using namespace kstone;
using namespace kstone::patch;

namespace {

ImageRecord record(const std::string& id, Source src, int w, int h) {
    ImageRecord r;
    r.id = id;
    r.source = src;
    r.stone_class = make_class("WW", family_of(src));
    r.width = w;
    r.height = h;
    return r;
}

const DatasetManifest& toy_ccd() {
    static testing::TempDir dir("patch_toy");
    static DatasetManifest m = [] {
        toy::ToyOptions o;
        o.per_cell = 4;
        return load_manifest(toy::make_toy_corpus(dir.path(), o).ccd_manifest);
    }();
    return m;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("endoscopic image yields the requested patches inside bounds") {
    const Image img = testing::random_image(576, 768, 1);
    Rng rng(3);
    PatchOptions o;
    const auto ps = extract_patches(record("e1", Source::ENDOSCOPIC, 576, 768), img, 41, rng, o);
    REQUIRE(ps.size() == 41);
    for (const auto& p : ps) {
        CHECK(p.size == 256);
        CHECK(p.x >= 0);
        CHECK(p.y >= 0);
        CHECK(p.x + 256 <= 576);
        CHECK(p.y + 256 <= 768);
        CHECK(p.parent_id == "e1");
    }
    Rng again(3);
    const auto ps2 = extract_patches(record("e1", Source::ENDOSCOPIC, 576, 768), img, 41, again, o);
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK((ps[i].x == ps2[i].x && ps[i].y == ps2[i].y));
}

TEST_CASE("degenerate geometry and rejection failure") {
    Rng rng(1);
    PatchOptions o;
    o.keep_pixels = true;
    const Image img = testing::random_image(256, 256, 2);
    const auto ps = extract_patches(record("c", Source::ENDOSCOPIC, 256, 256), img, 1, rng, o);
    REQUIRE(ps.size() == 1);
    CHECK(ps[0].x == 0);
    CHECK(ps[0].y == 0);
    CHECK(ps[0].pixels == img);

    const Image black(300, 280, 3, 0.f);
    try {
        extract_patches(record("b", Source::CCD, 300, 280), black, 2, rng, o);
        FAIL("expected a constraint error");
    } catch (const ConstraintError& e) {
        CHECK(std::string(e.what()).find("stone_fraction") != std::string::npos);
    }
    CHECK_THROWS_AS(extract_patches(record("s", Source::CCD, 100, 100), Image(100, 100, 3), 1, rng, o),
                    DimensionError);
}

TEST_CASE("every accepted patch meets stone coverage by direct count") {
    Image img(120, 100, 3, 0.f);
    for (int y = 10; y < 90; ++y)
        for (int x = 20; x < 115; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.5f;
    PatchOptions o;
    o.size = 32;
    o.stone_fraction = 0.8;
    Rng rng(9);
    const auto ps = extract_patches(record("c", Source::CCD, 120, 100), img, 50, rng, o);
    for (const auto& p : ps) {
        int stone = 0;
        for (int y = p.y; y < p.y + 32; ++y)
            for (int x = p.x; x < p.x + 32; ++x) stone += luma(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)) > 10.0 / 255;
        CHECK(stone >= 0.8 * 32 * 32);
    }
}

TEST_CASE("even allocation arithmetic") {
    CHECK(even_allocation(1000, 8) == std::vector<int>(8, 125));
    CHECK(even_allocation(10, 4) == std::vector<int>{3, 3, 2, 2});
    CHECK(even_allocation(1, 3) == std::vector<int>{1, 0, 0});
    CHECK_THROWS_AS(even_allocation(3, 0), ParameterError);
}

TEST_CASE("patch dataset honours exact per-cell counts") {
    PatchOptions o;
    o.size = 32;
    const auto one = build_patch_dataset(toy_ccd(), 1, 7, o);
    CHECK(one.patches.size() == 12);
    const auto ps = build_patch_dataset(toy_ccd(), 10, 7, o);
    CHECK(ps.patches.size() == 120);
    for (const auto& [cell, n] : ps.cell_counts()) CHECK_MESSAGE(n == 10, cell);
    std::map<std::string, int> per_parent;
    for (const auto& p : ps.patches) ++per_parent[p.parent_id];
    for (const auto& [id, n] : per_parent) CHECK((n == 3 || n == 2));

    auto missing = toy_ccd();
    std::erase_if(missing.records, [](const ImageRecord& r) { return r.stone_class.code == "STR" && r.view == View::SEC; });
    try {
        build_patch_dataset(missing, 2, 1, o);
        FAIL("expected an error");
    } catch (const ParameterError& e) {
        CHECK(std::string(e.what()).find("(STR, SEC)") != std::string::npos);
    }
}

TEST_CASE("parent-level split rules") {
    DatasetManifest m;
    m.name = "two";
    for (int i = 0; i < 2; ++i) {
        auto r = record("r" + std::to_string(i), Source::CCD, 64, 64);
        m.records.push_back(r);
    }
    const auto plan = plan_split(m, 0.5, 1);
    CHECK(plan.train_ids.size() == 1);
    CHECK(plan.test_ids.size() == 1);
    m.records.pop_back();
    CHECK_THROWS_AS(plan_split(m, 0.5, 1), ConstraintError);
    CHECK_THROWS_AS(plan_split(m, 1.0, 1), ParameterError);
}

TEST_CASE("exact split dataset is leakage free across seeds") {
    PatchOptions o;
    o.size = 32;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = build_split_patch_dataset(toy_ccd(), 10, 0.8, seed, o);
        CHECK(s.train.patches.size() == 96);
        CHECK(s.test.patches.size() == 24);
        for (const auto& [cell, n] : s.test.cell_counts()) CHECK(n == 2);
        for (const auto& [cell, n] : s.train.cell_counts()) CHECK(n == 8);
        // exhaustive pairwise comparison of parent ids
        std::size_t shared = 0;
        for (const auto& a : s.train.patches)
            for (const auto& b : s.test.patches) shared += a.parent_key() == b.parent_key();
        CHECK(shared == 0);
        CHECK(audit_leakage(s.train, s.test).clean());
        for (const auto& p : s.test.patches) CHECK(s.plan.test_ids.count(p.parent_id) == 1);
    }
}

TEST_CASE("split of an existing patch set follows parents") {
    PatchOptions o;
    o.size = 32;
    const auto ps = build_patch_dataset(toy_ccd(), 8, 3, o);
    const auto [train, test] = split(ps, 0.75, 3);
    CHECK(train.patches.size() + test.patches.size() == ps.patches.size());
    CHECK(audit_leakage(train, test).clean());
    CHECK(test.patches.size() == 12 * 2); // one of four parents per cell, two patches each
    auto leaky = test;
    leaky.patches.push_back(train.patches.front());
    CHECK_FALSE(audit_leakage(train, leaky).clean());
    CHECK_THROWS_AS(require_no_leakage(train, leaky), LeakageError);
}

TEST_CASE("patch sets save, load and replay byte-identically") {
    PatchOptions o;
    o.size = 32;
    testing::TempDir dir("patch_io");
    auto a = build_split_patch_dataset(toy_ccd(), 4, 0.5, 11, o);
    auto b = build_split_patch_dataset(toy_ccd(), 4, 0.5, 11, o);
    save_split(a, dir / "a");
    save_split(b, dir / "b");
    CHECK(slurp(dir / "a" / "train" / "index.csv") == slurp(dir / "b" / "train" / "index.csv"));
    CHECK(slurp(dir / "a" / "split.json") == slurp(dir / "b" / "split.json"));
    const auto loaded = load_patchset(dir / "a" / "test");
    REQUIRE(loaded.patches.size() == a.test.patches.size());
    CHECK(loaded.patch_size == 32);
    for (std::size_t i = 0; i < loaded.patches.size(); ++i) {
        const auto& p = loaded.patches[i];
        CHECK(p.parent_key() == a.test.patches[i].parent_key());
        const Image px = patch_pixels(p);
        CHECK(px.width == 32);
        const Image from_parent = crop(load_image(p.parent_path), p.x, p.y, 32, 32);
        CHECK(px == from_parent);
    }
}
