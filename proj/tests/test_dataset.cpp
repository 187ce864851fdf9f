#include "doctest.h"

#include "kstone/dataset.hpp"
#include "kstone/error.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace kstone;

namespace {

// Writes `n` tiny PNGs and a manifest; view SUR for the first `n_sur`.
std::filesystem::path write_corpus(const std::filesystem::path& dir, int n, int n_sur, Source src) {
    std::filesystem::create_directories(dir / "img");
    const Image px(3, 2, 3, 0.5f);
    const auto& codes = family_codes(family_of(src));
    std::ofstream out(dir / "m.txt");
    out << "# name=corpus\n";
    for (int i = 0; i < n; ++i) {
        const std::string file = "img/" + std::to_string(i) + ".png";
        save_png(px, dir / file);
        out << "r" << i << "," << file << "," << codes[i % 6] << "," << (i < n_sur ? "SUR" : "SEC") << ","
            << to_string(src) << "\n";
    }
    return dir / "m.txt";
}

} // namespace

TEST_CASE("taxonomies have six classes each") {
    CHECK(family_codes(Taxonomy::CCD_FAMILY).size() == 6);
    CHECK(family_codes(Taxonomy::ENDO_FAMILY).size() == 6);
    CHECK(class_index(make_class("CAR2", Taxonomy::CCD_FAMILY)) == 5);
    CHECK(class_index(make_class("UA", Taxonomy::ENDO_FAMILY)) == 2);
    CHECK_THROWS_AS(make_class("CAR", Taxonomy::ENDO_FAMILY), TaxonomyError);
    CHECK(family_of(Source::SYNTHETIC) == Taxonomy::CCD_FAMILY);
}

TEST_CASE("load_manifest with the CCD view split") {
    testing::TempDir dir("ds_load");
    const auto path = write_corpus(dir.path(), 366, 209, Source::CCD);
    const DatasetManifest m = load_manifest(path);
    CHECK(m.name == "corpus");
    CHECK(m.records.size() == 366);
    CHECK(m.with_view(View::SUR).size() == 209);
    CHECK(m.with_view(View::SEC).size() == 157);
    CHECK(m.records[0].width == 3);
    CHECK(m.records[0].height == 2);
    CHECK(validate_manifest(m).ok());
}

TEST_CASE("load_manifest edge cases") {
    testing::TempDir dir("ds_edge");
    SUBCASE("empty file") {
        std::ofstream(dir / "e.txt") << "";
        CHECK(load_manifest(dir / "e.txt").records.empty());
    }
    SUBCASE("unknown class") {
        save_png(Image(2, 2), dir / "a.png");
        std::ofstream(dir / "x.txt") << "a,a.png,XYZ,SUR,CCD\n";
        CHECK_THROWS_AS(load_manifest(dir / "x.txt"), TaxonomyError);
    }
    SUBCASE("missing file names the entry") {
        std::ofstream(dir / "x.txt") << "ghost,nowhere.png,WW,SUR,CCD\n";
        try {
            load_manifest(dir / "x.txt");
            FAIL("expected IngestionError");
        } catch (const IngestionError& e) {
            CHECK(std::string(e.what()).find("ghost") != std::string::npos);
        }
    }
    SUBCASE("canvas directive") {
        save_png(Image(4, 4), dir / "a.png");
        std::ofstream(dir / "x.txt") << "# canvas=4x4\na,a.png,WD,SEC,ENDOSCOPIC\n";
        const auto m = load_manifest(dir / "x.txt");
        REQUIRE(m.canvas);
        CHECK(*m.canvas == Size{4, 4});
        CHECK(m.records[0].stone_class.taxonomy == Taxonomy::ENDO_FAMILY);
    }
}

TEST_CASE("manifest save/load round trip") {
    testing::TempDir dir("ds_rt");
    const auto m = load_manifest(write_corpus(dir.path(), 12, 6, Source::SYNTHETIC));
    save_manifest(m, dir / "sub" / "copy.txt");
    const auto back = load_manifest(dir / "sub" / "copy.txt");
    REQUIRE(back.records.size() == m.records.size());
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        CHECK(back.records[i].id == m.records[i].id);
        CHECK(std::filesystem::equivalent(back.records[i].path, m.records[i].path));
        CHECK(back.records[i].stone_class == m.records[i].stone_class);
    }
}

TEST_CASE("validate_manifest counts and violations") {
    DatasetManifest b;
    b.name = "B";
    for (int i = 0; i < 300; ++i) {
        const auto& codes = family_codes(Taxonomy::CCD_FAMILY);
        b.records.push_back({"s" + std::to_string(i), "x.png", make_class(codes[i % 6], Taxonomy::CCD_FAMILY),
                             i < 150 ? View::SUR : View::SEC, 1056, 800, Source::SYNTHETIC});
    }
    const DatasetManifest before = b;
    const auto rep = validate_manifest(b);
    CHECK(rep.per_view.at("SUR") == 150);
    CHECK(rep.per_view.at("SEC") == 150);
    CHECK(rep.per_class.size() == 6);
    CHECK(rep.dimensions.at("1056x800") == 300);
    CHECK(rep.ok());
    CHECK(b.records.size() == before.records.size());
    CHECK(b.records[7].id == before.records[7].id);

    DatasetManifest one;
    one.records.push_back(b.records[0]);
    const auto r1 = validate_manifest(one);
    CHECK(r1.per_class.size() == 1);
    CHECK(r1.per_class.at("WW") == 1);

    b.records.push_back(b.records[3]);
    const auto dup = validate_manifest(b);
    REQUIRE(dup.violations.size() == 1);
    CHECK(dup.violations[0].find("s3") != std::string::npos);
}

TEST_CASE("pad_to_canvas centers the image") {
    const Image img = testing::random_image(100, 100, 4);
    const Image out = pad_to_canvas(img, {102, 104});
    CHECK(out.width == 102);
    CHECK(out.height == 104);
    const PadOffsets off = pad_offsets(img.size(), out.size());
    CHECK(off.x == 1);
    CHECK(off.y == 2);
    double border = 0.0;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            const bool inside = x >= 1 && x < 101 && y >= 2 && y < 102;
            for (int c = 0; c < 3; ++c) {
                if (inside)
                    CHECK(out.at(x, y, c) == img.at(x - 1, y - 2, c));
                else
                    border += out.at(x, y, c);
            }
        }
    CHECK(border == 0.0);
}

TEST_CASE("padding invariants") {
    const Image img = testing::random_image(37, 21, 5);
    const Size canvas{64, 48};
    const Rgb fill{0.1f, 0.2f, 0.3f};
    const Image once = pad_to_canvas(img, canvas, fill);
    CHECK(pad_to_canvas(once, canvas, fill) == once);
    CHECK(pad_to_canvas(img, img.size()) == img);
    const PadOffsets off = pad_offsets(img.size(), canvas);
    CHECK(crop(once, off.x, off.y, img.width, img.height) == img);
    CHECK(once.at(0, 0, 2) == 0.3f);
    CHECK_THROWS_AS(pad_to_canvas(img, {36, 48}), DimensionError);
}

TEST_CASE("pad_dataset writes canvas-sized images") {
    testing::TempDir dir("ds_pad");
    const auto m = load_manifest(write_corpus(dir.path(), 4, 2, Source::CCD));
    const auto padded = pad_dataset(m, {8, 6}, {}, dir / "out");
    const auto back = load_manifest(dir / "out" / "manifest.txt");
    REQUIRE(back.canvas);
    CHECK(*back.canvas == Size{8, 6});
    for (const auto& r : back.records) CHECK((r.width == 8 && r.height == 6));
    CHECK(validate_manifest(back).ok());
}
