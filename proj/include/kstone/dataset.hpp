#pragma once

#include "kstone/image.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kstone {

enum class View { SUR, SEC };
enum class Taxonomy { CCD_FAMILY, ENDO_FAMILY };
enum class Source { CCD, SYNTHETIC, ENDOSCOPIC };

std::string to_string(View v);
std::string to_string(Taxonomy t);
std::string to_string(Source s);
View parse_view(const std::string& s);
Source parse_source(const std::string& s);

inline constexpr std::array<View, 2> kViews = {View::SUR, View::SEC};

/// Class codes of each family, in label order.
const std::array<std::string, 6>& family_codes(Taxonomy t);
Taxonomy family_of(Source s);

struct StoneClass {
    std::string code;
    Taxonomy taxonomy = Taxonomy::CCD_FAMILY;
    bool operator==(const StoneClass&) const = default;
};

/// Throws TaxonomyError if `code` is not a member of the family.
StoneClass make_class(const std::string& code, Taxonomy t);
/// Label index within the family (0..5).
int class_index(const StoneClass& c);

struct ImageRecord {
    std::string id;
    std::filesystem::path path;
    StoneClass stone_class;
    View view = View::SUR;
    int width = 0;
    int height = 0;
    Source source = Source::CCD;
};

struct DatasetManifest {
    std::string name;
    std::vector<ImageRecord> records;
    std::optional<Size> canvas;

    std::vector<const ImageRecord*> with_view(View v) const;
};

/// Line-delimited manifest:
///
///   # name=<dataset name>
///   # canvas=<W>x<H>            (optional)
///   id,relative/path.png,CLASS,VIEW,SOURCE
///
/// Paths resolve against the manifest's directory. Blank lines and other
/// '#' lines are ignored.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct ValidationReport {
    std::size_t total = 0;
    std::map<std::string, std::size_t> per_class;
    std::map<std::string, std::size_t> per_view;
    std::map<std::string, std::size_t> per_cell; // "CLASS/VIEW"
    std::map<std::string, std::size_t> dimensions; // "WxH"
    std::vector<std::string> violations;

    bool ok() const { return violations.empty(); }
    nlohmann::json to_json() const;
};

ValidationReport validate_manifest(const DatasetManifest& m);

/// Canvas size used when none is configured (width 4288, height 2848).
inline constexpr Size kDefaultCanvas{4288, 2848};

struct PadOffsets {
    int x = 0;
    int y = 0;
};

PadOffsets pad_offsets(Size image, Size target);
/// Centers `image` on a `target` canvas filled with `fill`. Throws DimensionError
/// if the canvas is smaller than the image.
Image pad_to_canvas(const Image& image, Size target, Rgb fill = {});

/// Pads every record and writes PNGs plus a new manifest into `out_dir`.
DatasetManifest pad_dataset(const DatasetManifest& m, Size canvas, Rgb fill, const std::filesystem::path& out_dir);

} // namespace kstone
