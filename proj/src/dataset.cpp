#include "kstone/dataset.hpp"

#include "kstone/error.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace kstone {

std::string to_string(View v) { return v == View::SUR ? "SUR" : "SEC"; }

std::string to_string(Taxonomy t) { return t == Taxonomy::CCD_FAMILY ? "CCD_FAMILY" : "ENDO_FAMILY"; }

std::string to_string(Source s) {
    switch (s) {
    case Source::CCD: return "CCD";
    case Source::SYNTHETIC: return "SYNTHETIC";
    case Source::ENDOSCOPIC: return "ENDOSCOPIC";
    }
    return "?";
}

View parse_view(const std::string& s) {
    if (s == "SUR") return View::SUR;
    if (s == "SEC") return View::SEC;
    throw ParameterError("unknown view '" + s + "' (expected SUR or SEC)");
}

Source parse_source(const std::string& s) {
    if (s == "CCD") return Source::CCD;
    if (s == "SYNTHETIC") return Source::SYNTHETIC;
    if (s == "ENDOSCOPIC") return Source::ENDOSCOPIC;
    throw ParameterError("unknown source '" + s + "'");
}

const std::array<std::string, 6>& family_codes(Taxonomy t) {
    static const std::array<std::string, 6> ccd = {"WW", "STR", "CYS", "BRU", "CAR", "CAR2"};
    static const std::array<std::string, 6> endo = {"WW", "WD", "UA", "STR", "BRU", "CYS"};
    return t == Taxonomy::CCD_FAMILY ? ccd : endo;
}

Taxonomy family_of(Source s) { return s == Source::ENDOSCOPIC ? Taxonomy::ENDO_FAMILY : Taxonomy::CCD_FAMILY; }

StoneClass make_class(const std::string& code, Taxonomy t) {
    const auto& codes = family_codes(t);
    if (std::find(codes.begin(), codes.end(), code) == codes.end())
        throw TaxonomyError("class '" + code + "' is not in " + to_string(t));
    return {code, t};
}

int class_index(const StoneClass& c) {
    const auto& codes = family_codes(c.taxonomy);
    const auto it = std::find(codes.begin(), codes.end(), c.code);
    if (it == codes.end()) throw TaxonomyError("class '" + c.code + "' is not in " + to_string(c.taxonomy));
    return static_cast<int>(it - codes.begin());
}

std::vector<const ImageRecord*> DatasetManifest::with_view(View v) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.view == v) out.push_back(&r);
    return out;
}

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    return out;
}

} // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open manifest " + path.string());
    DatasetManifest m;
    m.name = path.stem().string();
    const auto base = path.parent_path();
    std::set<std::string> ids;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string body = trim(line.substr(1));
            if (body.rfind("name=", 0) == 0) m.name = body.substr(5);
            else if (body.rfind("canvas=", 0) == 0) m.canvas = parse_size(body.substr(7));
            continue;
        }
        const auto f = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (f.size() != 5)
            throw IngestionError(where + ": expected 5 fields (id,path,class,view,source), got " +
                                 std::to_string(f.size()));
        ImageRecord r;
        r.id = f[0];
        try {
            r.view = parse_view(f[3]);
            r.source = parse_source(f[4]);
        } catch (const ParameterError& e) {
            throw IngestionError(where + " entry '" + r.id + "': " + e.what());
        }
        try {
            r.stone_class = make_class(f[2], family_of(r.source));
        } catch (const TaxonomyError& e) {
            throw TaxonomyError(where + " entry '" + r.id + "': " + e.what());
        }
        r.path = base / f[1];
        if (!std::filesystem::exists(r.path))
            throw IngestionError(where + " entry '" + r.id + "': missing image file " + r.path.string());
        if (!ids.insert(r.id).second) throw IngestionError(where + ": duplicate id '" + r.id + "'");
        if (!m.records.empty() && m.records.front().source != r.source)
            throw IngestionError(where + " entry '" + r.id + "': mixed sources in one manifest");
        const Size s = probe_image_size(r.path);
        r.width = s.width;
        r.height = s.height;
        if (r.width <= 0 || r.height <= 0) throw IngestionError(where + " entry '" + r.id + "': empty image");
        m.records.push_back(std::move(r));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    const auto base = path.parent_path();
    out << "# name=" << m.name << "\n";
    if (m.canvas) out << "# canvas=" << format_size(*m.canvas) << "\n";
    for (const auto& r : m.records) {
        auto rel = r.path.lexically_relative(base.empty() ? std::filesystem::path(".") : base);
        if (rel.empty()) rel = r.path;
        out << r.id << "," << rel.generic_string() << "," << r.stone_class.code << "," << to_string(r.view) << ","
            << to_string(r.source) << "\n";
    }
    if (!out) throw IoError("write failed: " + path.string());
}

nlohmann::json ValidationReport::to_json() const {
    return {{"total", total},           {"per_class", per_class},   {"per_view", per_view},
            {"per_cell", per_cell},     {"dimensions", dimensions}, {"violations", violations}};
}

ValidationReport validate_manifest(const DatasetManifest& m) {
    ValidationReport rep;
    rep.total = m.records.size();
    std::map<std::string, std::size_t> id_counts;
    for (const auto& r : m.records) {
        ++rep.per_class[r.stone_class.code];
        ++rep.per_view[to_string(r.view)];
        ++rep.per_cell[r.stone_class.code + "/" + to_string(r.view)];
        ++rep.dimensions[format_size({r.width, r.height})];
        ++id_counts[r.id];
        if (r.width <= 0 || r.height <= 0) rep.violations.push_back("non-positive dimensions: " + r.id);
        if (r.stone_class.taxonomy != family_of(r.source))
            rep.violations.push_back("class family does not match source: " + r.id);
        else if (const auto& codes = family_codes(r.stone_class.taxonomy);
                 std::find(codes.begin(), codes.end(), r.stone_class.code) == codes.end())
            rep.violations.push_back("unknown class '" + r.stone_class.code + "': " + r.id);
        if (r.source != m.records.front().source) rep.violations.push_back("mixed source: " + r.id);
        if (m.canvas && (r.width != m.canvas->width || r.height != m.canvas->height))
            rep.violations.push_back("not at canvas size: " + r.id);
    }
    for (const auto& [id, n] : id_counts)
        if (n > 1) rep.violations.push_back("duplicate id: " + id);
    return rep;
}

PadOffsets pad_offsets(Size image, Size target) {
    if (target.width < image.width || target.height < image.height)
        throw DimensionError("canvas " + format_size(target) + " is smaller than image " + format_size(image) +
                             " (padding never crops)");
    return {(target.width - image.width) / 2, (target.height - image.height) / 2};
}

Image pad_to_canvas(const Image& image, Size target, Rgb fill) {
    const PadOffsets off = pad_offsets(image.size(), target);
    if (image.size() == target) return image;
    Image out(target.width, target.height, image.channels);
    const float fills[3] = {fill.r, fill.g, fill.b};
    for (std::size_t i = 0; i < out.pixel_count(); ++i)
        for (int c = 0; c < out.channels; ++c) out.data[i * out.channels + c] = fills[std::min(c, 2)];
    const std::size_t row_len = static_cast<std::size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y) {
        const float* src = &image.data[static_cast<std::size_t>(y) * row_len];
        std::copy(src, src + row_len,
                  &out.data[(static_cast<std::size_t>(y + off.y) * out.width + off.x) * out.channels]);
    }
    return out;
}

DatasetManifest pad_dataset(const DatasetManifest& m, Size canvas, Rgb fill, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir / "images");
    DatasetManifest out;
    out.name = m.name + "_padded";
    out.canvas = canvas;
    for (const auto& r : m.records) {
        const Image padded = pad_to_canvas(load_image(r.path), canvas, fill);
        ImageRecord nr = r;
        nr.path = out_dir / "images" / (r.id + ".png");
        nr.width = canvas.width;
        nr.height = canvas.height;
        save_png(padded, nr.path);
        out.records.push_back(std::move(nr));
    }
    save_manifest(out, out_dir / "manifest.txt");
    return out;
}

} // namespace kstone
