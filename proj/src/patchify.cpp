#include "kstone/patchify.hpp"

#include "kstone/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace kstone::patch {

namespace fs = std::filesystem;

std::string Patch::parent_key() const { return to_string(source) + ":" + parent_id; }

Image patch_pixels(const Patch& p) {
    if (!p.pixels.empty()) return p.pixels;
    if (!p.file.empty() && fs::exists(p.file)) return load_image(p.file);
    if (p.parent_path.empty()) throw IoError("patch " + p.id + " has no pixels, file or parent");
    return crop(load_image(p.parent_path), p.x, p.y, p.size, p.size);
}

namespace {

std::string patch_id(const std::string& parent, int k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "_p%04d", k);
    return parent + buf;
}

std::string cell_key(const StoneClass& c, View v) { return c.code + "/" + to_string(v); }

Taxonomy manifest_taxonomy(const DatasetManifest& m) {
    if (m.records.empty()) throw ParameterError("manifest '" + m.name + "' is empty");
    return m.records.front().stone_class.taxonomy;
}

struct Cell {
    StoneClass cls;
    View view;
    std::vector<const ImageRecord*> parents;
};

std::vector<Cell> cells_of(const DatasetManifest& m, bool require_all) {
    const Taxonomy t = manifest_taxonomy(m);
    std::set<View> present;
    for (const auto& r : m.records) present.insert(r.view);
    std::vector<Cell> cells;
    for (const auto& code : family_codes(t))
        for (View v : present) {
            Cell c{make_class(code, t), v, {}};
            for (const auto& r : m.records)
                if (r.stone_class.code == code && r.view == v) c.parents.push_back(&r);
            if (c.parents.empty()) {
                if (require_all)
                    throw ParameterError("manifest '" + m.name + "' has no images for cell (" + code + ", " +
                                         to_string(v) + ")");
                continue;
            }
            cells.push_back(std::move(c));
        }
    return cells;
}

int test_parent_count(std::size_t n, double ratio, const std::string& cell) {
    if (n < 2)
        throw ConstraintError("cell " + cell + " has a single parent image; an image-exclusive split is impossible");
    const long t = std::lround(static_cast<double>(n) * (1.0 - ratio));
    return static_cast<int>(std::clamp<long>(t, 1, static_cast<long>(n) - 1));
}

void check_ratio(double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("split ratio must lie strictly between 0 and 1");
}

/// Shuffled copy of `items`, seeded by the cell so the order does not depend on other cells.
template <class T>
std::vector<T> shuffled(std::vector<T> items, std::uint64_t seed, const std::string& cell) {
    Rng rng(mix_seed(seed, stable_hash(cell)));
    rng.shuffle(items.begin(), items.end());
    return items;
}

void append_for_parents(PatchSet& out, const std::vector<const ImageRecord*>& parents, int total,
                        std::uint64_t seed, const PatchOptions& opts) {
    const auto alloc = even_allocation(total, static_cast<int>(parents.size()));
    for (std::size_t i = 0; i < parents.size(); ++i) {
        if (alloc[i] == 0) continue;
        Rng rng(mix_seed(seed, stable_hash(parents[i]->id)));
        auto ps = extract_patches(*parents[i], alloc[i], rng, opts);
        out.patches.insert(out.patches.end(), std::make_move_iterator(ps.begin()),
                           std::make_move_iterator(ps.end()));
    }
}

} // namespace

std::vector<Patch> extract_patches(const ImageRecord& record, const Image& image, int n, Rng& rng,
                                   const PatchOptions& opts) {
    if (n < 0) throw ParameterError("patch count must be non-negative");
    if (opts.size <= 0) throw ParameterError("patch size must be positive");
    if (image.width < opts.size || image.height < opts.size)
        throw DimensionError("image " + record.id + " (" + format_size(image.size()) + ") is smaller than the " +
                             std::to_string(opts.size) + " px patch");
    std::vector<Patch> out;
    if (n == 0) return out;
    const int s = opts.size;
    const bool check = record.source != Source::ENDOSCOPIC && opts.stone_fraction > 0.0;
    std::vector<std::uint32_t> integral;
    const int iw = image.width + 1;
    if (check) {
        integral.assign(static_cast<std::size_t>(iw) * (image.height + 1), 0);
        for (int y = 0; y < image.height; ++y) {
            std::uint32_t row = 0;
            for (int x = 0; x < image.width; ++x) {
                const double l = 0.299 * image.at(x, y, 0) + 0.587 * image.at(x, y, 1) + 0.114 * image.at(x, y, 2);
                row += l > opts.background_threshold ? 1 : 0;
                integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
            }
        }
    }
    const double need = opts.stone_fraction * s * s;
    const long cap = 1000L * n;
    long attempts = 0;
    while (static_cast<int>(out.size()) < n) {
        if (attempts++ >= cap)
            throw ConstraintError("could only place " + std::to_string(out.size()) + " of " + std::to_string(n) +
                                  " patches in " + record.id + " after " + std::to_string(cap) +
                                  " attempts; lower stone_fraction");
        const int x = static_cast<int>(rng.below(image.width - s + 1));
        const int y = static_cast<int>(rng.below(image.height - s + 1));
        if (check) {
            const double stone = static_cast<double>(integral[(y + s) * iw + x + s]) - integral[y * iw + x + s] -
                                 integral[(y + s) * iw + x] + integral[y * iw + x];
            if (stone < need) continue;
        }
        Patch p;
        p.id = patch_id(record.id, static_cast<int>(out.size()));
        p.parent_id = record.id;
        p.stone_class = record.stone_class;
        p.view = record.view;
        p.source = record.source;
        p.x = x;
        p.y = y;
        p.size = s;
        p.parent_path = record.path;
        if (opts.keep_pixels) p.pixels = crop(image, x, y, s, s);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Patch> extract_patches(const ImageRecord& record, int n, Rng& rng, const PatchOptions& opts) {
    return extract_patches(record, load_image(record.path), n, rng, opts);
}

std::set<std::string> PatchSet::parent_keys() const {
    std::set<std::string> out;
    for (const auto& p : patches) out.insert(p.parent_key());
    return out;
}

std::map<std::string, std::size_t> PatchSet::cell_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& p : patches) ++out[cell_key(p.stone_class, p.view)];
    return out;
}

std::vector<int> even_allocation(int total, int parts) {
    if (parts <= 0) throw ParameterError("allocation needs at least one part");
    if (total < 0) throw ParameterError("allocation total must be non-negative");
    std::vector<int> out(parts, total / parts);
    for (int i = 0; i < total % parts; ++i) ++out[i];
    return out;
}

PatchSet build_patch_dataset(const DatasetManifest& manifest, int per_class_per_view, std::uint64_t seed,
                             const PatchOptions& opts) {
    if (per_class_per_view < 0) throw ParameterError("per-cell patch count must be non-negative");
    PatchSet ps;
    ps.name = manifest.name;
    ps.patch_size = opts.size;
    for (const auto& cell : cells_of(manifest, true))
        append_for_parents(ps, cell.parents, per_class_per_view, seed, opts);
    return ps;
}

SplitPlan plan_split(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
    check_ratio(ratio);
    SplitPlan plan;
    plan.ratio = ratio;
    for (const auto& cell : cells_of(manifest, false)) {
        const std::string key = cell_key(cell.cls, cell.view);
        std::vector<std::string> ids;
        for (const auto* r : cell.parents) ids.push_back(r->id);
        const int n_test = test_parent_count(ids.size(), ratio, key);
        ids = shuffled(std::move(ids), seed, key);
        for (std::size_t i = 0; i < ids.size(); ++i)
            (static_cast<int>(i) < n_test ? plan.test_ids : plan.train_ids).insert(ids[i]);
    }
    return plan;
}

SplitPatchSets build_split_patch_dataset(const DatasetManifest& manifest, int per_class_per_view, double ratio,
                                         std::uint64_t seed, const PatchOptions& opts) {
    check_ratio(ratio);
    if (per_class_per_view < 2) throw ParameterError("an exclusive split needs at least 2 patches per cell");
    SplitPatchSets out;
    out.plan = plan_split(manifest, ratio, seed);
    out.train.name = manifest.name + "_train";
    out.test.name = manifest.name + "_test";
    out.train.patch_size = out.test.patch_size = opts.size;
    const int n_test = static_cast<int>(
        std::clamp<long>(std::lround(per_class_per_view * (1.0 - ratio)), 1, per_class_per_view - 1));
    for (const auto& cell : cells_of(manifest, true)) {
        std::vector<const ImageRecord*> tr, te;
        for (const auto* r : cell.parents) (out.plan.test_ids.count(r->id) ? te : tr).push_back(r);
        append_for_parents(out.train, tr, per_class_per_view - n_test, seed, opts);
        append_for_parents(out.test, te, n_test, seed, opts);
    }
    return out;
}

std::pair<PatchSet, PatchSet> split(const PatchSet& patches, double ratio, std::uint64_t seed) {
    check_ratio(ratio);
    std::map<std::string, std::vector<std::string>> parents_by_cell;
    for (const auto& p : patches.patches) {
        auto& v = parents_by_cell[cell_key(p.stone_class, p.view)];
        if (std::find(v.begin(), v.end(), p.parent_key()) == v.end()) v.push_back(p.parent_key());
    }
    std::set<std::string> test_keys;
    for (auto& [cell, keys] : parents_by_cell) {
        const int n_test = test_parent_count(keys.size(), ratio, cell);
        const auto order = shuffled(keys, seed, cell);
        test_keys.insert(order.begin(), order.begin() + n_test);
    }
    std::pair<PatchSet, PatchSet> out;
    out.first.name = patches.name + "_train";
    out.second.name = patches.name + "_test";
    out.first.patch_size = out.second.patch_size = patches.patch_size;
    for (const auto& p : patches.patches) (test_keys.count(p.parent_key()) ? out.second : out.first).patches.push_back(p);
    return out;
}

LeakageReport audit_leakage(const PatchSet& train, const PatchSet& test) {
    const auto a = train.parent_keys(), b = test.parent_keys();
    LeakageReport r;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(r.shared_parents));
    return r;
}

void require_no_leakage(const PatchSet& train, const PatchSet& test) {
    const auto r = audit_leakage(train, test);
    if (r.clean()) return;
    std::string list;
    for (std::size_t i = 0; i < r.shared_parents.size() && i < 5; ++i) list += (i ? ", " : "") + r.shared_parents[i];
    if (r.shared_parents.size() > 5) list += ", ...";
    throw LeakageError(std::to_string(r.shared_parents.size()) + " parent image(s) appear on both sides: " + list);
}

namespace {

std::string relative_to(const fs::path& p, const fs::path& base) {
    if (p.empty()) return "";
    const fs::path rel = fs::weakly_canonical(fs::absolute(p)).lexically_relative(fs::weakly_canonical(fs::absolute(base)));
    return rel.empty() ? p.string() : rel.generic_string();
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

} // namespace

void save_patchset(PatchSet& ps, const fs::path& dir) {
    fs::create_directories(dir / "images");
    std::ofstream idx(dir / "index.csv.tmp");
    if (!idx) throw IoError("cannot write " + (dir / "index.csv").string());
    idx << "# name=" << ps.name << "\n# size=" << ps.patch_size << "\n";
    idx << "id,file,parent_id,class,view,source,x,y,size,parent_path\n";
    fs::path cached_path;
    Image cached;
    for (auto& p : ps.patches) {
        Image px;
        if (!p.pixels.empty()) {
            px = p.pixels;
        } else if (!p.parent_path.empty()) {
            if (p.parent_path != cached_path) {
                cached = load_image(p.parent_path);
                cached_path = p.parent_path;
            }
            px = crop(cached, p.x, p.y, p.size, p.size);
        } else {
            px = patch_pixels(p);
        }
        const fs::path file = dir / "images" / (p.id + ".png");
        save_png(px, file);
        p.file = file;
        idx << p.id << ",images/" << p.id << ".png," << p.parent_id << "," << p.stone_class.code << ","
            << to_string(p.view) << "," << to_string(p.source) << "," << p.x << "," << p.y << "," << p.size << ","
            << relative_to(p.parent_path, dir) << "\n";
    }
    idx.close();
    fs::rename(dir / "index.csv.tmp", dir / "index.csv");
}

PatchSet load_patchset(const fs::path& dir) {
    std::ifstream in(dir / "index.csv");
    if (!in) throw IoError("no patch index at " + (dir / "index.csv").string());
    PatchSet ps;
    std::string line;
    int lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("# name=", 0) == 0) ps.name = line.substr(7);
            if (line.rfind("# size=", 0) == 0) ps.patch_size = std::stoi(line.substr(7));
            continue;
        }
        if (!header) {
            header = true;
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != 10) throw IoError((dir / "index.csv").string() + ":" + std::to_string(lineno) + ": expected 10 fields");
        Patch p;
        p.id = f[0];
        p.file = dir / f[1];
        p.parent_id = f[2];
        p.source = parse_source(f[5]);
        p.stone_class = make_class(f[3], family_of(p.source));
        p.view = parse_view(f[4]);
        p.x = std::stoi(f[6]);
        p.y = std::stoi(f[7]);
        p.size = std::stoi(f[8]);
        if (!f[9].empty()) p.parent_path = dir / f[9];
        ps.patches.push_back(std::move(p));
    }
    return ps;
}

void save_split(SplitPatchSets& s, const fs::path& dir) {
    save_patchset(s.train, dir / "train");
    save_patchset(s.test, dir / "test");
    nlohmann::json j{{"ratio", s.plan.ratio},
                     {"train_ids", std::vector<std::string>(s.plan.train_ids.begin(), s.plan.train_ids.end())},
                     {"test_ids", std::vector<std::string>(s.plan.test_ids.begin(), s.plan.test_ids.end())},
                     {"train_patches", s.train.patches.size()},
                     {"test_patches", s.test.patches.size()}};
    std::ofstream(dir / "split.json") << j.dump(2) << "\n";
}

PatchSet concat(const PatchSet& a, const PatchSet& b, const std::string& name) {
    if (a.patch_size != b.patch_size && !a.patches.empty() && !b.patches.empty())
        throw DimensionError("cannot combine patch sets of different patch sizes");
    PatchSet out;
    out.name = name;
    out.patch_size = a.patches.empty() ? b.patch_size : a.patch_size;
    out.patches = a.patches;
    out.patches.insert(out.patches.end(), b.patches.begin(), b.patches.end());
    return out;
}

} // namespace kstone::patch
