#pragma once

#include "kstone/dataset.hpp"
#include "kstone/image.hpp"
#include "kstone/rng.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace kstone::patch {

struct Patch {
    std::string id;
    std::string parent_id;
    StoneClass stone_class;
    View view = View::SUR;
    Source source = Source::CCD;
    int x = 0, y = 0; // offset of the top-left corner in the parent
    int size = 0;
    std::filesystem::path parent_path;
    std::filesystem::path file; // saved PNG, empty until written
    Image pixels;               // may be empty; see patch_pixels()

    /// Parent identity across datasets, "SOURCE:parent_id".
    std::string parent_key() const;
};

/// Returns the stored pixels, else the saved file, else a crop of the parent.
Image patch_pixels(const Patch& p);

struct PatchOptions {
    int size = 256;
    double stone_fraction = 0.9;
    double background_threshold = 10.0 / 255.0; // luma above this counts as stone
    bool keep_pixels = false;
};

/// Random offsets whose stone coverage is at least `stone_fraction` (skipped
/// for endoscopic images). Rejection sampling is capped at 1000*n attempts.
std::vector<Patch> extract_patches(const ImageRecord& record, const Image& image, int n, Rng& rng,
                                   const PatchOptions& opts);
std::vector<Patch> extract_patches(const ImageRecord& record, int n, Rng& rng, const PatchOptions& opts);

struct PatchSet {
    std::string name;
    int patch_size = 0;
    std::vector<Patch> patches;

    std::set<std::string> parent_keys() const;
    /// "CLASS/VIEW" -> patch count.
    std::map<std::string, std::size_t> cell_counts() const;
};

/// Splits `total` over `parts` as evenly as possible, remainder to the first.
std::vector<int> even_allocation(int total, int parts);

/// Exactly `per_class_per_view` patches for every (class, view) cell of the
/// manifest's family, spread evenly across each cell's parent images.
PatchSet build_patch_dataset(const DatasetManifest& manifest, int per_class_per_view, std::uint64_t seed,
                             const PatchOptions& opts = {});

struct SplitPlan {
    std::set<std::string> train_ids, test_ids; // parent record ids
    double ratio = 0.8;
};

/// Parent-level split per (class, view): round(n*(1-ratio)) parents go to
/// test, at least one on each side.
SplitPlan plan_split(const DatasetManifest& manifest, double ratio, std::uint64_t seed);

struct SplitPatchSets {
    SplitPlan plan;
    PatchSet train, test;
};

/// Plans the parent split first, then allocates exactly
/// round(per_cell*(1-ratio)) test and the rest train patches per cell.
SplitPatchSets build_split_patch_dataset(const DatasetManifest& manifest, int per_class_per_view, double ratio,
                                         std::uint64_t seed, const PatchOptions& opts = {});

/// Parent-level split of an existing patch set; counts follow the parents.
std::pair<PatchSet, PatchSet> split(const PatchSet& patches, double ratio, std::uint64_t seed);

struct LeakageReport {
    std::vector<std::string> shared_parents;
    bool clean() const { return shared_parents.empty(); }
};

LeakageReport audit_leakage(const PatchSet& train, const PatchSet& test);
/// Throws LeakageError naming the shared parents.
void require_no_leakage(const PatchSet& train, const PatchSet& test);

/// Writes <dir>/images/<id>.png and <dir>/index.csv; sets Patch::file.
void save_patchset(PatchSet& ps, const std::filesystem::path& dir);
PatchSet load_patchset(const std::filesystem::path& dir);

/// Writes train/, test/ and split.json under `dir`.
void save_split(SplitPatchSets& s, const std::filesystem::path& dir);

/// Concatenation without reweighting.
PatchSet concat(const PatchSet& a, const PatchSet& b, const std::string& name);

} // namespace kstone::patch
