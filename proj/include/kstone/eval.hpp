#pragma once

#include "kstone/dataset.hpp"
#include "kstone/image.hpp"
#include "kstone/nn/layers.hpp"

#include <Eigen/Dense>

#include "json.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace kstone::eval {

struct ImageProperties {
    double brightness = 0;
    double rms_contrast = 0;
    double mean_rel_r = 0;
    double mean_rel_g = 0;
    double mean_rel_b = 0;

    double get(std::size_t index) const;
};

inline constexpr std::array<const char*, 5> kPropertyNames = {"brightness", "rms_contrast", "mean_rel_r",
                                                               "mean_rel_g", "mean_rel_b"};
inline constexpr double kDriftThreshold = 0.2;

/// Rec. 601 luma brightness and contrast plus per-channel relative intensity,
/// all on the 0..255 scale of the stored pixels. A black pixel contributes
/// 1/3 to each relative-intensity channel so the three means always sum to 1.
ImageProperties compute_properties(const Image& image);

/// Earth mover's distance between the empirical distributions of a and b after
/// min-max normalizing their union to [0,1]. Zero when the union is constant.
double drift_score(const std::vector<double>& a, const std::vector<double>& b);

struct PropertyHistogram {
    std::string property;
    double lo = 0, hi = 0;
    std::vector<double> density_a, density_b; // fraction of samples per bin
};

PropertyHistogram make_histogram(const std::string& property, const std::vector<double>& a,
                                 const std::vector<double>& b, int bins = 20);

struct DriftReport {
    View view = View::SUR;
    std::string dataset_a, dataset_b;
    std::size_t count_a = 0, count_b = 0;
    double threshold = kDriftThreshold;
    std::map<std::string, double> per_property;
    std::map<std::string, bool> flags;
    std::vector<PropertyHistogram> histograms;
    std::vector<ImageProperties> properties_a, properties_b;

    nlohmann::json to_json() const;
    static DriftReport from_json(const nlohmann::json& j);
};

/// Per-image properties are computed in record order.
std::vector<ImageProperties> dataset_properties(const DatasetManifest& m, View view);

DriftReport evaluate_suite(const DatasetManifest& a, const DatasetManifest& b, View view,
                           double threshold = kDriftThreshold);

/// Per-pixel mean luma over all images of the view; one channel in [0,1].
Image heatmap(const DatasetManifest& dataset, View view);

// Deep features ---------------------------------------------------------------

/// Interleaved H x W x C feature map.
struct FeatureMap {
    int height = 0, width = 0, channels = 0;
    std::vector<float> data;
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

struct ExtractorDescriptor {
    std::string kind = "identity"; // "identity" or "cnn"
    std::string truncation = "input";
    int channels = 3;
    int downsample = 1;
    std::optional<Size> input_size;          // resize before extraction when set
    std::optional<std::filesystem::path> weights;
    std::uint64_t seed = 0;                  // cnn weights when no file is given

    nlohmann::json to_json() const;
    static ExtractorDescriptor from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
};

/// Feature extractor handle. The cnn kind is a fixed three-convolution stack
/// (3-16-16, max pool, 32) truncated at the convolution before the second pool.
class FeatureExtractor {
public:
    explicit FeatureExtractor(ExtractorDescriptor d);
    FeatureMap extract(const Image& image) const;
    const ExtractorDescriptor& descriptor() const { return desc_; }
    Size output_size(Size in) const;
    void save_weights(const std::filesystem::path& path) const;

private:
    ExtractorDescriptor desc_;
    std::shared_ptr<nn::Sequential> net_;
};

FeatureExtractor identity_extractor();
FeatureExtractor cnn_extractor(std::uint64_t seed);
/// Reads a JSON descriptor; relative weight paths resolve against its directory.
FeatureExtractor load_extractor(const std::filesystem::path& descriptor_path);

FeatureMap extract_deep_features(const Image& image, const FeatureExtractor& extractor);

struct FeatureStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
};

/// Called with a message when a map has fewer locations than channels.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);

/// Mean and unbiased covariance over spatial locations, plus `reg` on the diagonal.
FeatureStats feature_stats(const FeatureMap& map, double reg = 1e-6);

double frechet_distance(const FeatureStats& s1, const FeatureStats& s2);

double sifid(const Image& real, const Image& generated, const FeatureExtractor& extractor);

struct SIFIDResult {
    std::vector<double> per_pair;
    std::vector<std::string> pair_ids; // "real_id|synthetic_id"
    double mean = 0;
    double std = 0; // sample standard deviation, 0 for a single pair

    nlohmann::json to_json() const;
};

SIFIDResult summarize(std::vector<double> values, std::vector<std::string> ids = {});

/// All real x synthetic pairs sharing a class within the view.
SIFIDResult sifid_corpus(const DatasetManifest& real, const DatasetManifest& synthetic, View view,
                         const FeatureExtractor& extractor);

/// Writes drift.json, histograms.json, heatmap_*.png and (optionally) sifid.json.
void write_eval_bundle(const std::filesystem::path& dir, const DriftReport& report, const Image& heat_a,
                       const Image& heat_b, const std::optional<SIFIDResult>& sifid_result);

} // namespace kstone::eval
