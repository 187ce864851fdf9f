#include "kstone/eval.hpp"

#include "kstone/error.hpp"
#include "kstone/nn/serialize.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>

namespace kstone::eval {

namespace {

std::mutex g_sink_mutex;
WarningSink g_sink = [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };

void warn(const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_sink_mutex);
    if (g_sink) g_sink(msg);
}

std::vector<const ImageRecord*> view_subset(const DatasetManifest& m, View view) {
    auto recs = m.with_view(view);
    if (recs.empty())
        throw ParameterError("dataset '" + m.name + "' has no images of view " + to_string(view));
    return recs;
}

// Float pixels decoded from 8-bit files carry rounding noise; recover the level.
double level(float v) {
    const double x = 255.0 * v;
    const double r = std::round(x);
    return std::abs(x - r) < 1e-3 ? r : x;
}

} // namespace

double ImageProperties::get(std::size_t index) const {
    switch (index) {
    case 0: return brightness;
    case 1: return rms_contrast;
    case 2: return mean_rel_r;
    case 3: return mean_rel_g;
    case 4: return mean_rel_b;
    default: throw IndexError("property index out of range");
    }
}

ImageProperties compute_properties(const Image& image) {
    if (image.pixel_count() == 0) throw DimensionError("cannot compute properties of an empty image");
    if (image.channels != 3) throw DimensionError("properties need an RGB image");
    const std::size_t n = image.pixel_count();
    double sum_l = 0, sum_l2 = 0, rel[3] = {0, 0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        const double r = level(image.data[3 * i]), g = level(image.data[3 * i + 1]),
                     b = level(image.data[3 * i + 2]);
        const double l = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
        sum_l += l;
        sum_l2 += l * l;
        const double s = r + g + b;
        if (s <= 0.0) {
            for (double& v : rel) v += 1.0 / 3.0;
        } else {
            rel[0] += r / (s + 1e-8);
            rel[1] += g / (s + 1e-8);
            rel[2] += b / (s + 1e-8);
        }
    }
    ImageProperties p;
    p.brightness = sum_l / n;
    p.rms_contrast = std::sqrt(std::max(0.0, sum_l2 / n - p.brightness * p.brightness));
    p.mean_rel_r = rel[0] / n;
    p.mean_rel_g = rel[1] / n;
    p.mean_rel_b = rel[2] / n;
    return p;
}

double drift_score(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw ParameterError("drift_score needs two non-empty samples");
    const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
    const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
    const double lo = std::min(*amin, *bmin), hi = std::max(*amax, *bmax);
    if (!(hi > lo)) return 0.0;
    std::vector<double> sa(a), sb(b);
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    // Integrate |F_a - F_b| along the merged breakpoints.
    const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double prev = std::min(sa[0], sb[0]);
    double total = 0.0;
    while (i < sa.size() || j < sb.size()) {
        const double x = j >= sb.size() || (i < sa.size() && sa[i] <= sb[j]) ? sa[i] : sb[j];
        total += std::abs(i / na - j / nb) * (x - prev);
        prev = x;
        while (i < sa.size() && sa[i] == x) ++i;
        while (j < sb.size() && sb[j] == x) ++j;
    }
    return std::clamp(total / (hi - lo), 0.0, 1.0);
}

PropertyHistogram make_histogram(const std::string& property, const std::vector<double>& a,
                                 const std::vector<double>& b, int bins) {
    if (bins < 1) throw ParameterError("histogram needs at least one bin");
    PropertyHistogram h;
    h.property = property;
    h.lo = std::numeric_limits<double>::infinity();
    h.hi = -h.lo;
    for (const auto* v : {&a, &b})
        for (double x : *v) {
            h.lo = std::min(h.lo, x);
            h.hi = std::max(h.hi, x);
        }
    if (a.empty() && b.empty()) h.lo = h.hi = 0;
    h.density_a.assign(bins, 0.0);
    h.density_b.assign(bins, 0.0);
    const double width = h.hi - h.lo;
    auto fill = [&](const std::vector<double>& v, std::vector<double>& out) {
        for (double x : v) {
            int k = width > 0 ? static_cast<int>((x - h.lo) / width * bins) : 0;
            out[std::clamp(k, 0, bins - 1)] += 1.0 / v.size();
        }
    };
    fill(a, h.density_a);
    fill(b, h.density_b);
    return h;
}

std::vector<ImageProperties> dataset_properties(const DatasetManifest& m, View view) {
    std::vector<ImageProperties> out;
    for (const auto* r : view_subset(m, view)) out.push_back(compute_properties(load_image(r->path)));
    return out;
}

namespace {

nlohmann::json props_json(const std::vector<ImageProperties>& ps) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : ps) {
        nlohmann::json o;
        for (std::size_t k = 0; k < kPropertyNames.size(); ++k) o[kPropertyNames[k]] = p.get(k);
        arr.push_back(o);
    }
    return arr;
}

std::vector<ImageProperties> props_from_json(const nlohmann::json& arr) {
    std::vector<ImageProperties> out;
    for (const auto& o : arr) {
        ImageProperties p;
        p.brightness = o.at("brightness");
        p.rms_contrast = o.at("rms_contrast");
        p.mean_rel_r = o.at("mean_rel_r");
        p.mean_rel_g = o.at("mean_rel_g");
        p.mean_rel_b = o.at("mean_rel_b");
        out.push_back(p);
    }
    return out;
}

} // namespace

nlohmann::json DriftReport::to_json() const {
    nlohmann::json j;
    j["view"] = to_string(view);
    j["dataset_a"] = dataset_a;
    j["dataset_b"] = dataset_b;
    j["count_a"] = count_a;
    j["count_b"] = count_b;
    j["threshold"] = threshold;
    j["per_property"] = per_property;
    j["flags"] = flags;
    nlohmann::json hs = nlohmann::json::array();
    for (const auto& h : histograms)
        hs.push_back({{"property", h.property}, {"lo", h.lo}, {"hi", h.hi}, {"density_a", h.density_a},
                      {"density_b", h.density_b}});
    j["histograms"] = hs;
    j["properties_a"] = props_json(properties_a);
    j["properties_b"] = props_json(properties_b);
    return j;
}

DriftReport DriftReport::from_json(const nlohmann::json& j) {
    DriftReport r;
    r.view = parse_view(j.at("view").get<std::string>());
    r.dataset_a = j.at("dataset_a");
    r.dataset_b = j.at("dataset_b");
    r.count_a = j.at("count_a");
    r.count_b = j.at("count_b");
    r.threshold = j.at("threshold");
    r.per_property = j.at("per_property").get<std::map<std::string, double>>();
    r.flags = j.at("flags").get<std::map<std::string, bool>>();
    for (const auto& h : j.at("histograms"))
        r.histograms.push_back({h.at("property"), h.at("lo"), h.at("hi"),
                                h.at("density_a").get<std::vector<double>>(),
                                h.at("density_b").get<std::vector<double>>()});
    if (j.contains("properties_a")) r.properties_a = props_from_json(j["properties_a"]);
    if (j.contains("properties_b")) r.properties_b = props_from_json(j["properties_b"]);
    return r;
}

DriftReport evaluate_suite(const DatasetManifest& a, const DatasetManifest& b, View view, double threshold) {
    view_subset(a, view);
    view_subset(b, view);
    DriftReport r;
    r.view = view;
    r.dataset_a = a.name;
    r.dataset_b = b.name;
    r.threshold = threshold;
    r.properties_a = dataset_properties(a, view);
    r.properties_b = dataset_properties(b, view);
    r.count_a = r.properties_a.size();
    r.count_b = r.properties_b.size();
    for (std::size_t k = 0; k < kPropertyNames.size(); ++k) {
        std::vector<double> va, vb;
        for (const auto& p : r.properties_a) va.push_back(p.get(k));
        for (const auto& p : r.properties_b) vb.push_back(p.get(k));
        const double score = drift_score(va, vb);
        r.per_property[kPropertyNames[k]] = score;
        r.flags[kPropertyNames[k]] = score > threshold;
        r.histograms.push_back(make_histogram(kPropertyNames[k], va, vb));
    }
    return r;
}

Image heatmap(const DatasetManifest& dataset, View view) {
    const auto recs = view_subset(dataset, view);
    std::vector<double> acc;
    Size dims{};
    for (const auto* r : recs) {
        const Image img = load_image(r->path);
        if (acc.empty()) {
            dims = img.size();
            acc.assign(img.pixel_count(), 0.0);
        } else if (img.size() != dims) {
            throw DimensionError("heatmap of '" + dataset.name + "': image " + r->id + " is " +
                                 format_size(img.size()) + " but others are " + format_size(dims) +
                                 "; pad the dataset to a common canvas first");
        }
        for (std::size_t i = 0; i < img.pixel_count(); ++i)
            acc[i] += 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] + 0.114 * img.data[3 * i + 2];
    }
    Image out(dims.width, dims.height, 1);
    for (std::size_t i = 0; i < acc.size(); ++i)
        out.data[i] = static_cast<float>(std::clamp(acc[i] / recs.size(), 0.0, 1.0));
    return out;
}

// Deep features ---------------------------------------------------------------

nlohmann::json ExtractorDescriptor::to_json() const {
    nlohmann::json j{{"kind", kind}, {"truncation", truncation}, {"channels", channels},
                     {"downsample", downsample}, {"seed", seed}};
    if (input_size) j["input_size"] = format_size(*input_size);
    if (weights) j["weights"] = weights->string();
    return j;
}

ExtractorDescriptor ExtractorDescriptor::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
    ExtractorDescriptor d;
    d.kind = j.value("kind", std::string("identity"));
    if (d.kind == "identity") {
        d.truncation = "input";
        d.channels = 3;
        d.downsample = 1;
    } else if (d.kind == "cnn") {
        d.truncation = "conv3";
        d.channels = 32;
        d.downsample = 2;
    } else {
        throw ConfigError("unknown feature extractor kind '" + d.kind + "'");
    }
    if (j.contains("truncation") && j["truncation"].get<std::string>() != d.truncation)
        throw ConfigError("extractor '" + d.kind + "' truncates at " + d.truncation + ", descriptor says " +
                          j["truncation"].get<std::string>());
    if (j.contains("channels") && j["channels"].get<int>() != d.channels)
        throw ConfigError("extractor '" + d.kind + "' has " + std::to_string(d.channels) + " channels");
    if (j.contains("downsample") && j["downsample"].get<int>() != d.downsample)
        throw ConfigError("extractor '" + d.kind + "' downsamples by " + std::to_string(d.downsample));
    if (j.contains("input_size")) d.input_size = parse_size(j["input_size"].get<std::string>());
    d.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("weights")) {
        std::filesystem::path w = j["weights"].get<std::string>();
        if (w.is_relative() && !base.empty()) w = base / w;
        d.weights = w;
    }
    return d;
}

FeatureExtractor::FeatureExtractor(ExtractorDescriptor d) : desc_(std::move(d)) {
    if (desc_.kind == "identity") return;
    if (desc_.kind != "cnn") throw ConfigError("unknown feature extractor kind '" + desc_.kind + "'");
    Rng rng(desc_.seed);
    net_ = std::make_shared<nn::Sequential>();
    net_->add<nn::Conv2d>(3, 16, 3, 1, 1, true, rng);
    net_->add<nn::ReLU>();
    net_->add<nn::Conv2d>(16, 16, 3, 1, 1, true, rng);
    net_->add<nn::ReLU>();
    net_->add<nn::MaxPool2d>(2, 2);
    net_->add<nn::Conv2d>(16, 32, 3, 1, 1, true, rng);
    net_->add<nn::ReLU>();
    if (desc_.weights) {
        if (!std::filesystem::exists(*desc_.weights))
            throw ConfigError("feature extractor weights not found: " + desc_.weights->string());
        const auto f = nn::read_blob_file(*desc_.weights, "KSFEAT");
        if (f.blobs.empty()) throw IoError(desc_.weights->string() + ": no parameter blob");
        nn::restore_state(*net_, f.blobs[0]);
    }
}

Size FeatureExtractor::output_size(Size in) const {
    if (desc_.input_size) in = *desc_.input_size;
    return {in.width / desc_.downsample, in.height / desc_.downsample};
}

void FeatureExtractor::save_weights(const std::filesystem::path& path) const {
    if (!net_) throw ConfigError("identity extractor has no weights");
    nn::BlobFile f;
    f.magic = "KSFEAT";
    f.header = desc_.to_json().dump();
    f.blobs.push_back(nn::flatten_state(*net_));
    nn::write_blob_file(f, path);
}

FeatureMap FeatureExtractor::extract(const Image& input) const {
    if (input.empty()) throw DimensionError("feature extraction of an empty image");
    if (input.channels != 3) throw DimensionError("feature extraction needs an RGB image");
    const Image img = desc_.input_size && input.size() != *desc_.input_size
                          ? resize_bicubic(input, desc_.input_size->width, desc_.input_size->height)
                          : input;
    FeatureMap fm;
    if (!net_) {
        fm.height = img.height;
        fm.width = img.width;
        fm.channels = 3;
        fm.data = img.data;
        return fm;
    }
    nn::Tensor x({1, 3, img.height, img.width});
    const std::size_t plane = img.pixel_count();
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) x.data[c * plane + i] = img.data[i * 3 + c] * 2.f - 1.f;
    const nn::Tensor y = net_->forward(x, false);
    fm.channels = y.dim(1);
    fm.height = y.dim(2);
    fm.width = y.dim(3);
    fm.data.resize(y.numel());
    const std::size_t out_plane = static_cast<std::size_t>(fm.height) * fm.width;
    for (std::size_t i = 0; i < out_plane; ++i)
        for (int c = 0; c < fm.channels; ++c) fm.data[i * fm.channels + c] = y.data[c * out_plane + i];
    return fm;
}

FeatureExtractor identity_extractor() { return FeatureExtractor(ExtractorDescriptor{}); }

FeatureExtractor cnn_extractor(std::uint64_t seed) {
    ExtractorDescriptor d = ExtractorDescriptor::from_json({{"kind", "cnn"}});
    d.seed = seed;
    return FeatureExtractor(d);
}

FeatureExtractor load_extractor(const std::filesystem::path& descriptor_path) {
    std::ifstream in(descriptor_path);
    if (!in) throw ConfigError("cannot open extractor descriptor " + descriptor_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(descriptor_path.string() + ": " + e.what());
    }
    return FeatureExtractor(ExtractorDescriptor::from_json(j, descriptor_path.parent_path()));
}

FeatureMap extract_deep_features(const Image& image, const FeatureExtractor& extractor) {
    return extractor.extract(image);
}

void set_warning_sink(WarningSink sink) {
    std::lock_guard<std::mutex> lock(g_sink_mutex);
    g_sink = std::move(sink);
}

FeatureStats feature_stats(const FeatureMap& map, double reg) {
    const std::size_t n = static_cast<std::size_t>(map.height) * map.width;
    const int c = map.channels;
    if (n == 0 || c == 0) throw DimensionError("feature map is empty");
    if (n < static_cast<std::size_t>(c))
        warn("feature map has " + std::to_string(n) + " spatial locations but " + std::to_string(c) +
             " channels; covariance is rank deficient");
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(map.data.data(),
                                                                                               n, c);
    const Eigen::MatrixXd x = f.cast<double>();
    FeatureStats s;
    s.mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - s.mu.transpose();
    s.sigma = n > 1 ? Eigen::MatrixXd((centered.transpose() * centered) / double(n - 1))
                    : Eigen::MatrixXd::Zero(c, c);
    s.sigma.diagonal().array() += reg;
    return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

double frechet_distance(const FeatureStats& s1, const FeatureStats& s2) {
    const auto d = s1.mu.size();
    if (s2.mu.size() != d || s1.sigma.rows() != d || s1.sigma.cols() != d || s2.sigma.rows() != d ||
        s2.sigma.cols() != d)
        throw DimensionError("frechet_distance: statistics have mismatched dimensions");
    if (s1.mu == s2.mu && s1.sigma == s2.sigma) return 0.0;
    const double mean_term = (s1.mu - s2.mu).squaredNorm();
    const Eigen::MatrixXd r1 = psd_sqrt(0.5 * (s1.sigma + s1.sigma.transpose()));
    Eigen::MatrixXd inner = r1 * s2.sigma * r1;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double total = mean_term + s1.sigma.trace() + s2.sigma.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, total);
}

double sifid(const Image& real, const Image& generated, const FeatureExtractor& extractor) {
    return frechet_distance(feature_stats(extractor.extract(real)), feature_stats(extractor.extract(generated)));
}

nlohmann::json SIFIDResult::to_json() const {
    return {{"per_pair", per_pair}, {"pair_ids", pair_ids}, {"mean", mean}, {"std", std}};
}

SIFIDResult summarize(std::vector<double> values, std::vector<std::string> ids) {
    SIFIDResult r;
    r.per_pair = std::move(values);
    r.pair_ids = std::move(ids);
    const std::size_t n = r.per_pair.size();
    if (n == 0) return r;
    r.mean = std::accumulate(r.per_pair.begin(), r.per_pair.end(), 0.0) / n;
    if (n > 1) {
        double ss = 0;
        for (double v : r.per_pair) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / (n - 1));
    }
    return r;
}

SIFIDResult sifid_corpus(const DatasetManifest& real, const DatasetManifest& synthetic, View view,
                         const FeatureExtractor& extractor) {
    const auto ra = view_subset(real, view);
    const auto sb = view_subset(synthetic, view);
    std::vector<FeatureStats> real_stats, syn_stats;
    for (const auto* r : ra) real_stats.push_back(feature_stats(extractor.extract(load_image(r->path))));
    for (const auto* r : sb) syn_stats.push_back(feature_stats(extractor.extract(load_image(r->path))));
    std::vector<double> values;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < ra.size(); ++i)
        for (std::size_t j = 0; j < sb.size(); ++j) {
            if (ra[i]->stone_class.code != sb[j]->stone_class.code) continue;
            values.push_back(frechet_distance(real_stats[i], syn_stats[j]));
            ids.push_back(ra[i]->id + "|" + sb[j]->id);
        }
    if (values.empty())
        throw ParameterError("no real/synthetic pairs share a class in view " + to_string(view));
    return summarize(std::move(values), std::move(ids));
}

void write_eval_bundle(const std::filesystem::path& dir, const DriftReport& report, const Image& heat_a,
                       const Image& heat_b, const std::optional<SIFIDResult>& sifid_result) {
    std::filesystem::create_directories(dir);
    auto write = [&](const std::string& name, const nlohmann::json& j) {
        std::ofstream out(dir / name);
        if (!out) throw IoError("cannot write " + (dir / name).string());
        out << j.dump(2) << "\n";
    };
    write("drift.json", report.to_json());
    nlohmann::json hs = report.to_json()["histograms"];
    write("histograms.json", hs);
    save_png(heat_a, dir / "heatmap_a.png");
    save_png(heat_b, dir / "heatmap_b.png");
    if (sifid_result) write("sifid.json", sifid_result->to_json());
}

} // namespace kstone::eval
