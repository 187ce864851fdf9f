#include "kstone/pipeline.hpp"

#include "kstone/error.hpp"
#include "kstone/eval.hpp"
#include "kstone/grid.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace kstone::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot read " + p.string());
    return json::parse(in);
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
}

void imwrite_checked(const fs::path& p, const cv::Mat& m) {
    if (!cv::imwrite(p.string(), m)) throw IoError("cannot write image " + p.string());
}

std::string fmt(double v, const char* f = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Two overlaid step histograms with axis labels.
cv::Mat plot_histogram(const eval::PropertyHistogram& h, const std::string& label_a, const std::string& label_b,
                       double score, bool flagged) {
    const int W = 640, H = 400, left = 60, right = 20, top = 50, bottom = 50;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    const int pw = W - left - right, ph = H - top - bottom;
    double ymax = 1e-9;
    for (double d : h.density_a) ymax = std::max(ymax, d);
    for (double d : h.density_b) ymax = std::max(ymax, d);
    const int n = static_cast<int>(h.density_a.size());
    auto px = [&](int i) { return left + i * pw / std::max(n, 1); };
    auto py = [&](double d) { return top + ph - static_cast<int>(d / ymax * ph); };
    const cv::Scalar col_a(230, 170, 140), col_b(30, 120, 230);
    for (int i = 0; i < n; ++i) {
        cv::rectangle(img, {px(i) + 1, py(h.density_a[i])}, {px(i + 1) - 1, top + ph}, col_a, cv::FILLED);
    }
    for (int i = 0; i < n; ++i) {
        cv::line(img, {px(i), py(h.density_b[i])}, {px(i + 1), py(h.density_b[i])}, col_b, 2);
        if (i + 1 < n) cv::line(img, {px(i + 1), py(h.density_b[i])}, {px(i + 1), py(h.density_b[i + 1])}, col_b, 2);
    }
    cv::rectangle(img, {left, top}, {left + pw, top + ph}, cv::Scalar(0, 0, 0), 1);
    const auto font = cv::FONT_HERSHEY_SIMPLEX;
    cv::putText(img, h.property + "  drift " + fmt(score) + (flagged ? "  FLAGGED" : ""), {left, 30}, font, 0.6,
                flagged ? cv::Scalar(0, 0, 200) : cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(img, fmt(h.lo, "%.2f"), {left - 10, H - 25}, font, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(img, fmt(h.hi, "%.2f"), {left + pw - 30, H - 25}, font, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(img, fmt(ymax, "%.2f"), {5, top + 5}, font, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::rectangle(img, {W - 230, H - 40}, {W - 215, H - 28}, col_a, cv::FILLED);
    cv::putText(img, label_a, {W - 210, H - 29}, font, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::line(img, {W - 230, H - 14}, {W - 215, H - 14}, col_b, 2);
    cv::putText(img, label_b, {W - 210, H - 10}, font, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    return img;
}

/// Both heatmaps side by side on a shared grey scale with captions.
cv::Mat heatmap_pair(const fs::path& a, const fs::path& b, const std::string& label_a, const std::string& label_b) {
    cv::Mat ma = cv::imread(a.string(), cv::IMREAD_GRAYSCALE);
    cv::Mat mb = cv::imread(b.string(), cv::IMREAD_GRAYSCALE);
    if (ma.empty() || mb.empty()) throw IoError("cannot read heatmaps in " + a.parent_path().string());
    const int h = 240;
    auto fit = [&](const cv::Mat& m) {
        cv::Mat r;
        cv::resize(m, r, {std::max(1, m.cols * h / m.rows), h}, 0, 0, cv::INTER_AREA);
        cv::Mat c;
        cv::applyColorMap(r, c, cv::COLORMAP_INFERNO);
        return c;
    };
    cv::Mat ca = fit(ma), cb = fit(mb);
    const int gap = 20, caption = 30;
    cv::Mat out(h + caption, ca.cols + cb.cols + gap, CV_8UC3, cv::Scalar(255, 255, 255));
    ca.copyTo(out(cv::Rect(0, caption, ca.cols, h)));
    cb.copyTo(out(cv::Rect(ca.cols + gap, caption, cb.cols, h)));
    cv::putText(out, label_a, {5, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.55, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(out, label_b, {ca.cols + gap + 5, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.55, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);
    return out;
}

const StageRecord* find_stage(const PipelineRun& run, const std::string& name) {
    for (const auto& s : run.stages)
        if (s.name == name && !s.outputs.empty() && s.status != "disabled") return &s;
    return nullptr;
}

void require(const fs::path& p, const std::string& stage) {
    if (!fs::exists(p)) throw StageError(stage, "recorded output missing: " + p.string());
}

} // namespace

fs::path emit_report(const PipelineRun& run) {
    const StageRecord* ev = find_stage(run, "evaluate");
    const StageRecord* gr = find_stage(run, "grid");
    if (!ev && !gr) throw ConfigError("no stage outputs to report in " + run.run_dir.string());
    const fs::path out = run.run_dir / "report";
    fs::create_directories(out);
    std::ostringstream index;
    if (ev) {
        std::ostringstream drift, sifid;
        drift << "view  property        drift    flag\n";
        for (const auto& vn : run.config["views"]) {
            const std::string view = vn.get<std::string>();
            const fs::path dir = run.run_dir / "evaluate" / view;
            require(dir / "drift.json", "evaluate");
            const auto rep = eval::DriftReport::from_json(read_json(dir / "drift.json"));
            for (const auto& h : rep.histograms) {
                const cv::Mat plot = plot_histogram(h, rep.dataset_a, rep.dataset_b, rep.per_property.at(h.property),
                                                    rep.flags.at(h.property));
                const std::string name = "hist_" + view + "_" + h.property + ".png";
                imwrite_checked(out / name, plot);
                index << name << "\n";
            }
            for (const char* p : eval::kPropertyNames) {
                char line[128];
                std::snprintf(line, sizeof line, "%-5s %-15s %.4f   %s\n", view.c_str(), p, rep.per_property.at(p),
                              rep.flags.at(p) ? "FLAG" : "-");
                drift << line;
            }
            require(dir / "heatmap_a.png", "evaluate");
            require(dir / "heatmap_b.png", "evaluate");
            const std::string hm = "heatmap_" + view + ".png";
            imwrite_checked(out / hm, heatmap_pair(dir / "heatmap_a.png", dir / "heatmap_b.png", rep.dataset_a,
                                                   rep.dataset_b));
            index << hm << "\n";
            if (fs::exists(dir / "sifid.json")) {
                const json s = read_json(dir / "sifid.json");
                sifid << view << ": mean " << fmt(s["mean"]) << " std " << fmt(s["std"]) << " over "
                      << s["per_pair"].size() << " pair(s)\n";
                for (std::size_t i = 0; i < s["per_pair"].size(); ++i)
                    sifid << "  " << s["pair_ids"][i].get<std::string>() << " " << fmt(s["per_pair"][i]) << "\n";
            }
        }
        write_text(out / "drift.txt", drift.str());
        index << "drift.txt\n";
        if (!sifid.str().empty()) {
            write_text(out / "sifid.txt", sifid.str());
            index << "sifid.txt\n";
        }
    }
    if (gr) {
        const fs::path rj = run.run_dir / "grid" / "results.json";
        require(rj, "grid");
        const auto g = grid::GridResult::from_json(read_json(rj));
        write_text(out / "results.txt", g.format_table());
        index << "results.txt\n";
    }
    write_text(out / "index.txt", index.str());
    return out;
}

} // namespace kstone::pipeline
