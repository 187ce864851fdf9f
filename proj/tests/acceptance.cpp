// Acceptance suite: one PASS/FAIL line per criterion.

#include "oracles.hpp"
#include "test_util.hpp"
#include "toy_pipeline.hpp"

#include "kstone/classify.hpp"
#include "kstone/diffusion.hpp"
#include "kstone/eval.hpp"
#include "kstone/grid.hpp"
#include "kstone/patchify.hpp"
#include "kstone/pipeline.hpp"
#include "kstone/toy.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace kstone;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("missing " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

eval::FeatureStats random_stats(Rng& rng, int d) {
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    eval::FeatureStats s;
    s.mu = Eigen::VectorXd(d);
    for (int i = 0; i < d; ++i) s.mu(i) = rng.normal() * 2;
    s.sigma = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
    return s;
}

// 1 ------------------------------------------------------------------------------
void metric_oracles(Outcome& o) {
    Rng rng(1001);
    double fd_worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int d = 1 + static_cast<int>(rng.below(5));
        const auto a = random_stats(rng, d), b = random_stats(rng, d);
        fd_worst = std::max(fd_worst, std::abs(eval::frechet_distance(a, b) -
                                               oracle::frechet_closed_form(a.mu, a.sigma, b.mu, b.sigma)));
    }
    double emd_worst = 0;
    bool self_zero = true;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(50)), m = 1 + static_cast<int>(rng.below(50));
        std::vector<double> a(n), b(m);
        const double shift = rng.uniform(-1, 1);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal() * rng.uniform(0.5, 2) + shift;
        emd_worst = std::max(emd_worst, std::abs(eval::drift_score(a, b) - oracle::emd_transport(a, b)));
        self_zero = self_zero && eval::drift_score(a, a) == 0.0;
    }
    const auto ex = eval::cnn_extractor(3);
    bool sifid_zero = true;
    for (int k = 0; k < 3; ++k) {
        const Image x = testing::smooth_image(40, 36, 50 + k);
        sifid_zero = sifid_zero && eval::sifid(x, x, ex) == 0.0;
    }
    o.require(fd_worst < 1e-8, "frechet vs closed form");
    o.require(emd_worst < 1e-9, "drift vs transport oracle");
    o.require(self_zero, "drift(a,a) = 0");
    o.require(sifid_zero, "sifid(x,x) = 0");
    o.detail << "frechet max err " << fd_worst << " over 200 pairs (tol 1e-8); drift max err " << emd_worst
             << " over 200 pairs (tol 1e-9); drift(a,a)=0 " << (self_zero ? "yes" : "no") << "; sifid(x,x)=0 "
             << (sifid_zero ? "yes" : "no");
}

// 2 ------------------------------------------------------------------------------
void diffusion_mechanism(Outcome& o) {
    Rng rng(2002);
    int schedule_ok = 0;
    double mc_worst = 0;
    for (int k = 0; k < 50; ++k) {
        const int T = 2 + static_cast<int>(rng.below(999));
        const double bmin = std::exp(rng.uniform(std::log(1e-5), std::log(1e-2)));
        const double bmax = bmin + rng.uniform(0, 0.05);
        const auto s = diffusion::make_schedule(T, bmin, bmax);
        bool ok = s.steps() == T;
        double prod = 1.0;
        for (int t = 0; t < T && ok; ++t) {
            const double beta = bmin + (bmax - bmin) * t / (T - 1.0);
            prod *= 1.0 - beta;
            ok = std::abs(s.beta[t] - beta) < 1e-15 && std::abs(s.alpha[t] - (1.0 - beta)) < 1e-15 &&
                 std::abs(s.alpha_bar[t] - prod) < 1e-12 && s.alpha_bar[t] > 0 && s.alpha_bar[t] < 1 &&
                 (t == 0 || s.alpha_bar[t] < s.alpha_bar[t - 1]);
        }
        schedule_ok += ok;
        if (k < 5) {
            // forward marginal of x0 = 0 is N(0, 1 - alpha_bar[t])
            const int t = static_cast<int>(rng.below(T));
            const nn::Tensor zero({1, 3, 183, 183});
            const auto d = diffusion::forward_diffuse(zero, t, s, rng);
            double sum = 0, sq = 0;
            for (float v : d.x_t.data) {
                sum += v;
                sq += static_cast<double>(v) * v;
            }
            const double n = static_cast<double>(d.x_t.numel());
            const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
            const double expect = std::sqrt(1.0 - s.alpha_bar[t]);
            mc_worst = std::max(mc_worst, std::abs(sd - expect) / expect);
        }
    }
    const auto s = diffusion::make_schedule(100, 1e-4, 0.02);
    const nn::Tensor x0 = diffusion::to_tensor(testing::smooth_image(32, 32, 6));
    const auto d = diffusion::forward_diffuse(x0, 99, s, rng);
    const nn::Tensor eps = d.eps;
    diffusion::EpsPredictor oracle = [&](const nn::Tensor&, const nn::Tensor&, const std::vector<int>&, int) {
        return eps;
    };
    const nn::Tensor rec = diffusion::reverse_diffuse(d.x_t, 99, nn::Tensor(x0.shape), 0, s, oracle, 0.0, rng);
    double rec_err = 0;
    for (std::size_t i = 0; i < rec.numel(); ++i)
        rec_err = std::max(rec_err, std::abs(static_cast<double>(rec.data[i]) - x0.data[i]));
    o.require(schedule_ok == 50, "schedule invariants");
    o.require(mc_worst < 0.01, "forward marginal std");
    o.require(rec_err < 1e-3, "oracle reconstruction");
    o.detail << "schedule invariants " << schedule_ok << "/50 configs; Monte Carlo std rel err " << mc_worst
             << " at 100467 draws (tol 0.01); oracle reverse max err " << rec_err << " on 32x32 (tol 1e-3)";
}

// 3 ------------------------------------------------------------------------------
void desk_generation(Outcome& o) {
    Rng rng(7);
    const Image image = toy::texture(2, View::SUR, {64, 64}, rng, 0.06);
    diffusion::DenoiserConfig dc;
    dc.channels = 32;
    dc.depth = 4;
    dc.embed_dim = 16;
    // beta_max 0.05 brings alpha_bar[T-1] to 0.08 so sampling starts near the trained marginal
    const auto schedule = diffusion::make_schedule(100, 1e-4, 0.05);
    diffusion::TrainOptions opts;
    opts.epochs = 30;
    opts.steps_per_epoch = 40;
    opts.batch = 4;
    opts.learning_rate = 2e-3;
    opts.train_size = Size{64, 64};
    opts.min_size = 24;
    opts.probe_samples = 16;
    opts.seed = 1;
    auto model = diffusion::train_model({image}, dc, schedule, opts);
    const double initial = model.probe_losses.front(), best = model.best_probe_losses.back();
    auto channel = [](const Image& im, int c) {
        std::vector<double> v;
        v.reserve(im.pixel_count());
        for (std::size_t i = 0; i < im.pixel_count(); ++i) v.push_back(im.data[i * 3 + c]);
        return v;
    };
    int close = 0;
    double worst_seen = 0;
    for (int k = 0; k < 10; ++k) {
        Rng r(100 + k);
        const Image s = diffusion::sample(model, {64, 64}, r, 1.0);
        double worst = 0;
        for (int c = 0; c < 3; ++c) worst = std::max(worst, eval::drift_score(channel(image, c), channel(s, c)));
        worst_seen = std::max(worst_seen, worst);
        close += worst < 0.2;
    }
    o.require(best <= 0.5 * initial, "loss reduction");
    o.require(close >= 8, "sample drift");
    o.detail << "probe loss " << initial << " -> " << best << " (ratio " << best / initial << ", need <= 0.5); "
             << close << "/10 samples with per-channel drift < 0.2 (need >= 8, worst " << worst_seen << ")";
}

// 4 ------------------------------------------------------------------------------
void patch_protocol(Outcome& o, const fs::path& work) {
    toy::ToyOptions to;
    to.per_cell = 4;
    to.ccd_size = {96, 80};
    const auto corpus = toy::make_toy_corpus(work / "toy48", to);
    const auto m = load_manifest(corpus.ccd_manifest);
    o.require(m.records.size() == 48, "48 images");
    patch::PatchOptions po;
    po.size = 24;
    po.stone_fraction = 0.9;
    bool counts = true, leak_free = true;
    const int per_cell = 18; // 4 parents: 5, 5, 4, 4
    const auto full = patch::build_patch_dataset(m, per_cell, 1, po);
    std::map<std::string, int> per_parent;
    for (const auto& p : full.patches) ++per_parent[p.parent_id];
    for (const auto& [cell, n] : full.cell_counts()) counts = counts && n == per_cell;
    int fives = 0, fours = 0;
    for (const auto& [id, n] : per_parent) {
        fives += n == 5;
        fours += n == 4;
    }
    counts = counts && full.cell_counts().size() == 12 && fives == 24 && fours == 24;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const int n = 20;
        const double ratio = 0.75;
        auto s = patch::build_split_patch_dataset(m, n, ratio, seed, po);
        const int n_test = static_cast<int>(std::lround(n * (1 - ratio)));
        for (const auto& [cell, c] : s.train.cell_counts()) counts = counts && c == n - n_test;
        for (const auto& [cell, c] : s.test.cell_counts()) counts = counts && c == n_test;
        counts = counts && s.train.cell_counts().size() == 12 && s.test.cell_counts().size() == 12;
        for (const auto& a : s.train.patches)
            for (const auto& b : s.test.patches) leak_free = leak_free && a.parent_key() != b.parent_key();
        const auto [tr, te] = patch::split(full, 0.5, seed);
        for (const auto& a : tr.patches)
            for (const auto& b : te.patches) leak_free = leak_free && a.parent_id != b.parent_id;
        counts = counts && tr.patches.size() + te.patches.size() == full.patches.size();
    }
    o.require(counts, "exact counts");
    o.require(leak_free, "zero shared parents");
    o.detail << "48-image manifest; 18 per cell as 5+5+4+4 per parent; exclusive 20-per-cell split honours 15/5 "
             << (counts ? "exactly" : "NOT exactly") << "; leakage audit over 20 seeds "
             << (leak_free ? "found no shared parent" : "found shared parents");
}

// 5 ------------------------------------------------------------------------------
patch::PatchSet only_view(const patch::PatchSet& p, View v) {
    patch::PatchSet out{p.name, p.patch_size, {}};
    for (const auto& x : p.patches)
        if (x.view == v) out.patches.push_back(x);
    for (auto& x : out.patches) x.pixels = patch::patch_pixels(x);
    return out;
}

void two_step_trend(Outcome& o, const fs::path& work) {
    toy::ToyOptions to;
    to.per_cell = 4;
    to.noise = 0.3;
    to.seed = 1;
    const auto corpus = toy::make_toy_corpus(work / "bench", to);
    patch::PatchOptions po;
    po.size = 32;
    // plentiful intermediate domain, scarce target: 10 train and 30 test patches per class
    const auto ccd = patch::build_split_patch_dataset(load_manifest(corpus.ccd_manifest), 100, 0.75, 3, po);
    const auto endo = patch::build_split_patch_dataset(load_manifest(corpus.endo_manifest), 40, 0.25, 3, po);
    const auto inter = only_view(ccd.train, View::SUR);
    const auto target = only_view(endo.train, View::SUR), test = only_view(endo.test, View::SUR);
    cls::BackboneSpec b;
    b.architecture = "small_cnn";
    b.init = cls::Init::SCRATCH;
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto c1 = cls::TrainConfig::defaults(cls::Stage::STEP1);
        c1.epochs = 20;
        c1.seed = seed;
        c1.validation_fraction = 0;
        auto c2 = cls::TrainConfig::defaults(cls::Stage::STEP2);
        c2.epochs = 15;
        c2.seed = seed;
        c2.validation_fraction = 0;
        auto cb = c2;
        cb.stage = cls::Stage::STEP1;
        const auto baseline = cls::train_step1(b, cls::HeadSpec{}, target, cb);
        const double acc_base = cls::evaluate(*baseline, test).accuracy;
        const auto model1 = cls::train_step1(b, cls::HeadSpec{}, inter, c1);
        const auto model2 = cls::train_step2(*model1, target, c2);
        const double acc_two = cls::evaluate(*model2, test).accuracy;
        wins += acc_two >= acc_base;
        o.detail << "seed " << seed << ": " << acc_base << " vs " << acc_two << "; ";
    }
    o.require(wins >= 4, "two-step >= baseline in 4 of 5 seeds");
    o.detail << "two-step >= baseline in " << wins << "/5 seeds (need >= 4)";
}

// 6 + 7 --------------------------------------------------------------------------
struct PipelineRuns {
    fs::path run1, run2;
};

PipelineRuns run_toy_pipeline_twice(const fs::path& work) {
    auto cfg = testing::toy_pipeline_config(work / "pipe_data", work / "run1", true, {"SUR", "SEC"});
    pipeline::run_pipeline(cfg, work);
    cfg["output_dir"] = (work / "run2").string();
    pipeline::run_pipeline(cfg, work);
    return {work / "run1", work / "run2"};
}

void pipeline_determinism(Outcome& o, const PipelineRuns& r) {
    std::vector<std::string> files;
    for (const auto& sub : {"pad", "generate", "upscale", "patchify", "evaluate"})
        for (const auto& e : fs::recursive_directory_iterator(r.run1 / sub))
            if (e.is_regular_file()) {
                const auto name = e.path().filename().string();
                if (name == "manifest.txt" || name == "index.csv" || name == "drift.json" ||
                    name == "histograms.json" || name == "sifid.json" || name == "split.json")
                    files.push_back(e.path().lexically_relative(r.run1).string());
            }
    int identical = 0;
    for (const auto& f : files) {
        const bool same = slurp(r.run1 / f) == slurp(r.run2 / f);
        identical += same;
        if (!same) o.detail << "differs: " << f << "; ";
    }
    o.require(!files.empty() && identical == static_cast<int>(files.size()), "byte-identical artefacts");

    // checkpoints: compared through their evaluation metrics
    double worst = 0;
    for (const auto& e : fs::directory_iterator(r.run1 / "train_gen"))
        if (e.path().extension() == ".ckpt") {
            const auto a = diffusion::load_checkpoint(e.path());
            const auto b = diffusion::load_checkpoint(r.run2 / "train_gen" / e.path().filename());
            const double pa = a.probe_losses.back(), pb = b.probe_losses.back();
            worst = std::max(worst, std::abs(pa - pb) / std::max(std::abs(pa), 1e-12));
        }
    const auto ga = grid::GridResult::from_json(nlohmann::json::parse(slurp(r.run1 / "grid/results.json")));
    const auto gb = grid::GridResult::from_json(nlohmann::json::parse(slurp(r.run2 / "grid/results.json")));
    for (std::size_t i = 0; i < ga.rows.size() && i < gb.rows.size(); ++i) {
        const double a = ga.rows[i].accuracy_i.accuracy_mean, b = gb.rows[i].accuracy_i.accuracy_mean;
        worst = std::max(worst, std::abs(a - b) / std::max(std::abs(a), 1.0));
        if (ga.rows[i].accuracy_ii && gb.rows[i].accuracy_ii) {
            const double a2 = ga.rows[i].accuracy_ii->accuracy_mean, b2 = gb.rows[i].accuracy_ii->accuracy_mean;
            worst = std::max(worst, std::abs(a2 - b2) / std::max(std::abs(a2), 1.0));
        }
    }
    o.require(ga.rows.size() == gb.rows.size(), "same grid rows");
    o.require(worst <= 0.005, "checkpoint metrics within 0.5%");
    o.detail << identical << "/" << files.size() << " reports, indices and manifests byte-identical; "
             << "checkpoint metric max rel diff " << worst << " (tol 0.005)";
}

void format_conformance(Outcome& o, const PipelineRuns& r) {
    const auto g = grid::GridResult::from_json(nlohmann::json::parse(slurp(r.run1 / "grid/results.json")));
    const auto expected = grid::table_rows({View::SUR, View::SEC});
    bool layout = g.rows.size() == 16;
    for (std::size_t i = 0; layout && i < 16; ++i)
        layout = g.rows[i].row.view == expected[i].view && g.rows[i].row.dataset_i == expected[i].dataset_i &&
                 g.rows[i].row.dataset_ii == expected[i].dataset_ii &&
                 g.rows[i].row.configuration == expected[i].configuration;
    const std::string table = g.format_table();
    std::istringstream lines(table);
    std::string header;
    std::getline(lines, header);
    bool columns = true;
    std::size_t pos = 0;
    for (const char* col : {"View", "Initialization", "Dataset I", "Dataset II", "Model", "Accuracy I",
                            "Accuracy II", "Configuration"}) {
        const auto at = header.find(col, pos);
        columns = columns && at != std::string::npos;
        pos = at == std::string::npos ? pos : at + 1;
    }
    int body = 0;
    std::string line;
    std::getline(lines, line); // rule
    while (std::getline(lines, line) && !line.empty()) ++body;

    bool drift = true;
    for (const char* view : {"SUR", "SEC"}) {
        const auto j = nlohmann::json::parse(slurp(r.run1 / "evaluate" / view / "drift.json"));
        std::set<std::string> names;
        for (const auto& [k, v] : j["per_property"].items()) names.insert(k);
        drift = drift && names == std::set<std::string>(eval::kPropertyNames.begin(), eval::kPropertyNames.end());
        drift = drift && j["threshold"].get<double>() == 0.2 && j["flags"].size() == 5;
        for (const auto& n : names)
            drift = drift && j["flags"][n].get<bool>() == (j["per_property"][n].get<double>() > 0.2);
    }
    o.require(layout, "16-row order");
    o.require(columns, "column set");
    o.require(body == 16, "16 table lines");
    o.require(drift, "drift report properties and flags");
    o.detail << g.rows.size() << " rows in table order, " << body << " table lines, 8 columns "
             << (columns ? "present" : "missing") << "; drift report has the 5 properties per view with flags at 0.2 "
             << (drift ? "consistent" : "inconsistent");
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    testing::TempDir work("acceptance");
    std::optional<PipelineRuns> runs;
    auto pipeline_runs = [&]() -> const PipelineRuns& {
        if (!runs) runs = run_toy_pipeline_twice(work.path() / "pipe");
        return *runs;
    };
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
        {"metric oracles", metric_oracles},
        {"diffusion mechanism", diffusion_mechanism},
        {"desk-scale generation", desk_generation},
        {"patch protocol", [&](Outcome& o) { patch_protocol(o, work.path()); }},
        {"two-step trend", [&](Outcome& o) { two_step_trend(o, work.path()); }},
        {"pipeline determinism", [&](Outcome& o) { pipeline_determinism(o, pipeline_runs()); }},
        {"format conformance", [&](Outcome& o) { format_conformance(o, pipeline_runs()); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(n)) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            criteria[i].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "exception: " << e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << ", "
                  << std::fixed << std::setprecision(1) << secs << "s): " << std::defaultfloat
                  << std::setprecision(6) << o.detail.str() << std::endl;
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
