#include "kstone/classify.hpp"
#include "kstone/dataset.hpp"
#include "kstone/diffusion.hpp"
#include "kstone/error.hpp"
#include "kstone/eval.hpp"
#include "kstone/grid.hpp"
#include "kstone/patchify.hpp"
#include "kstone/pipeline.hpp"
#include "kstone/toy.hpp"
#include "kstone/upscale.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace kstone;
namespace fs = std::filesystem;

namespace {

void say(const std::string& m) { std::cout << m << std::endl; }

patch::PatchSet load_set(const fs::path& dir, const char* half) {
    if (fs::exists(dir / "index.csv")) return patch::load_patchset(dir);
    if (fs::exists(dir / half / "index.csv")) return patch::load_patchset(dir / half);
    throw ConfigError("no patch set at " + dir.string());
}

std::vector<Image> cell_images(const DatasetManifest& m, const std::string& code, View view, StoneClass& cls) {
    std::vector<Image> out;
    for (const auto& r : m.records)
        if (r.stone_class.code == code && r.view == view) {
            out.push_back(load_image(r.path));
            cls = r.stone_class;
        }
    if (out.empty()) throw ParameterError("no images of (" + code + ", " + to_string(view) + ") in " + m.name);
    return out;
}

void print_epoch(const cls::EpochLog& e) {
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " acc " << e.train_accuracy;
    if (e.val_accuracy) std::cout << " val_loss " << *e.val_loss << " val_acc " << *e.val_accuracy;
    std::cout << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kidney stone dataset tooling: padding, diffusion generation, upscaling, plausibility "
                 "evaluation, patch extraction and two-step transfer-learning classification"};
    app.require_subcommand(1);

    // pad
    std::string pad_manifest, pad_out, pad_canvas = format_size(kDefaultCanvas), pad_fill = "#000000";
    auto* pad = app.add_subcommand("pad", "Center every image of a manifest on a fixed canvas");
    pad->add_option("--manifest", pad_manifest, "Input manifest")->required();
    pad->add_option("--canvas", pad_canvas, "Canvas WxH")->capture_default_str();
    pad->add_option("--fill", pad_fill, "Fill colour #RRGGBB")->capture_default_str();
    pad->add_option("--out", pad_out, "Output directory")->required();

    // train-gen
    std::string tg_manifest, tg_class, tg_view = "SUR", tg_out, tg_resume;
    diffusion::TrainOptions tg;
    diffusion::DenoiserConfig tg_net;
    int tg_steps = 100;
    double tg_beta_min = 1e-4, tg_beta_max = 0.02;
    std::string tg_size = "264x200";
    auto* train_gen = app.add_subcommand("train-gen", "Train a single-image diffusion model for one (class, view)");
    train_gen->add_option("--manifest", tg_manifest, "Training manifest")->required();
    train_gen->add_option("--class", tg_class, "Class code")->required();
    train_gen->add_option("--view", tg_view, "SUR or SEC")->capture_default_str();
    train_gen->add_option("--out", tg_out, "Checkpoint path")->required();
    train_gen->add_option("--resume", tg_resume, "Continue from this checkpoint");
    train_gen->add_option("--epochs", tg.epochs)->capture_default_str();
    train_gen->add_option("--steps-per-epoch", tg.steps_per_epoch)->capture_default_str();
    train_gen->add_option("--batch", tg.batch)->capture_default_str();
    train_gen->add_option("--lr", tg.learning_rate)->capture_default_str();
    train_gen->add_option("--timesteps", tg_steps)->capture_default_str();
    train_gen->add_option("--beta-min", tg_beta_min)->capture_default_str();
    train_gen->add_option("--beta-max", tg_beta_max)->capture_default_str();
    train_gen->add_option("--channels", tg_net.channels)->capture_default_str();
    train_gen->add_option("--depth", tg_net.depth)->capture_default_str();
    train_gen->add_option("--scale-factor", tg.scale_factor)->capture_default_str();
    train_gen->add_option("--min-size", tg.min_size)->capture_default_str();
    train_gen->add_option("--train-size", tg_size, "Finest training size WxH")->capture_default_str();
    train_gen->add_option("--seed", tg.seed)->capture_default_str();

    // generate
    std::vector<std::string> gen_models;
    std::string gen_out, gen_size;
    int gen_n = 25;
    std::uint64_t gen_seed = 0;
    auto* generate = app.add_subcommand("generate", "Sample synthetic images from trained models");
    generate->add_option("--model", gen_models, "Checkpoint(s)")->required();
    generate->add_option("--n", gen_n, "Images per model")->capture_default_str();
    generate->add_option("--size", gen_size, "Output size WxH (default: training size)");
    generate->add_option("--seed", gen_seed)->capture_default_str();
    generate->add_option("--out", gen_out, "Output directory")->required();

    // upscale
    std::string up_in, up_out, up_mode = "bicubic", up_weights;
    double up_fuse = 0.5;
    auto* upscale_cmd = app.add_subcommand("upscale", "Upscale a directory of images by 4");
    upscale_cmd->add_option("--in", up_in, "Input directory")->required();
    upscale_cmd->add_option("--out", up_out, "Output directory")->required();
    upscale_cmd->add_option("--mode", up_mode, "bicubic or learned")->capture_default_str();
    upscale_cmd->add_option("--weights", up_weights, "Learned upscaler weights");
    upscale_cmd->add_option("--fuse", up_fuse, "Weight of the learned branch in [0,1]")->capture_default_str();

    // train-sr
    std::string sr_manifest, sr_out;
    upscale::SrTrainOptions sr;
    int sr_channels = 32, sr_depth = 4;
    auto* train_sr = app.add_subcommand("train-sr", "Train the learned upscaler on the images of a manifest");
    train_sr->add_option("--manifest", sr_manifest)->required();
    train_sr->add_option("--out", sr_out, "Weights path")->required();
    train_sr->add_option("--epochs", sr.epochs)->capture_default_str();
    train_sr->add_option("--steps-per-epoch", sr.steps_per_epoch)->capture_default_str();
    train_sr->add_option("--crop", sr.crop)->capture_default_str();
    train_sr->add_option("--channels", sr_channels)->capture_default_str();
    train_sr->add_option("--depth", sr_depth)->capture_default_str();
    train_sr->add_option("--seed", sr.seed)->capture_default_str();

    // evaluate
    std::string ev_real, ev_syn, ev_out, ev_extractor;
    std::vector<std::string> ev_views{"SUR", "SEC"};
    double ev_threshold = eval::kDriftThreshold;
    bool ev_no_sifid = false;
    auto* evaluate = app.add_subcommand("evaluate", "Compare a synthetic dataset against a real one");
    evaluate->add_option("--real", ev_real, "Real manifest")->required();
    evaluate->add_option("--synthetic", ev_syn, "Synthetic manifest")->required();
    evaluate->add_option("--view", ev_views, "Views")->capture_default_str();
    evaluate->add_option("--threshold", ev_threshold)->capture_default_str();
    evaluate->add_option("--extractor", ev_extractor, "Feature extractor descriptor JSON");
    evaluate->add_flag("--no-sifid", ev_no_sifid, "Skip SIFID");
    evaluate->add_option("--out", ev_out, "Output directory")->required();

    // patchify
    std::string pt_manifest, pt_out;
    patch::PatchOptions pt;
    int pt_per_cell = 1000;
    double pt_ratio = 0.8;
    std::uint64_t pt_seed = 0;
    auto* patchify = app.add_subcommand("patchify", "Extract an image-exclusive train/test patch split");
    patchify->add_option("--manifest", pt_manifest)->required();
    patchify->add_option("--size", pt.size)->capture_default_str();
    patchify->add_option("--per-cell", pt_per_cell)->capture_default_str();
    patchify->add_option("--ratio", pt_ratio, "Train fraction")->capture_default_str();
    patchify->add_option("--stone-fraction", pt.stone_fraction)->capture_default_str();
    patchify->add_option("--seed", pt_seed)->capture_default_str();
    std::string pt_view;
    patchify->add_option("--view", pt_view, "Keep only this view");
    patchify->add_option("--out", pt_out)->required();

    // train-cls
    int tc_step = 1;
    std::string tc_train, tc_init = "generic", tc_weights, tc_out, tc_arch = "resnet50", tc_test;
    cls::TrainConfig tc;
    std::optional<int> tc_epochs;
    std::optional<double> tc_lr;
    auto* train_cls = app.add_subcommand("train-cls", "Train a classifier (step 1 or step 2)");
    train_cls->add_option("--step", tc_step)->check(CLI::IsMember({1, 2}))->capture_default_str();
    train_cls->add_option("--train", tc_train, "Patch set directory")->required();
    train_cls->add_option("--init", tc_init, "generic, scratch or ckpt:PATH (step 2: ckpt:PATH of model I)")
        ->capture_default_str();
    train_cls->add_option("--weights", tc_weights, "Backbone file for generic init");
    train_cls->add_option("--arch", tc_arch, "resnet50 or small_cnn")->capture_default_str();
    train_cls->add_option("--epochs", tc_epochs);
    train_cls->add_option("--lr", tc_lr);
    train_cls->add_option("--seed", tc.seed)->capture_default_str();
    train_cls->add_option("--test", tc_test, "Patch set to evaluate after training");
    train_cls->add_option("--out", tc_out, "Checkpoint path")->required();

    // eval-cls
    std::string ec_model, ec_test;
    auto* eval_cls = app.add_subcommand("eval-cls", "Top-1 accuracy of a classifier checkpoint");
    eval_cls->add_option("--model", ec_model)->required();
    eval_cls->add_option("--test", ec_test, "Patch set directory")->required();

    // grid
    std::string gr_spec, gr_out;
    std::optional<int> gr_seeds;
    auto* grid_cmd = app.add_subcommand("grid", "Run the baseline / two-step experiment grid");
    grid_cmd->add_option("--spec", gr_spec, "Grid spec JSON")->required();
    grid_cmd->add_option("--seeds", gr_seeds);
    grid_cmd->add_option("--out", gr_out)->required();

    // run / report
    std::string run_config, report_run;
    auto* run = app.add_subcommand("run", "Run a pipeline config");
    run->add_option("--config", run_config)->required();
    auto* report = app.add_subcommand("report", "Render the report of a pipeline run");
    report->add_option("--run", report_run, "Run directory")->required();

    // make-toy
    std::string toy_out;
    toy::ToyOptions toy_opts;
    auto* make_toy = app.add_subcommand("make-toy", "Write a procedural toy corpus (ccd/ and endo/ manifests)");
    make_toy->add_option("--out", toy_out)->required();
    make_toy->add_option("--per-cell", toy_opts.per_cell)->capture_default_str();
    make_toy->add_option("--noise", toy_opts.noise)->capture_default_str();
    make_toy->add_option("--seed", toy_opts.seed)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pad) {
            const auto m = pad_dataset(load_manifest(pad_manifest), parse_size(pad_canvas), parse_hex_color(pad_fill),
                                       pad_out);
            say("padded " + std::to_string(m.records.size()) + " image(s) to " + pad_canvas);
        } else if (*train_gen) {
            const auto m = load_manifest(tg_manifest);
            StoneClass cls;
            const View view = parse_view(tg_view);
            const auto images = cell_images(m, tg_class, view, cls);
            tg.train_size = parse_size(tg_size);
            tg.checkpoint = tg_out;
            tg.on_loss = [](const diffusion::LossRecord& r) {
                std::cout << "epoch " << r.epoch << " scale " << r.scale << " loss " << r.loss << std::endl;
            };
            std::optional<diffusion::DiffusionModelState> resume;
            if (!tg_resume.empty()) resume = diffusion::load_checkpoint(tg_resume);
            auto model = diffusion::train_model(images, tg_net, diffusion::make_schedule(tg_steps, tg_beta_min, tg_beta_max),
                                                tg, std::move(resume));
            model.stone_class = cls;
            model.view = view;
            diffusion::save_checkpoint(model, tg_out);
            diffusion::write_loss_log(model.losses, fs::path(tg_out).replace_extension(".losses.jsonl"));
            say("saved " + tg_out);
        } else if (*generate) {
            std::vector<diffusion::DiffusionModelState> models;
            for (const auto& p : gen_models) models.push_back(diffusion::load_checkpoint(p));
            std::optional<Size> size;
            if (!gen_size.empty()) size = parse_size(gen_size);
            const auto m = diffusion::generate_dataset(models, gen_n, gen_seed, gen_out, size);
            say("generated " + std::to_string(m.records.size()) + " image(s) in " + gen_out);
        } else if (*upscale_cmd) {
            upscale::Upscaler u;
            if (up_mode == "learned") {
                u.kind = upscale::UpscalerKind::LEARNED;
                if (up_weights.empty()) throw ConfigError("--mode learned needs --weights");
                u.weights = upscale::load_weights(up_weights);
            } else if (up_mode != "bicubic") {
                throw ConfigError("unknown upscale mode '" + up_mode + "'");
            }
            upscale::upscale_directory(up_in, up_out, u, up_fuse);
            say("upscaled into " + up_out);
        } else if (*train_sr) {
            std::vector<Image> images;
            for (const auto& r : load_manifest(sr_manifest).records) images.push_back(load_image(r.path));
            upscale::ResidualSR net(sr_channels, sr_depth, sr.seed);
            const auto losses = upscale::train_residual_sr(net, images, 4, sr);
            for (std::size_t e = 0; e < losses.size(); ++e) std::cout << "epoch " << e + 1 << " loss " << losses[e] << "\n";
            upscale::save_weights(net, sr_out);
            say("saved " + sr_out);
        } else if (*evaluate) {
            const auto a = load_manifest(ev_real), b = load_manifest(ev_syn);
            const auto ex = ev_extractor.empty() ? eval::cnn_extractor(0) : eval::load_extractor(ev_extractor);
            for (const auto& vn : ev_views) {
                const View v = parse_view(vn);
                const auto rep = eval::evaluate_suite(a, b, v, ev_threshold);
                std::optional<eval::SIFIDResult> sf;
                if (!ev_no_sifid) sf = eval::sifid_corpus(a, b, v, ex);
                eval::write_eval_bundle(fs::path(ev_out) / vn, rep, eval::heatmap(a, v), eval::heatmap(b, v), sf);
                for (const char* p : eval::kPropertyNames)
                    std::cout << vn << " " << p << " " << rep.per_property.at(p) << (rep.flags.at(p) ? " FLAG" : "")
                              << "\n";
                if (sf) std::cout << vn << " sifid " << sf->mean << " ± " << sf->std << "\n";
            }
        } else if (*patchify) {
            auto m = load_manifest(pt_manifest);
            if (!pt_view.empty()) {
                const View v = parse_view(pt_view);
                std::erase_if(m.records, [&](const ImageRecord& r) { return r.view != v; });
            }
            auto s = patch::build_split_patch_dataset(m, pt_per_cell, pt_ratio, pt_seed, pt);
            patch::require_no_leakage(s.train, s.test);
            patch::save_split(s, pt_out);
            say("train " + std::to_string(s.train.patches.size()) + " / test " + std::to_string(s.test.patches.size()) +
                " patches in " + pt_out);
        } else if (*train_cls) {
            const auto train = load_set(tc_train, "train");
            const std::uint64_t seed = tc.seed;
            tc = cls::TrainConfig::defaults(tc_step == 1 ? cls::Stage::STEP1 : cls::Stage::STEP2);
            tc.seed = seed;
            if (tc_epochs) tc.epochs = *tc_epochs;
            if (tc_lr) tc.learning_rate = *tc_lr;
            std::shared_ptr<cls::Classifier> model;
            const bool from_ckpt = tc_init.rfind("ckpt:", 0) == 0;
            if (tc_step == 1) {
                cls::BackboneSpec b;
                b.architecture = tc_arch;
                if (from_ckpt) {
                    b.init = cls::Init::FROM_CHECKPOINT;
                    b.weights = tc_init.substr(5);
                } else {
                    b.init = cls::parse_init(tc_init);
                    if (!tc_weights.empty()) b.weights = tc_weights;
                }
                model = cls::train_step1(b, cls::HeadSpec{}, train, tc, print_epoch);
            } else {
                if (!from_ckpt) throw ConfigError("step 2 needs --init ckpt:PATH of a step-1 model");
                const auto model1 = cls::load_classifier(tc_init.substr(5));
                model = cls::train_step2(*model1, train, tc, print_epoch);
            }
            cls::save_classifier(*model, tc_out);
            say("saved " + tc_out);
            if (!tc_test.empty()) {
                const auto r = cls::evaluate(*model, load_set(tc_test, "test"));
                say("test accuracy " + std::to_string(r.accuracy) + "% on " + std::to_string(r.count) + " patches");
            }
        } else if (*eval_cls) {
            const auto model = cls::load_classifier(ec_model);
            const auto r = cls::evaluate(*model, load_set(ec_test, "test"));
            say("accuracy " + std::to_string(r.accuracy) + "% on " + std::to_string(r.count) + " patches");
            for (const auto& [c, a] : r.per_class_accuracy) say("  " + c + " " + std::to_string(a));
        } else if (*grid_cmd) {
            auto spec = grid::load_grid_spec(gr_spec);
            if (gr_seeds) spec.seeds = *gr_seeds;
            const auto result = grid::run_experiment_grid(spec, say);
            grid::write_grid_result(result, gr_out);
            std::cout << result.format_table();
        } else if (*run) {
            const auto r = pipeline::run_pipeline(run_config, say);
            for (const auto& s : r.stages) say(s.name + ": " + s.status);
            say("run directory " + r.run_dir.string());
        } else if (*report) {
            say("report in " + pipeline::emit_report(pipeline::load_run(report_run)).string());
        } else if (*make_toy) {
            const auto c = toy::make_toy_corpus(toy_out, toy_opts);
            say("wrote " + c.ccd_manifest.string() + " and " + c.endo_manifest.string());
        }
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
