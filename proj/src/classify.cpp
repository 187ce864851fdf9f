#include "kstone/classify.hpp"

#include "kstone/nn/optim.hpp"
#include "kstone/nn/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace kstone::cls {

namespace fs = std::filesystem;

std::string to_string(Init i) {
    switch (i) {
    case Init::GENERIC_PRETRAINED: return "GENERIC_PRETRAINED";
    case Init::FROM_CHECKPOINT: return "FROM_CHECKPOINT";
    case Init::SCRATCH: return "SCRATCH";
    }
    return "?";
}

Init parse_init(const std::string& s) {
    if (s == "GENERIC_PRETRAINED" || s == "generic") return Init::GENERIC_PRETRAINED;
    if (s == "FROM_CHECKPOINT" || s == "ckpt" || s == "checkpoint") return Init::FROM_CHECKPOINT;
    if (s == "SCRATCH" || s == "scratch") return Init::SCRATCH;
    throw ConfigError("unknown initialization '" + s + "' (expected generic, ckpt or scratch)");
}

void BackboneSpec::validate() const {
    if (architecture != "resnet50" && architecture != "small_cnn")
        throw ConfigError("unknown backbone architecture '" + architecture + "'");
    if (init == Init::FROM_CHECKPOINT && !weights) throw ConfigError("FROM_CHECKPOINT initialization needs a checkpoint path");
    if (init == Init::GENERIC_PRETRAINED && !weights)
        throw ConfigError("generic pretrained initialization needs a backbone weight file");
    if (weights && init != Init::SCRATCH && !fs::exists(*weights))
        throw ConfigError("weights not found: " + weights->string());
}

void HeadSpec::validate() const {
    if (widths.empty()) throw ConfigError("head needs at least the output layer");
    if (widths.back() != 6) throw ConfigError("head output width must equal the 6 classes");
    for (int w : widths)
        if (w <= 0) throw ConfigError("head widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
}

TrainConfig TrainConfig::defaults(Stage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == Stage::STEP2) c.learning_rate = 0.01;
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage", stage == Stage::STEP1 ? "STEP1" : "STEP2"},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"momentum", momentum},
            {"epochs", epochs},
            {"seed", seed},
            {"validation_fraction", validation_fraction},
            {"train_backbone", train_backbone}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, Stage stage) {
    TrainConfig c = defaults(stage);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.train_backbone = j.value("train_backbone", c.train_backbone);
    if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
    if (c.epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(c.learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(c.validation_fraction >= 0 && c.validation_fraction < 1))
        throw ConfigError("validation_fraction must lie in [0,1)");
    return c;
}

// Model ------------------------------------------------------------------------

std::shared_ptr<nn::Sequential> make_backbone(const std::string& architecture, Rng& rng, int& num_features) {
    auto net = std::make_shared<nn::Sequential>();
    if (architecture == "small_cnn") {
        net->add<nn::Conv2d>(3, 16, 3, 1, 1, false, rng);
        net->add<nn::BatchNorm>(16);
        net->add<nn::ReLU>();
        net->add<nn::MaxPool2d>(2, 2);
        net->add<nn::Conv2d>(16, 32, 3, 1, 1, false, rng);
        net->add<nn::BatchNorm>(32);
        net->add<nn::ReLU>();
        net->add<nn::MaxPool2d>(2, 2);
        net->add<nn::GlobalAvgPool>();
        num_features = 32;
    } else if (architecture == "resnet50") {
        net->add<nn::Conv2d>(3, 64, 7, 2, 3, false, rng);
        net->add<nn::BatchNorm>(64);
        net->add<nn::ReLU>();
        net->add<nn::MaxPool2d>(3, 2, 1);
        const int blocks[4] = {3, 4, 6, 3};
        int in = 64;
        for (int s = 0; s < 4; ++s) {
            const int width = 64 << s;
            for (int b = 0; b < blocks[s]; ++b) {
                net->add<nn::Bottleneck>(in, width, b == 0 && s > 0 ? 2 : 1, rng);
                in = width * nn::Bottleneck::expansion;
            }
        }
        net->add<nn::GlobalAvgPool>();
        num_features = in;
    } else {
        throw ConfigError("unknown backbone architecture '" + architecture + "'");
    }
    return net;
}

Tensor Classifier::Composite::forward(const Tensor& x, bool train) { return head->forward(backbone->forward(x, train), train); }
Tensor Classifier::Composite::backward(const Tensor& g) { return backbone->backward(head->backward(g)); }
void Classifier::Composite::collect(const std::string& prefix, std::vector<nn::ParamRef>& p,
                                    std::vector<nn::BufferRef>& b) {
    backbone->collect(prefix + "backbone.", p, b);
    head->collect(prefix + "head.", p, b);
}

namespace {

const char* kBackboneMagic = "KSBONE";
const char* kModelMagic = "KSCLS";

} // namespace

Classifier::Classifier(const BackboneSpec& spec, const HeadSpec& head_spec, std::uint64_t seed)
    : architecture(spec.architecture), head(head_spec) {
    head.validate();
    Rng rng(seed);
    backbone_ = make_backbone(architecture, rng, num_features);
    head_ = std::make_shared<nn::Sequential>();
    int in = num_features;
    for (std::size_t i = 0; i + 1 < head.widths.size(); ++i) {
        head_->add<nn::Linear>(in, head.widths[i], rng);
        if (head.batch_norm) head_->add<nn::BatchNorm>(head.widths[i]);
        head_->add<nn::ReLU>();
        if (head.dropout > 0) dropouts_.push_back(&head_->add<nn::Dropout>(static_cast<float>(head.dropout), seed + i));
        in = head.widths[i];
    }
    head_->add<nn::Linear>(in, head.widths.back(), rng);
    all_.backbone = backbone_.get();
    all_.head = head_.get();
    if (spec.init == Init::GENERIC_PRETRAINED) {
        spec.validate();
        const auto f = nn::read_blob_file(*spec.weights, kBackboneMagic);
        const auto meta = nlohmann::json::parse(f.header);
        if (meta.value("architecture", std::string()) != architecture)
            throw ConfigError(spec.weights->string() + " holds " + meta.value("architecture", std::string("?")) +
                              " weights, not " + architecture);
        if (f.blobs.empty()) throw IoError(spec.weights->string() + ": no parameter blob");
        nn::restore_state(*backbone_, f.blobs[0]);
        stages.push_back("GENERIC:" + spec.weights->filename().string());
    }
}

Tensor Classifier::logits(const Tensor& x, bool train) {
    Tensor z = x;
    const int n = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            float* p = z.ptr() + (static_cast<std::size_t>(i) * 3 + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - channel_mean[c]) / channel_std[c];
        }
    return all_.forward(z, train);
}

void Classifier::backward(const Tensor& grad_logits) { all_.backward(grad_logits); }

std::vector<nn::ParamRef> Classifier::parameters(bool include_backbone) {
    std::vector<nn::ParamRef> p;
    std::vector<nn::BufferRef> b;
    if (include_backbone) backbone_->collect("backbone.", p, b);
    head_->collect("head.", p, b);
    return p;
}

void Classifier::reseed_dropout(std::uint64_t seed) {
    for (std::size_t i = 0; i < dropouts_.size(); ++i) dropouts_[i]->reseed(mix_seed(seed, i));
}

namespace {

nlohmann::json header_of(const Classifier& m) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& e : m.history) {
        nlohmann::json o{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy},
                         {"optimizer_steps", e.optimizer_steps}};
        if (e.val_loss) o["val_loss"] = *e.val_loss;
        if (e.val_accuracy) o["val_accuracy"] = *e.val_accuracy;
        hist.push_back(o);
    }
    return {{"architecture", m.architecture},
            {"head", {{"widths", m.head.widths}, {"batch_norm", m.head.batch_norm}, {"dropout", m.head.dropout}}},
            {"channel_mean", m.channel_mean},
            {"channel_std", m.channel_std},
            {"fit_parents", std::vector<std::string>(m.fit_parents.begin(), m.fit_parents.end())},
            {"history", hist},
            {"stages", m.stages},
            {"taxonomy", to_string(m.taxonomy)}};
}

} // namespace

void save_classifier(Classifier& model, const fs::path& path) {
    nn::BlobFile f;
    f.magic = kModelMagic;
    f.header = header_of(model).dump();
    f.blobs.push_back(nn::flatten_state(model.module()));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    nn::write_blob_file(f, path);
}

std::shared_ptr<Classifier> load_classifier(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
    const auto f = nn::read_blob_file(path, kModelMagic);
    const auto j = nlohmann::json::parse(f.header);
    BackboneSpec b;
    b.architecture = j.at("architecture");
    b.init = Init::SCRATCH;
    HeadSpec h;
    h.widths = j.at("head").at("widths").get<std::vector<int>>();
    h.batch_norm = j.at("head").at("batch_norm");
    h.dropout = j.at("head").at("dropout");
    auto m = std::make_shared<Classifier>(b, h, 0);
    if (f.blobs.empty()) throw IoError(path.string() + ": no parameter blob");
    nn::restore_state(m->module(), f.blobs[0]);
    m->channel_mean = j.at("channel_mean").get<std::array<float, 3>>();
    m->channel_std = j.at("channel_std").get<std::array<float, 3>>();
    const auto fp = j.at("fit_parents").get<std::vector<std::string>>();
    m->fit_parents = {fp.begin(), fp.end()};
    for (const auto& e : j.at("history")) {
        EpochLog l;
        l.epoch = e.at("epoch");
        l.train_loss = e.at("train_loss");
        l.train_accuracy = e.at("train_accuracy");
        l.optimizer_steps = e.at("optimizer_steps");
        if (e.contains("val_loss")) l.val_loss = e["val_loss"].get<double>();
        if (e.contains("val_accuracy")) l.val_accuracy = e["val_accuracy"].get<double>();
        m->history.push_back(l);
    }
    m->stages = j.at("stages").get<std::vector<std::string>>();
    m->taxonomy = j.at("taxonomy").get<std::string>() == "ENDO_FAMILY" ? Taxonomy::ENDO_FAMILY : Taxonomy::CCD_FAMILY;
    return m;
}

void save_backbone(Classifier& model, const fs::path& path) {
    nn::BlobFile f;
    f.magic = kBackboneMagic;
    f.header = nlohmann::json{{"architecture", model.architecture}}.dump();
    std::vector<nn::ParamRef> p;
    std::vector<nn::BufferRef> b;
    model.module().collect("", p, b);
    Rng rng(0);
    int features = 0;
    auto fresh = make_backbone(model.architecture, rng, features);
    const std::size_t n = nn::state_size(*fresh);
    // the composite state interleaves head and backbone, so gather the backbone pieces by name
    std::vector<float> blob;
    blob.reserve(n);
    for (const auto& [name, param] : p)
        if (name.rfind("backbone.", 0) == 0) blob.insert(blob.end(), param->value.data.begin(), param->value.data.end());
    for (const auto& [name, buf] : b)
        if (name.rfind("backbone.", 0) == 0) blob.insert(blob.end(), buf->data.begin(), buf->data.end());
    if (blob.size() != n) throw Error("backbone state size mismatch");
    f.blobs.push_back(std::move(blob));
    nn::write_blob_file(f, path);
}

std::shared_ptr<Classifier> clone(const Classifier& model) {
    auto& src = const_cast<Classifier&>(model);
    BackboneSpec b;
    b.architecture = model.architecture;
    b.init = Init::SCRATCH;
    auto out = std::make_shared<Classifier>(b, model.head, 0);
    nn::restore_state(out->module(), nn::flatten_state(src.module()));
    out->channel_mean = model.channel_mean;
    out->channel_std = model.channel_std;
    out->fit_parents = model.fit_parents;
    out->history = model.history;
    out->stages = model.stages;
    out->taxonomy = model.taxonomy;
    return out;
}

// Data -------------------------------------------------------------------------

LabeledPatches load_labeled(const patch::PatchSet& ps) {
    LabeledPatches out;
    if (ps.patches.empty()) return out;
    int s = 0;
    std::vector<Image> imgs;
    imgs.reserve(ps.patches.size());
    fs::path cached_path;
    Image cached;
    for (const auto& p : ps.patches) {
        Image img;
        if (p.pixels.empty() && (p.file.empty() || !fs::exists(p.file)) && !p.parent_path.empty()) {
            if (p.parent_path != cached_path) {
                cached = load_image(p.parent_path);
                cached_path = p.parent_path;
            }
            img = crop(cached, p.x, p.y, p.size, p.size);
        } else {
            img = patch::patch_pixels(p);
        }
        if (img.width != img.height) throw DimensionError("patch " + p.id + " is not square");
        if (s == 0) s = img.width;
        if (img.width != s) throw DimensionError("patch set mixes patch sizes");
        imgs.push_back(std::move(img));
        out.labels.push_back(class_index(p.stone_class));
        out.parents.push_back(p.parent_key());
    }
    const int n = static_cast<int>(imgs.size());
    out.images = Tensor({n, 3, s, s});
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < plane; ++k)
            for (int c = 0; c < 3; ++c)
                out.images.data[(static_cast<std::size_t>(i) * 3 + c) * plane + k] = imgs[i].data[k * 3 + c];
    return out;
}

namespace {

void require_single_view(const patch::PatchSet& ps) {
    if (ps.patches.empty()) throw ParameterError("patch set '" + ps.name + "' is empty");
    for (const auto& p : ps.patches)
        if (p.view != ps.patches.front().view)
            throw ParameterError("patch set '" + ps.name + "' mixes views; train one view at a time");
}

void require_all_classes(const LabeledPatches& d, const std::string& name) {
    std::set<int> seen(d.labels.begin(), d.labels.end());
    if (seen.size() != 6) throw ParameterError("patch set '" + name + "' covers " + std::to_string(seen.size()) + " of 6 classes");
}

Tensor gather(const Tensor& images, const std::vector<std::size_t>& idx, std::size_t from, std::size_t to) {
    const std::size_t per = images.numel() / images.dim(0);
    Tensor out({static_cast<int>(to - from), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = from; i < to; ++i)
        std::copy_n(images.data.begin() + idx[i] * per, per, out.data.begin() + (i - from) * per);
    return out;
}

struct Scored {
    double loss = 0;
    double accuracy = 0;
    std::vector<int> predictions;
};

Scored score(Classifier& m, const LabeledPatches& d) {
    Scored s;
    const std::size_t n = d.labels.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t correct = 0;
    for (std::size_t from = 0; from < n; from += 64) {
        const std::size_t to = std::min(n, from + 64);
        const Tensor lg = m.logits(gather(d.images, idx, from, to), false);
        std::vector<int> lab(d.labels.begin() + from, d.labels.begin() + to);
        Tensor g;
        s.loss += nn::cross_entropy(lg, lab, g) * (to - from);
        for (int p : nn::argmax_rows(lg)) s.predictions.push_back(p);
    }
    for (std::size_t i = 0; i < n; ++i) correct += s.predictions[i] == d.labels[i];
    s.loss /= n;
    s.accuracy = 100.0 * correct / n;
    return s;
}

void fit(Classifier& m, const patch::PatchSet& train_all, const TrainConfig& cfg, const std::string& stage_tag,
         const EpochCallback& on_epoch) {
    require_single_view(train_all);
    auto [fit_set, val_set] = validation_split(train_all, cfg);
    const LabeledPatches train = load_labeled(fit_set);
    require_all_classes(train, train_all.name);
    const LabeledPatches val = load_labeled(val_set);
    for (const auto& p : train_all.patches) m.fit_parents.insert(p.parent_key());
    m.stages.push_back(stage_tag + ":" + train_all.name);

    const std::size_t n = train.labels.size();
    nn::Sgd opt(m.parameters(cfg.train_backbone), cfg.learning_rate, cfg.momentum);
    m.reseed_dropout(mix_seed(cfg.seed, 0xd0));
    int steps = m.history.empty() ? 0 : m.history.back().optimizer_steps;
    const int epoch0 = m.history.empty() ? 0 : m.history.back().epoch;
    for (int e = 0; e < cfg.epochs; ++e) {
        const std::vector<float> snapshot = nn::flatten_state(m.module());
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(e) + 1));
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t from = 0; from < n; from += cfg.batch_size) {
            const std::size_t to = std::min(n, from + cfg.batch_size);
            if (to - from == 1 && n > 1) break; // a single-sample batch has no batch statistics
            const Tensor x = gather(train.images, order, from, to);
            std::vector<int> lab;
            for (std::size_t i = from; i < to; ++i) lab.push_back(train.labels[order[i]]);
            opt.zero_grad();
            if (!cfg.train_backbone) nn::zero_grad(m.module());
            const Tensor lg = m.logits(x, true);
            Tensor g;
            const double loss = nn::cross_entropy(lg, lab, g);
            if (!std::isfinite(loss)) {
                nn::restore_state(m.module(), snapshot);
                auto good = clone(m);
                throw ClassifierDivergence("non-finite loss in epoch " + std::to_string(epoch0 + e + 1) +
                                               "; weights restored to the start of the epoch",
                                           good);
            }
            m.backward(g);
            opt.step();
            ++steps;
            loss_sum += loss * (to - from);
            const auto pred = nn::argmax_rows(lg);
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == lab[i];
            seen += to - from;
        }
        EpochLog log;
        log.epoch = epoch0 + e + 1;
        log.train_loss = seen ? loss_sum / seen : 0.0;
        log.train_accuracy = seen ? 100.0 * correct / seen : 0.0;
        log.optimizer_steps = steps;
        if (!val.labels.empty()) {
            const Scored s = score(m, val);
            log.val_loss = s.loss;
            log.val_accuracy = s.accuracy;
        }
        m.history.push_back(log);
        if (on_epoch) on_epoch(log);
    }
}

} // namespace

std::vector<int> predict(Classifier& model, const LabeledPatches& data) { return score(model, data).predictions; }

std::pair<patch::PatchSet, patch::PatchSet> validation_split(const patch::PatchSet& train, const TrainConfig& cfg) {
    if (cfg.validation_fraction <= 0) return {train, patch::PatchSet{train.name + "_val", train.patch_size, {}}};
    return patch::split(train, 1.0 - cfg.validation_fraction, mix_seed(cfg.seed, 0x7a1));
}

std::shared_ptr<Classifier> train_step1(const BackboneSpec& backbone, const HeadSpec& head,
                                        const patch::PatchSet& train, const TrainConfig& cfg,
                                        const EpochCallback& on_epoch) {
    backbone.validate();
    head.validate();
    require_single_view(train);
    std::shared_ptr<Classifier> m;
    if (backbone.init == Init::FROM_CHECKPOINT) {
        m = load_classifier(*backbone.weights);
        if (m->architecture != backbone.architecture)
            throw ConfigError("checkpoint architecture " + m->architecture + " differs from " + backbone.architecture);
    } else {
        m = std::make_shared<Classifier>(backbone, head, mix_seed(cfg.seed, 0xb0));
        // per-channel standardization from the training pixels
        const LabeledPatches d = load_labeled(train);
        const std::size_t plane = static_cast<std::size_t>(d.images.dim(2)) * d.images.dim(3);
        for (int c = 0; c < 3; ++c) {
            double s = 0, s2 = 0;
            for (int i = 0; i < d.images.dim(0); ++i) {
                const float* p = d.images.ptr() + (static_cast<std::size_t>(i) * 3 + c) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    s += p[k];
                    s2 += static_cast<double>(p[k]) * p[k];
                }
            }
            const double cnt = static_cast<double>(plane) * d.images.dim(0);
            const double mean = s / cnt;
            m->channel_mean[c] = static_cast<float>(mean);
            m->channel_std[c] = static_cast<float>(std::max(1e-3, std::sqrt(std::max(0.0, s2 / cnt - mean * mean))));
        }
    }
    m->taxonomy = train.patches.front().stone_class.taxonomy;
    fit(*m, train, cfg, "STEP1", on_epoch);
    return m;
}

std::shared_ptr<Classifier> train_step2(const Classifier& model1, const patch::PatchSet& target,
                                        const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (model1.head.widths.back() != 6) throw ConfigError("model I does not have a 6-class output");
    auto m = clone(model1);
    require_single_view(target);
    m->taxonomy = target.patches.front().stone_class.taxonomy;
    fit(*m, target, cfg, "STEP2", on_epoch);
    return m;
}

RunResult evaluate(Classifier& model, const patch::PatchSet& test) {
    for (const auto& p : test.patches)
        if (model.fit_parents.count(p.parent_key()))
            throw LeakageError("test patch " + p.id + " comes from parent " + p.parent_key() +
                               ", which the model was trained on; refusing to evaluate");
    const LabeledPatches d = load_labeled(test);
    require_all_classes(d, test.name);
    const Scored s = score(model, d);
    RunResult r;
    r.accuracy = s.accuracy;
    r.count = d.labels.size();
    std::map<std::string, std::pair<int, int>> per;
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
        auto& [ok, total] = per[test.patches[i].stone_class.code];
        ok += s.predictions[i] == d.labels[i];
        ++total;
    }
    for (const auto& [code, v] : per) r.per_class_accuracy[code] = 100.0 * v.first / v.second;
    return r;
}

EvalResult aggregate(const std::vector<RunResult>& runs, View view, const std::string& label) {
    EvalResult e;
    e.view = view;
    e.config_label = label;
    if (runs.empty()) return e;
    for (const auto& r : runs) e.runs.push_back(r.accuracy);
    const double n = static_cast<double>(runs.size());
    e.accuracy_mean = std::accumulate(e.runs.begin(), e.runs.end(), 0.0) / n;
    if (runs.size() > 1) {
        double ss = 0;
        for (double a : e.runs) ss += (a - e.accuracy_mean) * (a - e.accuracy_mean);
        e.accuracy_std = std::sqrt(ss / (n - 1));
    }
    for (const auto& r : runs)
        for (const auto& [code, a] : r.per_class_accuracy) e.per_class_accuracy[code] += a / n;
    return e;
}

std::string format_accuracy(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%05.2f±%05.2f", mean, std);
    return buf;
}

} // namespace kstone::cls
