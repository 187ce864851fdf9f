#pragma once

#include "kstone/dataset.hpp"
#include "kstone/error.hpp"
#include "kstone/nn/layers.hpp"
#include "kstone/patchify.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace kstone::cls {

using nn::Tensor;

enum class Init { GENERIC_PRETRAINED, FROM_CHECKPOINT, SCRATCH };
std::string to_string(Init i);
Init parse_init(const std::string& s);

/// "resnet50": bottleneck stages [3,4,6,3], 2048 features.
/// "small_cnn": two conv-BN-ReLU-pool blocks (16, 32 channels), 32 features.
struct BackboneSpec {
    std::string architecture = "resnet50";
    Init init = Init::GENERIC_PRETRAINED;
    std::optional<std::filesystem::path> weights; // pretrained backbone file or model checkpoint

    void validate() const;
};

struct HeadSpec {
    std::vector<int> widths{768, 256, 128, 6};
    bool batch_norm = true;
    double dropout = 0.5;

    void validate() const;
};

enum class Stage { STEP1, STEP2 };

struct TrainConfig {
    Stage stage = Stage::STEP1;
    int batch_size = 24;
    double learning_rate = 0.001;
    double momentum = 0.9;
    int epochs = 30;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1; // parent-exclusive; 0 disables validation
    bool train_backbone = true;       // false freezes the backbone

    static TrainConfig defaults(Stage stage);
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, Stage stage);
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0;
    double train_accuracy = 0;
    std::optional<double> val_loss, val_accuracy;
    int optimizer_steps = 0;
};

/// Backbone + head with per-channel input standardization.
class Classifier {
public:
    Classifier(const BackboneSpec& backbone, const HeadSpec& head, std::uint64_t seed);

    Tensor logits(const Tensor& x, bool train);
    void backward(const Tensor& grad_logits);
    std::vector<nn::ParamRef> parameters(bool include_backbone);
    nn::Module& module() { return all_; }
    void reseed_dropout(std::uint64_t seed);

    std::string architecture;
    HeadSpec head;
    int num_features = 0;
    std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
    std::array<float, 3> channel_std{1.f, 1.f, 1.f};
    std::set<std::string> fit_parents; // "SOURCE:id" of every patch parent used in training
    std::vector<EpochLog> history;
    std::vector<std::string> stages;     // e.g. "STEP1:toy_ccd_train"
    Taxonomy taxonomy = Taxonomy::CCD_FAMILY;

private:
    class Composite : public nn::Module {
    public:
        nn::Sequential* backbone = nullptr;
        nn::Sequential* head = nullptr;
        Tensor forward(const Tensor& x, bool train) override;
        Tensor backward(const Tensor& g) override;
        void collect(const std::string& prefix, std::vector<nn::ParamRef>& p, std::vector<nn::BufferRef>& b) override;
    };
    std::shared_ptr<nn::Sequential> backbone_, head_;
    std::vector<nn::Dropout*> dropouts_;
    Composite all_;
};

std::shared_ptr<nn::Sequential> make_backbone(const std::string& architecture, Rng& rng, int& num_features);

void save_classifier(Classifier& model, const std::filesystem::path& path);
std::shared_ptr<Classifier> load_classifier(const std::filesystem::path& path);
/// Backbone-only weights, the "generic pretrained" initialization file.
void save_backbone(Classifier& model, const std::filesystem::path& path);

struct ClassifierDivergence : TrainingError {
    ClassifierDivergence(const std::string& what, std::shared_ptr<Classifier> last_good)
        : TrainingError(what), last_good(std::move(last_good)) {}
    std::shared_ptr<Classifier> last_good;
};

/// Pixels of a patch set as one standardizable NCHW batch plus labels.
struct LabeledPatches {
    Tensor images;           // [N,3,S,S] in [0,1]
    std::vector<int> labels; // class index within the family
    std::vector<std::string> parents;
};
LabeledPatches load_labeled(const patch::PatchSet& ps);

/// Eval-mode top-1 predictions, no leakage check (for diagnostics on training data).
std::vector<int> predict(Classifier& model, const LabeledPatches& data);

/// The parent-exclusive (fit, validation) partition training uses for `cfg`.
std::pair<patch::PatchSet, patch::PatchSet> validation_split(const patch::PatchSet& train, const TrainConfig& cfg);

using EpochCallback = std::function<void(const EpochLog&)>;

std::shared_ptr<Classifier> train_step1(const BackboneSpec& backbone, const HeadSpec& head,
                                        const patch::PatchSet& train, const TrainConfig& cfg,
                                        const EpochCallback& on_epoch = {});
/// Continues training a copy of `model1` on the target patches; no layers are added.
std::shared_ptr<Classifier> train_step2(const Classifier& model1, const patch::PatchSet& target,
                                        const TrainConfig& cfg, const EpochCallback& on_epoch = {});

std::shared_ptr<Classifier> clone(const Classifier& model);

struct RunResult {
    double accuracy = 0; // percent
    std::map<std::string, double> per_class_accuracy;
    std::size_t count = 0;
};

/// Top-1 accuracy in eval mode. Refuses test patches whose parents were used in training.
RunResult evaluate(Classifier& model, const patch::PatchSet& test);

struct EvalResult {
    double accuracy_mean = 0;
    double accuracy_std = 0; // sample std over runs, 0 for one run
    std::map<std::string, double> per_class_accuracy;
    View view = View::SUR;
    std::string config_label;
    std::vector<double> runs;
};

EvalResult aggregate(const std::vector<RunResult>& runs, View view, const std::string& label);

/// "82.82±08.72"
std::string format_accuracy(double mean, double std);

} // namespace kstone::cls
