#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/adan.hpp"
#include "nictkit/json_fields.hpp"
#include "nictkit/lora.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/nict_sim.hpp"
#include "nictkit/queue.hpp"

namespace nictkit {

enum class Stage { Pretrain, Adapt };

struct DecaySchedule {
    double factor = 0.95;
    std::size_t every = 100;  // queues (refills) per decay
};

double lr_at(double lr0, const DecaySchedule& decay, std::size_t queues_consumed);
// pretrain: x0.95 every 100 queues, adapt: x0.5 every 10
double lr_schedule(Stage stage, std::size_t queues_consumed, double lr0);

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t queue_size = 5;
    std::size_t batch_size = 4;   // 5 at full scale
    std::size_t input_side = 64;  // 512 at full scale
    std::size_t steps = 200;
    AdanHyper adan;  // adan.lr is the initial rate
    DecaySchedule pretrain_decay{0.95, 100};
    DecaySchedule adapt_decay{0.5, 10};
    DdelWeights ddel_weights;
    std::size_t val_every = 50;
    std::size_t checkpoint_every = 50;
    std::size_t projection_views = 90;
    std::uint64_t extractor_seed = 1234;
    std::vector<std::size_t> extractor_taps{0, 1, 2, 3};

    void validate() const;
    // Consumes the training keys of `fields`; the caller owns finish().
    static TrainConfig read(JsonFields& fields);
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Normalized pixels, side * side each.
struct TrainSlice {
    std::vector<float> nict;
    std::vector<float> ict;
};

TrainSlice to_train_slice(const NictPair& pair);

struct TrainVolume {
    std::string id;
    NictKind kind = NictKind::LowDose;
    std::size_t num_slices = 0;
    std::function<std::vector<TrainSlice>()> load;
};

// Volumes of a simulated dataset; `settings` filters by "kind/degree"
// (e.g. "ldct/mid"), empty keeps everything.
std::vector<TrainVolume> dataset_train_volumes(const std::filesystem::path& dataset_dir,
                                               const std::vector<std::string>& settings = {});
TrainVolume memory_volume(std::string id, NictKind kind, std::vector<TrainSlice> slices);

// One slice from each of the first `count` volumes.
std::vector<TrainSlice> default_validation(const std::vector<TrainVolume>& corpus, std::size_t count = 4);

struct StepRecord {
    std::size_t step = 0;  // 1-based
    double lr = 0.0;
    LossBreakdown loss;
    std::optional<double> val_psnr;
};

std::string log_header();
std::string format_log_row(const StepRecord& r);

// Mean PSNR (HU, range 4095) of the model output against the ICT targets.
double mean_psnr(const LayerSource& model, const MitnetConfig& mcfg, const std::vector<TrainSlice>& slices);
double mean_input_psnr(const std::vector<TrainSlice>& slices);

class Trainer {
public:
    Trainer(const TrainConfig& config, const MitnetConfig& model_config, Stage stage, const LayerSource& model,
            ad::ParamTable trainable, std::vector<TrainVolume> corpus, std::vector<TrainSlice> validation);

    // Called with true before each step and false before validation.
    std::function<void(bool training, std::size_t step)> on_mode;

    // Throws NanLoss naming the step, or NonFiniteGradient.
    StepRecord step();
    double validate();

    // Replays queue bookkeeping for `steps` steps and installs optimizer state.
    void resume(std::size_t steps, AdanState state);

    std::size_t steps_done() const { return steps_; }
    const AdanState& optimizer() const { return adan_; }
    const VolumeQueue& queue() const { return queue_; }
    const ad::ParamTable& trainable() const { return trainable_; }
    double current_lr() const;

private:
    const std::vector<TrainSlice>& slices_of(std::size_t volume);

    TrainConfig config_;
    MitnetConfig model_config_;
    Stage stage_;
    const LayerSource& model_;
    ad::ParamTable trainable_;
    std::vector<TrainVolume> corpus_;
    std::vector<TrainSlice> validation_;
    VolumeQueue queue_;
    std::map<std::size_t, std::vector<TrainSlice>> cache_;
    ProjectionGeometry geometry_;
    FeatureExtractor extractor_;
    AdanState adan_;
    std::size_t steps_ = 0;
};

struct TrainOutput {
    std::filesystem::path dir;
    bool resume = false;
};

struct TrainReport {
    std::vector<StepRecord> log;  // steps run by this call
    std::size_t first_step = 1;
    std::size_t refills = 0;
};

// out/model.ckpt, out/model.json, out/train_log.csv, out/train_state.ckpt
TrainReport train_loop(const TrainConfig& config, const MitnetConfig& model_config, ad::ParamTable& params,
                       const std::vector<TrainVolume>& corpus, const std::vector<TrainSlice>& validation,
                       const TrainOutput* out = nullptr);

struct AdaptResult {
    LoraModel model;
    ad::ParamTable merged;
    TrainReport report;
};

// Trains only the bypasses. out/model.ckpt holds the merged weights, and
// out/lora.bin the split form when `save_split` is set.
AdaptResult adapt_loop(const TrainConfig& config, const MitnetConfig& model_config, const ad::ParamTable& base,
                       const LoraConfig& lora, const std::vector<TrainVolume>& corpus,
                       const std::vector<TrainSlice>& validation, const TrainOutput* out = nullptr,
                       bool save_split = false);

}  // namespace nictkit
