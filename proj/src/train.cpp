#include "nictkit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "nictkit/binary_io.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/dataset.hpp"
#include "nictkit/error.hpp"
#include "nictkit/metrics.hpp"
#include "nictkit/ops.hpp"

namespace nictkit {

using ad::Tensor;

double lr_at(double lr0, const DecaySchedule& decay, std::size_t queues_consumed) {
    if (decay.every == 0) throw InvalidConfig("lr decay interval must be >= 1");
    return lr0 * std::pow(decay.factor, static_cast<double>(queues_consumed / decay.every));
}

double lr_schedule(Stage stage, std::size_t queues_consumed, double lr0) {
    return stage == Stage::Pretrain ? lr_at(lr0, {0.95, 100}, queues_consumed) : lr_at(lr0, {0.5, 10}, queues_consumed);
}

void TrainConfig::validate() const {
    if (queue_size < 1) throw InvalidConfig("train: queue_size must be >= 1");
    if (batch_size < 1) throw InvalidConfig("train: batch_size must be >= 1");
    if (input_side < 16) throw InvalidConfig("train: input_side must be >= 16");
    adan.validate();
    for (const auto* d : {&pretrain_decay, &adapt_decay}) {
        if (!(d->factor > 0.0 && d->factor <= 1.0)) throw InvalidConfig("train: decay factor must lie in (0, 1]");
        if (d->every < 1) throw InvalidConfig("train: decay interval must be >= 1");
    }
    ddel_weights.validate();
    if (projection_views < 1) throw InvalidConfig("train: projection_views must be >= 1");
    if (extractor_taps.empty()) throw InvalidConfig("train: extractor taps must not be empty");
}

namespace {

DecaySchedule read_decay(const nlohmann::json& j, DecaySchedule fallback, const std::string& where) {
    JsonFields f(j, where);
    DecaySchedule d{f.get<double>("factor", fallback.factor), f.get<std::size_t>("every", fallback.every)};
    f.finish();
    return d;
}

}  // namespace

TrainConfig TrainConfig::read(JsonFields& f) {
    TrainConfig c;
    c.seed = f.get<std::uint64_t>("seed", c.seed);
    c.queue_size = f.get<std::size_t>("queue_size", c.queue_size);
    c.batch_size = f.get<std::size_t>("batch_size", c.batch_size);
    c.input_side = f.get<std::size_t>("input_side", c.input_side);
    c.steps = f.get<std::size_t>("steps", c.steps);
    c.adan.lr = f.get<double>("lr0", c.adan.lr);
    c.adan.b1 = f.get<double>("b1", c.adan.b1);
    c.adan.b2 = f.get<double>("b2", c.adan.b2);
    c.adan.b3 = f.get<double>("b3", c.adan.b3);
    c.adan.eps = f.get<double>("eps", c.adan.eps);
    c.adan.weight_decay = f.get<double>("weight_decay", c.adan.weight_decay);
    if (f.has("adan_mapping")) c.adan.mapping = parse_adan_mapping(f.require<std::string>("adan_mapping"));
    if (f.has("pretrain_decay")) c.pretrain_decay = read_decay(f.raw("pretrain_decay"), c.pretrain_decay, "pretrain_decay");
    if (f.has("adapt_decay")) c.adapt_decay = read_decay(f.raw("adapt_decay"), c.adapt_decay, "adapt_decay");
    if (f.has("ddel_weights")) c.ddel_weights = DdelWeights::from_json(f.raw("ddel_weights"));
    c.val_every = f.get<std::size_t>("val_every", c.val_every);
    c.checkpoint_every = f.get<std::size_t>("checkpoint_every", c.checkpoint_every);
    c.projection_views = f.get<std::size_t>("projection_views", c.projection_views);
    if (f.has("extractor")) {
        JsonFields e(f.raw("extractor"), "extractor");
        c.extractor_seed = e.get<std::uint64_t>("seed", c.extractor_seed);
        c.extractor_taps = e.get<std::vector<std::size_t>>("taps", c.extractor_taps);
        e.finish();
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    JsonFields f(j, "train config");
    TrainConfig c = read(f);
    f.finish();
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"seed", seed},
            {"queue_size", queue_size},
            {"batch_size", batch_size},
            {"input_side", input_side},
            {"steps", steps},
            {"lr0", adan.lr},
            {"b1", adan.b1},
            {"b2", adan.b2},
            {"b3", adan.b3},
            {"eps", adan.eps},
            {"weight_decay", adan.weight_decay},
            {"adan_mapping", to_string(adan.mapping)},
            {"pretrain_decay", {{"factor", pretrain_decay.factor}, {"every", pretrain_decay.every}}},
            {"adapt_decay", {{"factor", adapt_decay.factor}, {"every", adapt_decay.every}}},
            {"ddel_weights", ddel_weights.to_json()},
            {"val_every", val_every},
            {"checkpoint_every", checkpoint_every},
            {"projection_views", projection_views},
            {"extractor", {{"seed", extractor_seed}, {"taps", extractor_taps}}}};
}

TrainSlice to_train_slice(const NictPair& pair) {
    if (pair.nict.size() != pair.ict.size()) throw ShapeMismatch("pair images differ in size");
    TrainSlice s;
    s.nict.resize(pair.nict.size());
    s.ict.resize(pair.ict.size());
    std::transform(pair.nict.values.begin(), pair.nict.values.end(), s.nict.begin(), normalize_hu);
    std::transform(pair.ict.values.begin(), pair.ict.values.end(), s.ict.begin(), normalize_hu);
    return s;
}

std::vector<TrainVolume> dataset_train_volumes(const std::filesystem::path& dataset_dir,
                                               const std::vector<std::string>& settings) {
    const auto manifest = load_manifest(dataset_dir);
    std::vector<TrainVolume> out;
    for (const auto& v : dataset_volumes(dataset_dir, manifest)) {
        const std::string tag = to_string(v.kind) + "/" + to_string(v.degree);
        if (!settings.empty() && std::find(settings.begin(), settings.end(), tag) == settings.end()) continue;
        TrainVolume tv;
        tv.id = v.volume_id + ":" + tag;
        tv.kind = v.kind;
        tv.num_slices = v.pair_files.size();
        tv.load = [files = v.pair_files] {
            std::vector<TrainSlice> slices;
            for (const auto& f : files) slices.push_back(to_train_slice(load_pair(f)));
            return slices;
        };
        out.push_back(std::move(tv));
    }
    if (out.empty()) throw InvalidConfig("no training volumes in " + dataset_dir.string() + " for the requested settings");
    return out;
}

TrainVolume memory_volume(std::string id, NictKind kind, std::vector<TrainSlice> slices) {
    TrainVolume v;
    v.id = std::move(id);
    v.kind = kind;
    v.num_slices = slices.size();
    v.load = [s = std::move(slices)] { return s; };
    return v;
}

std::vector<TrainSlice> default_validation(const std::vector<TrainVolume>& corpus, std::size_t count) {
    std::vector<TrainSlice> out;
    for (std::size_t i = 0; i < corpus.size() && out.size() < count; ++i) {
        auto slices = corpus[i].load();
        if (!slices.empty()) out.push_back(std::move(slices.front()));
    }
    return out;
}

std::string log_header() { return "step,lr,l_mse_img,l_ssim,l_perc,l_mse_proj,total,val_psnr"; }

std::string format_log_row(const StepRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,", r.step, r.lr, r.loss.l_mse_img, r.loss.l_ssim,
                  r.loss.l_perc, r.loss.l_mse_proj, r.loss.total);
    std::string s = buf;
    if (r.val_psnr) {
        std::snprintf(buf, sizeof buf, "%.6f", *r.val_psnr);
        s += buf;
    }
    return s;
}

namespace {

void check_side(const TrainSlice& s, std::size_t side) {
    if (s.nict.size() != side * side || s.ict.size() != side * side)
        throw ShapeMismatch("training slice has " + std::to_string(s.nict.size()) + " pixels, model input is " +
                            std::to_string(side) + "x" + std::to_string(side));
}

std::size_t side_of(const std::vector<TrainSlice>& slices) {
    const auto n = slices.front().nict.size();
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) throw ShapeMismatch("slice is not square");
    return side;
}

double psnr_of(std::span<const float> pred, std::span<const float> ref) {
    std::vector<float> a(pred.size()), b(ref.size());
    std::transform(pred.begin(), pred.end(), a.begin(), denormalize_hu);
    std::transform(ref.begin(), ref.end(), b.begin(), denormalize_hu);
    return psnr(a, b);
}

}  // namespace

double mean_psnr(const LayerSource& model, const MitnetConfig& mcfg, const std::vector<TrainSlice>& slices) {
    if (slices.empty()) throw InvalidConfig("no slices to evaluate");
    const std::size_t side = side_of(slices), px = side * side, chunk = 4;
    ad::NoGradGuard guard;
    double acc = 0.0;
    for (std::size_t i = 0; i < slices.size(); i += chunk) {
        const std::size_t b = std::min(chunk, slices.size() - i);
        std::vector<float> x;
        for (std::size_t k = 0; k < b; ++k) {
            check_side(slices[i + k], side);
            x.insert(x.end(), slices[i + k].nict.begin(), slices[i + k].nict.end());
        }
        const Tensor y = mitnet_forward(model, mcfg, Tensor::from({b, 1, side, side}, std::move(x)));
        for (std::size_t k = 0; k < b; ++k)
            acc += psnr_of(y.values().subspan(k * px, px), slices[i + k].ict);
    }
    return acc / static_cast<double>(slices.size());
}

double mean_input_psnr(const std::vector<TrainSlice>& slices) {
    if (slices.empty()) throw InvalidConfig("no slices to evaluate");
    double acc = 0.0;
    for (const auto& s : slices) acc += psnr_of(s.nict, s.ict);
    return acc / static_cast<double>(slices.size());
}

namespace {

std::vector<QueueVolume> queue_view(const std::vector<TrainVolume>& corpus) {
    std::vector<QueueVolume> q;
    for (const auto& v : corpus) q.push_back({v.id, v.kind, v.num_slices});
    return q;
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, const MitnetConfig& model_config, Stage stage, const LayerSource& model,
                 ad::ParamTable trainable, std::vector<TrainVolume> corpus, std::vector<TrainSlice> validation)
    : config_(config),
      model_config_(model_config),
      stage_(stage),
      model_(model),
      trainable_(std::move(trainable)),
      corpus_(std::move(corpus)),
      validation_(std::move(validation)),
      queue_((config.validate(), queue_view(corpus_)), config.queue_size, config.seed),
      geometry_(projection_loss_geometry(config.input_side, config.projection_views)),
      extractor_(FeatureExtractor::seeded(config.extractor_seed, config.extractor_taps)) {
    model_config_.validate_input(config_.input_side);
    if (trainable_.empty()) throw InvalidConfig("nothing to train: no parameter takes gradients");
    for (const auto& s : validation_) check_side(s, config_.input_side);
}

double Trainer::current_lr() const {
    const auto& decay = stage_ == Stage::Pretrain ? config_.pretrain_decay : config_.adapt_decay;
    return lr_at(config_.adan.lr, decay, queue_.refills());
}

const std::vector<TrainSlice>& Trainer::slices_of(std::size_t volume) {
    for (auto it = cache_.begin(); it != cache_.end();) {
        if (queue_.is_resident(it->first)) ++it;
        else it = cache_.erase(it);
    }
    auto it = cache_.find(volume);
    if (it == cache_.end()) {
        auto slices = corpus_[volume].load();
        if (slices.size() != corpus_[volume].num_slices)
            throw IoError("volume '" + corpus_[volume].id + "' yielded " + std::to_string(slices.size()) +
                          " slices, expected " + std::to_string(corpus_[volume].num_slices));
        for (const auto& s : slices) check_side(s, config_.input_side);
        it = cache_.emplace(volume, std::move(slices)).first;
    }
    return it->second;
}

StepRecord Trainer::step() {
    const std::size_t k = steps_ + 1;
    const std::size_t side = config_.input_side, b = config_.batch_size;
    if (on_mode) on_mode(true, k);

    std::vector<float> x, t;
    x.reserve(b * side * side);
    t.reserve(b * side * side);
    for (std::size_t i = 0; i < b; ++i) {
        const SliceRef ref = queue_.next();
        const auto& s = slices_of(ref.volume)[ref.slice];
        x.insert(x.end(), s.nict.begin(), s.nict.end());
        t.insert(t.end(), s.ict.begin(), s.ict.end());
    }
    StepRecord rec;
    rec.step = k;
    rec.lr = current_lr();

    for (auto& [name, p] : trainable_) p.zero_grad();
    try {
        const Tensor pred = mitnet_forward(model_, model_config_, Tensor::from({b, 1, side, side}, std::move(x)));
        const auto terms = loss_total(pred, Tensor::from({b, 1, side, side}, std::move(t)), geometry_,
                                      config_.ddel_weights, extractor_);
        rec.loss = terms.breakdown;
        if (!std::isfinite(rec.loss.total)) throw NonFiniteValue("total loss");
        ad::backward(terms.total);
    } catch (const NonFiniteValue& e) {
        throw NanLoss("non-finite loss at step " + std::to_string(k) + " (" + e.what() + ")");
    }
    AdanHyper hyper = config_.adan;
    hyper.lr = rec.lr;
    adan_step(trainable_, adan_, hyper);
    for (auto& [name, p] : trainable_) p.zero_grad();
    steps_ = k;

    if (config_.val_every > 0 && k % config_.val_every == 0 && !validation_.empty()) rec.val_psnr = validate();
    return rec;
}

double Trainer::validate() {
    if (on_mode) on_mode(false, steps_);
    return mean_psnr(model_, model_config_, validation_);
}

void Trainer::resume(std::size_t steps, AdanState state) {
    if (steps_ != 0) throw InvalidConfig("resume must precede the first step");
    for (std::size_t s = 0; s < steps * config_.batch_size; ++s) queue_.next();
    queue_.clear_events();
    adan_ = std::move(state);
    steps_ = steps;
}

namespace {

const std::string kStepKey = "train.step";

ad::ParamTable state_table(const Trainer& tr) {
    ad::ParamTable t = tr.optimizer().to_table();
    const auto s = static_cast<std::uint64_t>(tr.steps_done());
    t.emplace(kStepKey, Tensor::from({2}, {static_cast<float>(s >> 24), static_cast<float>(s & 0xFFFFFF)}));
    for (const auto& [name, p] : tr.trainable()) t.emplace("trainable/" + name, p.detach());
    return t;
}

// Restores trainable tensors in place; returns (steps, optimizer state).
std::pair<std::size_t, AdanState> restore_state(const std::filesystem::path& path, ad::ParamTable& trainable) {
    ad::ParamTable table = load_checkpoint(path);
    ad::ParamTable adan;
    std::size_t steps = 0;
    bool have_step = false;
    std::size_t restored = 0;
    for (auto& [key, t] : table) {
        if (key == kStepKey) {
            steps = (static_cast<std::size_t>(t.data()[0]) << 24) | static_cast<std::size_t>(t.data()[1]);
            have_step = true;
        } else if (key.rfind("trainable/", 0) == 0) {
            const std::string name = key.substr(10);
            auto it = trainable.find(name);
            if (it == trainable.end()) throw IoError(path.string() + ": unknown trainable tensor '" + name + "'");
            if (it->second.shape() != t.shape()) throw ShapeMismatch(path.string() + ": shape of '" + name + "' differs");
            std::copy(t.values().begin(), t.values().end(), it->second.mutable_values().begin());
            ++restored;
        } else {
            adan.emplace(key, t);
        }
    }
    if (!have_step || restored != trainable.size()) throw IoError(path.string() + ": incomplete training state");
    return {steps, AdanState::from_table(adan)};
}

std::vector<std::string> read_log_rows(const std::filesystem::path& path, std::size_t upto) {
    std::vector<std::string> rows;
    if (!std::filesystem::exists(path)) return rows;
    std::stringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) > upto) break;
        rows.push_back(line);
    }
    if (rows.size() != upto) throw IoError(path.string() + ": log has " + std::to_string(rows.size()) +
                                           " rows before the resume point " + std::to_string(upto));
    return rows;
}

void write_log(const std::filesystem::path& path, const std::vector<std::string>& rows) {
    std::string s = log_header() + "\n";
    for (const auto& r : rows) s += r + "\n";
    write_file_atomic(path, s);
}

// Shared driver. `save` writes the model files for the current state.
TrainReport drive(Trainer& tr, const TrainConfig& config, const TrainOutput* out,
                  const std::function<void()>& save_model) {
    TrainReport report;
    std::vector<std::string> rows;
    if (out) std::filesystem::create_directories(out->dir);
    const auto state_path = out ? out->dir / "train_state.ckpt" : std::filesystem::path();
    const auto log_path = out ? out->dir / "train_log.csv" : std::filesystem::path();

    if (out && out->resume && std::filesystem::exists(state_path)) {
        ad::ParamTable trainable = tr.trainable();
        auto [steps, adan] = restore_state(state_path, trainable);
        rows = read_log_rows(log_path, steps);
        tr.resume(steps, std::move(adan));
    }
    report.first_step = tr.steps_done() + 1;

    auto checkpoint = [&] {
        if (!out) return;
        save_model();
        write_log(log_path, rows);
        save_checkpoint(state_path, state_table(tr));
    };

    while (tr.steps_done() < config.steps) {
        StepRecord rec;
        try {
            rec = tr.step();
        } catch (const NanLoss&) {
            if (out) write_log(log_path, rows);
            throw;
        }
        rows.push_back(format_log_row(rec));
        report.log.push_back(rec);
        if (config.checkpoint_every > 0 && tr.steps_done() % config.checkpoint_every == 0) checkpoint();
    }
    if (out && (config.checkpoint_every == 0 || tr.steps_done() % config.checkpoint_every != 0 || report.log.empty()))
        checkpoint();
    report.refills = tr.queue().refills();
    return report;
}

void write_model_json(const std::filesystem::path& dir, const MitnetConfig& mcfg) {
    write_file_atomic(dir / "model.json", mcfg.to_json().dump(2) + "\n");
}

}  // namespace

TrainReport train_loop(const TrainConfig& config, const MitnetConfig& model_config, ad::ParamTable& params,
                       const std::vector<TrainVolume>& corpus, const std::vector<TrainSlice>& validation,
                       const TrainOutput* out) {
    ad::ParamTable trainable;
    for (const auto& [name, p] : params)
        if (p.requires_grad()) trainable.emplace(name, p);
    TableLayers layers(params);
    Trainer tr(config, model_config, Stage::Pretrain, layers, trainable, corpus, validation);
    return drive(tr, config, out, [&] {
        save_checkpoint(out->dir / "model.ckpt", params);
        write_model_json(out->dir, model_config);
    });
}

AdaptResult adapt_loop(const TrainConfig& config, const MitnetConfig& model_config, const ad::ParamTable& base,
                       const LoraConfig& lora, const std::vector<TrainVolume>& corpus,
                       const std::vector<TrainSlice>& validation, const TrainOutput* out, bool save_split) {
    LoraModel model = attach_lora(base, lora, config.seed);
    TrainReport report;
    {
        Trainer tr(config, model_config, Stage::Adapt, model, model.trainable(), corpus, validation);
        tr.on_mode = [&](bool training, std::size_t step) {
            model.set_training(training);
            model.reseed_dropout(fnv1a(std::to_string(step), config.seed + 0x9e37));
        };
        report = drive(tr, config, out, [&] {
            save_checkpoint(out->dir / "model.ckpt", merge_lora(model));
            write_model_json(out->dir, model_config);
            if (save_split) save_lora(out->dir / "lora.bin", model);
        });
    }
    model.set_training(false);
    ad::ParamTable merged = merge_lora(model);
    return {std::move(model), std::move(merged), std::move(report)};
}

}  // namespace nictkit
