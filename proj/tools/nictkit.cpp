#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nictkit/binary_io.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/dataset.hpp"
#include "nictkit/error.hpp"
#include "nictkit/gradcheck.hpp"
#include "nictkit/image_io.hpp"
#include "nictkit/json_fields.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/parallel.hpp"
#include "nictkit/phantom.hpp"
#include "nictkit/pipeline.hpp"
#include "nictkit/train.hpp"

using namespace nictkit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kSchema = "nictkit/1";

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNan = 4, kShape = 5 };

struct ConfigFile {
    json doc;
    fs::path dir;
};

ConfigFile read_config(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config not found: " + path.string());
    ConfigFile c;
    try {
        c.doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
    c.dir = fs::absolute(path).parent_path();
    return c;
}

// relative paths resolve against the config file
fs::path resolve(const ConfigFile& c, const std::string& p) {
    fs::path path(p);
    return path.is_relative() ? (c.dir / path).lexically_normal() : path;
}

void check_schema(JsonFields& f) {
    const auto s = f.get<std::string>("schema", kSchema);
    if (s != kSchema) throw InvalidConfig("unsupported schema '" + s + "' (expected " + std::string(kSchema) + ")");
}

void write_resolved(const fs::path& dir, const std::string& command, json resolved) {
    fs::create_directories(dir);
    resolved["schema"] = kSchema;
    write_file_atomic(dir / (command + ".resolved.json"), resolved.dump(2) + "\n");
}

std::vector<std::string> string_list(JsonFields& f, const std::string& key, std::vector<std::string> fallback) {
    return f.get<std::vector<std::string>>(key, std::move(fallback));
}

// phantom ------------------------------------------------------------------

struct PhantomArgs {
    std::string out;
    std::size_t side = 64, slices = 8;
    std::uint64_t seed = 0;
    std::string kind = "random";
};

int cmd_phantom(const PhantomArgs& a) {
    Volume vol;
    for (std::size_t s = 0; s < a.slices; ++s) {
        if (a.kind == "random") {
            vol.slices.push_back(random_phantom(a.side, a.seed * 1000003ULL + s));
        } else if (a.kind == "shepp-logan") {
            // intensity 1 -> 1000 HU over an air background
            Image im = shepp_logan(a.side);
            for (auto& v : im.values) v = static_cast<float>(-1024.0 + 2024.0 * v);
            vol.slices.push_back(std::move(im));
        } else {
            throw InvalidConfig("unknown phantom kind '" + a.kind + "' (random | shepp-logan)");
        }
    }
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_volume(out, vol);
    std::printf("wrote %zu slices of %zux%zu to %s\n", a.slices, a.side, a.side, out.string().c_str());
    return kOk;
}

// simulate -----------------------------------------------------------------

int cmd_simulate(const std::string& config_path, const std::string& out_override) {
    const auto cfg = read_config(config_path);
    JsonFields f(cfg.doc, config_path);
    check_schema(f);
    DatasetRequest req;
    req.seed = f.get<std::uint64_t>("seed", 0);
    if (f.has("volume_list")) req.volumes = read_volume_list(resolve(cfg, f.require<std::string>("volume_list")));
    if (f.has("volumes")) {
        for (const auto& v : f.raw("volumes")) {
            JsonFields vf(v, "volumes[]");
            VolumeRef r;
            r.id = vf.require<std::string>("id");
            r.path = resolve(cfg, vf.require<std::string>("path"));
            r.region = vf.get<std::string>("region", "unknown");
            vf.finish();
            req.volumes.push_back(std::move(r));
        }
    }
    if (req.volumes.empty()) throw InvalidConfig("simulate: give 'volumes' or 'volume_list'");
    for (const auto& s : string_list(f, "settings", {"ldct", "svct", "lact"})) req.settings.push_back(parse_kind(s));
    for (const auto& d : string_list(f, "degrees", {"low", "mid", "high"})) req.degrees.push_back(parse_degree(d));
    if (f.has("presets")) req.presets = DefectPresets::from_json(f.raw("presets"));
    req.simulation.num_views = f.get<std::size_t>("num_views", req.simulation.num_views);
    const auto window = f.get<std::string>("filter", "ram-lak");
    if (window != "ram-lak") throw InvalidConfig("simulate: only the 'ram-lak' filter is supported");
    const std::string out = f.get<std::string>("out_dir", "");
    f.finish();
    req.out_dir = out_override.empty() ? (out.empty() ? throw InvalidConfig("simulate: out_dir missing") : resolve(cfg, out))
                                       : fs::path(out_override);

    const auto manifest = build_dataset(req);

    json vols = json::array();
    for (const auto& v : req.volumes) vols.push_back({{"id", v.id}, {"path", fs::absolute(v.path).string()}, {"region", v.region}});
    std::vector<std::string> settings, degrees;
    for (auto k : req.settings) settings.push_back(to_string(k));
    for (auto d : req.degrees) degrees.push_back(to_string(d));
    write_resolved(req.out_dir, "simulate",
                   {{"seed", req.seed},
                    {"volumes", vols},
                    {"settings", settings},
                    {"degrees", degrees},
                    {"presets", req.presets.to_json()},
                    {"num_views", req.simulation.num_views},
                    {"filter", window},
                    {"out_dir", fs::absolute(req.out_dir).string()}});
    std::printf("simulated %zu pairs from %zu slices into %s\n", manifest.total_pairs, manifest.unique_slices,
                req.out_dir.string().c_str());
    return kOk;
}

// train / adapt ------------------------------------------------------------

struct RunFlags {
    std::string config, out, base, model_json;
    std::size_t lora_rank = 0;
    bool resume = false, split = false;
};

struct CorpusSpec {
    std::vector<TrainVolume> corpus;
    std::vector<TrainSlice> validation;
    json resolved;
};

CorpusSpec read_corpus(const ConfigFile& cfg, JsonFields& f) {
    CorpusSpec c;
    const fs::path dataset = resolve(cfg, f.require<std::string>("dataset"));
    const auto settings = string_list(f, "settings", {});
    const auto max_slices = f.get<std::size_t>("max_slices", 0);
    c.corpus = limit_slices(dataset_train_volumes(dataset, settings), max_slices);
    const auto val_count = f.get<std::size_t>("val_slices", 4);
    std::string val_path;
    if (f.has("val_dataset")) {
        val_path = fs::absolute(resolve(cfg, f.require<std::string>("val_dataset"))).string();
        for (auto& v : dataset_train_volumes(val_path, settings)) {
            for (auto& s : v.load()) {
                if (c.validation.size() >= val_count) break;
                c.validation.push_back(std::move(s));
            }
        }
    } else {
        c.validation = default_validation(c.corpus, val_count);
    }
    c.resolved = {{"dataset", fs::absolute(dataset).string()},
                  {"settings", settings},
                  {"max_slices", max_slices},
                  {"val_slices", val_count},
                  {"val_dataset", val_path.empty() ? json(nullptr) : json(val_path)}};
    return c;
}

MitnetConfig read_model(JsonFields& f) {
    if (!f.has("model")) return mitnet_tiny();
    const auto& m = f.raw("model");
    if (m.is_string()) {
        if (m.get<std::string>() != "tiny") throw InvalidConfig("model: only the preset 'tiny' is named");
        return mitnet_tiny();
    }
    return MitnetConfig::from_json(m);
}

fs::path out_dir_of(const ConfigFile& cfg, JsonFields& f, const std::string& override_dir) {
    const std::string out = f.get<std::string>("out_dir", "");
    if (!override_dir.empty()) return override_dir;
    if (out.empty()) throw InvalidConfig("out_dir missing (config or --out)");
    return resolve(cfg, out);
}

void print_tail(const TrainReport& r) {
    if (r.log.empty()) {
        std::printf("nothing to do: run already complete\n");
        return;
    }
    const auto& last = r.log.back();
    std::printf("steps %zu..%zu  final total %.6g  lr %.3g  refills %zu\n", r.first_step, last.step, last.loss.total,
                last.lr, r.refills);
}

int cmd_train(const RunFlags& flags) {
    const auto cfg = read_config(flags.config);
    JsonFields f(cfg.doc, flags.config);
    check_schema(f);
    const TrainConfig tc = TrainConfig::read(f);
    const MitnetConfig mc = read_model(f);
    auto corpus = read_corpus(cfg, f);
    const fs::path out = out_dir_of(cfg, f, flags.out);
    f.finish();
    mc.validate_input(tc.input_side);

    json resolved = tc.to_json();
    resolved.update(corpus.resolved);
    resolved["model"] = mc.to_json();
    resolved["out_dir"] = fs::absolute(out).string();
    write_resolved(out, "train", resolved);

    ad::ParamTable params = init_mitnet(mc, tc.seed);
    TrainOutput o{out, flags.resume};
    const auto report = train_loop(tc, mc, params, corpus.corpus, corpus.validation, &o);
    print_tail(report);
    std::printf("checkpoint: %s\n", (out / "model.ckpt").string().c_str());
    return kOk;
}

int cmd_adapt(const RunFlags& flags) {
    const auto cfg = read_config(flags.config);
    JsonFields f(cfg.doc, flags.config);
    check_schema(f);
    const TrainConfig tc = TrainConfig::read(f);
    LoraConfig lc = f.has("lora") ? LoraConfig::from_json(f.raw("lora")) : LoraConfig{};
    auto corpus = read_corpus(cfg, f);
    const fs::path out = out_dir_of(cfg, f, flags.out);
    const bool split = f.get<bool>("save_split", false) || flags.split;
    f.finish();
    lc.rank = flags.lora_rank;
    lc.validate();

    const ModelBundle base = load_model(flags.base, flags.model_json);
    base.config.validate_input(tc.input_side);

    json resolved = tc.to_json();
    resolved.update(corpus.resolved);
    resolved["lora"] = lc.to_json();
    resolved["base"] = fs::absolute(flags.base).string();
    resolved["base_hash"] = checkpoint_hash(base.params);
    resolved["model"] = base.config.to_json();
    resolved["save_split"] = split;
    resolved["out_dir"] = fs::absolute(out).string();
    write_resolved(out, "adapt", resolved);

    std::vector<TrainSlice> train_slices;
    for (const auto& v : corpus.corpus)
        for (auto& s : v.load()) train_slices.push_back(std::move(s));
    const double before = mean_psnr(TableLayers(base.params), base.config, train_slices);

    TrainOutput o{out, flags.resume};
    auto result = adapt_loop(tc, base.config, base.params, lc, corpus.corpus, corpus.validation, &o, split);
    const double after = mean_psnr(TableLayers(result.merged), base.config, train_slices);
    print_tail(result.report);
    std::printf("train-set psnr: base %.3f dB -> adapted %.3f dB over %zu slices (%zu trainable of %zu)\n", before,
                after, train_slices.size(), result.model.trainable_count(), mitnet_param_count(base.config));
    std::printf("merged checkpoint: %s\n", (out / "model.ckpt").string().c_str());
    return kOk;
}

// enhance ------------------------------------------------------------------

struct EnhanceArgs {
    std::string checkpoint, model_json, input, out, png;
    double center = 40.0, width = 400.0;
};

int cmd_enhance(const EnhanceArgs& a) {
    const ModelBundle model = load_model(a.checkpoint, a.model_json);
    const fs::path in(a.input), out(a.out);
    if (!fs::exists(in)) throw IoError("input not found: " + in.string());
    if (out.has_parent_path()) fs::create_directories(out.parent_path());

    std::vector<Image> slices;
    const std::string ext = in.extension().string();
    if (ext == ".nvol") slices = load_volume(in).slices;
    else if (ext == ".pair") slices.push_back(load_pair(in).nict);
    else slices.push_back(load_image(in));

    std::vector<Image> enhanced;
    for (const auto& s : slices) enhanced.push_back(enhance_image(model, s));
    if (ext == ".nvol") save_volume(out, Volume{enhanced});
    else save_image(out, enhanced.front());

    if (!a.png.empty()) {
        const fs::path png(a.png);
        if (png.has_parent_path()) fs::create_directories(png.parent_path());
        if (enhanced.size() == 1) {
            save_png(png, enhanced.front(), a.center, a.width);
        } else {
            for (std::size_t i = 0; i < enhanced.size(); ++i) {
                char suffix[32];
                std::snprintf(suffix, sizeof suffix, "_%04zu.png", i);
                save_png(png.parent_path() / (png.stem().string() + suffix), enhanced[i], a.center, a.width);
            }
        }
    }
    write_resolved(out.has_parent_path() ? out.parent_path() : fs::path("."), "enhance",
                   {{"checkpoint", fs::absolute(a.checkpoint).string()},
                    {"input", fs::absolute(in).string()},
                    {"out", fs::absolute(out).string()},
                    {"png", a.png.empty() ? json(nullptr) : json(fs::absolute(a.png).string())},
                    {"window_center", a.center},
                    {"window_width", a.width}});
    std::printf("enhanced %zu slice(s) -> %s\n", enhanced.size(), out.string().c_str());
    return kOk;
}

// eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string pred, ref, out, reader_table, config;
};

int cmd_eval(const EvalArgs& a) {
    double range = kDataRangeHu;
    std::uint64_t ex_seed = 1234;
    std::map<std::string, double> weights;
    if (!a.config.empty()) {
        const auto cfg = read_config(a.config);
        JsonFields f(cfg.doc, a.config);
        check_schema(f);
        range = f.get<double>("data_range_hu", range);
        ex_seed = f.get<std::uint64_t>("extractor_seed", ex_seed);
        weights = f.get<std::map<std::string, double>>("reader_weights", {});
        f.finish();
    }
    if (a.reader_table.empty() && (a.pred.empty() || a.ref.empty()))
        throw InvalidConfig("eval needs --pred and --ref, or --reader-table");
    const fs::path out(a.out);
    fs::create_directories(out);
    json resolved = {{"data_range_hu", range}, {"extractor_seed", ex_seed}};

    if (!a.pred.empty()) {
        const auto result = evaluate_dirs(a.pred, a.ref, FeatureExtractor::seeded(ex_seed), range);
        write_file_atomic(out / "metrics.csv", eval_csv(result));
        write_file_atomic(out / "metrics.json", eval_json(result).dump(2) + "\n");
        const auto& m = result.summary.mean;
        std::printf("%zu pairs: psnr %.3f dB (%zu identical), rmse %.3f HU, ssim %.3f%%, lpips-proxy %.3f%%\n",
                    result.summary.count, m.psnr_db, result.summary.psnr_infinite, m.rmse_hu, m.ssim_pct,
                    m.lpips_proxy_pct);
        resolved["pred"] = fs::absolute(a.pred).string();
        resolved["ref"] = fs::absolute(a.ref).string();
    }
    if (!a.reader_table.empty()) {
        auto table = read_reader_csv(a.reader_table);
        if (!weights.empty()) table.weights = weights;
        const auto scores = reader_metrics(table);
        write_file_atomic(out / "reader_metrics.csv", reader_csv(scores));
        write_file_atomic(out / "reader_metrics.json", reader_json(scores).dump(2) + "\n");
        for (const auto& [m, s] : scores)
            std::printf("%-16s PBN %.2f%%  SQR %.3f  PCA %.2f%%\n", m.c_str(), s.pbn_pct, s.sqr, s.pca_pct);
        resolved["reader_table"] = fs::absolute(a.reader_table).string();
        resolved["reader_weights"] = table.weights;
    }
    write_resolved(out, "eval", resolved);
    return kOk;
}

// gradcheck ----------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, double tol, bool kernels_only) {
    auto cases = ad::kernel_grad_cases(seed);
    if (!kernels_only)
        for (auto& c : loss_grad_cases(seed + 4)) cases.push_back(std::move(c));
    const auto rows = ad::run_grad_cases(cases, tol);
    std::size_t failed = 0;
    std::printf("%-24s %-12s %s\n", "case", "max_rel_err", "status");
    for (const auto& r : rows) {
        if (!r.passed) ++failed;
        if (!r.error.empty())
            std::printf("%-24s %-12s ERROR %s\n", r.name.c_str(), "-", r.error.c_str());
        else
            std::printf("%-24s %-12.3e %s\n", r.name.c_str(), r.result.max_rel_error, r.passed ? "ok" : "FAIL");
    }
    std::printf("%zu cases, %zu failed (tolerance %.0e)\n", rows.size(), failed, tol);
    if (failed) {
        std::vector<const ad::GradReportRow*> bad;
        for (const auto& r : rows)
            if (!r.passed) bad.push_back(&r);
        std::sort(bad.begin(), bad.end(), [](auto* a, auto* b) { return a->result.max_rel_error > b->result.max_rel_error; });
        std::printf("worst offenders:\n");
        for (const auto* r : bad)
            std::printf("  %-22s rel %.3e at input %zu index %zu (analytic %.6g, numeric %.6g)\n", r->name.c_str(),
                        r->result.max_rel_error, r->result.worst_input, r->result.worst_index, r->result.analytic,
                        r->result.numeric);
        return kFailure;
    }
    return kOk;
}

int exit_code_for(const Error& e) {
    const auto& k = e.kind();
    if (k == "InvalidConfig" || k == "InvalidGeometry" || k == "InvalidStride" || k == "InvalidRange" ||
        k == "NoTargetsMatched" || k == "IncompleteTable")
        return kConfig;
    if (k == "IoError" || k == "CorruptVolume" || k == "UnpairedFile") return kIo;
    if (k == "NanLoss" || k == "NonFiniteGradient" || k == "NonFiniteValue") return kNan;
    if (k == "ShapeMismatch" || k == "ImageTooSmall") return kShape;
    return kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nictkit: NICT simulation, MITNet training, adaptation, enhancement and evaluation"};
    app.require_subcommand(1);
    bool deterministic = false;
    app.add_flag("--deterministic", deterministic, "single worker everywhere");

    PhantomArgs ph;
    auto* phantom = app.add_subcommand("phantom", "write a synthetic HU volume (NICTVOL1)");
    phantom->add_option("--out", ph.out, "output .nvol")->required();
    phantom->add_option("--side", ph.side, "slice side in pixels");
    phantom->add_option("--slices", ph.slices, "slice count");
    phantom->add_option("--seed", ph.seed, "phantom seed");
    phantom->add_option("--kind", ph.kind, "random | shepp-logan");

    std::string sim_config, sim_out;
    auto* simulate = app.add_subcommand("simulate", "build NICT/ICT pairs from volumes");
    simulate->add_option("--config", sim_config, "simulate config JSON")->required();
    simulate->add_option("--out", sim_out, "override out_dir");

    RunFlags tf;
    auto* train = app.add_subcommand("train", "pre-train MITNet with the queued loop");
    train->add_option("--config", tf.config, "train config JSON")->required();
    train->add_option("--out", tf.out, "override out_dir");
    train->add_flag("--resume", tf.resume, "continue from out_dir/train_state.ckpt");

    RunFlags af;
    auto* adapt = app.add_subcommand("adapt", "LoRA adaptation of a trained checkpoint");
    adapt->add_option("--config", af.config, "adapt config JSON")->required();
    adapt->add_option("--base", af.base, "base checkpoint")->required();
    adapt->add_option("--lora-rank", af.lora_rank, "bypass rank")->required();
    adapt->add_option("--model", af.model_json, "model config (default: model.json beside --base)");
    adapt->add_option("--out", af.out, "override out_dir");
    adapt->add_flag("--split", af.split, "also write the bypasses to lora.bin");
    adapt->add_flag("--resume", af.resume, "continue from out_dir/train_state.ckpt");

    EnhanceArgs ea;
    auto* enhance = app.add_subcommand("enhance", "run a checkpoint over an image or volume");
    enhance->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required();
    enhance->add_option("--model", ea.model_json, "model config (default: model.json beside the checkpoint)");
    enhance->add_option("--input", ea.input, ".nimg, .nvol or .pair (NICT side)")->required();
    enhance->add_option("--out", ea.out, "output .nimg / .nvol")->required();
    enhance->add_option("--png", ea.png, "also export 8-bit PNG");
    enhance->add_option("--window-center", ea.center, "PNG window center (HU)");
    enhance->add_option("--window-width", ea.width, "PNG window width (HU)");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "image metrics over paired directories and reader tables");
    eval->add_option("--pred", ev.pred, "directory of predicted .nimg");
    eval->add_option("--ref", ev.ref, "directory of reference .nimg");
    eval->add_option("--reader-table", ev.reader_table, "reader study CSV");
    eval->add_option("--config", ev.config, "eval config JSON");
    eval->add_option("--out", ev.out, "report directory")->required();

    std::uint64_t gc_seed = 7;
    double gc_tol = 1e-2;
    bool gc_kernels = false;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every kernel and loss");
    gradcheck->add_option("--seed", gc_seed, "input seed");
    gradcheck->add_option("--tol", gc_tol, "max relative error");
    gradcheck->add_flag("--kernels-only", gc_kernels, "skip the loss cases");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (deterministic) set_deterministic(true);
        if (*phantom) return cmd_phantom(ph);
        if (*simulate) return cmd_simulate(sim_config, sim_out);
        if (*train) return cmd_train(tf);
        if (*adapt) return cmd_adapt(af);
        if (*enhance) return cmd_enhance(ea);
        if (*eval) return cmd_eval(ev);
        if (*gradcheck) return cmd_gradcheck(gc_seed, gc_tol, gc_kernels);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
    return kFailure;
}
