// One line per acceptance criterion. Exit status is nonzero if any fails.
// Optional arguments select criteria by number: nictkit_acceptance 1 5 11
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "nictkit/adan.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/error.hpp"
#include "nictkit/geometry.hpp"
#include "nictkit/gradcheck.hpp"
#include "nictkit/lora.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/metrics.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/nict_sim.hpp"
#include "nictkit/ops.hpp"
#include "nictkit/phantom.hpp"
#include "nictkit/queue.hpp"
#include "nictkit/train.hpp"
#include "oracles.hpp"

using namespace nictkit;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a.values()[i] - b.values()[i])));
    return m;
}

Tensor noise_image(std::size_t side, std::uint64_t seed) {
    return Tensor::from({1, 1, side, side}, oracle::random_vector(side * side, seed, 0.0f, 1.0f));
}

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / "nictkit_acceptance" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Outcome adjointness() {
    const auto geom = default_geometry(64, 180);
    double worst = 0;
    for (std::uint64_t t = 0; t < 20; ++t) {
        Image x(64, 64);
        x.values = oracle::random_vector(64 * 64, 100 + t);
        Sinogram y(geom);
        y.values = oracle::random_vector(y.values.size(), 200 + t);
        const double lhs = oracle::dot(forward_project(x, geom).values, y.values);
        const double rhs = oracle::dot(x.values, back_project(y, 64).values);
        worst = std::max(worst, std::abs(lhs - rhs) / std::abs(lhs));
    }
    return {worst < 1e-4, fmt("max rel %.3g (limit 1e-4)", worst)};
}

Outcome fbp_fidelity() {
    const auto sl = shepp_logan(128);
    const auto rec = fbp(forward_project(sl, default_geometry(128, 360)), FilterWindow::RamLak, 128);
    const double p = oracle::psnr(rec.values, sl.values, 1.0);
    return {p >= 30.0, fmt("PSNR %.2f dB (need >= 30)", p)};
}

Outcome degradation_order() {
    bool ok = true;
    std::string d;
    for (auto kind : kAllKinds) {
        double mean[3] = {0, 0, 0};
        const DefectDegree degrees[3] = {DefectDegree::Low, DefectDegree::Mid, DefectDegree::High};
        for (int g = 0; g < 3; ++g) {
            for (int i = 0; i < 5; ++i) {
                const auto p = simulate_nict(random_phantom(64, 40 + i), defect_preset(kind, degrees[g]), 900 + i);
                mean[g] += oracle::psnr(p.nict.values, p.ict.values, 4095.0) / 5;
            }
        }
        ok = ok && mean[0] > mean[1] && mean[1] > mean[2];
        d += fmt("%s %.1f/%.1f/%.1f ", to_string(kind).c_str(), mean[0], mean[1], mean[2]);
    }
    return {ok, d + "dB (low/mid/high)"};
}

Outcome gradient_suite() {
    auto cases = ad::kernel_grad_cases();
    for (auto& c : loss_grad_cases()) cases.push_back(std::move(c));
    const auto rows = ad::run_grad_cases(cases);
    double worst = 0;
    std::size_t failed = 0;
    std::string names;
    for (const auto& r : rows) {
        if (!r.passed) {
            ++failed;
            names += " " + r.name;
        }
        if (r.error.empty()) worst = std::max(worst, r.result.max_rel_error);
    }
    return {failed == 0, fmt("%zu cases, %zu failed, max rel %.3g (limit 1e-2)", rows.size(), failed, worst) + names};
}

Outcome loss_weights() {
    const double total = weighted_total(DdelWeights{}, 1.0, 1.0, 1.0, 1.0);
    return {std::abs(total - 1.0056) <= 1e-9, fmt("total %.12f (expect 1.0056)", total)};
}

Outcome lora_contracts() {
    const auto cfg = mitnet_tiny();
    const auto base = init_mitnet(cfg, 21);
    const std::string before = encode_checkpoint(base);
    auto m = attach_lora(base, LoraConfig{}, 22);

    double fresh = 0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto x = noise_image(64, 30 + s);
        fresh = std::max(fresh, max_abs_diff(lora_forward(m, cfg, x), mitnet_forward(base, cfg, x)));
    }

    auto trainable = m.trainable();
    AdanState st;
    AdanHyper h;
    h.lr = 1e-2;
    const auto x = noise_image(64, 40), t = noise_image(64, 41);
    for (int k = 0; k < 10; ++k) {
        for (auto& [n, p] : trainable) p.zero_grad();
        ad::backward(loss_mse_image(lora_forward(m, cfg, x), t));
        adan_step(trainable, st, h);
    }
    const auto merged = merge_lora(m);
    double merge = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = noise_image(64, 50 + s);
        merge = std::max(merge, max_abs_diff(mitnet_forward(merged, cfg, in), lora_forward(m, cfg, in)));
    }
    const bool same = encode_checkpoint(base) == before && encode_checkpoint(m.base()) == before;
    const double frac = double(m.trainable_count()) / double(mitnet_param_count(cfg));
    return {fresh <= 1e-6 && merge <= 1e-5 && same && frac < 0.10,
            fmt("fresh %.2g, merge %.2g, base %s, rank-4 fraction %.2f%%", fresh, merge,
                same ? "byte-identical" : "CHANGED", 100 * frac)};
}

Outcome queue_invariants() {
    std::vector<QueueVolume> corpus;
    for (std::size_t i = 0; i < 12; ++i) corpus.push_back({"v" + std::to_string(i), kAllKinds[i % 3], 3});
    VolumeQueue q(corpus, 5, 7);
    std::size_t oversize = 0, missing = 0, reloads = 0, epochs = 0, max_size = 0;
    for (int r = 0; r < 1000; ++r) {
        try {
            q.refill();
        } catch (const CorpusExhausted&) {
            for (auto v : q.epoch_loads()) reloads += v != 1;
            ++epochs;
            q.start_epoch();
        }
        max_size = std::max(max_size, q.resident().size());
        oversize += q.resident().size() > 5;
        std::set<NictKind> kinds;
        for (auto v : q.resident()) kinds.insert(corpus[v].kind);
        missing += kinds.size() != 3;
        for (auto v : q.epoch_loads()) reloads += v > 1;
    }
    return {oversize == 0 && missing == 0 && reloads == 0 && epochs > 0,
            fmt("max size %zu, kind gaps %zu, bad load counts %zu over %zu epochs", max_size, missing, reloads,
                epochs)};
}

Outcome optimizer() {
    const auto target = oracle::random_vector(10, 2, -0.5f, 0.5f);
    ad::ParamTable t;
    t.emplace("w", Tensor::from({10}, std::vector<float>(10, 0.0f), true));
    AdanState st;
    AdanHyper h;
    h.lr = 5e-4;
    int reached = -1;
    for (int k = 1; k <= 5000 && reached < 0; ++k) {
        auto& w = t.at("w");
        w.zero_grad();
        const auto diff = ad::sub(w, Tensor::from({10}, target));
        ad::backward(ad::sum(ad::mul(diff, diff)));
        adan_step(t, st, h);
        double s = 0;
        for (std::size_t i = 0; i < 10; ++i) s += std::pow(double(w.values()[i]) - target[i], 2);
        if (std::sqrt(s) < 1e-3) reached = k;
    }

    ad::ParamTable z;
    const auto start = oracle::random_vector(10, 3);
    z.emplace("w", Tensor::from({10}, start, true));
    AdanState zs;
    for (int k = 0; k < 100; ++k) {
        auto& w = z.at("w");
        w.zero_grad();
        ad::backward(ad::scale(ad::sum(w), 0.0f));
        adan_step(z, zs, h);
    }
    const auto v = z.at("w").values();
    const bool fixed = std::equal(v.begin(), v.end(), start.begin());
    return {reached > 0 && fixed,
            (reached > 0 ? fmt("converged at step %d", reached) : std::string("no convergence in 5000 steps")) +
                (fixed ? ", zero-grad fixed point holds" : ", zero-grad step moved weights")};
}

Outcome reader_metrics_case() {
    ReaderStudyTable split;
    for (const char* r : {"1P", "2C", "3C"}) {
        split.rows.push_back({"g1", r, "tamp", 1, 1, std::string(r) == "1P" ? 1 : 0});
        split.rows.push_back({"g1", r, "nict", 2, 0, 0});
    }
    ReaderStudyTable unanimous;
    for (const char* g : {"g1", "g2"})
        for (const char* r : {"1P", "2C", "3C"}) {
            unanimous.rows.push_back({g, r, "a", 1, 1, 1});
            unanimous.rows.push_back({g, r, "b", 2, 1, 0});
            unanimous.rows.push_back({g, r, "c", 3, 0, 0});
        }
    const double pbn = reader_metrics(split).at("tamp").pbn_pct;
    const double sqr = reader_metrics(unanimous).at("a").sqr;
    return {pbn == 50.0 && sqr == 3.0, fmt("PBN %.6g%% (expect 50), SQR %.6g (expect 3)", pbn, sqr)};
}

// Shared by the learning smoke and the determinism check.
struct SmokeRun {
    std::vector<TrainSlice> slices;
    std::vector<TrainVolume> corpus;
    TrainConfig config;
};

SmokeRun smoke_setup() {
    SmokeRun s;
    for (int i = 0; i < 8; ++i)
        s.slices.push_back(to_train_slice(
            simulate_nict(random_phantom(64, 100 + i), defect_preset(NictKind::LowDose, DefectDegree::Mid), 500 + i)));
    s.corpus = {memory_volume("a", NictKind::LowDose, {s.slices.begin(), s.slices.begin() + 4}),
                memory_volume("b", NictKind::LowDose, {s.slices.begin() + 4, s.slices.end()})};
    s.config.steps = 200;
    s.config.seed = 5;
    return s;
}

fs::path first_run_dir;

Outcome learning_smoke() {
    auto s = smoke_setup();
    const auto cfg = mitnet_tiny();
    auto params = init_mitnet(cfg, 7);
    const std::size_t count = mitnet_param_count(cfg);
    first_run_dir = scratch("run_a");
    const TrainOutput out{first_run_dir, false};
    const double input = mean_input_psnr(s.slices);
    train_loop(s.config, cfg, params, s.corpus, s.slices, &out);
    const double trained = mean_psnr(TableLayers(params), cfg, s.slices);

    std::vector<TrainSlice> adapt;
    for (int i = 0; i < 5; ++i)
        adapt.push_back(to_train_slice(simulate_nict(random_phantom(64, 200 + i),
                                                     defect_preset(NictKind::SparseView, DefectDegree::Mid), 600 + i)));
    for (auto& [n, p] : params) p.set_requires_grad(false);
    const double base = mean_psnr(TableLayers(params), cfg, adapt);
    TrainConfig ac = s.config;
    ac.steps = 60;
    const auto res = adapt_loop(ac, cfg, params, LoraConfig{}, {memory_volume("s", NictKind::SparseView, adapt)}, adapt);
    const double adapted = mean_psnr(TableLayers(res.merged), cfg, adapt);

    const double gain = trained - input;
    return {count < 1'000'000 && gain >= 3.0 && adapted > base,
            fmt("%zu params; train-set gain %+.2f dB over input (%.2f -> %.2f, need >= 3); adaptation %.2f -> %.2f dB",
                count, gain, input, trained, base, adapted)};
}

Outcome determinism() {
    if (first_run_dir.empty() || !fs::exists(first_run_dir / "model.ckpt")) {
        auto s = smoke_setup();
        auto params = init_mitnet(mitnet_tiny(), 7);
        first_run_dir = scratch("run_a");
        const TrainOutput out{first_run_dir, false};
        train_loop(s.config, mitnet_tiny(), params, s.corpus, s.slices, &out);
    }
    auto s = smoke_setup();
    auto params = init_mitnet(mitnet_tiny(), 7);
    const auto dir = scratch("run_b");
    const TrainOutput out{dir, false};
    train_loop(s.config, mitnet_tiny(), params, s.corpus, s.slices, &out);
    std::string d;
    bool ok = true;
    for (const char* f : {"model.ckpt", "train_state.ckpt", "train_log.csv"}) {
        const auto a = read_bytes(first_run_dir / f), b = read_bytes(dir / f);
        const bool same = !a.empty() && a == b;
        ok = ok && same;
        d += fmt("%s %s (%zu bytes) ", f, same ? "identical" : "DIFFERS", a.size());
    }
    return {ok, d};
}

struct Criterion {
    int id;
    const char* name;
    double seconds;  // 0: no limit
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "projector adjointness", 10, adjointness},
        {2, "FBP fidelity", 5, fbp_fidelity},
        {3, "degradation ordering", 60, degradation_order},
        {4, "gradient suite", 120, gradient_suite},
        {5, "loss-weight regression", 0, loss_weights},
        {6, "LoRA contracts", 0, lora_contracts},
        {7, "queue invariants", 0, queue_invariants},
        {8, "Adan optimizer", 0, optimizer},
        {9, "learning smoke", 600, learning_smoke},
        {10, "determinism", 0, determinism},
        {11, "reader metrics", 0, reader_metrics_case},
    };
    std::set<int> pick;
    for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!pick.empty() && !pick.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool pass = o.pass;
        std::string limit;
        if (c.seconds > 0) {
            limit = fmt(" < %.0f s", c.seconds);
            if (secs >= c.seconds) {
                pass = false;
                o.detail += "; over time";
            }
        }
        std::printf("[%s] %2d. %s: %s (%.1f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                    limit.c_str());
        std::fflush(stdout);
        failed += !pass;
    }
    std::printf("%d failed\n", failed);
    return failed == 0 ? 0 : 1;
}
