#include "nictkit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "nictkit/binary_io.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/error.hpp"
#include "nictkit/image_io.hpp"

namespace nictkit {

namespace fs = std::filesystem;

ModelBundle load_model(const fs::path& checkpoint, const fs::path& config_path) {
    const fs::path cfg = config_path.empty() ? checkpoint.parent_path() / "model.json" : config_path;
    if (!fs::exists(cfg)) throw IoError("model config not found: " + cfg.string());
    ModelBundle b;
    try {
        b.config = MitnetConfig::from_json(nlohmann::json::parse(read_file(cfg)));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(cfg.string() + ": " + e.what());
    }
    b.params = load_checkpoint(checkpoint);
    const auto shapes = mitnet_param_shapes(b.config);
    for (const auto& [name, shape] : shapes) {
        const auto it = b.params.find(name);
        if (it == b.params.end()) throw ShapeMismatch(checkpoint.string() + ": missing tensor '" + name + "'");
        if (it->second.shape() != shape)
            throw ShapeMismatch(checkpoint.string() + ": '" + name + "' is " + ad::to_string(it->second.shape()) +
                                ", model expects " + ad::to_string(shape));
    }
    if (b.params.size() != shapes.size())
        throw ShapeMismatch(checkpoint.string() + ": checkpoint holds tensors the model does not use");
    return b;
}

Image enhance_image(const LayerSource& model, const MitnetConfig& config, const Image& hu) {
    if (!hu.square()) throw ShapeMismatch("enhance expects a square image, got " + std::to_string(hu.height) + "x" +
                                          std::to_string(hu.width));
    try {
        config.validate_input(hu.width);
    } catch (const InvalidConfig& e) {
        throw ShapeMismatch(e.what());
    }
    std::vector<float> v(hu.size());
    std::transform(hu.values.begin(), hu.values.end(), v.begin(), normalize_hu);
    ad::NoGradGuard guard;
    const ad::Tensor y = mitnet_forward(model, config, ad::Tensor::from({1, 1, hu.height, hu.width}, std::move(v)));
    Image out(hu.height, hu.width);
    std::transform(y.values().begin(), y.values().end(), out.values.begin(), denormalize_hu);
    return out;
}

Image enhance_image(const ModelBundle& model, const Image& hu) {
    return enhance_image(TableLayers(model.params), model.config, hu);
}

std::vector<TrainVolume> limit_slices(std::vector<TrainVolume> corpus, std::size_t max_slices) {
    if (max_slices == 0) return corpus;
    std::vector<TrainVolume> out;
    std::size_t left = max_slices;
    for (auto& v : corpus) {
        if (left == 0) break;
        if (v.num_slices > left) {
            v.load = [load = v.load, left] {
                auto s = load();
                s.resize(std::min(s.size(), left));
                return s;
            };
            v.num_slices = left;
        }
        left -= v.num_slices;
        out.push_back(std::move(v));
    }
    return out;
}

namespace {

std::set<std::string> image_names(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".nimg") names.insert(e.path().filename().string());
    return names;
}

std::string number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

nlohmann::json number_json(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

nlohmann::json report_json(const MetricReport& r) {
    return {{"psnr_db", number_json(r.psnr_db)},
            {"rmse_hu", r.rmse_hu},
            {"ssim_pct", r.ssim_pct},
            {"lpips_proxy_pct", r.lpips_proxy_pct},
            {"data_range_hu", r.data_range_hu}};
}

}  // namespace

EvalResult evaluate_dirs(const fs::path& pred_dir, const fs::path& ref_dir, const FeatureExtractor& extractor,
                         double data_range_hu) {
    const auto pred = image_names(pred_dir), ref = image_names(ref_dir);
    std::vector<std::string> orphans;
    for (const auto& n : pred)
        if (!ref.count(n)) orphans.push_back("pred/" + n);
    for (const auto& n : ref)
        if (!pred.count(n)) orphans.push_back("ref/" + n);
    if (!orphans.empty()) {
        std::string list;
        for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
        throw UnpairedFile("unpaired files: " + list);
    }
    if (pred.empty()) throw IoError("no .nimg files in " + pred_dir.string());
    EvalResult r;
    std::vector<MetricReport> reports;
    for (const auto& n : pred) {
        const Image p = load_image(pred_dir / n), q = load_image(ref_dir / n);
        r.rows.push_back({n, evaluate_pair(p, q, extractor, data_range_hu)});
        reports.push_back(r.rows.back().report);
    }
    r.summary = summarize(reports);
    return r;
}

std::string eval_csv(const EvalResult& result) {
    std::string s = "name,psnr_db,rmse_hu,ssim_pct,lpips_proxy_pct\n";
    auto row = [&](const std::string& name, const MetricReport& m) {
        s += name + "," + number(m.psnr_db) + "," + number(m.rmse_hu) + "," + number(m.ssim_pct) + "," +
             number(m.lpips_proxy_pct) + "\n";
    };
    for (const auto& r : result.rows) row(r.name, r.report);
    row("mean", result.summary.mean);
    return s;
}

nlohmann::json eval_json(const EvalResult& result) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : result.rows) {
        auto j = report_json(r.report);
        j["name"] = r.name;
        rows.push_back(j);
    }
    return {{"rows", rows},
            {"mean", report_json(result.summary.mean)},
            {"count", result.summary.count},
            {"psnr_infinite_count", result.summary.psnr_infinite},
            {"note", "lpips_proxy_pct is a feature-distance proxy over a seeded extractor, not calibrated LPIPS; "
                     "mean psnr_db excludes identical pairs (psnr_infinite_count)"}};
}

std::string reader_csv(const std::map<std::string, ReaderScores>& scores) {
    std::string s = "method,pbn_pct,sqr,pca_pct\n";
    for (const auto& [m, v] : scores) s += m + "," + number(v.pbn_pct) + "," + number(v.sqr) + "," + number(v.pca_pct) + "\n";
    return s;
}

nlohmann::json reader_json(const std::map<std::string, ReaderScores>& scores) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [m, v] : scores) j[m] = {{"pbn_pct", v.pbn_pct}, {"sqr", v.sqr}, {"pca_pct", v.pca_pct}};
    return {{"methods", j},
            {"note", "PBN/SQR/PCA are reconstructed from prose descriptions; SQR gives k points to the best of k "
                     "images and 1 to the worst"}};
}

}  // namespace nictkit
