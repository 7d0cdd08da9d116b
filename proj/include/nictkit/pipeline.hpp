#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/metrics.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/train.hpp"

namespace nictkit {

// Checkpoint plus the model.json written beside it.
struct ModelBundle {
    MitnetConfig config;
    ad::ParamTable params;
};

ModelBundle load_model(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& config_path = {});

// HU in, HU out. Throws ShapeMismatch when the side does not suit the model.
Image enhance_image(const LayerSource& model, const MitnetConfig& config, const Image& hu);
Image enhance_image(const ModelBundle& model, const Image& hu);

// Keeps the first `max_slices` slices across the corpus in order (0 keeps all).
std::vector<TrainVolume> limit_slices(std::vector<TrainVolume> corpus, std::size_t max_slices);

struct EvalRow {
    std::string name;
    MetricReport report;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    MetricSummary summary;
};

// Pairs NICTIMG files by name; throws UnpairedFile listing every orphan.
EvalResult evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                         const FeatureExtractor& extractor, double data_range_hu = kDataRangeHu);

std::string eval_csv(const EvalResult& result);
nlohmann::json eval_json(const EvalResult& result);

std::string reader_csv(const std::map<std::string, ReaderScores>& scores);
nlohmann::json reader_json(const std::map<std::string, ReaderScores>& scores);

}  // namespace nictkit
