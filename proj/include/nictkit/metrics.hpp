#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/geometry.hpp"
#include "nictkit/losses.hpp"

namespace nictkit {

inline constexpr double kDataRangeHu = 4095.0;

// All image metrics take HU values.
double mse_hu(std::span<const float> pred, std::span<const float> ref);
double rmse_hu(std::span<const float> pred, std::span<const float> ref);
// +infinity when the images are identical
double psnr(std::span<const float> pred, std::span<const float> ref, double data_range_hu = kDataRangeHu);

// (1 - loss_ssim) * 100 on the normalized images
double ssim_pct(const Image& pred, const Image& ref);

// Feature-space distance over the frozen extractor (not calibrated LPIPS):
// per tapped layer, channel vectors are scaled to unit length and the squared
// distance is averaged over positions; the mean over layers lies in [0, 4]
// and is reported as a percentage of 4.
double lpips_proxy_pct(const Image& pred, const Image& ref, const FeatureExtractor& extractor);

struct MetricReport {
    double psnr_db = 0.0;
    double rmse_hu = 0.0;
    double ssim_pct = 0.0;
    double lpips_proxy_pct = 0.0;
    double data_range_hu = kDataRangeHu;
};

MetricReport evaluate_pair(const Image& pred, const Image& ref, const FeatureExtractor& extractor,
                           double data_range_hu = kDataRangeHu);

struct MetricSummary {
    MetricReport mean;              // psnr mean excludes the +inf sentinels
    std::size_t count = 0;
    std::size_t psnr_infinite = 0;  // identical pairs
};

MetricSummary summarize(const std::vector<MetricReport>& reports);

struct ReaderRow {
    std::string group_id;
    std::string reader_id;
    std::string method;
    int rank = 1;  // 1 = best image of the group
    int acceptable = 0;
    int better_than_nict = 0;
};

struct ReaderStudyTable {
    std::vector<ReaderRow> rows;
    std::map<std::string, double> weights{{"1P", 0.5}, {"2C", 0.25}, {"3C", 0.25}};
};

struct ReaderScores {
    double pbn_pct = 0.0;
    double sqr = 0.0;  // best of k methods earns k points, worst earns 1
    double pca_pct = 0.0;
};

// CSV with header group_id,reader_id,method,rank,acceptable,better_than_nict
ReaderStudyTable parse_reader_csv(const std::string& text, const std::string& source = "<memory>");
ReaderStudyTable read_reader_csv(const std::filesystem::path& path);

// Weighted over readers of per-reader means across groups. Throws
// IncompleteTable naming the first missing (group, reader, method).
std::map<std::string, ReaderScores> reader_metrics(const ReaderStudyTable& table);

}  // namespace nictkit
