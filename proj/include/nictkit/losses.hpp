#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/geometry.hpp"
#include "nictkit/gradcheck.hpp"
#include "nictkit/tensor.hpp"

namespace nictkit {

struct DdelWeights {
    double w1 = 1.0;
    double w2 = 5e-3;
    double w3 = 1e-4;
    double w4 = 5e-4;

    void validate() const;
    static DdelWeights from_json(const nlohmann::json& j);
    nlohmann::json to_json() const { return {w1, w2, w3, w4}; }
};

struct LossBreakdown {
    double l_mse_img = 0.0;
    double l_ssim = 0.0;
    double l_perc = 0.0;
    double l_mse_proj = 0.0;
    double total = 0.0;
};

double weighted_total(const DdelWeights& w, double l_mse_img, double l_ssim, double l_perc, double l_mse_proj);
LossBreakdown combine(const DdelWeights& w, double l_mse_img, double l_ssim, double l_perc, double l_mse_proj);

// Frozen conv feature pyramid. The default is four seeded random 3x3 conv
// layers with GELU; real weights can be loaded from a checkpoint table using
// the names extractor.conv{i}.weight / .bias.
class FeatureExtractor {
public:
    enum class Activation { Gelu, Relu };

    static FeatureExtractor seeded(std::uint64_t seed = 1234, std::vector<std::size_t> taps = {0, 1, 2, 3});
    static FeatureExtractor from_table(const ad::ParamTable& table, std::vector<std::size_t> strides,
                                       std::vector<std::size_t> taps, Activation activation = Activation::Relu);

    // Activations of the tapped layers for x [B, 1, H, W].
    std::vector<ad::Tensor> features(const ad::Tensor& x) const;
    const std::vector<std::size_t>& taps() const { return taps_; }
    std::size_t depth() const { return weights_.size(); }

private:
    std::vector<ad::Tensor> weights_;
    std::vector<ad::Tensor> biases_;
    std::vector<std::size_t> strides_;
    std::vector<std::size_t> taps_;
    Activation activation_ = Activation::Relu;
};

// All losses take normalized images [B, 1, H, W] and return scalars.
ad::Tensor loss_mse_image(const ad::Tensor& pred, const ad::Tensor& target);
// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 0.01,
// K2 0.03, data range 1).
ad::Tensor ssim_mean(const ad::Tensor& a, const ad::Tensor& b);
ad::Tensor loss_ssim(const ad::Tensor& pred, const ad::Tensor& target);
ad::Tensor loss_perceptual(const ad::Tensor& pred, const ad::Tensor& target, const FeatureExtractor& extractor);
ad::Tensor loss_mse_projection(const ad::Tensor& pred, const ad::Tensor& target, const ProjectionGeometry& geom);

// 90 views over 180 degrees with the default detector count for `side`.
ProjectionGeometry projection_loss_geometry(std::size_t side, std::size_t views = 90);

struct DdelTerms {
    ad::Tensor l_mse_img, l_ssim, l_perc, l_mse_proj, total;
    LossBreakdown breakdown;
};

DdelTerms loss_total(const ad::Tensor& pred, const ad::Tensor& target, const ProjectionGeometry& geom,
                     const DdelWeights& weights, const FeatureExtractor& extractor);

std::vector<ad::GradCase> loss_grad_cases(std::uint64_t seed = 11);

}  // namespace nictkit
