#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/mitnet.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

struct LoraConfig {
    std::size_t rank = 4;
    double alpha = 0.0;  // 0 means alpha = rank
    std::vector<std::string> target_patterns{"*"};
    double dropout = 0.0;

    double effective_alpha() const { return alpha > 0.0 ? alpha : static_cast<double>(rank); }
    void validate() const;
    static LoraConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct LoraBypass {
    ad::Tensor a;  // [r, in] or [r, in, kh, kw]
    ad::Tensor b;  // [out, r] or [out, r, 1, 1]
    bool conv = false;
};

// Frozen base table plus trainable low-rank bypasses. Acts as the layer
// source for mitnet_forward.
class LoraModel : public LayerSource {
public:
    LoraModel(ad::ParamTable base, std::map<std::string, LoraBypass> bypasses, double scale, double dropout,
              std::uint64_t seed);

    const ad::Tensor& param(const std::string& name) const override;
    ad::Tensor linear(const std::string& prefix, const ad::Tensor& x) const override;
    ad::Tensor conv(const std::string& prefix, const ad::Tensor& x) const override;

    const ad::ParamTable& base() const { return base_; }
    const std::map<std::string, LoraBypass>& bypasses() const { return bypasses_; }
    double scale() const { return scale_; }
    void set_scale(double s) { scale_ = s; }
    // Dropout on the bypass input is active only while training.
    void set_training(bool on) { training_ = on; }
    void reseed_dropout(std::uint64_t seed) { rng_ = Rng(seed); }

    // {target}.lora_a / {target}.lora_b, sharing storage with the model
    ad::ParamTable trainable() const;
    std::size_t trainable_count() const;

private:
    ad::Tensor bypass_input(const ad::Tensor& x) const;

    ad::ParamTable base_;
    std::map<std::string, LoraBypass> bypasses_;
    double scale_;
    double dropout_;
    bool training_ = false;
    mutable Rng rng_;
};

// Weight tensors eligible for adaptation: linear [out, in] and conv
// [out, in, kh, kw] weights matched by the config patterns.
std::vector<std::string> lora_targets(const ad::ParamTable& params, const LoraConfig& config);

LoraModel attach_lora(const ad::ParamTable& params, const LoraConfig& config, std::uint64_t seed);
ad::Tensor lora_forward(const LoraModel& model, const MitnetConfig& config, const ad::Tensor& image);
// W' = W + (alpha / r) * B * A, conv kernels matricized as out x (in*kh*kw).
ad::ParamTable merge_lora(const LoraModel& model);

// Split form: "NICTLORA", u64 base hash, f32 scale, then a NICTCKPT table of
// the bypass tensors.
void save_lora(const std::filesystem::path& path, const LoraModel& model);
LoraModel load_lora(const std::filesystem::path& path, const ad::ParamTable& base);

}  // namespace nictkit
