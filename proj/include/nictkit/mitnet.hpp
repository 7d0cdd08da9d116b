#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/tensor.hpp"

namespace nictkit {

struct MitnetConfig {
    std::size_t levels = 3;
    std::vector<std::size_t> patch_sizes{2, 4, 8};
    std::vector<std::size_t> embed_dims{32, 48, 64};
    std::size_t depths = 2;
    std::size_t window_size = 8;
    std::vector<std::size_t> num_heads{2, 3, 4};
    double mlp_ratio = 2.0;
    bool global_residual = false;

    void validate() const;
    // InvalidConfig unless side is divisible by every patch_size * window_size.
    void validate_input(std::size_t side) const;
    std::size_t hidden_dim(std::size_t level) const;
    // Cyclic shift used by Swin layer `layer` on a token grid of side `grid`.
    std::size_t shift_for(std::size_t layer, std::size_t grid) const;

    static MitnetConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    bool operator==(const MitnetConfig&) const = default;
};

// Small model for tests and desk-scale runs.
MitnetConfig mitnet_tiny();

std::map<std::string, ad::Shape> mitnet_param_shapes(const MitnetConfig& config);
std::size_t mitnet_param_count(const MitnetConfig& config);
ad::ParamTable init_mitnet(const MitnetConfig& config, std::uint64_t seed);

// Where the network gets its weighted layers from. The plain source reads a
// parameter table; the LoRA source adds low-rank bypasses.
class LayerSource {
public:
    virtual ~LayerSource() = default;
    virtual const ad::Tensor& param(const std::string& name) const = 0;
    // x[..., in] through `prefix`.weight / `prefix`.bias
    virtual ad::Tensor linear(const std::string& prefix, const ad::Tensor& x) const;
    // 3x3 (or any odd) conv, stride 1, same padding
    virtual ad::Tensor conv(const std::string& prefix, const ad::Tensor& x) const;
};

class TableLayers : public LayerSource {
public:
    explicit TableLayers(const ad::ParamTable& table) : table_(table) {}
    const ad::Tensor& param(const std::string& name) const override;

private:
    const ad::ParamTable& table_;
};

// Per-layer attention probabilities [B*nW, heads, N, N], filled on request.
struct AttentionTrace {
    std::vector<ad::Tensor> probs;
};

// [B, 1, S, S] -> per level [B, S/p, S/p, C], finest level first.
std::vector<ad::Tensor> pyramid_embed(const LayerSource& layers, const ad::Tensor& image, const MitnetConfig& config);

// Swin layers of one level over tokens [B, h, w, C].
ad::Tensor dfet_block(const LayerSource& layers, std::size_t level, const ad::Tensor& tokens,
                      const MitnetConfig& config, AttentionTrace* trace = nullptr);

// Token maps ordered coarse to fine -> [B, C0, h0, w0].
ad::Tensor progressive_fuse(const LayerSource& layers, const std::vector<ad::Tensor>& coarse_to_fine,
                            const MitnetConfig& config);

// Normalized [B, 1, S, S] in, same shape out.
ad::Tensor mitnet_forward(const LayerSource& layers, const MitnetConfig& config, const ad::Tensor& image);
ad::Tensor mitnet_forward(const ad::ParamTable& params, const MitnetConfig& config, const ad::Tensor& image);

// Additive attention mask [nW, N, N]: 0 within a region, -1e4 across regions
// of the rolled grid.
ad::Tensor shifted_window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift);
// Index into the (2w-1)^2 relative-position table for each (query, key).
std::vector<std::uint32_t> relative_position_index(std::size_t window);

// HU window [-1024, 3071] <-> [0, 1]
float normalize_hu(float hu);
float denormalize_hu(float v);

}  // namespace nictkit
