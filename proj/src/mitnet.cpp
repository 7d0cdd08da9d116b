#include "nictkit/mitnet.hpp"

#include <cmath>

#include "nictkit/error.hpp"
#include "nictkit/geometry.hpp"
#include "nictkit/json_fields.hpp"
#include "nictkit/ops.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

using ad::Shape;
using ad::Tensor;

namespace {

std::string lvl(std::size_t i) { return "level" + std::to_string(i); }
std::string blk(std::size_t i, std::size_t j) { return lvl(i) + ".block" + std::to_string(j); }

bool is_pow2(std::size_t v) { return v && !(v & (v - 1)); }

}  // namespace

void MitnetConfig::validate() const {
    if (levels < 1) throw InvalidConfig("mitnet: levels must be >= 1");
    if (patch_sizes.size() != levels) throw InvalidConfig("mitnet: len(patch_sizes) != levels");
    if (embed_dims.size() != levels) throw InvalidConfig("mitnet: len(embed_dims) != levels");
    if (num_heads.size() != levels) throw InvalidConfig("mitnet: len(num_heads) != levels");
    if (depths < 1) throw InvalidConfig("mitnet: depths must be >= 1");
    if (window_size < 1) throw InvalidConfig("mitnet: window_size must be >= 1");
    if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) throw InvalidConfig("mitnet: mlp_ratio must be > 0");
    for (std::size_t i = 0; i < levels; ++i) {
        if (patch_sizes[i] < 1) throw InvalidConfig("mitnet: patch sizes must be >= 1");
        if (i > 0 && patch_sizes[i] <= patch_sizes[i - 1])
            throw InvalidConfig("mitnet: patch_sizes must be strictly increasing");
        if (i > 0 && (patch_sizes[i] % patch_sizes[i - 1] || !is_pow2(patch_sizes[i] / patch_sizes[i - 1])))
            throw InvalidConfig("mitnet: consecutive patch sizes must differ by a power of two");
        if (embed_dims[i] < 1 || num_heads[i] < 1 || embed_dims[i] % num_heads[i])
            throw InvalidConfig("mitnet: embed_dims[" + std::to_string(i) + "] not divisible by num_heads");
    }
}

void MitnetConfig::validate_input(std::size_t side) const {
    validate();
    for (std::size_t i = 0; i < levels; ++i)
        if (side == 0 || side % (patch_sizes[i] * window_size))
            throw InvalidConfig("mitnet: input side " + std::to_string(side) + " not divisible by patch " +
                                std::to_string(patch_sizes[i]) + " x window " + std::to_string(window_size));
}

std::size_t MitnetConfig::hidden_dim(std::size_t level) const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(embed_dims[level]) * mlp_ratio));
}

std::size_t MitnetConfig::shift_for(std::size_t layer, std::size_t grid) const {
    if (layer % 2 == 0 || grid <= window_size) return 0;
    return window_size / 2;
}

MitnetConfig MitnetConfig::from_json(const nlohmann::json& j) {
    JsonFields f(j, "model");
    MitnetConfig c;
    c.levels = f.get("levels", c.levels);
    c.patch_sizes = f.get("patch_sizes", c.patch_sizes);
    c.embed_dims = f.get("embed_dims", c.embed_dims);
    c.depths = f.get("depths", c.depths);
    c.window_size = f.get("window_size", c.window_size);
    c.num_heads = f.get("num_heads", c.num_heads);
    c.mlp_ratio = f.get("mlp_ratio", c.mlp_ratio);
    c.global_residual = f.get("global_residual", c.global_residual);
    f.finish();
    c.validate();
    return c;
}

nlohmann::json MitnetConfig::to_json() const {
    return {{"levels", levels},       {"patch_sizes", patch_sizes}, {"embed_dims", embed_dims},
            {"depths", depths},       {"window_size", window_size}, {"num_heads", num_heads},
            {"mlp_ratio", mlp_ratio}, {"global_residual", global_residual}};
}

MitnetConfig mitnet_tiny() {
    MitnetConfig c;
    c.levels = 2;
    c.patch_sizes = {2, 8};
    c.embed_dims = {16, 96};
    c.depths = 1;
    c.window_size = 8;
    c.num_heads = {2, 4};
    c.mlp_ratio = 2.0;
    c.global_residual = true;
    return c;
}

std::map<std::string, Shape> mitnet_param_shapes(const MitnetConfig& config) {
    config.validate();
    std::map<std::string, Shape> s;
    const std::size_t ws = config.window_size;
    for (std::size_t i = 0; i < config.levels; ++i) {
        const std::size_t C = config.embed_dims[i];
        const std::size_t p = config.patch_sizes[i];
        const std::size_t H = config.hidden_dim(i);
        s[lvl(i) + ".embed.weight"] = {C, p * p};
        s[lvl(i) + ".embed.bias"] = {C};
        for (std::size_t j = 0; j < config.depths; ++j) {
            const std::string b = blk(i, j);
            s[b + ".norm1.weight"] = {C};
            s[b + ".norm1.bias"] = {C};
            s[b + ".attn.qkv.weight"] = {3 * C, C};
            s[b + ".attn.qkv.bias"] = {3 * C};
            s[b + ".attn.proj.weight"] = {C, C};
            s[b + ".attn.proj.bias"] = {C};
            s[b + ".attn.rel_bias"] = {(2 * ws - 1) * (2 * ws - 1), config.num_heads[i]};
            s[b + ".norm2.weight"] = {C};
            s[b + ".norm2.bias"] = {C};
            s[b + ".mlp.fc1.weight"] = {H, C};
            s[b + ".mlp.fc1.bias"] = {H};
            s[b + ".mlp.fc2.weight"] = {C, H};
            s[b + ".mlp.fc2.bias"] = {C};
        }
        const std::size_t in = i + 1 < config.levels ? C + config.embed_dims[i + 1] : C;
        s[lvl(i) + ".fuse.weight"] = {C, in, 3, 3};
        s[lvl(i) + ".fuse.bias"] = {C};
    }
    const std::size_t C0 = config.embed_dims[0];
    const std::size_t p0 = config.patch_sizes[0];
    s["head.unembed.weight"] = {p0 * p0 * C0, C0};
    s["head.unembed.bias"] = {p0 * p0 * C0};
    s["head.conv1.weight"] = {C0, C0, 3, 3};
    s["head.conv1.bias"] = {C0};
    s["head.conv2.weight"] = {1, C0, 3, 3};
    s["head.conv2.bias"] = {1};
    return s;
}

std::size_t mitnet_param_count(const MitnetConfig& config) {
    std::size_t n = 0;
    for (const auto& [name, shape] : mitnet_param_shapes(config)) n += ad::numel(shape);
    return n;
}

ad::ParamTable init_mitnet(const MitnetConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    ad::ParamTable table;
    for (const auto& [name, shape] : mitnet_param_shapes(config)) {
        std::vector<float> v(ad::numel(shape), 0.0f);
        const bool norm = name.find(".norm") != std::string::npos;
        if (norm) {
            if (name.ends_with(".weight")) std::fill(v.begin(), v.end(), 1.0f);
        } else if (name.ends_with(".weight") || name.ends_with(".rel_bias")) {
            for (auto& x : v) x = static_cast<float>(rng.truncated_normal(0.02));
        }
        table.emplace(name, Tensor::from(shape, std::move(v), true));
    }
    return table;
}

Tensor LayerSource::linear(const std::string& prefix, const Tensor& x) const {
    return ad::linear(x, param(prefix + ".weight"), param(prefix + ".bias"));
}

Tensor LayerSource::conv(const std::string& prefix, const Tensor& x) const {
    const Tensor& w = param(prefix + ".weight");
    return ad::conv2d(x, w, param(prefix + ".bias"), 1, w.dim(2) / 2);
}

const Tensor& TableLayers::param(const std::string& name) const {
    auto it = table_.find(name);
    if (it == table_.end()) throw InvalidConfig("missing parameter '" + name + "'");
    return it->second;
}

std::vector<std::uint32_t> relative_position_index(std::size_t window) {
    const std::size_t n = window * window;
    const std::size_t span = 2 * window - 1;
    std::vector<std::uint32_t> idx(n * n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t dy = a / window + window - 1 - b / window;
            const std::size_t dx = a % window + window - 1 - b % window;
            idx[a * n + b] = static_cast<std::uint32_t>(dy * span + dx);
        }
    return idx;
}

Tensor shifted_window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
    auto region = [&](std::size_t v, std::size_t extent) -> int {
        if (v < extent - window) return 0;
        if (v < extent - shift) return 1;
        return 2;
    };
    const std::size_t nh = height / window, nw = width / window, n = window * window;
    std::vector<float> m(nh * nw * n * n, 0.0f);
    for (std::size_t wy = 0; wy < nh; ++wy)
        for (std::size_t wx = 0; wx < nw; ++wx) {
            std::vector<int> label(n);
            for (std::size_t t = 0; t < n; ++t)
                label[t] = region(wy * window + t / window, height) * 3 + region(wx * window + t % window, width);
            float* dst = m.data() + (wy * nw + wx) * n * n;
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t b = 0; b < n; ++b)
                    if (shift > 0 && label[a] != label[b]) dst[a * n + b] = -1e4f;
        }
    return Tensor::from({nh * nw, n, n}, std::move(m));
}

std::vector<Tensor> pyramid_embed(const LayerSource& layers, const Tensor& image, const MitnetConfig& config) {
    if (image.rank() != 4 || image.dim(1) != 1 || image.dim(2) != image.dim(3))
        throw ShapeMismatch("mitnet expects [B, 1, S, S], got " + ad::to_string(image.shape()));
    config.validate_input(image.dim(2));
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < config.levels; ++i)
        out.push_back(layers.linear(lvl(i) + ".embed", ad::patchify(image, config.patch_sizes[i])));
    return out;
}

namespace {

Tensor window_attention(const LayerSource& layers, const std::string& b, const Tensor& x, std::size_t heads,
                        std::size_t ws, std::size_t shift, AttentionTrace* trace) {
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t n = ws * ws, d = C / heads;
    const std::size_t nwin = (H / ws) * (W / ws);
    const std::size_t Bw = B * nwin;

    const Tensor win = ad::window_partition(x, ws, shift);
    Tensor qkv = ad::reshape(layers.linear(b + ".attn.qkv", win), {Bw, n, 3, heads, d});
    qkv = ad::permute(qkv, {2, 0, 3, 1, 4});
    auto part = [&](std::size_t k) { return ad::reshape(ad::slice(qkv, 0, k, 1), {Bw, heads, n, d}); };
    const Tensor q = part(0), k = part(1), v = part(2);

    Tensor scores = ad::scale(ad::matmul(q, k, true), static_cast<float>(1.0 / std::sqrt(static_cast<double>(d))));

    const auto rel = relative_position_index(ws);
    std::vector<std::uint32_t> idx(heads * n * n);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t e = 0; e < n * n; ++e) idx[h * n * n + e] = static_cast<std::uint32_t>(rel[e] * heads + h);
    const Tensor bias = ad::gather(layers.param(b + ".attn.rel_bias"), {heads, n, n}, std::move(idx), "rel_bias");
    scores = ad::add_broadcast(scores, bias);

    if (shift > 0) {
        const Tensor mask = shifted_window_mask(H, W, ws, shift);
        std::vector<float> expanded(nwin * heads * n * n);
        for (std::size_t w = 0; w < nwin; ++w)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(mask.data() + w * n * n, n * n, expanded.begin() + static_cast<long>((w * heads + h) * n * n));
        const Tensor m = Tensor::from({nwin, heads, n, n}, std::move(expanded));
        scores = ad::reshape(ad::add_broadcast(ad::reshape(scores, {B, nwin, heads, n, n}), m), {Bw, heads, n, n});
    }
    const Tensor attn = ad::softmax(scores);
    if (trace) trace->probs.push_back(attn);

    Tensor out = ad::permute(ad::matmul(attn, v), {0, 2, 1, 3});
    out = layers.linear(b + ".attn.proj", ad::reshape(out, {Bw, n, C}));
    return ad::window_reverse(out, B, H, W, ws, shift);
}

}  // namespace

Tensor dfet_block(const LayerSource& layers, std::size_t level, const Tensor& tokens, const MitnetConfig& config,
                  AttentionTrace* trace) {
    if (tokens.rank() != 4 || tokens.dim(3) != config.embed_dims.at(level))
        throw ShapeMismatch("dfet_block: tokens " + ad::to_string(tokens.shape()) + " vs embed dim " +
                            std::to_string(config.embed_dims.at(level)));
    const std::size_t ws = config.window_size;
    if (tokens.dim(1) % ws || tokens.dim(2) % ws)
        throw ShapeMismatch("dfet_block: token grid " + ad::to_string(tokens.shape()) + " not divisible by window " +
                            std::to_string(ws));
    Tensor x = tokens;
    for (std::size_t j = 0; j < config.depths; ++j) {
        const std::string b = blk(level, j);
        const std::size_t shift = config.shift_for(j, std::min(tokens.dim(1), tokens.dim(2)));
        Tensor h = ad::layer_norm(x, layers.param(b + ".norm1.weight"), layers.param(b + ".norm1.bias"));
        x = ad::add(x, window_attention(layers, b, h, config.num_heads[level], ws, shift, trace));
        h = ad::layer_norm(x, layers.param(b + ".norm2.weight"), layers.param(b + ".norm2.bias"));
        h = layers.linear(b + ".mlp.fc2", ad::gelu(layers.linear(b + ".mlp.fc1", h)));
        x = ad::add(x, h);
    }
    return x;
}

Tensor progressive_fuse(const LayerSource& layers, const std::vector<Tensor>& coarse_to_fine,
                        const MitnetConfig& config) {
    if (coarse_to_fine.size() != config.levels)
        throw ShapeMismatch("progressive_fuse: expected " + std::to_string(config.levels) + " levels, got " +
                            std::to_string(coarse_to_fine.size()));
    auto to_nchw = [](const Tensor& t) { return ad::permute(t, {0, 3, 1, 2}); };
    const std::size_t top = config.levels - 1;
    Tensor fused = ad::relu(layers.conv(lvl(top) + ".fuse", to_nchw(coarse_to_fine[0])));
    for (std::size_t k = 1; k < config.levels; ++k) {
        const std::size_t level = top - k;
        const Tensor fine = to_nchw(coarse_to_fine[k]);
        while (fused.dim(2) < fine.dim(2)) fused = ad::upsample_nearest2x(fused);
        if (fused.dim(2) != fine.dim(2) || fused.dim(3) != fine.dim(3) || fused.dim(0) != fine.dim(0))
            throw ShapeMismatch("progressive_fuse: cannot align " + ad::to_string(fused.shape()) + " with " +
                                ad::to_string(fine.shape()));
        fused = ad::relu(layers.conv(lvl(level) + ".fuse", ad::concat({fused, fine}, 1)));
    }
    return fused;
}

Tensor mitnet_forward(const LayerSource& layers, const MitnetConfig& config, const Tensor& image) {
    auto tokens = pyramid_embed(layers, image, config);
    std::vector<Tensor> coarse_to_fine;
    for (std::size_t k = config.levels; k-- > 0;) coarse_to_fine.push_back(dfet_block(layers, k, tokens[k], config));
    const Tensor fused = progressive_fuse(layers, coarse_to_fine, config);

    const std::size_t C0 = config.embed_dims[0];
    Tensor h = layers.linear("head.unembed", ad::permute(fused, {0, 2, 3, 1}));
    h = ad::unpatchify(h, config.patch_sizes[0], C0);
    h = ad::relu(layers.conv("head.conv1", h));
    h = layers.conv("head.conv2", h);
    return config.global_residual ? ad::add(image, h) : h;
}

Tensor mitnet_forward(const ad::ParamTable& params, const MitnetConfig& config, const Tensor& image) {
    return mitnet_forward(TableLayers(params), config, image);
}

float normalize_hu(float hu) { return (hu - kHuMin) / (kHuMax - kHuMin); }
float denormalize_hu(float v) { return v * (kHuMax - kHuMin) + kHuMin; }

}  // namespace nictkit
