#include "nictkit/lora.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>

#include "nictkit/binary_io.hpp"
#include "nictkit/checkpoint.hpp"
#include "nictkit/error.hpp"
#include "nictkit/json_fields.hpp"
#include "nictkit/ops.hpp"

namespace nictkit {

using ad::Tensor;

void LoraConfig::validate() const {
    if (rank < 1) throw InvalidConfig("lora: rank must be >= 1");
    if (alpha < 0.0 || !std::isfinite(alpha)) throw InvalidConfig("lora: alpha must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidConfig("lora: dropout must lie in [0, 1)");
    if (target_patterns.empty()) throw InvalidConfig("lora: target_patterns is empty");
}

LoraConfig LoraConfig::from_json(const nlohmann::json& j) {
    JsonFields f(j, "lora");
    LoraConfig c;
    c.rank = f.get("rank", c.rank);
    c.alpha = f.get("alpha", c.alpha);
    c.target_patterns = f.get("target_patterns", c.target_patterns);
    c.dropout = f.get("dropout", c.dropout);
    f.finish();
    c.validate();
    return c;
}

nlohmann::json LoraConfig::to_json() const {
    return {{"rank", rank}, {"alpha", effective_alpha()}, {"target_patterns", target_patterns}, {"dropout", dropout}};
}

std::vector<std::string> lora_targets(const ad::ParamTable& params, const LoraConfig& config) {
    std::vector<std::string> out;
    for (const auto& [name, t] : params) {
        if (!name.ends_with(".weight") || name.find(".norm") != std::string::npos) continue;
        if (t.rank() != 2 && t.rank() != 4) continue;
        const bool hit = std::any_of(config.target_patterns.begin(), config.target_patterns.end(),
                                     [&](const std::string& p) { return fnmatch(p.c_str(), name.c_str(), 0) == 0; });
        if (hit) out.push_back(name);
    }
    return out;
}

LoraModel::LoraModel(ad::ParamTable base, std::map<std::string, LoraBypass> bypasses, double scale, double dropout,
                     std::uint64_t seed)
    : base_(std::move(base)), bypasses_(std::move(bypasses)), scale_(scale), dropout_(dropout), rng_(seed) {
    for (auto& [name, t] : base_) t.set_requires_grad(false);
}

const Tensor& LoraModel::param(const std::string& name) const {
    auto it = base_.find(name);
    if (it == base_.end()) throw InvalidConfig("missing parameter '" + name + "'");
    return it->second;
}

Tensor LoraModel::bypass_input(const Tensor& x) const {
    if (!training_ || dropout_ <= 0.0) return x;
    std::vector<float> mask(x.numel());
    const auto keep = static_cast<float>(1.0 / (1.0 - dropout_));
    for (auto& m : mask) m = rng_.uniform() < dropout_ ? 0.0f : keep;
    return ad::mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor LoraModel::linear(const std::string& prefix, const Tensor& x) const {
    Tensor y = LayerSource::linear(prefix, x);
    auto it = bypasses_.find(prefix + ".weight");
    if (it == bypasses_.end()) return y;
    const Tensor low = ad::linear(ad::linear(bypass_input(x), it->second.a), it->second.b);
    return ad::add(y, ad::scale(low, static_cast<float>(scale_)));
}

Tensor LoraModel::conv(const std::string& prefix, const Tensor& x) const {
    Tensor y = LayerSource::conv(prefix, x);
    auto it = bypasses_.find(prefix + ".weight");
    if (it == bypasses_.end()) return y;
    const Tensor& a = it->second.a;
    const Tensor low = ad::conv2d(ad::conv2d(bypass_input(x), a, {}, 1, a.dim(2) / 2), it->second.b);
    return ad::add(y, ad::scale(low, static_cast<float>(scale_)));
}

ad::ParamTable LoraModel::trainable() const {
    ad::ParamTable t;
    for (const auto& [name, bp] : bypasses_) {
        t.emplace(name + ".lora_a", bp.a);
        t.emplace(name + ".lora_b", bp.b);
    }
    return t;
}

std::size_t LoraModel::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, bp] : bypasses_) n += bp.a.numel() + bp.b.numel();
    return n;
}

LoraModel attach_lora(const ad::ParamTable& params, const LoraConfig& config, std::uint64_t seed) {
    config.validate();
    const auto targets = lora_targets(params, config);
    if (targets.empty()) throw NoTargetsMatched("lora: no linear or conv weight matches the target patterns");
    Rng rng(seed);
    std::map<std::string, LoraBypass> bypasses;
    for (const auto& name : targets) {
        const Tensor& w = params.at(name);
        const std::size_t out = w.dim(0);
        const std::size_t fan_in = w.numel() / out;
        // a rank above the matrix rank adds nothing
        const std::size_t r = std::min({config.rank, out, fan_in});
        LoraBypass bp;
        bp.conv = w.rank() == 4;
        ad::Shape a_shape = bp.conv ? ad::Shape{r, w.dim(1), w.dim(2), w.dim(3)} : ad::Shape{r, w.dim(1)};
        std::vector<float> a(ad::numel(a_shape));
        for (auto& v : a) v = static_cast<float>(rng.truncated_normal(0.02));
        bp.a = Tensor::from(std::move(a_shape), std::move(a), true);
        bp.b = Tensor::zeros(bp.conv ? ad::Shape{out, r, 1, 1} : ad::Shape{out, r}, true);
        bypasses.emplace(name, std::move(bp));
    }
    ad::ParamTable base;
    for (const auto& [name, t] : params) base.emplace(name, t.clone(false));
    const double scale = config.effective_alpha() / static_cast<double>(config.rank);
    return LoraModel(std::move(base), std::move(bypasses), scale, config.dropout, seed ^ 0xA5A5A5A5ULL);
}

Tensor lora_forward(const LoraModel& model, const MitnetConfig& config, const Tensor& image) {
    return mitnet_forward(model, config, image);
}

ad::ParamTable merge_lora(const LoraModel& model) {
    ad::ParamTable out;
    for (const auto& [name, t] : model.base()) {
        auto it = model.bypasses().find(name);
        if (it == model.bypasses().end()) {
            out.emplace(name, t.clone(true));
            continue;
        }
        const Tensor& a = it->second.a;
        const Tensor& b = it->second.b;
        const std::size_t o_n = t.dim(0), r = a.dim(0), k = a.numel() / r;
        std::vector<float> w(t.values().begin(), t.values().end());
        for (std::size_t o = 0; o < o_n; ++o)
            for (std::size_t j = 0; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t q = 0; q < r; ++q)
                    acc += static_cast<double>(b.data()[o * r + q]) * a.data()[q * k + j];
                w[o * k + j] = static_cast<float>(w[o * k + j] + model.scale() * acc);
            }
        out.emplace(name, Tensor::from(t.shape(), std::move(w), true));
    }
    return out;
}

void save_lora(const std::filesystem::path& path, const LoraModel& model) {
    ByteWriter w;
    w.magic("NICTLORA");
    w.u64(checkpoint_hash(model.base()));
    w.f32(static_cast<float>(model.scale()));
    w.raw(encode_checkpoint(model.trainable()));
    write_file_atomic(path, w.bytes());
}

LoraModel load_lora(const std::filesystem::path& path, const ad::ParamTable& base) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes, path.string());
    if (!r.expect_magic("NICTLORA")) throw IoError(path.string() + ": not a NICTLORA file");
    const std::uint64_t hash = r.u64();
    const float scale = r.f32();
    ad::ParamTable frozen;
    for (const auto& [name, t] : base) frozen.emplace(name, t.clone(false));
    if (hash != checkpoint_hash(frozen))
        throw InvalidConfig(path.string() + ": LoRA file was trained against a different base checkpoint");
    const auto table = decode_checkpoint(std::string_view(bytes).substr(bytes.size() - r.remaining()), path.string());
    std::map<std::string, LoraBypass> bypasses;
    for (const auto& [name, t] : table) {
        std::string target;
        if (name.ends_with(".lora_a"))
            target = name.substr(0, name.size() - 7);
        else if (name.ends_with(".lora_b"))
            continue;
        else
            throw IoError(path.string() + ": unexpected entry " + name);
        auto bit = table.find(target + ".lora_b");
        if (bit == table.end() || !base.count(target)) throw IoError(path.string() + ": incomplete bypass " + target);
        LoraBypass bp{t.clone(true), bit->second.clone(true), t.rank() == 4};
        bypasses.emplace(target, std::move(bp));
    }
    return LoraModel(std::move(frozen), std::move(bypasses), scale, 0.0, 0);
}

}  // namespace nictkit
