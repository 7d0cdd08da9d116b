#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nictkit/tensor.hpp"

namespace nictkit {

// How the configured (b1, b2, b3) map onto Adan's decay rates for the first
// moment, the gradient-difference moment and the second moment.
//   sequential: (b1, b2, b3)
//   adam_like:  (b1, b3, b2), i.e. b2 drives the second moment as in Adam
enum class AdanMapping { Sequential, AdamLike };

AdanMapping parse_adan_mapping(const std::string& s);
std::string to_string(AdanMapping m);

struct AdanHyper {
    double lr = 5e-4;
    double b1 = 0.5;
    double b2 = 0.999;
    double b3 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    AdanMapping mapping = AdanMapping::Sequential;

    struct Decays {
        double m, diff, n;
    };
    Decays decays() const;
    void validate() const;
};

struct AdanSlot {
    std::vector<float> m, diff, n, prev;
};

struct AdanState {
    std::map<std::string, AdanSlot> slots;
    std::uint64_t step = 0;

    // adan.{m,diff,n,prev}/<param> plus adan.step
    ad::ParamTable to_table() const;
    static AdanState from_table(const ad::ParamTable& table);
};

// Updates every parameter that takes gradients, reading its accumulated
// gradient. Throws NonFiniteGradient naming the parameter.
void adan_step(ad::ParamTable& params, AdanState& state, const AdanHyper& hyper);

}  // namespace nictkit
