#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nictkit/tensor.hpp"

namespace nictkit::ad {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central differences against the recorded backward. Tensors above 4096
// elements are checked on 64 sampled coordinates.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double epsilon = 1e-3,
                           std::uint64_t seed = 0);

struct GradCase {
    std::string name;
    std::function<GradCheckResult()> run;
};

struct GradReportRow {
    std::string name;
    GradCheckResult result;
    bool passed = false;
    std::string error;
};

std::vector<GradCase> kernel_grad_cases(std::uint64_t seed = 7);

std::vector<GradReportRow> run_grad_cases(const std::vector<GradCase>& cases, double tolerance = 1e-2);

}  // namespace nictkit::ad
