#include "nictkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nictkit/error.hpp"
#include "nictkit/geometry.hpp"
#include "nictkit/ops.hpp"
#include "nictkit/random.hpp"

namespace nictkit::ad {

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double epsilon, std::uint64_t seed) {
    std::vector<Tensor> xs;
    xs.reserve(inputs.size());
    for (const auto& t : inputs) xs.push_back(t.clone(true));
    {
        const Tensor loss = f(xs);
        backward(loss);
    }
    std::vector<std::vector<float>> analytic;
    for (const auto& x : xs) analytic.push_back(x.grad());

    // power of two keeps x +- eps exact for moderate x
    const double eps = std::exp2(std::round(std::log2(epsilon)));
    Rng rng(seed);
    GradCheckResult res;
    double max_abs_grad = 0.0;
    for (const auto& g : analytic)
        for (float v : g) max_abs_grad = std::max(max_abs_grad, std::abs(static_cast<double>(v)));

    NoGradGuard guard;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const std::size_t n = xs[k].numel();
        std::vector<std::size_t> coords;
        if (n > 4096) {
            for (int i = 0; i < 64; ++i) coords.push_back(rng.index(n));
        } else {
            coords.resize(n);
            std::iota(coords.begin(), coords.end(), 0);
        }
        auto vals = xs[k].mutable_values();
        for (std::size_t idx : coords) {
            const float orig = vals[idx];
            const float xp = static_cast<float>(orig + eps);
            const float xm = static_cast<float>(orig - eps);
            vals[idx] = xp;
            const double fp = f(xs).precise_item();
            vals[idx] = xm;
            const double fm = f(xs).precise_item();
            vals[idx] = orig;
            const double num = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double ana = analytic[k][idx];
            const double denom = std::max({std::abs(ana), std::abs(num), 1e-2 * max_abs_grad, 1e-6});
            const double rel = std::abs(ana - num) / denom;
            ++res.coordinates;
            if (rel > res.max_rel_error || res.coordinates == 1) {
                res.max_rel_error = std::max(res.max_rel_error, rel);
                res.worst_input = k;
                res.worst_index = idx;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }
    return res;
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinks are not straddled.
Tensor away_from_zero(Rng& rng, Shape shape) {
    std::vector<float> v(numel(shape));
    for (auto& x : v) {
        const double m = rng.uniform(0.1, 1.0);
        x = static_cast<float>(rng.uniform() < 0.5 ? -m : m);
    }
    return Tensor::from(std::move(shape), std::move(v));
}

// Contract a tensor-valued output with fixed random weights.
Tensor project(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

GradCase make_case(std::string name, std::vector<Tensor> inputs, std::function<Tensor(const std::vector<Tensor>&)> body,
                   Shape out_shape, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    Tensor w = random_tensor(rng, std::move(out_shape));
    return {std::move(name), [inputs = std::move(inputs), body = std::move(body), w, seed]() {
                return grad_check([&](const std::vector<Tensor>& x) { return project(body(x), w); }, inputs, 1e-3,
                                  seed);
            }};
}

}  // namespace

std::vector<GradCase> kernel_grad_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCase> cases;
    auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor(const std::vector<Tensor>&)> body,
                        Shape out) { cases.push_back(make_case(std::move(name), std::move(in), std::move(body), std::move(out), rng.next())); };

    const Shape s4{2, 3, 4, 4};
    add_case("add", {random_tensor(rng, s4), random_tensor(rng, s4)}, [](auto& x) { return add(x[0], x[1]); }, s4);
    add_case("sub", {random_tensor(rng, s4), random_tensor(rng, s4)}, [](auto& x) { return sub(x[0], x[1]); }, s4);
    add_case("mul", {random_tensor(rng, s4), random_tensor(rng, s4)}, [](auto& x) { return mul(x[0], x[1]); }, s4);
    add_case("div", {random_tensor(rng, s4), random_tensor(rng, s4, 0.5, 1.5)}, [](auto& x) { return div(x[0], x[1]); }, s4);
    add_case("scale", {random_tensor(rng, s4)}, [](auto& x) { return scale(x[0], -1.75f); }, s4);
    add_case("add_scalar", {random_tensor(rng, s4)}, [](auto& x) { return add_scalar(x[0], 0.5f); }, s4);
    add_case("add_broadcast", {random_tensor(rng, s4), random_tensor(rng, {4, 4})},
             [](auto& x) { return add_broadcast(x[0], x[1]); }, s4);
    add_case("relu", {away_from_zero(rng, s4)}, [](auto& x) { return relu(x[0]); }, s4);
    add_case("gelu", {random_tensor(rng, s4, -2.0, 2.0)}, [](auto& x) { return gelu(x[0]); }, s4);
    add_case("linear", {random_tensor(rng, {2, 5, 6}), random_tensor(rng, {4, 6}), random_tensor(rng, {4})},
             [](auto& x) { return linear(x[0], x[1], x[2]); }, {2, 5, 4});
    add_case("matmul", {random_tensor(rng, {2, 3, 5}), random_tensor(rng, {2, 5, 4})},
             [](auto& x) { return matmul(x[0], x[1]); }, {2, 3, 4});
    add_case("matmul_transposed", {random_tensor(rng, {2, 3, 5}), random_tensor(rng, {2, 4, 5})},
             [](auto& x) { return matmul(x[0], x[1], true); }, {2, 3, 4});
    add_case("conv2d", {random_tensor(rng, {2, 3, 6, 6}, -0.5, 0.5), random_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5), random_tensor(rng, {4})},
             [](auto& x) { return conv2d(x[0], x[1], x[2], 1, 1); }, {2, 4, 6, 6});
    add_case("conv2d_strided", {random_tensor(rng, {2, 3, 8, 8}, -0.5, 0.5), random_tensor(rng, {2, 3, 3, 3}, -0.5, 0.5)},
             [](auto& x) { return conv2d(x[0], x[1], {}, 2, 1); }, {2, 2, 4, 4});
    add_case("layer_norm", {random_tensor(rng, {3, 4, 8}), random_tensor(rng, {8}, 0.5, 1.5), random_tensor(rng, {8})},
             [](auto& x) { return layer_norm(x[0], x[1], x[2]); }, {3, 4, 8});
    add_case("softmax", {random_tensor(rng, {3, 4, 4})}, [](auto& x) { return softmax(x[0]); }, {3, 4, 4});
    add_case("concat", {random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, {2, 3, 4, 4})},
             [](auto& x) { return concat({x[0], x[1]}, 1); }, {2, 5, 4, 4});
    add_case("slice", {random_tensor(rng, s4)}, [](auto& x) { return slice(x[0], 1, 1, 2); }, {2, 2, 4, 4});
    add_case("reshape", {random_tensor(rng, s4)}, [](auto& x) { return reshape(x[0], {6, 16}); }, {6, 16});
    add_case("permute", {random_tensor(rng, s4)}, [](auto& x) { return permute(x[0], {0, 2, 3, 1}); }, {2, 4, 4, 3});
    add_case("upsample_nearest2x", {random_tensor(rng, {2, 3, 3, 3})}, [](auto& x) { return upsample_nearest2x(x[0]); },
             {2, 3, 6, 6});
    add_case("window_partition", {random_tensor(rng, {2, 8, 8, 3})},
             [](auto& x) { return window_partition(x[0], 4, 2); }, {8, 16, 3});
    add_case("window_reverse", {random_tensor(rng, {8, 16, 3})},
             [](auto& x) { return window_reverse(x[0], 2, 8, 8, 4, 2); }, {2, 8, 8, 3});
    add_case("patchify", {random_tensor(rng, {2, 1, 8, 8})}, [](auto& x) { return patchify(x[0], 2); }, {2, 4, 4, 4});
    add_case("unpatchify", {random_tensor(rng, {2, 4, 4, 12})}, [](auto& x) { return unpatchify(x[0], 2, 3); },
             {2, 3, 8, 8});
    add_case("gather", {random_tensor(rng, {5, 3})},
             [](auto& x) { return gather(x[0], {2, 4}, {0, 14, 3, 3, 7, 1, 14, 9}); }, {2, 4});
    add_case("sum", {random_tensor(rng, s4)}, [](auto& x) { return sum(x[0]); }, {});
    add_case("mean", {random_tensor(rng, s4)}, [](auto& x) { return mean(x[0]); }, {});
    const auto geom = make_geometry(12, default_detector_count(8), 0.0, 180.0, 1.0);
    add_case("radon", {random_tensor(rng, {2, 1, 8, 8}, -0.5, 0.5)}, [geom](auto& x) { return radon(x[0], geom); },
             {2, 1, geom.num_views, geom.num_detectors});
    return cases;
}

std::vector<GradReportRow> run_grad_cases(const std::vector<GradCase>& cases, double tolerance) {
    std::vector<GradReportRow> rows;
    for (const auto& c : cases) {
        GradReportRow row{c.name, {}, false, {}};
        try {
            row.result = c.run();
            row.passed = row.result.max_rel_error < tolerance;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace nictkit::ad
