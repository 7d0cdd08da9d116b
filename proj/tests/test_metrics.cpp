#include <doctest.h>

#include <cmath>
#include <limits>

#include "nictkit/error.hpp"
#include "nictkit/losses.hpp"
#include "nictkit/metrics.hpp"
#include "nictkit/mitnet.hpp"
#include "nictkit/ops.hpp"
#include "oracles.hpp"

using namespace nictkit;

namespace {

Image hu_image(std::size_t side, std::uint64_t seed) {
    Image im(side, side);
    im.values = oracle::random_vector(side * side, seed, -1024.0f, 3071.0f);
    return im;
}

Image shifted(const Image& a, float by) {
    Image b = a;
    for (auto& v : b.values) v += by;
    return b;
}

Image noisy(const Image& a, float amp, std::uint64_t seed) {
    Image b = a;
    const auto n = oracle::random_vector(a.size(), seed);
    for (std::size_t i = 0; i < b.size(); ++i) b.values[i] += amp * n[i];
    return b;
}

std::vector<float> normalized(const Image& a) {
    std::vector<float> v(a.values);
    for (auto& x : v) x = normalize_hu(x);
    return v;
}

ReaderRow row(std::string g, std::string r, std::string m, int rank, int ok, int better) {
    return {std::move(g), std::move(r), std::move(m), rank, ok, better};
}

}  // namespace

TEST_CASE("psnr closed forms and sentinel") {
    const auto a = hu_image(16, 1);
    CHECK(std::isinf(psnr(a.values, a.values)));
    CHECK(psnr(shifted(a, 1.0f).values, a.values) == doctest::Approx(20.0 * std::log10(4095.0)).epsilon(1e-6));
    CHECK(psnr(shifted(a, 1.0f).values, a.values) == doctest::Approx(72.25).epsilon(1e-4));
    double last = std::numeric_limits<double>::infinity();
    for (float amp : {1.0f, 5.0f, 20.0f}) {
        const double p = psnr(noisy(a, amp, 2).values, a.values);
        CHECK(p < last);
        last = p;
    }
    CHECK_THROWS_AS(psnr(a.values, hu_image(8, 1).values), ShapeMismatch);
}

TEST_CASE("rmse closed forms") {
    const auto a = hu_image(16, 3);
    CHECK(rmse_hu(a.values, a.values) == 0.0);
    CHECK(rmse_hu(shifted(a, 3.0f).values, a.values) == doctest::Approx(3.0).epsilon(1e-4));
    const auto b = noisy(a, 7.0f, 4);
    const double r = rmse_hu(b.values, a.values);
    CHECK(std::abs(r * r - mse_hu(b.values, a.values)) <= 1e-9 * mse_hu(b.values, a.values));
}

TEST_CASE("metrics agree with reference formulas on 20 random pairs") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto a = hu_image(24, 100 + s);
        const auto b = noisy(a, 50.0f + 10.0f * s, 200 + s);
        CHECK(psnr(b.values, a.values) == doctest::Approx(oracle::psnr(b.values, a.values, 4095.0)).epsilon(1e-6));
        CHECK(rmse_hu(b.values, a.values) == doctest::Approx(std::sqrt(oracle::mse(b.values, a.values))).epsilon(1e-6));
        CHECK(ssim_pct(b, a) == doctest::Approx(100.0 * oracle::ssim(normalized(b), normalized(a), 24, 24)).epsilon(1e-4));
    }
}

TEST_CASE("ssim percentage shares the loss kernel") {
    const auto a = hu_image(16, 5);
    CHECK(ssim_pct(a, a) == doctest::Approx(100.0).epsilon(1e-9));
    const auto b = noisy(a, 300.0f, 6);
    const auto ta = ad::Tensor::from({1, 1, 16, 16}, normalized(a));
    const auto tb = ad::Tensor::from({1, 1, 16, 16}, normalized(b));
    CHECK(std::abs(ssim_pct(b, a) - (1.0 - loss_ssim(tb, ta).precise_item()) * 100.0) < 1e-6);

    Image c1(16, 16, denormalize_hu(0.3f)), c2(16, 16, denormalize_hu(0.7f));
    const double closed = (2 * 0.3 * 0.7 + 1e-4) / (0.09 + 0.49 + 1e-4) * 100.0;
    CHECK(ssim_pct(c1, c2) == doctest::Approx(closed).epsilon(1e-4));
    CHECK(ssim_pct(c1, c2) <= 100.0);
    CHECK(ssim_pct(c1, c2) >= -100.0);
}

TEST_CASE("lpips proxy: zero, symmetric, bounded and monotone") {
    const auto ex = FeatureExtractor::seeded();
    const auto a = hu_image(32, 7);
    CHECK(lpips_proxy_pct(a, a, ex) == 0.0);
    const auto b = noisy(a, 200.0f, 8);
    CHECK(lpips_proxy_pct(a, b, ex) == doctest::Approx(lpips_proxy_pct(b, a, ex)).epsilon(1e-9));
    double last = 0;
    for (float amp : {20.0f, 200.0f, 2000.0f}) {
        const double v = lpips_proxy_pct(noisy(a, amp, 9), a, ex);
        CHECK(v > last);
        CHECK(v <= 100.0);
        last = v;
    }
}

TEST_CASE("summaries exclude the psnr sentinel") {
    const auto ex = FeatureExtractor::seeded();
    const auto a = hu_image(16, 10);
    std::vector<MetricReport> reps{evaluate_pair(a, a, ex), evaluate_pair(shifted(a, 1.0f), a, ex),
                                   evaluate_pair(shifted(a, 2.0f), a, ex)};
    const auto s = summarize(reps);
    CHECK(s.count == 3);
    CHECK(s.psnr_infinite == 1);
    CHECK(s.mean.psnr_db == doctest::Approx((reps[1].psnr_db + reps[2].psnr_db) / 2).epsilon(1e-12));
    CHECK(s.mean.rmse_hu == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("reader metrics: weighted PBN split vote") {
    ReaderStudyTable t;
    for (const char* r : {"1P", "2C", "3C"}) {
        const bool senior = std::string(r) == "1P";
        t.rows.push_back(row("g1", r, "tamp", 1, 1, senior ? 1 : 0));
        t.rows.push_back(row("g1", r, "nict", 2, 0, 0));
    }
    const auto s = reader_metrics(t);
    CHECK(s.at("tamp").pbn_pct == 50.0);
    CHECK(s.at("tamp").sqr == 2.0);
    CHECK(s.at("nict").sqr == 1.0);
    CHECK(s.at("tamp").pca_pct == 100.0);
    CHECK(s.at("nict").pca_pct == 0.0);
}

TEST_CASE("reader metrics: unanimous rank, unanimous PBN, equal weights") {
    ReaderStudyTable t;
    for (const char* g : {"g1", "g2", "g3"})
        for (const char* r : {"1P", "2C", "3C"}) {
            t.rows.push_back(row(g, r, "a", 1, 1, 1));
            t.rows.push_back(row(g, r, "b", 2, 1, 1));
            t.rows.push_back(row(g, r, "c", 3, 0, 1));
        }
    auto s = reader_metrics(t);
    CHECK(s.at("a").sqr == 3.0);
    CHECK(s.at("c").sqr == 1.0);
    CHECK(s.at("a").pbn_pct == 100.0);

    // equal weights give the plain mean
    ReaderStudyTable e = t;
    e.weights = {{"1P", 1.0 / 3}, {"2C", 1.0 / 3}, {"3C", 1.0 / 3}};
    e.rows[0].better_than_nict = 0;  // g1, 1P, a
    const auto eq = reader_metrics(e);
    CHECK(eq.at("a").pbn_pct == doctest::Approx(100.0 * 8.0 / 9.0).epsilon(1e-12));
    for (const auto& [m, v] : eq) {
        CHECK(v.sqr >= 1.0);
        CHECK(v.sqr <= 3.0);
        CHECK(v.pbn_pct >= 0.0);
        CHECK(v.pbn_pct <= 100.0);
    }
}

TEST_CASE("reader tables are validated") {
    ReaderStudyTable t;
    t.rows = {row("g1", "1P", "a", 1, 1, 1), row("g1", "1P", "b", 2, 1, 1), row("g1", "2C", "a", 1, 1, 1),
              row("g1", "3C", "a", 1, 1, 1), row("g1", "3C", "b", 2, 1, 1)};
    try {
        reader_metrics(t);
        FAIL("expected IncompleteTable");
    } catch (const IncompleteTable& e) {
        const std::string msg = e.what();
        CHECK(msg.find("g1") != std::string::npos);
        CHECK(msg.find("2C") != std::string::npos);
        CHECK(msg.find("b") != std::string::npos);
    }
    t.rows.push_back(row("g1", "2C", "b", 2, 1, 1));
    CHECK_NOTHROW(reader_metrics(t));
    t.weights["1P"] = 0.6;
    CHECK_THROWS_AS(reader_metrics(t), InvalidConfig);

    const auto parsed = parse_reader_csv("group_id,reader_id,method,rank,acceptable,better_than_nict\n"
                                         "g1,1P,a,1,1,1\ng1,1P,b,2,0,0\n");
    CHECK(parsed.rows.size() == 2);
    CHECK(parsed.rows[1].method == "b");
    CHECK_THROWS_AS(parse_reader_csv("group_id,reader_id,method,rank\ng1,1P,a,1\n"), IoError);
    CHECK_THROWS_AS(parse_reader_csv("group_id,reader_id,method,rank,acceptable,better_than_nict\ng1,1P,a,x,1,1\n"), IoError);
}
