#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nictkit/binary_io.hpp"
#include "nictkit/dataset.hpp"
#include "nictkit/error.hpp"
#include "nictkit/image_io.hpp"
#include "nictkit/nict_sim.hpp"
#include "nictkit/phantom.hpp"
#include "oracles.hpp"

using namespace nictkit;
namespace fs = std::filesystem;

namespace {

Sinogram random_sinogram(std::size_t views, std::size_t dets, std::uint64_t seed) {
    Sinogram s(make_geometry(views, dets, 0, 180, 1.0));
    s.values = oracle::random_vector(s.values.size(), seed, 0.0f, 50.0f);
    return s;
}

double mean_recon_psnr(NictKind kind, DefectDegree degree, int phantoms) {
    double total = 0;
    for (int i = 0; i < phantoms; ++i) {
        const auto p = simulate_nict(random_phantom(64, 40 + i), defect_preset(kind, degree), 900 + i);
        total += oracle::psnr(p.nict.values, p.ict.values, 4095.0);
    }
    return total / phantoms;
}

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("low-dose noise: zero sigma, determinism, and moment") {
    const auto s = random_sinogram(720, 512, 1);
    CHECK(degrade_low_dose(s, 0.0, 5).values == s.values);
    CHECK(degrade_low_dose(s, 0.01, 5).values == degrade_low_dose(s, 0.01, 5).values);
    CHECK(degrade_low_dose(s, 0.01, 5).values != degrade_low_dose(s, 0.01, 6).values);

    const auto n = degrade_low_dose(s, 0.01, 5);
    double mx = 0;
    for (float v : s.values) mx = std::max(mx, double(std::abs(v)));
    const double sigma = 0.01 * mx;
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        const double d = double(n.values[i]) - s.values[i];
        sum += d;
        sq += d * d;
    }
    const double m = sum / s.values.size();
    const double sd = std::sqrt(sq / s.values.size() - m * m);
    CHECK(std::abs(sd - sigma) / sigma < 0.05);
    CHECK(n.geometry == s.geometry);
}

TEST_CASE("sparse view keeps every stride-th row") {
    const auto s = random_sinogram(720, 31, 2);
    const auto same = degrade_sparse_view(s, 1);
    CHECK(same.values == s.values);
    CHECK(same.geometry == s.geometry);

    const auto d = degrade_sparse_view(s, 4);
    REQUIRE(d.geometry.num_views == 180);
    for (std::size_t v = 0; v < 180; ++v) {
        CHECK(d.geometry.view_angles_deg[v] == s.geometry.view_angles_deg[4 * v]);
        for (std::size_t k = 0; k < 31; ++k) CHECK(d.at(v, k) == s.at(4 * v, k));
    }
    CHECK(degrade_sparse_view(random_sinogram(10, 5, 3), 3).geometry.num_views == 4);
    CHECK_THROWS_AS(degrade_sparse_view(s, 0), InvalidStride);
    CHECK_THROWS_AS(degrade_sparse_view(s, 721), InvalidStride);
}

TEST_CASE("limited angle keeps the angular prefix") {
    const auto s = random_sinogram(720, 31, 4);
    const auto full = degrade_limited_angle(s, 180.0);
    CHECK(full.values == s.values);
    const auto half = degrade_limited_angle(s, 90.0);
    CHECK(half.geometry.num_views == 360);
    for (double a : half.geometry.view_angles_deg) CHECK(a < 90.0);
    CHECK(std::equal(half.values.begin(), half.values.end(), s.values.begin()));

    const auto mid = degrade_limited_angle(s, 90.0, true);
    CHECK(mid.geometry.num_views == 360);
    CHECK(mid.geometry.view_angles_deg.front() >= 45.0 - 1e-9);
    CHECK_THROWS_AS(degrade_limited_angle(s, 0.0), InvalidRange);
    CHECK_THROWS_AS(degrade_limited_angle(s, 200.0), InvalidRange);
}

TEST_CASE("presets are the configured table, ordered by severity") {
    CHECK(defect_preset(NictKind::SparseView, DefectDegree::High).view_stride == 8);
    CHECK(defect_preset(NictKind::LimitedAngle, DefectDegree::Low).keep_range_deg == 150.0);
    CHECK(defect_preset(NictKind::LowDose, DefectDegree::Mid).sigma_frac == 0.01);
    const DefectPresets p;
    for (int i = 0; i < 2; ++i) {
        CHECK(p.sigma_frac[i] < p.sigma_frac[i + 1]);
        CHECK(p.view_stride[i] < p.view_stride[i + 1]);
        CHECK(p.keep_range_deg[i] > p.keep_range_deg[i + 1]);
    }
    const auto custom = DefectPresets::from_json({{"svct", {3, 6, 12}}});
    CHECK(defect_preset(NictKind::SparseView, DefectDegree::Mid, custom).view_stride == 6);
    CHECK(custom.sigma_frac == p.sigma_frac);
}

TEST_CASE("identity settings reproduce the clean reconstruction") {
    const auto ph = random_phantom(32, 3);
    for (const auto& s : {low_dose(0.0), sparse_view(1), limited_angle(180.0)}) {
        const auto p = simulate_nict(ph, s, 1);
        REQUIRE(p.nict.values.size() == p.ict.values.size());
        for (std::size_t i = 0; i < p.nict.size(); ++i) CHECK(std::abs(p.nict.values[i] - p.ict.values[i]) <= 1e-6f * 4096);
    }
}

TEST_CASE("severity lowers reconstruction quality") {
    const auto sl = shepp_logan(64);
    Image hu(64, 64);
    for (std::size_t i = 0; i < hu.size(); ++i) hu.values[i] = -1024.0f + 2024.0f * sl.values[i];
    auto quality = [&](const NictSetting& s) {
        const auto p = simulate_nict(hu, s, 3);
        return oracle::psnr(p.nict.values, p.ict.values, 4095.0);
    };
    CHECK(quality(limited_angle(90.0)) < quality(limited_angle(150.0)));
    CHECK(quality(sparse_view(8)) <= quality(sparse_view(2)));
}

TEST_CASE("presets are strictly ordered in mean PSNR over five phantoms") {
    for (auto kind : kAllKinds) {
        const double lo = mean_recon_psnr(kind, DefectDegree::Low, 5);
        const double mid = mean_recon_psnr(kind, DefectDegree::Mid, 5);
        const double hi = mean_recon_psnr(kind, DefectDegree::High, 5);
        INFO(to_string(kind) << " " << lo << " " << mid << " " << hi);
        CHECK(lo > mid);
        CHECK(mid > hi);
    }
}

TEST_CASE("pairs regenerate bit-identically from their seed") {
    const auto ph = random_phantom(32, 8);
    const auto a = simulate_nict(ph, low_dose(0.02), 77);
    const auto b = simulate_nict(ph, a.setting, a.seed);
    CHECK(a.nict.values == b.nict.values);
    CHECK(a.ict.values == b.ict.values);
}

TEST_CASE("dataset builder counts, round-trips and reruns byte-identically") {
    const auto root = fresh_dir("nictkit_dataset_test");
    std::vector<VolumeRef> vols;
    for (int v = 0; v < 2; ++v) {
        Volume vol;
        for (int s = 0; s < 10; ++s) vol.slices.push_back(random_phantom(16, 10 * v + s));
        const auto path = root / ("vol" + std::to_string(v) + ".nvol");
        save_volume(path, vol);
        vols.push_back({"vol" + std::to_string(v), path, "body"});
    }
    DatasetRequest req;
    req.volumes = vols;
    req.settings = {kAllKinds.begin(), kAllKinds.end()};
    req.degrees = {DefectDegree::Mid};
    req.out_dir = root / "out";
    req.simulation.num_views = 90;
    const auto m = build_dataset(req);
    CHECK(m.total_pairs == 60);
    CHECK(m.unique_slices == 20);
    std::size_t by_kind = 0;
    for (const auto& [k, n] : m.totals) by_kind += n;
    CHECK(by_kind == 60);

    const auto pair = load_pair(pair_path(req.out_dir, NictKind::SparseView, DefectDegree::Mid, "vol1", 3));
    const auto again = simulate_nict(ingest_hu(random_phantom(16, 13)), defect_preset(NictKind::SparseView, DefectDegree::Mid),
                                     pair_seed("vol1", 3, NictKind::SparseView, DefectDegree::Mid), req.simulation);
    CHECK(pair.nict.values == again.nict.values);
    CHECK(pair.ict.values == again.ict.values);
    CHECK(pair.seed == again.seed);

    const auto manifest_bytes = read_file(req.out_dir / "manifest.json");
    const auto pair_bytes = read_file(pair_path(req.out_dir, NictKind::LowDose, DefectDegree::Mid, "vol0", 7));
    build_dataset(req);
    CHECK(read_file(req.out_dir / "manifest.json") == manifest_bytes);
    CHECK(read_file(pair_path(req.out_dir, NictKind::LowDose, DefectDegree::Mid, "vol0", 7)) == pair_bytes);

    const auto loaded = load_manifest(req.out_dir);
    CHECK(loaded.total_pairs == 60);
    CHECK(dataset_volumes(req.out_dir, loaded).size() == 6);

    req.volumes.push_back({"ghost", root / "ghost.nvol", "body"});
    CHECK_THROWS_AS(build_dataset(req), IoError);
}
