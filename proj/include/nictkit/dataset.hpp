#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nictkit/nict_sim.hpp"

namespace nictkit {

struct VolumeRef {
    std::string id;
    std::filesystem::path path;
    std::string region;
};

/// Reads {"volumes": [{"id", "path", "region"}]}; relative paths resolve
/// against the list file's directory.
std::vector<VolumeRef> read_volume_list(const std::filesystem::path& list_path);

struct DatasetRequest {
    std::vector<VolumeRef> volumes;
    std::vector<NictKind> settings;
    std::vector<DefectDegree> degrees;
    std::filesystem::path out_dir;
    DefectPresets presets;
    SimulationOptions simulation;
    std::uint64_t seed = 0;  // mixed into every pair seed
};

struct ManifestEntry {
    VolumeRef volume;
    std::size_t slice_count = 0;
    std::vector<std::string> settings_applied;  // "ldct/mid", ...
    std::vector<std::uint64_t> seeds;           // slice-major, then setting, then degree
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::map<std::string, std::size_t> totals;  // pairs per setting kind
    std::size_t total_pairs = 0;
    std::size_t unique_slices = 0;
    std::vector<NictKind> settings;
    std::vector<DefectDegree> degrees;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

std::uint64_t pair_seed(const std::string& volume_id, std::size_t slice, NictKind kind, DefectDegree degree,
                        std::uint64_t base_seed = 0);

/// out_dir/{setting}/{degree}/{volume}/{slice}.pair
std::filesystem::path pair_path(const std::filesystem::path& out_dir, NictKind kind, DefectDegree degree,
                                const std::string& volume_id, std::size_t slice);

/// Simulates every slice x setting x degree and writes pairs plus
/// out_dir/manifest.json. Re-runs on the same inputs are byte-identical.
DatasetManifest build_dataset(const DatasetRequest& request);

DatasetManifest load_manifest(const std::filesystem::path& out_dir);

/// One degraded volume as the training queue sees it.
struct NictVolume {
    std::string volume_id;
    NictKind kind = NictKind::LowDose;
    DefectDegree degree = DefectDegree::Mid;
    std::vector<std::filesystem::path> pair_files;
};

/// Expands a manifest into per-(volume, setting, degree) NICT volumes.
std::vector<NictVolume> dataset_volumes(const std::filesystem::path& out_dir, const DatasetManifest& manifest);

}  // namespace nictkit
