#include "nictkit/dataset.hpp"

#include <cstdio>

#include "nictkit/binary_io.hpp"
#include "nictkit/error.hpp"
#include "nictkit/image_io.hpp"
#include "nictkit/random.hpp"

namespace nictkit {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<VolumeRef> read_volume_list(const fs::path& list_path) {
    json j;
    try {
        j = json::parse(read_file(list_path));
    } catch (const json::exception& e) {
        throw InvalidConfig(list_path.string() + ": " + e.what());
    }
    if (!j.contains("volumes") || !j["volumes"].is_array())
        throw InvalidConfig(list_path.string() + ": expected a \"volumes\" array");
    std::vector<VolumeRef> out;
    for (const auto& v : j["volumes"]) {
        VolumeRef ref;
        ref.id = v.at("id").get<std::string>();
        ref.path = v.at("path").get<std::string>();
        ref.region = v.value("region", std::string("unknown"));
        if (ref.path.is_relative()) ref.path = list_path.parent_path() / ref.path;
        out.push_back(std::move(ref));
    }
    return out;
}

std::uint64_t pair_seed(const std::string& volume_id, std::size_t slice, NictKind kind, DefectDegree degree,
                        std::uint64_t base_seed) {
    return fnv1a(volume_id + "|" + std::to_string(slice) + "|" + to_string(kind) + "|" + to_string(degree),
                 0xcbf29ce484222325ULL ^ base_seed);
}

fs::path pair_path(const fs::path& out_dir, NictKind kind, DefectDegree degree, const std::string& volume_id,
                   std::size_t slice) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04zu.pair", slice);
    return out_dir / to_string(kind) / to_string(degree) / volume_id / name;
}

json DatasetManifest::to_json() const {
    json j;
    j["entries"] = json::array();
    for (const auto& e : entries) {
        j["entries"].push_back({{"volume_id", e.volume.id},
                                {"volume_path", e.volume.path.string()},
                                {"region", e.volume.region},
                                {"slice_count", e.slice_count},
                                {"settings_applied", e.settings_applied},
                                {"seeds", e.seeds}});
    }
    j["totals"] = totals;
    j["total_pairs"] = total_pairs;
    j["unique_slices"] = unique_slices;
    std::vector<std::string> s, d;
    for (auto k : settings) s.push_back(to_string(k));
    for (auto g : degrees) d.push_back(to_string(g));
    j["settings"] = s;
    j["degrees"] = d;
    j["seed"] = seed;
    return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
    DatasetManifest m;
    for (const auto& e : j.at("entries")) {
        ManifestEntry me;
        me.volume.id = e.at("volume_id").get<std::string>();
        me.volume.path = e.at("volume_path").get<std::string>();
        me.volume.region = e.at("region").get<std::string>();
        me.slice_count = e.at("slice_count").get<std::size_t>();
        me.settings_applied = e.at("settings_applied").get<std::vector<std::string>>();
        me.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
        m.entries.push_back(std::move(me));
    }
    m.totals = j.at("totals").get<std::map<std::string, std::size_t>>();
    m.total_pairs = j.at("total_pairs").get<std::size_t>();
    m.unique_slices = j.at("unique_slices").get<std::size_t>();
    for (const auto& s : j.at("settings")) m.settings.push_back(parse_kind(s.get<std::string>()));
    for (const auto& d : j.at("degrees")) m.degrees.push_back(parse_degree(d.get<std::string>()));
    m.seed = j.value("seed", std::uint64_t{0});
    return m;
}

DatasetManifest build_dataset(const DatasetRequest& request) {
    if (request.settings.empty() || request.degrees.empty())
        throw InvalidConfig("build_dataset needs at least one setting and one degree");
    for (const auto& v : request.volumes)
        if (!fs::exists(v.path)) throw IoError("input volume not found: " + v.path.string());

    DatasetManifest manifest;
    manifest.settings = request.settings;
    manifest.degrees = request.degrees;
    manifest.seed = request.seed;
    for (auto k : request.settings) manifest.totals[to_string(k)] = 0;

    for (const auto& ref : request.volumes) {
        const Volume vol = load_volume(ref.path);
        ManifestEntry entry;
        entry.volume = ref;
        entry.slice_count = vol.slices.size();
        for (auto k : request.settings)
            for (auto d : request.degrees) entry.settings_applied.push_back(to_string(k) + "/" + to_string(d));

        for (std::size_t s = 0; s < vol.slices.size(); ++s) {
            for (auto k : request.settings) {
                for (auto d : request.degrees) {
                    const std::uint64_t seed = pair_seed(ref.id, s, k, d, request.seed);
                    NictPair pair = simulate_nict(vol.slices[s], defect_preset(k, d, request.presets), seed,
                                                  request.simulation);
                    pair.volume_id = ref.id;
                    pair.slice = s;
                    save_pair(pair_path(request.out_dir, k, d, ref.id, s), pair);
                    entry.seeds.push_back(seed);
                    ++manifest.totals[to_string(k)];
                    ++manifest.total_pairs;
                }
            }
        }
        manifest.unique_slices += vol.slices.size();
        manifest.entries.push_back(std::move(entry));
    }
    write_file_atomic(request.out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    return manifest;
}

DatasetManifest load_manifest(const fs::path& out_dir) {
    const auto path = out_dir / "manifest.json";
    try {
        return DatasetManifest::from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
}

std::vector<NictVolume> dataset_volumes(const fs::path& out_dir, const DatasetManifest& manifest) {
    std::vector<NictVolume> out;
    for (const auto& e : manifest.entries) {
        for (auto k : manifest.settings) {
            for (auto d : manifest.degrees) {
                NictVolume v;
                v.volume_id = e.volume.id;
                v.kind = k;
                v.degree = d;
                for (std::size_t s = 0; s < e.slice_count; ++s) v.pair_files.push_back(pair_path(out_dir, k, d, e.volume.id, s));
                out.push_back(std::move(v));
            }
        }
    }
    return out;
}

}  // namespace nictkit
