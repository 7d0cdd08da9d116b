#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "nictkit/error.hpp"

namespace nictkit {

// Reads an object field by field; finish() rejects any key never asked for.
class JsonFields {
public:
    JsonFields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw InvalidConfig(where_ + ": expected a JSON object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const nlohmann::json& raw(const std::string& key) {
        if (!has(key)) throw InvalidConfig(where_ + ": missing required key '" + key + "'");
        return j_.at(key);
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        if (!has(key)) return fallback;
        return convert<T>(key);
    }

    template <typename T>
    T require(const std::string& key) {
        raw(key);
        return convert<T>(key);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw InvalidConfig(where_ + ": unknown key '" + key + "'");
    }

private:
    template <typename T>
    T convert(const std::string& key) {
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw InvalidConfig(where_ + ": bad value for '" + key + "': " + e.what());
        }
    }

    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace nictkit
