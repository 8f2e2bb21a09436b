#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/sha256.hpp"

namespace carrygpt {

#ifndef CARRYGPT_BUILD_ID
#define CARRYGPT_BUILD_ID "unknown"
#endif

// Written before a command starts working: resolved configuration, seed,
// build id and input hashes pin down everything needed to reproduce the
// run bit-exactly.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["command"] = command;
        j["config"] = config;
        j["seed"] = seed;
        j["build"] = CARRYGPT_BUILD_ID;
        nlohmann::json hashes = nlohmann::json::object();
        for (const auto& path : inputs) hashes[path] = Sha256::hex(Sha256::hash_file(path));
        j["input_hashes"] = hashes;
        j["outputs"] = outputs;
        return j;
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write manifest: " + path);
        out << to_json().dump(2) << "\n";
    }
};

} // namespace carrygpt
