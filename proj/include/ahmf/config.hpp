#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ahmf/data.hpp"
#include "ahmf/model.hpp"
#include "ahmf/training.hpp"

// Flat key=value run configuration shared by all tool commands. Unknown keys
// are hard errors so a typo in an ablation sweep fails loudly instead of
// silently training the default.

namespace ahmf {

struct RunConfig {
    std::uint64_t seed = 0;
    std::vector<std::string> domains = {"default"};
    // attention rule per domain; anything absent falls back to leftmost
    std::map<std::string, data::DomainRule> rules;
    int n_per_domain = 8;
    data::SceneSpec scene;      // domain_id, rule, and seed are filled per domain
    ModelConfig model;
    train::TrainConfig train;

    data::SceneSpec scene_for(const std::string& domain) const;
    // Pushes the shared knobs into the dependent structs (frame extents from
    // data.h/w, seed everywhere) and validates the result.
    void finalize();
};

// `where` labels errors, e.g. a file path or "--set". Keys apply on top of
// `base`, so callers can preseed defaults (the AHMF_SEED override).
RunConfig parse_config_text(const std::string& text, const std::string& where,
                            RunConfig base = {});
RunConfig load_config(const std::string& path);

// One key=value assignment; used both by the file parser and CLI overrides.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Every key in canonical order, parseable back into an equal RunConfig.
std::string resolved_text(const RunConfig& cfg);

}  // namespace ahmf
