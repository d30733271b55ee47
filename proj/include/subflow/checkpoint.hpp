#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "subflow/policy.hpp"

namespace subflow {

struct Checkpoint {
  nlohmann::json meta;  // env description, policy config, iteration, workflow
  PolicyBundle bundle;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'U', 'B', 'F', 'L', 'O', 'W', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const PolicyBundle& bundle);
/// Throws ContractError on a malformed or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json policy_config_to_json(const PolicyConfig& cfg);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

}  // namespace subflow
