#pragma once

#include <string>

#include <json.hpp>

#include "abcp/arch.hpp"
#include "abcp/common.hpp"

namespace abcp {

// A persisted file carries a schema tag; loading anything else fails loudly.
inline constexpr const char* kSchemaArch = "abcp-arch/1";
inline constexpr const char* kSchemaCtrl = "abcp-ctrl/1";
inline constexpr const char* kSchemaChild = "abcp-child/1";
inline constexpr const char* kSchemaData = "abcp-data/1";

struct VersionMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// u64 values can exceed the 53-bit range JSON numbers survive in every
// consumer, so they are stored as decimal strings.
std::string u64_to_string(u64 v);
u64 u64_from_string(const std::string& s);

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

nlohmann::json action_to_json(const PruningAction& action);
PruningAction action_from_json(const nlohmann::json& j);

nlohmann::json mask_to_json(const PruneMask& mask);
PruneMask mask_from_json(const nlohmann::json& j);

void save_network_spec(const std::string& path, const NetworkSpec& spec);
NetworkSpec load_network_spec(const std::string& path);

// Shared file helpers (deterministic bytes: sorted keys, fixed indent).
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);
void require_schema(const nlohmann::json& j, const char* expected);

}  // namespace abcp
