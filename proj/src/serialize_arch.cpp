#include <charconv>
#include <fstream>

#include "abcp/serialize.hpp"

namespace abcp {

using nlohmann::json;

std::string u64_to_string(u64 v) { return std::to_string(v); }

u64 u64_from_string(const std::string& s) {
  u64 v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw std::invalid_argument("not a u64: '" + s + "'");
  return v;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void require_schema(const json& j, const char* expected) {
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_string())
    throw VersionMismatch(std::string("missing schema tag, expected ") + expected);
  const std::string got = j["schema"].get<std::string>();
  if (got != expected)
    throw VersionMismatch("schema mismatch: expected " + std::string(expected) +
                          ", found " + got);
}

namespace {

json kind_to_json(LayerKind k) { return to_string(k); }

LayerKind kind_from_json(const json& j) {
  const std::string s = j.get<std::string>();
  if (s == "ordinary") return LayerKind::Ordinary;
  if (s == "group_first") return LayerKind::GroupFirst;
  if (s == "block_first") return LayerKind::BlockFirst;
  if (s == "block_second") return LayerKind::BlockSecond;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

}  // namespace

json spec_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    json jl{{"id", l.id},        {"kind", kind_to_json(l.kind)},
            {"kernel", l.kernel}, {"in_ch", l.in_ch},
            {"out_ch", l.out_ch}, {"in_h", l.in_h},
            {"in_w", l.in_w},     {"stride", l.stride}};
    jl["block_id"] = l.block_id ? json(*l.block_id) : json(nullptr);
    jl["group_id"] = l.group_id ? json(*l.group_id) : json(nullptr);
    layers.push_back(std::move(jl));
  }
  return json{{"schema", kSchemaArch},
              {"layers", std::move(layers)},
              {"s_frb", spec.s_frb},
              {"head_ids", spec.head_ids}};
}

NetworkSpec spec_from_json(const json& j) {
  require_schema(j, kSchemaArch);
  NetworkSpec spec;
  for (const json& jl : j.at("layers")) {
    LayerSpec l;
    l.id = jl.at("id").get<int>();
    l.kind = kind_from_json(jl.at("kind"));
    l.kernel = jl.at("kernel").get<int>();
    l.in_ch = jl.at("in_ch").get<int>();
    l.out_ch = jl.at("out_ch").get<int>();
    l.in_h = jl.at("in_h").get<int>();
    l.in_w = jl.at("in_w").get<int>();
    l.stride = jl.at("stride").get<int>();
    if (jl.contains("block_id") && !jl["block_id"].is_null())
      l.block_id = jl["block_id"].get<int>();
    if (jl.contains("group_id") && !jl["group_id"].is_null())
      l.group_id = jl["group_id"].get<int>();
    spec.layers.push_back(l);
  }
  for (const json& id : j.at("s_frb")) spec.s_frb.insert(id.get<int>());
  for (const json& id : j.at("head_ids")) spec.head_ids.insert(id.get<int>());
  return spec;
}

json action_to_json(const PruningAction& action) {
  json arr = json::array();
  for (const ActionElement& e : action) {
    if (e.kind == ActionElement::Kind::Block)
      arr.push_back(json{{"b", static_cast<int>(e.value)}});
    else
      arr.push_back(json{{"r", e.value}});
  }
  return arr;
}

PruningAction action_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("action must be a JSON array");
  PruningAction action;
  for (const json& je : j) {
    if (je.contains("b"))
      action.push_back(ActionElement::block(je.at("b").get<int>()));
    else if (je.contains("r"))
      action.push_back(ActionElement::ratio(je.at("r").get<double>()));
    else
      throw std::invalid_argument("action element must carry 'b' or 'r'");
  }
  return action;
}

json mask_to_json(const PruneMask& mask) {
  json arr = json::array();
  for (const LayerMask& m : mask.layers)
    arr.push_back(json{{"removed", m.removed}, {"kept", m.kept}});
  return arr;
}

PruneMask mask_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("mask must be a JSON array");
  PruneMask mask;
  for (const json& jm : j) {
    LayerMask m;
    m.removed = jm.at("removed").get<bool>();
    for (const json& c : jm.at("kept")) m.kept.push_back(c.get<int>());
    mask.layers.push_back(std::move(m));
  }
  return mask;
}

void save_network_spec(const std::string& path, const NetworkSpec& spec) {
  write_json_file(path, spec_to_json(spec));
}

NetworkSpec load_network_spec(const std::string& path) {
  return spec_from_json(read_json_file(path));
}

}  // namespace abcp
