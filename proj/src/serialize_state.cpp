#include "abcp/child.hpp"
#include "abcp/serialize.hpp"

namespace abcp {

using nlohmann::json;

void save_child_model(const std::string& path, const ChildModel& m) {
  json convs = json::array();
  for (const ConvLayer& cl : m.convs)
    convs.push_back(json{{"filter", cl.filter},
                         {"gamma", cl.gamma},
                         {"beta", cl.beta},
                         {"run_mean", cl.run_mean},
                         {"run_var", cl.run_var}});
  const json j{{"schema", kSchemaChild},
               {"spec", spec_to_json(m.spec)},
               {"num_classes", m.num_classes},
               {"convs", std::move(convs)},
               {"head_w", m.head_w},
               {"head_b", m.head_b}};
  write_json_file(path, j);
}

ChildModel load_child_model(const std::string& path) {
  const json j = read_json_file(path);
  require_schema(j, kSchemaChild);
  ChildModel m;
  m.spec = spec_from_json(j.at("spec"));
  m.num_classes = j.at("num_classes").get<int>();
  for (const json& jc : j.at("convs")) {
    ConvLayer cl;
    cl.filter = jc.at("filter").get<std::vector<double>>();
    cl.gamma = jc.at("gamma").get<std::vector<double>>();
    cl.beta = jc.at("beta").get<std::vector<double>>();
    cl.run_mean = jc.at("run_mean").get<std::vector<double>>();
    cl.run_var = jc.at("run_var").get<std::vector<double>>();
    m.convs.push_back(std::move(cl));
  }
  m.head_w = j.at("head_w").get<std::vector<double>>();
  m.head_b = j.at("head_b").get<std::vector<double>>();
  if (m.convs.size() != m.spec.layers.size())
    throw std::runtime_error("checkpoint layer count mismatch: " + path);
  for (std::size_t i = 0; i < m.convs.size(); ++i) {
    const LayerSpec& ls = m.spec.layers[i];
    const ConvLayer& cl = m.convs[i];
    const std::size_t nw = static_cast<std::size_t>(ls.out_ch) * ls.in_ch *
                           ls.kernel * ls.kernel;
    if (cl.filter.size() != nw ||
        cl.gamma.size() != static_cast<std::size_t>(ls.out_ch) ||
        cl.beta.size() != static_cast<std::size_t>(ls.out_ch) ||
        cl.run_mean.size() != static_cast<std::size_t>(ls.out_ch) ||
        cl.run_var.size() != static_cast<std::size_t>(ls.out_ch))
      throw std::runtime_error("checkpoint layer shape mismatch: " + path);
  }
  if (m.head_w.size() != static_cast<std::size_t>(m.num_classes) *
                             m.feat_dim() ||
      m.head_b.size() != static_cast<std::size_t>(m.num_classes))
    throw std::runtime_error("checkpoint head shape mismatch: " + path);
  return m;
}

}  // namespace abcp
