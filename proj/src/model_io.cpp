#include "exitlm/model_io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>

namespace exitlm {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'E', 'X', 'I', 'T', 'L', 'M', '0', '1'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto& model = const_cast<TransformerModel<Real>&>(ckpt.model);
  auto views = param_views(model);

  json header;
  header["format_version"] = 1;
  header["scalar"] = "f64";
  const auto& c = model.config;
  header["model_config"] = {{"n_layers", c.n_layers},   {"d_model", c.d_model},
                            {"n_heads", c.n_heads},     {"ffn_mult", c.ffn_mult},
                            {"max_seq", c.max_seq},     {"vocab_size", c.vocab_size},
                            {"seed", c.seed}};
  header["exit_schedule"] = ckpt.schedule.exit_layers;
  json wsj;
  wsj["budget_first_half"] = ckpt.weights.budget_first_half;
  wsj["budget_second_half"] = ckpt.weights.budget_second_half;
  wsj["budget_final"] = ckpt.weights.budget_final;
  wsj["decay"] = ckpt.weights.decay;
  json wmap = json::object();
  for (const auto& [l, w] : ckpt.weights.weights) wmap[std::to_string(l)] = w;
  wsj["weights"] = wmap;
  header["weight_schedule"] = wsj;
  header["trained_steps"] = ckpt.trained_steps;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& v : views) {
    tensors.push_back({{"name", v.name}, {"rows", v.rows}, {"cols", v.cols}});
    offset += static_cast<std::uint64_t>(v.size());
  }
  header["tensors"] = tensors;

  std::ofstream out(path, std::ios::binary);
  EXITLM_CHECK(out.good(), "cannot write checkpoint: " + path.string());
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& v : views) {
    out.write(reinterpret_cast<const char*>(v.data),
              static_cast<std::streamsize>(v.size() * sizeof(Real)));
  }
  EXITLM_CHECK(out.good(), "checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  EXITLM_CHECK(in.good(), "cannot open checkpoint: " + path.string() +
                              " (run `exitlm train-lite` first)");
  char magic[8];
  in.read(magic, sizeof(magic));
  EXITLM_CHECK(in.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
               "not an exitlm checkpoint: " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  EXITLM_CHECK(in.good(), "truncated checkpoint header");
  json header = json::parse(hs);
  EXITLM_CHECK(header.at("format_version").get<int>() == 1,
               "unsupported checkpoint version");
  EXITLM_CHECK(header.at("scalar").get<std::string>() == "f64",
               "unsupported checkpoint scalar type");

  Checkpoint ckpt;
  const auto& mc = header.at("model_config");
  ckpt.model.config.n_layers = mc.at("n_layers");
  ckpt.model.config.d_model = mc.at("d_model");
  ckpt.model.config.n_heads = mc.at("n_heads");
  ckpt.model.config.ffn_mult = mc.at("ffn_mult");
  ckpt.model.config.max_seq = mc.at("max_seq");
  ckpt.model.config.vocab_size = mc.at("vocab_size");
  ckpt.model.config.seed = mc.at("seed");
  allocate_params(ckpt.model);

  ckpt.schedule.n_layers = ckpt.model.config.n_layers;
  ckpt.schedule.exit_layers = header.at("exit_schedule").get<std::vector<int>>();
  ckpt.schedule.validate();
  const auto& wsj = header.at("weight_schedule");
  ckpt.weights.budget_first_half = wsj.at("budget_first_half");
  ckpt.weights.budget_second_half = wsj.at("budget_second_half");
  ckpt.weights.budget_final = wsj.at("budget_final");
  ckpt.weights.decay = wsj.at("decay");
  for (const auto& [k, v] : wsj.at("weights").items()) {
    ckpt.weights.weights[std::stoi(k)] = v.get<double>();
  }
  ckpt.trained_steps = header.value("trained_steps", 0L);

  auto views = param_views(ckpt.model);
  const auto& tensors = header.at("tensors");
  EXITLM_CHECK(tensors.size() == views.size(), "checkpoint tensor table mismatch");
  for (std::size_t i = 0; i < views.size(); ++i) {
    EXITLM_CHECK(tensors[i].at("name") == views[i].name &&
                     tensors[i].at("rows") == views[i].rows &&
                     tensors[i].at("cols") == views[i].cols,
                 "checkpoint tensor shape mismatch: " + views[i].name);
    in.read(reinterpret_cast<char*>(views[i].data),
            static_cast<std::streamsize>(views[i].size() * sizeof(Real)));
  }
  EXITLM_CHECK(in.good(), "truncated checkpoint payload");
  return ckpt;
}

}  // namespace exitlm
