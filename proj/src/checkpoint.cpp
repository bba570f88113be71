#include "regguide/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace regguide {

using nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "regguide-checkpoint";
constexpr int kVersion = 1;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

template <typename Span>
std::vector<double> to_vec(Span s) {
  return std::vector<double>(s.begin(), s.end());
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  const MlpSpec& sp = ck.net.spec();
  ordered_json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["spec"] = {{"input_dim", sp.input_dim},
               {"embed_dim", sp.embed_dim},
               {"hidden_dims", sp.hidden_dims},
               {"num_classes", sp.num_classes},
               {"activation", to_string(sp.activation)},
               {"output_dim", sp.output_dim},
               {"coord_scale", sp.coord_scale},
               {"time_scale", sp.time_scale}};
  j["unconditional_capable"] = ck.net.unconditional_capable();
  j["schedule"] = {{"beta", to_vec(ck.schedule.betas())},
                   {"alpha", to_vec(ck.schedule.alphas())},
                   {"alpha_bar", to_vec(ck.schedule.alpha_bars())},
                   {"sigma2", to_vec(ck.schedule.sigma2s())}};
  // Seeds and hashes are kept as strings so 64-bit values survive other JSON readers.
  j["metadata"] = {{"epoch", ck.meta.epoch},
                   {"loss", ck.meta.loss},
                   {"seed", std::to_string(ck.meta.seed)},
                   {"config_hash", hex64(ck.meta.config_hash)}};
  j["parameters"] = to_vec(ck.net.parameters());
  return j.dump(1) + "\n";
}

Checkpoint parse_checkpoint(const std::string& text) {
  const ordered_json j = ordered_json::parse(text);
  if (j.value("format", std::string{}) != kFormat) throw std::runtime_error("not a regguide checkpoint");
  if (j.at("version").get<int>() != kVersion) throw std::runtime_error("unsupported checkpoint version");
  const auto& s = j.at("spec");
  MlpSpec sp;
  sp.input_dim = s.at("input_dim").get<int>();
  sp.embed_dim = s.at("embed_dim").get<int>();
  sp.hidden_dims = s.at("hidden_dims").get<std::vector<int>>();
  sp.num_classes = s.at("num_classes").get<int>();
  sp.activation = activation_from_string(s.at("activation").get<std::string>());
  sp.output_dim = s.at("output_dim").get<int>();
  sp.coord_scale = s.at("coord_scale").get<double>();
  sp.time_scale = s.at("time_scale").get<double>();
  sp.validate();

  Checkpoint ck{NoisePredictor(sp), Schedule{}, CheckpointMeta{}};
  const auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != sp.parameter_count()) throw std::runtime_error("checkpoint parameter count mismatch");
  ck.net.set_parameters(params);
  ck.net.set_unconditional_capable(j.at("unconditional_capable").get<bool>());

  const auto& sc = j.at("schedule");
  ck.schedule = Schedule::from_arrays(sc.at("beta").get<std::vector<double>>(),
                                      sc.at("alpha").get<std::vector<double>>(),
                                      sc.at("alpha_bar").get<std::vector<double>>(),
                                      sc.at("sigma2").get<std::vector<double>>());
  const auto& m = j.at("metadata");
  ck.meta.epoch = m.at("epoch").get<int>();
  ck.meta.loss = m.at("loss").get<double>();
  ck.meta.seed = std::stoull(m.at("seed").get<std::string>());
  ck.meta.config_hash = parse_hex64(m.at("config_hash").get<std::string>());
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << serialize_checkpoint(ck);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

Checkpoint load_checkpoint_checked(const std::filesystem::path& path, std::uint64_t expected_hash) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.config_hash != expected_hash) {
    throw std::runtime_error("checkpoint " + path.string() + " was trained with a different configuration");
  }
  return ck;
}

}  // namespace regguide
