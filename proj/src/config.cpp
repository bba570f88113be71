#include "regguide/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace regguide {

using nlohmann::ordered_json;

std::string to_string(DatasetKind k) { return k == DatasetKind::shapes_2d ? "shapes_2d" : "mixture_1d"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "mixture_1d") return DatasetKind::mixture_1d;
  if (s == "shapes_2d") return DatasetKind::shapes_2d;
  throw std::invalid_argument("unknown dataset kind: " + s);
}

GaussianMixture MixtureParams::to_mixture() const {
  auto g = GaussianMixture::univariate(weights, means, stddevs);
  g.validate();
  return g;
}

TrainOptions TrainConfig::options() const {
  TrainOptions o;
  o.lr = lr;
  o.epochs = epochs;
  o.batch_size = batch_size;
  o.dropout = dropout;
  o.weight_decay = weight_decay;
  o.bad_epoch = std::max(1, static_cast<int>(std::lround(bad_fraction * epochs)));
  return o;
}

std::vector<GuidanceConfig> default_guidance() {
  GuidanceConfig plain;
  plain.method = GuidanceMethod::cfg;
  plain.w = 1.0;
  GuidanceConfig reg = plain;
  reg.reg = true;
  return {plain, reg};
}

int ExperimentConfig::real_classes() const {
  return dataset.kind == DatasetKind::mixture_1d ? 1 : static_cast<int>(dataset.shapes.size());
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return name == o.name && dataset == o.dataset && schedule == o.schedule && model == o.model &&
         train == o.train && guidance == o.guidance && oracle == o.oracle && compare == o.compare &&
         verify == o.verify && seeds == o.seeds && output_dir == o.output_dir;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw std::invalid_argument("config name must not be empty");
  if (dataset.samples_per_class < 1) throw std::invalid_argument("samples_per_class must be positive");
  if (dataset.kind == DatasetKind::mixture_1d) {
    dataset.conditional.to_mixture();
    dataset.unconditional.to_mixture();
    if (model.input_dim != 1) throw std::invalid_argument("1D mixtures need model.input_dim = 1");
  } else {
    if (dataset.shapes.empty()) throw std::invalid_argument("shape dataset needs at least one shape file");
    if (!(dataset.shape_sigma > 0.0)) throw std::invalid_argument("shape sigma must be positive");
    if (model.input_dim != 2) throw std::invalid_argument("2D shapes need model.input_dim = 2");
  }
  schedule.build();
  model.validate();
  if (model.output_dim != 0) throw std::invalid_argument("model must have a noise head");
  if (model.num_classes < real_classes() + 1) {
    throw std::invalid_argument("model.num_classes must cover every class plus the null label");
  }
  if (train.epochs < 1 || train.batch_size < 1 || !(train.lr > 0.0)) {
    throw std::invalid_argument("training needs positive epochs, batch size and learning rate");
  }
  if (!(train.dropout >= 0.0 && train.dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(train.bad_fraction > 0.0 && train.bad_fraction <= 1.0)) {
    throw std::invalid_argument("bad_fraction must be in (0, 1]");
  }
  if (!train.separate_uncond && !(train.dropout > 0.0)) {
    throw std::invalid_argument("a shared network needs label dropout > 0 for CFG");
  }
  for (const auto& g : guidance) g.validate(schedule.steps);
  for (int t : oracle.t_values) {
    if (t < 1 || t > schedule.steps) throw std::invalid_argument("oracle t_values must lie in 1..T");
  }
  if (oracle.grid_points < 1) throw std::invalid_argument("oracle grid must have at least one point");
  if (oracle.grid_lo.size() != oracle.grid_hi.size()) {
    throw std::invalid_argument("oracle grid bounds differ in length");
  }
  if (!oracle.grid_lo.empty() && static_cast<int>(oracle.grid_lo.size()) != model.input_dim) {
    throw std::invalid_argument("oracle grid bounds must match the data dimension");
  }
  if (oracle.rollouts < 1) throw std::invalid_argument("oracle rollouts must be positive");
  if (!(oracle.rel_step > 0.0)) throw std::invalid_argument("oracle rel_step must be positive");
  if (!(oracle.outlier_percentile > 0.0 && oracle.outlier_percentile <= 100.0)) {
    throw std::invalid_argument("outlier percentile must be in (0, 100]");
  }
  if (oracle.labels.empty()) throw std::invalid_argument("oracle needs at least one class label");
  for (int y : oracle.labels) {
    if (y < 0 || y >= real_classes()) throw std::invalid_argument("oracle label outside the dataset classes");
  }
  if (compare.mode_samples < 1) throw std::invalid_argument("mode_samples must be positive");
  if (verify.chains < 0 || verify.max_states < 1 || verify.max_steps < 1) {
    throw std::invalid_argument("chain suite sizes must be positive");
  }
  if (verify.bias_samples < 1 || verify.bias_rollouts < 1) {
    throw std::invalid_argument("bias audit sizes must be positive");
  }
}

namespace {

void check_keys(const ordered_json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read(const ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ordered_json mixture_json(const MixtureParams& m) {
  return {{"weights", m.weights}, {"means", m.means}, {"stddevs", m.stddevs}};
}

MixtureParams mixture_from(const ordered_json& j, const std::string& where) {
  check_keys(j, {"weights", "means", "stddevs"}, where);
  MixtureParams m;
  read(j, "weights", m.weights);
  read(j, "means", m.means);
  read(j, "stddevs", m.stddevs);
  return m;
}

ordered_json guidance_json(const GuidanceConfig& g) {
  ordered_json j;
  j["method"] = to_string(g.method);
  j["w"] = g.w;
  j["schedule"] = to_string(g.schedule);
  j["cosine_power"] = g.cosine_power;
  j["interval"] = {g.interval_lo, g.interval_hi};
  j["reg"] = g.reg;
  j["bad_model"] = g.bad_model;
  j["classifier"] = g.classifier;
  return j;
}

GuidanceConfig guidance_from(const ordered_json& j, int steps) {
  check_keys(j, {"method", "w", "schedule", "cosine_power", "interval", "interval_fraction", "reg",
                 "bad_model", "classifier"},
             "guidance");
  GuidanceConfig g;
  if (j.contains("method")) g.method = guidance_method_from_string(j.at("method").get<std::string>());
  read(j, "w", g.w);
  if (j.contains("schedule")) g.schedule = weight_schedule_from_string(j.at("schedule").get<std::string>());
  read(j, "cosine_power", g.cosine_power);
  if (j.contains("interval") && j.contains("interval_fraction")) {
    throw std::invalid_argument("give the guidance interval in steps or as a fraction, not both");
  }
  if (j.contains("interval")) {
    const auto v = j.at("interval").get<std::vector<int>>();
    if (v.size() != 2) throw std::invalid_argument("interval needs two bounds");
    g.interval_lo = v[0];
    g.interval_hi = v[1];
  }
  if (j.contains("interval_fraction")) {
    const auto v = j.at("interval_fraction").get<std::vector<double>>();
    if (v.size() != 2 || !(v[0] >= 0.0 && v[0] <= v[1] && v[1] <= 1.0)) {
      throw std::invalid_argument("interval_fraction needs two bounds within [0, 1]");
    }
    g.interval_lo = std::max(1, static_cast<int>(std::ceil(v[0] * steps)));
    g.interval_hi = std::max(g.interval_lo, static_cast<int>(std::floor(v[1] * steps)));
  }
  read(j, "reg", g.reg);
  read(j, "bad_model", g.bad_model);
  read(j, "classifier", g.classifier);
  g.validate(steps);
  return g;
}

ordered_json to_ordered(const ExperimentConfig& c) {
  ordered_json j;
  j["name"] = c.name;
  j["dataset"] = {{"kind", to_string(c.dataset.kind)},
                  {"conditional", mixture_json(c.dataset.conditional)},
                  {"unconditional", mixture_json(c.dataset.unconditional)},
                  {"shapes", c.dataset.shapes},
                  {"shape_sigma", c.dataset.shape_sigma},
                  {"samples_per_class", c.dataset.samples_per_class}};
  j["schedule"] = {{"steps", c.schedule.steps},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["model"] = {{"input_dim", c.model.input_dim},
                {"embed_dim", c.model.embed_dim},
                {"hidden_dims", c.model.hidden_dims},
                {"num_classes", c.model.num_classes},
                {"activation", to_string(c.model.activation)},
                {"coord_scale", c.model.coord_scale},
                {"time_scale", c.model.time_scale}};
  j["train"] = {{"lr", c.train.lr},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"dropout", c.train.dropout},
                {"weight_decay", c.train.weight_decay},
                {"bad_fraction", c.train.bad_fraction},
                {"separate_uncond", c.train.separate_uncond}};
  ordered_json g = ordered_json::array();
  for (const auto& x : c.guidance) g.push_back(guidance_json(x));
  j["guidance"] = g;
  j["oracle"] = {{"t_values", c.oracle.t_values},
                 {"grid_lo", c.oracle.grid_lo},
                 {"grid_hi", c.oracle.grid_hi},
                 {"grid_points", c.oracle.grid_points},
                 {"padding", c.oracle.padding},
                 {"rollouts", c.oracle.rollouts},
                 {"sampler", to_string(c.oracle.kind)},
                 {"rel_step", c.oracle.rel_step},
                 {"outlier_percentile", c.oracle.outlier_percentile},
                 {"w", c.oracle.w},
                 {"labels", c.oracle.labels}};
  j["compare"] = {{"win_t_values", c.compare.win_t_values},
                  {"mode_w", c.compare.mode_w},
                  {"mode_samples", c.compare.mode_samples},
                  {"mode_boundary", c.compare.mode_boundary}};
  j["verify"] = {{"chains", c.verify.chains},
                 {"max_states", c.verify.max_states},
                 {"max_steps", c.verify.max_steps},
                 {"bias_t_values", c.verify.bias_t_values},
                 {"bias_samples", c.verify.bias_samples},
                 {"bias_rollouts", c.verify.bias_rollouts},
                 {"bound_safety", c.verify.bound_safety},
                 {"max_violation_fraction", c.verify.max_violation_fraction}};
  j["seeds"] = {{"data", c.seeds.data},
                {"train", c.seeds.train},
                {"sample", c.seeds.sample},
                {"oracle", c.seeds.oracle},
                {"verify", c.seeds.verify}};
  j["output_dir"] = c.output_dir;
  return j;
}

}  // namespace

std::string to_json(const ExperimentConfig& cfg) { return to_ordered(cfg).dump(2) + "\n"; }

std::string to_json(const GuidanceConfig& g) { return guidance_json(g).dump(); }

GuidanceConfig guidance_from_json(const std::string& text, int steps) {
  return guidance_from(ordered_json::parse(text), steps);
}

ExperimentConfig config_from_json(const std::string& text) {
  const ordered_json j = ordered_json::parse(text);
  check_keys(j, {"name", "dataset", "schedule", "model", "train", "guidance", "oracle", "compare",
                 "verify", "seeds", "output_dir"},
             "config");
  ExperimentConfig c;
  read(j, "name", c.name);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"kind", "conditional", "unconditional", "shapes", "shape_sigma", "samples_per_class"},
               "dataset");
    if (d.contains("kind")) c.dataset.kind = dataset_kind_from_string(d.at("kind").get<std::string>());
    if (d.contains("conditional")) c.dataset.conditional = mixture_from(d.at("conditional"), "dataset.conditional");
    if (d.contains("unconditional")) {
      c.dataset.unconditional = mixture_from(d.at("unconditional"), "dataset.unconditional");
    }
    read(d, "shapes", c.dataset.shapes);
    read(d, "shape_sigma", c.dataset.shape_sigma);
    read(d, "samples_per_class", c.dataset.samples_per_class);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, {"steps", "beta_start", "beta_end"}, "schedule");
    read(s, "steps", c.schedule.steps);
    read(s, "beta_start", c.schedule.beta_start);
    read(s, "beta_end", c.schedule.beta_end);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"input_dim", "embed_dim", "hidden_dims", "num_classes", "activation", "coord_scale",
                   "time_scale"},
               "model");
    read(m, "input_dim", c.model.input_dim);
    read(m, "embed_dim", c.model.embed_dim);
    read(m, "hidden_dims", c.model.hidden_dims);
    read(m, "num_classes", c.model.num_classes);
    if (m.contains("activation")) c.model.activation = activation_from_string(m.at("activation").get<std::string>());
    read(m, "coord_scale", c.model.coord_scale);
    read(m, "time_scale", c.model.time_scale);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"lr", "epochs", "batch_size", "dropout", "weight_decay", "bad_fraction", "separate_uncond"},
               "train");
    read(t, "lr", c.train.lr);
    read(t, "epochs", c.train.epochs);
    read(t, "batch_size", c.train.batch_size);
    read(t, "dropout", c.train.dropout);
    read(t, "weight_decay", c.train.weight_decay);
    read(t, "bad_fraction", c.train.bad_fraction);
    read(t, "separate_uncond", c.train.separate_uncond);
  }
  if (j.contains("guidance")) {
    for (const auto& g : j.at("guidance")) c.guidance.push_back(guidance_from(g, c.schedule.steps));
  } else {
    c.guidance = default_guidance();
  }
  if (j.contains("oracle")) {
    const auto& o = j.at("oracle");
    check_keys(o, {"t_values", "grid_lo", "grid_hi", "grid_points", "padding", "rollouts", "sampler",
                   "rel_step", "outlier_percentile", "w", "labels"},
               "oracle");
    read(o, "t_values", c.oracle.t_values);
    read(o, "grid_lo", c.oracle.grid_lo);
    read(o, "grid_hi", c.oracle.grid_hi);
    read(o, "grid_points", c.oracle.grid_points);
    read(o, "padding", c.oracle.padding);
    read(o, "rollouts", c.oracle.rollouts);
    if (o.contains("sampler")) c.oracle.kind = sampler_kind_from_string(o.at("sampler").get<std::string>());
    read(o, "rel_step", c.oracle.rel_step);
    read(o, "outlier_percentile", c.oracle.outlier_percentile);
    read(o, "w", c.oracle.w);
    read(o, "labels", c.oracle.labels);
  }
  if (j.contains("compare")) {
    const auto& o = j.at("compare");
    check_keys(o, {"win_t_values", "mode_w", "mode_samples", "mode_boundary"}, "compare");
    read(o, "win_t_values", c.compare.win_t_values);
    read(o, "mode_w", c.compare.mode_w);
    read(o, "mode_samples", c.compare.mode_samples);
    read(o, "mode_boundary", c.compare.mode_boundary);
  }
  if (j.contains("verify")) {
    const auto& o = j.at("verify");
    check_keys(o, {"chains", "max_states", "max_steps", "bias_t_values", "bias_samples", "bias_rollouts",
                   "bound_safety", "max_violation_fraction"},
               "verify");
    read(o, "chains", c.verify.chains);
    read(o, "max_states", c.verify.max_states);
    read(o, "max_steps", c.verify.max_steps);
    read(o, "bias_t_values", c.verify.bias_t_values);
    read(o, "bias_samples", c.verify.bias_samples);
    read(o, "bias_rollouts", c.verify.bias_rollouts);
    read(o, "bound_safety", c.verify.bound_safety);
    read(o, "max_violation_fraction", c.verify.max_violation_fraction);
  }
  if (j.contains("seeds")) {
    const auto& o = j.at("seeds");
    check_keys(o, {"data", "train", "sample", "oracle", "verify"}, "seeds");
    read(o, "data", c.seeds.data);
    read(o, "train", c.seeds.train);
    read(o, "sample", c.seeds.sample);
    read(o, "oracle", c.seeds.oracle);
    read(o, "verify", c.seeds.verify);
  }
  read(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = config_from_json(ss.str());
  c.base_dir = std::filesystem::absolute(path).parent_path();
  return c;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  // Only fields that change what training produces.
  const ordered_json j = to_ordered(cfg);
  const ordered_json subset = {{"dataset", j["dataset"]}, {"schedule", j["schedule"]}, {"model", j["model"]},
                               {"train", j["train"]}, {"seeds", {{"data", cfg.seeds.data}, {"train", cfg.seeds.train}}}};
  const std::string text = subset.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::filesystem::path output_directory(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return resolve_path(cfg, cfg.output_dir);
  const char* root = std::getenv("REGGUIDE_OUTPUT_ROOT");
  const std::filesystem::path base = (root && *root) ? std::filesystem::path(root) : std::filesystem::path("runs");
  return base / cfg.name;
}

std::filesystem::path resolve_path(const ExperimentConfig& cfg, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute() || cfg.base_dir.empty()) return path;
  return cfg.base_dir / path;
}

}  // namespace regguide
