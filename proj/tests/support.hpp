#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "regguide/config.hpp"

namespace regguide::testing {

// A 1D experiment small enough to train and probe in a few seconds.
inline ExperimentConfig tiny_config(const std::string& name, const std::filesystem::path& out) {
  ExperimentConfig c;
  c.name = name;
  c.dataset.samples_per_class = 400;
  c.schedule.steps = 6;
  c.model.embed_dim = 8;
  c.model.hidden_dims = {16, 16};
  c.train.epochs = 4;
  c.train.batch_size = 64;
  c.train.bad_fraction = 0.5;
  c.guidance = default_guidance();
  GuidanceConfig ag;
  ag.method = GuidanceMethod::autog;
  ag.w = 0.5;
  c.guidance.push_back(ag);
  c.oracle.t_values = {1, 3, 5};
  c.oracle.grid_points = 7;
  c.oracle.rollouts = 6;
  c.compare.mode_samples = 300;
  c.verify.chains = 4;
  c.verify.max_states = 3;
  c.verify.max_steps = 3;
  c.verify.bias_t_values = {2, 4};
  c.verify.bias_samples = 300;
  c.verify.bias_rollouts = 8;
  c.output_dir = out.string();
  return c;
}

inline std::filesystem::path write_config(const ExperimentConfig& c, const std::filesystem::path& file) {
  std::filesystem::create_directories(file.parent_path());
  std::ofstream(file) << to_json(c);
  return file;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace regguide::testing
