#pragma once

#include "exitlm/lite.hpp"
#include "exitlm/model.hpp"

#include <filesystem>
#include <string>

namespace exitlm {

// Checkpoint = JSON header (config, schedules, tensor table, format version)
// followed by raw little-endian float64 tensor data.
struct Checkpoint {
  TransformerModel<Real> model;
  ExitSchedule schedule;
  WeightSchedule weights;
  long trained_steps = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace exitlm
