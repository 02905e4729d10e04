#pragma once

#include <string>
#include <vector>

#include "saghog/optim.hpp"

namespace saghog::ad {

// Checkpoint container: magic "SGCK", u32 format version, JSON metadata
// block, named parameter tensors, optional optimizer state in the same
// per-parameter record layout.
struct Checkpoint {
  std::string meta_json;  // model configuration, config hash, notes
  std::vector<Param> params;
  bool has_optimizer_state = false;
  int64_t optimizer_step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace saghog::ad
