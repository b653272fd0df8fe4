#pragma once

#include <map>
#include <string>
#include <vector>

#include "bevtrack/tensor.hpp"

namespace bevtrack {

// Named trainable parameters. Aliased names resolve to the same underlying
// storage: the U-decoder registers aliases onto the S-decoder's canonical
// tensors, so an optimizer update through either name is visible to both.
class ParamStore {
 public:
  Tensor create(const std::string& name, Shape shape, std::vector<double> data);
  Tensor create_zeros(const std::string& name, Shape shape);

  // Register `alias_name` as another name for canonical parameter `canonical`.
  void alias(const std::string& alias_name, const std::string& canonical);

  bool has(const std::string& name) const;
  Tensor get(const std::string& name) const;
  // Resolves through the sharing table; identity for canonical names.
  std::string resolve(const std::string& name) const;
  bool is_alias(const std::string& name) const;

  const std::map<std::string, Tensor>& canonical() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_scalars() const;

  void zero_grads();

  // Checkpoint: JSON manifest (names, shapes, byte offsets) next to a flat
  // little-endian float64 blob. Both writes are atomic (temp file + rename).
  void save_checkpoint(const std::string& manifest_path) const;
  void load_checkpoint(const std::string& manifest_path);

 private:
  std::map<std::string, Tensor> params_;        // canonical name -> tensor
  std::map<std::string, std::string> aliases_;  // alias -> canonical
};

}  // namespace bevtrack
