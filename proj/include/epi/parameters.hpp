// Copyright 2026 The epilab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "epi/tensor.hpp"

namespace epi {

/// Named parameters in insertion order. Copying a ParameterSet deep-copies
/// every tensor, so two sets never alias each other's storage.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  /// Registers a new leaf. Throws ContractError on a duplicate name.
  Tensor& add(const std::string& name, Tensor value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t numel() const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void set_requires_grad(bool enabled);
  void zero_grad();

  /// Same names in the same order with the same shapes.
  bool compatible_with(const ParameterSet& other) const;

  /// FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const;

  /// True when every value is bitwise equal.
  bool bitwise_equal(const ParameterSet& other) const;

  /// Copies values (not gradients) from a compatible set.
  void assign_values(const ParameterSet& other);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Plain gradient descent: p <- p - lr * grad(p), then grads are cleared.
/// Parameters with requires_grad == false are skipped. A grad-enabled
/// parameter without a populated grad is a ContractError.
void sgd_step(ParameterSet& params, double lr);

// Checkpoint format (little-endian): magic "EPICKPT1", u64 count, then per
// entry: u64 name length, name bytes, u64 rank, u64 dims[rank], f64 values.
void save_checkpoint(const std::filesystem::path& path, const std::vector<const ParameterSet*>& sets);
std::vector<std::pair<std::string, Tensor>> load_checkpoint_entries(const std::filesystem::path& path);
void save_parameters(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_parameters(const std::filesystem::path& path);

}  // namespace epi
