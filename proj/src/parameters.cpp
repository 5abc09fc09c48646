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

#include "epi/parameters.hpp"

#include <cstring>
#include <fstream>

#include "epi/errors.hpp"

namespace epi {

ParameterSet::ParameterSet(const ParameterSet& other) : index_(other.index_) {
  entries_.reserve(other.entries_.size());
  for (const auto& [name, t] : other.entries_) entries_.emplace_back(name, t.clone());
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  if (!value.is_leaf()) throw ContractError("parameter '" + name + "' must be a leaf tensor");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::set_requires_grad(bool enabled) {
  for (auto& e : entries_) e.second.set_requires_grad(enabled);
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

bool ParameterSet::compatible_with(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
  }
  return true;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : entries_) {
    feed(name.data(), name.size());
    for (std::size_t d : t.shape()) feed(&d, sizeof d);
    feed(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

bool ParameterSet::bitwise_equal(const ParameterSet& other) const {
  if (!compatible_with(other)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto a = entries_[i].second.data();
    const auto b = other.entries_[i].second.data();
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

void ParameterSet::assign_values(const ParameterSet& other) {
  if (!compatible_with(other)) throw CompatibilityError("assign_values: parameter sets are not compatible");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto src = other.entries_[i].second.data();
    auto dst = entries_[i].second.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void sgd_step(ParameterSet& params, double lr) {
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad()) continue;
    if (!t.has_grad()) throw ContractError("sgd_step: parameter '" + name + "' has no gradient");
  }
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad()) continue;
    auto g = t.grad();
    auto d = t.mutable_data();
    if (lr != 0.0) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    }
    t.zero_grad();
  }
}

namespace {

constexpr char kMagic[8] = {'E', 'P', 'I', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& is, const std::filesystem::path& path) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<const ParameterSet*>& sets) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  std::uint64_t count = 0;
  for (const auto* s : sets) count += s->size();
  os.write(kMagic, sizeof kMagic);
  write_u64(os, count);
  for (const auto* s : sets) {
    for (const auto& [name, t] : s->entries()) {
      write_u64(os, name.size());
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u64(os, t.rank());
      for (std::size_t d : t.shape()) write_u64(os, d);
      os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint_entries(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ParseError("not a checkpoint file: " + path.string());
  }
  const std::uint64_t count = read_u64(is, path);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint64_t len = read_u64(is, path);
    if (len > (1u << 20)) throw ParseError("corrupt parameter name length in " + path.string());
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw ParseError("truncated checkpoint " + path.string());
    const std::uint64_t rank = read_u64(is, path);
    if (rank > 8) throw ParseError("corrupt tensor rank in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) d = read_u64(is, path);
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw ParseError("truncated checkpoint " + path.string());
    }
    out.emplace_back(std::move(name), Tensor::from(shape, std::move(values), true));
  }
  return out;
}

void save_parameters(const std::filesystem::path& path, const ParameterSet& params) { save_checkpoint(path, {&params}); }

ParameterSet load_parameters(const std::filesystem::path& path) {
  ParameterSet ps;
  for (auto& [name, t] : load_checkpoint_entries(path)) ps.add(name, std::move(t));
  return ps;
}

}  // namespace epi
