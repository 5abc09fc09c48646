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

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "epi/types.hpp"

namespace epi {

/// Token list with the four reserved tokens at ids 0-3.
class Vocabulary {
 public:
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kBosToken = "<s>";
  static constexpr const char* kEosToken = "</s>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary();
  /// Reserved tokens followed by content_tokens. Duplicates are rejected.
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  /// Reserved tokens followed by "w4", "w5", ... up to size - 1.
  static Vocabulary synthetic(std::size_t size);

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kFirstContent; }
  TokenId id(std::string_view token) const;  // UNK when absent
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Whitespace split, unknown tokens map to UNK.
TokenSeq tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(const TokenSeq& ids, const Vocabulary& vocab);

}  // namespace epi
