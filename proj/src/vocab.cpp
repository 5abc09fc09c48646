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

#include "epi/vocab.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "epi/errors.hpp"

namespace epi {

Vocabulary::Vocabulary() {
  push(kPadToken);
  push(kBosToken);
  push(kEosToken);
  push(kUnkToken);
}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) : Vocabulary() {
  for (const auto& t : content_tokens) push(t);
}

Vocabulary Vocabulary::synthetic(std::size_t size) {
  if (size <= kFirstContent) throw ConfigError("vocabulary size must exceed the 4 reserved tokens");
  std::vector<std::string> content;
  for (std::size_t i = kFirstContent; i < size; ++i) content.push_back("w" + std::to_string(i));
  return Vocabulary(content);
}

void Vocabulary::push(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos) {
    throw ConfigError("invalid vocabulary token '" + token + "'");
  }
  if (!ids_.emplace(token, tokens_.size()).second) throw ConfigError("duplicate vocabulary token '" + token + "'");
  tokens_.push_back(token);
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  const char* reserved[] = {kPadToken, kBosToken, kEosToken, kUnkToken};
  if (lines.size() < kFirstContent) throw ParseError("vocabulary " + path.string() + " lacks reserved tokens");
  for (std::size_t i = 0; i < kFirstContent; ++i) {
    if (lines[i] != reserved[i]) {
      throw ParseError("vocabulary " + path.string() + " line " + std::to_string(i + 1) + ": expected " + reserved[i]);
    }
  }
  return Vocabulary(std::vector<std::string>(lines.begin() + kFirstContent, lines.end()));
}

TokenSeq tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(vocab.id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string detokenize(const TokenSeq& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace epi
