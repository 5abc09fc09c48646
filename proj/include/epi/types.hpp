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

#include <cstddef>
#include <optional>
#include <vector>

namespace epi {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;

// Reserved ids shared by every vocabulary.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstContent = 4;

/// A parallel sentence. Token sequences never contain BOS/EOS; those are
/// added by the model. is_noise is known only for generated corpora.
struct SentencePair {
  TokenSeq source;
  TokenSeq target;
  int domain_id = 0;
  std::optional<bool> is_noise;
  std::optional<double> q_score;  // denoise score
  std::optional<double> d_score;  // divergence score

  bool operator==(const SentencePair&) const = default;
};

}  // namespace epi
