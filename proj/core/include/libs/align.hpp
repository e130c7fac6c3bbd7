#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "libs/seq2seq.hpp"

namespace libs {

// Token equivalence as a class id per token. Identity unless built from
// explicit classes.
class EquivRelation {
 public:
  static EquivRelation identity(std::size_t vocab_size);

  std::size_t vocab_size() const { return class_of_.size(); }
  std::size_t class_of(TokenId t) const;
  bool equivalent(TokenId a, TokenId b) const {
    return class_of(a) == class_of(b);
  }

 private:
  friend EquivRelation class_equiv(
      const std::vector<std::vector<TokenId>>& classes, std::size_t vocab_size);
  std::vector<std::size_t> class_of_;
};

// Tokens in each listed set become equivalent; unlisted tokens stay
// singletons. Overlapping sets raise ConfigError.
EquivRelation class_equiv(const std::vector<std::vector<TokenId>>& classes,
                          std::size_t vocab_size);

struct LcsPair {
  std::size_t pred_index;   // index into the predicted sequence
  std::size_t truth_index;  // index into the ground-truth sequence

  bool operator==(const LcsPair&) const = default;
};

using LcsMatch = std::vector<LcsPair>;

// Longest common subsequence of pred and truth under `equiv`, as index pairs
// strictly increasing in both coordinates. Reserved tokens are skipped but
// indices refer to the sequences as given. Among maximal matches the one
// with the lexicographically smallest pred indices wins (then smallest truth
// indices).
LcsMatch lcs_match(std::span<const TokenId> pred,
                   std::span<const TokenId> truth, const EquivRelation& equiv);

}  // namespace libs
