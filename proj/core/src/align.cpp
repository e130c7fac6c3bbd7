#include "libs/align.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace libs {

EquivRelation EquivRelation::identity(std::size_t vocab_size) {
  EquivRelation r;
  r.class_of_.resize(vocab_size);
  std::iota(r.class_of_.begin(), r.class_of_.end(), std::size_t{0});
  return r;
}

std::size_t EquivRelation::class_of(TokenId t) const {
  // Tokens beyond the configured vocabulary are their own class.
  if (t >= class_of_.size()) return class_of_.size() + t;
  return class_of_[t];
}

EquivRelation class_equiv(const std::vector<std::vector<TokenId>>& classes,
                          std::size_t vocab_size) {
  EquivRelation r = EquivRelation::identity(vocab_size);
  std::vector<bool> seen(vocab_size, false);
  for (const auto& cls : classes) {
    if (cls.empty()) continue;
    const std::size_t rep = cls.front();
    for (TokenId t : cls) {
      if (t >= vocab_size) {
        throw ConfigError("equivalence class token " + std::to_string(t) +
                          " outside vocabulary of size " +
                          std::to_string(vocab_size));
      }
      if (seen[t]) {
        throw ConfigError("token " + std::to_string(t) +
                          " appears in more than one equivalence class");
      }
      seen[t] = true;
      r.class_of_[t] = rep;
    }
  }
  return r;
}

LcsMatch lcs_match(std::span<const TokenId> pred,
                   std::span<const TokenId> truth,
                   const EquivRelation& equiv) {
  // One workspace: positions of non-reserved tokens, their classes, then
  // suffix[i][j] = LCS length of a[i..] and b[j..].
  std::vector<std::size_t> work(2 * (pred.size() + truth.size()) +
                                (pred.size() + 1) * (truth.size() + 1));
  std::size_t* a = work.data();
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!is_reserved(pred[i])) a[n++] = i;
  }
  std::size_t* b = a + n;
  std::size_t m = 0;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    if (!is_reserved(truth[j])) b[m++] = j;
  }
  if (n == 0 || m == 0) return {};

  std::size_t* ca = b + m;
  std::size_t* cb = ca + n;
  for (std::size_t i = 0; i < n; ++i) ca[i] = equiv.class_of(pred[a[i]]);
  for (std::size_t j = 0; j < m; ++j) cb[j] = equiv.class_of(truth[b[j]]);

  const std::size_t w = m + 1;
  std::size_t* suffix = cb + m;
  std::fill(suffix, suffix + (n + 1) * w, std::size_t{0});
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      std::size_t& cell = suffix[i * w + j];
      if (ca[i] == cb[j]) {
        cell = 1 + suffix[(i + 1) * w + j + 1];
      } else {
        cell = std::max(suffix[(i + 1) * w + j], suffix[i * w + j + 1]);
      }
    }
  }

  // Forward walk: the earliest pred position that can still complete a
  // maximal match, paired with the earliest truth position that allows it.
  LcsMatch out;
  out.reserve(suffix[0]);
  std::size_t i = 0, j = 0;
  while (i < n && j < m && suffix[i * w + j] > 0) {
    const std::size_t need = suffix[i * w + j];
    bool found = false;
    for (std::size_t ii = i; ii < n && !found; ++ii) {
      for (std::size_t jj = j; jj < m; ++jj) {
        if (ca[ii] == cb[jj] && 1 + suffix[(ii + 1) * w + jj + 1] == need) {
          out.push_back({a[ii], b[jj]});
          i = ii + 1;
          j = jj + 1;
          found = true;
          break;
        }
      }
    }
    if (!found) break;  // unreachable for a consistent table
  }
  return out;
}

}  // namespace libs
