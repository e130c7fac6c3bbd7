#include "libs/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <unordered_map>

#include "libs/error.hpp"

namespace libs {

double ErrorRateReport::rate() const {
  if (ref_length == 0) {
    throw DomainError("error rate undefined for an empty reference");
  }
  return static_cast<double>(edits()) / static_cast<double>(ref_length);
}

ErrorRateReport edit_distance(std::span<const Symbol> ref,
                              std::span<const Symbol> hyp) {
  // Cells hold (edits, indels): among minimal-edit alignments the one with
  // the fewest insertions and deletions wins, which keeps S symmetric.
  using Cost = std::pair<std::size_t, std::size_t>;
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  const std::size_t w = m + 1;
  std::vector<Cost> cost((n + 1) * w);
  for (std::size_t i = 0; i <= n; ++i) cost[i * w] = {i, i};
  for (std::size_t j = 0; j <= m; ++j) cost[j] = {j, j};
  auto step = [](Cost c, std::size_t edit, std::size_t indel) {
    return Cost{c.first + edit, c.second + indel};
  };
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const Cost diag =
          step(cost[(i - 1) * w + j - 1], ref[i - 1] == hyp[j - 1] ? 0 : 1, 0);
      const Cost del = step(cost[(i - 1) * w + j], 1, 1);
      const Cost ins = step(cost[i * w + j - 1], 1, 1);
      cost[i * w + j] = std::min({diag, del, ins});
    }
  }

  ErrorRateReport r;
  r.ref_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const Cost here = cost[i * w + j];
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (step(cost[(i - 1) * w + j - 1], same ? 0 : 1, 0) == here) {
        if (!same) ++r.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && step(cost[(i - 1) * w + j], 1, 1) == here) {
      ++r.deletions;
      --i;
      continue;
    }
    ++r.insertions;
    --j;
  }
  return r;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  auto space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && space(text[pos])) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !space(text[end])) ++end;
    if (end > pos) out.push_back(text.substr(pos, end - pos));
    pos = end;
  }
  return out;
}

ErrorRateReport edit_distance(std::string_view ref, std::string_view hyp,
                              ErrorUnit unit) {
  if (unit == ErrorUnit::Char) {
    std::vector<Symbol> r(ref.begin(), ref.end());
    std::vector<Symbol> h(hyp.begin(), hyp.end());
    return edit_distance(r, h);
  }
  // Words are interned jointly so equal words share an id.
  std::map<std::string_view, Symbol> ids;
  auto intern = [&](std::string_view text) {
    std::vector<Symbol> out;
    for (auto wd : split_words(text)) {
      auto it = ids.emplace(wd, static_cast<Symbol>(ids.size())).first;
      out.push_back(it->second);
    }
    return out;
  };
  auto r = intern(ref);
  auto h = intern(hyp);
  return edit_distance(r, h);
}

double error_rate(std::string_view ref, std::string_view hyp, ErrorUnit unit) {
  return edit_distance(ref, hyp, unit).rate();
}

void CorpusErrorRate::add(const ErrorRateReport& r) {
  edits_ += r.edits();
  ref_length_ += r.ref_length;
  ++samples_;
}

double CorpusErrorRate::rate() const {
  if (ref_length_ == 0) {
    throw DomainError("corpus error rate undefined: total reference length 0");
  }
  return static_cast<double>(edits_) / static_cast<double>(ref_length_);
}

double bleu_unigram(std::span<const Symbol> ref, std::span<const Symbol> hyp) {
  if (hyp.empty()) return 0.0;
  std::unordered_map<Symbol, std::size_t> ref_counts;
  for (Symbol s : ref) ++ref_counts[s];
  std::unordered_map<Symbol, std::size_t> hyp_counts;
  for (Symbol s : hyp) ++hyp_counts[s];
  std::size_t clipped = 0;
  for (const auto& [sym, count] : hyp_counts) {
    auto it = ref_counts.find(sym);
    if (it != ref_counts.end()) clipped += std::min(count, it->second);
  }
  const double precision =
      static_cast<double>(clipped) / static_cast<double>(hyp.size());
  const double ratio =
      static_cast<double>(ref.size()) / static_cast<double>(hyp.size());
  const double penalty = std::exp(std::min(0.0, 1.0 - ratio));
  return precision * penalty;
}

}  // namespace libs
