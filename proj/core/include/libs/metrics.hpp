#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace libs {

using Symbol = std::uint32_t;

// Edit operations from one optimal reference -> hypothesis alignment.
struct ErrorRateReport {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_length = 0;

  std::size_t edits() const { return substitutions + deletions + insertions; }
  // (S + D + I) / N; DomainError when the reference is empty.
  double rate() const;
};

// Unit-cost Levenshtein alignment. Among minimal alignments the one with the
// most substitutions is chosen; the backtrace then prefers substitution (or
// match), then deletion, then insertion.
ErrorRateReport edit_distance(std::span<const Symbol> ref,
                              std::span<const Symbol> hyp);

enum class ErrorUnit { Char, Word };

// Whitespace tokenisation used for word-level rates.
std::vector<std::string_view> split_words(std::string_view text);
ErrorRateReport edit_distance(std::string_view ref, std::string_view hyp,
                              ErrorUnit unit);
double error_rate(std::string_view ref, std::string_view hyp, ErrorUnit unit);

// Micro-averaged corpus error rate: total edits over total reference length.
class CorpusErrorRate {
 public:
  void add(const ErrorRateReport& r);
  std::size_t edits() const { return edits_; }
  std::size_t ref_length() const { return ref_length_; }
  std::size_t samples() const { return samples_; }
  double rate() const;

 private:
  std::size_t edits_ = 0;
  std::size_t ref_length_ = 0;
  std::size_t samples_ = 0;
};

// Clipped unigram precision times exp(min(0, 1 - |ref|/|hyp|)); 0 for an
// empty hypothesis.
double bleu_unigram(std::span<const Symbol> ref, std::span<const Symbol> hyp);

}  // namespace libs
