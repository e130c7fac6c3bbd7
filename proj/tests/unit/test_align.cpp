#include <doctest.h>

#include <optional>
#include <random>

#include "libs/align.hpp"
#include "libs/synthdata.hpp"

using namespace libs;

namespace {

std::vector<TokenId> ids(const std::string& s) {
  std::vector<TokenId> out;
  for (char c : s) out.push_back(static_cast<TokenId>(c));
  return out;
}

// Earliest truth positions matching pred[idx...] in order, if any.
std::optional<std::vector<std::size_t>> embed(
    const std::vector<TokenId>& pred, const std::vector<std::size_t>& idx,
    const std::vector<TokenId>& truth, const EquivRelation& eq) {
  std::vector<std::size_t> out;
  std::size_t j = 0;
  for (std::size_t i : idx) {
    while (j < truth.size() &&
           (is_reserved(truth[j]) || !eq.equivalent(pred[i], truth[j]))) {
      ++j;
    }
    if (j == truth.size()) return std::nullopt;
    out.push_back(j++);
  }
  return out;
}

// Subset enumeration: longest matchable pred subsequence, lexicographically
// smallest pred indices, earliest truth indices.
LcsMatch brute_force(const std::vector<TokenId>& pred,
                     const std::vector<TokenId>& truth, const EquivRelation& eq) {
  LcsMatch best;
  std::vector<std::size_t> best_idx;
  bool have = false;
  const std::size_t n = pred.size();
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    std::vector<std::size_t> idx;
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        if (is_reserved(pred[i])) ok = false;
        idx.push_back(i);
      }
    }
    if (!ok) continue;
    auto t = embed(pred, idx, truth, eq);
    if (!t) continue;
    if (!have || idx.size() > best_idx.size() ||
        (idx.size() == best_idx.size() && idx < best_idx)) {
      have = true;
      best_idx = idx;
      best.clear();
      for (std::size_t m = 0; m < idx.size(); ++m) best.push_back({idx[m], (*t)[m]});
    }
  }
  return best;
}

std::vector<TokenId> random_seq(std::mt19937_64& rng, std::size_t len,
                                TokenId lo, TokenId hi) {
  std::uniform_int_distribution<TokenId> d(lo, hi);
  std::vector<TokenId> s(len);
  for (auto& t : s) t = d(rng);
  return s;
}

void check_valid(const LcsMatch& m, const std::vector<TokenId>& pred,
                 const std::vector<TokenId>& truth, const EquivRelation& eq) {
  for (std::size_t k = 0; k < m.size(); ++k) {
    REQUIRE(m[k].pred_index < pred.size());
    REQUIRE(m[k].truth_index < truth.size());
    CHECK(eq.equivalent(pred[m[k].pred_index], truth[m[k].truth_index]));
    CHECK_FALSE(is_reserved(pred[m[k].pred_index]));
    if (k > 0) {
      CHECK(m[k].pred_index > m[k - 1].pred_index);
      CHECK(m[k].truth_index > m[k - 1].truth_index);
    }
  }
}

}  // namespace

TEST_CASE("identity and disjoint examples") {
  const auto eq = EquivRelation::identity(16);
  std::vector<TokenId> x{3, 5, 4, 5};
  LcsMatch m = lcs_match(x, x, eq);
  REQUIRE(m.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(m[k] == LcsPair{k, k});
  std::vector<TokenId> a{3, 4}, b{5, 6, 7};
  CHECK(lcs_match(a, b, eq).empty());
  CHECK(lcs_match({}, b, eq).empty());
  CHECK(lcs_match(a, {}, eq).empty());
}

TEST_CASE("classic LCS example has length 4") {
  auto pred = ids("ABCBDAB"), truth = ids("BDCABA");
  const auto eq = EquivRelation::identity(128);
  LcsMatch m = lcs_match(pred, truth, eq);
  CHECK(m.size() == 4);
  CHECK(m == brute_force(pred, truth, eq));
}

TEST_CASE("class equivalence example") {
  auto pred = ids("aBc"), truth = ids("ABC");
  const auto eq = class_equiv({{'a', 'A'}, {'B', 'b'}}, 128);
  CHECK(lcs_match(pred, truth, eq).size() == 2);
  CHECK(lcs_match(pred, truth, EquivRelation::identity(128)).size() == 1);
}

TEST_CASE("class_equiv construction") {
  const auto none = class_equiv({}, 8);
  for (TokenId a = 0; a < 8; ++a) {
    for (TokenId b = 0; b < 8; ++b) CHECK(none.equivalent(a, b) == (a == b));
  }
  const auto one = class_equiv({{3, 7}}, 8);
  CHECK(one.equivalent(3, 7));
  CHECK_FALSE(one.equivalent(3, 4));
  CHECK_THROWS_AS(class_equiv({{3, 4}, {4, 5}}, 8), ConfigError);
  CHECK_THROWS_AS(class_equiv({{3, 9}}, 8), ConfigError);
}

TEST_CASE("matches a subset-enumeration oracle exhaustively for short sequences") {
  const auto eq = EquivRelation::identity(8);
  std::vector<std::vector<TokenId>> all{{}};
  for (std::size_t len = 1; len <= 4; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& s : all) {
      if (s.size() != len - 1) continue;
      for (TokenId t = 3; t < 7; ++t) {
        auto e = s;
        e.push_back(t);
        next.push_back(e);
      }
    }
    all.insert(all.end(), next.begin(), next.end());
  }
  std::size_t pairs = 0;
  for (const auto& p : all) {
    for (const auto& t : all) {
      LcsMatch m = lcs_match(p, t, eq);
      LcsMatch o = brute_force(p, t, eq);
      if (m != o) {
        FAIL_CHECK("mismatch");
        return;
      }
      ++pairs;
    }
  }
  CHECK(pairs == 341 * 341);
}

TEST_CASE("random pairs up to length 8 agree with the oracle") {
  std::mt19937_64 rng(3);
  const auto ident = EquivRelation::identity(8);
  const auto classes = class_equiv({{3, 4}}, 8);
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = random_seq(rng, rng() % 9, 3, 6);
    auto t = random_seq(rng, rng() % 9, 3, 6);
    const auto& eq = trial % 2 ? ident : classes;
    LcsMatch m = lcs_match(p, t, eq);
    check_valid(m, p, t, eq);
    CHECK(m == brute_force(p, t, eq));
  }
}

TEST_CASE("reserved tokens are skipped but indices are kept") {
  const auto eq = EquivRelation::identity(8);
  std::vector<TokenId> pred{kSos, 3, kPad, 4, kEos};
  std::vector<TokenId> truth{kSos, 4, 3, 4, kEos};
  LcsMatch m = lcs_match(pred, truth, eq);
  REQUIRE(m.size() == 2);
  CHECK(m[0] == LcsPair{1, 2});
  CHECK(m[1] == LcsPair{3, 3});
  std::vector<TokenId> only_reserved{kEos, kEos};
  CHECK(lcs_match(only_reserved, only_reserved, eq).empty());

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    auto p = random_seq(rng, rng() % 8, 0, 5);
    auto t = random_seq(rng, rng() % 8, 0, 5);
    LcsMatch got = lcs_match(p, t, eq);
    check_valid(got, p, t, eq);
    CHECK(got == brute_force(p, t, eq));
  }
}

TEST_CASE("self match has full length") {
  std::mt19937_64 rng(5);
  const auto eq = EquivRelation::identity(30);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_seq(rng, rng() % 20, 3, 29);
    LcsMatch m = lcs_match(x, x, eq);
    REQUIRE(m.size() == x.size());
    for (std::size_t k = 0; k < x.size(); ++k) CHECK(m[k] == LcsPair{k, k});
  }
}

TEST_CASE("viseme relation is read back from the corpus") {
  GenConfig cfg;
  cfg.train_size = 2;
  cfg.val_size = 0;
  cfg.test_size = 0;
  Corpus c = gen_corpus(cfg);
  const auto eq = c.viseme_equiv();
  CHECK(eq.vocab_size() == c.model_vocab_size());
  for (std::size_t a = 0; a < cfg.vocab_size; ++a) {
    for (std::size_t b = 0; b < cfg.vocab_size; ++b) {
      CHECK(eq.equivalent(a + kFirstContentToken, b + kFirstContentToken) ==
            (c.viseme_class[a] == c.viseme_class[b]));
    }
  }
  CHECK_FALSE(eq.equivalent(kSos, kFirstContentToken));
}
