#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "hypens/ensemble.hpp"
#include "oracles.hpp"

using namespace hypens;

namespace {

HypothesisSet make_set(const std::vector<std::string>& texts, std::string id = "s") {
  HypothesisSet s{std::move(id), {}};
  for (const auto& t : texts) s.hypotheses.push_back({t, "hendy", 1.0, 1.0, 10, 3});
  return s;
}

std::vector<std::vector<double>> random_rows(std::mt19937_64& rng, std::size_t n, bool discrete) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> q(0, 4);
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (auto& row : m)
    for (auto& v : row) v = discrete ? q(rng) * 0.25 : u(rng);
  return m;
}

std::unique_ptr<ScorerHandle> chrf_handle(std::shared_ptr<StubScorerService> svc) {
  return ScorerHandle::connect(std::make_unique<LoopbackChannel>(std::move(svc)));
}

}  // namespace

TEST(Matrix, SingletonChrf) {
  auto m = compute_utility_matrix("src", make_set({"Hallo"}), chrf_utility());
  ASSERT_EQ(m.n(), 1u);
  EXPECT_EQ(m.at(0, 0), 1.0);
}

TEST(Matrix, DuplicateStringsGiveEqualRowsAndColumns) {
  auto m = compute_utility_matrix("src", make_set({"die Katze", "der Hund", "die Katze"}), chrf_utility());
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(m.at(0, k), m.at(2, k));
    EXPECT_EQ(m.at(k, 0), m.at(k, 2));
  }
}

TEST(Matrix, EntrywiseOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> texts;
    for (int i = 0; i < 4; ++i) texts.push_back(oracle::random_text(rng, 10));
    auto m = compute_utility_matrix("src", make_set(texts), chrf_utility(), {static_cast<std::size_t>(trial % 3 + 1)});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) ASSERT_NEAR(m.at(i, j), oracle::chrf(texts[i], texts[j]), 1e-12);
  }
}

TEST(Matrix, RowsAreCandidatesColumnsAreReferences) {
  UtilityFunction asym("len-ratio", true, false, {0.0, 100.0},
                       [](std::string_view, std::string_view c, std::string_view r) {
                         return static_cast<double>(c.size()) / static_cast<double>(r.size());
                       });
  auto m = compute_utility_matrix("", make_set({"a", "aaaa"}), asym);
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m.at(0, 1), 0.25);
}

TEST(Matrix, OutOfRangeUtilitySurfaced) {
  UtilityFunction bad("bad", true, false, {0.0, 1.0},
                      [](std::string_view, std::string_view, std::string_view) { return 1.5; });
  EXPECT_THROW(compute_utility_matrix("", make_set({"a", "b"}), bad), Error);
}

TEST(Matrix, ScorerHandleIssuesAtMostNSquaredCalls) {
  auto svc = make_utility_stub(chrf_utility());
  auto h = chrf_handle(svc);
  auto set = make_set({"a b", "a c", "b c", "a b"});
  auto m = compute_utility_matrix("src", set, *h, {0.0, 1.0});
  EXPECT_EQ(svc->calls(), 9u) << "3 distinct strings -> 9 distinct pairs";
  auto local = compute_utility_matrix("src", set, chrf_utility());
  EXPECT_EQ(m.entries(), local.entries());
}

TEST(Mbr, ConstantMatrixTiesToZero) {
  auto m = UtilityMatrix::from_rows(std::vector<std::vector<double>>(5, std::vector<double>(5, 0.7)));
  auto s = mbr_select(m);
  EXPECT_EQ(s.chosen_index, 0u);
  EXPECT_NEAR(*s.score, 0.7, 1e-15);
}

TEST(Mbr, HandExample) {
  auto m = UtilityMatrix::from_rows({{1, .2, .4}, {.2, 1, .9}, {.4, .9, 1}}, {"a", "b", "c"});
  auto s = mbr_select(m);
  EXPECT_EQ(s.chosen_index, 2u);
  EXPECT_EQ(s.chosen_text, "c");
  EXPECT_EQ(s.method, Method::mbr);
  EXPECT_NEAR(s.diagnostics.at("expected_utility.0"), 1.6 / 3, 1e-12);
  EXPECT_NEAR(s.diagnostics.at("expected_utility.1"), 2.1 / 3, 1e-12);
  EXPECT_NEAR(s.diagnostics.at("expected_utility.2"), 2.3 / 3, 1e-12);
}

TEST(Mbr, AffineInvariance) {
  std::mt19937_64 rng(22);
  for (int t = 0; t < 200; ++t) {
    auto rows = random_rows(rng, 2 + t % 7, false);
    auto mapped = rows;
    for (auto& r : mapped)
      for (auto& v : r) v = 0.5 * v + 0.1;
    EXPECT_EQ(mbr_select(UtilityMatrix::from_rows(rows)).chosen_index,
              mbr_select(UtilityMatrix::from_rows(mapped)).chosen_index);
  }
}

TEST(Mbr, ExhaustiveOracle) {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + t % 8;
    auto rows = random_rows(rng, n, t % 2 == 0);
    ASSERT_EQ(*mbr_select(UtilityMatrix::from_rows(rows)).chosen_index, oracle::mbr_index(rows));
  }
}

TEST(Mbr, ExcludeSelfAndSubset) {
  auto m = UtilityMatrix::from_rows({{1, .1, .1}, {.2, 1, .3}, {.3, .2, 1}});
  EXPECT_EQ(mbr_select(m, {false, std::nullopt}).chosen_index, 1u);  // .10, .25, .25: tie goes to the lower index
  EXPECT_EQ(mbr_select(m, {true, 1}).chosen_index, 0u);               // first column only
  EXPECT_THROW(mbr_select(m, {true, 4}), Error);
  auto one = UtilityMatrix::from_rows({{1}});
  EXPECT_THROW(mbr_select(one, {false, std::nullopt}), Error);
}

TEST(Mbr, DuplicateOfWinnerKeepsWinner) {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::string> texts;
    for (int i = 0; i < 5; ++i) texts.push_back(oracle::random_sentence(rng, 6) + " x");
    auto set = make_set(texts);
    const auto before = mbr_select(compute_utility_matrix("", set, chrf_utility()));
    set.hypotheses.push_back(set.hypotheses[*before.chosen_index]);
    const auto after = mbr_select(compute_utility_matrix("", set, chrf_utility()));
    ASSERT_EQ(after.chosen_text, before.chosen_text);
  }
}

TEST(Mbr, PermutationEquivariant) {
  std::mt19937_64 rng(25);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::string> texts;
    for (int i = 0; i < 6; ++i) texts.push_back(oracle::random_sentence(rng, 6) + " y" + std::to_string(i));
    const auto eu = expected_utilities(compute_utility_matrix("", make_set(texts), chrf_utility()));
    auto sorted = eu;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) continue;
    auto shuffled = texts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(mbr_select(compute_utility_matrix("", make_set(texts), chrf_utility())).chosen_text,
              mbr_select(compute_utility_matrix("", make_set(shuffled), chrf_utility())).chosen_text);
  }
}

TEST(Rank, Examples) {
  auto set3 = make_set({"a", "b", "c"});
  std::vector<double> s{0.2, 0.9, 0.5};
  auto r = rank_select(set3, s);
  EXPECT_EQ(r.chosen_index, 1u);
  EXPECT_EQ(r.method, Method::rank);
  EXPECT_EQ(r.diagnostics.at("qe_score.2"), 0.5);
  std::vector<double> tie{0.4, 0.4};
  EXPECT_EQ(rank_select(make_set({"a", "b"}), tie).chosen_index, 0u);
  std::vector<double> none;
  EXPECT_THROW(rank_select(make_set({"a"}), none), Error);
}

TEST(Rank, LinearScanOracle) {
  std::mt19937_64 rng(26);
  std::uniform_real_distribution<double> u(-5, 5);
  std::vector<std::string> texts(50, "t");
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s(50);
    for (auto& v : s) v = t % 2 ? u(rng) : std::round(u(rng));
    ASSERT_EQ(*rank_select(make_set(texts), s).chosen_index, oracle::argmax(s));
  }
}

TEST(Rank, MonotoneTransformInvariance) {
  std::vector<double> s{0.1, 0.7, 0.3, 0.7};
  std::vector<double> cubed;
  for (double v : s) cubed.push_back(v * v * v - 2);
  auto set = make_set({"a", "b", "c", "d"});
  EXPECT_EQ(rank_select(set, s).chosen_index, rank_select(set, cubed).chosen_index);
}

TEST(Rank, QeScoresRequireReferenceFreeScorer) {
  auto h = chrf_handle(make_utility_stub(chrf_utility()));
  EXPECT_THROW(qe_scores("src", make_set({"a", "b"}), *h), Error);
  StubScorerService::Options o;
  o.needs_reference = false;
  auto qe = chrf_handle(std::make_shared<StubScorerService>(
      o, [](const std::string&, const std::string& mt, const auto&) { return double(mt.size()); }));
  auto sel = rank_select(make_set({"ab", "abcd", "abc"}), qe_scores("src", make_set({"ab", "abcd", "abc"}), *qe));
  EXPECT_EQ(sel.chosen_index, 1u);
}

TEST(Oracle, ReferenceChosen) {
  auto set = make_set({"der Hund", "die Katze sitzt", "Katze"});
  auto s = oracle_select(set, std::string("die Katze sitzt"), "src", chrf_utility());
  EXPECT_EQ(s.chosen_index, 1u);
  EXPECT_EQ(s.score, 1.0);
}

TEST(Oracle, Singleton) {
  auto s = oracle_select(make_set({"zzz"}), std::string("abc"), "src", chrf_utility());
  EXPECT_EQ(s.chosen_index, 0u);
}

TEST(Oracle, MissingReference) {
  EXPECT_THROW(oracle_select(make_set({"a"}), std::nullopt, "src", chrf_utility()), Error);
}

TEST(Oracle, ScanOracle) {
  std::mt19937_64 rng(27);
  auto h = chrf_handle(make_utility_stub(chrf_utility()));
  for (int t = 0; t < 100; ++t) {
    std::vector<std::string> texts;
    for (int i = 0; i < 7; ++i) texts.push_back(oracle::random_text(rng, 12));
    const std::string ref = oracle::random_text(rng, 12);
    std::vector<double> s;
    for (const auto& x : texts) s.push_back(oracle::chrf(x, ref));
    ASSERT_EQ(*oracle_select(make_set(texts), ref, "src", chrf_utility()).chosen_index, oracle::argmax(s));
    ASSERT_EQ(*oracle_select(make_set(texts), ref, "src", *h).chosen_index, oracle::argmax(s));
  }
}

TEST(Diversity, Examples) {
  EXPECT_EQ(diversity(UtilityMatrix::from_rows({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}})).value, 0.0);
  EXPECT_EQ(diversity(UtilityMatrix::from_rows({{1, 0}, {0, 1}})).value, 1.0);
  EXPECT_EQ(diversity(UtilityMatrix::from_rows({{1, .2, .4}, {.2, 1, .9}, {.4, .9, 1}})).value, 0.5);
  EXPECT_THROW(diversity(UtilityMatrix::from_rows({{1}})), Error);
}

TEST(Diversity, ClampsOutOfRangeWithCount) {
  auto d = diversity(UtilityMatrix::from_rows({{1, 1.4}, {-0.2, 1}}));
  EXPECT_EQ(d.clamped, 2u);
  EXPECT_EQ(d.value, 0.5);
}

TEST(Diversity, BoundedAndTransposeInvariant) {
  std::mt19937_64 rng(28);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + t % 9;
    auto rows = random_rows(rng, n, t % 3 == 0);
    auto tr = rows;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) tr[i][j] = rows[j][i];
    const double a = diversity(UtilityMatrix::from_rows(rows)).value;
    const double b = diversity(UtilityMatrix::from_rows(tr)).value;
    ASSERT_GE(a, 0.0);
    ASSERT_LE(a, 1.0);
    ASSERT_NEAR(a, b, 1e-12);
  }
}

TEST(Diversity, NoExtraScorerCalls) {
  auto svc = make_utility_stub(chrf_utility());
  auto h = chrf_handle(svc);
  auto m = compute_utility_matrix("src", make_set({"a b c", "a b d", "x y z", "a c"}), *h, {0.0, 1.0});
  const auto before = svc->calls();
  EXPECT_EQ(before, 16u);
  diversity(m);
  mbr_select(m);
  EXPECT_EQ(svc->calls(), before);
}
