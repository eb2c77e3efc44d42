#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "hypens/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hypens;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HYPENS_CLI_PATH) + " " + args + " 2>/dev/null";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

const char* three_segments =
    R"({"id":"s1","src_lang":"en","tgt_lang":"de","text":"The cat sat on the mat.","reference":"Die Katze saß auf der Matte."})"
    "\n"
    R"({"id":"s2","src_lang":"en","tgt_lang":"de","text":"I like green apples.","reference":"Ich mag grüne Äpfel."})"
    "\n"
    R"({"id":"s3","src_lang":"en","tgt_lang":"de","text":"Where is the station?","reference":"Wo ist der Bahnhof?"})"
    "\n";

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, GenerateShape) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "h.jsonl") + " --n 5 --seed 1"), 0);
  const auto sets = load_hypothesis_sets(dir.path() / "h.jsonl");
  ASSERT_EQ(sets.size(), 3u);
  for (const auto& s : sets) EXPECT_EQ(s.size(), 5u);
  EXPECT_EQ(load_ledger(dir.path() / "h.jsonl.ledger.jsonl").size(), 3u);
  for (const auto& line : read_lines(dir.path() / "h.jsonl"))
    EXPECT_NE(line.find(R"("run":{"config_hash":")"), std::string::npos);
}

TEST(Cli, GenerateDeterministicAcrossParallelism) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "a.jsonl") + " --n 8 --seed 4"), 0);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "b.jsonl") +
                    " --n 8 --seed 4 --parallelism 3"),
            0);
  EXPECT_EQ(read_file(dir.path() / "a.jsonl"), read_file(dir.path() / "b.jsonl"));
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "c.jsonl") + " --n 8 --seed 5"), 0);
  EXPECT_NE(read_file(dir.path() / "a.jsonl"), read_file(dir.path() / "c.jsonl"));
}

TEST(Cli, CostSublinear) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "g.jsonl") + " --mode greedy"), 0);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "n20.jsonl") + " --n 20"), 0);
  const double rel = relative_cost(load_ledger(dir.path() / "n20.jsonl.ledger.jsonl"),
                                   load_ledger(dir.path() / "g.jsonl.ledger.jsonl"));
  EXPECT_GT(rel, 1.0);
  EXPECT_LT(rel, 20.0);
  ASSERT_EQ(run_cli("cost-report --in " + q(dir.path() / "n20.jsonl.ledger.jsonl") + " --baseline " +
                    q(dir.path() / "g.jsonl.ledger.jsonl") + " --out " + q(dir.path() / "c.csv")),
            0);
  const auto csv = read_lines(dir.path() / "c.csv");
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[0], "ledger,total_tokens,relative_cost,rounded_cost,config_hash,seed");
}

TEST(Cli, MbrEqualsKernel) {
  TempDir dir;
  auto src = dir.write("src.jsonl",
                       R"({"id":"x","src_lang":"en","tgt_lang":"de","text":"Hello."})" "\n");
  HypothesisSet set{"x", {{"Hallo Welt.", "hendy", 1, 1, 5, 2},
                          {"Hallo, Welt!", "hendy", 1, 1, 5, 2},
                          {"Servus Welt.", "hendy", 1, 1, 5, 2}}};
  write_hypothesis_sets(dir.path() / "h.jsonl", {set});
  ASSERT_EQ(run_cli("ensemble --method mbr --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) +
                    " --out " + q(dir.path() / "sel.jsonl") + " --dump-matrices " + q(dir.path() / "m.jsonl")),
            0);
  const auto sel = load_selections(dir.path() / "sel.jsonl");
  ASSERT_EQ(sel.size(), 1u);
  const auto kernel = mbr_select(compute_utility_matrix("Hello.", set, chrf_utility()));
  EXPECT_EQ(sel[0].chosen_index, kernel.chosen_index);
  EXPECT_EQ(sel[0].chosen_text, kernel.chosen_text);
  EXPECT_TRUE(sel[0].diagnostics.contains("diversity"));
  EXPECT_EQ(read_lines(dir.path() / "m.jsonl").size(), 1u);
}

TEST(Cli, OracleFindsReference) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  std::vector<HypothesisSet> sets{
      {"s1", {{"Katze.", "hendy", 1, 1, 5, 1}, {"Die Katze saß auf der Matte.", "hendy", 1, 1, 5, 6}}},
      {"s2", {{"Ich mag grüne Äpfel.", "hendy", 1, 1, 5, 4}, {"Äpfel", "hendy", 1, 1, 5, 1}}},
      {"s3", {{"Bahnhof", "hendy", 1, 1, 5, 1}, {"Wo", "hendy", 1, 1, 5, 1}, {"Wo ist der Bahnhof?", "hendy", 1, 1, 5, 4}}}};
  write_hypothesis_sets(dir.path() / "h.jsonl", sets);
  ASSERT_EQ(run_cli("ensemble --method oracle --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) +
                    " --out " + q(dir.path() / "o.jsonl")),
            0);
  const auto sel = load_selections(dir.path() / "o.jsonl");
  ASSERT_EQ(sel.size(), 3u);
  EXPECT_EQ(sel[0].chosen_index, 1u);
  EXPECT_EQ(sel[1].chosen_index, 0u);
  EXPECT_EQ(sel[2].chosen_index, 2u);
}

TEST(Cli, OracleWithoutReferenceFails) {
  TempDir dir;
  auto src = dir.write("src.jsonl", R"({"id":"x","src_lang":"en","tgt_lang":"de","text":"Hello."})" "\n");
  write_hypothesis_sets(dir.path() / "h.jsonl", {{"x", {{"Hallo", "hendy", 1, 1, 5, 1}}}});
  EXPECT_NE(run_cli("ensemble --method oracle --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) +
                    " --out " + q(dir.path() / "o.jsonl")),
            0);
  EXPECT_FALSE(fs::exists(dir.path() / "o.jsonl"));
}

TEST(Cli, RankWithPrecomputedScores) {
  TempDir dir;
  std::mt19937_64 rng(41);
  std::string segs, table;
  std::vector<HypothesisSet> sets;
  std::vector<std::vector<double>> scores;
  std::uniform_real_distribution<double> u(0, 1);
  for (int s = 0; s < 20; ++s) {
    const std::string id = "r" + std::to_string(s), text = "source " + std::to_string(s);
    segs += R"({"id":")" + id + R"(","src_lang":"en","tgt_lang":"de","text":")" + text + "\"}\n";
    HypothesisSet set{id, {}};
    std::vector<double> sc;
    for (int k = 0; k < 6; ++k) {
      const std::string mt = "hyp " + std::to_string(s) + "-" + std::to_string(k);
      set.hypotheses.push_back({mt, "hendy", 1, 1, 5, 2});
      sc.push_back(std::round(u(rng) * 8) / 8);
      ordered_json row{{"src", text}, {"mt", mt}, {"score", sc.back()}};
      table += row.dump() + "\n";
    }
    sets.push_back(set);
    scores.push_back(sc);
  }
  auto src = dir.write("src.jsonl", segs);
  auto tab = dir.write("qe.jsonl", table);
  write_hypothesis_sets(dir.path() / "h.jsonl", sets);
  ASSERT_EQ(run_cli("ensemble --method rank --scorer qe=stub:table:" + tab.string() + " --in " +
                    q(dir.path() / "h.jsonl") + " --sources " + q(src) + " --out " + q(dir.path() / "r.jsonl")),
            0);
  const auto sel = load_selections(dir.path() / "r.jsonl");
  ASSERT_EQ(sel.size(), 20u);
  for (std::size_t s = 0; s < 20; ++s) EXPECT_EQ(*sel[s].chosen_index, oracle::argmax(scores[s]));
}

TEST(Cli, RankWithoutQeScorerFails) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "h.jsonl") + " --n 3"), 0);
  EXPECT_EQ(run_cli("ensemble --method rank --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) +
                    " --out " + q(dir.path() / "r.jsonl")),
            1);
}

TEST(Cli, SubprocessUtilityMatchesInProcess) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "h.jsonl") + " --n 6 --seed 2"), 0);
  const std::string common = " --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) + " --method mbr";
  ASSERT_EQ(run_cli("ensemble" + common + " --out " + q(dir.path() / "a.jsonl")), 0);
  ASSERT_EQ(run_cli("ensemble" + common + " --utility 'exec:" + std::string(STUB_SCORER_PATH) +
                    " --metric chrf' --out " + q(dir.path() / "b.jsonl")),
            0);
  const auto a = load_selections(dir.path() / "a.jsonl"), b = load_selections(dir.path() / "b.jsonl");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].chosen_index, b[i].chosen_index);
}

TEST(Cli, SweepSingleTemperatureOneRow) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("sweep-temperature --in " + q(src) + " --temps 0.5 --n 4 --out " + q(dir.path() / "s.csv")), 0);
  const auto lines = read_lines(dir.path() / "s.csv");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "temperature,diversity,quality_mbr,quality_rank,config_hash,seed");
}

TEST(Cli, SweepDiversityNonDecreasing) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("sweep-temperature --in " + q(src) + " --temps 0.2,0.6,1.0 --n 10 --out " +
                    q(dir.path() / "s.csv")),
            0);
  const auto lines = read_lines(dir.path() / "s.csv");
  ASSERT_EQ(lines.size(), 4u);
  double prev = -1;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const double d = std::stod(lines[i].substr(lines[i].find(',') + 1));
    EXPECT_GE(d, prev) << lines[i];
    prev = d;
  }
}

TEST(Cli, PerturbAndRecords) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  auto toks = dir.write("toks.txt", "the\nof\nand\n");
  ASSERT_EQ(run_cli("perturb --kind insert --tokens " + q(toks) + " --in " + q(src) + " --out " + q(dir.path() / "p.jsonl")), 0);
  const auto orig = load_segments(src), pert = load_segments(dir.path() / "p.jsonl");
  ASSERT_EQ(pert.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(pert[i].id, orig[i].id);
    EXPECT_TRUE(pert[i].text.ends_with(" " + orig[i].text));
    EXPECT_EQ(pert[i].reference, orig[i].reference);
  }
  EXPECT_EQ(read_lines(dir.path() / "p.jsonl.records.jsonl").size(), 3u);
  EXPECT_EQ(run_cli("perturb --kind insert --in " + q(src) + " --out " + q(dir.path() / "x.jsonl")), 1);
}

TEST(Cli, HallucinationReportExtremes) {
  TempDir dir;
  auto refs = dir.write("refs.jsonl", three_segments);
  const auto segs = load_segments(refs);
  std::vector<EnsembleSelection> good, gibberish;
  for (const auto& s : segs) {
    good.push_back({s.id, Method::mbr, 0, *s.reference, std::nullopt, {}});
    gibberish.push_back({s.id, Method::mbr, 0, "zzz qqq", std::nullopt, {}});
  }
  write_selections(dir.path() / "base.jsonl", good);
  write_selections(dir.path() / "gib.jsonl", gibberish);
  ASSERT_EQ(run_cli("hallucination-report --in " + q(dir.path() / "base.jsonl") + " --perturbed " +
                    q(dir.path() / "gib.jsonl") + " --refs " + q(refs) + " --out " + q(dir.path() / "a.csv")),
            0);
  ASSERT_EQ(run_cli("hallucination-report --in " + q(dir.path() / "base.jsonl") + " --perturbed " +
                    q(dir.path() / "base.jsonl") + " --refs " + q(refs) + " --out " + q(dir.path() / "b.csv")),
            0);
  const auto a = read_lines(dir.path() / "a.csv"), b = read_lines(dir.path() / "b.csv");
  ASSERT_EQ(a.size(), 2u);
  EXPECT_TRUE(a[1].starts_with("mbr,3,3,3,100,0,")) << a[1];
  EXPECT_TRUE(b[1].starts_with("mbr,3,3,0,0,0,")) << b[1];
  EXPECT_EQ(read_lines(dir.path() / "a.csv.verdicts.jsonl").size(), 3u);
}

TEST(Cli, HallucinationReportIdMismatch) {
  TempDir dir;
  auto refs = dir.write("refs.jsonl", three_segments);
  write_selections(dir.path() / "a.jsonl", {{"s1", Method::mbr, 0, "x", std::nullopt, {}}});
  write_selections(dir.path() / "b.jsonl", {{"s2", Method::mbr, 0, "x", std::nullopt, {}}});
  EXPECT_EQ(run_cli("hallucination-report --in " + q(dir.path() / "a.jsonl") + " --perturbed " +
                    q(dir.path() / "b.jsonl") + " --refs " + q(refs) + " --out " + q(dir.path() / "r.csv")),
            1);
  EXPECT_FALSE(fs::exists(dir.path() / "r.csv"));
}

TEST(Cli, LangidReport) {
  TempDir dir;
  write_selections(dir.path() / "s.jsonl", {{"a", Method::mbr, 0, "Guten Tag", std::nullopt, {}},
                                            {"b", Method::mbr, 0, "Добрый день", std::nullopt, {}},
                                            {"a", Method::rank, 0, "Guten Tag", std::nullopt, {}}});
  ASSERT_EQ(run_cli("langid-report --scorer langid=stub:script:de,ru --expected-lang de --in " +
                    q(dir.path() / "s.jsonl") + " --out " + q(dir.path() / "l.csv")),
            0);
  const auto lines = read_lines(dir.path() / "l.csv");
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_TRUE(lines[1].starts_with("mbr,2,1,50,de,")) << lines[1];
  EXPECT_TRUE(lines[2].starts_with("rank,1,0,0,de,")) << lines[2];
}

TEST(Cli, ChooseBestAndGenerateBestWriteLedgers) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  ASSERT_EQ(run_cli("generate --in " + q(src) + " --out " + q(dir.path() / "h.jsonl") + " --n 4"), 0);
  for (std::string m : {"choose_best", "generate_best"}) {
    const auto out = dir.path() / (m + ".jsonl");
    ASSERT_EQ(run_cli("ensemble --method " + m + " --in " + q(dir.path() / "h.jsonl") + " --sources " + q(src) +
                      " --out " + q(out)),
              0);
    const auto sel = load_selections(out);
    ASSERT_EQ(sel.size(), 3u);
    EXPECT_EQ(sel[0].chosen_index.has_value(), m == "choose_best");
    const auto ledger = load_ledger(fs::path(out.string() + ".ledger.jsonl"));
    EXPECT_EQ(ledger.size(), 3u);
    EXPECT_EQ(ledger.records()[0].purpose, m);
  }
}

TEST(Cli, ConfigFileAndOverrides) {
  TempDir dir;
  auto src = dir.write("src.jsonl", three_segments);
  auto cfg = dir.write("cfg.json", R"({"sampling":{"mode":"biased","n":3},"seed":9})");
  ASSERT_EQ(run_cli("generate --config " + q(cfg) + " --in " + q(src) + " --out " + q(dir.path() / "h.jsonl")), 0);
  auto sets = load_hypothesis_sets(dir.path() / "h.jsonl");
  EXPECT_EQ(sets[0].size(), 3u);
  EXPECT_EQ(sets[0].hypotheses[0].temperature, 0.8);
  EXPECT_EQ(sets[0].hypotheses[0].top_p, 0.95);
  EXPECT_NE(read_lines(dir.path() / "h.jsonl")[0].find(R"("seed":9)"), std::string::npos);
  ASSERT_EQ(run_cli("generate --config " + q(cfg) + " --n 2 --in " + q(src) + " --out " + q(dir.path() / "h2.jsonl")), 0);
  EXPECT_EQ(load_hypothesis_sets(dir.path() / "h2.jsonl")[0].size(), 2u);
  auto bad = dir.write("bad.json", R"({"sampling":{"mode":"biased"},"tempreature":1})");
  EXPECT_EQ(run_cli("generate --config " + q(bad) + " --in " + q(src) + " --out " + q(dir.path() / "h3.jsonl")), 1);
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(run_cli(""), 0);
  EXPECT_NE(run_cli("frobnicate --out x"), 0);
  EXPECT_NE(run_cli("generate --in /nonexistent.jsonl --out /tmp/never.jsonl"), 0);
}

TEST(Pipeline, ConfigHashIgnoresParallelism) {
  RunConfig a, b;
  b.parallelism = 8;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(Pipeline, MbrIssuesNSquaredWireCallsPerSegment) {
  std::vector<SourceSegment> segs;
  std::vector<HypothesisSet> sets;
  for (int s = 0; s < 4; ++s) {
    segs.push_back({"s" + std::to_string(s), "en", "de", "src", std::nullopt});
    HypothesisSet set{segs.back().id, {}};
    for (int k = 0; k < 5; ++k)
      set.hypotheses.push_back({"seg" + std::to_string(s) + " hyp " + std::to_string(k), "hendy", 1, 1, 1, 1});
    sets.push_back(set);
  }
  auto svc = make_utility_stub(chrf_utility());
  auto h = std::shared_ptr<ScorerHandle>(ScorerHandle::connect(std::make_unique<LoopbackChannel>(svc)));
  for (const auto& set : sets) {
    const auto before = svc->calls();
    auto m = compute_utility_matrix("src", set, *h, {0.0, 1.0});
    auto sel = mbr_select(m);
    diversity(m);
    EXPECT_EQ(svc->calls() - before, 25u);
  }
}
