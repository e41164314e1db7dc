#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "fixture.hpp"
#include "tree/cache.hpp"
#include "tree/trace_io.hpp"

using namespace tree;
using namespace tree::cli;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string s(const std::filesystem::path& p) { return p.string(); }

}  // namespace

TEST_CASE("config parsing") {
  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path(), {.qa_count = 2});
  const auto config = load_config(corpus.config_file);
  CHECK(config.run.label == "Ours");
  CHECK(config.run.concurrency_limit == 2);
  CHECK_FALSE(config.run.cache_enabled);
  CHECK(config.run.cache_dir == tmp / "cache");
  CHECK(config.run.backends.at(Role::reasoner).decoding.max_new_tokens == 256);
  CHECK(config.run.backends.at(Role::reasoner).script_path == corpus.script_file);
  REQUIRE(config.datasets.size() == 1);
  CHECK(config.datasets[0].manifest.root == corpus.data_file);
  CHECK(config.datasets[0].manifest.name == "Fixture");
  CHECK(config.vqa_variant == VqaVariant::simple);
}

TEST_CASE("config errors") {
  const std::string backends =
      "[backends.captioner]\nkind=\"scripted\"\nscript=\"s.json\"\n"
      "[backends.reasoner]\nkind=\"scripted\"\nscript=\"s.json\"\n"
      "[backends.answerer]\nkind=\"scripted\"\nscript=\"s.json\"\n";
  CHECK_NOTHROW(parse_config(backends, "/tmp"));
  auto expect_config_error = [](const std::string& text) {
    try {
      parse_config(text, "/tmp");
      FAIL("expected an error for: " << text);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::configuration);
    }
  };
  expect_config_error("[run]\nlabel = \"x\"\n");
  expect_config_error("[run]\nlabell = \"x\"\n" + backends);
  expect_config_error("[run]\nconcurrency = \"four\"\n" + backends);
  expect_config_error("[run]\nfallback_policy = \"guess\"\n" + backends);
  expect_config_error(backends + "[dataset]\nformat = \"coco\"\nroot = \"x\"\n");
  expect_config_error(backends + "[dataset]\nformat = \"gqa\"\n");
  expect_config_error("this is not toml = = =");
  expect_config_error("[backends.captioner]\nkind=\"http\"\n[backends.reasoner]\nkind=\"scripted\"\nscript=\"s\"\n"
                      "[backends.answerer]\nkind=\"scripted\"\nscript=\"s\"\n");
}

TEST_CASE("run writes traces and a table report") {
  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path());
  const auto out_dir = tmp / "out";
  const auto r = run({"--config", s(corpus.config_file), "--out", s(out_dir), "run"});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  const auto report = fixture::read_file(out_dir / "report.txt");
  CHECK(r.out == report);
  CHECK(report.starts_with(" Model | Fixture \n"));
  CHECK(read_trace_dir(out_dir / "traces" / "Fixture").size() == 20);

  const auto json = nlohmann::json::parse(fixture::read_file(out_dir / "report.json"));
  CHECK(json["label"] == "Ours");
  CHECK(json["reports"][0]["evaluated"] == 20);
  CHECK(json["reports"][0]["metric"] == "vqa_soft_accuracy");

  // eval over the written traces reproduces the aggregate.
  const auto e = run({"eval", s(out_dir / "traces" / "Fixture"), "--metric", "vqa_soft_accuracy"});
  REQUIRE(e.code == kExitOk);
  CHECK(e.out.find(json["reports"][0]["aggregate_text"].get<std::string>()) != std::string::npos);
}

TEST_CASE("partial failures exit with 2") {
  fixture::TempDir tmp;
  fixture::CorpusOptions options;
  options.qa_count = 5;
  options.observe_failures = {0, 4};
  const auto corpus = fixture::make_corpus(tmp.path(), options);
  const auto r = run({"--config", s(corpus.config_file), "--out", s(tmp / "out"), "run"});
  CHECK(r.code == kExitPartial);
  CHECK(r.err.find("q000") != std::string::npos);
  const auto json = nlohmann::json::parse(fixture::read_file(tmp / "out/report.json"));
  CHECK(json["reports"][0]["failed"] == 2);
  CHECK(json["reports"][0]["evaluated"] == 3);

  const auto exported = run({"--out", s(tmp / "r.jsonl"), "export-rationales", "--traces", s(tmp / "out/traces")});
  REQUIRE(exported.code == kExitOk);
  CHECK(exported.out.find("exported 3") != std::string::npos);
  CHECK(exported.out.find("skipped 2") != std::string::npos);
}

TEST_CASE("limit and concurrency flags") {
  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path());
  const auto r = run({"--config", s(corpus.config_file), "--out", s(tmp / "out"), "--limit", "5",
                      "--seed", "3", "--concurrency", "1", "run"});
  REQUIRE(r.code == kExitOk);
  CHECK(read_trace_dir(tmp / "out/traces/Fixture").size() == 5);
}

TEST_CASE("cache stats and no-cache") {
  fixture::TempDir tmp;
  fixture::CorpusOptions options;
  options.qa_count = 4;
  options.cache = true;
  const auto corpus = fixture::make_corpus(tmp.path(), options);
  const auto config = s(corpus.config_file);
  REQUIRE(run({"--config", config, "--out", s(tmp / "o1"), "run"}).code == kExitOk);
  REQUIRE(run({"--config", config, "--out", s(tmp / "o2"), "run"}).code == kExitOk);
  REQUIRE(run({"--config", config, "--out", s(tmp / "o3"), "--no-cache", "run"}).code == kExitOk);
  const auto stats = run({"--config", config, "cache-stats", "--compact"});
  REQUIRE(stats.code == kExitOk);
  CHECK(stats.out.find("entries: 12") != std::string::npos);
  CHECK(stats.out.find("runs: 2") != std::string::npos);
  CHECK(stats.out.find("hits 12  misses 0") != std::string::npos);
  const auto second = read_trace_dir(tmp / "o2/traces/Fixture");
  CHECK(second.front().records.front().cache_hit);
  CHECK_FALSE(read_trace_dir(tmp / "o3/traces/Fixture").front().records.front().cache_hit);
}

TEST_CASE("iq with random baseline") {
  fixture::TempDir tmp;
  fixture::CorpusOptions options;
  options.qa_count = 0;
  options.matrix_count = 6;
  const auto corpus = fixture::make_corpus(tmp.path(), options);
  const auto r = run({"--config", s(corpus.config_file), "--out", s(tmp / "out"), "iq", "--with-random-baseline",
                      "--baseline-repetitions", "2000"});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.starts_with(" Method | Matrix(%) \n"));
  CHECK(r.out.find("\n Random |") != std::string::npos);
  CHECK(r.out.find("\n Ours   |") != std::string::npos);
  CHECK(fixture::read_file(tmp / "out/predictions.tsv").find("task00\ta1") != std::string::npos);
}

TEST_CASE("iq without labels prints predictions") {
  fixture::TempDir tmp;
  fixture::CorpusOptions options;
  options.qa_count = 0;
  options.matrix_count = 2;
  const auto corpus = fixture::make_corpus(tmp.path(), options);
  for (const auto* task : {"task00", "task01"}) std::filesystem::remove(corpus.matrix_dir / task / "answer.txt");
  const auto r = run({"--config", s(corpus.config_file), "--out", s(tmp / "out"), "iq"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.starts_with("task00\ta"));
}

TEST_CASE("inspect-trace") {
  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path(), {.qa_count = 1});
  REQUIRE(run({"--config", s(corpus.config_file), "--out", s(tmp / "out"), "run"}).code == kExitOk);
  const auto r = run({"inspect-trace", s(tmp / "out/traces/Fixture/q000.json")});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("instance: q000") != std::string::npos);
  CHECK(r.out.find("[think] scripted-reasoner") != std::string::npos);
  CHECK(r.out.find("final: zebra") != std::string::npos);
}

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"run"}).code == kExitUsage);
  CHECK(run({"--config", "/no/such.toml", "run"}).code == kExitUsage);
  CHECK(run({"--limit", "0", "run"}).code == kExitUsage);
  CHECK(run({"inspect-trace", "/no/such.json"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
}
