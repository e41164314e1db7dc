#include <doctest.h>

#include <set>
#include <sstream>

#include "fixture.hpp"
#include "tree/datasets.hpp"

using namespace tree;
using fixture::write_file;

namespace {

DatasetManifest manifest(DatasetFormat format, const std::filesystem::path& root) {
  DatasetManifest m;
  m.name = "test";
  m.format = format;
  m.root = root;
  return m;
}

PipelineTrace successful_trace(const std::string& id) {
  PipelineTrace trace;
  trace.instance_id = id;
  trace.instance = QaInstance{id, {"img-" + id, "/data/" + id + ".jpg", {}}, "Why " + id + "?", {{"x", 1}}, {}, {}};
  StageRecord observe;
  observe.stage = Stage::observe;
  StageRecord think;
  think.stage = Stage::think;
  StageRecord rethink;
  rethink.stage = Stage::rethink;
  trace.records = {observe, think, rethink};
  trace.captions = {{"img-" + id, "caption " + id, "cap"}};
  trace.rationale = Rationale{"rationale " + id, "x", "raw", false};
  trace.final = FinalAnswer{"answer " + id, "answer " + id, std::nullopt};
  return trace;
}

}  // namespace

TEST_CASE("unified jsonl") {
  fixture::TempDir tmp;
  write_file(tmp / "d/images/b.png", "x");
  write_file(tmp / "d/val.jsonl",
             R"({"id":"2","image":"images/b.png","question":" What? ","answers":["red","red","blue"]})"
             "\n"
             R"({"id":"1","image":"images/missing.png","image_id":"m","question":"Which?","answers":[],"choices":["a","b"],"correct_choice":1})"
             "\n");
  const auto result = load_qa(manifest(DatasetFormat::unified_jsonl, tmp / "d"));
  REQUIRE(result.instances.size() == 2);
  CHECK(result.instances[0].instance_id == "1");
  CHECK(result.instances[0].image.id == "m");
  CHECK(result.instances[0].gold_choice_index == 1);
  CHECK(result.instances[1].image.id == "b");
  CHECK(result.instances[1].question == "What?");
  CHECK(result.instances[1].gold_answers == std::vector<GoldAnswer>{{"red", 2}, {"blue", 1}});
  CHECK(result.instances[1].image.locator == (tmp / "d/images/b.png").string());
  REQUIRE(result.warnings.size() == 1);
  CHECK(result.warnings[0].find("missing.png") != std::string::npos);
}

TEST_CASE("unified jsonl errors cite line and field") {
  fixture::TempDir tmp;
  write_file(tmp / "a.jsonl", R"({"id":"1","image":"x.png","question":"Q?"})" "\n" R"({"id":"2","question":"Q?"})" "\n");
  try {
    load_qa(manifest(DatasetFormat::unified_jsonl, tmp / "a.jsonl"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::load_error);
    const std::string what = e.what();
    CHECK(what.find("line 2") != std::string::npos);
    CHECK(what.find("'image'") != std::string::npos);
  }
  write_file(tmp / "b.jsonl",
             R"({"id":"1","image":"x.png","question":"Q?","choices":["a"],"correct_choice":3})" "\n");
  CHECK_THROWS_AS(load_qa(manifest(DatasetFormat::unified_jsonl, tmp / "b.jsonl")), Error);
  write_file(tmp / "c.jsonl", R"({"id":"1","image":"x.png","question":"Q?"})" "\n" R"({"id":"1","image":"x.png","question":"Q?"})" "\n");
  CHECK_THROWS_AS(load_qa(manifest(DatasetFormat::unified_jsonl, tmp / "c.jsonl")), Error);
  CHECK_THROWS_AS(load_qa(manifest(DatasetFormat::unified_jsonl, tmp / "none.jsonl")), Error);
}

TEST_CASE("vqa v2 layout") {
  fixture::TempDir tmp;
  write_file(tmp / "v2_OpenEnded_mscoco_val2014_questions.json",
             R"({"questions":[{"question_id":11,"image_id":42,"question":"What color?"}]})");
  write_file(tmp / "v2_mscoco_val2014_annotations.json",
             R"({"annotations":[{"question_id":11,"answers":[{"answer":"red"},{"answer":"red"},{"answer":"pink"}]}]})");
  auto m = manifest(DatasetFormat::vqa_v2, tmp.path());
  m.split = "val2014";
  const auto result = load_qa(m);
  REQUIRE(result.instances.size() == 1);
  const auto& qa = result.instances[0];
  CHECK(qa.instance_id == "11");
  CHECK(qa.image.id == "42");
  CHECK(qa.image.locator == (tmp / "val2014/COCO_val2014_000000000042.jpg").string());
  CHECK(qa.gold_answers == std::vector<GoldAnswer>{{"red", 2}, {"pink", 1}});
  CHECK(result.warnings.size() == 1);
}

TEST_CASE("gqa layout") {
  fixture::TempDir tmp;
  write_file(tmp / "val_balanced_questions.json",
             R"({"201":{"imageId":"n1","question":"Is it on?","answer":"yes"},"200":{"imageId":"n2","question":"Where?","answer":"park"}})");
  const auto result = load_qa(manifest(DatasetFormat::gqa, tmp.path()));
  REQUIRE(result.instances.size() == 2);
  CHECK(result.instances[0].instance_id == "200");
  CHECK(result.instances[0].image.locator == (tmp / "images/n2.jpg").string());
  CHECK(result.instances[0].gold_answers == std::vector<GoldAnswer>{{"park", 1}});
}

TEST_CASE("a-okvqa layout") {
  fixture::TempDir tmp;
  write_file(tmp / "aokvqa_v1p0_val.json",
             R"([{"question_id":"q1","image_id":7,"question":"What sport?","choices":["golf","surfing","tennis","ski"],"correct_choice_idx":1,"direct_answers":["surfing","surfing","surf"]}])");
  const auto result = load_qa(manifest(DatasetFormat::aokvqa, tmp.path()));
  REQUIRE(result.instances.size() == 1);
  const auto& qa = result.instances[0];
  CHECK(qa.image.locator == (tmp / "val2017/000000000007.jpg").string());
  CHECK(qa.gold_choice_index == 1);
  CHECK(qa.choices->size() == 4);
  CHECK(qa.gold_answers == std::vector<GoldAnswer>{{"surfing", 2}, {"surf", 1}});
}

TEST_CASE("matrix directory layout") {
  fixture::TempDir tmp;
  for (const auto* name : {"c1.png", "c2.PNG", "c10.png", "a1.png", "a2.jpg", "a3.png", "notes.txt"}) {
    write_file(tmp / "t1" / name, "x");
  }
  write_file(tmp / "t1/answer.txt", "3\n");
  for (const auto* name : {"c1.png", "c2.png", "a1.png", "a2.png"}) write_file(tmp / "t2" / name, "x");
  const auto result = load_matrix(manifest(DatasetFormat::matrix_dir, tmp.path()));
  REQUIRE(result.instances.size() == 2);
  const auto& t1 = result.instances[0];
  REQUIRE(t1.context_images.size() == 3);
  CHECK(t1.context_images[2].id == "t1/c10");
  CHECK(t1.candidate_images.size() == 3);
  CHECK(t1.gold_candidate_index == 2);
  CHECK_FALSE(result.instances[1].gold_candidate_index.has_value());
  CHECK(result.warnings.size() == 1);

  write_file(tmp / "t3/c1.png", "x");
  write_file(tmp / "t3/a1.png", "x");
  CHECK_THROWS_AS(load_matrix(manifest(DatasetFormat::matrix_dir, tmp.path())), Error);
}

TEST_CASE("matrix answer out of range") {
  fixture::TempDir tmp;
  for (const auto* name : {"c1.png", "c2.png", "a1.png", "a2.png"}) write_file(tmp / "t" / name, "x");
  write_file(tmp / "t/answer.txt", "3");
  CHECK_THROWS_AS(load_matrix(manifest(DatasetFormat::matrix_dir, tmp.path())), Error);
  write_file(tmp / "t/answer.txt", "0");
  CHECK_THROWS_AS(load_matrix(manifest(DatasetFormat::matrix_dir, tmp.path())), Error);
}

TEST_CASE("subsampling is seeded and reproducible") {
  const auto a = subsample_indices(100, 10, 5);
  CHECK(a == subsample_indices(100, 10, 5));
  CHECK(a != subsample_indices(100, 10, 6));
  CHECK(a.size() == 10);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 10);
  CHECK(subsample_indices(5, 10, 0).size() == 5);

  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path(), {.qa_count = 12});
  auto m = manifest(DatasetFormat::unified_jsonl, corpus.data_file);
  m.limit = 4;
  const auto first = load_qa(m).instances;
  CHECK(first.size() == 4);
  CHECK(load_qa(m).instances == first);
}

TEST_CASE("loading is pure") {
  fixture::TempDir tmp;
  const auto corpus = fixture::make_corpus(tmp.path(), {.qa_count = 8});
  const auto m = manifest(DatasetFormat::unified_jsonl, corpus.data_file);
  CHECK(load_qa(m).instances == load_qa(m).instances);
  int annotators = 0;
  for (const auto& g : load_qa(m).instances[0].gold_answers) annotators += g.count;
  CHECK(annotators == static_cast<int>(corpus.specs[0].gold.size()));
}

TEST_CASE("rationale export") {
  std::vector<PipelineTrace> traces = {successful_trace("a"), successful_trace("b"), successful_trace("c")};
  std::ostringstream out;
  auto result = export_rationales(traces, out);
  CHECK(result.written == 3);
  CHECK(result.skipped == 0);

  std::istringstream lines(out.str());
  std::string line;
  std::getline(lines, line);
  const auto record = parse_rationale_record(line);
  CHECK(record == RationaleRecord{"a", "/data/a.jpg", "Why a?", "caption a", "rationale a", "answer a", std::nullopt});

  traces[1].failure = StageFailure{"observe", ErrorKind::unscripted_prompt, "x"};
  traces[1].final.reset();
  std::ostringstream second;
  result = export_rationales(traces, second, {{"a", 0.5}});
  CHECK(result.written == 2);
  CHECK(result.skipped == 1);
  std::ostringstream third;
  export_rationales(traces, third, {{"a", 0.5}});
  CHECK(second.str() == third.str());
  CHECK(parse_rationale_record(second.str().substr(0, second.str().find('\n'))).score == 0.5);

  traces[2].rationale->degenerate = true;
  std::ostringstream fourth;
  CHECK(export_rationales(traces, fourth).written == 1);

  CHECK_THROWS_AS(parse_rationale_record("{}"), Error);
  CHECK_THROWS_AS(parse_rationale_record(
                      R"({"id":"a","image":"i","question":"q","caption":"c","rationale":"r","answer":"x","score":2})"),
                  Error);
}
