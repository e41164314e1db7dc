// Serial reference vs OpenMP kernels: per-instance dataset runs over a
// scripted corpus and the random-baseline trials.

#include <benchmark/benchmark.h>

#include "fixture.hpp"
#include "tree/datasets.hpp"
#include "tree/evaluation.hpp"
#include "tree/pipeline.hpp"

namespace {

struct Corpus {
  fixture::TempDir dir;
  std::unique_ptr<tree::Pipeline> pipeline;
  std::vector<tree::Instance> instances;

  Corpus() {
    fixture::CorpusOptions options;
    options.qa_count = 200;
    options.matrix_count = 24;
    const auto corpus = fixture::make_corpus(dir.path(), options);
    const auto config = fixture::run_config(corpus);
    pipeline = std::make_unique<tree::Pipeline>(config, tree::make_backends(config, nullptr));
    tree::DatasetManifest qa;
    qa.root = corpus.data_file;
    for (auto& i : tree::load_qa(qa).instances) instances.emplace_back(std::move(i));
    tree::DatasetManifest matrix;
    matrix.format = tree::DatasetFormat::matrix_dir;
    matrix.root = corpus.matrix_dir;
    for (auto& i : tree::load_matrix(matrix).instances) instances.emplace_back(std::move(i));
  }
};

Corpus& corpus() {
  static Corpus instance;
  return instance;
}

void BM_RunDatasetSerial(benchmark::State& state) {
  auto& c = corpus();
  for (auto _ : state) benchmark::DoNotOptimize(tree::run_dataset_serial(*c.pipeline, c.instances));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c.instances.size()));
}
BENCHMARK(BM_RunDatasetSerial)->Unit(benchmark::kMillisecond);

void BM_RunDatasetParallel(benchmark::State& state) {
  auto& c = corpus();
  const int threads = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(tree::run_dataset(*c.pipeline, c.instances, threads));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c.instances.size()));
}
BENCHMARK(BM_RunDatasetParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

struct BaselineTasks {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> golds;
  BaselineTasks() : counts(20000, 6), golds(20000) {
    for (std::size_t i = 0; i < golds.size(); ++i) golds[i] = (i * 7) % 6;
  }
};

void BM_RandomBaselineSerial(benchmark::State& state) {
  static const BaselineTasks tasks;
  for (auto _ : state) {
    benchmark::DoNotOptimize(tree::random_baseline_accuracy_serial(tasks.counts, tasks.golds, 50, 1));
  }
}
BENCHMARK(BM_RandomBaselineSerial)->Unit(benchmark::kMillisecond);

void BM_RandomBaselineParallel(benchmark::State& state) {
  static const BaselineTasks tasks;
  for (auto _ : state) {
    benchmark::DoNotOptimize(tree::random_baseline_accuracy(tasks.counts, tasks.golds, 50, 1));
  }
}
BENCHMARK(BM_RandomBaselineParallel)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
