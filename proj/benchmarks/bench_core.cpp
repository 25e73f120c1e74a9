#include <benchmark/benchmark.h>

#include "smile/corpus.hpp"
#include "smile/diversity.hpp"
#include "smile/eval.hpp"
#include "smile/meta_trainer.hpp"
#include "smile/model.hpp"
#include "smile/retrieval.hpp"

using namespace smile;

namespace {

CorpusParams bench_corpus_params() {
  CorpusParams p;
  p.seed = 12;
  p.n_supported = 4;
  p.n_unsupported = 2;
  p.utterances_per_language = 10;
  p.unsupported_utterances_per_language = 10;
  return p;
}

const CorpusSplit& bench_corpus() {
  static CorpusSplit split = generate_corpus(bench_corpus_params());
  return split;
}

Model bench_model() {
  return Model(ModelConfig{}, Vocabulary::build(bench_corpus()), 7);
}

}  // namespace

static void BM_GenerateCorpus(benchmark::State& state) {
  CorpusParams p = bench_corpus_params();
  for (auto _ : state) {
    CorpusSplit split = generate_corpus(p);
    benchmark::DoNotOptimize(split.supported_train.size());
  }
}
BENCHMARK(BM_GenerateCorpus)->Unit(benchmark::kMillisecond);

static void BM_Encode(benchmark::State& state) {
  Model model = bench_model();
  Eigen::MatrixXd frames = Eigen::MatrixXd::Random(state.range(0), 16);
  for (auto _ : state) {
    EncoderFeatures f = model.encode(frames);
    benchmark::DoNotOptimize(f.H.sum());
  }
}
BENCHMARK(BM_Encode)->Arg(40)->Arg(80)->Arg(160)->Unit(benchmark::kMillisecond);

static void BM_LossAndGrad(benchmark::State& state) {
  const CorpusSplit& split = bench_corpus();
  Model model = bench_model();
  Rng rng(5);
  SamplerOptions opts;
  opts.prompt_frame_cap = model.config().prompt_frame_cap();
  PromptTargetPair pair = sample_pair(rng, split, opts);
  TrainExample ex = build_example(pair, model.vocab(), AblationMode::full, model.config());
  for (auto _ : state) {
    model.zero_grad();
    double loss = model.seq_loss_and_grad(ex.x_input, ex.z_input, ex.loss_mask);
    benchmark::DoNotOptimize(loss);
  }
}
BENCHMARK(BM_LossAndGrad)->Unit(benchmark::kMillisecond);

static void BM_GreedyDecode(benchmark::State& state) {
  const CorpusSplit& split = bench_corpus();
  Model model = bench_model();
  const Utterance& u = split.supported_test.front();
  std::vector<int> prefix =
      decode_prefix(model.vocab(), model.vocab().lang_or_unk(u.language_id), nullptr, false);
  DecodeConfig cfg;
  for (auto _ : state) {
    auto hyp = decode(model, u.frames, prefix, cfg);
    benchmark::DoNotOptimize(hyp.size());
  }
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMillisecond);

static void BM_BeamDecode(benchmark::State& state) {
  const CorpusSplit& split = bench_corpus();
  Model model = bench_model();
  const Utterance& u = split.supported_test.front();
  std::vector<int> prefix =
      decode_prefix(model.vocab(), model.vocab().lang_or_unk(u.language_id), nullptr, false);
  DecodeConfig cfg;
  cfg.mode = DecodeConfig::Mode::beam;
  cfg.beam_width = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto hyp = decode(model, u.frames, prefix, cfg);
    benchmark::DoNotOptimize(hyp.size());
  }
}
BENCHMARK(BM_BeamDecode)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_EditErrorRate(benchmark::State& state) {
  Rng rng(9);
  std::vector<std::string> ref, hyp;
  for (int i = 0; i < state.range(0); ++i) {
    ref.emplace_back(1, static_cast<char>('a' + rng.bounded(6)));
    hyp.emplace_back(1, static_cast<char>('a' + rng.bounded(6)));
  }
  for (auto _ : state) benchmark::DoNotOptimize(edit_error_rate(ref, hyp));
}
BENCHMARK(BM_EditErrorRate)->Arg(20)->Arg(200);

static void BM_SelectPrompt(benchmark::State& state) {
  Rng rng(11);
  EmbeddingCache cache;
  for (int i = 0; i < state.range(0); ++i) {
    UtteranceEmbedding e;
    e.utterance_id = "u" + std::to_string(i);
    e.language_id = "L";
    e.vec = Eigen::VectorXd(64);
    for (int d = 0; d < 64; ++d) e.vec(d) = rng.gaussian();
    cache.items.push_back(std::move(e));
  }
  for (auto _ : state)
    benchmark::DoNotOptimize(select_prompt("u0", cache, {SelectionKind::l2, 0}));
}
BENCHMARK(BM_SelectPrompt)->Arg(256)->Arg(1024);

static void BM_DiscretizeAndMetrics(benchmark::State& state) {
  Rng rng(13);
  Eigen::MatrixXd Z(12, 8);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 8; ++j) Z(i, j) = rng.gaussian();
  for (auto _ : state) {
    BinaryFeatureMatrix bfm = discretize(Z);
    benchmark::DoNotOptimize(typology_index(bfm.M));
    benchmark::DoNotOptimize(jaccard_coverage(bfm.M, bfm.M));
  }
}
BENCHMARK(BM_DiscretizeAndMetrics);

static void BM_MonteCarlo(benchmark::State& state) {
  Rng rng(15);
  Eigen::MatrixXd Z(12, 8);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 8; ++j) Z(i, j) = rng.gaussian();
  BinaryFeatureMatrix bfm = discretize(Z);
  for (auto _ : state) {
    auto est = monte_carlo(bfm, {4, 8}, static_cast<int>(state.range(0)), {"TI", "Jmm"}, 3);
    benchmark::DoNotOptimize(est.size());
  }
}
BENCHMARK(BM_MonteCarlo)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
