#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "smile/retrieval.hpp"

using namespace smile;
namespace fs = std::filesystem;

namespace {

UtteranceEmbedding emb(const std::string& id, const std::string& lang,
                       std::initializer_list<double> v, int n_tokens = 3) {
  UtteranceEmbedding e;
  e.utterance_id = id;
  e.language_id = lang;
  e.vec = Eigen::VectorXd(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) e.vec(i++) = x;
  e.n_tokens = n_tokens;
  return e;
}

EmbeddingCache random_cache(Rng& rng, int n, int dim) {
  EmbeddingCache cache;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "u%04d", i);
    UtteranceEmbedding e;
    e.utterance_id = id;
    e.language_id = "L";
    e.vec = Eigen::VectorXd(dim);
    for (int d = 0; d < dim; ++d) e.vec(d) = rng.gaussian();
    e.n_tokens = 1 + static_cast<int>(rng.bounded(20));
    cache.items.push_back(std::move(e));
  }
  return cache;
}

// independent scans with scalar accumulation, used as oracles
std::string naive_l2(const Eigen::VectorXd& target, const EmbeddingCache& cache,
                     const std::string& target_id) {
  std::string best;
  double best_d = 0;
  for (const auto& e : cache.items) {
    if (e.utterance_id == target_id) continue;
    double d = 0;
    for (int i = 0; i < e.vec.size(); ++i) d += (e.vec(i) - target(i)) * (e.vec(i) - target(i));
    d = std::sqrt(d);
    if (best.empty() || d < best_d || (d == best_d && e.utterance_id < best)) {
      best = e.utterance_id;
      best_d = d;
    }
  }
  return best;
}

std::string naive_cosine(const Eigen::VectorXd& target, const EmbeddingCache& cache,
                         const std::string& target_id) {
  std::string best;
  double best_s = 0;
  for (const auto& e : cache.items) {
    if (e.utterance_id == target_id) continue;
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < e.vec.size(); ++i) {
      dot += e.vec(i) * target(i);
      na += e.vec(i) * e.vec(i);
      nb += target(i) * target(i);
    }
    double s = dot / (std::sqrt(na) * std::sqrt(nb));
    if (best.empty() || s > best_s || (s == best_s && e.utterance_id < best)) {
      best = e.utterance_id;
      best_s = s;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("exact duplicate of the target is selected with distance zero") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {1.0, 2.0}), emb("dup", "L", {1.0, 2.0}),
                 emb("far", "L", {9.0, 9.0})};
  SelectionStrategy s{SelectionKind::l2, 0};
  CHECK(select_prompt("tgt", cache, s) == "dup");
}

TEST_CASE("hand-set three-candidate pool: l2 and cosine agree on the first") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {1.0, 0.0}), emb("a", "L", {1.0, 0.0}),
                 emb("b", "L", {0.0, 1.0}), emb("c", "L", {0.9, 0.1})};
  CHECK(select_prompt("tgt", cache, {SelectionKind::l2, 0}) == "a");
  CHECK(select_prompt("tgt", cache, {SelectionKind::cosine, 0}) == "a");
}

TEST_CASE("an l2/cosine-disagreeing pool exists and both match their oracles") {
  Rng rng(2024);
  bool found = false;
  for (int trial = 0; trial < 2000 && !found; ++trial) {
    EmbeddingCache cache = random_cache(rng, 4, 2);
    const Eigen::VectorXd target = cache.items[0].vec;
    std::string l2 = select_prompt("u0000", cache, {SelectionKind::l2, 0});
    std::string cos = select_prompt("u0000", cache, {SelectionKind::cosine, 0});
    CHECK(l2 == naive_l2(target, cache, "u0000"));
    CHECK(cos == naive_cosine(target, cache, "u0000"));
    found = l2 != cos;
  }
  CHECK(found);
}

TEST_CASE("l2 and cosine equal brute-force scans on random pools") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 2 + static_cast<int>(rng.bounded(200));
    EmbeddingCache cache = random_cache(rng, n, 4);
    const std::string target_id = cache.items[rng.bounded(cache.items.size())].utterance_id;
    const Eigen::VectorXd target = cache.find(target_id)->vec;
    CHECK(select_prompt(target_id, cache, {SelectionKind::l2, 0}) ==
          naive_l2(target, cache, target_id));
    CHECK(select_prompt(target_id, cache, {SelectionKind::cosine, 0}) ==
          naive_cosine(target, cache, target_id));
  }
}

TEST_CASE("leave-one-out never returns the target") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    EmbeddingCache cache = random_cache(rng, 2 + static_cast<int>(rng.bounded(30)), 3);
    const std::string target_id = cache.items[rng.bounded(cache.items.size())].utterance_id;
    for (SelectionKind kind : {SelectionKind::l2, SelectionKind::cosine, SelectionKind::random,
                               SelectionKind::token_length})
      CHECK(select_prompt(target_id, cache, {kind, trial * 31u}) != target_id);
  }
}

TEST_CASE("selection is invariant under positive global scaling") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    EmbeddingCache cache = random_cache(rng, 2 + static_cast<int>(rng.bounded(50)), 3);
    const std::string target_id = cache.items[0].utterance_id;
    std::string l2 = select_prompt(target_id, cache, {SelectionKind::l2, 0});
    std::string cos = select_prompt(target_id, cache, {SelectionKind::cosine, 0});
    double lambda = 0.001 + 100.0 * rng.uniform();
    EmbeddingCache scaled = cache;
    for (auto& e : scaled.items) e.vec *= lambda;
    CHECK(select_prompt(target_id, scaled, {SelectionKind::l2, 0}) == l2);
    CHECK(select_prompt(target_id, scaled, {SelectionKind::cosine, 0}) == cos);
  }
}

TEST_CASE("random strategy is reproducible and near-uniform over seeds") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {0.0}), emb("a", "L", {1.0}), emb("b", "L", {2.0}),
                 emb("c", "L", {3.0}), emb("d", "L", {4.0}), emb("e", "L", {5.0})};
  CHECK(select_prompt("tgt", cache, {SelectionKind::random, 42}) ==
        select_prompt("tgt", cache, {SelectionKind::random, 42}));

  std::map<std::string, int> counts;
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed)
    counts[select_prompt("tgt", cache, {SelectionKind::random, static_cast<uint64_t>(seed)})]++;
  double p = 1.0 / 5;
  double sigma = std::sqrt(p * (1 - p) / n);
  for (const auto& [id, c] : counts)
    CHECK(std::abs(static_cast<double>(c) / n - p) < 3 * sigma);
}

TEST_CASE("token_length picks the global shortest with id tie-break") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {0.0}, 5), emb("long", "L", {1.0}, 9),
                 emb("zshort", "L", {2.0}, 2), emb("ashort", "L", {3.0}, 2)};
  CHECK(select_prompt("tgt", cache, {SelectionKind::token_length, 0}) == "ashort");

  // unknown counts (disk-loaded cache) are an error for this strategy
  for (auto& e : cache.items) e.n_tokens = -1;
  CHECK_THROWS_AS(select_prompt("tgt", cache, {SelectionKind::token_length, 0}), InvalidArgument);
}

TEST_CASE("distance ties break toward the smallest utterance id") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {1.0, 1.0}), emb("zz", "L", {2.0, 2.0}),
                 emb("aa", "L", {2.0, 2.0})};
  CHECK(select_prompt("tgt", cache, {SelectionKind::l2, 0}) == "aa");
}

TEST_CASE("empty pool after leave-one-out is an error") {
  EmbeddingCache cache;
  cache.items = {emb("tgt", "L", {1.0})};
  CHECK_THROWS_AS(select_prompt("tgt", cache, {SelectionKind::l2, 0}), EmptyPoolError);
  EmbeddingCache empty;
  CHECK_THROWS_AS(select_prompt(Eigen::VectorXd::Zero(2), "x", empty, {SelectionKind::l2, 0}),
                  EmptyPoolError);
}

TEST_CASE("target missing from the cache is a not-found error for l2") {
  EmbeddingCache cache;
  cache.items = {emb("a", "L", {1.0}), emb("b", "L", {2.0})};
  CHECK_THROWS_AS(select_prompt("nope", cache, {SelectionKind::l2, 0}), NotFoundError);
}

TEST_CASE("cache file round-trips and rebuilds identically") {
  fs::path dir = fs::temp_directory_path() / "smile_retrieval_test";
  fs::create_directories(dir);
  Rng rng(3);
  EmbeddingCache cache = random_cache(rng, 9, 5);
  for (auto& e : cache.items) {
    // storage is float32; pre-quantize so the round-trip is exact
    for (int i = 0; i < e.vec.size(); ++i) e.vec(i) = static_cast<float>(e.vec(i));
  }
  fs::path p1 = dir / "c1.smle", p2 = dir / "c2.smle";
  cache.save(p1);
  cache.save(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  EmbeddingCache loaded = EmbeddingCache::load(p1);
  REQUIRE(loaded.items.size() == cache.items.size());
  for (size_t i = 0; i < loaded.items.size(); ++i) {
    CHECK(loaded.items[i].utterance_id == cache.items[i].utterance_id);
    CHECK(loaded.items[i].language_id == cache.items[i].language_id);
    CHECK((loaded.items[i].vec - cache.items[i].vec).cwiseAbs().maxCoeff() == 0.0);
    CHECK(loaded.items[i].n_tokens == -1);  // counts are not persisted
  }
  fs::path p3 = dir / "c3.smle";
  loaded.save(p3);
  std::ifstream f3(p3, std::ios::binary);
  std::string s3((std::istreambuf_iterator<char>(f3)), std::istreambuf_iterator<char>());
  CHECK(s3 == s1);
}

TEST_CASE("duplicate ids in a cache are rejected") {
  EmbeddingCache cache;
  cache.items = {emb("a", "L", {1.0}), emb("a", "L", {2.0})};
  CHECK_THROWS_AS(cache.validate(), InvariantViolation);
}

namespace {

Model cache_test_model() {
  CorpusParams p;
  p.seed = 2;
  p.n_supported = 2;
  p.n_unsupported = 0;
  p.utterances_per_language = 4;
  p.unsupported_utterances_per_language = 4;
  p.feature_dim = 4;
  p.inventory_size = 6;
  p.n_classes = 4;
  p.script_size = 3;
  p.min_tokens = 2;
  p.max_tokens = 4;
  static CorpusSplit split = generate_corpus(p);
  ModelConfig c;
  c.feature_dim = 4;
  c.hidden_dim = 8;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.max_source_frames = 20;
  c.max_target_tokens = 12;
  return Model(c, Vocabulary::build(split), 6);
}

}  // namespace

TEST_CASE("build_cache mean-pools encoder features per utterance") {
  Model model = cache_test_model();
  Utterance u;
  u.utterance_id = "const";
  u.language_id = "sl00";
  u.tokens = {"a", "b"};
  u.frames = Eigen::MatrixXd::Constant(6, 4, 0.25);
  EmbeddingCache cache = build_cache(model, std::vector<Utterance>{u});
  REQUIRE(cache.items.size() == 1);
  Eigen::VectorXd expect = model.encode(u.frames).H.colwise().mean().transpose();
  CHECK((cache.items[0].vec - expect).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cache.items[0].n_tokens == 2);
}

TEST_CASE("build_cache writes identical bytes across rebuilds and skips over-cap input") {
  fs::path dir = fs::temp_directory_path() / "smile_retrieval_test";
  fs::create_directories(dir);
  Model model = cache_test_model();
  std::vector<Utterance> utts;
  for (int i = 0; i < 3; ++i) {
    Utterance u;
    u.utterance_id = "u" + std::to_string(i);
    u.language_id = "sl00";
    u.tokens = {"a"};
    u.frames = Eigen::MatrixXd::Constant(4 + i, 4, 0.1 * (i + 1));
    utts.push_back(std::move(u));
  }
  Utterance over;
  over.utterance_id = "over_cap";
  over.language_id = "sl00";
  over.tokens = {"a"};
  over.frames = Eigen::MatrixXd::Zero(11, 4);  // prompt cap = 20/2 = 10
  utts.push_back(over);

  EmbeddingCache c1 = build_cache(model, utts);
  EmbeddingCache c2 = build_cache(model, utts);
  CHECK(c1.items.size() == 3);  // over-cap utterance excluded
  CHECK(c1.find("over_cap") == nullptr);
  fs::path p1 = dir / "r1.smle", p2 = dir / "r2.smle";
  c1.save(p1);
  c2.save(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}
