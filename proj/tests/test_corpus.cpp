#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "smile/corpus.hpp"

using namespace smile;
namespace fs = std::filesystem;

namespace {

CorpusParams small_params() {
  CorpusParams p;
  p.seed = 7;
  p.n_supported = 3;
  p.n_unsupported = 1;
  p.utterances_per_language = 6;
  p.unsupported_utterances_per_language = 6;
  p.feature_dim = 8;
  p.inventory_size = 10;
  p.n_classes = 8;
  p.script_size = 4;
  return p;
}

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "smile_corpus_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("generate_corpus counts match the request") {
  CorpusSplit split = generate_corpus(7, 12, 4, 40, 16);
  CHECK(split.languages.size() == 16);
  CHECK(split.supported_languages.size() == 12);
  CHECK(split.unsupported_languages.size() == 4);
  size_t total =
      split.supported_train.size() + split.supported_test.size() + split.unsupported_test.size();
  CHECK(total == 640);
  CHECK(split.unsupported_test.size() == 4 * 40);
}

TEST_CASE("generate_corpus is byte-identical for equal seeds") {
  CorpusSplit a = generate_corpus(small_params());
  CorpusSplit b = generate_corpus(small_params());
  std::ostringstream sa, sb;
  auto all = [](const CorpusSplit& s) {
    std::vector<Utterance> v = s.supported_train;
    v.insert(v.end(), s.supported_test.begin(), s.supported_test.end());
    v.insert(v.end(), s.unsupported_test.begin(), s.unsupported_test.end());
    return v;
  };
  write_manifest(sa, all(a), a.languages);
  write_manifest(sb, all(b), b.languages);
  CHECK(sa.str() == sb.str());

  CorpusParams other = small_params();
  other.seed = 8;
  CorpusSplit c = generate_corpus(other);
  std::ostringstream sc;
  write_manifest(sc, all(c), c.languages);
  CHECK(sa.str() != sc.str());
}

TEST_CASE("n_unsupported=0 yields an empty unsupported side") {
  CorpusParams p = small_params();
  p.n_unsupported = 0;
  CorpusSplit split = generate_corpus(p);
  CHECK(split.unsupported_test.empty());
  CHECK(split.unsupported_languages.empty());
}

TEST_CASE("generate_corpus rejects bad arguments") {
  CHECK_THROWS_AS(generate_corpus(1, 0, 0, 10, 8), InvalidArgument);
  CHECK_THROWS_AS(generate_corpus(1, 2, -1, 10, 8), InvalidArgument);
  CHECK_THROWS_AS(generate_corpus(1, 2, 1, 0, 8), InvalidArgument);
  CHECK_THROWS_AS(generate_corpus(1, 2, 1, 10, 1), InvalidArgument);
}

TEST_CASE("frame counts respect the duration range") {
  CorpusSplit split = generate_corpus(small_params());
  auto check = [&](const Utterance& u) {
    const LanguageSpec& spec = split.spec_for(u.language_id);
    double ratio = static_cast<double>(u.n_frames()) / u.n_tokens();
    CHECK(ratio >= spec.d_min);
    CHECK(ratio <= spec.d_max);
  };
  for (const auto& u : split.supported_train) check(u);
  for (const auto& u : split.supported_test) check(u);
  for (const auto& u : split.unsupported_test) check(u);
}

TEST_CASE("language sets are disjoint and validated") {
  CorpusSplit split = generate_corpus(small_params());
  CHECK_NOTHROW(split.validate());
  for (const auto& l : split.supported_languages) CHECK(!split.unsupported_languages.count(l));
  // injecting an overlap trips validation
  split.unsupported_languages.insert(*split.supported_languages.begin());
  CHECK_THROWS_AS(split.validate(), InvariantViolation);
}

TEST_CASE("filter_lengths keeps strictly-below-threshold utterances in order") {
  Utterance a;
  a.utterance_id = "a";
  a.language_id = "L";
  a.frames = Eigen::MatrixXd::Zero(100, 4);
  a.tokens = {"x", "y"};
  Utterance b = a;
  b.utterance_id = "b";
  b.frames = Eigen::MatrixXd::Zero(300, 4);
  auto [kept, dropped] = filter_lengths({a, b}, 256, 220);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].utterance_id == "a");
  REQUIRE(dropped.size() == 1);
  CHECK(dropped[0].utterance_id == "b");

  // boundary is strict
  Utterance c = a;
  c.frames = Eigen::MatrixXd::Zero(256, 4);
  CHECK(filter_lengths({c}, 256, 220).first.empty());

  auto [k2, d2] = filter_lengths({}, 10, 10);
  CHECK(k2.empty());
  CHECK(d2.empty());
  CHECK_THROWS_AS(filter_lengths({}, 0, 10), InvalidArgument);
}

TEST_CASE("filter_lengths is idempotent") {
  CorpusSplit split = generate_corpus(small_params());
  auto [kept, dropped] = filter_lengths(split.supported_train, 40, 12);
  auto [kept2, dropped2] = filter_lengths(kept, 40, 12);
  CHECK(kept2.size() == kept.size());
  CHECK(dropped2.empty());
}

TEST_CASE("manifest round-trips utterances") {
  fs::path dir = temp_dir();
  CorpusSplit split = generate_corpus(small_params());
  fs::path path = dir / "roundtrip.jsonl";
  save_manifest(path, split);
  std::vector<LanguageSpec> langs;
  std::vector<Utterance> utts = load_manifest(path, &langs);
  size_t total =
      split.supported_train.size() + split.supported_test.size() + split.unsupported_test.size();
  CHECK(utts.size() == total);
  CHECK(langs.size() == split.languages.size());
  // spot check one utterance's content
  const Utterance& orig = split.supported_train.front();
  const Utterance* found = nullptr;
  for (const auto& u : utts)
    if (u.utterance_id == orig.utterance_id) found = &u;
  REQUIRE(found != nullptr);
  CHECK(found->tokens == orig.tokens);
  CHECK(found->n_frames() == orig.n_frames());
  CHECK((found->frames.cast<float>() - orig.frames.cast<float>()).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("manifest with binary frame files round-trips") {
  fs::path dir = temp_dir();
  CorpusSplit split = generate_corpus(small_params());
  fs::path path = dir / "binary.jsonl";
  save_manifest(path, split, /*frames_as_files=*/true);
  std::vector<Utterance> utts = load_manifest(path);
  CHECK(utts.size() == split.supported_train.size() + split.supported_test.size() +
                           split.unsupported_test.size());
  CHECK(utts.front().n_frames() > 0);
}

TEST_CASE("frame file round-trips float32 exactly") {
  fs::path dir = temp_dir();
  Eigen::MatrixXd m(3, 2);
  m << 1.5, -2.25, 0.125, 7.0, -0.5, 3.75;
  fs::path path = dir / "frames.smlf";
  write_frame_file(path, m);
  Eigen::MatrixXd r = read_frame_file(path);
  CHECK(r.rows() == 3);
  CHECK(r.cols() == 2);
  CHECK((r - m).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("well-formed three-record manifest loads") {
  fs::path dir = temp_dir();
  fs::path path = dir / "three.jsonl";
  {
    std::ofstream os(path);
    os << R"({"language_id":"L1","script":["a","b"]})" << "\n";
    os << R"({"utterance_id":"u1","language_id":"L1","tokens":["a"],"frames":[[0.0,1.0],[1.0,0.0]]})"
       << "\n";
    os << R"({"utterance_id":"u2","language_id":"L1","tokens":["b","a"],"frames":[[0.5,0.5],[1.0,1.0]]})"
       << "\n";
    os << R"({"utterance_id":"u3","language_id":"L1","tokens":["a","b"],"frames":[0.0,1.0,2.0,3.0],"feature_dim":2})"
       << "\n";
  }
  std::vector<Utterance> utts = load_manifest(path);
  REQUIRE(utts.size() == 3);
  CHECK(utts[2].n_frames() == 2);
  CHECK(utts[2].frames(1, 0) == 2.0);
}

TEST_CASE("manifest token outside declared script is an invariant violation") {
  fs::path dir = temp_dir();
  fs::path path = dir / "bad_token.jsonl";
  {
    std::ofstream os(path);
    os << R"({"language_id":"L1","script":["a","b"]})" << "\n";
    os << R"({"utterance_id":"u1","language_id":"L1","tokens":["z"],"frames":[[0.0,1.0]]})" << "\n";
  }
  CHECK_THROWS_AS(load_manifest(path), InvariantViolation);
}

TEST_CASE("missing manifest is a distinct not-found error") {
  CHECK_THROWS_AS(load_manifest(temp_dir() / "no_such_file.jsonl"), NotFoundError);
}

TEST_CASE("malformed manifest line reports its line number") {
  fs::path dir = temp_dir();
  fs::path path = dir / "bad_json.jsonl";
  {
    std::ofstream os(path);
    os << R"({"language_id":"L1","script":["a"]})" << "\n";
    os << "{not json\n";
  }
  try {
    load_manifest(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("duplicate utterance ids are rejected") {
  fs::path dir = temp_dir();
  fs::path path = dir / "dup.jsonl";
  {
    std::ofstream os(path);
    os << R"({"utterance_id":"u1","language_id":"L1","tokens":["a"],"frames":[[0.0]]})" << "\n";
    os << R"({"utterance_id":"u1","language_id":"L1","tokens":["a"],"frames":[[0.0]]})" << "\n";
  }
  CHECK_THROWS_AS(load_manifest(path), InvariantViolation);
}

TEST_CASE("no immediate token repeats in generated corpora") {
  CorpusSplit split = generate_corpus(small_params());
  for (const auto& u : split.supported_train)
    for (size_t i = 1; i < u.tokens.size(); ++i) CHECK(u.tokens[i] != u.tokens[i - 1]);
}
