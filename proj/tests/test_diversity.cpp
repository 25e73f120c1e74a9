#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>

#include "smile/diversity.hpp"

using namespace smile;

namespace {

BinaryMatrix from_rows(const std::vector<std::vector<uint8_t>>& rows) {
  BinaryMatrix m(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows.empty() ? 0 : rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

}  // namespace

TEST_CASE("pca on collinear data explains all variance with one component") {
  Eigen::MatrixXd X(5, 3);
  Eigen::Vector3d dir(1.0, -2.0, 0.5);
  for (int i = 0; i < 5; ++i) X.row(i) = (0.7 * i - 1.0) * dir.transpose();
  PcaResult r = pca_project(X, 1);
  CHECK(r.effective_dim == 1);
  CHECK(r.explained_variance_ratio == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("pca with d >= N-1 explains everything") {
  Rng rng(4);
  Eigen::MatrixXd X(4, 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) X(i, j) = rng.gaussian();
  PcaResult r = pca_project(X, 10);
  CHECK(r.effective_dim == 3);  // min(10, N-1, D)
  CHECK(r.explained_variance_ratio == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("pca matches an independent eigendecomposition up to sign") {
  Rng rng(17);
  Eigen::MatrixXd X(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) X(i, j) = rng.gaussian();
  int d = 3;
  PcaResult r = pca_project(X, d);

  // oracle: eigenvectors of the covariance matrix
  Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  Eigen::MatrixXd cov = Xc.transpose() * Xc / (X.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // eigenvalues ascending; take the top d in descending order
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd axis = eig.eigenvectors().col(3 - j);
    Eigen::VectorXd proj_oracle = Xc * axis;
    Eigen::VectorXd proj = r.projected.col(j);
    double diff_same = (proj - proj_oracle).cwiseAbs().maxCoeff();
    double diff_flip = (proj + proj_oracle).cwiseAbs().maxCoeff();
    CHECK(std::min(diff_same, diff_flip) < 1e-8);
  }
  CHECK_THROWS_AS(pca_project(Eigen::MatrixXd(1, 3), 1), InvalidArgument);
}

TEST_CASE("percentile uses linear interpolation between closest ranks") {
  std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  CHECK(percentile(v, 25.0) == doctest::Approx(1.75));
  CHECK(percentile(v, 50.0) == doctest::Approx(2.5));
  CHECK(percentile(v, 75.0) == doctest::Approx(3.25));
  CHECK(percentile(v, 0.0) == doctest::Approx(1.0));
  CHECK(percentile(v, 100.0) == doctest::Approx(4.0));
  CHECK_THROWS_AS(percentile({}, 50.0), InvalidArgument);
}

TEST_CASE("discretize puts four distinct values into four distinct bins") {
  Eigen::MatrixXd Z(4, 1);
  Z << 1.0, 2.0, 3.0, 4.0;
  BinaryFeatureMatrix bfm = discretize(Z);
  REQUIRE(bfm.M.rows() == 4);
  REQUIRE(bfm.M.cols() == 4);
  // permutation-like: every row and every column has exactly one 1
  for (int i = 0; i < 4; ++i) {
    CHECK(bfm.M.row(i).cast<int>().sum() == 1);
    CHECK(bfm.M.col(i).cast<int>().sum() == 1);
  }
  CHECK(bfm.M(0, 0) == 1);  // smallest value lands in the lowest bin
  CHECK(bfm.M(3, 3) == 1);
}

TEST_CASE("discretize of identical rows gives identical rows summing to d") {
  Eigen::MatrixXd Z = Eigen::MatrixXd::Constant(5, 3, 0.42);
  BinaryFeatureMatrix bfm = discretize(Z);
  for (int i = 0; i < 5; ++i) {
    CHECK(bfm.M.row(i).cast<int>().sum() == 3);
    CHECK(bfm.M.row(i) == bfm.M.row(0));
  }
}

TEST_CASE("every discretized row sums to exactly d") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + static_cast<int>(rng.bounded(12));
    int d = 1 + static_cast<int>(rng.bounded(6));
    Eigen::MatrixXd Z(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) Z(i, j) = rng.gaussian();
    BinaryFeatureMatrix bfm = discretize(Z);
    for (int i = 0; i < n; ++i) CHECK(bfm.M.row(i).cast<int>().sum() == d);
    for (int j = 0; j < d; ++j) {
      CHECK(bfm.thresholds(0, j) <= bfm.thresholds(1, j));
      CHECK(bfm.thresholds(1, j) <= bfm.thresholds(2, j));
    }
  }
}

TEST_CASE("typology index basics") {
  CHECK(typology_index(from_rows({{1, 0, 1, 0}})) == 0.0);  // k=1 -> all p in {0,1}
  CHECK(typology_index(from_rows({{1, 0}, {0, 1}})) == doctest::Approx(1.0));
  // one balanced column contributes one bit, averaged over 2 columns
  CHECK(typology_index(from_rows({{1, 1}, {0, 1}})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(typology_index(BinaryMatrix(0, 4)), InvalidArgument);
}

TEST_CASE("jaccard coverage identities") {
  BinaryMatrix M = from_rows({{1, 0, 1, 0}, {0, 0, 1, 1}});
  CHECK(std::abs(jaccard_coverage(M, M) - 1.0) < 1e-6);

  // S covers half of F's covered bins and nothing else
  BinaryMatrix F = from_rows({{1, 1, 0, 0}, {0, 0, 1, 1}});
  BinaryMatrix S = from_rows({{1, 1, 0, 0}});
  CHECK(jaccard_coverage(S, F) == doctest::Approx(0.5));

  BinaryMatrix empty_rows = BinaryMatrix::Zero(1, 4);
  CHECK(jaccard_coverage(empty_rows, F) == 0.0);
  BinaryMatrix all_zero = BinaryMatrix::Zero(2, 4);
  CHECK(jaccard_coverage(all_zero, all_zero) == 1.0);  // both covers empty

  BinaryMatrix wrong = BinaryMatrix::Zero(1, 3);
  CHECK_THROWS_AS(jaccard_coverage(wrong, F), InvalidArgument);
}

TEST_CASE("jaccard coverage is monotone along nested chains") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 3 + static_cast<int>(rng.bounded(8));
    int cols = 4 * (1 + static_cast<int>(rng.bounded(4)));
    BinaryMatrix M(n, cols);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cols; ++j) M(i, j) = rng.uniform() < 0.3 ? 1 : 0;
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    double prev = -1.0;
    for (int k = 1; k <= n; ++k) {
      std::vector<int> subset(order.begin(), order.begin() + k);
      double j = jaccard_coverage(select_rows(M, subset), M);
      CHECK(j >= prev);
      prev = j;
    }
    CHECK(prev == doctest::Approx(1.0));
  }
}

TEST_CASE("monte carlo with k = N is deterministic with zero sigma") {
  Eigen::MatrixXd Z(5, 2);
  Rng rng(2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 2; ++j) Z(i, j) = rng.gaussian();
  BinaryFeatureMatrix bfm = discretize(Z);
  auto est = monte_carlo(bfm, {5}, 50, {"TI", "Jmm"}, 9);
  REQUIRE(est.size() == 2);
  for (const auto& e : est) {
    CHECK(e.sigma == 0.0);
    if (e.metric == "TI") CHECK(e.mu == doctest::Approx(typology_index(bfm.M)));
    if (e.metric == "Jmm") CHECK(e.mu == doctest::Approx(1.0));
  }
}

TEST_CASE("monte carlo with k = 1 gives TI exactly zero") {
  Eigen::MatrixXd Z(6, 3);
  Rng rng(3);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j) Z(i, j) = rng.gaussian();
  BinaryFeatureMatrix bfm = discretize(Z);
  auto est = monte_carlo(bfm, {1}, 64, {"TI"}, 4);
  REQUIRE(est.size() == 1);
  CHECK(est[0].mu == 0.0);
  CHECK(est[0].sigma == 0.0);
}

TEST_CASE("monte carlo mean matches the exhaustive subset average at N=5,k=2") {
  Eigen::MatrixXd Z(5, 3);
  Rng rng(6);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) Z(i, j) = rng.gaussian();
  BinaryFeatureMatrix bfm = discretize(Z);

  for (const std::string& metric : {std::string("TI"), std::string("Jmm")}) {
    double exact = 0.0;
    int count = 0;
    for (int a = 0; a < 5; ++a)
      for (int b = a + 1; b < 5; ++b) {
        BinaryMatrix sub = select_rows(bfm.M, {a, b});
        exact += metric == "TI" ? typology_index(sub) : jaccard_coverage(sub, bfm.M);
        ++count;
      }
    exact /= count;

    const int B = 1000;
    auto est = monte_carlo(bfm, {2}, B, {metric}, 11);
    REQUIRE(est.size() == 1);
    double tol = 3.0 * est[0].sigma / std::sqrt(static_cast<double>(B));
    CHECK(std::abs(est[0].mu - exact) <= std::max(tol, 1e-12));
  }
}

TEST_CASE("monte carlo is deterministic per seed and validates arguments") {
  Eigen::MatrixXd Z(4, 2);
  Rng rng(7);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) Z(i, j) = rng.gaussian();
  BinaryFeatureMatrix bfm = discretize(Z);
  auto a = monte_carlo(bfm, {2, 3}, 25, {"TI", "Jmm"}, 13);
  auto b = monte_carlo(bfm, {2, 3}, 25, {"TI", "Jmm"}, 13);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mu == b[i].mu);
    CHECK(a[i].sigma == b[i].sigma);
  }
  CHECK_THROWS_AS(monte_carlo(bfm, {5}, 10, {"TI"}, 0), InvalidArgument);
  CHECK_THROWS_AS(monte_carlo(bfm, {2}, 0, {"TI"}, 0), InvalidArgument);
  CHECK_THROWS_AS(monte_carlo(bfm, {2}, 10, {"XX"}, 0), InvalidArgument);
}

TEST_CASE("language vectors average per language in sorted order") {
  EmbeddingCache cache;
  auto mk = [](const std::string& id, const std::string& lang, double v) {
    UtteranceEmbedding e;
    e.utterance_id = id;
    e.language_id = lang;
    e.vec = Eigen::VectorXd::Constant(2, v);
    return e;
  };
  cache.items = {mk("u1", "zz", 4.0), mk("u2", "aa", 1.0), mk("u3", "zz", 2.0)};
  auto vecs = language_vectors_from_cache(cache);
  REQUIRE(vecs.size() == 2);
  CHECK(vecs[0].language_id == "aa");
  CHECK(vecs[0].e(0) == doctest::Approx(1.0));
  CHECK(vecs[1].language_id == "zz");
  CHECK(vecs[1].e(0) == doctest::Approx(3.0));
  Eigen::MatrixXd X = stack_language_vectors(vecs);
  CHECK(X.rows() == 2);
  CHECK(X(1, 1) == doctest::Approx(3.0));
}
