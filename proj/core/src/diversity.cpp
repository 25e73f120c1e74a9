#include "smile/diversity.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace smile {

std::vector<LanguageVector> language_vectors_from_cache(const EmbeddingCache& cache) {
  if (cache.items.empty()) throw InvalidArgument("empty embedding cache");
  std::map<std::string, std::pair<Eigen::VectorXd, int>> acc;
  for (const auto& e : cache.items) {
    auto it = acc.find(e.language_id);
    if (it == acc.end())
      acc.emplace(e.language_id, std::make_pair(e.vec, 1));
    else {
      it->second.first += e.vec;
      it->second.second += 1;
    }
  }
  std::vector<LanguageVector> out;
  out.reserve(acc.size());
  for (const auto& [lang, sum_n] : acc)
    out.push_back({lang, sum_n.first / static_cast<double>(sum_n.second)});
  return out;
}

Eigen::MatrixXd stack_language_vectors(const std::vector<LanguageVector>& vecs) {
  if (vecs.empty()) throw InvalidArgument("no language vectors");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(vecs.size()), vecs.front().e.size());
  for (size_t i = 0; i < vecs.size(); ++i) {
    if (vecs[i].e.size() != X.cols())
      throw InvariantViolation("language vector dimension mismatch for " + vecs[i].language_id,
                               "e");
    X.row(static_cast<Eigen::Index>(i)) = vecs[i].e.transpose();
  }
  return X;
}

PcaResult pca_project(const Eigen::MatrixXd& X, int d) {
  const Eigen::Index N = X.rows(), D = X.cols();
  if (N < 2) throw InvalidArgument("pca_project: need at least two rows");
  if (d < 1) throw InvalidArgument("pca_project: d must be >= 1");
  int d_eff = std::min<int>({d, static_cast<int>(N) - 1, static_cast<int>(D)});

  Eigen::RowVectorXd mean = X.colwise().mean();
  Eigen::MatrixXd Xc = X.rowwise() - mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Xc, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();

  double total = sv.array().square().sum();
  double kept = sv.head(d_eff).array().square().sum();
  double ratio = total <= 0.0 ? 1.0 : kept / total;

  Eigen::MatrixXd components = svd.matrixV().leftCols(d_eff);
  // Sign convention: the largest-magnitude coefficient of each axis is
  // positive (first such index on ties).
  for (int j = 0; j < d_eff; ++j) {
    Eigen::Index arg = 0;
    components.col(j).cwiseAbs().maxCoeff(&arg);
    if (components(arg, j) < 0.0) components.col(j) = -components.col(j);
  }

  PcaResult res;
  res.projected = Xc * components;
  res.explained_variance_ratio = ratio;
  res.effective_dim = d_eff;
  return res;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("percentile of empty set");
  if (q < 0.0 || q > 100.0) throw InvalidArgument("percentile q must be in [0,100]");
  std::sort(values.begin(), values.end());
  // linear interpolation between closest ranks
  double h = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
  size_t lo = static_cast<size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

BinaryFeatureMatrix discretize(const Eigen::MatrixXd& Z, std::vector<std::string> language_order) {
  const Eigen::Index N = Z.rows(), d = Z.cols();
  if (N < 1) throw InvalidArgument("discretize: need at least one row");
  if (!language_order.empty() && static_cast<Eigen::Index>(language_order.size()) != N)
    throw InvalidArgument("discretize: language order size mismatch");

  BinaryFeatureMatrix out;
  out.language_order = std::move(language_order);
  out.thresholds.resize(3, d);
  out.M = BinaryMatrix::Zero(N, 4 * d);

  for (Eigen::Index j = 0; j < d; ++j) {
    std::vector<double> col(Z.col(j).data(), Z.col(j).data() + N);
    double t1 = percentile(col, 25.0);
    double t2 = percentile(col, 50.0);
    double t3 = percentile(col, 75.0);
    out.thresholds(0, j) = t1;
    out.thresholds(1, j) = t2;
    out.thresholds(2, j) = t3;
    for (Eigen::Index i = 0; i < N; ++i) {
      double z = Z(i, j);
      int bin;
      if (z < t1)
        bin = 0;
      else if (z < t2)
        bin = 1;
      else if (z < t3)
        bin = 2;
      else
        bin = 3;
      out.M(i, 4 * j + bin) = 1;
    }
  }
  return out;
}

BinaryMatrix select_rows(const BinaryMatrix& M, const std::vector<int>& rows) {
  BinaryMatrix out(static_cast<Eigen::Index>(rows.size()), M.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= M.rows()) throw InvalidArgument("select_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = M.row(rows[i]);
  }
  return out;
}

namespace {
double h2(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}
}  // namespace

double typology_index(const BinaryMatrix& M_S) {
  const Eigen::Index k = M_S.rows(), cols = M_S.cols();
  if (k < 1) throw InvalidArgument("typology_index: empty subset");
  if (cols < 1) throw InvalidArgument("typology_index: no bins");
  double sum = 0.0;
  for (Eigen::Index j = 0; j < cols; ++j) {
    double p = M_S.col(j).cast<double>().mean();
    sum += h2(p);
  }
  return sum / static_cast<double>(cols);
}

double jaccard_coverage(const BinaryMatrix& M_S, const BinaryMatrix& M_F) {
  if (M_S.cols() != M_F.cols())
    throw InvalidArgument("jaccard_coverage: column count mismatch");
  int64_t inter = 0, uni = 0;
  for (Eigen::Index j = 0; j < M_S.cols(); ++j) {
    bool cs = M_S.rows() > 0 && M_S.col(j).maxCoeff() > 0;
    bool cf = M_F.rows() > 0 && M_F.col(j).maxCoeff() > 0;
    inter += (cs && cf) ? 1 : 0;
    uni += (cs || cf) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // both covers empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<DiversityEstimate> monte_carlo(const BinaryFeatureMatrix& bfm,
                                           const std::vector<int>& subset_sizes, int B,
                                           const std::vector<std::string>& metrics,
                                           uint64_t seed) {
  if (B < 1) throw InvalidArgument("monte_carlo: B must be >= 1");
  const int N = bfm.n();
  for (int k : subset_sizes)
    if (k < 1 || k > N) throw InvalidArgument(strcat_msg("monte_carlo: k=", k, " not in [1,", N, "]"));
  for (const auto& m : metrics)
    if (m != "TI" && m != "Jmm") throw InvalidArgument("monte_carlo: unknown metric " + m);

  std::vector<DiversityEstimate> out;
  for (int k : subset_sizes) {
    for (size_t mi = 0; mi < metrics.size(); ++mi) {
      const std::string& metric = metrics[mi];
      std::vector<double> vals(B);
      for (int b = 0; b < B; ++b) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(k), fnv1a64(metric),
                            static_cast<uint64_t>(b)));
        std::vector<int> idx = rng.sample_without_replacement(N, k);
        std::sort(idx.begin(), idx.end());  // subsets are sets; canonical row
                                            // order keeps k = N draws bitwise
                                            // equal across repetitions
        BinaryMatrix sub = select_rows(bfm.M, idx);
        vals[b] = metric == "TI" ? typology_index(sub) : jaccard_coverage(sub, bfm.M);
      }
      bool all_equal = std::all_of(vals.begin(), vals.end(),
                                   [&](double v) { return v == vals.front(); });
      double mu, var = 0.0;
      if (all_equal) {
        mu = vals.front();  // k = N draws are identical; keep sigma exactly 0
      } else {
        mu = 0.0;
        for (double v : vals) mu += v;
        mu /= B;
        for (double v : vals) var += (v - mu) * (v - mu);
        var /= (B - 1);
      }
      out.push_back({k, metric, mu, std::sqrt(var), B, seed});
    }
  }
  return out;
}

void write_estimates_csv(const std::filesystem::path& path,
                         const std::vector<DiversityEstimate>& estimates) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open estimates file for writing: " + path.string());
  os << "k,metric,mu,sigma,B,seed\n";
  for (const auto& e : estimates)
    os << e.k << ',' << e.metric << ',' << format_double(e.mu) << ',' << format_double(e.sigma)
       << ',' << e.B << ',' << e.seed << '\n';
}

}  // namespace smile
