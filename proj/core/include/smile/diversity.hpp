#pragma once

#include <string>
#include <vector>

#include "smile/retrieval.hpp"

namespace smile {

struct LanguageVector {
  std::string language_id;
  Eigen::VectorXd e;  // mean of the language's utterance embeddings
};

// Grouped by language_id (sorted), one mean vector per language.
std::vector<LanguageVector> language_vectors_from_cache(const EmbeddingCache& cache);
Eigen::MatrixXd stack_language_vectors(const std::vector<LanguageVector>& vecs);

struct PcaResult {
  Eigen::MatrixXd projected;  // N x effective_dim
  double explained_variance_ratio = 0.0;
  int effective_dim = 0;
};

// Centered PCA; effective dim = min(d, N-1, D_raw). Each principal axis is
// sign-fixed so its largest-magnitude coefficient is positive.
PcaResult pca_project(const Eigen::MatrixXd& X, int d);

using BinaryMatrix = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct BinaryFeatureMatrix {
  BinaryMatrix M;  // N x 4d, one-hot 4-level code per component
  std::vector<std::string> language_order;
  Eigen::MatrixXd thresholds;  // 3 x d (25/50/75 percentiles per component)

  int n() const { return static_cast<int>(M.rows()); }
  int d() const { return static_cast<int>(M.cols()) / 4; }
};

// Global quartile thresholds per component (linear interpolation between
// closest ranks); bins are [<t1), [t1,t2), [t2,t3), [>=t3]. Every row sums
// to exactly d.
BinaryFeatureMatrix discretize(const Eigen::MatrixXd& Z,
                               std::vector<std::string> language_order = {});

double percentile(std::vector<double> values, double q);  // q in [0,100]

BinaryMatrix select_rows(const BinaryMatrix& M, const std::vector<int>& rows);

// Mean binary entropy over all bins; 0 for a single row, at most 1.
double typology_index(const BinaryMatrix& M_S);

// Boolean Jaccard between covered-bin sets; 1 when both covers are empty.
double jaccard_coverage(const BinaryMatrix& M_S, const BinaryMatrix& M_F);

struct DiversityEstimate {
  int k = 0;
  std::string metric;  // "TI" or "Jmm"
  double mu = 0.0;
  double sigma = 0.0;  // unbiased (ddof=1), 0 when B == 1
  int B = 0;
  uint64_t seed = 0;
};

// B uniform k-subsets without replacement per (k, metric); each draw's
// sub-seed is derived from (seed, k, metric, b).
std::vector<DiversityEstimate> monte_carlo(const BinaryFeatureMatrix& bfm,
                                           const std::vector<int>& subset_sizes, int B,
                                           const std::vector<std::string>& metrics, uint64_t seed);

void write_estimates_csv(const std::filesystem::path& path,
                         const std::vector<DiversityEstimate>& estimates);

}  // namespace smile
