#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smile/corpus.hpp"
#include "smile/diversity.hpp"
#include "smile/eval.hpp"
#include "smile/meta_trainer.hpp"
#include "smile/model.hpp"
#include "smile/retrieval.hpp"

namespace smile {

enum class Method { vanilla, sicl_style, smile, smile_ul, fusion };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct ExperimentConfig {
  CorpusParams corpus;
  ModelConfig model;
  SupervisedConfig pretrain;
  TrainConfig train;
  DecodeConfig decode;  // fusion parameters live below; decode.fusion stays empty
  double fusion_alpha = 2.7;
  double fusion_beta = 0.0018;
  SelectionStrategy strategy;
  Method method = Method::smile;
  std::optional<int> rand_k;
  std::vector<uint64_t> seeds = {1, 2, 3};

  void validate() const;
  std::string to_json_string() const;
  static ExperimentConfig from_json_string(const std::string& s);
  void save(const std::filesystem::path& path) const;
  static ExperimentConfig load(const std::filesystem::path& path);
  uint64_t config_hash() const;
};

struct ResultRow {
  std::string method;
  uint64_t seed = 0;
  double sl_cer = 0.0, sl_wer = 0.0;
  double ul_cer = 0.0, ul_wer = 0.0;
  double macro_cer = 0.0, macro_cer_worst3 = 0.0;
  double ul_script_rate = 0.0;
  double runtime_sec = 0.0;
};

bool rows_equal_ignoring_runtime(const ResultRow& a, const ResultRow& b);
void write_result_rows_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_result_rows_csv(const std::filesystem::path& path);

// Runs the full pipeline for every seed: corpus -> pretrain -> (meta-train)
// -> cache -> decode -> aggregate. Artifacts land under
// out_dir/run_<confighash>/seed_<s>/; a rerun with the same config returns
// the persisted rows without recomputing.
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg,
                                      const std::filesystem::path& out_dir);

// Training stages only; returns the per-seed checkpoint paths.
std::vector<std::filesystem::path> train_checkpoints(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& out_dir);

struct RandKRow {
  int k = 0;
  double cer_all = 0.0, cer_sl = 0.0, cer_ul = 0.0;  // means over seeds
  double ti = 0.0, jmm = 0.0;                        // of the training subset
};

// Meta-trains on nested random k-language subsets of the supported set and
// joins CER with the subset's diversity metrics.
std::vector<RandKRow> run_rand_k_study(ExperimentConfig base, const std::vector<int>& ks,
                                       const std::filesystem::path& out_dir);
void write_rand_k_csv(const std::filesystem::path& path, const std::vector<RandKRow>& rows);

struct AblationRow {
  AblationMode mode = AblationMode::full;
  uint64_t seed = 0;
  double sl_cer = 0.0, ul_cer = 0.0;
  double ul_script_rate = 0.0;
};

std::vector<AblationRow> run_ablation(ExperimentConfig base, const std::filesystem::path& out_dir);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace smile
