#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "smile/model.hpp"

namespace smile {

// Bigram language model with add-one smoothing; every context row is a
// normalized distribution over the full id range.
class BigramLM {
 public:
  static BigramLM train(const std::vector<std::vector<int>>& sequences, int vocab_size);

  // ctx == start_context() before anything has been emitted.
  double logp(int ctx, int next) const;
  int start_context() const { return static_cast<int>(logp_.rows()) - 1; }
  int vocab_size() const { return static_cast<int>(logp_.cols()); }

 private:
  Eigen::MatrixXd logp_;  // (V+1) x V, last row = start-of-sequence context
};

struct FusionConfig {
  double alpha = 2.7;     // LM weight
  double beta = 0.0018;   // per-token length reward
  std::shared_ptr<const BigramLM> lm;
};

struct DecodeConfig {
  enum class Mode { greedy, beam };
  Mode mode = Mode::greedy;
  int beam_width = 4;  // <= 8
  int max_new_tokens = 64;
  std::optional<FusionConfig> fusion;

  void validate() const;
};

// Abstract per-step scorer so the search is testable against hand-built
// score tables. logprobs() is the distribution over the next token.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual const Eigen::VectorXd& logprobs() const = 0;
  virtual void advance(int token) = 0;
  virtual std::unique_ptr<StepScorer> clone() const = 0;
  virtual int remaining_budget() const = 0;  // generations still possible
};

std::unique_ptr<StepScorer> make_model_scorer(const Model& model, const EncoderFeatures& feats,
                                              const std::vector<int>& prefix);
std::unique_ptr<StepScorer> make_table_scorer(std::vector<Eigen::VectorXd> per_step_logprobs);

// Generated ids up to (excluding) eot. With fusion, every step's candidate
// score is logP_asr + alpha*logP_lm(next|ctx) + beta.
std::vector<int> decode(const Model& model, const Eigen::MatrixXd& x_input,
                        const std::vector<int>& z_prefix, const DecodeConfig& cfg);
std::vector<int> decode_with_scorer(StepScorer& scorer, const DecodeConfig& cfg, int eot_id);

// Levenshtein distance with unit costs.
int64_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

// (substitutions+insertions+deletions) / |ref|; may exceed 1.
double edit_error_rate(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

// CER is over the characters of the concatenated token strings; WER treats
// each token as one word.
double token_cer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);
double token_wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

enum class ErrorClass { none, script, repeat, halluc };
std::string to_string(ErrorClass c);

// Longest window of hyp that is a consecutive repetition (>= 2 periods) of
// some substring; 0 when none exists.
int longest_periodic_run(const std::vector<std::string>& hyp);

// repeat: |hyp| >= 3|ref| and a periodic run covers >= 50% of hyp;
// script:  > 70% of hyp symbols outside ref_script;
// halluc:  |hyp| >= 2|ref| otherwise; precedence repeat > script > halluc.
ErrorClass classify_error(const std::vector<std::string>& ref, const std::vector<std::string>& hyp,
                          const std::set<std::string>& ref_script);

struct UttEval {
  std::string utterance_id;
  std::string language_id;
  double cer = 0.0;
  double wer = 0.0;
  ErrorClass cls = ErrorClass::none;
};

struct LanguageReport {
  double cer = 0.0;
  double wer = 0.0;
  int n_utts = 0;
  int n_script = 0;
  int n_repeat = 0;
  int n_halluc = 0;
  int n_none = 0;
  bool supported = false;
};

struct EvalReport {
  std::vector<std::pair<std::string, LanguageReport>> per_language;  // sorted by id
  double macro_cer = 0.0, macro_wer = 0.0;
  double macro_cer_worst3 = 0.0, macro_wer_worst3 = 0.0;  // after removing 3 worst by CER
  std::vector<std::string> removed_languages;
  double sl_cer = 0.0, sl_wer = 0.0;  // NaN when the side has no languages
  double ul_cer = 0.0, ul_wer = 0.0;

  double script_rate(bool supported_side) const;  // share of utts classified script
};

EvalReport aggregate(const std::vector<UttEval>& results, const std::set<std::string>& supported,
                     const std::set<std::string>& unsupported);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);
std::string format_results_block(const EvalReport& report);

}  // namespace smile
