#pragma once

#include <string>
#include <vector>

#include "smile/corpus.hpp"
#include "smile/model.hpp"

namespace smile {

// The (x_prm, y_prm, x_tgt, y_tgt) tuple fed to one training example.
struct PromptTargetPair {
  Utterance prompt;
  Utterance target;

  const std::string& language_id() const { return target.language_id; }
  void validate(const ModelConfig& cfg) const;
};

enum class AblationMode { full, no_prompt_audio, no_prompt_text };
std::string to_string(AblationMode mode);
AblationMode ablation_from_string(const std::string& s);

struct TrainExample {
  Eigen::MatrixXd x_input;         // [x_prm; x_tgt] (or x_tgt alone)
  std::vector<int> z_input;        // [specials, y_prm, sep, y_tgt, eot]
  std::vector<uint8_t> loss_mask;  // one per prediction position (z_input.size()-1),
                                   // true exactly where y_tgt or the final eot is predicted
};

struct SamplerOptions {
  std::vector<std::string> languages;  // empty = every supported language
  int prompt_frame_cap = 128;
  // When set, languages may also name unsupported ones, whose pool is the
  // unsupported test split (the few-shot fine-tuning regime).
  bool include_unsupported_test = false;
};

// Uniform over eligible languages, then uniform over ordered prompt/target
// pairs of distinct utterances that fit the prompt frame cap.
PromptTargetPair sample_pair(Rng& rng, const CorpusSplit& split, const SamplerOptions& opts = {});

// Decoder layout: [sot, lang, task] (+ y_prm unless no_prompt_text) + sep +
// y_tgt + eot. lang_token < 0 means "use the pair's own language token".
TrainExample build_example(const PromptTargetPair& pair, const Vocabulary& vocab,
                           AblationMode mode, const ModelConfig& cfg, int lang_token = -1);

// Plain supervised layout [sot, lang, task, y..., eot] over one or more
// same-language utterances whose audio is concatenated; loss covers the
// whole transcript.
TrainExample build_supervised_example(const std::vector<const Utterance*>& utts,
                                      const Vocabulary& vocab, const ModelConfig& cfg,
                                      int lang_token);

// Inference-time decoder prefix for the same layout.
std::vector<int> decode_prefix(const Vocabulary& vocab, int lang_token,
                               const std::vector<std::string>* prompt_tokens, bool with_sep);

// Mean NLL over the mask-true positions only.
double smile_loss(const Model& model, const TrainExample& example);

struct TrainConfig {
  int steps = 300;
  int batch_size = 8;
  double peak_lr = 1e-3;
  int warmup_steps = 100;
  uint64_t seed = 0;
  AblationMode ablation = AblationMode::full;
  std::vector<std::string> train_languages;  // empty = every supported language
  // Fraction of examples whose language token is replaced by unk-lang, so the
  // prompt is the only language cue; this is what transfers to languages that
  // have no token of their own.
  double unk_lang_prob = 0.5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  bool include_unsupported_test = false;
  // Fresh gaussian noise added to the input frames of every training
  // example; the corpus is small enough to memorize verbatim without it.
  double noise_aug = 0.1;
  // Probability of replacing a teacher-forced target-region input token with
  // a random symbol. Without it the decoder recalls training transcripts
  // instead of reading the audio.
  double word_dropout = 0.3;

  void validate() const;
};

struct SupervisedConfig {
  int steps = 1500;
  int batch_size = 8;
  double peak_lr = 1e-3;
  int warmup_steps = 100;
  uint64_t seed = 0;
  // Probability of concatenating two same-language utterances into one
  // example, the long-form analog that prompted decoding relies on.
  double concat_prob = 0.5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  std::vector<std::string> train_languages;
  double noise_aug = 0.1;
  double word_dropout = 0.3;

  void validate() const;
};

struct StepRecord {
  int step;
  double lr;
  double loss;
};
using LossTrace = std::vector<StepRecord>;

// Linear warmup to peak_lr, then linear decay to zero at the final step.
// Steps are 1-based.
double lr_at(int step, int total_steps, int warmup_steps, double peak_lr);

LossTrace train(const TrainConfig& cfg, const CorpusSplit& split, Model& model);
LossTrace train_supervised(const SupervisedConfig& cfg, const CorpusSplit& split, Model& model);

void write_loss_trace_csv(const std::filesystem::path& path, const LossTrace& trace);

// Decoupled weight-decay Adam over the model's trainable parameters.
class AdamW {
 public:
  AdamW(Model& model, double beta1, double beta2, double weight_decay, double eps = 1e-8);
  void step(double lr);

 private:
  Model& model_;
  double beta1_, beta2_, weight_decay_, eps_;
  int t_ = 0;
  std::vector<Eigen::MatrixXd> m_, v_;
};

}  // namespace smile
