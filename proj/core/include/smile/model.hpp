#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smile/common.hpp"
#include "smile/corpus.hpp"

namespace smile {

// Token ids: [sot, eot, task, sep, unk_lang, one token per supported
// language, then all text symbols in sorted order]. Ids are contiguous.
struct Vocabulary {
  std::vector<std::string> id_to_display;
  std::map<std::string, int> symbol_to_id;       // text symbols only
  std::map<std::string, int> language_token;     // supported language -> token id
  int sot = 0;
  int eot = 1;
  int task = 2;
  int sep = 3;
  int unk_lang = 4;
  int n_specials = 5;  // 5 + language_token.size(); symbols start here

  static Vocabulary build(const CorpusSplit& split);

  int size() const { return static_cast<int>(id_to_display.size()); }
  bool is_special(int id) const { return id >= 0 && id < n_specials; }
  int symbol_id(const std::string& symbol) const;
  int lang_or_unk(const std::string& language_id) const;
  const std::string& display(int id) const;

  std::string to_json_string() const;
  static Vocabulary from_json_string(const std::string& s);
};

struct ModelConfig {
  int feature_dim = 16;
  int hidden_dim = 64;
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int n_heads = 4;
  int ffn_dim = 256;
  // Kernel-3 convolutional stem ahead of the encoder stack; output length is
  // ceil(frames / conv_stride).
  int conv_stride = 2;
  int max_source_frames = 256;  // desk analog of a 30 s input window
  int max_target_tokens = 64;   // desk analog of the 448-token output cap
  std::optional<int> adapter_rank;

  // Prompt audio may use at most half the source window so that prompt plus
  // target always fits.
  int prompt_frame_cap() const { return max_source_frames / 2; }
  void validate() const;

  std::string to_json_string() const;
  static ModelConfig from_json_string(const std::string& s);
};

struct EncoderFeatures {
  Eigen::MatrixXd H;  // T' x hidden_dim, T' = ceil(frames / conv_stride)
  std::string source_id;
};

struct ParamView {
  std::string name;
  Eigen::MatrixXd* value;
  Eigen::MatrixXd* grad;
  bool trainable;
};

// Encoder-decoder transducer (pre-LN transformer, sinusoidal positions on
// both sides). All math is double precision; checkpoints store float32.
class Model {
 public:
  Model(ModelConfig cfg, Vocabulary vocab, uint64_t init_seed);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  const ModelConfig& config() const;
  const Vocabulary& vocab() const;

  EncoderFeatures encode(const Eigen::MatrixXd& frames) const;

  // Normalized log-probabilities, one row per prefix position; row t is the
  // distribution over the token at position t+1 (causal).
  Eigen::MatrixXd decoder_logits(const std::vector<int>& prefix,
                                 const EncoderFeatures& feats) const;

  // Mean NLL over mask-true positions of z[1:]; mask[t] gates the prediction
  // of z[t+1], so mask.size() == z.size()-1.
  double seq_loss(const Eigen::MatrixXd& frames, const std::vector<int>& z,
                  const std::vector<uint8_t>& mask) const;
  double seq_loss_and_grad(const Eigen::MatrixXd& frames, const std::vector<int>& z,
                           const std::vector<uint8_t>& mask);
  void zero_grad();

  static double masked_nll(const Eigen::MatrixXd& logprobs, const std::vector<int>& targets,
                           const std::vector<uint8_t>& mask);

  // Attaches rank-r low-rank factors to every attention projection and
  // feed-forward matrix and freezes everything else. Output-side factors are
  // zero-initialized, so the model's function is unchanged until trained.
  Model& apply_adapter(int rank, uint64_t seed);
  bool has_adapter() const;

  std::vector<ParamView> parameters();
  int64_t param_count() const;
  int64_t trainable_param_count() const;
  uint64_t parameter_fingerprint() const;

  // Checkpoint container: magic "SMLC", u32 version, length-prefixed JSON
  // config record, then named float32 tensors.
  void save_checkpoint(const std::filesystem::path& path) const;
  static Model load_checkpoint(const std::filesystem::path& path);

 private:
  friend class DecodeSession;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Incremental decoder state with cached keys/values; cloneable so beam
// search can branch cheaply.
class DecodeSession {
 public:
  DecodeSession(const Model& model, const EncoderFeatures& feats, const std::vector<int>& prefix);
  DecodeSession(const DecodeSession& other);
  DecodeSession& operator=(const DecodeSession& other) = delete;
  DecodeSession(DecodeSession&&) noexcept;
  ~DecodeSession();

  // Distribution over the token following everything consumed so far.
  const Eigen::VectorXd& next_logprobs() const;
  void advance(int token);
  int length() const;  // tokens consumed

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace smile
