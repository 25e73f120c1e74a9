#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "smile/common.hpp"

namespace smile {

struct LanguageSpec {
  std::string language_id;
  std::vector<std::string> script;                  // sorted, unique symbols
  std::map<std::string, Eigen::VectorXd> codebook;  // symbol -> mean feature vector
  double noise_scale = 0.1;
  int d_min = 2;  // frames emitted per token, inclusive range
  int d_max = 4;

  bool in_script(const std::string& symbol) const;
  void validate() const;
};

struct Utterance {
  std::string utterance_id;
  std::string language_id;
  Eigen::MatrixXd frames;  // n_frames x feature_dim
  std::vector<std::string> tokens;

  int n_frames() const { return static_cast<int>(frames.rows()); }
  int n_tokens() const { return static_cast<int>(tokens.size()); }
  int feature_dim() const { return static_cast<int>(frames.cols()); }
};

struct CorpusSplit {
  std::vector<LanguageSpec> languages;  // supported first, then unsupported
  std::vector<Utterance> supported_train;
  std::vector<Utterance> supported_test;
  std::vector<Utterance> unsupported_test;
  std::set<std::string> supported_languages;
  std::set<std::string> unsupported_languages;

  const LanguageSpec& spec_for(const std::string& language_id) const;
  std::vector<const Utterance*> test_pool() const;  // supported_test then unsupported_test
  void validate() const;
};

struct CorpusParams {
  uint64_t seed = 7;
  int n_supported = 12;
  int n_unsupported = 4;
  // Supported languages need enough data to learn transcription rather than
  // memorize transcripts; the unsupported side stays small (it is all test
  // pool and is never trained on).
  int utterances_per_language = 200;
  int unsupported_utterances_per_language = 40;
  int feature_dim = 16;
  // Shared generative prior: every language maps its script onto a random
  // subset of one global base dictionary. Unseen languages are therefore
  // novel symbol/class assignments of familiar acoustic classes, which is
  // what makes a single in-context example informative.
  int inventory_size = 24;
  int n_classes = 16;
  int script_size = 8;
  double noise_scale = 0.1;
  int d_min = 2;
  int d_max = 4;
  int min_tokens = 4;
  int max_tokens = 20;
  double test_fraction = 0.05;
  // Gain applied to the first frame of every token, an onset cue that makes
  // token boundaries observable the way real speech onsets are.
  double onset_gain = 1.5;

  void validate() const;
};

CorpusSplit generate_corpus(const CorpusParams& params);
CorpusSplit generate_corpus(uint64_t seed, int n_supported, int n_unsupported,
                            int utterances_per_language, int feature_dim);

// Pre-processing caps: the 256-frame cap is the desk analog of a 30-second
// input window, 220 is the usual transcript-token cut for that window.
inline constexpr int kDefaultMaxFrames = 256;
inline constexpr int kDefaultMaxTokens = 220;

// Partition into (kept, dropped): kept iff n_frames < max_frames and
// n_tokens < max_tokens, original order preserved.
std::pair<std::vector<Utterance>, std::vector<Utterance>> filter_lengths(
    const std::vector<Utterance>& utts, int max_frames, int max_tokens);

// Newline-delimited manifest. Each line is a JSON object: either an
// utterance record {utterance_id, language_id, tokens, frames} where frames
// is an array of per-frame rows or a relative path to a binary frame file,
// or a language declaration {language_id, script[, d_min]} used to validate
// the utterances that follow.
std::vector<Utterance> load_manifest(const std::filesystem::path& path);
std::vector<Utterance> load_manifest(const std::filesystem::path& path,
                                     std::vector<LanguageSpec>* languages_out);

void write_manifest(std::ostream& os, const std::vector<Utterance>& utts,
                    const std::vector<LanguageSpec>& languages);
void save_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts,
                   const std::vector<LanguageSpec>& languages, bool frames_as_files = false);
void save_manifest(const std::filesystem::path& path, const CorpusSplit& split,
                   bool frames_as_files = false);

// Binary frame file: magic "SMLF", u32 version=1, u32 n_frames,
// u32 feature_dim, then little-endian float32 row-major.
void write_frame_file(const std::filesystem::path& path, const Eigen::MatrixXd& frames);
Eigen::MatrixXd read_frame_file(const std::filesystem::path& path);

}  // namespace smile
