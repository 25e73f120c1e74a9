#pragma once

#include <string>
#include <vector>

#include "smile/corpus.hpp"
#include "smile/model.hpp"

namespace smile {

struct UtteranceEmbedding {
  std::string utterance_id;
  std::string language_id;
  Eigen::VectorXd vec;  // mean-pooled encoder features
  int n_tokens = -1;    // -1 when unknown (e.g. cache loaded from disk)
};

// Immutable after build; selections may run concurrently.
struct EmbeddingCache {
  std::vector<UtteranceEmbedding> items;
  std::string source_checkpoint;  // provenance, in-memory only

  int dim() const { return items.empty() ? 0 : static_cast<int>(items.front().vec.size()); }
  const UtteranceEmbedding* find(const std::string& utterance_id) const;
  void validate() const;

  // On-disk format: magic "SMLE", u32 version=1, u32 N, u32 dim, then per
  // record (u16 id length, id bytes, u16 lang length, lang bytes, dim
  // little-endian float32).
  void save(const std::filesystem::path& path) const;
  static EmbeddingCache load(const std::filesystem::path& path);
};

enum class SelectionKind { l2, cosine, random, token_length };
std::string to_string(SelectionKind kind);
SelectionKind selection_kind_from_string(const std::string& s);

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::l2;
  uint64_t seed = 0;  // used by random only
};

// One embedding per utterance under the prompt frame cap; over-cap
// utterances are skipped (and reported on stderr). Input order is preserved.
EmbeddingCache build_cache(const Model& model, const std::vector<const Utterance*>& utts,
                           const std::string& source_checkpoint = "");
EmbeddingCache build_cache(const Model& model, const std::vector<Utterance>& utts,
                           const std::string& source_checkpoint = "");

// Leave-one-out selection: the target itself is excluded from the pool.
// Ties break toward the lexicographically smallest utterance_id.
std::string select_prompt(const std::string& target_id, const EmbeddingCache& cache,
                          const SelectionStrategy& strategy);
std::string select_prompt(const Eigen::VectorXd& target_vec, const std::string& target_id,
                          const EmbeddingCache& cache, const SelectionStrategy& strategy);

}  // namespace smile
