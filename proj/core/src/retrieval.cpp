#include "smile/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

namespace smile {

const UtteranceEmbedding* EmbeddingCache::find(const std::string& utterance_id) const {
  for (const auto& e : items)
    if (e.utterance_id == utterance_id) return &e;
  return nullptr;
}

void EmbeddingCache::validate() const {
  std::set<std::string> ids;
  for (const auto& e : items) {
    if (!ids.insert(e.utterance_id).second)
      throw InvariantViolation("duplicate utterance_id in cache: " + e.utterance_id,
                               "utterance_id");
    if (e.vec.size() != dim())
      throw InvariantViolation("inconsistent embedding dimension for " + e.utterance_id, "vector");
    if (!e.vec.allFinite())
      throw InvariantViolation("non-finite embedding for " + e.utterance_id, "vector");
  }
}

void EmbeddingCache::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open cache for writing: " + path.string());
  io::write_magic(os, "SMLE");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<uint32_t>(items.size()));
  io::write_u32(os, static_cast<uint32_t>(dim()));
  for (const auto& e : items) {
    io::write_u16(os, static_cast<uint16_t>(e.utterance_id.size()));
    os.write(e.utterance_id.data(), static_cast<std::streamsize>(e.utterance_id.size()));
    io::write_u16(os, static_cast<uint16_t>(e.language_id.size()));
    os.write(e.language_id.data(), static_cast<std::streamsize>(e.language_id.size()));
    for (int i = 0; i < e.vec.size(); ++i) io::write_f32(os, static_cast<float>(e.vec(i)));
  }
  if (!os) throw Error("cache write failed: " + path.string());
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cache not found: " + path.string());
  io::expect_magic(is, "SMLE", "cache " + path.string());
  uint32_t version = io::read_u32(is);
  if (version != 1) throw ParseError("cache: unsupported version", 0);
  uint32_t n = io::read_u32(is);
  uint32_t dim = io::read_u32(is);
  EmbeddingCache cache;
  cache.items.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    UtteranceEmbedding e;
    uint16_t id_len = io::read_u16(is);
    e.utterance_id.resize(id_len);
    is.read(e.utterance_id.data(), id_len);
    uint16_t lang_len = io::read_u16(is);
    e.language_id.resize(lang_len);
    is.read(e.language_id.data(), lang_len);
    if (!is) throw ParseError("cache: truncated record", 0);
    e.vec.resize(dim);
    for (uint32_t d = 0; d < dim; ++d) e.vec(d) = io::read_f32(is);
    cache.items.push_back(std::move(e));
  }
  cache.validate();
  return cache;
}

std::string to_string(SelectionKind kind) {
  switch (kind) {
    case SelectionKind::l2: return "l2";
    case SelectionKind::cosine: return "cosine";
    case SelectionKind::random: return "random";
    case SelectionKind::token_length: return "token_length";
  }
  throw InvalidArgument("bad selection kind");
}

SelectionKind selection_kind_from_string(const std::string& s) {
  if (s == "l2") return SelectionKind::l2;
  if (s == "cosine") return SelectionKind::cosine;
  if (s == "random") return SelectionKind::random;
  if (s == "token_length") return SelectionKind::token_length;
  throw InvalidArgument("unknown selection strategy: " + s);
}

EmbeddingCache build_cache(const Model& model, const std::vector<const Utterance*>& utts,
                           const std::string& source_checkpoint) {
  const int cap = model.config().prompt_frame_cap();
  EmbeddingCache cache;
  cache.source_checkpoint = source_checkpoint;
  cache.items.reserve(utts.size());
  for (const Utterance* u : utts) {
    if (u->n_frames() > cap) {
      std::cerr << "cache: skipping over-cap utterance " << u->utterance_id << " (" << u->n_frames()
                << " > " << cap << " frames)\n";
      continue;
    }
    UtteranceEmbedding e;
    e.utterance_id = u->utterance_id;
    e.language_id = u->language_id;
    e.n_tokens = u->n_tokens();
    try {
      EncoderFeatures feats = model.encode(u->frames);
      e.vec = feats.H.colwise().mean().transpose();
    } catch (const Error& err) {
      throw Error(strcat_msg("cache: encoding ", u->utterance_id, " failed: ", err.what()));
    }
    cache.items.push_back(std::move(e));
  }
  cache.validate();
  return cache;
}

EmbeddingCache build_cache(const Model& model, const std::vector<Utterance>& utts,
                           const std::string& source_checkpoint) {
  std::vector<const Utterance*> ptrs;
  ptrs.reserve(utts.size());
  for (const auto& u : utts) ptrs.push_back(&u);
  return build_cache(model, ptrs, source_checkpoint);
}

namespace {

std::vector<const UtteranceEmbedding*> pool_without(const EmbeddingCache& cache,
                                                    const std::string& target_id) {
  std::vector<const UtteranceEmbedding*> pool;
  pool.reserve(cache.items.size());
  for (const auto& e : cache.items)
    if (e.utterance_id != target_id) pool.push_back(&e);
  if (pool.empty()) throw EmptyPoolError("prompt pool is empty after excluding the target");
  return pool;
}

// argmin over (score, utterance_id)
const UtteranceEmbedding* best_by(const std::vector<const UtteranceEmbedding*>& pool,
                                  const std::function<double(const UtteranceEmbedding&)>& score) {
  const UtteranceEmbedding* best = nullptr;
  double best_score = 0.0;
  for (const auto* e : pool) {
    double s = score(*e);
    if (!best || s < best_score || (s == best_score && e->utterance_id < best->utterance_id)) {
      best = e;
      best_score = s;
    }
  }
  return best;
}

}  // namespace

std::string select_prompt(const Eigen::VectorXd& target_vec, const std::string& target_id,
                          const EmbeddingCache& cache, const SelectionStrategy& strategy) {
  auto pool = pool_without(cache, target_id);
  switch (strategy.kind) {
    case SelectionKind::l2:
      return best_by(pool, [&](const UtteranceEmbedding& e) {
               return (e.vec - target_vec).norm();
             })->utterance_id;
    case SelectionKind::cosine:
      // argmax cosine similarity == argmin negated similarity
      return best_by(pool, [&](const UtteranceEmbedding& e) {
               double denom = e.vec.norm() * target_vec.norm();
               return denom == 0.0 ? 0.0 : -e.vec.dot(target_vec) / denom;
             })->utterance_id;
    case SelectionKind::random: {
      Rng rng(derive_seed(strategy.seed, fnv1a64(target_id), 0x52414e44ULL));
      return pool[rng.bounded(pool.size())]->utterance_id;
    }
    case SelectionKind::token_length:
      return best_by(pool, [&](const UtteranceEmbedding& e) {
               if (e.n_tokens < 0)
                 throw InvalidArgument("token_length selection needs token counts in the cache");
               return static_cast<double>(e.n_tokens);
             })->utterance_id;
  }
  throw InvalidArgument("bad selection strategy");
}

std::string select_prompt(const std::string& target_id, const EmbeddingCache& cache,
                          const SelectionStrategy& strategy) {
  if (strategy.kind == SelectionKind::random || strategy.kind == SelectionKind::token_length) {
    static const Eigen::VectorXd kNone;
    return select_prompt(kNone, target_id, cache, strategy);
  }
  const UtteranceEmbedding* target = cache.find(target_id);
  if (!target)
    throw NotFoundError("target utterance not in cache: " + target_id);
  return select_prompt(target->vec, target_id, cache, strategy);
}

}  // namespace smile
