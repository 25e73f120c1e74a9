#include "smile/meta_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace smile {

void PromptTargetPair::validate(const ModelConfig& cfg) const {
  if (prompt.language_id != target.language_id)
    throw InvariantViolation("prompt and target must share a language", "language_id");
  if (prompt.utterance_id == target.utterance_id)
    throw InvariantViolation("prompt and target must be distinct utterances", "utterance_id");
  if (prompt.n_frames() > cfg.prompt_frame_cap())
    throw SequenceTooLong(strcat_msg("prompt of ", prompt.n_frames(), " frames exceeds prompt cap ",
                                     cfg.prompt_frame_cap()));
  if (prompt.n_frames() + target.n_frames() > cfg.max_source_frames)
    throw SequenceTooLong("prompt plus target exceeds the source window");
}

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::full: return "full";
    case AblationMode::no_prompt_audio: return "no_prompt_audio";
    case AblationMode::no_prompt_text: return "no_prompt_text";
  }
  throw InvalidArgument("bad ablation mode");
}

AblationMode ablation_from_string(const std::string& s) {
  if (s == "full") return AblationMode::full;
  if (s == "no_prompt_audio") return AblationMode::no_prompt_audio;
  if (s == "no_prompt_text") return AblationMode::no_prompt_text;
  throw InvalidArgument("unknown ablation mode: " + s);
}

namespace {

// lang -> eligible utterances, deterministically ordered.
std::vector<std::pair<std::string, std::vector<const Utterance*>>> eligible_pools(
    const CorpusSplit& split, const SamplerOptions& opts) {
  std::vector<std::string> langs = opts.languages;
  if (langs.empty())
    langs.assign(split.supported_languages.begin(), split.supported_languages.end());
  std::sort(langs.begin(), langs.end());

  std::map<std::string, std::vector<const Utterance*>> pool;
  for (const auto& lang : langs) {
    if (split.supported_languages.count(lang)) {
      pool[lang];  // filled below from supported_train
    } else if (split.unsupported_languages.count(lang)) {
      if (!opts.include_unsupported_test)
        throw InvalidArgument("meta-training must not draw from unsupported language " + lang);
      pool[lang];
    } else {
      throw NotFoundError("unknown training language: " + lang);
    }
  }
  for (const auto& u : split.supported_train) {
    auto it = pool.find(u.language_id);
    if (it != pool.end() && u.n_frames() <= opts.prompt_frame_cap) it->second.push_back(&u);
  }
  if (opts.include_unsupported_test)
    for (const auto& u : split.unsupported_test) {
      auto it = pool.find(u.language_id);
      if (it != pool.end() && u.n_frames() <= opts.prompt_frame_cap) it->second.push_back(&u);
    }

  std::vector<std::pair<std::string, std::vector<const Utterance*>>> out;
  for (auto& [lang, utts] : pool)
    if (utts.size() >= 2) out.emplace_back(lang, std::move(utts));
  return out;
}

}  // namespace

PromptTargetPair sample_pair(Rng& rng, const CorpusSplit& split, const SamplerOptions& opts) {
  auto pools = eligible_pools(split, opts);
  if (pools.empty())
    throw EmptyPoolError("no language has two utterances under the prompt frame cap");
  const auto& [lang, utts] = pools[rng.bounded(pools.size())];
  size_t i = rng.bounded(utts.size());
  size_t j = rng.bounded(utts.size() - 1);
  if (j >= i) ++j;
  (void)lang;
  return PromptTargetPair{*utts[i], *utts[j]};
}

namespace {

std::vector<int> symbol_ids(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.symbol_id(t));
  return ids;
}

TrainExample finish_example(Eigen::MatrixXd x, std::vector<int> z, size_t n_tail,
                            const ModelConfig& cfg) {
  if (static_cast<int>(z.size()) > cfg.max_target_tokens)
    throw SequenceTooLong(strcat_msg("decoder sequence of ", z.size(), " exceeds cap of ",
                                     cfg.max_target_tokens));
  if (x.rows() > cfg.max_source_frames)
    throw SequenceTooLong("input frames exceed the source window");
  TrainExample ex;
  ex.loss_mask.assign(z.size() - 1, 0);
  for (size_t t = z.size() - 1 - n_tail; t < z.size() - 1; ++t) ex.loss_mask[t] = 1;
  ex.x_input = std::move(x);
  ex.z_input = std::move(z);
  return ex;
}

}  // namespace

TrainExample build_example(const PromptTargetPair& pair, const Vocabulary& vocab,
                           AblationMode mode, const ModelConfig& cfg, int lang_token) {
  pair.validate(cfg);
  if (pair.target.tokens.empty()) throw InvalidArgument("build_example: empty target transcript");
  if (lang_token < 0) lang_token = vocab.lang_or_unk(pair.language_id());

  std::vector<int> z = {vocab.sot, lang_token, vocab.task};
  if (mode != AblationMode::no_prompt_text)
    for (int id : symbol_ids(pair.prompt.tokens, vocab)) z.push_back(id);
  z.push_back(vocab.sep);
  std::vector<int> tgt = symbol_ids(pair.target.tokens, vocab);
  z.insert(z.end(), tgt.begin(), tgt.end());
  z.push_back(vocab.eot);

  Eigen::MatrixXd x;
  if (mode == AblationMode::no_prompt_audio) {
    x = pair.target.frames;
  } else {
    x.resize(pair.prompt.n_frames() + pair.target.n_frames(), pair.prompt.frames.cols());
    x << pair.prompt.frames, pair.target.frames;
  }
  return finish_example(std::move(x), std::move(z), tgt.size() + 1, cfg);
}

TrainExample build_supervised_example(const std::vector<const Utterance*>& utts,
                                      const Vocabulary& vocab, const ModelConfig& cfg,
                                      int lang_token) {
  if (utts.empty()) throw InvalidArgument("build_supervised_example: no utterances");
  std::vector<int> z = {vocab.sot, lang_token, vocab.task};
  Eigen::Index total_frames = 0;
  size_t n_transcript = 0;
  for (const Utterance* u : utts) {
    if (u->language_id != utts.front()->language_id)
      throw InvariantViolation("supervised example mixes languages", "language_id");
    for (int id : symbol_ids(u->tokens, vocab)) z.push_back(id);
    n_transcript += u->tokens.size();
    total_frames += u->n_frames();
  }
  z.push_back(vocab.eot);
  Eigen::MatrixXd x(total_frames, utts.front()->frames.cols());
  Eigen::Index row = 0;
  for (const Utterance* u : utts) {
    x.middleRows(row, u->n_frames()) = u->frames;
    row += u->n_frames();
  }
  return finish_example(std::move(x), std::move(z), n_transcript + 1, cfg);
}

std::vector<int> decode_prefix(const Vocabulary& vocab, int lang_token,
                               const std::vector<std::string>* prompt_tokens, bool with_sep) {
  std::vector<int> z = {vocab.sot, lang_token, vocab.task};
  if (prompt_tokens)
    for (const auto& t : *prompt_tokens) z.push_back(vocab.symbol_id(t));
  if (with_sep) z.push_back(vocab.sep);
  return z;
}

double smile_loss(const Model& model, const TrainExample& example) {
  return model.seq_loss(example.x_input, example.z_input, example.loss_mask);
}

void TrainConfig::validate() const {
  if (steps < 0) throw InvalidArgument("steps must be >= 0");
  if (warmup_steps < 0 || warmup_steps > steps)
    throw InvalidArgument("warmup_steps must be in [0, steps]");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (peak_lr <= 0.0) throw InvalidArgument("peak_lr must be positive");
  if (unk_lang_prob < 0.0 || unk_lang_prob > 1.0)
    throw InvalidArgument("unk_lang_prob must be in [0,1]");
  if (noise_aug < 0.0) throw InvalidArgument("noise_aug must be >= 0");
  if (word_dropout < 0.0 || word_dropout > 1.0)
    throw InvalidArgument("word_dropout must be in [0,1]");
}

void SupervisedConfig::validate() const {
  if (steps < 0) throw InvalidArgument("steps must be >= 0");
  if (warmup_steps < 0 || warmup_steps > steps)
    throw InvalidArgument("warmup_steps must be in [0, steps]");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (peak_lr <= 0.0) throw InvalidArgument("peak_lr must be positive");
  if (concat_prob < 0.0 || concat_prob > 1.0) throw InvalidArgument("concat_prob must be in [0,1]");
  if (noise_aug < 0.0) throw InvalidArgument("noise_aug must be >= 0");
  if (word_dropout < 0.0 || word_dropout > 1.0)
    throw InvalidArgument("word_dropout must be in [0,1]");
}

double lr_at(int step, int total_steps, int warmup_steps, double peak_lr) {
  if (total_steps <= 0) return 0.0;
  if (step < 1 || step > total_steps) throw InvalidArgument("lr_at: step out of range");
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak_lr * static_cast<double>(step) / warmup_steps;
  if (total_steps == warmup_steps) return peak_lr;
  return peak_lr * static_cast<double>(total_steps - step) / (total_steps - warmup_steps);
}

AdamW::AdamW(Model& model, double beta1, double beta2, double weight_decay, double eps)
    : model_(model), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
  for (const auto& p : model_.parameters()) {
    if (!p.trainable) continue;
    m_.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  size_t i = 0;
  for (auto& p : model_.parameters()) {
    if (!p.trainable) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * (*p.grad);
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad->array().square().matrix();
    Eigen::ArrayXXd mhat = m_[i].array() / bc1;
    Eigen::ArrayXXd vhat = v_[i].array() / bc2;
    p.value->array() -= lr * (mhat / (vhat.sqrt() + eps_) + weight_decay_ * p.value->array());
    ++i;
  }
}

namespace {

void add_frame_noise(Eigen::MatrixXd& frames, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  for (Eigen::Index r = 0; r < frames.rows(); ++r)
    for (Eigen::Index c = 0; c < frames.cols(); ++c) frames(r, c) += sigma * rng.gaussian();
}

// Replaces target-region decoder inputs with random symbols. Labels are
// untouched, so the model must read the audio to predict reliably. Prompt
// text and specials are never corrupted.
void corrupt_target_inputs(TrainExample& ex, const Vocabulary& vocab, double prob, Rng& rng) {
  if (prob <= 0.0) return;
  size_t t0 = 0;
  while (t0 < ex.loss_mask.size() && !ex.loss_mask[t0]) ++t0;
  int n_symbols = vocab.size() - vocab.n_specials;
  // inputs that carry target tokens: positions t0+1 .. z.size()-2
  for (size_t idx = t0 + 1; idx + 1 < ex.z_input.size(); ++idx) {
    if (rng.uniform() < prob)
      ex.z_input[idx] =
          vocab.n_specials + static_cast<int>(rng.bounded(static_cast<uint64_t>(n_symbols)));
  }
}

void scale_trainable_grads(Model& model, double scale) {
  for (auto& p : model.parameters())
    if (p.trainable) *p.grad *= scale;
}

template <typename MakeExample>
LossTrace run_training(Model& model, int steps, int batch_size, int warmup, double peak_lr,
                       double beta1, double beta2, double weight_decay, MakeExample&& make_example) {
  LossTrace trace;
  if (steps == 0) return trace;
  AdamW opt(model, beta1, beta2, weight_decay);
  trace.reserve(steps);
  for (int step = 1; step <= steps; ++step) {
    double lr = lr_at(step, steps, warmup, peak_lr);
    model.zero_grad();
    double loss_sum = 0.0;
    for (int b = 0; b < batch_size; ++b) {
      TrainExample ex = make_example();
      loss_sum += model.seq_loss_and_grad(ex.x_input, ex.z_input, ex.loss_mask);
    }
    double loss = loss_sum / batch_size;
    if (!std::isfinite(loss))
      throw DivergenceError(strcat_msg("non-finite loss ", loss, " at step ", step,
                                       " (lr=", lr, ")"));
    scale_trainable_grads(model, 1.0 / batch_size);
    opt.step(lr);
    trace.push_back({step, lr, loss});
  }
  return trace;
}

}  // namespace

LossTrace train(const TrainConfig& cfg, const CorpusSplit& split, Model& model) {
  cfg.validate();
  SamplerOptions opts;
  opts.languages = cfg.train_languages;
  opts.prompt_frame_cap = model.config().prompt_frame_cap();
  opts.include_unsupported_test = cfg.include_unsupported_test;
  Rng rng(derive_seed(cfg.seed, 0x4d455441ULL));  // "META"
  const Vocabulary& vocab = model.vocab();

  return run_training(model, cfg.steps, cfg.batch_size, cfg.warmup_steps, cfg.peak_lr, cfg.beta1,
                      cfg.beta2, cfg.weight_decay, [&]() {
                        PromptTargetPair pair = sample_pair(rng, split, opts);
                        int lang_tok = rng.uniform() < cfg.unk_lang_prob
                                           ? vocab.unk_lang
                                           : vocab.lang_or_unk(pair.language_id());
                        TrainExample ex =
                            build_example(pair, vocab, cfg.ablation, model.config(), lang_tok);
                        add_frame_noise(ex.x_input, cfg.noise_aug, rng);
                        corrupt_target_inputs(ex, vocab, cfg.word_dropout, rng);
                        return ex;
                      });
}

LossTrace train_supervised(const SupervisedConfig& cfg, const CorpusSplit& split, Model& model) {
  cfg.validate();
  std::vector<std::string> langs = cfg.train_languages;
  if (langs.empty())
    langs.assign(split.supported_languages.begin(), split.supported_languages.end());
  std::sort(langs.begin(), langs.end());

  std::map<std::string, std::vector<const Utterance*>> pool;
  for (const auto& lang : langs) {
    if (!split.supported_languages.count(lang))
      throw InvalidArgument("supervised training language must be supported: " + lang);
    pool[lang];
  }
  for (const auto& u : split.supported_train) {
    auto it = pool.find(u.language_id);
    if (it != pool.end()) it->second.push_back(&u);
  }
  std::vector<std::pair<std::string, std::vector<const Utterance*>>> pools;
  for (auto& [lang, utts] : pool)
    if (!utts.empty()) pools.emplace_back(lang, std::move(utts));
  if (pools.empty()) throw EmptyPoolError("no supervised training data");

  Rng rng(derive_seed(cfg.seed, 0x53555056ULL));  // "SUPV"
  const Vocabulary& vocab = model.vocab();
  const int max_frames = model.config().max_source_frames;

  return run_training(
      model, cfg.steps, cfg.batch_size, cfg.warmup_steps, cfg.peak_lr, cfg.beta1, cfg.beta2,
      cfg.weight_decay, [&]() {
        const auto& [lang, utts] = pools[rng.bounded(pools.size())];
        std::vector<const Utterance*> chosen;
        size_t i = rng.bounded(utts.size());
        chosen.push_back(utts[i]);
        if (utts.size() >= 2 && rng.uniform() < cfg.concat_prob) {
          size_t j = rng.bounded(utts.size() - 1);
          if (j >= i) ++j;
          if (utts[i]->n_frames() + utts[j]->n_frames() <= max_frames) chosen.push_back(utts[j]);
        }
        TrainExample ex = build_supervised_example(chosen, vocab, model.config(),
                                                   vocab.language_token.at(lang));
        add_frame_noise(ex.x_input, cfg.noise_aug, rng);
        corrupt_target_inputs(ex, vocab, cfg.word_dropout, rng);
        return ex;
      });
}

void write_loss_trace_csv(const std::filesystem::path& path, const LossTrace& trace) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open loss trace for writing: " + path.string());
  os << "step,lr,loss\n";
  for (const auto& r : trace)
    os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.loss) << '\n';
}

}  // namespace smile
