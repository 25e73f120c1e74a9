#include "smile/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>

namespace smile {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// BigramLM

BigramLM BigramLM::train(const std::vector<std::vector<int>>& sequences, int vocab_size) {
  if (vocab_size < 1) throw InvalidArgument("BigramLM: vocab_size must be >= 1");
  BigramLM lm;
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(vocab_size + 1, vocab_size);
  const int start = vocab_size;
  for (const auto& seq : sequences) {
    int ctx = start;
    for (int tok : seq) {
      if (tok < 0 || tok >= vocab_size) throw InvalidArgument("BigramLM: token id out of range");
      counts(ctx, tok) += 1.0;
      ctx = tok;
    }
  }
  lm.logp_.resize(vocab_size + 1, vocab_size);
  for (int c = 0; c <= vocab_size; ++c) {
    double total = counts.row(c).sum() + vocab_size;  // add-one smoothing
    for (int v = 0; v < vocab_size; ++v) lm.logp_(c, v) = std::log((counts(c, v) + 1.0) / total);
  }
  return lm;
}

double BigramLM::logp(int ctx, int next) const {
  if (ctx < 0 || ctx >= logp_.rows() || next < 0 || next >= logp_.cols())
    throw InvalidArgument("BigramLM::logp: index out of range");
  return logp_(ctx, next);
}

// ---------------------------------------------------------------------------
// Decoding

void DecodeConfig::validate() const {
  if (beam_width < 1 || beam_width > 8) throw InvalidArgument("beam_width must be in [1,8]");
  if (max_new_tokens < 1) throw InvalidArgument("max_new_tokens must be >= 1");
  if (fusion && !fusion->lm) throw InvalidArgument("fusion config lacks a language model");
}

namespace {

class ModelScorer : public StepScorer {
 public:
  ModelScorer(const Model& model, const EncoderFeatures& feats, const std::vector<int>& prefix)
      : session_(model, feats, prefix), cap_(model.config().max_target_tokens) {}
  const Eigen::VectorXd& logprobs() const override { return session_.next_logprobs(); }
  void advance(int token) override { session_.advance(token); }
  std::unique_ptr<StepScorer> clone() const override {
    return std::unique_ptr<StepScorer>(new ModelScorer(*this));
  }
  int remaining_budget() const override { return cap_ - session_.length(); }

 private:
  ModelScorer(const ModelScorer&) = default;
  DecodeSession session_;
  int cap_;
};

class TableScorer : public StepScorer {
 public:
  explicit TableScorer(std::vector<Eigen::VectorXd> steps) : steps_(std::move(steps)) {
    if (steps_.empty()) throw InvalidArgument("table scorer needs at least one step");
  }
  const Eigen::VectorXd& logprobs() const override {
    return steps_[std::min(pos_, steps_.size() - 1)];
  }
  void advance(int) override { ++pos_; }
  std::unique_ptr<StepScorer> clone() const override {
    return std::make_unique<TableScorer>(*this);
  }
  int remaining_budget() const override { return static_cast<int>(steps_.size() - pos_); }

 private:
  std::vector<Eigen::VectorXd> steps_;
  size_t pos_ = 0;
};

// Candidate scores for the next token, fusion included.
Eigen::VectorXd fused_scores(const Eigen::VectorXd& asr_logprobs,
                             const std::optional<FusionConfig>& fusion, int lm_ctx) {
  Eigen::VectorXd s = asr_logprobs;
  if (fusion) {
    if (fusion->alpha != 0.0)
      for (int v = 0; v < s.size(); ++v) s(v) += fusion->alpha * fusion->lm->logp(lm_ctx, v);
    if (fusion->beta != 0.0) s.array() += fusion->beta;
  }
  return s;
}

int argmax_first(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

std::vector<int> greedy_decode(StepScorer& scorer, const DecodeConfig& cfg, int eot_id) {
  std::vector<int> gen;
  int lm_ctx = cfg.fusion ? cfg.fusion->lm->start_context() : -1;
  const int limit = std::min(cfg.max_new_tokens, scorer.remaining_budget());
  for (int step = 0; step < limit; ++step) {
    Eigen::VectorXd s = fused_scores(scorer.logprobs(), cfg.fusion, lm_ctx);
    int tok = argmax_first(s);
    if (tok == eot_id) break;
    gen.push_back(tok);
    if (step + 1 < limit) {
      scorer.advance(tok);
      lm_ctx = tok;
    }
  }
  return gen;
}

struct BeamHyp {
  std::unique_ptr<StepScorer> scorer;
  std::vector<int> tokens;
  double score = 0.0;
  int lm_ctx = -1;
};

struct FinishedHyp {
  std::vector<int> tokens;
  double score;
};

bool better_finished(const FinishedHyp& a, const FinishedHyp& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

std::vector<int> beam_decode(StepScorer& scorer, const DecodeConfig& cfg, int eot_id) {
  const int limit = std::min(cfg.max_new_tokens, scorer.remaining_budget());
  std::vector<BeamHyp> live;
  live.push_back(
      {scorer.clone(), {}, 0.0, cfg.fusion ? cfg.fusion->lm->start_context() : -1});
  std::vector<FinishedHyp> finished;

  for (int step = 0; step < limit && !live.empty(); ++step) {
    struct Cand {
      double score;
      size_t parent;
      int token;
    };
    std::vector<Cand> cands;
    for (size_t p = 0; p < live.size(); ++p) {
      Eigen::VectorXd s = fused_scores(live[p].scorer->logprobs(), cfg.fusion, live[p].lm_ctx);
      for (int v = 0; v < s.size(); ++v) cands.push_back({live[p].score + s(v), p, v});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });

    std::vector<BeamHyp> next;
    for (const Cand& c : cands) {
      if (static_cast<int>(next.size()) >= cfg.beam_width) break;
      if (c.token == eot_id) {
        finished.push_back({live[c.parent].tokens, c.score});
        continue;
      }
      BeamHyp h;
      h.scorer = live[c.parent].scorer->clone();
      h.tokens = live[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.score = c.score;
      h.lm_ctx = c.token;
      if (step + 1 < limit) h.scorer->advance(c.token);
      next.push_back(std::move(h));
    }
    live = std::move(next);
    if (static_cast<int>(finished.size()) >= cfg.beam_width) break;
  }

  for (auto& h : live) finished.push_back({std::move(h.tokens), h.score});
  if (finished.empty()) return {};
  const FinishedHyp* best = &finished.front();
  for (const auto& f : finished)
    if (better_finished(f, *best)) best = &f;
  return best->tokens;
}

}  // namespace

std::unique_ptr<StepScorer> make_model_scorer(const Model& model, const EncoderFeatures& feats,
                                              const std::vector<int>& prefix) {
  return std::make_unique<ModelScorer>(model, feats, prefix);
}

std::unique_ptr<StepScorer> make_table_scorer(std::vector<Eigen::VectorXd> per_step_logprobs) {
  return std::make_unique<TableScorer>(std::move(per_step_logprobs));
}

std::vector<int> decode_with_scorer(StepScorer& scorer, const DecodeConfig& cfg, int eot_id) {
  cfg.validate();
  if (cfg.mode == DecodeConfig::Mode::greedy) return greedy_decode(scorer, cfg, eot_id);
  return beam_decode(scorer, cfg, eot_id);
}

std::vector<int> decode(const Model& model, const Eigen::MatrixXd& x_input,
                        const std::vector<int>& z_prefix, const DecodeConfig& cfg) {
  cfg.validate();
  EncoderFeatures feats = model.encode(x_input);
  ModelScorer scorer(model, feats, z_prefix);
  return decode_with_scorer(scorer, cfg, model.vocab().eot);
}

// ---------------------------------------------------------------------------
// Error rates

int64_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double edit_error_rate(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw InvalidArgument("edit_error_rate: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

namespace {
std::vector<std::string> to_chars(const std::vector<std::string>& tokens) {
  std::vector<std::string> chars;
  for (const auto& t : tokens)
    for (char c : t) chars.emplace_back(1, c);
  return chars;
}
}  // namespace

double token_cer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  return edit_error_rate(to_chars(ref), to_chars(hyp));
}

double token_wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  return edit_error_rate(ref, hyp);
}

// ---------------------------------------------------------------------------
// Error taxonomy

std::string to_string(ErrorClass c) {
  switch (c) {
    case ErrorClass::none: return "none";
    case ErrorClass::script: return "script";
    case ErrorClass::repeat: return "repeat";
    case ErrorClass::halluc: return "halluc";
  }
  throw InvalidArgument("bad error class");
}

int longest_periodic_run(const std::vector<std::string>& hyp) {
  const int n = static_cast<int>(hyp.size());
  int best = 0;
  for (int p = 1; p <= n / 2; ++p) {
    int streak = 0;
    for (int i = p; i < n; ++i) {
      if (hyp[i] == hyp[i - p]) {
        ++streak;
        if (streak >= p) best = std::max(best, streak + p);
      } else {
        streak = 0;
      }
    }
  }
  return best;
}

ErrorClass classify_error(const std::vector<std::string>& ref, const std::vector<std::string>& hyp,
                          const std::set<std::string>& ref_script) {
  if (hyp.empty()) return ErrorClass::none;
  const double hyp_len = static_cast<double>(hyp.size());
  const double ref_len = static_cast<double>(ref.size());
  if (hyp_len >= 3.0 * ref_len &&
      static_cast<double>(longest_periodic_run(hyp)) >= 0.5 * hyp_len)
    return ErrorClass::repeat;
  int outside = 0;
  for (const auto& t : hyp) outside += ref_script.count(t) ? 0 : 1;
  if (static_cast<double>(outside) > 0.7 * hyp_len) return ErrorClass::script;
  if (hyp_len >= 2.0 * ref_len) return ErrorClass::halluc;
  return ErrorClass::none;
}

// ---------------------------------------------------------------------------
// Aggregation

EvalReport aggregate(const std::vector<UttEval>& results, const std::set<std::string>& supported,
                     const std::set<std::string>& unsupported) {
  std::map<std::string, std::vector<const UttEval*>> by_lang;
  for (const auto& r : results) {
    if (!supported.count(r.language_id) && !unsupported.count(r.language_id))
      throw InvalidArgument("aggregate: unknown language id " + r.language_id);
    by_lang[r.language_id].push_back(&r);
  }

  EvalReport rep;
  for (auto& [lang, utts] : by_lang) {
    // canonical accumulation order makes the report exactly
    // permutation-invariant
    std::sort(utts.begin(), utts.end(),
              [](const UttEval* a, const UttEval* b) { return a->utterance_id < b->utterance_id; });
    LanguageReport lr;
    lr.supported = supported.count(lang) > 0;
    lr.n_utts = static_cast<int>(utts.size());
    for (const UttEval* u : utts) {
      lr.cer += u->cer;
      lr.wer += u->wer;
      switch (u->cls) {
        case ErrorClass::script: ++lr.n_script; break;
        case ErrorClass::repeat: ++lr.n_repeat; break;
        case ErrorClass::halluc: ++lr.n_halluc; break;
        case ErrorClass::none: ++lr.n_none; break;
      }
    }
    lr.cer /= lr.n_utts;
    lr.wer /= lr.n_utts;
    rep.per_language.emplace_back(lang, lr);
  }

  auto macro = [](const std::vector<std::pair<std::string, LanguageReport>>& langs,
                  auto pred) -> std::pair<double, double> {
    double cer = 0.0, wer = 0.0;
    int n = 0;
    for (const auto& [lang, lr] : langs) {
      if (!pred(lang, lr)) continue;
      cer += lr.cer;
      wer += lr.wer;
      ++n;
    }
    if (n == 0) return {kNaN, kNaN};
    return {cer / n, wer / n};
  };

  std::tie(rep.macro_cer, rep.macro_wer) =
      std::pair<double, double>(macro(rep.per_language, [](auto&, auto&) { return true; }));

  // Worst-3 removal by per-language CER; only when at least four languages.
  if (rep.per_language.size() >= 4) {
    std::vector<std::pair<std::string, double>> ranked;
    for (const auto& [lang, lr] : rep.per_language) ranked.emplace_back(lang, lr.cer);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (int i = 0; i < 3; ++i) rep.removed_languages.push_back(ranked[i].first);
    std::set<std::string> removed(rep.removed_languages.begin(), rep.removed_languages.end());
    std::tie(rep.macro_cer_worst3, rep.macro_wer_worst3) = std::pair<double, double>(
        macro(rep.per_language, [&](const std::string& lang, auto&) { return !removed.count(lang); }));
  } else {
    rep.macro_cer_worst3 = rep.macro_cer;
    rep.macro_wer_worst3 = rep.macro_wer;
  }

  std::tie(rep.sl_cer, rep.sl_wer) = std::pair<double, double>(
      macro(rep.per_language, [](auto&, const LanguageReport& lr) { return lr.supported; }));
  std::tie(rep.ul_cer, rep.ul_wer) = std::pair<double, double>(
      macro(rep.per_language, [](auto&, const LanguageReport& lr) { return !lr.supported; }));
  return rep;
}

double EvalReport::script_rate(bool supported_side) const {
  int n_script = 0, n_utts = 0;
  for (const auto& [lang, lr] : per_language) {
    if (lr.supported != supported_side) continue;
    n_script += lr.n_script;
    n_utts += lr.n_utts;
  }
  return n_utts == 0 ? 0.0 : static_cast<double>(n_script) / n_utts;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open report for writing: " + path.string());
  os << "language,supported,n_utts,cer,wer,script,repeat,halluc,none\n";
  for (const auto& [lang, lr] : report.per_language)
    os << lang << ',' << (lr.supported ? 1 : 0) << ',' << lr.n_utts << ',' << format_double(lr.cer)
       << ',' << format_double(lr.wer) << ',' << lr.n_script << ',' << lr.n_repeat << ','
       << lr.n_halluc << ',' << lr.n_none << '\n';
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::ordered_json j;
  j["macro_cer"] = report.macro_cer;
  j["macro_wer"] = report.macro_wer;
  j["macro_cer_worst3"] = report.macro_cer_worst3;
  j["macro_wer_worst3"] = report.macro_wer_worst3;
  j["removed_languages"] = report.removed_languages;
  auto num_or_null = [](double v) {
    return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v);
  };
  j["sl_cer"] = num_or_null(report.sl_cer);
  j["sl_wer"] = num_or_null(report.sl_wer);
  j["ul_cer"] = num_or_null(report.ul_cer);
  j["ul_wer"] = num_or_null(report.ul_wer);
  nlohmann::ordered_json langs = nlohmann::ordered_json::object();
  for (const auto& [lang, lr] : report.per_language) {
    nlohmann::ordered_json l;
    l["supported"] = lr.supported;
    l["n_utts"] = lr.n_utts;
    l["cer"] = lr.cer;
    l["wer"] = lr.wer;
    l["script"] = lr.n_script;
    l["repeat"] = lr.n_repeat;
    l["halluc"] = lr.n_halluc;
    l["none"] = lr.n_none;
    langs[lang] = std::move(l);
  }
  j["per_language"] = std::move(langs);
  std::ofstream os(path);
  if (!os) throw Error("cannot open report for writing: " + path.string());
  os << j.dump(2) << '\n';
}

std::string format_results_block(const EvalReport& report) {
  auto pct = [](double v) {
    if (std::isnan(v)) return std::string("   n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%6.2f%%", 100.0 * v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "            CER       WER\n";
  os << "  SL     " << pct(report.sl_cer) << "  " << pct(report.sl_wer) << '\n';
  os << "  UL     " << pct(report.ul_cer) << "  " << pct(report.ul_wer) << '\n';
  os << "  all    " << pct(report.macro_cer) << "  " << pct(report.macro_wer) << '\n';
  os << "  all-w3 " << pct(report.macro_cer_worst3) << "  " << pct(report.macro_wer_worst3)
     << "   (worst-3 removed)\n";
  return os.str();
}

}  // namespace smile
