#include "smile/experiments.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

namespace smile {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Method m) {
  switch (m) {
    case Method::vanilla: return "vanilla";
    case Method::sicl_style: return "sicl_style";
    case Method::smile: return "smile";
    case Method::smile_ul: return "smile_ul";
    case Method::fusion: return "fusion";
  }
  throw InvalidArgument("bad method");
}

Method method_from_string(const std::string& s) {
  if (s == "vanilla") return Method::vanilla;
  if (s == "sicl_style") return Method::sicl_style;
  if (s == "smile") return Method::smile;
  if (s == "smile_ul") return Method::smile_ul;
  if (s == "fusion") return Method::fusion;
  throw InvalidArgument("unknown method: " + s);
}

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace {

ordered_json corpus_json(const CorpusParams& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["n_supported"] = c.n_supported;
  j["n_unsupported"] = c.n_unsupported;
  j["utterances_per_language"] = c.utterances_per_language;
  j["unsupported_utterances_per_language"] = c.unsupported_utterances_per_language;
  j["feature_dim"] = c.feature_dim;
  j["inventory_size"] = c.inventory_size;
  j["n_classes"] = c.n_classes;
  j["script_size"] = c.script_size;
  j["noise_scale"] = c.noise_scale;
  j["d_min"] = c.d_min;
  j["d_max"] = c.d_max;
  j["min_tokens"] = c.min_tokens;
  j["max_tokens"] = c.max_tokens;
  j["test_fraction"] = c.test_fraction;
  j["onset_gain"] = c.onset_gain;
  return j;
}

CorpusParams corpus_from_json(const nlohmann::json& j) {
  CorpusParams c;
  c.seed = j.value("seed", c.seed);
  c.n_supported = j.value("n_supported", c.n_supported);
  c.n_unsupported = j.value("n_unsupported", c.n_unsupported);
  c.utterances_per_language = j.value("utterances_per_language", c.utterances_per_language);
  c.unsupported_utterances_per_language =
      j.value("unsupported_utterances_per_language", c.unsupported_utterances_per_language);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.inventory_size = j.value("inventory_size", c.inventory_size);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.script_size = j.value("script_size", c.script_size);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.d_min = j.value("d_min", c.d_min);
  c.d_max = j.value("d_max", c.d_max);
  c.min_tokens = j.value("min_tokens", c.min_tokens);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.onset_gain = j.value("onset_gain", c.onset_gain);
  return c;
}

ordered_json model_json(const ModelConfig& m) { return ordered_json::parse(m.to_json_string()); }

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig d;  // defaults for absent keys
  ModelConfig c;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.n_encoder_layers = j.value("n_encoder_layers", d.n_encoder_layers);
  c.n_decoder_layers = j.value("n_decoder_layers", d.n_decoder_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.conv_stride = j.value("conv_stride", d.conv_stride);
  c.max_source_frames = j.value("max_source_frames", d.max_source_frames);
  c.max_target_tokens = j.value("max_target_tokens", d.max_target_tokens);
  if (j.contains("adapter_rank") && !j.at("adapter_rank").is_null())
    c.adapter_rank = j.at("adapter_rank").get<int>();
  return c;
}

ordered_json pretrain_json(const SupervisedConfig& p) {
  ordered_json j;
  j["steps"] = p.steps;
  j["batch_size"] = p.batch_size;
  j["peak_lr"] = p.peak_lr;
  j["warmup_steps"] = p.warmup_steps;
  j["concat_prob"] = p.concat_prob;
  j["weight_decay"] = p.weight_decay;
  j["beta1"] = p.beta1;
  j["beta2"] = p.beta2;
  j["train_languages"] = p.train_languages;
  j["noise_aug"] = p.noise_aug;
  j["word_dropout"] = p.word_dropout;
  return j;
}

SupervisedConfig pretrain_from_json(const nlohmann::json& j) {
  SupervisedConfig p;
  p.steps = j.value("steps", p.steps);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.peak_lr = j.value("peak_lr", p.peak_lr);
  p.warmup_steps = j.value("warmup_steps", p.warmup_steps);
  p.concat_prob = j.value("concat_prob", p.concat_prob);
  p.weight_decay = j.value("weight_decay", p.weight_decay);
  p.beta1 = j.value("beta1", p.beta1);
  p.beta2 = j.value("beta2", p.beta2);
  p.train_languages = j.value("train_languages", p.train_languages);
  p.noise_aug = j.value("noise_aug", p.noise_aug);
  p.word_dropout = j.value("word_dropout", p.word_dropout);
  return p;
}

ordered_json train_json(const TrainConfig& t) {
  ordered_json j;
  j["steps"] = t.steps;
  j["batch_size"] = t.batch_size;
  j["peak_lr"] = t.peak_lr;
  j["warmup_steps"] = t.warmup_steps;
  j["ablation"] = to_string(t.ablation);
  j["train_languages"] = t.train_languages;
  j["unk_lang_prob"] = t.unk_lang_prob;
  j["weight_decay"] = t.weight_decay;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["noise_aug"] = t.noise_aug;
  j["word_dropout"] = t.word_dropout;
  return j;
}

TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.peak_lr = j.value("peak_lr", t.peak_lr);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  if (j.contains("ablation")) t.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  t.train_languages = j.value("train_languages", t.train_languages);
  t.unk_lang_prob = j.value("unk_lang_prob", t.unk_lang_prob);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.noise_aug = j.value("noise_aug", t.noise_aug);
  t.word_dropout = j.value("word_dropout", t.word_dropout);
  return t;
}

ordered_json decode_json(const DecodeConfig& d) {
  ordered_json j;
  j["mode"] = d.mode == DecodeConfig::Mode::greedy ? "greedy" : "beam";
  j["beam_width"] = d.beam_width;
  j["max_new_tokens"] = d.max_new_tokens;
  return j;
}

DecodeConfig decode_from_json(const nlohmann::json& j) {
  DecodeConfig d;
  if (j.contains("mode")) {
    std::string m = j.at("mode").get<std::string>();
    if (m == "greedy")
      d.mode = DecodeConfig::Mode::greedy;
    else if (m == "beam")
      d.mode = DecodeConfig::Mode::beam;
    else
      throw InvalidArgument("unknown decode mode: " + m);
  }
  d.beam_width = j.value("beam_width", d.beam_width);
  d.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  return d;
}

std::string supported_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "sl%02d", i);
  return buf;
}

std::string unsupported_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "ul%02d", i);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  corpus.validate();
  model.validate();
  pretrain.validate();
  train.validate();
  DecodeConfig d = decode;
  d.fusion.reset();
  d.validate();
  if (!std::isfinite(fusion_alpha) || !std::isfinite(fusion_beta))
    throw InvalidArgument("fusion parameters must be finite");
  if (seeds.empty()) throw InvalidArgument("seeds must be non-empty");
  std::set<uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) throw InvalidArgument("seeds must be unique");
  if (rand_k && (*rand_k < 1 || *rand_k > corpus.n_supported))
    throw InvalidArgument("rand_k must be in [1, n_supported]");

  // Training-set legality: only smile_ul may meta-train on unsupported
  // languages.
  std::set<std::string> sl, ul;
  for (int i = 0; i < corpus.n_supported; ++i) sl.insert(supported_name(i));
  for (int i = 0; i < corpus.n_unsupported; ++i) ul.insert(unsupported_name(i));
  for (const auto& lang : train.train_languages) {
    bool is_sl = sl.count(lang) > 0, is_ul = ul.count(lang) > 0;
    if (!is_sl && !is_ul) throw InvalidArgument("unknown training language: " + lang);
    if (is_ul && method != Method::smile_ul)
      throw InvalidArgument("method " + to_string(method) +
                            " must not train on unsupported language " + lang);
  }
  for (const auto& lang : pretrain.train_languages)
    if (!sl.count(lang))
      throw InvalidArgument("pretraining language must be supported: " + lang);
}

std::string ExperimentConfig::to_json_string() const {
  ordered_json j;
  j["corpus"] = corpus_json(corpus);
  j["model"] = model_json(model);
  j["pretrain"] = pretrain_json(pretrain);
  j["train"] = train_json(train);
  j["decode"] = decode_json(decode);
  j["fusion_alpha"] = fusion_alpha;
  j["fusion_beta"] = fusion_beta;
  j["strategy"] = {{"kind", to_string(strategy.kind)}, {"seed", strategy.seed}};
  j["method"] = to_string(method);
  if (rand_k)
    j["rand_k"] = *rand_k;
  else
    j["rand_k"] = nullptr;
  j["seeds"] = seeds;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& s) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(s);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("experiment config: ") + e.what(), 0);
  }
  ExperimentConfig c;
  if (j.contains("corpus")) c.corpus = corpus_from_json(j.at("corpus"));
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j.at("pretrain"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("decode")) c.decode = decode_from_json(j.at("decode"));
  c.fusion_alpha = j.value("fusion_alpha", c.fusion_alpha);
  c.fusion_beta = j.value("fusion_beta", c.fusion_beta);
  if (j.contains("strategy")) {
    c.strategy.kind = selection_kind_from_string(j.at("strategy").value("kind", "l2"));
    c.strategy.seed = j.at("strategy").value("seed", uint64_t{0});
  }
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("rand_k") && !j.at("rand_k").is_null()) c.rand_k = j.at("rand_k").get<int>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  return c;
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot open config for writing: " + path.string());
  os << to_json_string() << '\n';
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("config not found: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_string(ss.str());
}

uint64_t ExperimentConfig::config_hash() const { return fnv1a64(to_json_string()); }

// ---------------------------------------------------------------------------
// Result rows

bool rows_equal_ignoring_runtime(const ResultRow& a, const ResultRow& b) {
  auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  return a.method == b.method && a.seed == b.seed && eq(a.sl_cer, b.sl_cer) &&
         eq(a.sl_wer, b.sl_wer) && eq(a.ul_cer, b.ul_cer) && eq(a.ul_wer, b.ul_wer) &&
         eq(a.macro_cer, b.macro_cer) && eq(a.macro_cer_worst3, b.macro_cer_worst3) &&
         eq(a.ul_script_rate, b.ul_script_rate);
}

void write_result_rows_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open results for writing: " + path.string());
  os << "method,seed,sl_cer,sl_wer,ul_cer,ul_wer,macro_cer,macro_cer_worst3,ul_script_rate,"
        "runtime_sec\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.seed << ',' << format_double(r.sl_cer) << ','
       << format_double(r.sl_wer) << ',' << format_double(r.ul_cer) << ','
       << format_double(r.ul_wer) << ',' << format_double(r.macro_cer) << ','
       << format_double(r.macro_cer_worst3) << ',' << format_double(r.ul_script_rate) << ','
       << format_double(r.runtime_sec) << '\n';
}

std::vector<ResultRow> read_result_rows_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("results not found: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ParseError("results: missing header", 1);
  std::vector<ResultRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 10) throw ParseError("results: wrong field count", line_no);
    ResultRow r;
    r.method = f[0];
    r.seed = std::stoull(f[1]);
    r.sl_cer = std::stod(f[2]);
    r.sl_wer = std::stod(f[3]);
    r.ul_cer = std::stod(f[4]);
    r.ul_wer = std::stod(f[5]);
    r.macro_cer = std::stod(f[6]);
    r.macro_cer_worst3 = std::stod(f[7]);
    r.ul_script_rate = std::stod(f[8]);
    r.runtime_sec = std::stod(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

constexpr uint64_t kInitTag = 0x494e4954ULL;   // INIT
constexpr uint64_t kPreTag = 0x50524554ULL;    // PRET
constexpr uint64_t kMetaTag = 0x4d455441ULL;   // META
constexpr uint64_t kLoraTag = 0x4c4f5241ULL;   // LORA
constexpr uint64_t kRandkTag = 0x524e444bULL;  // RNDK

struct LockFile {
  std::filesystem::path path;
  int fd = -1;

  explicit LockFile(const std::filesystem::path& p) : path(p) {
    fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error("run directory is locked by another writer: " + path.string());
  }
  LockFile(const LockFile&) = delete;
  ~LockFile() {
    if (fd >= 0) {
      ::close(fd);
      std::error_code ec;
      std::filesystem::remove(path, ec);
    }
  }
};

std::string hash_hex(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// The supervised base depends only on corpus, model (sans adapter) and the
// pretraining recipe, so it is cached across experiments. The checkpoint
// round-trip also pins the float32 quantization, keeping results identical
// whether the base was computed or loaded.
Model make_base_model(const ExperimentConfig& cfg, const CorpusSplit& corpus,
                      const Vocabulary& vocab, uint64_t seed,
                      const std::filesystem::path& out_dir) {
  ModelConfig mc = cfg.model;
  mc.adapter_rank.reset();
  ordered_json key;
  key["corpus"] = corpus_json(cfg.corpus);
  key["model"] = ordered_json::parse(mc.to_json_string());
  key["pretrain"] = pretrain_json(cfg.pretrain);
  uint64_t h = fnv1a64(key.dump());

  std::filesystem::path dir = out_dir / "base_cache";
  std::filesystem::create_directories(dir);
  std::filesystem::path path =
      dir / strcat_msg("base_", hash_hex(h), "_seed", seed, ".smlc");
  if (std::filesystem::exists(path)) return Model::load_checkpoint(path);

  Model base(mc, vocab, derive_seed(seed, kInitTag));
  SupervisedConfig pc = cfg.pretrain;
  pc.seed = derive_seed(seed, kPreTag);
  LossTrace trace = train_supervised(pc, corpus, base);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  base.save_checkpoint(tmp);
  std::filesystem::rename(tmp, path);
  std::filesystem::path trace_path = path;
  trace_path += ".trace.csv";
  write_loss_trace_csv(trace_path, trace);
  return Model::load_checkpoint(path);
}

std::vector<std::string> all_language_ids(const CorpusSplit& corpus, bool include_unsupported) {
  std::vector<std::string> langs(corpus.supported_languages.begin(),
                                 corpus.supported_languages.end());
  if (include_unsupported)
    langs.insert(langs.end(), corpus.unsupported_languages.begin(),
                 corpus.unsupported_languages.end());
  return langs;
}

Model prepare_eval_model(const ExperimentConfig& cfg, const CorpusSplit& corpus,
                         const Vocabulary& vocab, uint64_t seed,
                         const std::filesystem::path& seed_dir,
                         const std::filesystem::path& out_dir) {
  Model model = make_base_model(cfg, corpus, vocab, seed, out_dir);
  if (cfg.method == Method::smile || cfg.method == Method::smile_ul) {
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, kMetaTag);
    if (cfg.method == Method::smile_ul) {
      tc.include_unsupported_test = true;
      if (tc.train_languages.empty()) tc.train_languages = all_language_ids(corpus, true);
    }
    if (cfg.model.adapter_rank)
      model.apply_adapter(*cfg.model.adapter_rank, derive_seed(seed, kLoraTag));
    LossTrace trace = train(tc, corpus, model);
    write_loss_trace_csv(seed_dir / "train_trace.csv", trace);
  }
  model.save_checkpoint(seed_dir / "model.smlc");
  return Model::load_checkpoint(seed_dir / "model.smlc");
}

struct DecodedUtterance {
  UttEval eval;
  std::string prompt_id;
  std::vector<std::string> hyp;
};

DecodedUtterance decode_one(const ExperimentConfig& cfg, const Model& model,
                            const CorpusSplit& corpus, const Utterance& utt,
                            const EmbeddingCache* cache,
                            const std::map<std::string, const Utterance*>& pool_by_id,
                            const DecodeConfig& dcfg) {
  const Vocabulary& vocab = model.vocab();
  int lang_tok = vocab.lang_or_unk(utt.language_id);

  const Utterance* prompt = nullptr;
  std::string prompt_id;
  bool wants_prompt = cfg.method == Method::sicl_style || cfg.method == Method::smile ||
                      cfg.method == Method::smile_ul;
  if (wants_prompt && cache && cache->find(utt.utterance_id)) {
    prompt_id = select_prompt(utt.utterance_id, *cache, cfg.strategy);
    auto it = pool_by_id.find(prompt_id);
    if (it == pool_by_id.end()) throw NotFoundError("prompt not in pool: " + prompt_id);
    prompt = it->second;
    if (prompt->n_frames() + utt.n_frames() > model.config().max_source_frames) {
      prompt = nullptr;  // would overflow the window; decode bare
      prompt_id.clear();
    }
  }

  AblationMode mode = cfg.train.ablation;
  Eigen::MatrixXd x;
  std::vector<int> prefix;
  if (!prompt) {
    x = utt.frames;
    prefix = decode_prefix(vocab, lang_tok, nullptr, false);
  } else if (cfg.method == Method::sicl_style) {
    // Continuation-style prompting of a model that never saw the separator.
    x.resize(prompt->n_frames() + utt.n_frames(), utt.frames.cols());
    x << prompt->frames, utt.frames;
    prefix = decode_prefix(vocab, lang_tok, &prompt->tokens, false);
  } else {
    bool use_audio = mode != AblationMode::no_prompt_audio;
    bool use_text = mode != AblationMode::no_prompt_text;
    if (use_audio) {
      x.resize(prompt->n_frames() + utt.n_frames(), utt.frames.cols());
      x << prompt->frames, utt.frames;
    } else {
      x = utt.frames;
    }
    prefix = decode_prefix(vocab, lang_tok, use_text ? &prompt->tokens : nullptr, true);
  }

  std::vector<int> hyp_ids = decode(model, x, prefix, dcfg);
  std::vector<std::string> hyp;
  hyp.reserve(hyp_ids.size());
  for (int id : hyp_ids) hyp.push_back(vocab.display(id));

  DecodedUtterance out;
  out.prompt_id = prompt_id;
  out.hyp = hyp;
  out.eval.utterance_id = utt.utterance_id;
  out.eval.language_id = utt.language_id;
  out.eval.cer = token_cer(utt.tokens, hyp);
  out.eval.wer = token_wer(utt.tokens, hyp);
  const LanguageSpec& spec = corpus.spec_for(utt.language_id);
  std::set<std::string> script(spec.script.begin(), spec.script.end());
  out.eval.cls = classify_error(utt.tokens, hyp, script);
  return out;
}

}  // namespace

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg,
                                      const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::filesystem::path run_root = out_dir / ("run_" + hash_hex(cfg.config_hash()));

  std::filesystem::path snapshot = run_root / "config.snapshot";
  if (std::filesystem::exists(snapshot)) {
    std::ifstream is(snapshot);
    std::stringstream ss;
    ss << is.rdbuf();
    std::string stored = ss.str();
    if (!stored.empty() && stored.back() == '\n') stored.pop_back();
    if (stored != cfg.to_json_string())
      throw Error("resume mismatch: " + run_root.string() + " holds a different config");
  }

  std::filesystem::path results_path = run_root / "results.csv";
  if (std::filesystem::exists(results_path)) return read_result_rows_csv(results_path);

  std::filesystem::create_directories(run_root);
  LockFile lock(run_root / ".lock");
  if (!std::filesystem::exists(snapshot)) cfg.save(snapshot);

  CorpusSplit corpus = generate_corpus(cfg.corpus);
  Vocabulary vocab = Vocabulary::build(corpus);

  std::vector<const Utterance*> test_pool = corpus.test_pool();
  std::map<std::string, const Utterance*> pool_by_id;
  for (const Utterance* u : test_pool) pool_by_id[u->utterance_id] = u;

  std::vector<ResultRow> rows;
  for (uint64_t seed : cfg.seeds) {
    auto t0 = std::chrono::steady_clock::now();
    std::filesystem::path seed_dir = run_root / ("seed_" + std::to_string(seed));
    std::filesystem::create_directories(seed_dir);

    Model model = prepare_eval_model(cfg, corpus, vocab, seed, seed_dir, out_dir);

    bool wants_prompt = cfg.method == Method::sicl_style || cfg.method == Method::smile ||
                        cfg.method == Method::smile_ul;
    std::optional<EmbeddingCache> cache;
    if (wants_prompt) {
      cache = build_cache(model, test_pool, (seed_dir / "model.smlc").string());
      cache->save(seed_dir / "cache.smle");
    }

    DecodeConfig dcfg = cfg.decode;
    if (cfg.method == Method::fusion) {
      std::vector<std::vector<int>> seqs;
      for (const auto& u : corpus.supported_train) {
        std::vector<int> ids;
        ids.reserve(u.tokens.size() + 1);
        for (const auto& t : u.tokens) ids.push_back(vocab.symbol_id(t));
        ids.push_back(vocab.eot);
        seqs.push_back(std::move(ids));
      }
      FusionConfig fc;
      fc.alpha = cfg.fusion_alpha;
      fc.beta = cfg.fusion_beta;
      fc.lm = std::make_shared<BigramLM>(BigramLM::train(seqs, vocab.size()));
      dcfg.fusion = std::move(fc);
    }

    std::vector<UttEval> results;
    std::ofstream log(seed_dir / "decodes.jsonl");
    for (const Utterance* u : test_pool) {
      DecodedUtterance d =
          decode_one(cfg, model, corpus, *u, cache ? &*cache : nullptr, pool_by_id, dcfg);
      ordered_json rec;
      rec["utterance_id"] = d.eval.utterance_id;
      rec["language_id"] = d.eval.language_id;
      if (d.prompt_id.empty())
        rec["prompt_id"] = nullptr;
      else
        rec["prompt_id"] = d.prompt_id;
      rec["ref"] = u->tokens;
      rec["hyp"] = d.hyp;
      rec["cer"] = d.eval.cer;
      rec["wer"] = d.eval.wer;
      rec["class"] = to_string(d.eval.cls);
      log << rec.dump() << '\n';
      results.push_back(d.eval);
    }

    EvalReport report =
        aggregate(results, corpus.supported_languages, corpus.unsupported_languages);
    write_report_csv(seed_dir / "report.csv", report);
    write_report_json(seed_dir / "report.json", report);

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ResultRow row;
    row.method = to_string(cfg.method);
    row.seed = seed;
    row.sl_cer = report.sl_cer;
    row.sl_wer = report.sl_wer;
    row.ul_cer = report.ul_cer;
    row.ul_wer = report.ul_wer;
    row.macro_cer = report.macro_cer;
    row.macro_cer_worst3 = report.macro_cer_worst3;
    row.ul_script_rate = report.script_rate(false);
    row.runtime_sec = secs;
    rows.push_back(std::move(row));
  }

  write_result_rows_csv(results_path, rows);
  return rows;
}

std::vector<std::filesystem::path> train_checkpoints(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::filesystem::path run_root = out_dir / ("run_" + hash_hex(cfg.config_hash()));
  std::filesystem::create_directories(run_root);
  std::filesystem::path snapshot = run_root / "config.snapshot";
  if (!std::filesystem::exists(snapshot)) cfg.save(snapshot);

  CorpusSplit corpus = generate_corpus(cfg.corpus);
  Vocabulary vocab = Vocabulary::build(corpus);
  std::vector<std::filesystem::path> paths;
  for (uint64_t seed : cfg.seeds) {
    std::filesystem::path seed_dir = run_root / ("seed_" + std::to_string(seed));
    std::filesystem::create_directories(seed_dir);
    prepare_eval_model(cfg, corpus, vocab, seed, seed_dir, out_dir);
    paths.push_back(seed_dir / "model.smlc");
  }
  return paths;
}

std::vector<RandKRow> run_rand_k_study(ExperimentConfig base, const std::vector<int>& ks,
                                       const std::filesystem::path& out_dir) {
  base.method = Method::smile;
  base.rand_k.reset();
  base.train.train_languages.clear();
  base.validate();
  if (ks.empty()) throw InvalidArgument("rand-k study needs at least one k");
  for (int k : ks)
    if (k < 1 || k > base.corpus.n_supported)
      throw InvalidArgument(strcat_msg("rand-k: k=", k, " not in [1,", base.corpus.n_supported, "]"));

  std::filesystem::create_directories(out_dir);
  CorpusSplit corpus = generate_corpus(base.corpus);
  Vocabulary vocab = Vocabulary::build(corpus);

  // Nested chain of languages: subset(k) = first k of one seeded shuffle, so
  // coverage can only grow with k.
  std::vector<std::string> chain(corpus.supported_languages.begin(),
                                 corpus.supported_languages.end());
  std::sort(chain.begin(), chain.end());
  Rng chain_rng(derive_seed(base.corpus.seed, kRandkTag));
  chain_rng.shuffle(chain);

  // Diversity is a property of the training data as seen by the pretrained
  // encoder; the first seed's base model provides the embeddings.
  Model div_model = make_base_model(base, corpus, vocab, base.seeds.front(), out_dir);
  std::vector<const Utterance*> train_pool;
  for (const auto& u : corpus.supported_train) train_pool.push_back(&u);
  EmbeddingCache cache = build_cache(div_model, train_pool);
  std::vector<LanguageVector> lang_vecs = language_vectors_from_cache(cache);
  std::vector<std::string> lang_order;
  for (const auto& lv : lang_vecs) lang_order.push_back(lv.language_id);
  PcaResult pca = pca_project(stack_language_vectors(lang_vecs), 8);
  BinaryFeatureMatrix bfm = discretize(pca.projected, lang_order);
  std::map<std::string, int> row_of;
  for (size_t i = 0; i < lang_order.size(); ++i) row_of[lang_order[i]] = static_cast<int>(i);

  std::vector<RandKRow> out;
  for (int k : ks) {
    std::vector<std::string> subset(chain.begin(), chain.begin() + k);
    std::sort(subset.begin(), subset.end());

    ExperimentConfig cfg = base;
    cfg.rand_k = k;
    cfg.train.train_languages = subset;
    std::vector<ResultRow> rows = run_experiment(cfg, out_dir);

    RandKRow r;
    r.k = k;
    for (const auto& row : rows) {
      r.cer_all += row.macro_cer;
      r.cer_sl += row.sl_cer;
      r.cer_ul += row.ul_cer;
    }
    r.cer_all /= static_cast<double>(rows.size());
    r.cer_sl /= static_cast<double>(rows.size());
    r.cer_ul /= static_cast<double>(rows.size());

    std::vector<int> idx;
    for (const auto& lang : subset) idx.push_back(row_of.at(lang));
    BinaryMatrix sub = select_rows(bfm.M, idx);
    r.ti = typology_index(sub);
    r.jmm = jaccard_coverage(sub, bfm.M);
    out.push_back(r);
  }
  return out;
}

void write_rand_k_csv(const std::filesystem::path& path, const std::vector<RandKRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open rand-k table for writing: " + path.string());
  os << "k,cer_all,cer_sl,cer_ul,ti,jmm\n";
  for (const auto& r : rows)
    os << r.k << ',' << format_double(r.cer_all) << ',' << format_double(r.cer_sl) << ','
       << format_double(r.cer_ul) << ',' << format_double(r.ti) << ',' << format_double(r.jmm)
       << '\n';
}

std::vector<AblationRow> run_ablation(ExperimentConfig base, const std::filesystem::path& out_dir) {
  base.method = Method::smile;
  base.validate();
  std::vector<AblationRow> out;
  for (AblationMode mode :
       {AblationMode::full, AblationMode::no_prompt_audio, AblationMode::no_prompt_text}) {
    ExperimentConfig cfg = base;
    cfg.train.ablation = mode;
    std::vector<ResultRow> rows = run_experiment(cfg, out_dir);
    for (const auto& row : rows)
      out.push_back({mode, row.seed, row.sl_cer, row.ul_cer, row.ul_script_rate});
  }
  return out;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open ablation table for writing: " + path.string());
  os << "mode,seed,sl_cer,ul_cer,ul_script_rate\n";
  for (const auto& r : rows)
    os << to_string(r.mode) << ',' << r.seed << ',' << format_double(r.sl_cer) << ','
       << format_double(r.ul_cer) << ',' << format_double(r.ul_script_rate) << '\n';
}

}  // namespace smile
