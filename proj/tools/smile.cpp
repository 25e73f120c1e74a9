// Command-line driver for the meta in-context transcription testbed.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "smile/corpus.hpp"
#include "smile/diversity.hpp"
#include "smile/eval.hpp"
#include "smile/experiments.hpp"
#include "smile/meta_trainer.hpp"
#include "smile/model.hpp"
#include "smile/retrieval.hpp"

namespace fs = std::filesystem;
using namespace smile;

namespace {

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ExperimentConfig::load(path);
}

void apply_seed_override(ExperimentConfig& cfg, const std::optional<uint64_t>& seed) {
  if (seed) cfg.seeds = {*seed};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd ms;
  if (v.empty()) return ms;
  for (double x : v) ms.mean += x;
  ms.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double var = 0.0;
    for (double x : v) var += (x - ms.mean) * (x - ms.mean);
    ms.std = std::sqrt(var / static_cast<double>(v.size() - 1));
  }
  return ms;
}

std::string pct(double v) {
  if (std::isnan(v)) return "   n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.2f%%", 100.0 * v);
  return buf;
}

void print_rows_summary(const std::vector<ResultRow>& rows) {
  std::vector<double> sl_cer, sl_wer, ul_cer, ul_wer;
  for (const auto& r : rows) {
    sl_cer.push_back(r.sl_cer);
    sl_wer.push_back(r.sl_wer);
    ul_cer.push_back(r.ul_cer);
    ul_wer.push_back(r.ul_wer);
  }
  auto line = [](const char* name, MeanStd cer, MeanStd wer) {
    std::cout << "  " << name << "  CER " << pct(cer.mean) << " +/- " << pct(cer.std) << "   WER "
              << pct(wer.mean) << " +/- " << pct(wer.std) << "\n";
  };
  std::cout << rows.front().method << " over " << rows.size() << " seed(s):\n";
  line("SL", mean_std(sl_cer), mean_std(sl_wer));
  line("UL", mean_std(ul_cer), mean_std(ul_wer));
}

int run_cli(int argc, char** argv) {
  CLI::App app{"meta in-context transcription experiments on synthetic multilingual corpora"};
  app.require_subcommand(1);

  // --- corpus ---------------------------------------------------------
  auto* corpus_cmd = app.add_subcommand("corpus", "generate a corpus manifest or validate one");
  std::string corpus_config, corpus_out, corpus_load;
  std::optional<uint64_t> corpus_seed;
  std::string corpus_outdir = "runs";
  bool frames_binary = false;
  corpus_cmd->add_option("--config", corpus_config, "experiment config (JSON)");
  corpus_cmd->add_option("--out", corpus_out, "manifest path to write");
  corpus_cmd->add_option("--load", corpus_load, "validate an existing manifest instead");
  corpus_cmd->add_option("--seed", corpus_seed, "corpus seed override");
  corpus_cmd->add_option("--out-dir", corpus_outdir, "artifact directory");
  corpus_cmd->add_flag("--frames-binary", frames_binary, "write frames as .smlf sidecar files");
  corpus_cmd->callback([&]() {
    if (!corpus_load.empty()) {
      std::vector<LanguageSpec> langs;
      std::vector<Utterance> utts = load_manifest(corpus_load, &langs);
      std::cout << "ok: " << utts.size() << " utterances, " << langs.size()
                << " language declarations\n";
      return;
    }
    ExperimentConfig cfg = load_config_or_default(corpus_config);
    if (corpus_seed) cfg.corpus.seed = *corpus_seed;
    CorpusSplit split = generate_corpus(cfg.corpus);
    fs::path out = corpus_out.empty() ? fs::path(corpus_outdir) / "corpus.jsonl" : fs::path(corpus_out);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    save_manifest(out, split, frames_binary);
    std::cout << "wrote " << out.string() << ": " << split.languages.size() << " languages, "
              << (split.supported_train.size() + split.supported_test.size() +
                  split.unsupported_test.size())
              << " utterances\n";
  });

  // --- train ----------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "run the training stages, write checkpoints");
  std::string train_config, train_outdir = "runs";
  std::optional<uint64_t> train_seed;
  train_cmd->add_option("--config", train_config, "experiment config (JSON)");
  train_cmd->add_option("--out-dir", train_outdir, "artifact directory");
  train_cmd->add_option("--seed", train_seed, "single-seed override");
  train_cmd->callback([&]() {
    ExperimentConfig cfg = load_config_or_default(train_config);
    apply_seed_override(cfg, train_seed);
    auto paths = train_checkpoints(cfg, train_outdir);
    for (const auto& p : paths) std::cout << p.string() << "\n";
  });

  // --- cache ----------------------------------------------------------
  auto* cache_cmd = app.add_subcommand("cache", "build an embedding cache from a checkpoint");
  std::string cache_ckpt, cache_manifest, cache_out, cache_outdir = "runs";
  std::optional<uint64_t> cache_seed;
  cache_cmd->add_option("--checkpoint", cache_ckpt, "model checkpoint (.smlc)")->required();
  cache_cmd->add_option("--manifest", cache_manifest, "utterance manifest")->required();
  cache_cmd->add_option("--out", cache_out, "cache path to write");
  cache_cmd->add_option("--out-dir", cache_outdir, "artifact directory");
  cache_cmd->add_option("--seed", cache_seed, "unused; accepted for uniformity");
  cache_cmd->callback([&]() {
    Model model = Model::load_checkpoint(cache_ckpt);
    std::vector<Utterance> utts = load_manifest(cache_manifest);
    EmbeddingCache cache = build_cache(model, utts, cache_ckpt);
    fs::path out = cache_out.empty() ? fs::path(cache_outdir) / "cache.smle" : fs::path(cache_out);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    cache.save(out);
    std::cout << "wrote " << out.string() << ": " << cache.items.size() << " embeddings, dim "
              << cache.dim() << "\n";
  });

  // --- retrieve -------------------------------------------------------
  auto* retr_cmd = app.add_subcommand("retrieve", "select a prompt for a target utterance");
  std::string retr_cache, retr_target, retr_strategy = "l2", retr_manifest, retr_outdir = "runs";
  std::optional<uint64_t> retr_seed;
  retr_cmd->add_option("--cache", retr_cache, "embedding cache (.smle)")->required();
  retr_cmd->add_option("--target-id", retr_target, "target utterance id")->required();
  retr_cmd->add_option("--strategy", retr_strategy, "l2 | cosine | random | token_length");
  retr_cmd->add_option("--manifest", retr_manifest, "manifest supplying token counts");
  retr_cmd->add_option("--seed", retr_seed, "seed for the random strategy");
  retr_cmd->add_option("--out-dir", retr_outdir, "unused; accepted for uniformity");
  retr_cmd->callback([&]() {
    EmbeddingCache cache = EmbeddingCache::load(retr_cache);
    if (!retr_manifest.empty()) {
      std::vector<Utterance> utts = load_manifest(retr_manifest);
      std::map<std::string, int> counts;
      for (const auto& u : utts) counts[u.utterance_id] = u.n_tokens();
      for (auto& e : cache.items) {
        auto it = counts.find(e.utterance_id);
        if (it != counts.end()) e.n_tokens = it->second;
      }
    }
    SelectionStrategy strategy;
    strategy.kind = selection_kind_from_string(retr_strategy);
    strategy.seed = retr_seed.value_or(0);
    std::cout << select_prompt(retr_target, cache, strategy) << "\n";
  });

  // --- eval -----------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "run the configured experiment end to end");
  std::string eval_config, eval_outdir = "runs";
  std::optional<uint64_t> eval_seed;
  bool eval_print_config = false;
  eval_cmd->add_option("--config", eval_config, "experiment config (JSON)");
  eval_cmd->add_option("--out-dir", eval_outdir, "artifact directory");
  eval_cmd->add_option("--seed", eval_seed, "single-seed override");
  eval_cmd->add_flag("--print-config", eval_print_config, "print the effective config and exit");
  eval_cmd->callback([&]() {
    ExperimentConfig cfg = load_config_or_default(eval_config);
    apply_seed_override(cfg, eval_seed);
    if (eval_print_config) {
      std::cout << cfg.to_json_string() << "\n";
      return;
    }
    std::vector<ResultRow> rows = run_experiment(cfg, eval_outdir);
    for (const auto& r : rows) {
      std::cout << "seed " << r.seed << " (" << r.method << "):\n";
      std::cout << "  SL  CER " << pct(r.sl_cer) << "  WER " << pct(r.sl_wer) << "\n";
      std::cout << "  UL  CER " << pct(r.ul_cer) << "  WER " << pct(r.ul_wer) << "\n";
    }
    print_rows_summary(rows);
  });

  // --- diversity ------------------------------------------------------
  auto* div_cmd = app.add_subcommand("diversity", "TI/Jmm Monte-Carlo estimates from a cache");
  std::string div_cache, div_out, div_outdir = "runs";
  std::vector<int> div_ks;
  std::vector<std::string> div_metrics = {"TI", "Jmm"};
  int div_B = 1000, div_pca = 8;
  std::optional<uint64_t> div_seed;
  div_cmd->add_option("--cache", div_cache, "embedding cache (.smle)")->required();
  div_cmd->add_option("--ks", div_ks, "subset sizes")->delimiter(',');
  div_cmd->add_option("--B", div_B, "Monte-Carlo repetitions");
  div_cmd->add_option("--metrics", div_metrics, "TI and/or Jmm")->delimiter(',');
  div_cmd->add_option("--pca-dim", div_pca, "PCA dimension");
  div_cmd->add_option("--seed", div_seed, "sampling seed");
  div_cmd->add_option("--out", div_out, "CSV path to write");
  div_cmd->add_option("--out-dir", div_outdir, "artifact directory");
  div_cmd->callback([&]() {
    EmbeddingCache cache = EmbeddingCache::load(div_cache);
    std::vector<LanguageVector> vecs = language_vectors_from_cache(cache);
    std::vector<std::string> order;
    for (const auto& v : vecs) order.push_back(v.language_id);
    PcaResult pca = pca_project(stack_language_vectors(vecs), div_pca);
    std::cerr << "pca: kept " << pca.effective_dim << " components, explained variance "
              << pca.explained_variance_ratio << "\n";
    BinaryFeatureMatrix bfm = discretize(pca.projected, order);
    if (div_ks.empty())
      for (int k = 1; k <= bfm.n(); k *= 2) div_ks.push_back(std::min(k, bfm.n()));
    std::vector<DiversityEstimate> est =
        monte_carlo(bfm, div_ks, div_B, div_metrics, div_seed.value_or(0));
    fs::path out = div_out.empty() ? fs::path(div_outdir) / "diversity.csv" : fs::path(div_out);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    write_estimates_csv(out, est);
    for (const auto& e : est)
      std::cout << "k=" << e.k << " " << e.metric << " mu=" << e.mu << " sigma=" << e.sigma << "\n";
    std::cout << "wrote " << out.string() << "\n";
  });

  // --- rand-k ---------------------------------------------------------
  auto* randk_cmd = app.add_subcommand("rand-k", "CER and diversity vs number of training languages");
  std::string randk_config, randk_outdir = "runs";
  std::vector<int> randk_ks = {1, 2, 4, 8, 12};
  std::optional<uint64_t> randk_seed;
  randk_cmd->add_option("--config", randk_config, "experiment config (JSON)");
  randk_cmd->add_option("--ks", randk_ks, "subset sizes")->delimiter(',');
  randk_cmd->add_option("--out-dir", randk_outdir, "artifact directory");
  randk_cmd->add_option("--seed", randk_seed, "single-seed override");
  randk_cmd->callback([&]() {
    ExperimentConfig cfg = load_config_or_default(randk_config);
    apply_seed_override(cfg, randk_seed);
    std::vector<RandKRow> rows = run_rand_k_study(cfg, randk_ks, randk_outdir);
    fs::path out = fs::path(randk_outdir) / "rand_k.csv";
    write_rand_k_csv(out, rows);
    std::cout << "k    CER(all)  CER(SL)  CER(UL)   TI      Jmm\n";
    for (const auto& r : rows) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%-4d %8.4f %8.4f %8.4f  %6.4f  %6.4f", r.k, r.cer_all,
                    r.cer_sl, r.cer_ul, r.ti, r.jmm);
      std::cout << buf << "\n";
    }
    std::cout << "wrote " << out.string() << "\n";
  });

  // --- ablate ---------------------------------------------------------
  auto* abl_cmd = app.add_subcommand("ablate", "prompt-modality ablation table");
  std::string abl_config, abl_outdir = "runs";
  std::optional<uint64_t> abl_seed;
  abl_cmd->add_option("--config", abl_config, "experiment config (JSON)");
  abl_cmd->add_option("--out-dir", abl_outdir, "artifact directory");
  abl_cmd->add_option("--seed", abl_seed, "single-seed override");
  abl_cmd->callback([&]() {
    ExperimentConfig cfg = load_config_or_default(abl_config);
    apply_seed_override(cfg, abl_seed);
    std::vector<AblationRow> rows = run_ablation(cfg, abl_outdir);
    fs::path out = fs::path(abl_outdir) / "ablation.csv";
    write_ablation_csv(out, rows);
    for (AblationMode mode :
         {AblationMode::full, AblationMode::no_prompt_audio, AblationMode::no_prompt_text}) {
      std::vector<double> sl, ul, script;
      for (const auto& r : rows)
        if (r.mode == mode) {
          sl.push_back(r.sl_cer);
          ul.push_back(r.ul_cer);
          script.push_back(r.ul_script_rate);
        }
      std::cout << to_string(mode) << ": SL CER " << pct(mean_std(sl).mean) << "  UL CER "
                << pct(mean_std(ul).mean) << "  UL script-rate " << pct(mean_std(script).mean)
                << "\n";
    }
    std::cout << "wrote " << out.string() << "\n";
  });

  // --- report ---------------------------------------------------------
  auto* rep_cmd = app.add_subcommand("report", "print persisted results for a config");
  std::string rep_config, rep_outdir = "runs", rep_rundir;
  std::optional<uint64_t> rep_seed;
  rep_cmd->add_option("--config", rep_config, "experiment config (JSON)");
  rep_cmd->add_option("--out-dir", rep_outdir, "artifact directory");
  rep_cmd->add_option("--run-dir", rep_rundir, "run directory holding results.csv");
  rep_cmd->add_option("--seed", rep_seed, "single-seed override");
  rep_cmd->callback([&]() {
    fs::path results;
    if (!rep_rundir.empty()) {
      results = fs::path(rep_rundir) / "results.csv";
    } else {
      ExperimentConfig cfg = load_config_or_default(rep_config);
      apply_seed_override(cfg, rep_seed);
      char buf[24];
      std::snprintf(buf, sizeof(buf), "%016llx",
                    static_cast<unsigned long long>(cfg.config_hash()));
      results = fs::path(rep_outdir) / (std::string("run_") + buf) / "results.csv";
    }
    std::vector<ResultRow> rows = read_result_rows_csv(results);
    if (rows.empty()) throw Error("no result rows in " + results.string());
    print_rows_summary(rows);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const Error& e) {
    nlohmann::ordered_json err;
    err["error"] = "smile_error";
    err["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::ordered_json err;
    err["error"] = "exception";
    err["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
