#include "smile/corpus.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace smile {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string lang_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02d", prefix, i);
  return buf;
}

std::string utt_name(const std::string& lang, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_u%03d", lang.c_str(), i);
  return buf;
}

std::string symbol_name(int i) {
  if (i < 26) return std::string(1, static_cast<char>('a' + i));
  return "s" + std::to_string(i);
}

}  // namespace

bool LanguageSpec::in_script(const std::string& symbol) const {
  return std::binary_search(script.begin(), script.end(), symbol);
}

void LanguageSpec::validate() const {
  if (script.empty()) throw InvariantViolation("language " + language_id + ": empty script", "script");
  if (!std::is_sorted(script.begin(), script.end()))
    throw InvariantViolation("language " + language_id + ": script not sorted", "script");
  if (std::adjacent_find(script.begin(), script.end()) != script.end())
    throw InvariantViolation("language " + language_id + ": duplicate script symbol", "script");
  if (codebook.size() != script.size())
    throw InvariantViolation("language " + language_id + ": codebook keys != script", "codebook");
  for (const auto& s : script)
    if (!codebook.count(s))
      throw InvariantViolation("language " + language_id + ": symbol " + s + " missing from codebook",
                               "codebook");
  if (noise_scale < 0.0)
    throw InvariantViolation("language " + language_id + ": negative noise_scale", "noise_scale");
  if (d_min < 1 || d_max < d_min)
    throw InvariantViolation("language " + language_id + ": bad duration range", "duration_range");
}

const LanguageSpec& CorpusSplit::spec_for(const std::string& language_id) const {
  for (const auto& l : languages)
    if (l.language_id == language_id) return l;
  throw NotFoundError("unknown language id: " + language_id);
}

std::vector<const Utterance*> CorpusSplit::test_pool() const {
  std::vector<const Utterance*> out;
  out.reserve(supported_test.size() + unsupported_test.size());
  for (const auto& u : supported_test) out.push_back(&u);
  for (const auto& u : unsupported_test) out.push_back(&u);
  return out;
}

void CorpusSplit::validate() const {
  for (const auto& l : supported_languages)
    if (unsupported_languages.count(l))
      throw InvariantViolation("language sets overlap on " + l, "supported_languages");
  for (const auto& l : languages) l.validate();

  std::set<std::string> train_ids;
  auto check_utt = [&](const Utterance& u, bool supported) {
    const auto& declared = supported ? supported_languages : unsupported_languages;
    if (!declared.count(u.language_id))
      throw InvariantViolation("utterance " + u.utterance_id + " has out-of-split language " + u.language_id,
                               "language_id");
    const LanguageSpec& spec = spec_for(u.language_id);
    for (const auto& t : u.tokens)
      if (!spec.in_script(t))
        throw InvariantViolation("utterance " + u.utterance_id + ": token " + t + " outside script",
                                 "tokens");
    if (u.n_frames() < u.n_tokens() * spec.d_min)
      throw InvariantViolation("utterance " + u.utterance_id + ": too few frames for token count",
                               "frames");
  };
  for (const auto& u : supported_train) {
    check_utt(u, true);
    train_ids.insert(u.utterance_id);
  }
  for (const auto& u : supported_test) {
    check_utt(u, true);
    if (train_ids.count(u.utterance_id))
      throw InvariantViolation("utterance " + u.utterance_id + " in both train and test", "utterance_id");
  }
  for (const auto& u : unsupported_test) check_utt(u, false);
}

void CorpusParams::validate() const {
  if (n_supported < 1) throw InvalidArgument("n_supported must be >= 1");
  if (n_unsupported < 0) throw InvalidArgument("n_unsupported must be >= 0");
  if (utterances_per_language < 1) throw InvalidArgument("utterances_per_language must be >= 1");
  if (unsupported_utterances_per_language < 1)
    throw InvalidArgument("unsupported_utterances_per_language must be >= 1");
  if (feature_dim < 2) throw InvalidArgument("feature_dim must be >= 2");
  if (script_size < 1 || script_size > inventory_size)
    throw InvalidArgument("script_size must be in [1, inventory_size]");
  if (script_size > n_classes) throw InvalidArgument("script_size must be <= n_classes");
  if (d_min < 1 || d_max < d_min) throw InvalidArgument("bad duration range");
  if (min_tokens < 1 || max_tokens < min_tokens) throw InvalidArgument("bad token length range");
  if (test_fraction < 0.0 || test_fraction > 1.0) throw InvalidArgument("test_fraction must be in [0,1]");
  if (onset_gain <= 0.0) throw InvalidArgument("onset_gain must be positive");
}

CorpusSplit generate_corpus(const CorpusParams& params) {
  params.validate();
  Rng rng(derive_seed(params.seed, 0x434f5250ULL));  // "CORP"

  // Global base dictionary: orthonormal class vectors when they fit in the
  // feature space, normalized gaussians otherwise.
  Eigen::MatrixXd gauss(params.feature_dim, params.n_classes);
  for (int c = 0; c < params.n_classes; ++c)
    for (int f = 0; f < params.feature_dim; ++f) gauss(f, c) = rng.gaussian();
  Eigen::MatrixXd base;
  if (params.n_classes <= params.feature_dim) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    base = qr.householderQ() * Eigen::MatrixXd::Identity(params.feature_dim, params.n_classes);
  } else {
    base = gauss;
    for (int c = 0; c < params.n_classes; ++c) base.col(c).normalize();
  }

  CorpusSplit split;
  int total_langs = params.n_supported + params.n_unsupported;
  std::vector<std::map<std::string, int>> signatures;  // symbol -> class, for distinctness

  for (int li = 0; li < total_langs; ++li) {
    bool supported = li < params.n_supported;
    LanguageSpec spec;
    spec.language_id =
        supported ? lang_name("sl", li) : lang_name("ul", li - params.n_supported);
    spec.noise_scale = params.noise_scale;
    spec.d_min = params.d_min;
    spec.d_max = params.d_max;

    std::map<std::string, int> sig;
    for (int attempt = 0;; ++attempt) {
      std::vector<int> sym_idx = rng.sample_without_replacement(params.inventory_size, params.script_size);
      std::vector<int> cls_idx = rng.sample_without_replacement(params.n_classes, params.script_size);
      spec.script.clear();
      for (int s : sym_idx) spec.script.push_back(symbol_name(s));
      std::sort(spec.script.begin(), spec.script.end());
      sig.clear();
      for (int i = 0; i < params.script_size; ++i) sig[spec.script[i]] = cls_idx[i];
      if (std::find(signatures.begin(), signatures.end(), sig) == signatures.end()) break;
      if (attempt > 256) throw Error("could not draw a distinct language codebook");
    }
    signatures.push_back(sig);
    spec.codebook.clear();
    for (const auto& [sym, cls] : sig) spec.codebook[sym] = base.col(cls);
    spec.validate();

    int n_utts =
        supported ? params.utterances_per_language : params.unsupported_utterances_per_language;
    std::vector<Utterance> utts;
    utts.reserve(n_utts);
    for (int ui = 0; ui < n_utts; ++ui) {
      Utterance u;
      u.utterance_id = utt_name(spec.language_id, ui);
      u.language_id = spec.language_id;
      int n_tok = static_cast<int>(rng.uniform_int(params.min_tokens, params.max_tokens));
      u.tokens.reserve(n_tok);
      std::vector<int> durations(n_tok);
      int n_frames = 0;
      size_t prev = spec.script.size();  // no immediate repeats: the boundary
                                         // between same-class tokens is not
                                         // observable in the frames
      for (int t = 0; t < n_tok; ++t) {
        size_t pick;
        if (spec.script.size() == 1) {
          pick = 0;
        } else {
          pick = rng.bounded(spec.script.size() - (prev < spec.script.size() ? 1 : 0));
          if (prev < spec.script.size() && pick >= prev) ++pick;
        }
        u.tokens.push_back(spec.script[pick]);
        prev = pick;
        durations[t] = static_cast<int>(rng.uniform_int(params.d_min, params.d_max));
        n_frames += durations[t];
      }
      u.frames.resize(n_frames, params.feature_dim);
      int row = 0;
      for (int t = 0; t < n_tok; ++t) {
        const Eigen::VectorXd& mean = spec.codebook.at(u.tokens[t]);
        for (int d = 0; d < durations[t]; ++d, ++row) {
          double gain = d == 0 ? params.onset_gain : 1.0;
          for (int f = 0; f < params.feature_dim; ++f)
            u.frames(row, f) = gain * mean(f) + params.noise_scale * rng.gaussian();
        }
      }
      utts.push_back(std::move(u));
    }

    if (supported) {
      split.supported_languages.insert(spec.language_id);
      int n_test =
          std::max(1, static_cast<int>(std::llround(params.test_fraction * n_utts)));
      n_test = std::min(n_test, n_utts);
      std::vector<int> order(n_utts);
      for (int i = 0; i < n_utts; ++i) order[i] = i;
      rng.shuffle(order);
      std::vector<bool> is_test(n_utts, false);
      for (int i = 0; i < n_test; ++i) is_test[order[i]] = true;
      for (int i = 0; i < n_utts; ++i)
        (is_test[i] ? split.supported_test : split.supported_train).push_back(utts[i]);
    } else {
      split.unsupported_languages.insert(spec.language_id);
      for (auto& u : utts) split.unsupported_test.push_back(std::move(u));
    }
    split.languages.push_back(std::move(spec));
  }

  split.validate();
  return split;
}

CorpusSplit generate_corpus(uint64_t seed, int n_supported, int n_unsupported,
                            int utterances_per_language, int feature_dim) {
  CorpusParams p;
  p.seed = seed;
  p.n_supported = n_supported;
  p.n_unsupported = n_unsupported;
  p.utterances_per_language = utterances_per_language;
  p.unsupported_utterances_per_language = utterances_per_language;
  p.feature_dim = feature_dim;
  return generate_corpus(p);
}

std::pair<std::vector<Utterance>, std::vector<Utterance>> filter_lengths(
    const std::vector<Utterance>& utts, int max_frames, int max_tokens) {
  if (max_frames < 1 || max_tokens < 1) throw InvalidArgument("filter_lengths: caps must be >= 1");
  std::vector<Utterance> kept, dropped;
  for (const auto& u : utts) {
    if (u.n_frames() < max_frames && u.n_tokens() < max_tokens)
      kept.push_back(u);
    else
      dropped.push_back(u);
  }
  return {std::move(kept), std::move(dropped)};
}

void write_frame_file(const std::filesystem::path& path, const Eigen::MatrixXd& frames) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open frame file for writing: " + path.string());
  io::write_magic(os, "SMLF");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<uint32_t>(frames.rows()));
  io::write_u32(os, static_cast<uint32_t>(frames.cols()));
  for (Eigen::Index r = 0; r < frames.rows(); ++r)
    for (Eigen::Index c = 0; c < frames.cols(); ++c)
      io::write_f32(os, static_cast<float>(frames(r, c)));
  if (!os) throw Error("write failed: " + path.string());
}

Eigen::MatrixXd read_frame_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("frame file not found: " + path.string());
  io::expect_magic(is, "SMLF", "frame file " + path.string());
  uint32_t version = io::read_u32(is);
  if (version != 1) throw ParseError("frame file " + path.string() + ": unsupported version", 0);
  uint32_t n_frames = io::read_u32(is);
  uint32_t dim = io::read_u32(is);
  Eigen::MatrixXd frames(n_frames, dim);
  for (uint32_t r = 0; r < n_frames; ++r)
    for (uint32_t c = 0; c < dim; ++c) frames(r, c) = io::read_f32(is);
  return frames;
}

namespace {

ordered_json utterance_record(const Utterance& u, const std::string& frames_file) {
  ordered_json rec;
  rec["utterance_id"] = u.utterance_id;
  rec["language_id"] = u.language_id;
  rec["tokens"] = u.tokens;
  if (!frames_file.empty()) {
    rec["frames"] = frames_file;
  } else {
    ordered_json rows = ordered_json::array();
    for (int r = 0; r < u.n_frames(); ++r) {
      ordered_json row = ordered_json::array();
      for (int c = 0; c < u.feature_dim(); ++c)
        row.push_back(static_cast<double>(static_cast<float>(u.frames(r, c))));
      rows.push_back(std::move(row));
    }
    rec["frames"] = std::move(rows);
  }
  return rec;
}

ordered_json language_record(const LanguageSpec& l) {
  ordered_json rec;
  rec["language_id"] = l.language_id;
  rec["script"] = l.script;
  rec["d_min"] = l.d_min;
  return rec;
}

}  // namespace

void write_manifest(std::ostream& os, const std::vector<Utterance>& utts,
                    const std::vector<LanguageSpec>& languages) {
  for (const auto& l : languages) os << language_record(l).dump() << '\n';
  for (const auto& u : utts) os << utterance_record(u, "").dump() << '\n';
}

void save_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts,
                   const std::vector<LanguageSpec>& languages, bool frames_as_files) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open manifest for writing: " + path.string());
  if (!frames_as_files) {
    write_manifest(os, utts, languages);
    return;
  }
  std::filesystem::path frame_dir = path;
  frame_dir += ".frames";
  std::filesystem::create_directories(frame_dir);
  for (const auto& l : languages) os << language_record(l).dump() << '\n';
  for (const auto& u : utts) {
    std::string rel = frame_dir.filename().string() + "/" + u.utterance_id + ".smlf";
    write_frame_file(path.parent_path() / rel, u.frames);
    os << utterance_record(u, rel).dump() << '\n';
  }
}

void save_manifest(const std::filesystem::path& path, const CorpusSplit& split,
                   bool frames_as_files) {
  std::vector<Utterance> all;
  all.reserve(split.supported_train.size() + split.supported_test.size() +
              split.unsupported_test.size());
  for (const auto& u : split.supported_train) all.push_back(u);
  for (const auto& u : split.supported_test) all.push_back(u);
  for (const auto& u : split.unsupported_test) all.push_back(u);
  save_manifest(path, all, split.languages, frames_as_files);
}

std::vector<Utterance> load_manifest(const std::filesystem::path& path) {
  return load_manifest(path, nullptr);
}

std::vector<Utterance> load_manifest(const std::filesystem::path& path,
                                     std::vector<LanguageSpec>* languages_out) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("manifest not found: " + path.string());

  std::vector<Utterance> out;
  std::map<std::string, std::pair<std::vector<std::string>, int>> declared;  // lang -> (script, d_min)
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;

  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("manifest: ") + e.what(), line_no);
    }
    if (!rec.is_object()) throw ParseError("manifest: record is not an object", line_no);

    if (!rec.contains("utterance_id")) {
      // language declaration
      if (!rec.contains("language_id") || !rec.contains("script"))
        throw ParseError("manifest: record lacks utterance_id and is not a language declaration",
                         line_no);
      std::vector<std::string> script = rec.at("script").get<std::vector<std::string>>();
      std::sort(script.begin(), script.end());
      int d_min = rec.value("d_min", 1);
      declared[rec.at("language_id").get<std::string>()] = {script, d_min};
      if (languages_out) {
        LanguageSpec spec;
        spec.language_id = rec.at("language_id").get<std::string>();
        spec.script = script;
        spec.d_min = d_min;
        spec.d_max = std::max(d_min, spec.d_max);
        for (const auto& s : script) spec.codebook[s] = Eigen::VectorXd();  // unknown means
        languages_out->push_back(std::move(spec));
      }
      continue;
    }

    Utterance u;
    try {
      u.utterance_id = rec.at("utterance_id").get<std::string>();
      u.language_id = rec.at("language_id").get<std::string>();
      u.tokens = rec.at("tokens").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("manifest: ") + e.what(), line_no);
    }
    if (!rec.contains("frames")) throw ParseError("manifest: record lacks frames", line_no);

    const auto& fr = rec.at("frames");
    if (fr.is_string()) {
      u.frames = read_frame_file(path.parent_path() / fr.get<std::string>());
    } else if (fr.is_array() && !fr.empty() && fr.front().is_array()) {
      size_t dim = fr.front().size();
      u.frames.resize(static_cast<Eigen::Index>(fr.size()), static_cast<Eigen::Index>(dim));
      for (size_t r = 0; r < fr.size(); ++r) {
        if (!fr[r].is_array() || fr[r].size() != dim)
          throw InvariantViolation(
              strcat_msg("utterance ", u.utterance_id, ": ragged frame rows (line ", line_no, ")"),
              "frames");
        for (size_t c = 0; c < dim; ++c) u.frames(r, c) = fr[r][c].get<double>();
      }
    } else if (fr.is_array()) {
      // flat row-major array needs an explicit feature_dim
      if (!rec.contains("feature_dim"))
        throw ParseError("manifest: flat frames array requires feature_dim", line_no);
      int dim = rec.at("feature_dim").get<int>();
      if (dim < 1 || fr.size() % dim != 0)
        throw InvariantViolation(
            strcat_msg("utterance ", u.utterance_id, ": frame array not divisible by feature_dim",
                       " (line ", line_no, ")"),
            "frames");
      Eigen::Index rows = static_cast<Eigen::Index>(fr.size()) / dim;
      u.frames.resize(rows, dim);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int c = 0; c < dim; ++c) u.frames(r, c) = fr[r * dim + c].get<double>();
    } else {
      throw ParseError("manifest: frames must be an array or a path", line_no);
    }

    if (u.tokens.empty())
      throw InvariantViolation(strcat_msg("utterance ", u.utterance_id, ": empty tokens (line ",
                                          line_no, ")"),
                               "tokens");
    if (u.n_frames() == 0)
      throw InvariantViolation(strcat_msg("utterance ", u.utterance_id, ": empty frames (line ",
                                          line_no, ")"),
                               "frames");
    if (!seen_ids.insert(u.utterance_id).second)
      throw InvariantViolation(strcat_msg("duplicate utterance_id ", u.utterance_id, " (line ",
                                          line_no, ")"),
                               "utterance_id");
    auto it = declared.find(u.language_id);
    if (it != declared.end()) {
      const auto& [script, d_min] = it->second;
      for (const auto& t : u.tokens)
        if (!std::binary_search(script.begin(), script.end(), t))
          throw InvariantViolation(strcat_msg("utterance ", u.utterance_id, ": token ", t,
                                              " outside declared script (line ", line_no, ")"),
                                   "tokens");
      if (u.n_frames() < u.n_tokens() * d_min)
        throw InvariantViolation(strcat_msg("utterance ", u.utterance_id,
                                            ": fewer frames than tokens*d_min (line ", line_no, ")"),
                                 "frames");
    }
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace smile
