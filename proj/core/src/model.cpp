#include "smile/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <limits>

namespace smile {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& S) {
  Eigen::MatrixXd A(S.rows(), S.cols());
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    double m = S.row(i).maxCoeff();
    Eigen::ArrayXd e = (S.row(i).array() - m).exp();
    A.row(i) = (e / e.sum()).matrix();
  }
  return A;
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& S) {
  Eigen::MatrixXd L(S.rows(), S.cols());
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    double m = S.row(i).maxCoeff();
    double lse = m + std::log((S.row(i).array() - m).exp().sum());
    L.row(i) = (S.row(i).array() - lse).matrix();
  }
  return L;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_deriv(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct Param {
  std::string name;
  Eigen::MatrixXd v, g;
  bool trainable = true;

  void setup(std::string n, int rows, int cols) {
    name = std::move(n);
    v = Eigen::MatrixXd::Zero(rows, cols);
    g = Eigen::MatrixXd::Zero(rows, cols);
  }
};

struct LinCache {
  Eigen::MatrixXd X;
};

// Kernel-3 strided convolution over frames followed by GELU; the local
// window is what lets the encoder see token onsets and boundaries directly.
struct ConvStemCache {
  Eigen::MatrixXd cols;  // T' x 3F
  Eigen::MatrixXd pre;   // T' x D, pre-activation
};

struct ConvStem {
  Param W;  // D x 3F
  Param b;  // D x 1
  int stride = 1;

  void setup(const std::string& name, int out, int in, int s) {
    W.setup(name + ".W", out, 3 * in);
    b.setup(name + ".b", out, 1);
    stride = s;
  }

  static Eigen::Index out_len(Eigen::Index t, int stride) { return (t + stride - 1) / stride; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, ConvStemCache* c) const {
    const Eigen::Index T = X.rows(), F = X.cols();
    const Eigen::Index To = out_len(T, stride);
    Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(To, 3 * F);
    for (Eigen::Index o = 0; o < To; ++o) {
      Eigen::Index center = o * stride;
      if (center - 1 >= 0) cols.block(o, 0, 1, F) = X.row(center - 1);
      cols.block(o, F, 1, F) = X.row(center);
      if (center + 1 < T) cols.block(o, 2 * F, 1, F) = X.row(center + 1);
    }
    Eigen::MatrixXd pre = cols * W.v.transpose();
    pre.rowwise() += b.v.col(0).transpose();
    Eigen::MatrixXd Y = pre.unaryExpr([](double x) { return gelu(x); });
    if (c) {
      c->cols = std::move(cols);
      c->pre = std::move(pre);
    }
    return Y;
  }

  void backward(const Eigen::MatrixXd& dY, const ConvStemCache& c) {
    Eigen::MatrixXd dPre =
        (dY.array() * c.pre.unaryExpr([](double x) { return gelu_deriv(x); }).array()).matrix();
    if (W.trainable) W.g += dPre.transpose() * c.cols;
    if (b.trainable) b.g.col(0) += dPre.colwise().sum().transpose();
  }
};

struct Linear {
  Param W;  // out x in
  Param b;  // out x 1
  struct Lora {
    Param A;  // r x in
    Param B;  // out x r
  };
  std::optional<Lora> lora;

  void setup(const std::string& name, int out, int in) {
    W.setup(name + ".W", out, in);
    b.setup(name + ".b", out, 1);
  }

  Eigen::MatrixXd eff_weight() const {
    if (lora) return W.v + lora->B.v * lora->A.v;
    return W.v;
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, LinCache* c) const {
    if (c) c->X = X;
    Eigen::MatrixXd Y = X * eff_weight().transpose();
    Y.rowwise() += b.v.col(0).transpose();
    return Y;
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const LinCache& c) {
    Eigen::MatrixXd Weff = eff_weight();
    Eigen::MatrixXd dWeff = dY.transpose() * c.X;
    if (lora) {
      lora->B.g += dWeff * lora->A.v.transpose();
      lora->A.g += lora->B.v.transpose() * dWeff;
    }
    if (W.trainable) W.g += dWeff;
    if (b.trainable) b.g.col(0) += dY.colwise().sum().transpose();
    return dY * Weff;
  }
};

struct LNCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv_std;
};

struct LayerNorm {
  static constexpr double kEps = 1e-5;
  Param g;  // D x 1
  Param b;  // D x 1

  void setup(const std::string& name, int dim) {
    g.setup(name + ".g", dim, 1);
    b.setup(name + ".b", dim, 1);
    g.v.setOnes();
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, LNCache* c) const {
    Eigen::Index T = X.rows(), D = X.cols();
    Eigen::MatrixXd xhat(T, D);
    Eigen::VectorXd inv_std(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      double mu = X.row(t).mean();
      double var = (X.row(t).array() - mu).square().mean();
      double is = 1.0 / std::sqrt(var + kEps);
      xhat.row(t) = ((X.row(t).array() - mu) * is).matrix();
      inv_std(t) = is;
    }
    Eigen::MatrixXd Y = (xhat.array().rowwise() * g.v.col(0).transpose().array()).matrix();
    Y.rowwise() += b.v.col(0).transpose();
    if (c) {
      c->xhat = std::move(xhat);
      c->inv_std = std::move(inv_std);
    }
    return Y;
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const LNCache& c) {
    if (g.trainable) {
      g.g.col(0) += (dY.array() * c.xhat.array()).colwise().sum().matrix().transpose();
      b.g.col(0) += dY.colwise().sum().transpose();
    }
    Eigen::MatrixXd dxhat = (dY.array().rowwise() * g.v.col(0).transpose().array()).matrix();
    Eigen::MatrixXd dX(dY.rows(), dY.cols());
    for (Eigen::Index t = 0; t < dY.rows(); ++t) {
      double m1 = dxhat.row(t).mean();
      double m2 = (dxhat.row(t).array() * c.xhat.row(t).array()).mean();
      dX.row(t) = ((dxhat.row(t).array() - m1 - c.xhat.row(t).array() * m2) * c.inv_std(t)).matrix();
    }
    return dX;
  }
};

struct MhaCache {
  LinCache qc, kc, vc, oc;
  Eigen::MatrixXd Q, K, V;
  std::vector<Eigen::MatrixXd> A;  // per head, post-softmax
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  void setup(const std::string& name, int dim, int n_heads) {
    heads = n_heads;
    q.setup(name + ".q", dim, dim);
    k.setup(name + ".k", dim, dim);
    v.setup(name + ".v", dim, dim);
    o.setup(name + ".o", dim, dim);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& Xq, const Eigen::MatrixXd& Xkv, bool causal,
                          MhaCache* c) const {
    const Eigen::Index D = q.W.v.rows();
    const Eigen::Index dh = D / heads;
    Eigen::MatrixXd Q = q.forward(Xq, c ? &c->qc : nullptr);
    Eigen::MatrixXd K = k.forward(Xkv, c ? &c->kc : nullptr);
    Eigen::MatrixXd V = v.forward(Xkv, c ? &c->vc : nullptr);
    const Eigen::Index Tq = Q.rows(), Tk = K.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::MatrixXd O(Tq, D);
    std::vector<Eigen::MatrixXd> As(heads);
    for (int h = 0; h < heads; ++h) {
      Eigen::MatrixXd S = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() * scale;
      if (causal)
        for (Eigen::Index i = 0; i < Tq; ++i)
          for (Eigen::Index j = i + 1; j < Tk; ++j) S(i, j) = kNegInf;
      Eigen::MatrixXd A = softmax_rows(S);
      O.middleCols(h * dh, dh) = A * V.middleCols(h * dh, dh);
      As[h] = std::move(A);
    }
    Eigen::MatrixXd Y = o.forward(O, c ? &c->oc : nullptr);
    if (c) {
      c->Q = std::move(Q);
      c->K = std::move(K);
      c->V = std::move(V);
      c->A = std::move(As);
    }
    return Y;
  }

  // Returns dXq and accumulates the key/value path into dXkv.
  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const MhaCache& c, Eigen::MatrixXd& dXkv) {
    const Eigen::Index D = q.W.v.rows();
    const Eigen::Index dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::MatrixXd dO = o.backward(dY, c.oc);
    const Eigen::Index Tq = c.Q.rows(), Tk = c.K.rows();
    Eigen::MatrixXd dQ = Eigen::MatrixXd::Zero(Tq, D);
    Eigen::MatrixXd dK = Eigen::MatrixXd::Zero(Tk, D);
    Eigen::MatrixXd dV = Eigen::MatrixXd::Zero(Tk, D);
    for (int h = 0; h < heads; ++h) {
      const Eigen::MatrixXd& A = c.A[h];
      Eigen::MatrixXd dA = dO.middleCols(h * dh, dh) * c.V.middleCols(h * dh, dh).transpose();
      dV.middleCols(h * dh, dh) += A.transpose() * dO.middleCols(h * dh, dh);
      Eigen::MatrixXd dS(Tq, Tk);
      for (Eigen::Index i = 0; i < Tq; ++i) {
        double dot = (dA.row(i).array() * A.row(i).array()).sum();
        dS.row(i) = (A.row(i).array() * (dA.row(i).array() - dot)).matrix();
      }
      dQ.middleCols(h * dh, dh) += dS * c.K.middleCols(h * dh, dh) * scale;
      dK.middleCols(h * dh, dh) += dS.transpose() * c.Q.middleCols(h * dh, dh) * scale;
    }
    Eigen::MatrixXd dXq = q.backward(dQ, c.qc);
    dXkv += k.backward(dK, c.kc);
    dXkv += v.backward(dV, c.vc);
    return dXq;
  }
};

struct FfnCache {
  LinCache c1, c2;
  Eigen::MatrixXd H1;
};

struct Ffn {
  Linear l1, l2;

  void setup(const std::string& name, int dim, int hidden) {
    l1.setup(name + ".l1", hidden, dim);
    l2.setup(name + ".l2", dim, hidden);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, FfnCache* c) const {
    Eigen::MatrixXd H1 = l1.forward(X, c ? &c->c1 : nullptr);
    Eigen::MatrixXd G = H1.unaryExpr([](double x) { return gelu(x); });
    Eigen::MatrixXd Y = l2.forward(G, c ? &c->c2 : nullptr);
    if (c) c->H1 = std::move(H1);
    return Y;
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const FfnCache& c) {
    Eigen::MatrixXd dG = l2.backward(dY, c.c2);
    Eigen::MatrixXd dH1 =
        (dG.array() * c.H1.unaryExpr([](double x) { return gelu_deriv(x); }).array()).matrix();
    return l1.backward(dH1, c.c1);
  }
};

struct EncLayerCache {
  LNCache ln1, ln2;
  MhaCache attn;
  FfnCache ffn;
};

struct EncLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Ffn ffn;

  void setup(const std::string& name, int dim, int heads, int ffn_dim) {
    ln1.setup(name + ".ln1", dim);
    attn.setup(name + ".attn", dim, heads);
    ln2.setup(name + ".ln2", dim);
    ffn.setup(name + ".ffn", dim, ffn_dim);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, EncLayerCache* c) const {
    Eigen::MatrixXd N1 = ln1.forward(X, c ? &c->ln1 : nullptr);
    Eigen::MatrixXd X1 = X + attn.forward(N1, N1, false, c ? &c->attn : nullptr);
    Eigen::MatrixXd N2 = ln2.forward(X1, c ? &c->ln2 : nullptr);
    return X1 + ffn.forward(N2, c ? &c->ffn : nullptr);
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const EncLayerCache& c) {
    Eigen::MatrixXd dX1 = dY + ln2.backward(ffn.backward(dY, c.ffn), c.ln2);
    Eigen::MatrixXd dN1kv = Eigen::MatrixXd::Zero(dX1.rows(), dX1.cols());
    Eigen::MatrixXd dN1q = attn.backward(dX1, c.attn, dN1kv);
    return dX1 + ln1.backward(dN1q + dN1kv, c.ln1);
  }
};

struct DecLayerCache {
  LNCache ln1, ln2, ln3;
  MhaCache self_c, cross_c;
  FfnCache ffn;
};

struct DecLayer {
  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  Ffn ffn;

  void setup(const std::string& name, int dim, int heads, int ffn_dim) {
    ln1.setup(name + ".ln1", dim);
    self_attn.setup(name + ".self", dim, heads);
    ln2.setup(name + ".ln2", dim);
    cross_attn.setup(name + ".cross", dim, heads);
    ln3.setup(name + ".ln3", dim);
    ffn.setup(name + ".ffn", dim, ffn_dim);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& H,
                          DecLayerCache* c) const {
    Eigen::MatrixXd N1 = ln1.forward(X, c ? &c->ln1 : nullptr);
    Eigen::MatrixXd X1 = X + self_attn.forward(N1, N1, true, c ? &c->self_c : nullptr);
    Eigen::MatrixXd N2 = ln2.forward(X1, c ? &c->ln2 : nullptr);
    Eigen::MatrixXd X2 = X1 + cross_attn.forward(N2, H, false, c ? &c->cross_c : nullptr);
    Eigen::MatrixXd N3 = ln3.forward(X2, c ? &c->ln3 : nullptr);
    return X2 + ffn.forward(N3, c ? &c->ffn : nullptr);
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dY, const DecLayerCache& c,
                           Eigen::MatrixXd& dH) {
    Eigen::MatrixXd dX2 = dY + ln3.backward(ffn.backward(dY, c.ffn), c.ln3);
    Eigen::MatrixXd dN2 = cross_attn.backward(dX2, c.cross_c, dH);
    Eigen::MatrixXd dX1 = dX2 + ln2.backward(dN2, c.ln2);
    Eigen::MatrixXd dN1kv = Eigen::MatrixXd::Zero(dX1.rows(), dX1.cols());
    Eigen::MatrixXd dN1q = self_attn.backward(dX1, c.self_c, dN1kv);
    return dX1 + ln1.backward(dN1q + dN1kv, c.ln1);
  }
};

constexpr double kPeScale = 1.0;

Eigen::MatrixXd sinusoidal_pe(int max_len, int dim) {
  Eigen::MatrixXd pe(max_len, dim);
  for (int t = 0; t < max_len; ++t) {
    for (int i = 0; i < dim; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
      pe(t, i) = kPeScale * std::sin(t * freq);
      if (i + 1 < dim) pe(t, i + 1) = kPeScale * std::cos(t * freq);
    }
  }
  return pe;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::build(const CorpusSplit& split) {
  Vocabulary v;
  v.id_to_display = {"<sot>", "<eot>", "<task>", "<sep>", "<unk_lang>"};
  for (const auto& lang : split.supported_languages) {
    v.language_token[lang] = static_cast<int>(v.id_to_display.size());
    v.id_to_display.push_back("<lang:" + lang + ">");
  }
  v.n_specials = static_cast<int>(v.id_to_display.size());
  std::set<std::string> symbols;
  for (const auto& l : split.languages) symbols.insert(l.script.begin(), l.script.end());
  for (const auto& s : symbols) {
    v.symbol_to_id[s] = static_cast<int>(v.id_to_display.size());
    v.id_to_display.push_back(s);
  }
  return v;
}

int Vocabulary::symbol_id(const std::string& symbol) const {
  auto it = symbol_to_id.find(symbol);
  if (it == symbol_to_id.end()) throw NotFoundError("unknown symbol: " + symbol);
  return it->second;
}

int Vocabulary::lang_or_unk(const std::string& language_id) const {
  auto it = language_token.find(language_id);
  return it == language_token.end() ? unk_lang : it->second;
}

const std::string& Vocabulary::display(int id) const {
  if (id < 0 || id >= size()) throw InvalidArgument("token id out of range: " + std::to_string(id));
  return id_to_display[static_cast<size_t>(id)];
}

std::string Vocabulary::to_json_string() const {
  nlohmann::ordered_json j;
  std::vector<std::string> symbols;
  for (int i = n_specials; i < size(); ++i) symbols.push_back(id_to_display[i]);
  std::vector<std::string> langs;
  for (const auto& [lang, _] : language_token) langs.push_back(lang);
  j["languages"] = langs;
  j["symbols"] = symbols;
  return j.dump();
}

Vocabulary Vocabulary::from_json_string(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  Vocabulary v;
  v.id_to_display = {"<sot>", "<eot>", "<task>", "<sep>", "<unk_lang>"};
  for (const auto& lang : j.at("languages").get<std::vector<std::string>>()) {
    v.language_token[lang] = static_cast<int>(v.id_to_display.size());
    v.id_to_display.push_back("<lang:" + lang + ">");
  }
  v.n_specials = static_cast<int>(v.id_to_display.size());
  for (const auto& sym : j.at("symbols").get<std::vector<std::string>>()) {
    v.symbol_to_id[sym] = static_cast<int>(v.id_to_display.size());
    v.id_to_display.push_back(sym);
  }
  return v;
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (feature_dim < 1) throw InvalidArgument("feature_dim must be >= 1");
  if (hidden_dim < 1) throw InvalidArgument("hidden_dim must be >= 1");
  if (n_heads < 1 || hidden_dim % n_heads != 0)
    throw InvalidArgument("hidden_dim must be divisible by n_heads");
  if (n_encoder_layers < 1 || n_decoder_layers < 1) throw InvalidArgument("need >= 1 layer per side");
  if (ffn_dim < 1) throw InvalidArgument("ffn_dim must be >= 1");
  if (conv_stride < 1 || conv_stride > 4) throw InvalidArgument("conv_stride must be in [1,4]");
  if (max_source_frames < 2) throw InvalidArgument("max_source_frames must be >= 2");
  if (max_source_frames < 2 * prompt_frame_cap())
    throw InvalidArgument("max_source_frames must fit prompt plus target");
  if (max_target_tokens < 2) throw InvalidArgument("max_target_tokens must be >= 2");
  if (adapter_rank && (*adapter_rank < 1 || *adapter_rank > hidden_dim))
    throw InvalidArgument("adapter_rank must be in [1, hidden_dim]");
}

std::string ModelConfig::to_json_string() const {
  nlohmann::ordered_json j;
  j["feature_dim"] = feature_dim;
  j["hidden_dim"] = hidden_dim;
  j["n_encoder_layers"] = n_encoder_layers;
  j["n_decoder_layers"] = n_decoder_layers;
  j["n_heads"] = n_heads;
  j["ffn_dim"] = ffn_dim;
  j["conv_stride"] = conv_stride;
  j["max_source_frames"] = max_source_frames;
  j["max_target_tokens"] = max_target_tokens;
  if (adapter_rank) j["adapter_rank"] = *adapter_rank;
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  ModelConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_encoder_layers = j.at("n_encoder_layers").get<int>();
  c.n_decoder_layers = j.at("n_decoder_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.conv_stride = j.value("conv_stride", 1);
  c.max_source_frames = j.at("max_source_frames").get<int>();
  c.max_target_tokens = j.at("max_target_tokens").get<int>();
  if (j.contains("adapter_rank")) c.adapter_rank = j.at("adapter_rank").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Model

struct Model::Impl {
  ModelConfig cfg;
  Vocabulary vocab;

  ConvStem stem;
  std::vector<EncLayer> enc_layers;
  LayerNorm enc_lnf;

  Param embed;  // V x D
  std::vector<DecLayer> dec_layers;
  LayerNorm dec_lnf;
  Linear out_proj;

  Eigen::MatrixXd pe;
  std::vector<Param*> registry;

  Impl(ModelConfig c, Vocabulary vo) : cfg(std::move(c)), vocab(std::move(vo)) {
    cfg.validate();
    if (vocab.size() <= vocab.n_specials) throw InvalidArgument("vocabulary has no text symbols");
    stem.setup("enc.stem", cfg.hidden_dim, cfg.feature_dim, cfg.conv_stride);
    enc_layers.resize(cfg.n_encoder_layers);
    for (int i = 0; i < cfg.n_encoder_layers; ++i)
      enc_layers[i].setup("enc.L" + std::to_string(i), cfg.hidden_dim, cfg.n_heads, cfg.ffn_dim);
    enc_lnf.setup("enc.ln_f", cfg.hidden_dim);
    embed.setup("dec.embed.E", vocab.size(), cfg.hidden_dim);
    dec_layers.resize(cfg.n_decoder_layers);
    for (int i = 0; i < cfg.n_decoder_layers; ++i)
      dec_layers[i].setup("dec.L" + std::to_string(i), cfg.hidden_dim, cfg.n_heads, cfg.ffn_dim);
    dec_lnf.setup("dec.ln_f", cfg.hidden_dim);
    out_proj.setup("dec.out_proj", vocab.size(), cfg.hidden_dim);
    pe = sinusoidal_pe(std::max(cfg.max_source_frames, cfg.max_target_tokens), cfg.hidden_dim);
    rebuild_registry();
  }

  Impl(const Impl& other) = default;

  void visit_linear(Linear& l, const std::function<void(Param&)>& fn) {
    fn(l.W);
    fn(l.b);
    if (l.lora) {
      fn(l.lora->A);
      fn(l.lora->B);
    }
  }

  void visit_attn(MultiHeadAttention& a, const std::function<void(Param&)>& fn) {
    visit_linear(a.q, fn);
    visit_linear(a.k, fn);
    visit_linear(a.v, fn);
    visit_linear(a.o, fn);
  }

  void visit(const std::function<void(Param&)>& fn) {
    fn(stem.W);
    fn(stem.b);
    for (auto& l : enc_layers) {
      fn(l.ln1.g);
      fn(l.ln1.b);
      visit_attn(l.attn, fn);
      fn(l.ln2.g);
      fn(l.ln2.b);
      visit_linear(l.ffn.l1, fn);
      visit_linear(l.ffn.l2, fn);
    }
    fn(enc_lnf.g);
    fn(enc_lnf.b);
    fn(embed);
    for (auto& l : dec_layers) {
      fn(l.ln1.g);
      fn(l.ln1.b);
      visit_attn(l.self_attn, fn);
      fn(l.ln2.g);
      fn(l.ln2.b);
      visit_attn(l.cross_attn, fn);
      fn(l.ln3.g);
      fn(l.ln3.b);
      visit_linear(l.ffn.l1, fn);
      visit_linear(l.ffn.l2, fn);
    }
    fn(dec_lnf.g);
    fn(dec_lnf.b);
    visit_linear(out_proj, fn);
  }

  void rebuild_registry() {
    registry.clear();
    visit([this](Param& p) { registry.push_back(&p); });
  }

  void init_weights(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x4d4f444cULL));  // "MODL"
    auto gauss_fill = [&rng](Eigen::MatrixXd& m, double sigma) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sigma * rng.gaussian();
    };
    visit([&](Param& p) {
      if (p.name.ends_with(".W")) {
        double sigma = std::sqrt(2.0 / static_cast<double>(p.v.rows() + p.v.cols()));
        gauss_fill(p.v, sigma);
      } else if (p.name == "dec.embed.E") {
        gauss_fill(p.v, 0.2);
      }
      // biases stay zero, layer-norm gains stay one
    });
  }

  struct ForwardCache {
    ConvStemCache enc_in;
    std::vector<EncLayerCache> enc;
    LNCache enc_lnf;
    std::vector<DecLayerCache> dec;
    LNCache dec_lnf;
    LinCache out;
    Eigen::MatrixXd logprobs;
    std::vector<int> z;
  };

  Eigen::MatrixXd encoder_forward(const Eigen::MatrixXd& frames, ForwardCache* c) const {
    if (frames.rows() == 0) throw InvalidArgument("encode: empty input");
    if (frames.cols() != cfg.feature_dim)
      throw InvalidArgument(strcat_msg("encode: feature dim ", frames.cols(), " != configured ",
                                       cfg.feature_dim));
    if (frames.rows() > cfg.max_source_frames)
      throw SequenceTooLong(strcat_msg("encode: ", frames.rows(), " frames exceeds cap of ",
                                       cfg.max_source_frames));
    Eigen::MatrixXd X = stem.forward(frames, c ? &c->enc_in : nullptr);
    X += pe.topRows(X.rows());
    if (c) c->enc.resize(enc_layers.size());
    for (size_t i = 0; i < enc_layers.size(); ++i)
      X = enc_layers[i].forward(X, c ? &c->enc[i] : nullptr);
    return enc_lnf.forward(X, c ? &c->enc_lnf : nullptr);
  }

  Eigen::MatrixXd decoder_forward(const std::vector<int>& z, const Eigen::MatrixXd& H,
                                  ForwardCache* c) const {
    if (z.empty()) throw InvalidArgument("decoder: empty prefix");
    if (static_cast<int>(z.size()) > cfg.max_target_tokens)
      throw SequenceTooLong(strcat_msg("decoder: prefix of ", z.size(), " exceeds cap of ",
                                       cfg.max_target_tokens));
    if (H.cols() != cfg.hidden_dim) throw InvalidArgument("decoder: bad encoder feature width");
    Eigen::MatrixXd X(z.size(), cfg.hidden_dim);
    for (size_t t = 0; t < z.size(); ++t) {
      if (z[t] < 0 || z[t] >= vocab.size())
        throw InvalidArgument("decoder: token id out of range: " + std::to_string(z[t]));
      X.row(t) = embed.v.row(z[t]) + pe.row(static_cast<Eigen::Index>(t));
    }
    if (c) {
      c->dec.resize(dec_layers.size());
      c->z = z;
    }
    for (size_t i = 0; i < dec_layers.size(); ++i)
      X = dec_layers[i].forward(X, H, c ? &c->dec[i] : nullptr);
    Eigen::MatrixXd N = dec_lnf.forward(X, c ? &c->dec_lnf : nullptr);
    Eigen::MatrixXd logits = out_proj.forward(N, c ? &c->out : nullptr);
    Eigen::MatrixXd logprobs = log_softmax_rows(logits);
    if (c) c->logprobs = logprobs;
    return logprobs;
  }

  // Backward from d(logits) through decoder and encoder.
  void backward(const Eigen::MatrixXd& dLogits, const Eigen::MatrixXd& frames, ForwardCache& c) {
    Eigen::MatrixXd dN = out_proj.backward(dLogits, c.out);
    Eigen::MatrixXd dX = dec_lnf.backward(dN, c.dec_lnf);
    Eigen::MatrixXd dH =
        Eigen::MatrixXd::Zero(ConvStem::out_len(frames.rows(), cfg.conv_stride), cfg.hidden_dim);
    for (int i = static_cast<int>(dec_layers.size()) - 1; i >= 0; --i)
      dX = dec_layers[i].backward(dX, c.dec[i], dH);
    if (embed.trainable)
      for (size_t t = 0; t < c.z.size(); ++t) embed.g.row(c.z[t]) += dX.row(t);

    Eigen::MatrixXd dE = enc_lnf.backward(dH, c.enc_lnf);
    for (int i = static_cast<int>(enc_layers.size()) - 1; i >= 0; --i)
      dE = enc_layers[i].backward(dE, c.enc[i]);
    stem.backward(dE, c.enc_in);
  }
};

Model::Model(ModelConfig cfg, Vocabulary vocab, uint64_t init_seed)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(vocab))) {
  impl_->init_weights(init_seed);
  if (impl_->cfg.adapter_rank) {
    int rank = *impl_->cfg.adapter_rank;
    impl_->cfg.adapter_rank.reset();
    apply_adapter(rank, derive_seed(init_seed, 0x4c4f5241ULL));
  }
}

Model::Model(const Model& other) : impl_(std::make_unique<Impl>(*other.impl_)) {
  impl_->rebuild_registry();
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    impl_ = std::make_unique<Impl>(*other.impl_);
    impl_->rebuild_registry();
  }
  return *this;
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

const ModelConfig& Model::config() const { return impl_->cfg; }
const Vocabulary& Model::vocab() const { return impl_->vocab; }

EncoderFeatures Model::encode(const Eigen::MatrixXd& frames) const {
  return EncoderFeatures{impl_->encoder_forward(frames, nullptr), ""};
}

Eigen::MatrixXd Model::decoder_logits(const std::vector<int>& prefix,
                                      const EncoderFeatures& feats) const {
  return impl_->decoder_forward(prefix, feats.H, nullptr);
}

double Model::masked_nll(const Eigen::MatrixXd& logprobs, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask) {
  if (targets.size() != mask.size() || static_cast<Eigen::Index>(targets.size()) != logprobs.rows())
    throw InvalidArgument("masked_nll: size mismatch");
  double sum = 0.0;
  int n = 0;
  for (size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= logprobs.cols())
      throw InvalidArgument("masked_nll: target id out of range");
    sum -= logprobs(static_cast<Eigen::Index>(t), targets[t]);
    ++n;
  }
  if (n == 0) throw InvalidArgument("masked_nll: mask selects no positions");
  return sum / n;
}

namespace {
void check_loss_args(const std::vector<int>& z, const std::vector<uint8_t>& mask) {
  if (z.size() < 2) throw InvalidArgument("sequence loss needs at least two tokens");
  if (mask.size() != z.size() - 1)
    throw InvalidArgument("loss mask must have one entry per prediction position");
}
}  // namespace

double Model::seq_loss(const Eigen::MatrixXd& frames, const std::vector<int>& z,
                       const std::vector<uint8_t>& mask) const {
  check_loss_args(z, mask);
  Eigen::MatrixXd H = impl_->encoder_forward(frames, nullptr);
  std::vector<int> prefix(z.begin(), z.end() - 1);
  Eigen::MatrixXd logprobs = impl_->decoder_forward(prefix, H, nullptr);
  std::vector<int> targets(z.begin() + 1, z.end());
  return masked_nll(logprobs, targets, mask);
}

double Model::seq_loss_and_grad(const Eigen::MatrixXd& frames, const std::vector<int>& z,
                                const std::vector<uint8_t>& mask) {
  check_loss_args(z, mask);
  Impl::ForwardCache cache;
  Eigen::MatrixXd H = impl_->encoder_forward(frames, &cache);
  std::vector<int> prefix(z.begin(), z.end() - 1);
  Eigen::MatrixXd logprobs = impl_->decoder_forward(prefix, H, &cache);
  std::vector<int> targets(z.begin() + 1, z.end());
  double loss = masked_nll(logprobs, targets, mask);

  int n_masked = 0;
  for (uint8_t m : mask) n_masked += (m != 0);
  // d(loss)/d(logit) through log-softmax: -onehot/M on masked rows plus
  // softmax * (row mass of d(logprob)).
  Eigen::MatrixXd dLogits = Eigen::MatrixXd::Zero(logprobs.rows(), logprobs.cols());
  for (Eigen::Index t = 0; t < logprobs.rows(); ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    dLogits.row(t) = (logprobs.row(t).array().exp() / n_masked).matrix();
    dLogits(t, targets[static_cast<size_t>(t)]) -= 1.0 / n_masked;
  }
  impl_->backward(dLogits, frames, cache);
  return loss;
}

void Model::zero_grad() {
  for (Param* p : impl_->registry) p->g.setZero();
}

Model& Model::apply_adapter(int rank, uint64_t seed) {
  if (has_adapter()) throw Error("adapter already applied");
  if (rank < 1) throw InvalidArgument("adapter rank must be >= 1");
  if (rank > impl_->cfg.hidden_dim)
    throw InvalidArgument(strcat_msg("adapter rank ", rank, " exceeds hidden_dim ",
                                     impl_->cfg.hidden_dim));
  Rng rng(derive_seed(seed, 0x414441ULL));
  impl_->visit([](Param& p) { p.trainable = false; });

  auto attach = [&](Linear& l) {
    int out = static_cast<int>(l.W.v.rows());
    int in = static_cast<int>(l.W.v.cols());
    Linear::Lora lora;
    lora.A.setup(l.W.name.substr(0, l.W.name.size() - 2) + ".lora.A", rank, in);
    lora.B.setup(l.W.name.substr(0, l.W.name.size() - 2) + ".lora.B", out, rank);
    double sigma = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < rank; ++i)
      for (int j = 0; j < in; ++j) lora.A.v(i, j) = sigma * rng.gaussian();
    // B stays zero: base function unchanged until trained
    l.lora = std::move(lora);
  };
  for (auto& layer : impl_->enc_layers) {
    attach(layer.attn.q);
    attach(layer.attn.k);
    attach(layer.attn.v);
    attach(layer.attn.o);
    attach(layer.ffn.l1);
    attach(layer.ffn.l2);
  }
  for (auto& layer : impl_->dec_layers) {
    attach(layer.self_attn.q);
    attach(layer.self_attn.k);
    attach(layer.self_attn.v);
    attach(layer.self_attn.o);
    attach(layer.cross_attn.q);
    attach(layer.cross_attn.k);
    attach(layer.cross_attn.v);
    attach(layer.cross_attn.o);
    attach(layer.ffn.l1);
    attach(layer.ffn.l2);
  }
  impl_->cfg.adapter_rank = rank;
  impl_->rebuild_registry();
  return *this;
}

bool Model::has_adapter() const { return impl_->cfg.adapter_rank.has_value(); }

std::vector<ParamView> Model::parameters() {
  std::vector<ParamView> out;
  out.reserve(impl_->registry.size());
  for (Param* p : impl_->registry) out.push_back({p->name, &p->v, &p->g, p->trainable});
  return out;
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (Param* p : impl_->registry) n += p->v.size();
  return n;
}

int64_t Model::trainable_param_count() const {
  int64_t n = 0;
  for (Param* p : impl_->registry)
    if (p->trainable) n += p->v.size();
  return n;
}

uint64_t Model::parameter_fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, size_t len) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (Param* p : impl_->registry) {
    mix(p->name.data(), p->name.size());
    mix(p->v.data(), sizeof(double) * static_cast<size_t>(p->v.size()));
  }
  return h;
}

void Model::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  io::write_magic(os, "SMLC");
  io::write_u32(os, 1);
  nlohmann::ordered_json meta;
  meta["model"] = nlohmann::ordered_json::parse(impl_->cfg.to_json_string());
  meta["vocab"] = nlohmann::ordered_json::parse(impl_->vocab.to_json_string());
  std::string meta_str = meta.dump();
  io::write_u32(os, static_cast<uint32_t>(meta_str.size()));
  os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  io::write_u32(os, static_cast<uint32_t>(impl_->registry.size()));
  for (Param* p : impl_->registry) {
    io::write_u16(os, static_cast<uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    io::write_u32(os, static_cast<uint32_t>(p->v.rows()));
    io::write_u32(os, static_cast<uint32_t>(p->v.cols()));
    for (Eigen::Index r = 0; r < p->v.rows(); ++r)
      for (Eigen::Index c = 0; c < p->v.cols(); ++c)
        io::write_f32(os, static_cast<float>(p->v(r, c)));
  }
  if (!os) throw Error("checkpoint write failed: " + path.string());
}

Model Model::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("checkpoint not found: " + path.string());
  io::expect_magic(is, "SMLC", "checkpoint " + path.string());
  uint32_t version = io::read_u32(is);
  if (version != 1) throw ParseError("checkpoint: unsupported version", 0);
  uint32_t meta_len = io::read_u32(is);
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), meta_len);
  if (!is) throw ParseError("checkpoint: truncated metadata", 0);
  nlohmann::json meta = nlohmann::json::parse(meta_str);
  ModelConfig cfg = ModelConfig::from_json_string(meta.at("model").dump());
  Vocabulary vocab = Vocabulary::from_json_string(meta.at("vocab").dump());

  Model model(cfg, vocab, 0);
  std::map<std::string, Param*> by_name;
  for (Param* p : model.impl_->registry) by_name[p->name] = p;

  uint32_t n_tensors = io::read_u32(is);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    uint16_t name_len = io::read_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rows = io::read_u32(is);
    uint32_t cols = io::read_u32(is);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("checkpoint: unknown tensor " + name, 0);
    Param* p = it->second;
    if (p->v.rows() != static_cast<Eigen::Index>(rows) ||
        p->v.cols() != static_cast<Eigen::Index>(cols))
      throw ParseError("checkpoint: shape mismatch for " + name, 0);
    for (uint32_t r = 0; r < rows; ++r)
      for (uint32_t c = 0; c < cols; ++c) p->v(r, c) = io::read_f32(is);
  }
  return model;
}

// ---------------------------------------------------------------------------
// DecodeSession

struct DecodeSession::Impl {
  const Model::Impl* m;
  Eigen::MatrixXd H;
  std::vector<Eigen::MatrixXd> cross_k, cross_v;  // per layer, S x D
  std::vector<Eigen::MatrixXd> self_k, self_v;    // per layer, len x D
  int len = 0;
  Eigen::VectorXd logprobs;

  static Eigen::RowVectorXd attend(const Eigen::RowVectorXd& q, const Eigen::MatrixXd& K,
                                   const Eigen::MatrixXd& V, int heads) {
    const Eigen::Index D = q.size();
    const Eigen::Index dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::RowVectorXd out(D);
    for (int h = 0; h < heads; ++h) {
      Eigen::VectorXd s = K.middleCols(h * dh, dh) * q.middleCols(h * dh, dh).transpose() * scale;
      double mx = s.maxCoeff();
      Eigen::ArrayXd e = (s.array() - mx).exp();
      Eigen::VectorXd a = (e / e.sum()).matrix();
      out.middleCols(h * dh, dh) = a.transpose() * V.middleCols(h * dh, dh);
    }
    return out;
  }

  void consume(int token) {
    const ModelConfig& cfg = m->cfg;
    if (token < 0 || token >= m->vocab.size())
      throw InvalidArgument("decode: token id out of range: " + std::to_string(token));
    if (len >= cfg.max_target_tokens)
      throw SequenceTooLong(strcat_msg("decode: sequence exceeds cap of ", cfg.max_target_tokens));
    Eigen::RowVectorXd x = m->embed.v.row(token) + m->pe.row(len);
    for (size_t li = 0; li < m->dec_layers.size(); ++li) {
      const DecLayer& L = m->dec_layers[li];
      Eigen::RowVectorXd n1 = L.ln1.forward(x, nullptr).row(0);
      self_k[li].conservativeResize(len + 1, Eigen::NoChange);
      self_v[li].conservativeResize(len + 1, Eigen::NoChange);
      self_k[li].row(len) = L.self_attn.k.forward(n1, nullptr).row(0);
      self_v[li].row(len) = L.self_attn.v.forward(n1, nullptr).row(0);
      Eigen::RowVectorXd qrow = L.self_attn.q.forward(n1, nullptr).row(0);
      Eigen::RowVectorXd att =
          attend(qrow, self_k[li].topRows(len + 1), self_v[li].topRows(len + 1), L.self_attn.heads);
      Eigen::RowVectorXd x1 = x + L.self_attn.o.forward(att, nullptr).row(0);

      Eigen::RowVectorXd n2 = L.ln2.forward(x1, nullptr).row(0);
      Eigen::RowVectorXd qc = L.cross_attn.q.forward(n2, nullptr).row(0);
      Eigen::RowVectorXd cat = attend(qc, cross_k[li], cross_v[li], L.cross_attn.heads);
      Eigen::RowVectorXd x2 = x1 + L.cross_attn.o.forward(cat, nullptr).row(0);

      Eigen::RowVectorXd n3 = L.ln3.forward(x2, nullptr).row(0);
      x = x2 + L.ffn.forward(n3, nullptr).row(0);
    }
    Eigen::RowVectorXd n = m->dec_lnf.forward(x, nullptr).row(0);
    Eigen::RowVectorXd logits = m->out_proj.forward(n, nullptr).row(0);
    double mx = logits.maxCoeff();
    double lse = mx + std::log((logits.array() - mx).exp().sum());
    logprobs = (logits.array() - lse).matrix().transpose();
    ++len;
  }
};

DecodeSession::DecodeSession(const Model& model, const EncoderFeatures& feats,
                             const std::vector<int>& prefix)
    : impl_(std::make_unique<Impl>()) {
  if (prefix.empty()) throw InvalidArgument("decode: empty prefix");
  impl_->m = model.impl_.get();
  impl_->H = feats.H;
  if (impl_->H.cols() != impl_->m->cfg.hidden_dim)
    throw InvalidArgument("decode: bad encoder feature width");
  size_t n_layers = impl_->m->dec_layers.size();
  impl_->cross_k.resize(n_layers);
  impl_->cross_v.resize(n_layers);
  impl_->self_k.assign(n_layers, Eigen::MatrixXd(0, impl_->m->cfg.hidden_dim));
  impl_->self_v.assign(n_layers, Eigen::MatrixXd(0, impl_->m->cfg.hidden_dim));
  for (size_t li = 0; li < n_layers; ++li) {
    impl_->cross_k[li] = impl_->m->dec_layers[li].cross_attn.k.forward(impl_->H, nullptr);
    impl_->cross_v[li] = impl_->m->dec_layers[li].cross_attn.v.forward(impl_->H, nullptr);
  }
  for (int t : prefix) impl_->consume(t);
}

DecodeSession::DecodeSession(const DecodeSession& other)
    : impl_(std::make_unique<Impl>(*other.impl_)) {}
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;
DecodeSession::~DecodeSession() = default;

const Eigen::VectorXd& DecodeSession::next_logprobs() const { return impl_->logprobs; }

void DecodeSession::advance(int token) { impl_->consume(token); }

int DecodeSession::length() const { return impl_->len; }

}  // namespace smile
