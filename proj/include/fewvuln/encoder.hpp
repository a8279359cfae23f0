#pragma once

// A BERT-layout transformer encoder with a per-token classification head,
// written directly against Eigen with explicit forward caches and backward
// passes. Parameter names follow the usual BERT checkpoint naming so that
// converted pretrained weights load by name.
//
// Linear weights are stored input-major (in x out): y = x W + b.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fewvuln/errors.hpp"
#include "fewvuln/random.hpp"
#include "fewvuln/tokenizer.hpp"

namespace fewvuln {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXf;
using ColVec = Eigen::VectorXf;

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t intermediate = 64;
  std::size_t max_positions = 128;
  std::size_t type_vocab_size = 2;
  std::size_t num_labels = 3;
  double layer_norm_eps = 1e-12;
  double hidden_dropout = 0.1;
  double attention_dropout = 0.1;
  double initializer_range = 0.02;

  std::size_t head_dim() const { return hidden / heads; }

  void check() const {
    if (vocab_size == 0 || hidden == 0 || layers == 0 || heads == 0 || intermediate == 0)
      throw ConfigError("encoder dimensions must be positive");
    if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the number of heads");
    if (max_positions < 3) throw ConfigError("max_positions must leave room for at least one piece");
    if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0) || !(attention_dropout >= 0.0 && attention_dropout < 1.0))
      throw ConfigError("dropout probabilities must lie in [0, 1)");
  }
};

struct LayerWeights {
  Matrix q_w, k_w, v_w, o_w, ff1_w, ff2_w;
  RowVec q_b, k_b, v_b, o_b, ln1_g, ln1_b, ff1_b, ff2_b, ln2_g, ln2_b;
};

struct TaggerWeights {
  Matrix word, position, token_type;
  RowVec emb_ln_g, emb_ln_b;
  std::vector<LayerWeights> layers;
  Matrix head_w;
  RowVec head_b;
};

// Calls f(name, t...) for every parameter tensor, visiting the same tensor
// across all given weight sets in lockstep.
template <typename F, typename... W>
void zip_tensors(F&& f, W&... w) {
  f(std::string("embeddings.word_embeddings.weight"), w.word...);
  f(std::string("embeddings.position_embeddings.weight"), w.position...);
  f(std::string("embeddings.token_type_embeddings.weight"), w.token_type...);
  f(std::string("embeddings.LayerNorm.weight"), w.emb_ln_g...);
  f(std::string("embeddings.LayerNorm.bias"), w.emb_ln_b...);
  const std::size_t n = std::min({w.layers.size()...});
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "encoder.layer." + std::to_string(i) + ".";
    f(p + "attention.self.query.weight", w.layers[i].q_w...);
    f(p + "attention.self.query.bias", w.layers[i].q_b...);
    f(p + "attention.self.key.weight", w.layers[i].k_w...);
    f(p + "attention.self.key.bias", w.layers[i].k_b...);
    f(p + "attention.self.value.weight", w.layers[i].v_w...);
    f(p + "attention.self.value.bias", w.layers[i].v_b...);
    f(p + "attention.output.dense.weight", w.layers[i].o_w...);
    f(p + "attention.output.dense.bias", w.layers[i].o_b...);
    f(p + "attention.output.LayerNorm.weight", w.layers[i].ln1_g...);
    f(p + "attention.output.LayerNorm.bias", w.layers[i].ln1_b...);
    f(p + "intermediate.dense.weight", w.layers[i].ff1_w...);
    f(p + "intermediate.dense.bias", w.layers[i].ff1_b...);
    f(p + "output.dense.weight", w.layers[i].ff2_w...);
    f(p + "output.dense.bias", w.layers[i].ff2_b...);
    f(p + "output.LayerNorm.weight", w.layers[i].ln2_g...);
    f(p + "output.LayerNorm.bias", w.layers[i].ln2_b...);
  }
  f(std::string("classifier.weight"), w.head_w...);
  f(std::string("classifier.bias"), w.head_b...);
}

namespace detail {

template <typename T>
void fill_normal(T& t, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(rng.normal(0.0, stddev));
}

}  // namespace detail

// Zero-valued weights with the shapes `cfg` implies.
inline TaggerWeights zero_weights(const EncoderConfig& cfg) {
  const auto d = static_cast<Eigen::Index>(cfg.hidden);
  const auto f = static_cast<Eigen::Index>(cfg.intermediate);
  TaggerWeights w;
  w.word = Matrix::Zero(static_cast<Eigen::Index>(cfg.vocab_size), d);
  w.position = Matrix::Zero(static_cast<Eigen::Index>(cfg.max_positions), d);
  w.token_type = Matrix::Zero(static_cast<Eigen::Index>(cfg.type_vocab_size), d);
  w.emb_ln_g = RowVec::Zero(d);
  w.emb_ln_b = RowVec::Zero(d);
  w.layers.resize(cfg.layers);
  for (auto& l : w.layers) {
    l.q_w = l.k_w = l.v_w = l.o_w = Matrix::Zero(d, d);
    l.q_b = l.k_b = l.v_b = l.o_b = l.ln1_g = l.ln1_b = l.ff2_b = l.ln2_g = l.ln2_b = RowVec::Zero(d);
    l.ff1_w = Matrix::Zero(d, f);
    l.ff1_b = RowVec::Zero(f);
    l.ff2_w = Matrix::Zero(f, d);
  }
  w.head_w = Matrix::Zero(d, static_cast<Eigen::Index>(cfg.num_labels));
  w.head_b = RowVec::Zero(static_cast<Eigen::Index>(cfg.num_labels));
  return w;
}

inline void init_head(TaggerWeights& w, const EncoderConfig& cfg, Rng& rng) {
  w.head_w = Matrix::Zero(static_cast<Eigen::Index>(cfg.hidden), static_cast<Eigen::Index>(cfg.num_labels));
  w.head_b = RowVec::Zero(static_cast<Eigen::Index>(cfg.num_labels));
  detail::fill_normal(w.head_w, rng, cfg.initializer_range);
}

// BERT-style initialisation: N(0, initializer_range) matrices, zero biases,
// unit LayerNorm gains.
inline TaggerWeights random_weights(const EncoderConfig& cfg, Rng& rng) {
  cfg.check();
  TaggerWeights w = zero_weights(cfg);
  zip_tensors(
      [&](const std::string& name, auto& t) {
        if (name.find("LayerNorm.weight") != std::string::npos)
          t.setOnes();
        else if (name.find("classifier") == std::string::npos && name.ends_with(".weight"))
          detail::fill_normal(t, rng, cfg.initializer_range);
      },
      w);
  init_head(w, cfg, rng);
  return w;
}

inline std::size_t parameter_count(const TaggerWeights& w) {
  std::size_t n = 0;
  zip_tensors([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); }, w);
  return n;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

struct LayerNormCache {
  Matrix xhat;
  ColVec inv_std;
};

inline Matrix layer_norm(const Matrix& x, const RowVec& g, const RowVec& b, double eps, LayerNormCache* cache) {
  ColVec mean = x.rowwise().mean();
  Matrix xhat = x.colwise() - mean;
  ColVec var = xhat.array().square().rowwise().mean();
  ColVec inv_std = (var.array() + static_cast<float>(eps)).rsqrt();
  xhat = xhat.array().colwise() * inv_std.array();
  Matrix y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const RowVec& g, const LayerNormCache& c, RowVec& dg, RowVec& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const float d = static_cast<float>(dy.cols());
  Matrix dxhat = dy.array().rowwise() * g.array();
  ColVec s1 = dxhat.rowwise().sum();
  ColVec s2 = (dxhat.array() * c.xhat.array()).rowwise().sum();
  Matrix dx = (dxhat.array() * d - c.xhat.array().colwise() * s2.array()).colwise() - s1.array();
  return dx.array().colwise() * (c.inv_std.array() / d);
}

inline float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f)); }

inline float gelu_grad(float x) {
  const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752f));
  const float pdf = 0.39894228040143268f * std::exp(-0.5f * x * x);
  return cdf + x * pdf;
}

inline void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

// Inverted dropout mask; empty when inactive.
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng) {
  if (!rng || p <= 0.0) return {};
  Matrix m(rows, cols);
  const float keep = static_cast<float>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < p ? 0.0f : keep;
  return m;
}

inline void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size()) x.array() *= mask.array();
}

struct LayerCache {
  Matrix x_in, q, k, v, ctx, ff_pre, ff_act, x1;
  std::vector<Matrix> probs, probs_dropped, attn_masks;
  Matrix attn_mask_out, ff_mask_out;
  LayerNormCache ln1, ln2;
};

}  // namespace detail

struct ForwardCache {
  std::vector<PieceId> ids;
  detail::LayerNormCache emb_ln;
  Matrix emb_mask;
  std::vector<detail::LayerCache> layers;
  Matrix hidden;    // final encoder layer output, one row per piece
  Matrix head_in;   // hidden after classifier dropout
  Matrix head_mask;
  Matrix logits;
};

// Runs the encoder and head over one piece sequence. A non-null `dropout_rng`
// turns dropout on; `keep_cache` (implied by dropout) keeps what backward needs.
inline ForwardCache forward(const TaggerWeights& w, const EncoderConfig& cfg, std::span<const PieceId> ids,
                            Rng* dropout_rng = nullptr, bool keep_cache = false) {
  const auto T = static_cast<Eigen::Index>(ids.size());
  if (ids.empty()) throw DomainError("empty piece sequence");
  if (ids.size() > cfg.max_positions)
    throw DomainError("piece sequence of length " + std::to_string(ids.size()) + " exceeds max_positions " +
                      std::to_string(cfg.max_positions));
  const auto d = static_cast<Eigen::Index>(cfg.hidden);
  const auto H = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool train = keep_cache || dropout_rng != nullptr;

  ForwardCache c;
  c.ids.assign(ids.begin(), ids.end());
  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) throw DomainError("piece id out of vocabulary");
    x.row(t) = w.word.row(id) + w.position.row(t) + w.token_type.row(0);
  }
  x = detail::layer_norm(x, w.emb_ln_g, w.emb_ln_b, cfg.layer_norm_eps, train ? &c.emb_ln : nullptr);
  c.emb_mask = detail::dropout_mask(T, d, cfg.hidden_dropout, dropout_rng);
  detail::apply_mask(x, c.emb_mask);

  c.layers.resize(train ? cfg.layers : 0);
  for (std::size_t li = 0; li < cfg.layers; ++li) {
    const auto& L = w.layers[li];
    detail::LayerCache tmp;
    detail::LayerCache& lc = train ? c.layers[li] : tmp;
    lc.x_in = x;
    lc.q = (x * L.q_w).rowwise() + L.q_b;
    lc.k = (x * L.k_w).rowwise() + L.k_b;
    lc.v = (x * L.v_w).rowwise() + L.v_b;
    lc.ctx = Matrix(T, d);
    lc.probs.resize(static_cast<std::size_t>(H));
    lc.probs_dropped.resize(static_cast<std::size_t>(H));
    lc.attn_masks.resize(static_cast<std::size_t>(H));
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      Matrix s = (lc.q.middleCols(h * dh, dh) * lc.k.middleCols(h * dh, dh).transpose()) * scale;
      detail::softmax_rows(s);
      lc.probs[hs] = s;
      lc.attn_masks[hs] = detail::dropout_mask(T, T, cfg.attention_dropout, dropout_rng);
      detail::apply_mask(s, lc.attn_masks[hs]);
      lc.ctx.middleCols(h * dh, dh) = s * lc.v.middleCols(h * dh, dh);
      lc.probs_dropped[hs] = std::move(s);
    }
    Matrix attn = (lc.ctx * L.o_w).rowwise() + L.o_b;
    lc.attn_mask_out = detail::dropout_mask(T, d, cfg.hidden_dropout, dropout_rng);
    detail::apply_mask(attn, lc.attn_mask_out);
    lc.x1 = detail::layer_norm(x + attn, L.ln1_g, L.ln1_b, cfg.layer_norm_eps, train ? &lc.ln1 : nullptr);
    lc.ff_pre = (lc.x1 * L.ff1_w).rowwise() + L.ff1_b;
    lc.ff_act = lc.ff_pre.unaryExpr([](float v) { return detail::gelu(v); });
    Matrix ff = (lc.ff_act * L.ff2_w).rowwise() + L.ff2_b;
    lc.ff_mask_out = detail::dropout_mask(T, d, cfg.hidden_dropout, dropout_rng);
    detail::apply_mask(ff, lc.ff_mask_out);
    x = detail::layer_norm(lc.x1 + ff, L.ln2_g, L.ln2_b, cfg.layer_norm_eps, train ? &lc.ln2 : nullptr);
  }
  c.hidden = x;
  c.head_mask = detail::dropout_mask(T, d, cfg.hidden_dropout, dropout_rng);
  c.head_in = x;
  detail::apply_mask(c.head_in, c.head_mask);
  c.logits = (c.head_in * w.head_w).rowwise() + w.head_b;
  return c;
}

// Accumulates parameter gradients of a scalar loss into `g`, given dLoss/dlogits.
// `c` must come from a forward call that kept its cache.
inline void backward(const TaggerWeights& w, const EncoderConfig& cfg, const ForwardCache& c, const Matrix& dlogits,
                     TaggerWeights& g) {
  const auto T = static_cast<Eigen::Index>(c.ids.size());
  const auto H = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  if (c.layers.size() != cfg.layers) throw DomainError("backward needs a training-mode forward cache");

  g.head_w.noalias() += c.head_in.transpose() * dlogits;
  g.head_b += dlogits.colwise().sum();
  Matrix dx = dlogits * w.head_w.transpose();
  detail::apply_mask(dx, c.head_mask);

  for (std::size_t li = cfg.layers; li-- > 0;) {
    const auto& L = w.layers[li];
    auto& G = g.layers[li];
    const auto& lc = c.layers[li];

    Matrix ds2 = detail::layer_norm_backward(dx, L.ln2_g, lc.ln2, G.ln2_g, G.ln2_b);
    Matrix dff = ds2;
    detail::apply_mask(dff, lc.ff_mask_out);
    G.ff2_w.noalias() += lc.ff_act.transpose() * dff;
    G.ff2_b += dff.colwise().sum();
    Matrix dpre = (dff * L.ff2_w.transpose()).array() * lc.ff_pre.unaryExpr([](float v) { return detail::gelu_grad(v); }).array();
    G.ff1_w.noalias() += lc.x1.transpose() * dpre;
    G.ff1_b += dpre.colwise().sum();
    Matrix dx1 = ds2 + dpre * L.ff1_w.transpose();

    Matrix ds1 = detail::layer_norm_backward(dx1, L.ln1_g, lc.ln1, G.ln1_g, G.ln1_b);
    Matrix dattn = ds1;
    detail::apply_mask(dattn, lc.attn_mask_out);
    G.o_w.noalias() += lc.ctx.transpose() * dattn;
    G.o_b += dattn.colwise().sum();
    Matrix dctx = dattn * L.o_w.transpose();

    Matrix dq(T, dctx.cols()), dk(T, dctx.cols()), dv(T, dctx.cols());
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      auto dctx_h = dctx.middleCols(h * dh, dh);
      Matrix dprobs = dctx_h * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = lc.probs_dropped[hs].transpose() * dctx_h;
      detail::apply_mask(dprobs, lc.attn_masks[hs]);
      const Matrix& p = lc.probs[hs];
      ColVec rowdot = (dprobs.array() * p.array()).rowwise().sum();
      Matrix dscores = (p.array() * (dprobs.array().colwise() - rowdot.array())) * scale;
      dq.middleCols(h * dh, dh) = dscores * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = dscores.transpose() * lc.q.middleCols(h * dh, dh);
    }
    G.q_w.noalias() += lc.x_in.transpose() * dq;
    G.q_b += dq.colwise().sum();
    G.k_w.noalias() += lc.x_in.transpose() * dk;
    G.k_b += dk.colwise().sum();
    G.v_w.noalias() += lc.x_in.transpose() * dv;
    G.v_b += dv.colwise().sum();
    dx = ds1 + dq * L.q_w.transpose() + dk * L.k_w.transpose() + dv * L.v_w.transpose();
  }

  detail::apply_mask(dx, c.emb_mask);
  Matrix demb = detail::layer_norm_backward(dx, w.emb_ln_g, c.emb_ln, g.emb_ln_g, g.emb_ln_b);
  for (Eigen::Index t = 0; t < T; ++t) {
    g.word.row(c.ids[static_cast<std::size_t>(t)]) += demb.row(t);
    g.position.row(t) += demb.row(t);
    g.token_type.row(0) += demb.row(t);
  }
}

// ---------------------------------------------------------------------------
// Weight file
//
//   bytes 0..7  magic "FVWTS01\n"
//   u32         tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//               rows*cols f32 in row-major order
//   (all integers and floats little-endian)
//
// Tensor names follow the usual BERT checkpoint naming, but dense weights are
// stored [in, out], the transpose of a PyTorch Linear weight.
// ---------------------------------------------------------------------------

inline constexpr char kWeightsMagic[8] = {'F', 'V', 'W', 'T', 'S', '0', '1', '\n'};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    int c = is.get();
    if (c == EOF) throw IoError("truncated weight file");
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void save_weights(const std::filesystem::path& path, const TaggerWeights& w) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kWeightsMagic, sizeof kWeightsMagic);
  std::uint32_t count = 0;
  zip_tensors([&](const std::string&, const auto&) { ++count; }, w);
  detail::write_u32(os, count);
  zip_tensors(
      [&](const std::string& name, const auto& t) {
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.rows()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.cols()));
        for (Eigen::Index i = 0; i < t.size(); ++i) {
          std::uint32_t bits;
          float f = t.data()[i];
          std::memcpy(&bits, &f, sizeof bits);
          detail::write_u32(os, bits);
        }
      },
      w);
  if (!os) throw IoError("short write to " + path.string());
}

// Reads every tensor in the file by name.
inline std::map<std::string, Matrix> read_weight_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (is.gcount() != sizeof magic || std::memcmp(magic, kWeightsMagic, sizeof magic) != 0)
    throw IoError(path.string() + " is not a weight file");
  std::map<std::string, Matrix> out;
  const auto count = detail::read_u32(is);
  for (std::uint32_t n = 0; n < count; ++n) {
    std::string name(detail::read_u32(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = detail::read_u32(is), cols = detail::read_u32(is);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const auto bits = detail::read_u32(is);
      std::memcpy(m.data() + i, &bits, sizeof bits);
    }
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

// Loads tensors into `w` (whose shapes are already set). Missing tensors are
// reported via the return value; shape mismatches throw.
inline std::vector<std::string> assign_weights(TaggerWeights& w, const std::map<std::string, Matrix>& tensors) {
  std::vector<std::string> missing;
  zip_tensors(
      [&](const std::string& name, auto& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
          missing.push_back(name);
          return;
        }
        if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
          throw IoError("tensor " + name + " has shape " + std::to_string(it->second.rows()) + "x" +
                        std::to_string(it->second.cols()) + ", expected " + std::to_string(t.rows()) + "x" +
                        std::to_string(t.cols()));
        t = it->second;
      },
      w);
  return missing;
}

}  // namespace fewvuln
