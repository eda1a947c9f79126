// SPDX-License-Identifier: Apache-2.0

#include "moekit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace moekit {

const char* to_string(MoePlacement p) {
  switch (p) {
    case MoePlacement::kInterval: return "interval";
    case MoePlacement::kFirstHalf: return "first_half";
    case MoePlacement::kSecondHalf: return "second_half";
    case MoePlacement::kAll: return "all";
    case MoePlacement::kDense: return "dense";
  }
  return "?";
}

MoePlacement placement_from_string(const std::string& s) {
  if (s == "interval") return MoePlacement::kInterval;
  if (s == "first_half") return MoePlacement::kFirstHalf;
  if (s == "second_half") return MoePlacement::kSecondHalf;
  if (s == "all") return MoePlacement::kAll;
  if (s == "dense") return MoePlacement::kDense;
  throw ConfigError("unknown placement '" + s + "'");
}

std::vector<bool> ModelConfig::moe_block_mask() const {
  std::vector<bool> mask(layers, false);
  switch (placement) {
    case MoePlacement::kInterval:
      // every second block, starting from the second
      for (std::size_t i = 1; i < layers; i += 2) mask[i] = true;
      break;
    case MoePlacement::kFirstHalf:
      for (std::size_t i = 0; i < layers / 2; ++i) mask[i] = true;
      break;
    case MoePlacement::kSecondHalf:
      for (std::size_t i = layers / 2; i < layers; ++i) mask[i] = true;
      break;
    case MoePlacement::kAll:
      mask.assign(layers, true);
      break;
    case MoePlacement::kDense:
      break;
  }
  return mask;
}

void ModelConfig::validate() const {
  if (embedding_size < 2) throw ConfigError("config: embedding_size must be >= 2");
  if (width < 2) throw ConfigError("config: width must be >= 2");
  if (layers < 1) throw ConfigError("config: layers must be >= 1");
  if (ffn_size < 1) throw ConfigError("config: ffn_size must be >= 1");
  if (ffn_factor != 2 && ffn_factor != 3) throw ConfigError("config: ffn_factor must be 2 or 3");
  if (heads < 1 || width % heads != 0) throw ConfigError("config: heads must divide width");
  if (experts < 1) throw ConfigError("config: experts must be >= 1");
  if (top_k < 1 || top_k > experts) throw ConfigError("config: need 1 <= top_k <= experts");
  if (!(capacity_factor > 0.0)) throw ConfigError("config: capacity_factor must be positive");
  if (alpha < 0.0) throw ConfigError("config: alpha must be >= 0");
  if (pseudo_image_tokens < 1) throw ConfigError("config: pseudo_image_tokens must be >= 1");
  if (image_feature_dim < 1) throw ConfigError("config: image_feature_dim must be >= 1");
  const auto mask = moe_block_mask();
  const auto expected = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (moe_layers != expected) {
    throw ConfigError("config: moe_layers (" + std::to_string(moe_layers) +
                      ") is inconsistent with placement '" + to_string(placement) +
                      "' over " + std::to_string(layers) + " layers (expected " +
                      std::to_string(expected) + ")");
  }
}

ParamCount count_parameters(const ModelConfig& c) {
  c.validate();
  const auto w = static_cast<std::uint64_t>(c.width);
  const auto emb = static_cast<std::uint64_t>(c.embedding_size);
  const auto layers = static_cast<std::uint64_t>(c.layers);
  const auto ffn_pkg = w * c.ffn_size * c.ffn_factor + 2 * w;
  const std::uint64_t attn = c.kv_width ? 2 * w * w + 2 * w * c.kv_width : 4 * w * w;
  const std::uint64_t dense = emb * w + layers * (attn + ffn_pkg) + w + w * emb;
  const auto ml = static_cast<std::uint64_t>(c.moe_layers);
  ParamCount out;
  out.total = dense + ml * (c.experts - 1) * ffn_pkg + ml * w * c.experts;
  out.activated = dense + ml * (c.top_k - 1) * ffn_pkg + ml * w * c.experts;
  return out;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

Tensor copy_tensor(const Tensor& t) {
  return Tensor::from_values(t.shape(), {t.values().begin(), t.values().end()},
                             t.requires_grad());
}

}  // namespace

ToyModel ToyModel::build_impl(const ModelConfig& config, std::uint64_t seed, bool force_dense) {
  config.validate();
  ToyModel m;
  m.config = config;
  std::mt19937_64 rng(seed);
  const std::size_t w = config.width;
  const std::size_t c = config.image_feature_dim;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(w));

  m.proj_w1 = normal_tensor({c, w}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  m.proj_b1 = Tensor::zeros({w}, true);
  m.proj_w2 = normal_tensor({w, w}, w_std, rng);
  m.proj_b2 = Tensor::zeros({w}, true);
  m.pos_embedding = normal_tensor({config.max_seq_len, w}, 0.02, rng);
  m.tok_embedding = normal_tensor({config.embedding_size, w}, 0.02, rng);

  const auto mask = config.moe_block_mask();
  m.blocks.reserve(config.layers);
  for (std::size_t i = 0; i < config.layers; ++i) {
    Block b;
    b.wq = normal_tensor({w, w}, w_std, rng);
    b.wk = normal_tensor({w, w}, w_std, rng);
    b.wv = normal_tensor({w, w}, w_std, rng);
    b.wo = normal_tensor({w, w}, w_std, rng);
    Ffn ffn = Ffn::init(w, config.ffn_size, config.ffn_factor, rng);
    if (!force_dense && mask[i]) {
      b.ensemble = init_from_ffn(ffn, config.experts, config.top_k, config.capacity_factor,
                                 config.router_init, rng, config.renormalize_gates);
    } else {
      b.ffn = std::move(ffn);
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_gain = Tensor::full({w}, 1.0, true);
  m.head = normal_tensor({w, config.embedding_size}, w_std, rng);
  m.ln_ones_ = Tensor::full({w}, 1.0, false);
  m.ln_zeros_ = Tensor::zeros({w}, false);
  return m;
}

ToyModel ToyModel::build(const ModelConfig& config, std::uint64_t seed) {
  return build_impl(config, seed, /*force_dense=*/false);
}

ToyModel ToyModel::build_dense(const ModelConfig& config, std::uint64_t seed) {
  return build_impl(config, seed, /*force_dense=*/true);
}

ForwardOutput ToyModel::forward(std::span<const ModelInput> batch, RoutingTrace* trace) const {
  if (batch.empty()) throw ShapeError("forward: empty batch");
  const std::size_t p = config.pseudo_image_tokens;
  const std::size_t w = config.width;
  const std::size_t heads = config.heads;
  const std::size_t dh = w / heads;

  ForwardOutput out;
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  std::size_t offset = 0;
  for (const ModelInput& sample : batch) {
    if (sample.tokens.empty()) throw ShapeError("forward: sample with sequence length 0");
    if (sample.image_features.shape() !=
        Shape{p, config.image_feature_dim})
      throw ShapeError("forward: image features must be [pseudo_image_tokens x image_feature_dim]");
    const std::size_t s = p + sample.tokens.size();
    if (s > config.max_seq_len) throw ShapeError("forward: sequence exceeds max_seq_len");
    Tensor h = gelu(add_rowwise(matmul(sample.image_features, proj_w1), proj_b1));
    Tensor v = add_rowwise(matmul(h, proj_w2), proj_b2);
    std::vector<std::size_t> ids;
    ids.reserve(sample.tokens.size());
    for (int t : sample.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config.embedding_size)
        throw ShapeError("forward: token id out of vocabulary");
      ids.push_back(static_cast<std::size_t>(t));
    }
    rows.push_back(concat_rows({v, gather_rows(tok_embedding, ids)}));
    out.sample_offset.push_back(offset);
    for (std::size_t j = 0; j < s; ++j) {
      out.modality.push_back(j < p ? Modality::kImage : Modality::kText);
      out.position.push_back(j);
    }
    offset += s;
  }
  out.sample_offset.push_back(offset);

  Tensor x = rows.size() == 1 ? rows.front() : concat_rows(rows);
  x = add(x, gather_rows(pos_embedding, out.position));

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::size_t moe_ordinal = 0;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const Block& block = blocks[bi];
    Tensor h = layer_norm(x, ln_ones_, ln_zeros_);
    Tensor q = matmul(h, block.wq);
    Tensor k = matmul(h, block.wk);
    Tensor v = matmul(h, block.wv);
    std::vector<Tensor> ctx_rows;
    ctx_rows.reserve(batch.size());
    for (std::size_t si = 0; si + 1 < out.sample_offset.size(); ++si) {
      std::vector<std::size_t> idx(out.sample_offset[si + 1] - out.sample_offset[si]);
      std::iota(idx.begin(), idx.end(), out.sample_offset[si]);
      Tensor qs = gather_rows(q, idx);
      Tensor ks = gather_rows(k, idx);
      Tensor vs = gather_rows(v, idx);
      std::vector<Tensor> head_ctx;
      head_ctx.reserve(heads);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        Tensor qh = slice_cols(qs, hh * dh, (hh + 1) * dh);
        Tensor kh = slice_cols(ks, hh * dh, (hh + 1) * dh);
        Tensor vh = slice_cols(vs, hh * dh, (hh + 1) * dh);
        Tensor att = softmax_causal_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
        head_ctx.push_back(matmul(att, vh));
      }
      ctx_rows.push_back(heads == 1 ? head_ctx.front() : concat_cols(head_ctx));
    }
    Tensor ctx = ctx_rows.size() == 1 ? ctx_rows.front() : concat_rows(ctx_rows);
    x = add(x, matmul(ctx, block.wo));

    Tensor h2 = layer_norm(x, ln_ones_, ln_zeros_);
    if (block.is_moe()) {
      TokenBatch tb;
      tb.hidden = h2;
      tb.modality = out.modality;
      tb.position = out.position;
      LayerTrace lt;
      lt.layer_index = moe_ordinal;
      MoeForwardResult res =
          moe_forward(tb, *block.ensemble, trace ? &lt : nullptr, &out.moe_stats);
      if (trace) trace->layers.push_back(std::move(lt));
      out.gate_probs.push_back(res.gate_probs);
      out.decisions.push_back(std::move(res.decisions));
      x = add(x, res.output);
      ++moe_ordinal;
    } else {
      x = add(x, block.ffn->forward(h2));
    }
  }
  Tensor y = layer_norm(x, final_gain, ln_zeros_);
  out.logits = matmul(y, head);
  return out;
}

std::vector<NamedParam> ToyModel::parameters() const {
  std::vector<NamedParam> ps;
  auto push = [&ps](std::string name, ParamGroup g, const Tensor& t) {
    ps.push_back({std::move(name), g, t});
  };
  push("proj.w1", ParamGroup::kProjector, proj_w1);
  push("proj.b1", ParamGroup::kProjector, proj_b1);
  push("proj.w2", ParamGroup::kProjector, proj_w2);
  push("proj.b2", ParamGroup::kProjector, proj_b2);
  push("emb.pos", ParamGroup::kPositional, pos_embedding);
  push("emb.tok", ParamGroup::kEmbedding, tok_embedding);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = "block" + std::to_string(i) + ".";
    push(base + "attn.wq", ParamGroup::kAttention, blocks[i].wq);
    push(base + "attn.wk", ParamGroup::kAttention, blocks[i].wk);
    push(base + "attn.wv", ParamGroup::kAttention, blocks[i].wv);
    push(base + "attn.wo", ParamGroup::kAttention, blocks[i].wo);
    auto push_ffn = [&](const std::string& prefix, const Ffn& f, ParamGroup g) {
      push(prefix + "in_bias", g, f.in_bias);
      push(prefix + "w1", g, f.w1);
      if (f.factor == 3) push(prefix + "w3", g, f.w3);
      push(prefix + "w2", g, f.w2);
      push(prefix + "out_bias", g, f.out_bias);
    };
    if (blocks[i].ffn) {
      push_ffn(base + "ffn.", *blocks[i].ffn, ParamGroup::kFfn);
    } else {
      const ExpertEnsemble& ens = *blocks[i].ensemble;
      for (std::size_t e = 0; e < ens.experts.size(); ++e)
        push_ffn(base + "expert" + std::to_string(e) + ".", ens.experts[e], ParamGroup::kExpert);
      push(base + "router", ParamGroup::kRouter, ens.router.weight);
    }
  }
  push("final.gain", ParamGroup::kNorm, final_gain);
  push("head.w", ParamGroup::kHead, head);
  return ps;
}

std::uint64_t ToyModel::backbone_parameter_count() const {
  std::uint64_t n = 0;
  for (const NamedParam& p : parameters()) {
    if (p.group == ParamGroup::kProjector || p.group == ParamGroup::kPositional) continue;
    n += p.tensor.size();
  }
  return n;
}

ToyModel ToyModel::clone() const {
  ToyModel m;
  m.config = config;
  m.proj_w1 = copy_tensor(proj_w1);
  m.proj_b1 = copy_tensor(proj_b1);
  m.proj_w2 = copy_tensor(proj_w2);
  m.proj_b2 = copy_tensor(proj_b2);
  m.pos_embedding = copy_tensor(pos_embedding);
  m.tok_embedding = copy_tensor(tok_embedding);
  m.blocks.reserve(blocks.size());
  for (const Block& b : blocks) {
    Block nb;
    nb.wq = copy_tensor(b.wq);
    nb.wk = copy_tensor(b.wk);
    nb.wv = copy_tensor(b.wv);
    nb.wo = copy_tensor(b.wo);
    if (b.ffn) nb.ffn = b.ffn->clone();
    if (b.ensemble) {
      ExpertEnsemble ens;
      for (const Ffn& e : b.ensemble->experts) ens.experts.push_back(e.clone());
      ens.router = b.ensemble->router;
      ens.router.weight = copy_tensor(b.ensemble->router.weight);
      nb.ensemble = std::move(ens);
    }
    m.blocks.push_back(std::move(nb));
  }
  m.final_gain = copy_tensor(final_gain);
  m.head = copy_tensor(head);
  m.ln_ones_ = copy_tensor(ln_ones_);
  m.ln_zeros_ = copy_tensor(ln_zeros_);
  return m;
}

// --- checkpoint io ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'O', 'E', 'L'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("checkpoint: truncated file");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw ConfigError("checkpoint: truncated file");
  return s;
}

void write_config(std::ostream& os, const ModelConfig& c) {
  write_string(os, c.name);
  for (std::uint64_t v : {c.embedding_size, c.width, c.layers, c.ffn_size, c.ffn_factor, c.heads,
                          c.experts, c.top_k, c.moe_layers, c.pseudo_image_tokens,
                          c.image_feature_dim, c.max_seq_len, c.kv_width})
    write_pod<std::uint64_t>(os, v);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.placement));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.router_init));
  write_pod<std::uint32_t>(os, c.renormalize_gates ? 1u : 0u);
  write_pod<double>(os, c.capacity_factor);
  write_pod<double>(os, c.alpha);
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.name = read_string(is);
  c.embedding_size = read_pod<std::uint64_t>(is);
  c.width = read_pod<std::uint64_t>(is);
  c.layers = read_pod<std::uint64_t>(is);
  c.ffn_size = read_pod<std::uint64_t>(is);
  c.ffn_factor = read_pod<std::uint64_t>(is);
  c.heads = read_pod<std::uint64_t>(is);
  c.experts = read_pod<std::uint64_t>(is);
  c.top_k = read_pod<std::uint64_t>(is);
  c.moe_layers = read_pod<std::uint64_t>(is);
  c.pseudo_image_tokens = read_pod<std::uint64_t>(is);
  c.image_feature_dim = read_pod<std::uint64_t>(is);
  c.max_seq_len = read_pod<std::uint64_t>(is);
  c.kv_width = read_pod<std::uint64_t>(is);
  c.placement = static_cast<MoePlacement>(read_pod<std::uint32_t>(is));
  c.router_init = static_cast<RouterInit>(read_pod<std::uint32_t>(is));
  c.renormalize_gates = read_pod<std::uint32_t>(is) != 0;
  c.capacity_factor = read_pod<double>(is);
  c.alpha = read_pod<double>(is);
  return c;
}

}  // namespace

void save_model(const ToyModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kVersion);
  write_config(os, model.config);
  // structure flag: dense-stage checkpoints carry plain FFN blocks even when
  // the configured placement is sparse
  const bool sparse = std::any_of(model.blocks.begin(), model.blocks.end(),
                                  [](const Block& b) { return b.is_moe(); });
  write_pod<std::uint32_t>(os, sparse ? 1u : 0u);
  const auto params = model.parameters();
  write_pod<std::uint64_t>(os, params.size());
  for (const NamedParam& p : params) {
    write_string(os, p.name);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (std::size_t d : p.tensor.shape()) write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor.values().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw ConfigError("checkpoint: write failed for '" + path + "'");
}

ToyModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ConfigError("checkpoint: bad magic in '" + path + "'");
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) throw ConfigError("checkpoint: unsupported version");
  const ModelConfig config = read_config(is);
  const bool sparse = read_pod<std::uint32_t>(is) != 0;
  ToyModel model = sparse ? ToyModel::build(config, 0) : ToyModel::build_dense(config, 0);
  auto params = model.parameters();
  const auto n = read_pod<std::uint64_t>(is);
  if (n != params.size()) throw ConfigError("checkpoint: parameter count mismatch");
  for (NamedParam& p : params) {
    const std::string name = read_string(is);
    if (name != p.name) throw ConfigError("checkpoint: unexpected parameter '" + name + "'");
    const auto ndim = read_pod<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = read_pod<std::uint64_t>(is);
    if (shape != p.tensor.shape()) throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    is.read(reinterpret_cast<char*>(p.tensor.values_mut().data()),
            static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
    if (!is) throw ConfigError("checkpoint: truncated parameter data");
  }
  return model;
}

}  // namespace moekit
