#include "modrank/encoder.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

void EncoderConfig::validate() const {
  if (num_layers == 0 || hidden == 0 || heads == 0 || ffn_dim == 0) {
    throw ConfigError("encoder sizes must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (max_seq_len < 8) throw ConfigError("max_seq_len must be at least 8");
  if (vocab_size <= special::kCount) throw ConfigError("vocabulary holds only special tokens");
}

// ParamStore ------------------------------------------------------------------

void ParamStore::add(std::string name, Tensor tensor) {
  if (index_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

bool ParamStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Tensor& ParamStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].second;
}

const Tensor& ParamStore::at(std::string_view name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [_, t] : entries_) out.push_back(t);
  return out;
}

std::size_t ParamStore::num_coordinates() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

std::size_t ParamStore::offset(std::string_view name) const {
  std::size_t n = 0;
  for (const auto& [key, t] : entries_) {
    if (key == name) return n;
    n += t.numel();
  }
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> theta;
  theta.reserve(num_coordinates());
  for (const auto& [_, t] : entries_) {
    const auto d = t.data();
    theta.insert(theta.end(), d.begin(), d.end());
  }
  return theta;
}

void ParamStore::unflatten(std::span<const double> theta) {
  if (theta.size() != num_coordinates()) {
    throw DimensionError("unflatten: θ has " + std::to_string(theta.size()) +
                         " coordinates, store has " + std::to_string(num_coordinates()));
  }
  std::size_t pos = 0;
  for (auto& [_, t] : entries_) {
    auto d = t.mutable_data();
    std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(pos), d.size(), d.begin());
    pos += d.size();
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.clone());
  return out;
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, t] : entries_) t.set_requires_grad(on);
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

// Initialisation ----------------------------------------------------------------

ParamStore init_encoder_params(const EncoderConfig& config, std::uint64_t seed,
                               const InitOptions& options) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = normal(rng) * std;
    return t;
  };
  const auto h = config.hidden, f = config.ffn_dim, V = config.vocab_size;
  const double ws = options.weight_std;

  ParamStore p;
  p.add("embeddings.word", randn({V, h}, options.embedding_std));
  p.add("embeddings.position", randn({config.max_seq_len, h}, options.embedding_std));
  p.add("embeddings.segment", randn({2, h}, options.embedding_std));
  p.add("embeddings.ln.gain", Tensor::full({h}, 1.0));
  p.add("embeddings.ln.bias", Tensor({h}));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto pre = "layer." + std::to_string(l) + ".";
    for (const char* proj : {"query", "key", "value", "output"}) {
      p.add(pre + "attn." + proj + ".weight", randn({h, h}, ws));
      p.add(pre + "attn." + proj + ".bias", Tensor({h}));
    }
    p.add(pre + "attn.ln.gain", Tensor::full({h}, 1.0));
    p.add(pre + "attn.ln.bias", Tensor({h}));
    p.add(pre + "ffn.in.weight", randn({h, f}, ws));
    p.add(pre + "ffn.in.bias", Tensor({f}));
    p.add(pre + "ffn.out.weight", randn({f, h}, ws));
    p.add(pre + "ffn.out.bias", Tensor({h}));
    p.add(pre + "ffn.ln.gain", Tensor::full({h}, 1.0));
    p.add(pre + "ffn.ln.bias", Tensor({h}));
  }
  p.add("mlm.transform.weight", randn({h, h}, ws));
  p.add("mlm.transform.bias", Tensor({h}));
  p.add("mlm.ln.gain", Tensor::full({h}, 1.0));
  p.add("mlm.ln.bias", Tensor({h}));
  p.add("mlm.decoder.bias", Tensor({V}));
  p.add("score.weight", randn({h, 1}, ws));
  p.add("score.bias", Tensor({1}));
  return p;
}

// Inputs --------------------------------------------------------------------------

TokenSequence make_text_input(std::span<const int> tokens, std::size_t max_len) {
  TokenSequence seq;
  std::size_t keep = tokens.size();
  if (keep + 2 > max_len) {
    keep = max_len - 2;
    spdlog::warn("text of {} tokens truncated to {}", tokens.size(), keep);
  }
  seq.ids.push_back(special::kCls);
  seq.ids.insert(seq.ids.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
  seq.ids.push_back(special::kSep);
  seq.segments.assign(seq.ids.size(), 0);
  return seq;
}

TokenSequence make_pair_input(std::span<const int> query, std::span<const int> doc,
                              std::size_t max_len) {
  std::size_t q = query.size(), d = doc.size();
  if (q + d + 3 > max_len) {
    const std::size_t budget = max_len - 3;
    d = budget > q ? std::min(d, budget - q) : 0;
    q = std::min(q, budget - d);
    spdlog::warn("pair input truncated: query {}→{}, document {}→{} tokens", query.size(), q,
                 doc.size(), d);
  }
  TokenSequence seq;
  seq.ids.reserve(q + d + 3);
  seq.ids.push_back(special::kCls);
  seq.ids.insert(seq.ids.end(), query.begin(), query.begin() + static_cast<std::ptrdiff_t>(q));
  seq.ids.push_back(special::kSep);
  seq.segments.assign(seq.ids.size(), 0);
  seq.ids.insert(seq.ids.end(), doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(d));
  seq.ids.push_back(special::kSep);
  seq.segments.resize(seq.ids.size(), 1);
  return seq;
}

TokenBatch TokenBatch::pack(std::span<const TokenSequence> seqs) {
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.seq_len = std::max(b.seq_len, s.size());
  const auto rows = b.rows();
  b.ids.assign(rows, special::kPad);
  b.segments.assign(rows, 0);
  b.positions.assign(rows, 0);
  b.valid.assign(rows, 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.segments.size() != s.ids.size()) throw ContractError("token sequence segment length mismatch");
    for (std::size_t t = 0; t < s.size(); ++t) {
      const auto r = i * b.seq_len + t;
      b.ids[r] = s.ids[t];
      b.segments[r] = s.segments[t];
      b.positions[r] = static_cast<int>(t);
      b.valid[r] = 1;
    }
  }
  return b;
}

ops::BatchLayout TokenBatch::layout() const { return {batch, seq_len, valid}; }

// Forward passes ------------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

void check_batch(const EncoderConfig& cfg, const TokenBatch& batch) {
  if (batch.seq_len > cfg.max_seq_len) {
    throw ContractError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  for (int id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

Tensor layer_forward(const EncoderConfig& cfg, const ParamStore& p, std::size_t l, const Tensor& x,
                     const ops::BatchLayout& layout, const TokenBatch& batch,
                     const EncoderPlugin* plugin) {
  using namespace ops;
  const auto pre = "layer." + std::to_string(l) + ".";
  auto w = [&](const char* name) -> const Tensor& { return p.at(pre + name); };

  Tensor q = linear(x, w("attn.query.weight"), w("attn.query.bias"));
  Tensor k = linear(x, w("attn.key.weight"), w("attn.key.bias"));
  Tensor v = linear(x, w("attn.value.weight"), w("attn.value.bias"));
  Tensor ctx = attention(q, k, v, layout, cfg.heads);
  Tensor attn_out = linear(ctx, w("attn.output.weight"), w("attn.output.bias"));
  Tensor a = layer_norm(add(x, attn_out), w("attn.ln.gain"), w("attn.ln.bias"), kLayerNormEps);

  Tensor ffn = linear(gelu(linear(a, w("ffn.in.weight"), w("ffn.in.bias"))), w("ffn.out.weight"),
                      w("ffn.out.bias"));
  Tensor hidden = layer_norm(add(a, ffn), w("ffn.ln.gain"), w("ffn.ln.bias"), kLayerNormEps);
  if (plugin == nullptr || !plugin->active_at(l)) return hidden;

  Tensor adapted = plugin->after_ffn(l, hidden, ffn, batch);
  return layer_norm(add(adapted, a), w("ffn.ln.gain"), w("ffn.ln.bias"), kLayerNormEps);
}

}  // namespace

Tensor encode(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
              const EncoderPlugin* plugin) {
  using namespace ops;
  const auto& cfg = backbone.config;
  check_batch(cfg, batch);
  Tensor x = add(add(embedding(params.at("embeddings.word"), batch.ids),
                     embedding(params.at("embeddings.position"), batch.positions)),
                 embedding(params.at("embeddings.segment"), batch.segments));
  x = layer_norm(x, params.at("embeddings.ln.gain"), params.at("embeddings.ln.bias"), kLayerNormEps);
  if (plugin != nullptr) x = plugin->on_embeddings(x, batch);
  const auto layout = batch.layout();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    x = layer_forward(cfg, params, l, x, layout, batch, plugin);
  }
  return x;
}

Tensor mlm_logits(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
                  const EncoderPlugin* plugin, std::span<const std::size_t> rows) {
  using namespace ops;
  Tensor hidden = encode(backbone, params, batch, plugin);
  if (!rows.empty()) hidden = gather_rows(hidden, rows);
  Tensor t = gelu(linear(hidden, params.at("mlm.transform.weight"), params.at("mlm.transform.bias")));
  t = layer_norm(t, params.at("mlm.ln.gain"), params.at("mlm.ln.bias"), kLayerNormEps);
  if (plugin != nullptr) t = plugin->before_output(t, batch);
  return add_row_bias(matmul_nt(t, params.at("embeddings.word")), params.at("mlm.decoder.bias"));
}

Tensor ce_logits(const Backbone& backbone, const ParamStore& params, const TokenBatch& batch,
                 const EncoderPlugin* plugin) {
  using namespace ops;
  Tensor hidden = encode(backbone, params, batch, plugin);
  std::vector<std::size_t> cls_rows(batch.batch);
  for (std::size_t i = 0; i < batch.batch; ++i) cls_rows[i] = i * batch.seq_len;
  return linear(gather_rows(hidden, cls_rows), params.at("score.weight"), params.at("score.bias"));
}

double ce_score(const Backbone& backbone, const ParamStore& params, std::string_view query,
                std::string_view doc, const EncoderPlugin* plugin) {
  const auto q = backbone.tokenizer.tokenize(query);
  const auto d = backbone.tokenizer.tokenize(doc);
  const TokenSequence seq = make_pair_input(q, d, backbone.config.max_seq_len);
  return ce_logits(backbone, params, TokenBatch::pack({&seq, 1}), plugin).item();
}

std::vector<double> ce_score_many(const Backbone& backbone, const ParamStore& params,
                                  std::string_view query, std::span<const std::string> docs,
                                  const EncoderPlugin* plugin, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  const auto q = backbone.tokenizer.tokenize(query);
  std::vector<double> scores;
  scores.reserve(docs.size());
  std::vector<TokenSequence> seqs;
  for (std::size_t start = 0; start < docs.size(); start += batch_size) {
    const auto end = std::min(docs.size(), start + batch_size);
    seqs.clear();
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(make_pair_input(q, backbone.tokenizer.tokenize(docs[i]), backbone.config.max_seq_len));
    }
    const Tensor logits = ce_logits(backbone, params, TokenBatch::pack(seqs), plugin);
    for (double s : logits.data()) scores.push_back(s);
  }
  return scores;
}

std::vector<double> be_embed(const Backbone& backbone, const ParamStore& params,
                             std::string_view text) {
  const auto h = backbone.config.hidden;
  const auto tokens = backbone.tokenizer.tokenize(text);
  if (tokens.empty()) {
    spdlog::warn("be_embed: empty text, returning a zero vector");
    return std::vector<double>(h, 0.0);
  }
  const TokenSequence seq = make_text_input(tokens, backbone.config.max_seq_len);
  const TokenBatch batch = TokenBatch::pack({&seq, 1});
  const Tensor hidden = encode(backbone, params, batch);
  std::vector<double> pooled(h, 0.0);
  std::size_t count = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    if (!batch.valid[r]) continue;
    ++count;
    for (std::size_t c = 0; c < h; ++c) pooled[c] += hidden.data()[r * h + c];
  }
  for (auto& v : pooled) v /= static_cast<double>(count);
  return pooled;
}

// Checkpoints -----------------------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "MRCKPT01";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void write_params(io::BinaryWriter& w, const ParamStore& params) {
  const auto& entries = params.entries();
  w.u64(entries.size());
  for (const auto& [name, t] : entries) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    w.f64s(t.data());
  }
}

ParamStore read_params(io::BinaryReader& r, const std::string& source) {
  ParamStore params;
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto rank = r.u32();
    if (rank > 4) throw IoError(source + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    auto data = r.f64s(shape_numel(shape));
    if (params.contains(name)) throw IoError(source + ": duplicate tensor '" + name + "'");
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  io::BinaryWriter w(os);
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const auto& c = ckpt.backbone.config;
  for (auto v : {c.num_layers, c.hidden, c.heads, c.ffn_dim, c.vocab_size, c.max_seq_len}) w.u64(v);
  const auto& toks = ckpt.backbone.tokenizer.tokens();
  w.u64(toks.size());
  for (const auto& t : toks) w.str(t);
  write_params(w, ckpt.params);
  return std::move(os).str();
}

Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& source) {
  std::istringstream is{std::string(bytes), std::ios::binary};
  io::BinaryReader r(is, source);
  r.expect_magic(kCheckpointMagic);
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ckpt;
  auto& c = ckpt.backbone.config;
  c.num_layers = r.u64();
  c.hidden = r.u64();
  c.heads = r.u64();
  c.ffn_dim = r.u64();
  c.vocab_size = r.u64();
  c.max_seq_len = r.u64();
  const auto vocab_n = r.u64();
  if (vocab_n < special::kCount || vocab_n != c.vocab_size) {
    throw IoError(source + ": vocabulary size disagrees with config");
  }
  std::vector<std::string> tokens(vocab_n);
  for (auto& t : tokens) t = r.str();
  tokens.erase(tokens.begin(), tokens.begin() + special::kCount);
  ckpt.backbone.tokenizer = Tokenizer(std::move(tokens));
  ckpt.params = read_params(r, source);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(source + ": " + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path), path.string());
}

std::string fingerprint(const Checkpoint& ckpt) {
  return io::sha256_hex(serialize_checkpoint(ckpt)).substr(0, 16);
}

}  // namespace modrank
