#include "modrank/adapters.hpp"

#include <random>
#include <sstream>

#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

namespace {

std::string layer_name(std::size_t layer, const char* suffix) {
  return "layer." + std::to_string(layer) + "." + suffix;
}

std::size_t coupling_bottleneck(const AdapterConfig& config, std::size_t hidden) {
  return std::max<std::size_t>(1, hidden / (2 * config.reduction_factor));
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kRelu:
      return ops::relu(x);
  }
  throw ConfigError("unknown adapter activation");
}

Tensor bottleneck(const Tensor& x, const Tensor& down_w, const Tensor& down_b, const Tensor& up_w,
                  const Tensor& up_b, Activation act) {
  return ops::linear(activate(ops::linear(x, down_w, down_b), act), up_w, up_b);
}

Tensor coupling(const Tensor& x, const AdapterParams& la, const char* fn) {
  const std::string pre = std::string("inv.") + fn + ".";
  const auto& s = la.store;
  return bottleneck(x, s.at(pre + "in.weight"), s.at(pre + "in.bias"), s.at(pre + "out.weight"),
                    s.at(pre + "out.bias"), la.config.activation);
}

void require_invertible(const AdapterParams& la, std::size_t width) {
  if (!la.has_invertible()) throw ConfigError("language adapter has no invertible adapters");
  if (width != la.hidden) {
    throw DimensionError("invertible adapter width " + std::to_string(la.hidden) + " vs input " +
                         std::to_string(width));
  }
}

Tensor la_block(const Tensor& x, const AdapterParams& p, std::size_t layer) {
  return bottleneck(x, p.down_weight(layer), p.down_bias(layer), p.up_weight(layer), p.up_bias(layer),
                    p.config.activation);
}

const char* role_code(AdapterRole role) { return role == AdapterRole::kLanguage ? "LA" : "RA"; }

}  // namespace

std::size_t AdapterConfig::bottleneck(std::size_t hidden) const {
  if (reduction_factor == 0) throw ConfigError("reduction factor must be >= 1");
  if (hidden % reduction_factor != 0) {
    throw ConfigError("reduction factor " + std::to_string(reduction_factor) +
                      " does not divide hidden size " + std::to_string(hidden));
  }
  return hidden / reduction_factor;
}

std::size_t adapter_param_count(const AdapterConfig& config, std::size_t num_layers,
                                std::size_t hidden) {
  const auto d = config.bottleneck(hidden);
  return num_layers * (2 * hidden * d + d + hidden);
}

AdapterParams AdapterParams::init(const AdapterConfig& config, const EncoderConfig& encoder,
                                  std::uint64_t seed, double down_std) {
  const auto h = encoder.hidden;
  const auto d = config.bottleneck(h);
  if (config.invertible && h % 2 != 0) throw ConfigError("invertible adapters need an even hidden size");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = normal(rng) * down_std;
    return t;
  };

  AdapterParams p;
  p.config = config;
  p.num_layers = encoder.num_layers;
  p.hidden = h;
  for (std::size_t l = 0; l < encoder.num_layers; ++l) {
    p.store.add(layer_name(l, "down.weight"), randn({h, d}));
    p.store.add(layer_name(l, "down.bias"), Tensor({d}));
    p.store.add(layer_name(l, "up.weight"), Tensor({d, h}));
    p.store.add(layer_name(l, "up.bias"), Tensor({h}));
  }
  if (config.invertible) {
    const auto half = h / 2, c = coupling_bottleneck(config, h);
    for (const char* fn : {"f", "g"}) {
      const std::string pre = std::string("inv.") + fn + ".";
      p.store.add(pre + "in.weight", randn({half, c}));
      p.store.add(pre + "in.bias", Tensor({c}));
      p.store.add(pre + "out.weight", Tensor({c, half}));
      p.store.add(pre + "out.bias", Tensor({half}));
    }
  }
  return p;
}

const Tensor& AdapterParams::down_weight(std::size_t layer) const { return store.at(layer_name(layer, "down.weight")); }
const Tensor& AdapterParams::down_bias(std::size_t layer) const { return store.at(layer_name(layer, "down.bias")); }
const Tensor& AdapterParams::up_weight(std::size_t layer) const { return store.at(layer_name(layer, "up.weight")); }
const Tensor& AdapterParams::up_bias(std::size_t layer) const { return store.at(layer_name(layer, "up.bias")); }

Tensor la_forward(const Tensor& hidden, const Tensor& residual, const AdapterParams& la,
                  std::size_t layer) {
  return ops::add(la_block(hidden, la, layer), residual);
}

Tensor ra_forward(const Tensor& hidden, const Tensor& residual, const AdapterParams& la,
                  const AdapterParams& ra, std::size_t layer) {
  return ops::add(la_block(la_forward(hidden, residual, la, layer), ra, layer), residual);
}

Tensor invertible_apply(const Tensor& e, const AdapterParams& la) {
  require_invertible(la, e.rank() == 2 ? e.dim(1) : 0);
  const auto half = la.hidden / 2;
  Tensor e1 = ops::slice_cols(e, 0, half), e2 = ops::slice_cols(e, half, la.hidden);
  Tensor o1 = ops::add(e1, coupling(e2, la, "f"));
  Tensor o2 = ops::add(e2, coupling(o1, la, "g"));
  return ops::concat_cols(o1, o2);
}

Tensor invertible_invert(const Tensor& o, const AdapterParams& la) {
  require_invertible(la, o.rank() == 2 ? o.dim(1) : 0);
  const auto half = la.hidden / 2;
  Tensor o1 = ops::slice_cols(o, 0, half), o2 = ops::slice_cols(o, half, la.hidden);
  Tensor e2 = ops::sub(o2, coupling(o1, la, "g"));
  Tensor e1 = ops::sub(o1, coupling(e2, la, "f"));
  return ops::concat_cols(e1, e2);
}

std::vector<std::uint8_t> split_route(const TokenBatch& batch) {
  std::vector<std::uint8_t> take_query(batch.rows(), 0);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    bool found = false;
    for (std::size_t t = 0; t < batch.seq_len && !found; ++t) {
      const auto r = b * batch.seq_len + t;
      if (!batch.valid[r]) break;
      take_query[r] = 1;
      found = batch.ids[r] == special::kSep;
    }
    if (!found) throw ContractError("split routing: sequence " + std::to_string(b) + " has no [SEP]");
  }
  return take_query;
}

AdapterComposition adapter_drop(const AdapterComposition& comp, std::size_t n, std::size_t num_layers) {
  if (n > num_layers) {
    throw ContractError("adapter_drop: n=" + std::to_string(n) + " exceeds " +
                        std::to_string(num_layers) + " layers");
  }
  AdapterComposition out = comp;
  out.drop_first_n = n;
  return out;
}

// AdapterStack ----------------------------------------------------------------

AdapterStack::AdapterStack(const AdapterParams* la_query, const AdapterParams* la_document,
                           const AdapterParams* ra, LaMode mode, std::size_t drop_first_n,
                           bool invertible)
    : la_query_(la_query),
      la_document_(la_document),
      ra_(ra),
      mode_(mode),
      drop_first_n_(drop_first_n),
      invertible_(invertible) {
  if ((mode != LaMode::kDocument && la_query == nullptr) ||
      (mode != LaMode::kQuery && la_document == nullptr)) {
    throw ConfigError("adapter stack is missing a language adapter for its mode");
  }
  std::vector<const AdapterParams*> used;
  if (mode != LaMode::kDocument) used.push_back(la_query);
  if (mode != LaMode::kQuery) used.push_back(la_document);
  if (ra != nullptr) used.push_back(ra);
  for (const auto* p : used) {
    if (p->hidden != used.front()->hidden || p->num_layers != used.front()->num_layers) {
      throw ConfigError("adapter stack mixes adapters of different shapes");
    }
  }
  if (drop_first_n > used.front()->num_layers) throw ContractError("drop_first_n exceeds the layer count");
  if (invertible) {
    for (const auto* p : used) {
      if (p != ra && !p->has_invertible()) throw ConfigError("invertible mode needs invertible language adapters");
    }
  }
}

AdapterStack AdapterStack::compose(const AdapterComposition& comp,
                                   const std::map<std::string, AdapterParams>& registry,
                                   std::size_t num_layers) {
  auto find = [&](const std::string& id, const char* what) -> const AdapterParams* {
    if (id.empty()) throw ConfigError(std::string("composition has no ") + what + " adapter");
    auto it = registry.find(id);
    if (it == registry.end()) throw ConfigError(std::string(what) + " adapter '" + id + "' not loaded");
    if (it->second.num_layers != num_layers) throw ConfigError("adapter '" + id + "' has the wrong layer count");
    return &it->second;
  };
  const AdapterParams* q = comp.la_mode == LaMode::kDocument ? nullptr : find(comp.la_query, "query-language");
  const AdapterParams* d = comp.la_mode == LaMode::kQuery ? nullptr : find(comp.la_document, "document-language");
  const AdapterParams* ra = comp.ra.empty() ? nullptr : find(comp.ra, "ranking");
  return AdapterStack(q, d, ra, comp.la_mode, comp.drop_first_n, comp.invertible);
}

bool AdapterStack::active_at(std::size_t layer) const { return layer >= drop_first_n_; }

Tensor AdapterStack::language(std::size_t layer, const Tensor& hidden, const Tensor& residual,
                              const TokenBatch& batch) const {
  switch (mode_) {
    case LaMode::kQuery:
      return la_forward(hidden, residual, *la_query_, layer);
    case LaMode::kDocument:
      return la_forward(hidden, residual, *la_document_, layer);
    case LaMode::kSplit:
      return ops::row_blend(la_forward(hidden, residual, *la_query_, layer),
                            la_forward(hidden, residual, *la_document_, layer), split_route(batch));
  }
  throw ConfigError("unknown LA mode");
}

Tensor AdapterStack::after_ffn(std::size_t layer, const Tensor& hidden, const Tensor& residual,
                               const TokenBatch& batch) const {
  Tensor out = language(layer, hidden, residual, batch);
  if (ra_ == nullptr) return out;
  return ops::add(la_block(out, *ra_, layer), residual);
}

Tensor AdapterStack::on_embeddings(const Tensor& embedded, const TokenBatch& batch) const {
  if (!invertible_ || drop_first_n_ > 0) return embedded;
  switch (mode_) {
    case LaMode::kQuery:
      return invertible_apply(embedded, *la_query_);
    case LaMode::kDocument:
      return invertible_apply(embedded, *la_document_);
    case LaMode::kSplit:
      return ops::row_blend(invertible_apply(embedded, *la_query_),
                            invertible_apply(embedded, *la_document_), split_route(batch));
  }
  throw ConfigError("unknown LA mode");
}

Tensor AdapterStack::before_output(const Tensor& hidden, const TokenBatch& batch) const {
  if (!invertible_ || drop_first_n_ > 0) return hidden;
  switch (mode_) {
    case LaMode::kQuery:
      return invertible_invert(hidden, *la_query_);
    case LaMode::kDocument:
      return invertible_invert(hidden, *la_document_);
    case LaMode::kSplit:
      if (hidden.dim(0) != batch.rows()) {
        throw ContractError("split invertible output needs every row of the batch");
      }
      return ops::row_blend(invertible_invert(hidden, *la_query_),
                            invertible_invert(hidden, *la_document_), split_route(batch));
  }
  throw ConfigError("unknown LA mode");
}

// Files -----------------------------------------------------------------------

namespace {
constexpr std::string_view kAdapterMagic = "MRADPT01";
constexpr std::uint32_t kAdapterVersion = 1;

void check_adapter_shapes(const AdapterParams& p, const std::string& source) {
  const auto h = p.hidden;
  const auto d = p.config.bottleneck(h);
  auto expect = [&](const std::string& name, Shape shape) {
    if (!p.store.contains(name) || p.store.at(name).shape() != shape) {
      throw IoError(source + ": tensor '" + name + "' missing or mis-shaped");
    }
  };
  std::size_t expected = 4 * p.num_layers;
  for (std::size_t l = 0; l < p.num_layers; ++l) {
    expect(layer_name(l, "down.weight"), {h, d});
    expect(layer_name(l, "down.bias"), {d});
    expect(layer_name(l, "up.weight"), {d, h});
    expect(layer_name(l, "up.bias"), {h});
  }
  if (p.config.invertible) {
    const auto half = h / 2, c = coupling_bottleneck(p.config, h);
    for (const char* fn : {"f", "g"}) {
      const std::string pre = std::string("inv.") + fn + ".";
      expect(pre + "in.weight", {half, c});
      expect(pre + "in.bias", {c});
      expect(pre + "out.weight", {c, half});
      expect(pre + "out.bias", {half});
    }
    expected += 8;
  }
  if (p.store.entries().size() != expected) throw IoError(source + ": unexpected extra tensors");
}
}  // namespace

std::string adapter_file_name(AdapterRole role, const std::string& tag, std::size_t reduction_factor) {
  return std::string(role_code(role)) + "_" + tag + "_r" + std::to_string(reduction_factor) + ".adapter";
}

void save_adapter(const std::filesystem::path& path, const AdapterFile& file) {
  std::ostringstream os(std::ios::binary);
  io::BinaryWriter w(os);
  w.magic(kAdapterMagic);
  w.u32(kAdapterVersion);
  w.u8(file.role == AdapterRole::kLanguage ? 0 : 1);
  w.str(file.tag);
  w.str(file.base_fingerprint);
  const auto& p = file.params;
  w.u64(p.config.reduction_factor);
  w.u8(static_cast<std::uint8_t>(p.config.activation));
  w.u8(p.config.invertible ? 1 : 0);
  w.u64(p.num_layers);
  w.u64(p.hidden);
  write_params(w, p.store);
  w.u8(file.head ? 1 : 0);
  if (file.head) write_params(w, *file.head);
  io::write_atomic(path, std::move(os).str());
}

AdapterFile load_adapter(const std::filesystem::path& path, const std::string& expected_fingerprint) {
  const std::string source = path.string();
  std::istringstream is(io::read_file(path), std::ios::binary);
  io::BinaryReader r(is, source);
  r.expect_magic(kAdapterMagic);
  if (const auto v = r.u32(); v != kAdapterVersion) {
    throw IoError(source + ": unsupported adapter version " + std::to_string(v));
  }
  AdapterFile file;
  const auto role = r.u8();
  if (role > 1) throw IoError(source + ": bad adapter role");
  file.role = role == 0 ? AdapterRole::kLanguage : AdapterRole::kRanking;
  file.tag = r.str();
  file.base_fingerprint = r.str();
  if (!expected_fingerprint.empty() && expected_fingerprint != file.base_fingerprint) {
    throw FingerprintError(source + " was trained on a different base checkpoint", expected_fingerprint,
                           file.base_fingerprint);
  }
  auto& p = file.params;
  p.config.reduction_factor = r.u64();
  if (r.u8() != 0) throw IoError(source + ": unknown activation");
  p.config.activation = Activation::kRelu;
  p.config.invertible = r.u8() != 0;
  p.num_layers = r.u64();
  p.hidden = r.u64();
  p.store = read_params(r, source);
  try {
    check_adapter_shapes(p, source);
  } catch (const ConfigError& e) {
    throw IoError(source + ": " + e.what());
  }
  if (r.u8() != 0) file.head = read_params(r, source);
  return file;
}

void apply_head(ParamStore& params, const ParamStore& head) {
  for (const auto& [name, t] : head.entries()) {
    Tensor& dst = params.at(name);
    if (dst.shape() != t.shape()) throw DimensionError("head tensor '" + name + "' has the wrong shape");
    std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
  }
}

ParamStore extract_head(const ParamStore& params) {
  ParamStore head;
  for (const auto& [name, t] : params.entries()) {
    if (name.starts_with(kScoreHeadPrefix)) head.add(name, t.clone());
  }
  return head;
}

}  // namespace modrank
