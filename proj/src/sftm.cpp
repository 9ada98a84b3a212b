#include "modrank/sftm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "modrank/adapters.hpp"
#include "modrank/error.hpp"
#include "modrank/io.hpp"

namespace modrank {

std::size_t SparseMask::budgeted_size() const {
  return static_cast<std::size_t>(
      std::lower_bound(indices.begin(), indices.end(), exempt_from) - indices.begin());
}

void SparseMask::validate() const {
  if (indices.size() != values.size()) throw ContractError("mask indices/values length mismatch");
  if (exempt_from > dim) throw ContractError("mask exempt_from beyond dim");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= dim) throw ContractError("mask index " + std::to_string(indices[i]) + " >= dim");
    if (i > 0 && indices[i] <= indices[i - 1]) throw ContractError("mask indices not strictly increasing");
    if (!std::isfinite(values[i])) throw ContractError("mask value is not finite");
  }
  if (budgeted_size() > k) {
    throw ContractError("mask has " + std::to_string(budgeted_size()) + " entries, budget " + std::to_string(k));
  }
}

std::vector<std::uint8_t> mask_eligibility(const ParamStore& params) {
  std::vector<std::uint8_t> eligible;
  eligible.reserve(params.num_coordinates());
  for (const auto& [name, t] : params.entries()) {
    eligible.insert(eligible.end(), t.numel(), name.starts_with(kScoreHeadPrefix) ? 0 : 1);
  }
  return eligible;
}

std::vector<std::size_t> select_support(std::span<const double> theta0, std::span<const double> theta1,
                                        std::size_t k, std::span<const std::uint8_t> eligible) {
  if (theta0.size() != theta1.size()) {
    throw ContractError("select_support: θ⁰ has " + std::to_string(theta0.size()) + " coordinates, θ¹ " +
                        std::to_string(theta1.size()));
  }
  if (!eligible.empty() && eligible.size() != theta0.size()) {
    throw ContractError("select_support: eligibility mask length mismatch");
  }
  std::vector<std::size_t> candidates;
  candidates.reserve(theta0.size());
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    if (eligible.empty() || eligible[i]) candidates.push_back(i);
  }
  const auto take = std::min(k, candidates.size());
  auto larger = [&](std::size_t a, std::size_t b) {
    const double da = std::fabs(theta1[a] - theta0[a]), db = std::fabs(theta1[b] - theta0[b]);
    return da != db ? da > db : a < b;
  };
  std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                   candidates.end(), larger);
  candidates.resize(take);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

std::vector<double> phase2_train(std::span<const double> theta0, std::span<const std::size_t> support,
                                 const SparseTrainer& trainer, std::size_t exempt_from) {
  const auto n = theta0.size();
  if (exempt_from > n) throw ContractError("phase2_train: exempt_from beyond dim");
  std::vector<std::uint8_t> trainable(n, 0);
  for (auto i : support) {
    if (i >= n) throw ContractError("phase2_train: support index out of range");
    trainable[i] = 1;
  }
  std::fill(trainable.begin() + static_cast<std::ptrdiff_t>(exempt_from), trainable.end(), 1);

  std::vector<double> theta2 = trainer(theta0, trainable);
  if (theta2.size() != n) throw ContractError("phase2_train: trainer changed the dimension");
  for (std::size_t i = 0; i < n; ++i) {
    if (trainable[i]) {
      theta2[i] = theta0[i] + (theta2[i] - theta0[i]);
    } else if (std::bit_cast<std::uint64_t>(theta2[i]) != std::bit_cast<std::uint64_t>(theta0[i])) {
      throw ContractError("phase2_train: trainer modified frozen coordinate " + std::to_string(i));
    }
  }
  return theta2;
}

SparseMask extract_mask(std::span<const double> theta2, std::span<const double> theta0,
                        std::span<const std::size_t> support, std::size_t k, std::size_t exempt_from,
                        MaskRole role, std::string tag, bool prune) {
  if (theta2.size() != theta0.size()) throw ContractError("extract_mask: dimension mismatch");
  SparseMask mask;
  mask.dim = theta0.size();
  mask.k = k;
  mask.exempt_from = exempt_from;
  mask.role = role;
  mask.tag = std::move(tag);
  auto push = [&](std::size_t i) {
    const double delta = theta2[i] - theta0[i];
    if (prune && delta == 0.0) return;
    mask.indices.push_back(i);
    mask.values.push_back(delta);
  };
  std::vector<std::size_t> sorted(support.begin(), support.end());
  std::sort(sorted.begin(), sorted.end());
  for (auto i : sorted) {
    if (i >= exempt_from) break;
    push(i);
  }
  for (std::size_t i = exempt_from; i < mask.dim; ++i) push(i);
  mask.validate();
  return mask;
}

void apply_mask(std::span<double> theta, const SparseMask& mask) {
  if (theta.size() != mask.dim) {
    throw ContractError("mask '" + mask.tag + "' has dim " + std::to_string(mask.dim) + ", θ has " +
                        std::to_string(theta.size()));
  }
  for (std::size_t i = 0; i < mask.size(); ++i) theta[mask.indices[i]] += mask.values[i];
}

std::vector<double> compose(std::span<const double> theta0, const SparseMask& rm, const SparseMask& lm) {
  std::vector<double> theta(theta0.begin(), theta0.end());
  apply_mask(theta, rm);
  apply_mask(theta, lm);
  return theta;
}

SparseMask combine_masks(const SparseMask& a, const SparseMask& b) {
  if (a.dim != b.dim || a.exempt_from != b.exempt_from) throw ContractError("combine_masks: incompatible masks");
  if (a.base_fingerprint != b.base_fingerprint) {
    throw FingerprintError("combine_masks: masks built on different bases", a.base_fingerprint,
                           b.base_fingerprint);
  }
  SparseMask out;
  out.dim = a.dim;
  out.k = a.k + b.k;
  out.exempt_from = a.exempt_from;
  out.role = a.role == b.role ? a.role : MaskRole::kLanguage;
  out.tag = std::min(a.tag, b.tag) + "+" + std::max(a.tag, b.tag);
  out.base_fingerprint = a.base_fingerprint;
  std::size_t i = 0, j = 0;
  while (i < a.size() || j < b.size()) {
    if (j == b.size() || (i < a.size() && a.indices[i] < b.indices[j])) {
      out.indices.push_back(a.indices[i]);
      out.values.push_back(a.values[i++]);
    } else if (i == a.size() || b.indices[j] < a.indices[i]) {
      out.indices.push_back(b.indices[j]);
      out.values.push_back(b.values[j++]);
    } else {
      out.indices.push_back(a.indices[i]);
      out.values.push_back(a.values[i++] + b.values[j++]);
    }
  }
  return out;
}

std::size_t k_from_reduction_factor(std::size_t r, std::size_t num_layers, std::size_t hidden) {
  AdapterConfig cfg;
  cfg.reduction_factor = r;
  return adapter_param_count(cfg, num_layers, hidden);
}

// Files -----------------------------------------------------------------------

namespace {

constexpr std::string_view kMaskHeader = "modrank-mask 1";

const char* role_name(MaskRole role) { return role == MaskRole::kLanguage ? "language" : "ranking"; }

std::size_t parse_size(const std::string& text, const std::string& source) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != text.size() || text.empty() || text[0] == '-') {
    throw IoError(source + ": expected an unsigned integer, got '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string mask_file_name(MaskRole role, const std::string& tag, std::size_t reduction_factor) {
  return std::string(role == MaskRole::kLanguage ? "LM_" : "RM_") + tag + "_r" +
         std::to_string(reduction_factor) + ".mask";
}

void save_mask(const std::filesystem::path& path, const SparseMask& mask) {
  mask.validate();
  std::ostringstream os;
  os << kMaskHeader << '\n'
     << "dim " << mask.dim << '\n'
     << "k " << mask.k << '\n'
     << "exempt_from " << mask.exempt_from << '\n'
     << "role " << role_name(mask.role) << '\n'
     << "tag " << mask.tag << '\n'
     << "base " << mask.base_fingerprint << '\n'
     << "entries " << mask.size() << '\n';
  for (std::size_t i = 0; i < mask.size(); ++i) {
    os << mask.indices[i] << ' ' << io::format_exact(mask.values[i]) << '\n';
  }
  io::write_atomic(path, os.str());
}

SparseMask load_mask(const std::filesystem::path& path, const std::string& expected_fingerprint) {
  const std::string source = path.string();
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kMaskHeader) throw IoError(source + ": not a mask file");
  auto field = [&](const char* key) {
    if (!std::getline(in, line)) throw IoError(source + ": truncated header");
    const std::string prefix = std::string(key) + " ";
    if (!line.starts_with(prefix) && line != key) {
      throw IoError(source + ": expected header field '" + key + "'");
    }
    return line.size() > prefix.size() ? line.substr(prefix.size()) : std::string();
  };
  SparseMask mask;
  mask.dim = parse_size(field("dim"), source);
  mask.k = parse_size(field("k"), source);
  mask.exempt_from = parse_size(field("exempt_from"), source);
  const auto role = field("role");
  if (role == "language") {
    mask.role = MaskRole::kLanguage;
  } else if (role == "ranking") {
    mask.role = MaskRole::kRanking;
  } else {
    throw IoError(source + ": unknown mask role '" + role + "'");
  }
  mask.tag = field("tag");
  mask.base_fingerprint = field("base");
  if (!expected_fingerprint.empty() && expected_fingerprint != mask.base_fingerprint) {
    throw FingerprintError(source + " was trained on a different base checkpoint", expected_fingerprint,
                           mask.base_fingerprint);
  }
  const auto entries = parse_size(field("entries"), source);
  mask.indices.reserve(entries);
  mask.values.reserve(entries);
  for (std::size_t e = 0; e < entries; ++e) {
    if (!std::getline(in, line)) throw IoError(source + ": truncated entry list");
    const auto space = line.find(' ');
    if (space == std::string::npos) throw IoError(source + ": malformed entry '" + line + "'");
    mask.indices.push_back(parse_size(line.substr(0, space), source));
    try {
      mask.values.push_back(io::parse_double(std::string_view(line).substr(space + 1)));
    } catch (const std::exception&) {
      throw IoError(source + ": malformed delta in '" + line + "'");
    }
  }
  try {
    mask.validate();
  } catch (const ContractError& e) {
    throw IoError(source + ": " + e.what());
  }
  return mask;
}

}  // namespace modrank
