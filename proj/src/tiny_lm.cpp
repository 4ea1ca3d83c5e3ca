// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/tiny_lm.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <random>
#include <string>
#include <utility>

#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"

namespace twdpo::lm {

using numerics::NodeId;
using numerics::Tensor;
using numerics::Trace;

namespace {

constexpr std::size_t kTensorsPerLayer = 16;
constexpr double kInitStd = 0.02;

// Offsets inside one layer block.
enum LayerSlot : std::size_t {
  ln1_gain,
  ln1_bias,
  wq,
  bq,
  wk,
  bk,
  wv,
  bv,
  wo,
  bo,
  ln2_gain,
  ln2_bias,
  w1,
  b1,
  w2,
  b2,
};

std::size_t layer_base(std::size_t layer) { return 2 + layer * kTensorsPerLayer; }

bool is_residual_output(const std::string& name) {
  return name.ends_with("attn.wo") || name.ends_with("mlp.w2");
}

bool is_gain(const std::string& name) { return name.ends_with(".gain"); }

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || mlp_ratio == 0) {
    throw Error(ErrorKind::invalid_argument, "model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error(ErrorKind::invalid_argument, "n_heads must divide d_model");
  }
  if (max_seq_len < 8) {
    throw Error(ErrorKind::invalid_argument, "max_seq_len must be at least 8");
  }
}

std::string ModelConfig::to_text() const {
  std::string out;
  out += "vocab_size = " + std::to_string(vocab_size) + "\n";
  out += "d_model = " + std::to_string(d_model) + "\n";
  out += "n_layers = " + std::to_string(n_layers) + "\n";
  out += "n_heads = " + std::to_string(n_heads) + "\n";
  out += "max_seq_len = " + std::to_string(max_seq_len) + "\n";
  out += "init_seed = " + std::to_string(init_seed) + "\n";
  out += "mlp_ratio = " + std::to_string(mlp_ratio) + "\n";
  return out;
}

void ModelConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    if (key == "vocab_size") {
      vocab_size = parse_unsigned(key, value);
    } else if (key == "d_model") {
      d_model = parse_unsigned(key, value);
    } else if (key == "n_layers") {
      n_layers = parse_unsigned(key, value);
    } else if (key == "n_heads") {
      n_heads = parse_unsigned(key, value);
    } else if (key == "max_seq_len") {
      max_seq_len = parse_unsigned(key, value);
    } else if (key == "init_seed") {
      init_seed = parse_unsigned(key, value);
    } else if (key == "mlp_ratio") {
      mlp_ratio = parse_unsigned(key, value);
    }
  }
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  cfg.apply(parse_key_values(text, "model config"));
  cfg.validate();
  return cfg;
}

AttentionRecord::AttentionRecord(std::size_t n_layers, std::size_t n_heads)
    : maps_(n_layers, std::vector<Tensor>(n_heads)) {}

std::size_t AttentionRecord::length() const noexcept {
  if (maps_.empty() || maps_.front().empty()) {
    return 0;
  }
  return maps_.front().front().rows();
}

const Tensor& AttentionRecord::at(std::size_t layer, std::size_t head) const {
  if (layer < 1 || layer > maps_.size() || head < 1 || head > maps_[layer - 1].size()) {
    throw Error(ErrorKind::invalid_argument, "attention layer/head index out of range");
  }
  return maps_[layer - 1][head - 1];
}

Tensor& AttentionRecord::at(std::size_t layer, std::size_t head) {
  return const_cast<Tensor&>(std::as_const(*this).at(layer, head));
}

Tensor AttentionRecord::head_mean(std::size_t layer) const {
  Tensor out = Tensor::zeros_like(at(layer, 1));
  const double inv = 1.0 / static_cast<double>(n_heads());
  for (std::size_t h = 1; h <= n_heads(); ++h) {
    const Tensor& m = at(layer, h);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += m[i];
    }
  }
  for (double& v : out.values()) {
    v *= inv;
  }
  return out;
}

std::vector<NamedTensor> TinyTransformer::parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t h = c.d_model * c.mlp_ratio;
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", Tensor({c.vocab_size, d})});
  out.push_back({"pos_emb", Tensor({c.max_seq_len, d})});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", Tensor({d})});
    out.push_back({p + "ln1.bias", Tensor({d})});
    out.push_back({p + "attn.wq", Tensor({d, d})});
    out.push_back({p + "attn.bq", Tensor({d})});
    out.push_back({p + "attn.wk", Tensor({d, d})});
    out.push_back({p + "attn.bk", Tensor({d})});
    out.push_back({p + "attn.wv", Tensor({d, d})});
    out.push_back({p + "attn.bv", Tensor({d})});
    out.push_back({p + "attn.wo", Tensor({d, d})});
    out.push_back({p + "attn.bo", Tensor({d})});
    out.push_back({p + "ln2.gain", Tensor({d})});
    out.push_back({p + "ln2.bias", Tensor({d})});
    out.push_back({p + "mlp.w1", Tensor({d, h})});
    out.push_back({p + "mlp.b1", Tensor({h})});
    out.push_back({p + "mlp.w2", Tensor({h, d})});
    out.push_back({p + "mlp.b2", Tensor({d})});
  }
  out.push_back({"ln_f.gain", Tensor({d})});
  out.push_back({"ln_f.bias", Tensor({d})});
  out.push_back({"head.w", Tensor({d, c.vocab_size})});
  out.push_back({"head.b", Tensor({c.vocab_size})});
  return out;
}

TinyTransformer::TinyTransformer(ModelConfig config) : config_(config) {
  params_ = parameter_layout(config_);
  std::mt19937_64 rng(config_.init_seed);
  const double residual_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (NamedTensor& p : params_) {
    if (is_gain(p.name)) {
      std::fill(p.value.values().begin(), p.value.values().end(), 1.0);
    } else if (p.value.rank() == 2) {
      std::normal_distribution<double> dist(0.0,
                                            is_residual_output(p.name) ? residual_std : kInitStd);
      for (double& v : p.value.values()) {
        v = dist(rng);
      }
    }
  }
}

TinyTransformer::TinyTransformer(ModelConfig config, std::vector<NamedTensor> parameters)
    : config_(config), params_(std::move(parameters)) {
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.size()) {
    throw Error(ErrorKind::invalid_argument, "parameter count does not match config");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params_[i].name || !layout[i].value.same_shape(params_[i].value)) {
      throw Error(ErrorKind::invalid_argument,
                  "parameter '" + params_[i].name + "' does not match the shape implied by config");
    }
  }
}

TinyTransformer::TinyTransformer(const TinyTransformer& other) {
  std::shared_lock lock(other.mutex_);
  config_ = other.config_;
  params_ = other.params_;
  frozen_ = other.frozen_;
}

TinyTransformer& TinyTransformer::operator=(const TinyTransformer& other) {
  if (this != &other) {
    std::unique_lock mine(mutex_, std::defer_lock);
    std::shared_lock theirs(other.mutex_, std::defer_lock);
    std::lock(mine, theirs);
    config_ = other.config_;
    params_ = other.params_;
    frozen_ = other.frozen_;
  }
  return *this;
}

TinyTransformer TinyTransformer::clone_frozen() const {
  TinyTransformer copy(*this);
  copy.frozen_ = true;
  return copy;
}

TinyTransformer TinyTransformer::clone_trainable() const {
  TinyTransformer copy(*this);
  copy.frozen_ = false;
  return copy;
}

TinyTransformer::ReadGuard::ReadGuard(const TinyTransformer& model)
    : model_(model), lock_(model.mutex_) {}

void TinyTransformer::update(const std::function<void(std::vector<NamedTensor>&)>& mutate) {
  if (frozen_) {
    throw Error(ErrorKind::invalid_argument, "cannot update a frozen model");
  }
  std::unique_lock lock(mutex_);
  std::vector<std::vector<std::size_t>> shapes;
  shapes.reserve(params_.size());
  for (const NamedTensor& p : params_) {
    shapes.push_back(p.value.shape());
  }
  mutate(params_);
  if (params_.size() != shapes.size()) {
    throw Error(ErrorKind::invalid_argument, "update changed the parameter count");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].value.shape() != shapes[i]) {
      throw Error(ErrorKind::invalid_argument, "update changed the shape of " + params_[i].name);
    }
  }
}

std::size_t TinyTransformer::parameter_count() const {
  std::shared_lock lock(mutex_);
  std::size_t n = 0;
  for (const NamedTensor& p : params_) {
    n += p.value.size();
  }
  return n;
}

std::uint64_t TinyTransformer::checksum() const {
  std::shared_lock lock(mutex_);
  std::uint64_t h = 1469598103934665603ULL;
  for (const NamedTensor& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
    for (std::size_t i = 0; i < p.value.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

BoundParameters bind_parameters(Trace& trace, const TinyTransformer& model, bool differentiable) {
  const auto guard = model.read();
  BoundParameters out;
  out.ids.reserve(guard.parameters().size());
  for (const NamedTensor& p : guard.parameters()) {
    out.ids.push_back(differentiable ? trace.leaf(p.value) : trace.constant(p.value));
  }
  return out;
}

NodeId traced_logits(Trace& trace, const BoundParameters& params, const ModelConfig& config,
                     std::span<const TokenId> tokens, AttentionRecord* attention) {
  const std::size_t n = tokens.size();
  if (n == 0) {
    throw Error(ErrorKind::invalid_argument, "forward pass needs at least one token");
  }
  if (n > config.max_seq_len) {
    throw Error(ErrorKind::sequence_too_long, "sequence of length " + std::to_string(n) +
                                                  " exceeds max_seq_len " +
                                                  std::to_string(config.max_seq_len));
  }
  std::vector<std::size_t> ids(n);
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] >= config.vocab_size) {
      throw Error(ErrorKind::invalid_token, "token id " + std::to_string(tokens[i]) +
                                                " at position " + std::to_string(i) +
                                                " is outside the vocabulary");
    }
    ids[i] = tokens[i];
    positions[i] = i;
  }
  if (params.ids.size() != 2 + config.n_layers * kTensorsPerLayer + 4) {
    throw Error(ErrorKind::invalid_argument, "bound parameters do not match config");
  }
  if (attention != nullptr) {
    *attention = AttentionRecord(config.n_layers, config.n_heads);
  }

  const auto& p = params.ids;
  const std::size_t dh = config.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  NodeId x = trace.add(trace.gather_rows(p[0], ids), trace.gather_rows(p[1], positions));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::size_t b = layer_base(l);
    const NodeId h = trace.layer_norm(x, p[b + ln1_gain], p[b + ln1_bias]);
    const NodeId q = trace.add_row(trace.matmul(h, p[b + wq]), p[b + bq]);
    const NodeId k = trace.add_row(trace.matmul(h, p[b + wk]), p[b + bk]);
    const NodeId v = trace.add_row(trace.matmul(h, p[b + wv]), p[b + bv]);
    std::vector<NodeId> heads;
    heads.reserve(config.n_heads);
    for (std::size_t hd = 0; hd < config.n_heads; ++hd) {
      NodeId qh = q;
      NodeId kh = k;
      NodeId vh = v;
      if (config.n_heads > 1) {
        qh = trace.slice_cols(q, hd * dh, dh);
        kh = trace.slice_cols(k, hd * dh, dh);
        vh = trace.slice_cols(v, hd * dh, dh);
      }
      const NodeId scores = trace.matmul(qh, trace.transpose(kh));
      const NodeId probs = trace.causal_softmax(scores, score_scale);
      if (attention != nullptr) {
        attention->at(l + 1, hd + 1) = trace.value(probs);
      }
      heads.push_back(trace.matmul(probs, vh));
    }
    const NodeId mixed = heads.size() == 1 ? heads.front() : trace.concat_cols(heads);
    x = trace.add(x, trace.add_row(trace.matmul(mixed, p[b + wo]), p[b + bo]));
    const NodeId h2 = trace.layer_norm(x, p[b + ln2_gain], p[b + ln2_bias]);
    const NodeId hidden = trace.gelu(trace.add_row(trace.matmul(h2, p[b + w1]), p[b + b1]));
    x = trace.add(x, trace.add_row(trace.matmul(hidden, p[b + w2]), p[b + b2]));
  }
  const std::size_t f = layer_base(config.n_layers);
  const NodeId xf = trace.layer_norm(x, p[f], p[f + 1]);
  return trace.add_row(trace.matmul(xf, p[f + 2]), p[f + 3]);
}

NodeId traced_token_logprobs(Trace& trace, const BoundParameters& params,
                             const ModelConfig& config, std::span<const TokenId> prompt,
                             std::span<const TokenId> response) {
  if (response.empty()) {
    throw Error(ErrorKind::invalid_argument, "response must be non-empty");
  }
  if (prompt.empty()) {
    throw Error(ErrorKind::invalid_argument, "prompt must be non-empty");
  }
  Tokens seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  const NodeId logits = traced_logits(trace, params, config, seq);
  const NodeId logp = trace.log_softmax_rows(logits);
  std::vector<std::size_t> flat(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    flat[t] = (prompt.size() - 1 + t) * config.vocab_size + response[t];
  }
  return trace.pick(logp, flat);
}

ForwardResult forward_with_attention(const TinyTransformer& model,
                                     std::span<const TokenId> tokens) {
  Trace trace;
  const BoundParameters params = bind_parameters(trace, model, false);
  ForwardResult out;
  const NodeId logits = traced_logits(trace, params, model.config(), tokens, &out.attention);
  out.logits = trace.value(logits);
  return out;
}

std::vector<double> token_logprobs(const TinyTransformer& model, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response) {
  Trace trace;
  const BoundParameters params = bind_parameters(trace, model, false);
  const NodeId lp = traced_token_logprobs(trace, params, model.config(), prompt, response);
  return trace.value(lp).values();
}

TokenId greedy_verdict(const TinyTransformer& model, std::span<const TokenId> prompt,
                       std::span<const TokenId> allowed) {
  if (allowed.empty()) {
    throw Error(ErrorKind::invalid_argument, "verdict needs a non-empty allowed set");
  }
  std::vector<TokenId> ids(allowed.begin(), allowed.end());
  std::sort(ids.begin(), ids.end());
  for (TokenId id : ids) {
    if (id >= model.config().vocab_size) {
      throw Error(ErrorKind::invalid_token, "allowed id " + std::to_string(id) +
                                                " is outside the vocabulary");
    }
  }
  const ForwardResult fwd = forward_with_attention(model, prompt);
  const std::size_t last = fwd.logits.rows() - 1;
  TokenId best = ids.front();
  double best_logit = fwd.logits.at(last, best);
  for (TokenId id : ids) {
    const double v = fwd.logits.at(last, id);
    if (v > best_logit) {
      best = id;
      best_logit = v;
    }
  }
  return best;
}

}  // namespace twdpo::lm
