// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "twdpo/tensor.hpp"
#include "twdpo/trace.hpp"

namespace twdpo::lm {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 64;
  std::uint64_t init_seed = 42;
  /// MLP hidden width as a multiple of d_model.
  std::size_t mlp_ratio = 2;

  /// Throws invalid_argument when an invariant does not hold.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  /// UTF-8 "key = value" lines, one per field.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  /// Applies recognised keys from a key/value map; unknown keys are ignored.
  void apply(const std::map<std::string, std::string>& values);
};

struct NamedTensor {
  std::string name;
  numerics::Tensor value;
};

/// Per-layer, per-head causal attention probabilities (post-softmax).
class AttentionRecord {
 public:
  AttentionRecord() = default;
  AttentionRecord(std::size_t n_layers, std::size_t n_heads);

  std::size_t n_layers() const noexcept { return maps_.size(); }
  std::size_t n_heads() const noexcept { return maps_.empty() ? 0 : maps_.front().size(); }
  /// Sequence length covered by the maps.
  std::size_t length() const noexcept;

  /// 1-based layer and head indices.
  const numerics::Tensor& at(std::size_t layer, std::size_t head) const;
  numerics::Tensor& at(std::size_t layer, std::size_t head);

  /// Uniform mean over heads of one layer (1-based).
  numerics::Tensor head_mean(std::size_t layer) const;

 private:
  std::vector<std::vector<numerics::Tensor>> maps_;
};

/// Decoder-only pre-norm transformer with learned absolute positions.
///
/// Reader/writer contract: any number of threads may run forward passes
/// concurrently (they hold a shared lock through `read()`); `update()` takes
/// the exclusive lock, so an optimizer step never overlaps a forward pass.
/// A frozen model (see `clone_frozen`) rejects `update()` outright.
class TinyTransformer {
 public:
  explicit TinyTransformer(ModelConfig config);
  TinyTransformer(ModelConfig config, std::vector<NamedTensor> parameters);
  TinyTransformer(const TinyTransformer& other);
  TinyTransformer& operator=(const TinyTransformer& other);

  const ModelConfig& config() const noexcept { return config_; }
  bool frozen() const noexcept { return frozen_; }

  /// Copy whose parameters can never change (the reference policy).
  TinyTransformer clone_frozen() const;
  /// Unfrozen copy (the trainable policy).
  TinyTransformer clone_trainable() const;

  class ReadGuard {
   public:
    explicit ReadGuard(const TinyTransformer& model);
    const std::vector<NamedTensor>& parameters() const noexcept { return model_.params_; }

   private:
    const TinyTransformer& model_;
    std::shared_lock<std::shared_mutex> lock_;
  };
  ReadGuard read() const { return ReadGuard(*this); }

  /// Exclusive mutation of the parameter set. Shapes must be preserved.
  void update(const std::function<void(std::vector<NamedTensor>&)>& mutate);

  std::size_t parameter_count() const;
  std::size_t tensor_count() const noexcept { return params_.size(); }
  /// FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() const;

  /// Parameter names and shapes implied by a config, in storage order.
  static std::vector<NamedTensor> parameter_layout(const ModelConfig& config);

 private:
  ModelConfig config_;
  std::vector<NamedTensor> params_;
  bool frozen_ = false;
  mutable std::shared_mutex mutex_;
};

/// Parameters registered in a trace, parallel to the model's storage order.
struct BoundParameters {
  std::vector<numerics::NodeId> ids;
};

/// Registers every parameter in `trace`, as leaves when `differentiable`.
BoundParameters bind_parameters(numerics::Trace& trace, const TinyTransformer& model,
                                bool differentiable);

/// Logits node (length x vocab) of one forward pass; optionally records the
/// attention probabilities of every layer and head.
numerics::NodeId traced_logits(numerics::Trace& trace, const BoundParameters& params,
                               const ModelConfig& config, std::span<const TokenId> tokens,
                               AttentionRecord* attention = nullptr);

/// Vector node of log pi(response_t | prompt, response_<t).
numerics::NodeId traced_token_logprobs(numerics::Trace& trace, const BoundParameters& params,
                                       const ModelConfig& config, std::span<const TokenId> prompt,
                                       std::span<const TokenId> response);

struct ForwardResult {
  numerics::Tensor logits;
  AttentionRecord attention;
};

ForwardResult forward_with_attention(const TinyTransformer& model, std::span<const TokenId> tokens);

std::vector<double> token_logprobs(const TinyTransformer& model, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response);

/// Argmax of the final-position logits restricted to `allowed`; ties go to
/// the smallest id.
TokenId greedy_verdict(const TinyTransformer& model, std::span<const TokenId> prompt,
                       std::span<const TokenId> allowed);

/// Binary checkpoint: "TWDP", u32 version, config text block, manifest of
/// (name, shape, byte offset) entries, then little-endian f64 parameter data.
void save_checkpoint(const TinyTransformer& model, const std::string& path);
TinyTransformer load_checkpoint(const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace twdpo::lm
