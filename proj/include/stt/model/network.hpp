#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stt/model/adjacency.hpp"
#include "stt/model/config.hpp"
#include "stt/nn/checkpoint.hpp"
#include "stt/nn/ops.hpp"
#include "stt/rng.hpp"

namespace stt::model {

class CheckpointMismatch : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Tape handles for one attention layer. `positional` is [V, V]; `adjacency`
// is [K, V, V] and enters summed over K.
template <class T>
struct AttentionInputs {
  nn::Var<T> wq, wk, wv;  // [C_in, heads * head_dim]
  nn::Var<T> wo;          // [heads * head_dim, C_out]
  nn::Var<T> bo;          // [C_out]
  nn::Var<T> positional;
  nn::Var<T> adjacency;
};

template <class T>
struct AttentionResult {
  nn::Var<T> output;     // [NT, V, C_out]
  nn::Tensor<T> weights;  // softmax scores [NT, heads, V, V]; filled only on request
};

// Multi-head self-attention across joints: x is [NT, V, C_in].
template <class T>
AttentionResult<T> spatial_attention(nn::Var<T> x, const AttentionInputs<T>& p, std::size_t heads,
                                     std::size_t head_dim, Fusion fusion, bool want_weights = false);

// Registry of named parameters and buffers with stable addresses.
template <class T>
class ParameterStore {
public:
  nn::Parameter<T>& add(std::string name, nn::Tensor<T> value);
  nn::Tensor<T>& add_buffer(std::string name, nn::Tensor<T> value);
  nn::Parameter<T>& get(const std::string& name);
  std::vector<nn::Parameter<T>*> parameters() const;
  std::vector<std::pair<std::string, nn::Tensor<T>*>> buffers() const;
  void replace(const std::string& name, nn::Tensor<T> value);

private:
  std::vector<std::unique_ptr<nn::Parameter<T>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<nn::Tensor<T>>>> buffers_;
};

template <class T>
struct BatchNormLayer {
  nn::Parameter<T>* gamma = nullptr;
  nn::Parameter<T>* beta = nullptr;
  nn::Tensor<T>* running_mean = nullptr;
  nn::Tensor<T>* running_var = nullptr;

  static BatchNormLayer create(ParameterStore<T>& store, const std::string& name, std::size_t channels);
  nn::Var<T> operator()(nn::Var<T> x, nn::Mode mode) const;
};

// Temporal convolution with kernel (K, 1); K = 1 gives a pointwise conv.
template <class T>
struct ConvLayer {
  nn::Parameter<T>* weight = nullptr;  // [C_out, C_in, K]
  nn::Parameter<T>* bias = nullptr;    // [C_out]
  std::size_t stride = 1;

  static ConvLayer create(ParameterStore<T>& store, const std::string& name, std::size_t c_in,
                          std::size_t c_out, std::size_t kernel, std::size_t stride, Rng& rng);
  nn::Var<T> operator()(nn::Var<T> x) const;
};

template <class T>
struct AttentionLayer {
  nn::Parameter<T>* wq = nullptr;
  nn::Parameter<T>* wk = nullptr;
  nn::Parameter<T>* wv = nullptr;
  nn::Parameter<T>* wo = nullptr;
  nn::Parameter<T>* bo = nullptr;
  nn::Parameter<T>* adjacency = nullptr;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  Fusion fusion = Fusion::post;

  static AttentionLayer create(ParameterStore<T>& store, const std::string& name, std::size_t c_in,
                               std::size_t c_out, std::size_t heads, std::size_t head_dim, Fusion fusion,
                               const AdjacencyPartitions& adjacency, Rng& rng);
  AttentionResult<T> operator()(nn::Var<T> x, nn::Var<T> positional, bool want_weights = false) const;
};

// One attention block on x[N, C_in, T, V]: spatial attention, BN, residual,
// ReLU, then temporal conv, BN, residual, ReLU.
template <class T>
struct StBlock {
  AttentionLayer<T> attention;
  BatchNormLayer<T> bn_spatial;
  std::optional<ConvLayer<T>> residual_spatial;
  ConvLayer<T> tcn;
  BatchNormLayer<T> bn_temporal;
  std::optional<ConvLayer<T>> residual_temporal;
  std::size_t c_in = 0, c_out = 0;

  static StBlock create(ParameterStore<T>& store, const std::string& name, std::size_t c_in,
                        std::size_t c_out, std::size_t stride, const NetworkConfig& cfg,
                        const AdjacencyPartitions& adjacency, Rng& rng);
  nn::Var<T> operator()(nn::Var<T> x, nn::Var<T> positional, nn::Mode mode) const;
};

template <class T>
class Network {
public:
  Network(const NetworkConfig& config, std::uint64_t seed);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkConfig& config() const noexcept { return config_; }
  std::size_t feature_dim() const { return config_.channels().back(); }

  // x is [N, C, T, V]. Returns pooled features [N, C_last].
  nn::Var<T> features(nn::Tape<T>& tape, const nn::Tensor<T>& x) const;
  nn::Var<T> classify(nn::Var<T> features) const;
  nn::Var<T> forward(nn::Tape<T>& tape, const nn::Tensor<T>& x) const;

  void set_mode(nn::Mode mode) noexcept { mode_ = mode; }
  nn::Mode mode() const noexcept { return mode_; }
  // Mode used by backbone batch norms: eval once the backbone is frozen.
  nn::Mode backbone_mode() const noexcept { return backbone_frozen_ ? nn::Mode::eval : mode_; }

  std::vector<nn::Parameter<T>*> parameters() const { return store_->parameters(); }
  std::vector<nn::Parameter<T>*> trainable_parameters() const;
  std::vector<std::pair<std::string, nn::Tensor<T>*>> buffers() const { return store_->buffers(); }
  nn::Parameter<T>& parameter(const std::string& name) { return store_->get(name); }

  const std::vector<StBlock<T>>& blocks() const noexcept { return blocks_; }

  nn::Checkpoint to_checkpoint() const;
  // Copies every parameter and buffer from `ckpt`. With skip_fc the classifier
  // keeps its current values, which allows loading a backbone trained on a
  // different class count. Throws CheckpointMismatch on missing names or
  // shape differences.
  void load_checkpoint(const nn::Checkpoint& ckpt, bool skip_fc = false);

  // Freezes everything but the classifier, switches backbone batch norms to
  // running statistics and reinitializes the classifier for `num_classes`.
  void freeze_and_reinit_fc(std::size_t num_classes, std::uint64_t seed);
  bool backbone_frozen() const noexcept { return backbone_frozen_; }

private:
  void init_fc(std::size_t num_classes, Rng& rng);

  NetworkConfig config_;
  std::unique_ptr<ParameterStore<T>> store_;
  BatchNormLayer<T> data_bn_;
  nn::Parameter<T>* positional_ = nullptr;
  std::vector<StBlock<T>> blocks_;
  nn::Parameter<T>* fc_weight_ = nullptr;
  nn::Parameter<T>* fc_bias_ = nullptr;
  nn::Mode mode_ = nn::Mode::train;
  bool backbone_frozen_ = false;
};

// Uniform in [-bound, bound], drawn in double so float and double networks
// built from the same seed agree.
template <class T>
nn::Tensor<T> uniform_tensor(nn::Shape shape, double bound, Rng& rng);

}  // namespace stt::model
