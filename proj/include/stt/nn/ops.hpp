#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stt/nn/tape.hpp"

// Differentiable operations on tape variables. Every op validates shapes and
// throws ShapeError naming both operand shapes on mismatch.
namespace stt::nn {

// Elementwise a + b. `b` may equal `a`'s shape or a trailing suffix of it, in
// which case it is broadcast over the leading dimensions.
template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T factor);
template <class T> Var<T> relu(Var<T> a);

// Batched matrix product a[..., m, k] * b[..., k, n]. Batch dimensions must
// match exactly, or `b` may be rank 2 and is then shared across the batch.
template <class T> Var<T> matmul(Var<T> a, Var<T> b);

template <class T> Var<T> transpose(Var<T> a);  // swaps the last two axes
template <class T> Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes);
template <class T> Var<T> reshape(Var<T> a, Shape shape);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <class T> std::vector<Var<T>> split(Var<T> a, const std::vector<std::size_t>& sizes, std::size_t axis);

// Max-subtracted softmax. NaN inputs propagate to NaN outputs.
template <class T> Var<T> softmax(Var<T> a, std::size_t axis);

template <class T> Var<T> sum(Var<T> a);                        // -> shape {1}
template <class T> Var<T> sum_axis(Var<T> a, std::size_t axis);  // removes `axis`
template <class T> Var<T> mean_last(Var<T> a);                  // removes last axis

// x[N, in] * w[in, out] + b[out]
template <class T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

// Convolution over axis 2 of x[N, C_in, T, V] with kernel w[C_out, C_in, K]
// (a (K,1) kernel), "same" padding (K-1)/2, K odd. Output T is ceil(T/stride).
template <class T> Var<T> conv_temporal(Var<T> x, Var<T> w, Var<T> b, std::size_t stride);

// Scaled dot-product attention over the joint axis, fused so that only the
// softmax weights are kept for the backward pass. q, k, v are [B, H, V, d];
// bias and structure are [V, V] and broadcast over B and H:
//   W = softmax(scale * q k^T + bias [+ structure])   (structure in logits if pre)
//   out = (W [+ structure]) v                          (structure after softmax if !pre)
template <class T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, Var<T> bias, Var<T> structure, T scale, bool pre);

// The softmax weights W of attention_core, [B, H, V, V]; not differentiable.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias,
                            const Tensor<T>& structure, T scale, bool pre);

enum class Mode { train, eval };

template <class T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.9);  // running = momentum * running + (1 - momentum) * batch
  T eps = T(1e-5);
};

// Per-channel normalization of x[N, C, ...] over every axis except 1.
// Train mode uses batch statistics (biased variance) and updates the running
// statistics with the unbiased batch variance. Eval mode uses running stats.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T> state, Mode mode);

// Mean over the batch of -log softmax(logits)[label].
template <class T> Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);

// Gradient-rule fault injection, used by the gradient checker to prove it
// detects broken backward rules. Never enabled in normal operation.
enum class FaultSite { none, matmul, softmax, relu, conv, batchnorm, add };
void set_sign_flip(FaultSite site);
FaultSite sign_flip();

// While set, every relu appends the sign pattern (input > 0) of its input to
// `trace` on the calling thread. Lets the gradient checker tell kink
// crossings apart from wrong gradients. nullptr disables.
void set_relu_trace(std::vector<bool>* trace);

}  // namespace stt::nn
