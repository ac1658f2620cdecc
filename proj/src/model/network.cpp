#include "stt/model/network.hpp"

#include <cmath>
#include <random>

namespace stt::model {

using nn::Mode;
using nn::Parameter;
using nn::Shape;
using nn::ShapeError;
using nn::Tape;
using nn::Tensor;
using nn::Var;

namespace {

// Frozen parameters enter the tape as constants so no gradient work is spent
// on them.
template <class T>
Var<T> bind(Tape<T>& tape, Parameter<T>& p) {
  return p.frozen ? tape.constant(p.value) : tape.parameter(p);
}

void expect_shape(const char* what, const Shape& got, const Shape& want) {
  if (got != want)
    throw ShapeError(std::string(what) + ": expected shape " + nn::shape_str(want) + ", got " +
                     nn::shape_str(got));
}

bool is_fc(const std::string& name) { return name.starts_with("fc."); }

}  // namespace

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> out(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

template <class T>
AttentionResult<T> spatial_attention(Var<T> x, const AttentionInputs<T>& p, std::size_t heads,
                                     std::size_t head_dim, Fusion fusion, bool want_weights) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("spatial_attention: input must be [NT, V, C], got " + nn::shape_str(xs));
  const std::size_t B = xs[0], V = xs[1], C = xs[2];
  const std::size_t hd = heads * head_dim;
  expect_shape("spatial_attention W_q", p.wq.shape(), {C, hd});
  expect_shape("spatial_attention W_k", p.wk.shape(), {C, hd});
  expect_shape("spatial_attention W_v", p.wv.shape(), {C, hd});
  if (p.wo.shape().size() != 2 || p.wo.shape()[0] != hd)
    throw ShapeError("spatial_attention W_o: expected [" + std::to_string(hd) + ", C_out], got " +
                     nn::shape_str(p.wo.shape()));
  const std::size_t c_out = p.wo.shape()[1];
  expect_shape("spatial_attention b_o", p.bo.shape(), {c_out});
  expect_shape("spatial_attention positional", p.positional.shape(), {V, V});
  expect_shape("spatial_attention adjacency", p.adjacency.shape(), {AdjacencyPartitions::kPartitions, V, V});

  const auto project = [&](Var<T> w) {
    return nn::permute(nn::reshape(nn::matmul(x, w), {B, V, heads, head_dim}), {0, 2, 1, 3});
  };
  const Var<T> q = project(p.wq);
  const Var<T> k = project(p.wk);
  const Var<T> v = project(p.wv);
  const Var<T> structure = nn::sum_axis(p.adjacency, 0);
  const T scale = T(1) / std::sqrt(T(head_dim));
  const bool pre = fusion == Fusion::pre;

  AttentionResult<T> result;
  if (want_weights)
    result.weights = nn::attention_weights(q.value(), k.value(), p.positional.value(), structure.value(), scale, pre);
  Var<T> out = nn::attention_core(q, k, v, p.positional, structure, scale, pre);
  out = nn::permute(out, {0, 2, 1, 3});
  out = nn::linear(nn::reshape(out, {B * V, hd}), p.wo, p.bo);
  result.output = nn::reshape(out, {B, V, c_out});
  return result;
}

template <class T>
Parameter<T>& ParameterStore<T>::add(std::string name, Tensor<T> value) {
  for (const auto& p : params_)
    if (p->name == name) throw std::logic_error("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value)));
  return *params_.back();
}

template <class T>
Tensor<T>& ParameterStore<T>::add_buffer(std::string name, Tensor<T> value) {
  buffers_.emplace_back(std::move(name), std::make_unique<Tensor<T>>(std::move(value)));
  return *buffers_.back().second;
}

template <class T>
Parameter<T>& ParameterStore<T>::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("no parameter named " + name);
}

template <class T>
std::vector<Parameter<T>*> ParameterStore<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> ParameterStore<T>::buffers() const {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (const auto& [name, t] : buffers_) out.emplace_back(name, t.get());
  return out;
}

template <class T>
void ParameterStore<T>::replace(const std::string& name, Tensor<T> value) {
  Parameter<T>& p = get(name);
  p.value = std::move(value);
  p.zero_grad();
}

template <class T>
BatchNormLayer<T> BatchNormLayer<T>::create(ParameterStore<T>& store, const std::string& name,
                                            std::size_t channels) {
  BatchNormLayer bn;
  bn.gamma = &store.add(name + ".gamma", Tensor<T>({channels}, T(1)));
  bn.beta = &store.add(name + ".beta", Tensor<T>({channels}, T(0)));
  bn.running_mean = &store.add_buffer(name + ".running_mean", Tensor<T>({channels}, T(0)));
  bn.running_var = &store.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)));
  return bn;
}

template <class T>
Var<T> BatchNormLayer<T>::operator()(Var<T> x, Mode mode) const {
  Tape<T>& tape = x.tape();
  nn::BatchNormState<T> state;
  state.running_mean = running_mean;
  state.running_var = running_var;
  return nn::batch_norm(x, bind(tape, *gamma), bind(tape, *beta), state, mode);
}

template <class T>
ConvLayer<T> ConvLayer<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t c_in,
                                  std::size_t c_out, std::size_t kernel, std::size_t stride, Rng& rng) {
  ConvLayer conv;
  const double bound = 1.0 / std::sqrt(double(c_in * kernel));
  conv.weight = &store.add(name + ".weight", uniform_tensor<T>({c_out, c_in, kernel}, bound, rng));
  conv.bias = &store.add(name + ".bias", uniform_tensor<T>({c_out}, bound, rng));
  conv.stride = stride;
  return conv;
}

template <class T>
Var<T> ConvLayer<T>::operator()(Var<T> x) const {
  Tape<T>& tape = x.tape();
  return nn::conv_temporal(x, bind(tape, *weight), bind(tape, *bias), stride);
}

template <class T>
AttentionLayer<T> AttentionLayer<T>::create(ParameterStore<T>& store, const std::string& name,
                                            std::size_t c_in, std::size_t c_out, std::size_t heads,
                                            std::size_t head_dim, Fusion fusion,
                                            const AdjacencyPartitions& adjacency, Rng& rng) {
  AttentionLayer a;
  const std::size_t hd = heads * head_dim;
  const double b_in = 1.0 / std::sqrt(double(c_in));
  const double b_out = 1.0 / std::sqrt(double(hd));
  a.wq = &store.add(name + ".wq", uniform_tensor<T>({c_in, hd}, b_in, rng));
  a.wk = &store.add(name + ".wk", uniform_tensor<T>({c_in, hd}, b_in, rng));
  a.wv = &store.add(name + ".wv", uniform_tensor<T>({c_in, hd}, b_in, rng));
  a.wo = &store.add(name + ".wo", uniform_tensor<T>({hd, c_out}, b_out, rng));
  a.bo = &store.add(name + ".bo", uniform_tensor<T>({c_out}, b_out, rng));
  a.adjacency = &store.add(name + ".adjacency", adjacency.normalized.cast<T>());
  a.adjacency->frozen = !adjacency.trainable;
  a.heads = heads;
  a.head_dim = head_dim;
  a.fusion = fusion;
  return a;
}

template <class T>
AttentionResult<T> AttentionLayer<T>::operator()(Var<T> x, Var<T> positional, bool want_weights) const {
  Tape<T>& tape = x.tape();
  AttentionInputs<T> in{bind(tape, *wq), bind(tape, *wk), bind(tape, *wv), bind(tape, *wo),
                        bind(tape, *bo), positional,      bind(tape, *adjacency)};
  return spatial_attention(x, in, heads, head_dim, fusion, want_weights);
}

template <class T>
StBlock<T> StBlock<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t c_in,
                              std::size_t c_out, std::size_t stride, const NetworkConfig& cfg,
                              const AdjacencyPartitions& adjacency, Rng& rng) {
  StBlock b;
  b.c_in = c_in;
  b.c_out = c_out;
  b.attention = AttentionLayer<T>::create(store, name + ".attn", c_in, c_out, cfg.heads, cfg.head_dim(c_out),
                                          cfg.fusion, adjacency, rng);
  b.bn_spatial = BatchNormLayer<T>::create(store, name + ".bn_s", c_out);
  if (c_in != c_out) b.residual_spatial = ConvLayer<T>::create(store, name + ".res_s", c_in, c_out, 1, 1, rng);
  b.tcn = ConvLayer<T>::create(store, name + ".tcn", c_out, c_out, cfg.temporal_kernel, stride, rng);
  b.bn_temporal = BatchNormLayer<T>::create(store, name + ".bn_t", c_out);
  if (stride != 1) b.residual_temporal = ConvLayer<T>::create(store, name + ".res_t", c_out, c_out, 1, stride, rng);
  return b;
}

template <class T>
Var<T> StBlock<T>::operator()(Var<T> x, Var<T> positional, Mode mode) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != c_in)
    throw ShapeError("st_block: expected [N, " + std::to_string(c_in) + ", T, V], got " + nn::shape_str(s));
  const std::size_t N = s[0], T_ = s[2], V = s[3];

  Var<T> xs = nn::reshape(nn::permute(x, {0, 2, 3, 1}), {N * T_, V, c_in});
  Var<T> a = attention(xs, positional).output;
  a = nn::permute(nn::reshape(a, {N, T_, V, c_out}), {0, 3, 1, 2});
  const Var<T> res_s = residual_spatial ? (*residual_spatial)(x) : x;
  const Var<T> h = nn::relu(nn::add(bn_spatial(a, mode), res_s));

  const Var<T> t = bn_temporal(tcn(h), mode);
  const Var<T> res_t = residual_temporal ? (*residual_temporal)(h) : h;
  return nn::relu(nn::add(t, res_t));
}

template <class T>
Network<T>::Network(const NetworkConfig& config, std::uint64_t seed)
    : config_(config), store_(std::make_unique<ParameterStore<T>>()) {
  config_.validate();
  Rng rng = make_rng(seed, 0);
  const std::size_t V = config_.num_joints;
  const AdjacencyPartitions adjacency = build_adjacency(config_.skeleton(), V, config_.root_joint);

  data_bn_ = BatchNormLayer<T>::create(*store_, "data_bn", config_.in_channels * V);
  positional_ = &store_->add("positional", Tensor<T>({V, V}));
  const auto channels = config_.channels();
  std::size_t c_in = config_.in_channels;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    blocks_.push_back(StBlock<T>::create(*store_, "blocks." + std::to_string(i), c_in, channels[i],
                                         config_.strides[i], config_, adjacency, rng));
    c_in = channels[i];
  }
  init_fc(config_.num_classes, rng);
}

template <class T>
void Network<T>::init_fc(std::size_t num_classes, Rng& rng) {
  const std::size_t c = feature_dim();
  const double bound = 1.0 / std::sqrt(double(c));
  Tensor<T> w = uniform_tensor<T>({c, num_classes}, bound, rng);
  Tensor<T> b = uniform_tensor<T>({num_classes}, bound, rng);
  if (fc_weight_ == nullptr) {
    fc_weight_ = &store_->add("fc.weight", std::move(w));
    fc_bias_ = &store_->add("fc.bias", std::move(b));
  } else {
    store_->replace("fc.weight", std::move(w));
    store_->replace("fc.bias", std::move(b));
  }
  config_.num_classes = num_classes;
}

template <class T>
Var<T> Network<T>::features(Tape<T>& tape, const Tensor<T>& x) const {
  const Shape& s = x.shape();
  const std::size_t C = config_.in_channels, T_ = config_.num_frames, V = config_.num_joints;
  if (s.size() != 4 || s[1] != C || s[2] != T_ || s[3] != V)
    throw ShapeError("network input: expected [N, " + std::to_string(C) + ", " + std::to_string(T_) + ", " +
                     std::to_string(V) + "], got " + nn::shape_str(s));
  const std::size_t N = s[0];
  const Mode mode = backbone_mode();

  Var<T> h = nn::reshape(nn::permute(tape.constant(x), {0, 1, 3, 2}), {N, C * V, T_});
  h = nn::permute(nn::reshape(data_bn_(h, mode), {N, C, V, T_}), {0, 1, 3, 2});
  const Var<T> positional = bind(tape, *positional_);
  for (const auto& block : blocks_) h = block(h, positional, mode);
  const Shape& hs = h.shape();
  return nn::mean_last(nn::reshape(h, {N, hs[1], hs[2] * hs[3]}));
}

template <class T>
Var<T> Network<T>::classify(Var<T> features) const {
  Tape<T>& tape = features.tape();
  return nn::linear(features, bind(tape, *fc_weight_), bind(tape, *fc_bias_));
}

template <class T>
Var<T> Network<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  return classify(features(tape, x));
}

template <class T>
std::vector<Parameter<T>*> Network<T>::trainable_parameters() const {
  std::vector<Parameter<T>*> out;
  for (auto* p : parameters())
    if (!p->frozen) out.push_back(p);
  return out;
}

template <class T>
nn::Checkpoint Network<T>::to_checkpoint() const {
  nn::Checkpoint ckpt;
  for (const auto* p : parameters()) ckpt.add(p->name, p->value.template cast<float>());
  for (const auto& [name, t] : buffers()) ckpt.add(name, t->template cast<float>());
  return ckpt;
}

template <class T>
void Network<T>::load_checkpoint(const nn::Checkpoint& ckpt, bool skip_fc) {
  std::size_t expected = 0;
  const auto load = [&](const std::string& name, Tensor<T>& dst) {
    const nn::NamedTensor* src = ckpt.find(name);
    if (src == nullptr) throw CheckpointMismatch("checkpoint has no entry '" + name + "'");
    if (src->value.shape() != dst.shape())
      throw CheckpointMismatch("checkpoint entry '" + name + "' has shape " + nn::shape_str(src->value.shape()) +
                               ", network expects " + nn::shape_str(dst.shape()));
    dst = src->value.template cast<T>();
    ++expected;
  };
  for (auto* p : parameters()) {
    if (skip_fc && is_fc(p->name)) continue;
    load(p->name, p->value);
  }
  for (auto& [name, t] : buffers()) load(name, *t);
  for (const auto& e : ckpt.entries) {
    if (skip_fc && is_fc(e.name)) continue;
    --expected;
  }
  if (expected != 0) throw CheckpointMismatch("checkpoint holds entries this network does not have");
}

template <class T>
void Network<T>::freeze_and_reinit_fc(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0) throw std::invalid_argument("freeze_and_reinit_fc: num_classes must be positive");
  for (auto* p : parameters()) p->frozen = !is_fc(p->name);
  Rng rng = make_rng(seed, 0xFC);
  init_fc(num_classes, rng);
  backbone_frozen_ = true;
}

#define STT_INSTANTIATE_MODEL(T)                                                                    \
  template nn::Tensor<T> uniform_tensor<T>(nn::Shape, double, Rng&);                                \
  template AttentionResult<T> spatial_attention<T>(nn::Var<T>, const AttentionInputs<T>&, std::size_t, \
                                                   std::size_t, Fusion, bool);                            \
  template class ParameterStore<T>;                                                                 \
  template struct BatchNormLayer<T>;                                                                \
  template struct ConvLayer<T>;                                                                     \
  template struct AttentionLayer<T>;                                                                \
  template struct StBlock<T>;                                                                       \
  template class Network<T>;

STT_INSTANTIATE_MODEL(float)
STT_INSTANTIATE_MODEL(double)

}  // namespace stt::model
