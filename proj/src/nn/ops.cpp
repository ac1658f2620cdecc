#include "stt/nn/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace stt::nn {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

std::atomic<FaultSite> g_fault{FaultSite::none};
thread_local std::vector<bool>* t_relu_trace = nullptr;

template <class T>
T fault_sign(FaultSite site) {
  return g_fault.load(std::memory_order_relaxed) == site ? T(-1) : T(1);
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// c[m, n] += a[m, k] * b[k, n], all row-major.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  Eigen::Map<Mat> cm(c, M, N);
  cm.noalias() += Eigen::Map<const Mat>(a, M, K) * Eigen::Map<const Mat>(b, K, N);
}

// dst[c, r] = src[r, c]
template <class T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src, T factor = T(1)) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += factor * s[i];
}

Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <class T>
Tensor<T> permute_data(const Tensor<T>& in, const std::vector<std::size_t>& axes) {
  const Shape& ishape = in.shape();
  const std::size_t rank = ishape.size();
  Shape oshape(rank);
  for (std::size_t i = 0; i < rank; ++i) oshape[i] = ishape[axes[i]];
  const Shape istr = strides_of(ishape);
  Shape step(rank);  // input stride for each output axis
  for (std::size_t i = 0; i < rank; ++i) step[i] = istr[axes[i]];

  Tensor<T> out(oshape);
  if (out.size() == 0) return out;
  T* o = out.raw();
  const T* src = in.raw();
  const std::size_t inner = oshape[rank - 1];
  const std::size_t inner_step = step[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t base = 0;
  const std::size_t rows = out.size() / inner;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < inner; ++j) *o++ = src[base + j * inner_step];
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      base += step[ax];
      if (idx[ax] < oshape[ax]) break;
      base -= step[ax] * oshape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}


struct ConvGeometry {
  std::size_t Ci, Ti, V, K, pad, stride, To;
};

// Valid output frames [t0, t1) for kernel tap k: 0 <= t*stride + k - pad < Ti.
inline std::pair<std::size_t, std::size_t> tap_range(const ConvGeometry& g, std::size_t k) {
  std::size_t t0 = 0;
  if (k < g.pad) t0 = (g.pad - k + g.stride - 1) / g.stride;
  std::size_t t1 = 0;
  if (g.Ti + g.pad > k) t1 = std::min(g.To, (g.Ti + g.pad - k + g.stride - 1) / g.stride);
  return {t0, std::max(t0, t1)};
}

// col[(c*K + k), (t*V + v)] = x[c, t*stride + k - pad, v], zero outside.
template <class T>
void im2col(const T* x, T* col, const ConvGeometry& g) {
  const std::size_t L = g.To * g.V;
  for (std::size_t c = 0; c < g.Ci; ++c) {
    const T* xp = x + c * g.Ti * g.V;
    for (std::size_t k = 0; k < g.K; ++k) {
      T* row = col + (c * g.K + k) * L;
      const auto [t0, t1] = tap_range(g, k);
      std::fill(row, row + t0 * g.V, T(0));
      std::fill(row + t1 * g.V, row + L, T(0));
      if (g.stride == 1) {
        if (t1 > t0) std::copy_n(xp + (t0 + k - g.pad) * g.V, (t1 - t0) * g.V, row + t0 * g.V);
      } else {
        for (std::size_t t = t0; t < t1; ++t)
          std::copy_n(xp + (t * g.stride + k - g.pad) * g.V, g.V, row + t * g.V);
      }
    }
  }
}

// Adjoint of im2col: dx[c, t*stride + k - pad, v] += col[(c*K + k), (t*V + v)].
template <class T>
void col2im_acc(const T* col, T* dx, const ConvGeometry& g) {
  const std::size_t L = g.To * g.V;
  for (std::size_t c = 0; c < g.Ci; ++c) {
    T* dp = dx + c * g.Ti * g.V;
    for (std::size_t k = 0; k < g.K; ++k) {
      const T* row = col + (c * g.K + k) * L;
      const auto [t0, t1] = tap_range(g, k);
      for (std::size_t t = t0; t < t1; ++t) {
        T* d = dp + (t * g.stride + k - g.pad) * g.V;
        const T* s = row + t * g.V;
        for (std::size_t v = 0; v < g.V; ++v) d[v] += s[v];
      }
    }
  }
}

}  // namespace

void set_sign_flip(FaultSite site) { g_fault.store(site); }
void set_relu_trace(std::vector<bool>* trace) { t_relu_trace = trace; }
FaultSite sign_flip() { return g_fault.load(); }

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (!is_suffix(av.shape(), bv.shape())) mismatch("add", av.shape(), bv.shape());
  const std::size_t nb = bv.size();
  Tensor<T> out = av;
  T* o = out.raw();
  const T* bp = bv.raw();
  for (std::size_t i = 0; i < out.size(); i += nb)
    for (std::size_t j = 0; j < nb; ++j) o[i + j] += bp[j];

  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a, b}, [&tape, a, b, nb](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::add);
    const Tensor<T>& g = tape.grad(id);
    if (tape.requires_grad(a.id())) accumulate(tape.grad(a.id()), g, sgn);
    if (tape.requires_grad(b.id())) {
      T* db = tape.grad(b.id()).raw();
      const T* gp = g.raw();
      for (std::size_t i = 0; i < g.size(); i += nb)
        for (std::size_t j = 0; j < nb; ++j) db[j] += sgn * gp[i + j];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) mismatch("mul", av.shape(), bv.shape());
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a, b}, [&tape, a, b](std::size_t id) {
    const Tensor<T>& g = tape.grad(id);
    const Tensor<T>& av = tape.value(a.id());
    const Tensor<T>& bv = tape.value(b.id());
    if (tape.requires_grad(a.id())) {
      Tensor<T>& da = tape.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b.id())) {
      Tensor<T>& db = tape.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.storage()) x *= factor;
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a}, [&tape, a, factor](std::size_t id) {
    accumulate(tape.grad(a.id()), tape.grad(id), factor);
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  if (t_relu_trace != nullptr)
    for (const T x : out.storage()) t_relu_trace->push_back(x > T(0));
  for (auto& x : out.storage()) x = x > T(0) ? x : T(0);
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a}, [&tape, a](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::relu);
    const Tensor<T>& g = tape.grad(id);
    const Tensor<T>& x = tape.value(a.id());
    Tensor<T>& da = tape.grad(a.id());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) da[i] += sgn * g[i];
  });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) mismatch("matmul", as, bs);
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) mismatch("matmul", as, bs);
  const bool shared_b = bs.size() == 2;
  if (!shared_b && (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())))
    mismatch("matmul", as, bs);
  const std::size_t batch = a.value().size() / (m * k);

  Shape os = as;
  os.back() = n;
  Tensor<T> out(os);
  if (shared_b) {
    gemm_acc(a.value().raw(), b.value().raw(), out.raw(), batch * m, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      gemm_acc(a.value().raw() + i * m * k, b.value().raw() + i * k * n, out.raw() + i * m * n, m,
               k, n);
  }

  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a, b}, [&tape, a, b, m, k, n, batch, shared_b](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::matmul);
    const T* g = tape.grad(id).raw();
    const T* av = tape.value(a.id()).raw();
    const T* bv = tape.value(b.id()).raw();
    const std::size_t rows = shared_b ? batch * m : m;
    const std::size_t reps = shared_b ? 1 : batch;
    std::vector<T> tmp;
    if (tape.requires_grad(a.id())) {
      // da = g * b^T
      T* da = tape.grad(a.id()).raw();
      tmp.assign(n * k, T(0));
      for (std::size_t r = 0; r < reps; ++r) {
        transpose_into(bv + r * k * n, tmp.data(), k, n);
        if (sgn < 0)
          for (auto& x : tmp) x = -x;
        gemm_acc(g + r * rows * n, tmp.data(), da + r * rows * k, rows, n, k);
      }
    }
    if (tape.requires_grad(b.id())) {
      // db = a^T * g
      T* db = tape.grad(b.id()).raw();
      tmp.assign(k * rows, T(0));
      for (std::size_t r = 0; r < reps; ++r) {
        transpose_into(av + r * rows * k, tmp.data(), rows, k);
        if (sgn < 0)
          for (auto& x : tmp) x = -x;
        gemm_acc(tmp.data(), g + r * rows * n, db + (shared_b ? 0 : r * k * n), k, rows, n);
      }
    }
  });
}

template <class T>
Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes) {
  const std::size_t rank = a.shape().size();
  std::vector<std::size_t> inverse(rank, rank);
  if (axes.size() != rank) throw ShapeError("permute: axes rank mismatch for " + shape_str(a.shape()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || inverse[axes[i]] != rank)
      throw ShapeError("permute: invalid axes for " + shape_str(a.shape()));
    inverse[axes[i]] = i;
  }
  Tape<T>& tape = a.tape();
  return tape.record(permute_data(a.value(), axes), {a}, [&tape, a, inverse](std::size_t id) {
    accumulate(tape.grad(a.id()), permute_data(tape.grad(id), inverse));
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const std::size_t rank = a.shape().size();
  if (rank < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(rank);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[rank - 1], axes[rank - 2]);
  return permute(a, axes);
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>& tape = a.tape();
  return tape.record(a.value().reshaped(std::move(shape)), {a}, [&tape, a](std::size_t id) {
    Tensor<T>& da = tape.grad(a.id());
    const Tensor<T>& g = tape.grad(id);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape os = parts.front().shape();
  if (axis >= os.size()) throw ShapeError("concat axis out of range for " + shape_str(os));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) mismatch("concat", os, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != os[i]) mismatch("concat", os, s);
    total += s[axis];
  }
  os[axis] = total;
  const AxisSplit sp = split_at(os, axis);
  Tensor<T> out(os);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * sp.inner;
    const T* src = p.value().raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(src + o * w, w, out.raw() + o * total * sp.inner + off);
    off += w;
    widths.push_back(w);
  }
  Tape<T>& tape = parts.front().tape();
  const std::size_t row = total * sp.inner;
  return tape.record(std::move(out), parts, [&tape, parts, widths, sp, row](std::size_t id) {
    const T* g = tape.grad(id).raw();
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t w = widths[i];
      if (tape.requires_grad(parts[i].id())) {
        T* d = tape.grad(parts[i].id()).raw();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < w; ++j) d[o * w + j] += g[o * row + off + j];
      }
      off += w;
    }
  });
}

template <class T>
std::vector<Var<T>> split(Var<T> a, const std::vector<std::size_t>& sizes, std::size_t axis) {
  const Shape as = a.shape();  // copy: record() may reallocate the node storage
  const AxisSplit sp = split_at(as, axis);
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != sp.n)
    throw ShapeError("split sizes do not cover axis " + std::to_string(axis) + " of " + shape_str(as));
  std::vector<Var<T>> out;
  Tape<T>& tape = a.tape();
  const std::size_t row = sp.n * sp.inner;
  std::size_t off = 0;
  for (std::size_t s : sizes) {
    Shape ps = as;
    ps[axis] = s;
    const std::size_t w = s * sp.inner;
    Tensor<T> part(ps);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(a.value().raw() + o * row + off, w, part.raw() + o * w);
    out.push_back(tape.record(std::move(part), {a}, [&tape, a, sp, row, off, w](std::size_t id) {
      const T* g = tape.grad(id).raw();
      T* d = tape.grad(a.id()).raw();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < w; ++j) d[o * row + off + j] += g[o * w + j];
    }));
    off += w;
  }
  return out;
}

template <class T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const AxisSplit sp = split_at(a.shape(), axis);
  Tensor<T> out = a.value();
  T* y = out.raw();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      T* base = y + o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, base[j * sp.inner]);
      if (std::isnan(mx)) mx = T(0);
      T total = T(0);
      for (std::size_t j = 0; j < sp.n; ++j) {
        T& v = base[j * sp.inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (std::size_t j = 0; j < sp.n; ++j) base[j * sp.inner] /= total;
    }
  }
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a}, [&tape, a, sp](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::softmax);
    const T* g = tape.grad(id).raw();
    const T* y = tape.value(id).raw();
    T* d = tape.grad(a.id()).raw();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t i = base + j * sp.inner;
          d[i] += sgn * y[i] * (g[i] - dot);
        }
      }
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T total = T(0);
  for (T x : a.value().data()) total += x;
  Tape<T>& tape = a.tape();
  return tape.record(Tensor<T>::scalar(total), {a}, [&tape, a](std::size_t id) {
    const T g = tape.grad(id)[0];
    for (auto& x : tape.grad(a.id()).storage()) x += g;
  });
}

template <class T>
Var<T> sum_axis(Var<T> a, std::size_t axis) {
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape os = a.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  Tensor<T> out(os);
  const T* x = a.value().raw();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += x[(o * sp.n + j) * sp.inner + in];
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a}, [&tape, a, sp](std::size_t id) {
    const T* g = tape.grad(id).raw();
    T* d = tape.grad(a.id()).raw();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t in = 0; in < sp.inner; ++in)
          d[(o * sp.n + j) * sp.inner + in] += g[o * sp.inner + in];
  });
}

template <class T>
Var<T> mean_last(Var<T> a) {
  const Shape& as = a.shape();
  const std::size_t n = as.back();
  Shape os(as.begin(), as.end() - 1);
  if (os.empty()) os = {1};
  Tensor<T> out(os);
  const T* x = a.value().raw();
  for (std::size_t o = 0; o < out.size(); ++o) {
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += x[o * n + j];
    out[o] = total / T(n);
  }
  Tape<T>& tape = a.tape();
  return tape.record(std::move(out), {a}, [&tape, a, n](std::size_t id) {
    const Tensor<T>& g = tape.grad(id);
    T* d = tape.grad(a.id()).raw();
    for (std::size_t o = 0; o < g.size(); ++o) {
      const T v = g[o] / T(n);
      for (std::size_t j = 0; j < n; ++j) d[o * n + j] += v;
    }
  });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1 ||
      b.shape()[0] != w.shape()[1])
    mismatch("linear", x.shape(), w.shape());
  return add(matmul(x, w), b);
}

template <class T>
Var<T> conv_temporal(Var<T> x, Var<T> w, Var<T> b, std::size_t stride) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 || stride == 0)
    mismatch("conv_temporal", xs, ws);
  if (b.shape() != Shape{ws[0]}) mismatch("conv_temporal bias", ws, b.shape());
  const std::size_t N = xs[0], Ci = xs[1], Ti = xs[2], V = xs[3];
  const std::size_t Co = ws[0], K = ws[2];
  const ConvGeometry geo{Ci, Ti, V, K, (K - 1) / 2, stride, (Ti + stride - 1) / stride};
  const std::size_t L = geo.To * V;

  Tensor<T> out(Shape{N, Co, geo.To, V});
  const T* xv = x.value().raw();
  const T* wv = w.value().raw();
  const T* bv = b.value().raw();
  std::vector<T> col(Ci * K * L);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(xv + n * Ci * Ti * V, col.data(), geo);
    T* y = out.raw() + n * Co * L;
    for (std::size_t o = 0; o < Co; ++o) std::fill(y + o * L, y + (o + 1) * L, bv[o]);
    gemm_acc(wv, col.data(), y, Co, Ci * K, L);
  }

  Tape<T>& tape = x.tape();
  return tape.record(std::move(out), {x, w, b}, [&tape, x, w, b, N, Co, geo, L](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::conv);
    const std::size_t Ci = geo.Ci, K = geo.K, CK = Ci * K;
    const std::size_t in_plane = Ci * geo.Ti * geo.V;
    const T* g = tape.grad(id).raw();
    const T* xv = tape.value(x.id()).raw();
    const bool need_x = tape.requires_grad(x.id());
    const bool need_w = tape.requires_grad(w.id());
    if (tape.requires_grad(b.id())) {
      T* db = tape.grad(b.id()).raw();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Co; ++o) {
          const T* gp = g + (n * Co + o) * L;
          T total = T(0);
          for (std::size_t i = 0; i < L; ++i) total += gp[i];
          db[o] += sgn * total;
        }
    }
    std::vector<T> wt;  // w^T, [CK, Co]
    if (need_x) {
      wt.resize(CK * Co);
      transpose_into(tape.value(w.id()).raw(), wt.data(), Co, CK);
      if (sgn < 0)
        for (auto& v : wt) v = -v;
    }
    std::vector<T> col(CK * L), colt(need_w ? L * CK : 0), dw_acc(need_w ? Co * CK : 0, T(0));
    for (std::size_t n = 0; n < N; ++n) {
      const T* gn = g + n * Co * L;
      if (need_w) {
        im2col(xv + n * in_plane, col.data(), geo);
        transpose_into(col.data(), colt.data(), CK, L);
        gemm_acc(gn, colt.data(), dw_acc.data(), Co, L, CK);
      }
      if (need_x) {
        std::fill(col.begin(), col.end(), T(0));
        gemm_acc(wt.data(), gn, col.data(), CK, Co, L);
        col2im_acc(col.data(), tape.grad(x.id()).raw() + n * in_plane, geo);
      }
    }
    if (need_w) {
      T* dw = tape.grad(w.id()).raw();
      for (std::size_t i = 0; i < dw_acc.size(); ++i) dw[i] += sgn * dw_acc[i];
    }
  });
}

namespace {

struct AttentionDims {
  std::size_t slices, V, d;
};

template <class T>
AttentionDims check_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias,
                              const Tensor<T>& structure) {
  const Shape& qs = q.shape();
  if (qs.size() != 4 || k.shape() != qs) mismatch("attention q/k", qs, k.shape());
  const std::size_t V = qs[2];
  if (bias.shape() != Shape{V, V}) mismatch("attention bias", qs, bias.shape());
  if (structure.shape() != Shape{V, V}) mismatch("attention structure", qs, structure.shape());
  return {qs[0] * qs[1], V, qs[3]};
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fills w[V, V] with the softmax weights of one (batch, head) slice.
template <class T>
void attention_slice_weights(const T* q, const T* k, const T* bias, const T* structure, T scale, bool pre,
                             std::size_t V, std::size_t d, T* w) {
  const auto n = static_cast<Eigen::Index>(V), c = static_cast<Eigen::Index>(d);
  Eigen::Map<const RowMat<T>> Q(q, n, c), K(k, n, c);
  Eigen::Map<RowMat<T>> W(w, n, n);
  W.noalias() = scale * (Q * K.transpose());
  W += Eigen::Map<const RowMat<T>>(bias, n, n);
  if (pre) W += Eigen::Map<const RowMat<T>>(structure, n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) mx = std::max(mx, W(i, j));
    if (std::isnan(mx) || std::isinf(mx)) mx = T(0);
    W.row(i).array() -= mx;
  }
  W = W.array().exp().matrix();
  for (Eigen::Index i = 0; i < n; ++i) W.row(i) /= W.row(i).sum();
}

}  // namespace

template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias,
                            const Tensor<T>& structure, T scale, bool pre) {
  const AttentionDims dm = check_attention(q, k, bias, structure);
  Shape ws = q.shape();
  ws.back() = dm.V;
  Tensor<T> w(ws);
  const std::size_t qk = dm.V * dm.d, vv = dm.V * dm.V;
  for (std::size_t s = 0; s < dm.slices; ++s)
    attention_slice_weights(q.raw() + s * qk, k.raw() + s * qk, bias.raw(), structure.raw(), scale, pre, dm.V,
                            dm.d, w.raw() + s * vv);
  return w;
}

template <class T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, Var<T> bias, Var<T> structure, T scale, bool pre) {
  const AttentionDims dm = check_attention(q.value(), k.value(), bias.value(), structure.value());
  if (v.shape() != q.shape()) mismatch("attention v", q.shape(), v.shape());
  const std::size_t V = dm.V, d = dm.d, qk = V * d, vv = V * V;
  Tensor<T> weights = attention_weights(q.value(), k.value(), bias.value(), structure.value(), scale, pre);
  Tensor<T> out(q.shape());
  const auto n = static_cast<Eigen::Index>(V), c = static_cast<Eigen::Index>(d);
  Eigen::Map<const RowMat<T>> S(structure.value().raw(), n, n);
  for (std::size_t s = 0; s < dm.slices; ++s) {
    Eigen::Map<const RowMat<T>> W(weights.raw() + s * vv, n, n);
    Eigen::Map<const RowMat<T>> Vs(v.value().raw() + s * qk, n, c);
    Eigen::Map<RowMat<T>> O(out.raw() + s * qk, n, c);
    if (pre) O.noalias() = W * Vs;
    else O.noalias() = (W + S) * Vs;
  }

  Tape<T>& tape = q.tape();
  return tape.record(std::move(out), {q, k, v, bias, structure},
                     [&tape, q, k, v, bias, structure, scale, pre, dm, weights = std::move(weights)](std::size_t id) {
    const T mm = fault_sign<T>(FaultSite::matmul);
    const T sm = fault_sign<T>(FaultSite::softmax);
    const std::size_t qk = dm.V * dm.d, vv = dm.V * dm.V;
    const auto n = static_cast<Eigen::Index>(dm.V), c = static_cast<Eigen::Index>(dm.d);
    const T* g = tape.grad(id).raw();
    const T* qv = tape.value(q.id()).raw();
    const T* kv = tape.value(k.id()).raw();
    const T* vvals = tape.value(v.id()).raw();
    Eigen::Map<const RowMat<T>> S(tape.value(structure.id()).raw(), n, n);
    T* dq = tape.requires_grad(q.id()) ? tape.grad(q.id()).raw() : nullptr;
    T* dk = tape.requires_grad(k.id()) ? tape.grad(k.id()).raw() : nullptr;
    T* dv = tape.requires_grad(v.id()) ? tape.grad(v.id()).raw() : nullptr;
    RowMat<T> dbias = RowMat<T>::Zero(n, n), dstruct = RowMat<T>::Zero(n, n);
    RowMat<T> dw(n, n), dl(n, n);
    for (std::size_t s = 0; s < dm.slices; ++s) {
      Eigen::Map<const RowMat<T>> W(weights.raw() + s * vv, n, n);
      Eigen::Map<const RowMat<T>> G(g + s * qk, n, c);
      Eigen::Map<const RowMat<T>> Vs(vvals + s * qk, n, c);
      dw.noalias() = mm * (G * Vs.transpose());
      if (dv) {
        Eigen::Map<RowMat<T>> dV(dv + s * qk, n, c);
        if (pre) dV.noalias() += mm * (W.transpose() * G);
        else dV.noalias() += mm * ((W + S).transpose() * G);
      }
      if (!pre) dstruct += dw;
      const auto rowdot = (dw.array() * W.array()).rowwise().sum().eval();
      dl = (sm * (W.array() * (dw.array().colwise() - rowdot))).matrix();
      dbias += dl;
      if (pre) dstruct += dl;
      if (dq) {
        Eigen::Map<RowMat<T>> dQ(dq + s * qk, n, c);
        dQ.noalias() += (mm * scale) * (dl * Eigen::Map<const RowMat<T>>(kv + s * qk, n, c));
      }
      if (dk) {
        Eigen::Map<RowMat<T>> dK(dk + s * qk, n, c);
        dK.noalias() += (mm * scale) * (dl.transpose() * Eigen::Map<const RowMat<T>>(qv + s * qk, n, c));
      }
    }
    if (tape.requires_grad(bias.id())) {
      T* db = tape.grad(bias.id()).raw();
      for (std::size_t i = 0; i < vv; ++i) db[i] += dbias.data()[i];
    }
    if (tape.requires_grad(structure.id())) {
      T* ds = tape.grad(structure.id()).raw();
      for (std::size_t i = 0; i < vv; ++i) ds[i] += dstruct.data()[i];
    }
  });
}

template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T> state, Mode mode) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("batch_norm needs rank >= 2, got " + shape_str(xs));
  const std::size_t N = xs[0], C = xs[1];
  const std::size_t S = x.value().size() / (N * C);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    mismatch("batch_norm affine", xs, gamma.shape());
  if (state.running_mean == nullptr || state.running_var == nullptr ||
      state.running_mean->shape() != Shape{C} || state.running_var->shape() != Shape{C})
    throw ShapeError("batch_norm: running statistics must have shape " + shape_str(Shape{C}));
  const std::size_t m = N * S;
  if (mode == Mode::train && m < 2)
    throw ShapeError("batch_norm in train mode needs at least 2 values per channel, got " + shape_str(xs));

  const T* xv = x.value().raw();
  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      const double mu = s / double(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = double(p[i]) - mu;
          ss += d * d;
        }
      }
      const double var = ss / double(m);
      mean[c] = T(mu);
      inv_std[c] = T(1.0 / std::sqrt(var + double(state.eps)));
      T& rm = (*state.running_mean)[c];
      T& rv = (*state.running_var)[c];
      rm = state.momentum * rm + (T(1) - state.momentum) * T(mu);
      rv = state.momentum * rv + (T(1) - state.momentum) * T(var * double(m) / double(m - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*state.running_mean)[c];
      inv_std[c] = T(1) / std::sqrt((*state.running_var)[c] + state.eps);
    }
  }

  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = (xv[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }

  Tape<T>& tape = x.tape();
  return tape.record(std::move(out), {x, gamma, beta},
                     [&tape, x, gamma, beta, xhat = std::move(xhat), inv_std, N, C, S, m, mode](std::size_t id) {
    const T sgn = fault_sign<T>(FaultSite::batchnorm);
    const T* g = tape.grad(id).raw();
    const T* gv = tape.value(gamma.id()).raw();
    std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          sum_g[c] += g[base + i];
          sum_gh[c] += double(g[base + i]) * double(xhat[base + i]);
        }
      }
    if (tape.requires_grad(gamma.id())) {
      T* dg = tape.grad(gamma.id()).raw();
      for (std::size_t c = 0; c < C; ++c) dg[c] += sgn * T(sum_gh[c]);
    }
    if (tape.requires_grad(beta.id())) {
      T* db = tape.grad(beta.id()).raw();
      for (std::size_t c = 0; c < C; ++c) db[c] += sgn * T(sum_g[c]);
    }
    if (!tape.requires_grad(x.id())) return;
    T* dx = tape.grad(x.id()).raw();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * S;
        const T k = sgn * gv[c] * inv_std[c];
        if (mode == Mode::train) {
          const T mg = T(sum_g[c] / double(m));
          const T mgh = T(sum_gh[c] / double(m));
          for (std::size_t i = 0; i < S; ++i)
            dx[base + i] += k * (g[base + i] - mg - xhat[base + i] * mgh);
        } else {
          for (std::size_t i = 0; i < S; ++i) dx[base + i] += k * g[base + i];
        }
      }
  });
}

template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2 || ls[0] != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(ls) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t N = ls[0], K = ls[1];
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(K) + ")");
  const T* x = logits.value().raw();
  Tensor<T> prob(ls);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x + n * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += std::exp(double(row[k]) - mx);
    const double lse = mx + std::log(total);
    loss += lse - double(row[labels[n]]);
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = T(std::exp(double(row[k]) - lse));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  Tape<T>& tape = logits.tape();
  return tape.record(Tensor<T>::scalar(T(loss / double(N))), {logits},
                     [&tape, logits, prob = std::move(prob), lab, N, K](std::size_t id) {
    const T g = tape.grad(id)[0] / T(N);
    T* d = tape.grad(logits.id()).raw();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k)
        d[n * K + k] += g * (prob[n * K + k] - (static_cast<int>(k) == lab[n] ? T(1) : T(0)));
  });
}

#define STT_INSTANTIATE_OPS(T)                                                                \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> matmul(Var<T>, Var<T>);                                                     \
  template Var<T> transpose(Var<T>);                                                          \
  template Var<T> permute(Var<T>, const std::vector<std::size_t>&);                           \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                            \
  template std::vector<Var<T>> split(Var<T>, const std::vector<std::size_t>&, std::size_t);   \
  template Var<T> softmax(Var<T>, std::size_t);                                               \
  template Var<T> sum(Var<T>);                                                                \
  template Var<T> sum_axis(Var<T>, std::size_t);                                              \
  template Var<T> mean_last(Var<T>);                                                          \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> conv_temporal(Var<T>, Var<T>, Var<T>, std::size_t);                         \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormState<T>, Mode);                \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                                \
  template Var<T> attention_core(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, T, bool);            \
  template Tensor<T> attention_weights(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                       const Tensor<T>&, T, bool);

STT_INSTANTIATE_OPS(float)
STT_INSTANTIATE_OPS(double)

}  // namespace stt::nn
