#include "tresdiag/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace tresdiag {

namespace {

using Index = std::ptrdiff_t;

struct ConvGeometry {
  Index cin, h, w, cout, kh, kw, ho, wo, sh, sw, ph, pw;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, const Conv2dOptions& o) {
  if (input.rank() != 3) {
    throw ShapeError("conv2d input must be Cin x H x W, got " + shape_string(input.shape()));
  }
  if (kernels.rank() != 4) {
    throw ShapeError("conv2d kernels must be Cout x Cin x kh x kw, got " +
                     shape_string(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(input.shape()) +
                     " vs kernels " + shape_string(kernels.shape()));
  }
  if (o.stride_h == 0 || o.stride_w == 0) throw ConfigError("conv2d stride must be positive");
  if (kernels.dim(2) > input.dim(1) + 2 * o.pad_h || kernels.dim(3) > input.dim(2) + 2 * o.pad_w) {
    throw ShapeError("conv2d kernel " + shape_string(kernels.shape()) +
                     " larger than padded input " + shape_string(input.shape()));
  }
  ConvGeometry g{};
  g.cin = static_cast<Index>(input.dim(0));
  g.h = static_cast<Index>(input.dim(1));
  g.w = static_cast<Index>(input.dim(2));
  g.cout = static_cast<Index>(kernels.dim(0));
  g.kh = static_cast<Index>(kernels.dim(2));
  g.kw = static_cast<Index>(kernels.dim(3));
  g.sh = static_cast<Index>(o.stride_h);
  g.sw = static_cast<Index>(o.stride_w);
  g.ph = static_cast<Index>(o.pad_h);
  g.pw = static_cast<Index>(o.pad_w);
  g.ho = static_cast<Index>(conv_output_size(input.dim(1), kernels.dim(2), o.stride_h, o.pad_h));
  g.wo = static_cast<Index>(conv_output_size(input.dim(2), kernels.dim(3), o.stride_w, o.pad_w));
  return g;
}

// Strided fallback. Calls body for every (o, c, dy, dx, oy) whose input row
// lies inside the image; input column = ox * stride_w + offset.
template <typename Body>
void for_each_tap_row(const ConvGeometry& g, Body&& body) {
  for (Index o = 0; o < g.cout; ++o) {
    for (Index c = 0; c < g.cin; ++c) {
      for (Index dy = 0; dy < g.kh; ++dy) {
        for (Index dx = 0; dx < g.kw; ++dx) {
          const Index k_index = ((o * g.cin + c) * g.kh + dy) * g.kw + dx;
          const Index offset = dx - g.pw;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const Index iy = oy * g.sh + dy - g.ph;
            if (iy < 0 || iy >= g.h) continue;
            body(k_index, (o * g.ho + oy) * g.wo, (c * g.h + iy) * g.w, offset);
          }
        }
      }
    }
  }
}

// Zero-padded copy of a C x H x W buffer.
std::vector<double> pad_planes(const double* src, Index c, Index h, Index w, Index ph, Index pw) {
  const Index hp = h + 2 * ph, wp = w + 2 * pw;
  std::vector<double> out(static_cast<std::size_t>(c * hp * wp), 0.0);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < h; ++y) {
      std::copy_n(src + (ch * h + y) * w, w, out.data() + (ch * hp + y + ph) * wp + pw);
    }
  }
  return out;
}

// Unit-stride correlation over an already padded input, accumulating into out.
// The fixed-size variants let the compiler keep every tap of one output
// element in registers.
template <Index KH, Index KW>
void correlate_fixed(const double* pad, Index cin, Index hp, Index wp, const double* k, Index cout,
                     double* out) {
  const Index ho = hp - KH + 1, wo = wp - KW + 1;
  for (Index o = 0; o < cout; ++o) {
    for (Index c = 0; c < cin; ++c) {
      double w[KH * KW];
      std::copy_n(k + (o * cin + c) * KH * KW, KH * KW, w);
      for (Index oy = 0; oy < ho; ++oy) {
        double* orow = out + (o * ho + oy) * wo;
        const double* base = pad + (c * hp + oy) * wp;
        for (Index ox = 0; ox < wo; ++ox) {
          double acc = orow[ox];
          for (Index dy = 0; dy < KH; ++dy) {
            for (Index dx = 0; dx < KW; ++dx) acc += w[dy * KW + dx] * base[dy * wp + ox + dx];
          }
          orow[ox] = acc;
        }
      }
    }
  }
}

void correlate_any(const double* pad, Index cin, Index hp, Index wp, const double* k, Index cout,
                   double* out, Index kh, Index kw) {
  const Index ho = hp - kh + 1, wo = wp - kw + 1;
  for (Index o = 0; o < cout; ++o) {
    for (Index c = 0; c < cin; ++c) {
      for (Index oy = 0; oy < ho; ++oy) {
        double* orow = out + (o * ho + oy) * wo;
        for (Index dy = 0; dy < kh; ++dy) {
          const double* base = pad + (c * hp + oy + dy) * wp;
          const double* kr = k + ((o * cin + c) * kh + dy) * kw;
          for (Index dx = 0; dx < kw; ++dx) {
            const double wv = kr[dx];
            const double* s = base + dx;
            for (Index ox = 0; ox < wo; ++ox) orow[ox] += wv * s[ox];
          }
        }
      }
    }
  }
}

void correlate(const double* pad, Index cin, Index hp, Index wp, const double* k, Index cout,
               double* out, Index kh, Index kw) {
  if (kh == 3 && kw == 5) return correlate_fixed<3, 5>(pad, cin, hp, wp, k, cout, out);
  if (kh == 3 && kw == 3) return correlate_fixed<3, 3>(pad, cin, hp, wp, k, cout, out);
  if (kh == 1 && kw == 5) return correlate_fixed<1, 5>(pad, cin, hp, wp, k, cout, out);
  if (kh == 1 && kw == 3) return correlate_fixed<1, 3>(pad, cin, hp, wp, k, cout, out);
  if (kh == 1 && kw == 1) return correlate_fixed<1, 1>(pad, cin, hp, wp, k, cout, out);
  if (kh == 5 && kw == 5) return correlate_fixed<5, 5>(pad, cin, hp, wp, k, cout, out);
  correlate_any(pad, cin, hp, wp, k, cout, out, kh, kw);
}

// grad_k[o, c, dy, dx] += sum_{oy, ox} grad_out[o, oy, ox] * pad[c, oy + dy, ox + dx]
// Each tap keeps four lane accumulators so the reduction vectorizes without
// reassociation flags.
template <Index KH, Index KW>
void kernel_grad_fixed(const ConvGeometry& g, const double* pad, const double* go, double* gk) {
  const Index hp = g.h + 2 * g.ph, wp = g.w + 2 * g.pw;
  for (Index o = 0; o < g.cout; ++o) {
    for (Index c = 0; c < g.cin; ++c) {
      double acc[KH * KW][4] = {};
      for (Index oy = 0; oy < g.ho; ++oy) {
        const double* grow = go + (o * g.ho + oy) * g.wo;
        const double* base = pad + (c * hp + oy) * wp;
        Index ox = 0;
        for (; ox + 4 <= g.wo; ox += 4) {
          for (Index dy = 0; dy < KH; ++dy) {
            for (Index dx = 0; dx < KW; ++dx) {
              const double* s = base + dy * wp + ox + dx;
              for (int l = 0; l < 4; ++l) acc[dy * KW + dx][l] += grow[ox + l] * s[l];
            }
          }
        }
        for (; ox < g.wo; ++ox) {
          for (Index dy = 0; dy < KH; ++dy) {
            for (Index dx = 0; dx < KW; ++dx) acc[dy * KW + dx][0] += grow[ox] * base[dy * wp + ox + dx];
          }
        }
      }
      double* kout = gk + (o * g.cin + c) * KH * KW;
      for (Index t = 0; t < KH * KW; ++t) kout[t] += (acc[t][0] + acc[t][1]) + (acc[t][2] + acc[t][3]);
    }
  }
}

void kernel_grad_any(const ConvGeometry& g, const double* pad, const double* go, double* gk) {
  const Index hp = g.h + 2 * g.ph, wp = g.w + 2 * g.pw;
  for (Index o = 0; o < g.cout; ++o) {
    for (Index c = 0; c < g.cin; ++c) {
      double* kout = gk + (o * g.cin + c) * g.kh * g.kw;
      for (Index dy = 0; dy < g.kh; ++dy) {
        for (Index dx = 0; dx < g.kw; ++dx) {
          double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const double* grow = go + (o * g.ho + oy) * g.wo;
            const double* s = pad + (c * hp + oy + dy) * wp + dx;
            Index ox = 0;
            for (; ox + 4 <= g.wo; ox += 4) {
              s0 += grow[ox] * s[ox];
              s1 += grow[ox + 1] * s[ox + 1];
              s2 += grow[ox + 2] * s[ox + 2];
              s3 += grow[ox + 3] * s[ox + 3];
            }
            for (; ox < g.wo; ++ox) s0 += grow[ox] * s[ox];
          }
          kout[dy * g.kw + dx] += (s0 + s1) + (s2 + s3);
        }
      }
    }
  }
}

void kernel_grad_unit_stride(const ConvGeometry& g, const double* pad, const double* go, double* gk) {
  if (g.kh == 3 && g.kw == 5) return kernel_grad_fixed<3, 5>(g, pad, go, gk);
  if (g.kh == 3 && g.kw == 3) return kernel_grad_fixed<3, 3>(g, pad, go, gk);
  if (g.kh == 1 && g.kw == 1) return kernel_grad_fixed<1, 1>(g, pad, go, gk);
  kernel_grad_any(g, pad, go, gk);
}

bool unit_stride_fast_path(const ConvGeometry& g) {
  return g.sh == 1 && g.sw == 1 && g.ph < g.kh && g.pw < g.kw;
}

Tensor conv_backward_input(const ConvGeometry& g, const Tensor& kernels, const Tensor& grad_out) {
  Tensor grad_in(Shape{static_cast<std::size_t>(g.cin), static_cast<std::size_t>(g.h),
                       static_cast<std::size_t>(g.w)});
  const double* k = kernels.data().data();
  const double* go = grad_out.data().data();
  double* gi = grad_in.values().data();
  if (unit_stride_fast_path(g)) {
    // Full correlation of grad_out with the spatially flipped, channel-transposed kernel.
    std::vector<double> flipped(kernels.size());
    for (Index o = 0; o < g.cout; ++o) {
      for (Index c = 0; c < g.cin; ++c) {
        for (Index dy = 0; dy < g.kh; ++dy) {
          for (Index dx = 0; dx < g.kw; ++dx) {
            flipped[((c * g.cout + o) * g.kh + (g.kh - 1 - dy)) * g.kw + (g.kw - 1 - dx)] =
                k[((o * g.cin + c) * g.kh + dy) * g.kw + dx];
          }
        }
      }
    }
    const Index fh = g.kh - 1 - g.ph, fw = g.kw - 1 - g.pw;
    std::vector<double> padded = pad_planes(go, g.cout, g.ho, g.wo, fh, fw);
    correlate(padded.data(), g.cout, g.ho + 2 * fh, g.wo + 2 * fw, flipped.data(), g.cin, gi, g.kh,
              g.kw);
    return grad_in;
  }
  for_each_tap_row(g, [&](Index ki, Index out_base, Index in_base, Index offset) {
    for (Index ox = 0; ox < g.wo; ++ox) {
      const Index ix = ox * g.sw + offset;
      if (ix >= 0 && ix < g.w) gi[in_base + ix] += k[ki] * go[out_base + ox];
    }
  });
  return grad_in;
}

Tensor conv_backward_kernels(const ConvGeometry& g, const Tensor& input, const Tensor& grad_out,
                             const Shape& kernel_shape) {
  Tensor grad_k(kernel_shape);
  const double* in = input.data().data();
  const double* go = grad_out.data().data();
  double* gk = grad_k.values().data();
  if (unit_stride_fast_path(g)) {
    std::vector<double> padded = pad_planes(in, g.cin, g.h, g.w, g.ph, g.pw);
    kernel_grad_unit_stride(g, padded.data(), go, gk);
    return grad_k;
  }
  for_each_tap_row(g, [&](Index ki, Index out_base, Index in_base, Index offset) {
    double s = 0;
    for (Index ox = 0; ox < g.wo; ++ox) {
      const Index ix = ox * g.sw + offset;
      if (ix >= 0 && ix < g.w) s += go[out_base + ox] * in[in_base + ix];
    }
    gk[ki] += s;
  });
  return grad_k;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

std::atomic<std::uint64_t> next_graph_tag{1};

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (kernel > in + 2 * pad) throw ShapeError("kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t pool_output_size(std::size_t in, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ConfigError("pooling window and stride must be positive");
  if (window > in) return 0;
  return (in - window) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Conv2dOptions& options,
              const Tensor* bias) {
  const ConvGeometry g = conv_geometry(input, kernels, options);
  Tensor out(Shape{static_cast<std::size_t>(g.cout), static_cast<std::size_t>(g.ho),
                   static_cast<std::size_t>(g.wo)});
  double* po = out.values().data();
  if (bias) {
    if (bias->size() != static_cast<std::size_t>(g.cout)) {
      throw ShapeError("conv2d bias " + shape_string(bias->shape()) + " does not match " +
                       std::to_string(g.cout) + " output channels");
    }
    const Index plane = g.ho * g.wo;
    for (Index o = 0; o < g.cout; ++o) std::fill(po + o * plane, po + (o + 1) * plane, (*bias)[o]);
  }
  const double* in = input.data().data();
  const double* k = kernels.data().data();
  if (unit_stride_fast_path(g)) {
    std::vector<double> padded = pad_planes(in, g.cin, g.h, g.w, g.ph, g.pw);
    correlate(padded.data(), g.cin, g.h + 2 * g.ph, g.w + 2 * g.pw, k, g.cout, po, g.kh, g.kw);
    return out;
  }
  for_each_tap_row(g, [&](Index ki, Index out_base, Index in_base, Index offset) {
    for (Index ox = 0; ox < g.wo; ++ox) {
      const Index ix = ox * g.sw + offset;
      if (ix >= 0 && ix < g.w) po[out_base + ox] += k[ki] * in[in_base + ix];
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

PoolResult maxpool2d(const Tensor& input, const Pool2dOptions& o) {
  if (input.rank() != 3) {
    throw ShapeError("maxpool2d input must be C x H x W, got " + shape_string(input.shape()));
  }
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t ho = pool_output_size(h, o.window_h, o.stride_h);
  const std::size_t wo = pool_output_size(w, o.window_w, o.stride_w);
  if (ho == 0 || wo == 0) {
    throw ShapeError("maxpool2d window " + std::to_string(o.window_h) + "x" +
                     std::to_string(o.window_w) + " larger than input " + shape_string(input.shape()));
  }
  PoolResult r{Tensor(Shape{c, ho, wo}), std::vector<std::size_t>(c * ho * wo)};
  std::size_t out_index = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++out_index) {
        std::size_t best = (ch * h + oy * o.stride_h) * w + ox * o.stride_w;
        for (std::size_t dy = 0; dy < o.window_h; ++dy) {
          for (std::size_t dx = 0; dx < o.window_w; ++dx) {
            const std::size_t idx = (ch * h + oy * o.stride_h + dy) * w + ox * o.stride_w + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        r.output[out_index] = input[best];
        r.argmax[out_index] = best;
      }
    }
  }
  return r;
}

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2 || weights.dim(1) != x.size() || bias.size() != weights.dim(0)) {
    throw ShapeError("dense: input " + shape_string(x.shape()) + ", weights " +
                     shape_string(weights.shape()) + ", bias " + shape_string(bias.shape()));
  }
  const std::size_t out_n = weights.dim(0), in_n = weights.dim(1);
  Tensor y(Shape{out_n});
  for (std::size_t i = 0; i < out_n; ++i) {
    double s = bias[i];
    const double* row = weights.data().data() + i * in_n;
    for (std::size_t j = 0; j < in_n; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  Tensor out = x;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& v : out.values()) v = rng.uniform() < rate ? 0.0 : v * keep_scale;
  return out;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw ShapeError("log_sum_exp of empty input");
  const double m = *std::max_element(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

Tensor softmax(const Tensor& logits) {
  if (logits.empty()) throw ShapeError("softmax of empty input");
  const auto v = logits.values();
  const double m = *std::max_element(v.begin(), v.end());
  Tensor out = logits;
  double s = 0.0;
  for (double& e : out.values()) {
    e = std::exp(e - m);
    s += e;
  }
  for (double& e : out.values()) e /= s;
  return out;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                            double h) {
  Tensor grad(theta.shape());
  Tensor probe = theta;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    probe[k] = theta[k] + h;
    const double plus = f(probe);
    probe[k] = theta[k] - h;
    const double minus = f(probe);
    probe[k] = theta[k];
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("finite_diff_gradient: non-finite function value at coordinate " +
                         std::to_string(k));
    }
    grad[k] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph() : tag_(next_graph_tag.fetch_add(1)) {}

std::size_t Graph::check(NodeId id) const {
  if (id.graph != tag_ || id.index >= nodes_.size()) {
    throw LookupError("node " + std::to_string(id.index) + " does not belong to this graph");
  }
  return id.index;
}

NodeId Graph::push(Tensor value, BackwardFn backward, std::string param_name) {
  nodes_.push_back(Node{std::move(value), Tensor(), std::move(param_name), std::move(backward)});
  return NodeId{nodes_.size() - 1, tag_};
}

Tensor& Graph::grad_slot(std::size_t index) {
  Node& n = nodes_[index];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::value(NodeId id) const { return nodes_[check(id)].value; }

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = nodes_[check(id)];
  if (n.grad.empty()) throw LookupError("node " + std::to_string(id.index) + " has no gradient");
  return n.grad;
}

NodeId Graph::constant(Tensor value) { return push(std::move(value), nullptr); }

NodeId Graph::parameter(std::string name, Tensor value) {
  if (name.empty()) throw ConfigError("parameter name must be non-empty");
  return push(std::move(value), nullptr, std::move(name));
}

NodeId Graph::conv2d(NodeId input, NodeId kernels, std::optional<NodeId> bias,
                     const Conv2dOptions& options) {
  const std::size_t xi = check(input), ki = check(kernels);
  std::optional<std::size_t> bi;
  if (bias) bi = check(*bias);
  Tensor out = tresdiag::conv2d(nodes_[xi].value, nodes_[ki].value, options,
                                bi ? &nodes_[*bi].value : nullptr);
  return push(std::move(out), [xi, ki, bi, options](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const ConvGeometry geo = conv_geometry(g.nodes_[xi].value, g.nodes_[ki].value, options);
    Tensor gin = conv_backward_input(geo, g.nodes_[ki].value, go);
    Tensor gk = conv_backward_kernels(geo, g.nodes_[xi].value, go, g.nodes_[ki].value.shape());
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += gin[i];
    Tensor& sk = g.grad_slot(ki);
    for (std::size_t i = 0; i < sk.size(); ++i) sk[i] += gk[i];
    if (bi) {
      Tensor& sb = g.grad_slot(*bi);
      const std::size_t plane = go.size() / sb.size();
      for (std::size_t o = 0; o < sb.size(); ++o) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += go[o * plane + p];
        sb[o] += s;
      }
    }
  });
}

NodeId Graph::add(NodeId a, NodeId b) {
  const std::size_t ai = check(a), bi = check(b);
  check_same_shape(nodes_[ai].value, nodes_[bi].value, "add");
  Tensor out = nodes_[ai].value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += nodes_[bi].value[i];
  return push(std::move(out), [ai, bi](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sa = g.grad_slot(ai);
    for (std::size_t i = 0; i < go.size(); ++i) sa[i] += go[i];
    Tensor& sb = g.grad_slot(bi);
    for (std::size_t i = 0; i < go.size(); ++i) sb[i] += go[i];
  });
}

NodeId Graph::relu(NodeId x) {
  const std::size_t xi = check(x);
  return push(tresdiag::relu(nodes_[xi].value), [xi](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& in = g.nodes_[xi].value;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (in[i] > 0.0) sx[i] += go[i];
    }
  });
}

NodeId Graph::maxpool2d(NodeId x, const Pool2dOptions& options) {
  const std::size_t xi = check(x);
  PoolResult r = tresdiag::maxpool2d(nodes_[xi].value, options);
  return push(std::move(r.output), [xi, argmax = std::move(r.argmax)](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < go.size(); ++i) sx[argmax[i]] += go[i];
  });
}

NodeId Graph::global_avg_pool(NodeId x) {
  const std::size_t xi = check(x);
  const Tensor& in = nodes_[xi].value;
  if (in.rank() != 3) {
    throw ShapeError("global_avg_pool input must be C x H x W, got " + shape_string(in.shape()));
  }
  const std::size_t c = in.dim(0), plane = in.dim(1) * in.dim(2);
  Tensor out(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += in[ch * plane + p];
    out[ch] = s / static_cast<double>(plane);
  }
  return push(std::move(out), [xi, plane](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sx = g.grad_slot(xi);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t ch = 0; ch < go.size(); ++ch) {
      for (std::size_t p = 0; p < plane; ++p) sx[ch * plane + p] += go[ch] * inv;
    }
  });
}

NodeId Graph::time_avg_pool(NodeId x) {
  const std::size_t xi = check(x);
  const Tensor& in = nodes_[xi].value;
  if (in.rank() != 3) {
    throw ShapeError("time_avg_pool input must be C x H x W, got " + shape_string(in.shape()));
  }
  const std::size_t rows = in.dim(0) * in.dim(1), w = in.dim(2);
  Tensor out(Shape{in.dim(0), in.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < w; ++t) s += in[r * w + t];
    out[r] = s / static_cast<double>(w);
  }
  return push(std::move(out), [xi, rows, w](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sx = g.grad_slot(xi);
    const double inv = 1.0 / static_cast<double>(w);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t t = 0; t < w; ++t) sx[r * w + t] += go[r] * inv;
    }
  });
}

NodeId Graph::dense(NodeId x, NodeId weights, NodeId bias) {
  const std::size_t xi = check(x), wi = check(weights), bi = check(bias);
  Tensor out = tresdiag::dense(nodes_[xi].value, nodes_[wi].value, nodes_[bi].value);
  return push(std::move(out), [xi, wi, bi](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& in = g.nodes_[xi].value;
    const Tensor& w = g.nodes_[wi].value;
    const std::size_t out_n = w.dim(0), in_n = w.dim(1);
    Tensor& sx = g.grad_slot(xi);
    Tensor& sw = g.grad_slot(wi);
    Tensor& sb = g.grad_slot(bi);
    for (std::size_t i = 0; i < out_n; ++i) {
      const double gi = go[i];
      sb[i] += gi;
      for (std::size_t j = 0; j < in_n; ++j) {
        sw[i * in_n + j] += gi * in[j];
        sx[j] += gi * w[i * in_n + j];
      }
    }
  });
}

NodeId Graph::dropout(NodeId x, double rate, Rng& rng, bool training) {
  const std::size_t xi = check(x);
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const Tensor& in = nodes_[xi].value;
  Tensor mask(in.shape());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = in;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return push(std::move(out), [xi, mask = std::move(mask)](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < go.size(); ++i) sx[i] += go[i] * mask[i];
  });
}

NodeId Graph::scale(NodeId x, double factor) {
  const std::size_t xi = check(x);
  Tensor out = nodes_[xi].value;
  for (double& v : out.values()) v *= factor;
  return push(std::move(out), [xi, factor](Graph& g, std::size_t self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < go.size(); ++i) sx[i] += go[i] * factor;
  });
}

NodeId Graph::sum_squares(NodeId x) {
  const std::size_t xi = check(x);
  double s = 0.0;
  for (double v : nodes_[xi].value.values()) s += v * v;
  return push(Tensor::scalar(s), [xi](Graph& g, std::size_t self) {
    const double go = g.nodes_[self].grad[0];
    const Tensor& in = g.nodes_[xi].value;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < in.size(); ++i) sx[i] += 2.0 * in[i] * go;
  });
}

NodeId Graph::sum(NodeId x) {
  const std::size_t xi = check(x);
  double s = 0.0;
  for (double v : nodes_[xi].value.values()) s += v;
  return push(Tensor::scalar(s), [xi](Graph& g, std::size_t self) {
    const double go = g.nodes_[self].grad[0];
    Tensor& sx = g.grad_slot(xi);
    for (double& v : sx.values()) v += go;
  });
}

NodeId Graph::add_scalars(const std::vector<NodeId>& terms) {
  if (terms.empty()) throw ShapeError("add_scalars needs at least one term");
  std::vector<std::size_t> idx;
  double s = 0.0;
  for (NodeId t : terms) {
    const std::size_t i = check(t);
    if (nodes_[i].value.size() != 1) {
      throw ShapeError("add_scalars term has shape " + shape_string(nodes_[i].value.shape()));
    }
    s += nodes_[i].value[0];
    idx.push_back(i);
  }
  return push(Tensor::scalar(s), [idx = std::move(idx)](Graph& g, std::size_t self) {
    const double go = g.nodes_[self].grad[0];
    for (std::size_t i : idx) g.grad_slot(i)[0] += go;
  });
}

NodeId Graph::softmax_cross_entropy(NodeId logits, const Tensor& onehot) {
  const std::size_t xi = check(logits);
  const Tensor& x = nodes_[xi].value;
  if (x.size() != onehot.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_string(x.shape()) + " vs labels " +
                     shape_string(onehot.shape()));
  }
  const double lse = log_sum_exp(x.values());
  double label_mass = 0.0, loss = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) {
    label_mass += onehot[c];
    loss -= onehot[c] * (x[c] - lse);
  }
  return push(Tensor::scalar(loss), [xi, onehot, label_mass](Graph& g, std::size_t self) {
    const double go = g.nodes_[self].grad[0];
    const Tensor p = tresdiag::softmax(g.nodes_[xi].value);
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t c = 0; c < p.size(); ++c) sx[c] += go * (p[c] * label_mass - onehot[c]);
  });
}

NodeId Graph::squared_error(NodeId x, const Tensor& target) {
  const std::size_t xi = check(x);
  const Tensor& v = nodes_[xi].value;
  if (v.size() != target.size()) {
    throw ShapeError("squared_error: prediction " + shape_string(v.shape()) + " vs target " +
                     shape_string(target.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += (v[i] - target[i]) * (v[i] - target[i]);
  return push(Tensor::scalar(s), [xi, target](Graph& g, std::size_t self) {
    const double go = g.nodes_[self].grad[0];
    const Tensor& v = g.nodes_[xi].value;
    Tensor& sx = g.grad_slot(xi);
    for (std::size_t i = 0; i < v.size(); ++i) sx[i] += 2.0 * (v[i] - target[i]) * go;
  });
}

Gradients Graph::backward(NodeId output, std::optional<Tensor> seed) {
  const std::size_t out = check(output);
  for (Node& n : nodes_) n.grad = Tensor();
  if (seed) {
    if (seed->shape() != nodes_[out].value.shape()) {
      throw ShapeError("backward seed " + shape_string(seed->shape()) + " does not match output " +
                       shape_string(nodes_[out].value.shape()));
    }
    nodes_[out].grad = std::move(*seed);
  } else {
    if (nodes_[out].value.size() != 1) {
      throw ShapeError("backward from non-scalar output " +
                       shape_string(nodes_[out].value.shape()) + " needs a seed cotangent");
    }
    nodes_[out].grad = Tensor(nodes_[out].value.shape(), 1.0);
  }
  for (std::size_t i = out + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
  Gradients grads;
  for (Node& n : nodes_) {
    if (n.param_name.empty()) continue;
    Tensor g = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
    auto [it, inserted] = grads.try_emplace(n.param_name, g);
    if (!inserted) {
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  return grads;
}

}  // namespace tresdiag
