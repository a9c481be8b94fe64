// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"

namespace privatexr {

// Row-major dense array. Batches are n x d (one frame per example) or
// n x T x d (T time steps of d channels).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t total = 1;
    for (auto e : shape) total *= e;
    return Tensor{std::move(shape), std::vector<double>(total, 0.0)};
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t row_size() const { return rows() == 0 ? 0 : values.size() / rows(); }
  // Time steps per example (1 for rank-2 batches).
  std::size_t time_steps() const { return rank() == 3 ? shape[1] : 1; }
  std::size_t width() const { return shape.empty() ? 0 : shape.back(); }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values).subspan(i * row_size(), row_size());
  }
  std::span<double> row(std::size_t i) {
    return std::span<double>(values).subspan(i * row_size(), row_size());
  }
  double& at(std::size_t i, std::size_t j) { return values[i * row_size() + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * row_size() + j]; }

  bool operator==(const Tensor&) const = default;
};

inline Tensor features_tensor(const Dataset& ds) {
  Tensor t = Tensor::zeros({ds.size(), ds.feature_count()});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::copy(ds.frames[i].features.begin(), ds.frames[i].features.end(),
              t.row(i).begin());
  }
  return t;
}

inline Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  const std::size_t width = rows.empty() ? 0 : rows.front().size();
  Tensor t = Tensor::zeros({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == width, ErrorKind::kDimension, "ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Model specification

enum class Arch { kMlp, kConv1d, kAttnEncoder };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::kMlp: return "mlp";
    case Arch::kConv1d: return "conv1d";
    case Arch::kAttnEncoder: return "attn_encoder";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::kMlp;
  if (s == "conv1d") return Arch::kConv1d;
  if (s == "attn_encoder") return Arch::kAttnEncoder;
  fail(ErrorKind::kConfig, "unknown architecture \"" + s + "\"");
}

struct ConvSpec {
  int filters = 64;
  int kernel = 10;
  int stride = 1;
  int padding = 5;  // symmetric, time axis
};

struct AttnSpec {
  int model_dim = 64;
  int ff_hidden = 256;
  int heads = 1;
};

struct ModelSpec {
  Arch arch = Arch::kMlp;
  int input_dim = 1;
  int class_count = 2;
  // The MLP flattens T x d inputs, so it needs T up front. The sequence
  // models accept any T.
  int time_steps = 1;
  std::vector<int> hidden = {64, 64};
  std::optional<ConvSpec> conv;
  std::optional<AttnSpec> attn;
  std::uint64_t seed = 0;

  void validate() const {
    require(input_dim >= 1, ErrorKind::kConfig, "input_dim must be >= 1");
    require(class_count >= 2, ErrorKind::kConfig, "class_count must be >= 2");
    require(time_steps >= 1, ErrorKind::kConfig, "time_steps must be >= 1");
    for (int h : hidden) require(h >= 1, ErrorKind::kConfig, "hidden widths must be >= 1");
    require(conv.has_value() == (arch == Arch::kConv1d), ErrorKind::kConfig,
            "conv settings are required for conv1d and only for conv1d");
    require(attn.has_value() == (arch == Arch::kAttnEncoder), ErrorKind::kConfig,
            "attention settings are required for attn_encoder and only for it");
    if (conv) {
      require(conv->filters >= 1 && conv->kernel >= 1 && conv->stride >= 1 &&
                  conv->padding >= 0,
              ErrorKind::kConfig, "invalid conv settings");
    }
    if (attn) {
      require(attn->model_dim >= 1 && attn->ff_hidden >= 1 && attn->heads >= 1,
              ErrorKind::kConfig, "invalid attention settings");
      require(attn->model_dim % attn->heads == 0, ErrorKind::kConfig,
              "model_dim must be divisible by heads");
    }
  }

  static ModelSpec mlp(int d, int k, std::vector<int> hidden = {64, 64}) {
    ModelSpec s;
    s.arch = Arch::kMlp;
    s.input_dim = d;
    s.class_count = k;
    s.hidden = std::move(hidden);
    return s;
  }
  static ModelSpec conv1d(int d, int k, ConvSpec c = {}, std::vector<int> hidden = {32}) {
    ModelSpec s;
    s.arch = Arch::kConv1d;
    s.input_dim = d;
    s.class_count = k;
    s.hidden = std::move(hidden);
    s.conv = c;
    return s;
  }
  static ModelSpec attn_encoder(int d, int k, AttnSpec a = {}, std::vector<int> hidden = {}) {
    ModelSpec s;
    s.arch = Arch::kAttnEncoder;
    s.input_dim = d;
    s.class_count = k;
    s.hidden = std::move(hidden);
    s.attn = a;
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"arch", arch_name(arch)},
                     {"input_dim", input_dim},
                     {"class_count", class_count},
                     {"time_steps", time_steps},
                     {"hidden", hidden},
                     {"seed", seed}};
    if (conv) {
      j["conv"] = {{"filters", conv->filters},
                   {"kernel", conv->kernel},
                   {"stride", conv->stride},
                   {"padding", conv->padding}};
    }
    if (attn) {
      j["attn"] = {{"model_dim", attn->model_dim},
                   {"ff_hidden", attn->ff_hidden},
                   {"heads", attn->heads}};
    }
    return j;
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.arch = parse_arch(j.value("arch", std::string("mlp")));
    s.input_dim = j.value("input_dim", s.input_dim);
    s.class_count = j.value("class_count", s.class_count);
    s.time_steps = j.value("time_steps", s.time_steps);
    s.hidden = j.value("hidden", s.arch == Arch::kMlp ? s.hidden : std::vector<int>{});
    s.seed = j.value("seed", s.seed);
    if (j.contains("conv") || s.arch == Arch::kConv1d) {
      ConvSpec c;
      const auto& cj = j.contains("conv") ? j.at("conv") : nlohmann::json::object();
      c.filters = cj.value("filters", c.filters);
      c.kernel = cj.value("kernel", c.kernel);
      c.stride = cj.value("stride", c.stride);
      c.padding = cj.value("padding", c.padding);
      s.conv = c;
    }
    if (j.contains("attn") || s.arch == Arch::kAttnEncoder) {
      AttnSpec a;
      const auto& aj = j.contains("attn") ? j.at("attn") : nlohmann::json::object();
      a.model_dim = aj.value("model_dim", a.model_dim);
      a.ff_hidden = aj.value("ff_hidden", a.ff_hidden);
      a.heads = aj.value("heads", a.heads);
      s.attn = a;
    }
    s.validate();
    return s;
  }

  bool operator==(const ModelSpec& o) const { return to_json() == o.to_json(); }
};

namespace detail {

// y[r] = W x[r] + b, W is out x in.
inline void dense_forward(const double* w, const double* b, const double* x, double* y,
                          std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    double* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = w + o * in;
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
      yr[o] = acc;
    }
  }
}

// Accumulates dW, db; overwrites dx when non-null.
inline void dense_backward(const double* w, const double* x, const double* dy, double* dw,
                           double* db, double* dx, std::size_t rows, std::size_t in,
                           std::size_t out) {
  if (dx) std::fill(dx, dx + rows * in, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    const double* dyr = dy + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      db[o] += g;
      double* dwo = dw + o * in;
      for (std::size_t i = 0; i < in; ++i) dwo[i] += g * xr[i];
      if (dx) {
        const double* wo = w + o * in;
        double* dxr = dx + r * in;
        for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wo[i];
      }
    }
  }
}

inline constexpr double kLayerNormEps = 1e-5;

inline void layernorm_forward(const double* gain, const double* bias, const double* x,
                              double* y, double* xhat, double* inv_std, std::size_t rows,
                              std::size_t width) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * width;
    double mean = 0.0;
    for (std::size_t i = 0; i < width; ++i) mean += xr[i];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t i = 0; i < width; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < width; ++i) {
      const double h = (xr[i] - mean) * is;
      xhat[r * width + i] = h;
      y[r * width + i] = gain[i] * h + bias[i];
    }
  }
}

// Accumulates dgain, dbias; adds the input gradient into dx.
inline void layernorm_backward(const double* gain, const double* xhat, const double* inv_std,
                               const double* dy, double* dgain, double* dbias, double* dx,
                               std::size_t rows, std::size_t width) {
  const double n = static_cast<double>(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* hr = xhat + r * width;
    const double* dyr = dy + r * width;
    double mean_dh = 0.0;
    double mean_dh_h = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      dgain[i] += dyr[i] * hr[i];
      dbias[i] += dyr[i];
      const double dh = dyr[i] * gain[i];
      mean_dh += dh;
      mean_dh_h += dh * hr[i];
    }
    mean_dh /= n;
    mean_dh_h /= n;
    for (std::size_t i = 0; i < width; ++i) {
      const double dh = dyr[i] * gain[i];
      dx[r * width + i] += inv_std[r] * (dh - mean_dh - hr[i] * mean_dh_h);
    }
  }
}

struct Dense {
  std::size_t in = 0, out = 0, w = 0, b = 0;
};

struct Norm {
  std::size_t width = 0, gain = 0, bias = 0;
};

class Layout {
 public:
  Dense dense(std::size_t in, std::size_t out) {
    Dense d{in, out, size_, size_ + in * out};
    size_ += in * out + out;
    glorot_.push_back({d.w, in * out, in, out});
    return d;
  }
  // Conv kernels use fan_in = kernel*in_ch, fan_out = kernel*filters.
  Dense conv(std::size_t kernel, std::size_t channels, std::size_t filters) {
    const std::size_t in = kernel * channels;
    Dense d{in, filters, size_, size_ + in * filters};
    size_ += in * filters + filters;
    glorot_.push_back({d.w, in * filters, kernel * channels, kernel * filters});
    return d;
  }
  Norm norm(std::size_t width) {
    Norm n{width, size_, size_ + width};
    size_ += 2 * width;
    ones_.push_back({n.gain, width});
    return n;
  }
  std::size_t size() const { return size_; }

  // Glorot-uniform weights in declaration order; biases 0; norm gains 1.
  void init(std::span<double> params, Rng& rng) const {
    std::fill(params.begin(), params.end(), 0.0);
    for (const auto& g : glorot_) {
      const double limit = std::sqrt(6.0 / static_cast<double>(g.fan_in + g.fan_out));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (std::size_t i = 0; i < g.count; ++i) params[g.offset + i] = u(rng);
    }
    for (const auto& o : ones_) std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(o.first), o.second, 1.0);
  }

 private:
  struct Glorot {
    std::size_t offset, count, fan_in, fan_out;
  };
  std::size_t size_ = 0;
  std::vector<Glorot> glorot_;
  std::vector<std::pair<std::size_t, std::size_t>> ones_;
};

// Log-softmax cross-entropy; writes dlogits = softmax - onehot.
inline double softmax_xent(const double* logits, std::size_t k, int label, double* dlogits) {
  double mx = logits[0];
  for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(logits[i] - mx);
  const double log_z = mx + std::log(z);
  for (std::size_t i = 0; i < k; ++i) dlogits[i] = std::exp(logits[i] - log_z);
  dlogits[label] -= 1.0;
  return log_z - logits[static_cast<std::size_t>(label)];
}

// Hidden ReLU layers followed by the output layer.
struct Head {
  std::vector<Dense> layers;

  void build(Layout& layout, std::size_t in, const std::vector<int>& hidden, std::size_t k) {
    for (int h : hidden) {
      layers.push_back(layout.dense(in, static_cast<std::size_t>(h)));
      in = static_cast<std::size_t>(h);
    }
    layers.push_back(layout.dense(in, k));
  }

  // acts[0] = input; acts[i+1] = output of layer i (post-ReLU for hidden).
  void forward(const double* p, std::vector<std::vector<double>>& acts) const {
    acts.resize(layers.size() + 1);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Dense& L = layers[l];
      acts[l + 1].assign(L.out, 0.0);
      dense_forward(p + L.w, p + L.b, acts[l].data(), acts[l + 1].data(), 1, L.in, L.out);
      if (l + 1 < layers.size())
        for (double& v : acts[l + 1]) v = v > 0.0 ? v : 0.0;
    }
  }

  // dout is dLoss/dlogits; returns dLoss/dinput.
  std::vector<double> backward(const double* p, const std::vector<std::vector<double>>& acts,
                               std::vector<double> dout, double* g) const {
    for (std::size_t l = layers.size(); l-- > 0;) {
      const Dense& L = layers[l];
      if (l + 1 < layers.size()) {
        for (std::size_t i = 0; i < L.out; ++i)
          if (acts[l + 1][i] <= 0.0) dout[i] = 0.0;
      }
      std::vector<double> din(L.in);
      dense_backward(p + L.w, acts[l].data(), dout.data(), g + L.w, g + L.b, din.data(), 1,
                     L.in, L.out);
      dout = std::move(din);
    }
    return dout;
  }
};

class NetworkImpl {
 public:
  virtual ~NetworkImpl() = default;
  virtual void logits(const double* p, const double* x, std::size_t steps, double* out) const = 0;
  // Adds this example's gradient into g; returns its loss.
  virtual double loss_grad(const double* p, const double* x, std::size_t steps, int label,
                           double* g) const = 0;
};

class MlpImpl final : public NetworkImpl {
 public:
  MlpImpl(const ModelSpec& s, Layout& layout) {
    head_.build(layout, static_cast<std::size_t>(s.input_dim * s.time_steps), s.hidden,
                static_cast<std::size_t>(s.class_count));
    in_ = static_cast<std::size_t>(s.input_dim * s.time_steps);
  }
  void logits(const double* p, const double* x, std::size_t, double* out) const override {
    std::vector<std::vector<double>> acts(1, std::vector<double>(x, x + in_));
    head_.forward(p, acts);
    std::copy(acts.back().begin(), acts.back().end(), out);
  }
  double loss_grad(const double* p, const double* x, std::size_t, int label,
                   double* g) const override {
    std::vector<std::vector<double>> acts(1, std::vector<double>(x, x + in_));
    head_.forward(p, acts);
    std::vector<double> dl(acts.back().size());
    const double loss = softmax_xent(acts.back().data(), dl.size(), label, dl.data());
    head_.backward(p, acts, std::move(dl), g);
    return loss;
  }

 private:
  Head head_;
  std::size_t in_ = 0;
};

// Conv (same-ish padding on the time axis) -> ReLU -> mean over time -> head.
class ConvImpl final : public NetworkImpl {
 public:
  ConvImpl(const ModelSpec& s, Layout& layout) : c_(*s.conv) {
    channels_ = static_cast<std::size_t>(s.input_dim);
    filters_ = static_cast<std::size_t>(c_.filters);
    kernel_ = static_cast<std::size_t>(c_.kernel);
    conv_ = layout.conv(kernel_, channels_, filters_);
    head_.build(layout, filters_, s.hidden, static_cast<std::size_t>(s.class_count));
  }

  std::size_t out_steps(std::size_t steps) const {
    const std::size_t padded = steps + 2 * static_cast<std::size_t>(c_.padding);
    require(padded >= kernel_, ErrorKind::kDimension,
            "sequence of " + std::to_string(steps) + " steps is shorter than the conv kernel");
    return (padded - kernel_) / static_cast<std::size_t>(c_.stride) + 1;
  }

  struct Cache {
    std::vector<double> patches;  // out_steps x (kernel*channels)
    std::vector<double> act;      // out_steps x filters, post-ReLU
    std::vector<std::vector<double>> head;
  };

  void forward(const double* p, const double* x, std::size_t steps, Cache& c) const {
    const std::size_t t_out = out_steps(steps);
    const std::size_t patch = kernel_ * channels_;
    c.patches.assign(t_out * patch, 0.0);
    const auto pad = static_cast<std::ptrdiff_t>(c_.padding);
    for (std::size_t t = 0; t < t_out; ++t) {
      for (std::size_t k = 0; k < kernel_; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * static_cast<std::size_t>(c_.stride) + k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
        std::copy_n(x + static_cast<std::size_t>(src) * channels_, channels_,
                    c.patches.begin() + static_cast<std::ptrdiff_t>(t * patch + k * channels_));
      }
    }
    c.act.assign(t_out * filters_, 0.0);
    dense_forward(p + conv_.w, p + conv_.b, c.patches.data(), c.act.data(), t_out, patch,
                  filters_);
    for (double& v : c.act) v = v > 0.0 ? v : 0.0;
    std::vector<double> pooled(filters_, 0.0);
    for (std::size_t t = 0; t < t_out; ++t)
      for (std::size_t f = 0; f < filters_; ++f) pooled[f] += c.act[t * filters_ + f];
    for (double& v : pooled) v /= static_cast<double>(t_out);
    c.head.assign(1, std::move(pooled));
    head_.forward(p, c.head);
  }

  void logits(const double* p, const double* x, std::size_t steps, double* out) const override {
    Cache c;
    forward(p, x, steps, c);
    std::copy(c.head.back().begin(), c.head.back().end(), out);
  }

  double loss_grad(const double* p, const double* x, std::size_t steps, int label,
                   double* g) const override {
    Cache c;
    forward(p, x, steps, c);
    std::vector<double> dl(c.head.back().size());
    const double loss = softmax_xent(c.head.back().data(), dl.size(), label, dl.data());
    auto dpooled = head_.backward(p, c.head, std::move(dl), g);
    const std::size_t t_out = c.act.size() / filters_;
    std::vector<double> dact(c.act.size());
    for (std::size_t t = 0; t < t_out; ++t)
      for (std::size_t f = 0; f < filters_; ++f) {
        const std::size_t i = t * filters_ + f;
        dact[i] = c.act[i] > 0.0 ? dpooled[f] / static_cast<double>(t_out) : 0.0;
      }
    dense_backward(p + conv_.w, c.patches.data(), dact.data(), g + conv_.w, g + conv_.b,
                   nullptr, t_out, kernel_ * channels_, filters_);
    return loss;
  }

 private:
  ConvSpec c_;
  std::size_t channels_ = 0, filters_ = 0, kernel_ = 0;
  Dense conv_;
  Head head_;
};

// Embedding + sinusoidal positions, one pre-norm encoder block
// (self-attention, feed-forward), mean over time, head.
class AttnImpl final : public NetworkImpl {
 public:
  AttnImpl(const ModelSpec& s, Layout& layout) : a_(*s.attn) {
    in_ = static_cast<std::size_t>(s.input_dim);
    m_ = static_cast<std::size_t>(a_.model_dim);
    ff_ = static_cast<std::size_t>(a_.ff_hidden);
    heads_ = static_cast<std::size_t>(a_.heads);
    embed_ = layout.dense(in_, m_);
    ln1_ = layout.norm(m_);
    q_ = layout.dense(m_, m_);
    k_ = layout.dense(m_, m_);
    v_ = layout.dense(m_, m_);
    o_ = layout.dense(m_, m_);
    ln2_ = layout.norm(m_);
    ff1_ = layout.dense(m_, ff_);
    ff2_ = layout.dense(ff_, m_);
    head_.build(layout, m_, s.hidden, static_cast<std::size_t>(s.class_count));
  }

  struct Cache {
    std::size_t steps = 0;
    std::vector<double> e, u, uhat, uinv, q, k, v, attn, ctx, r, w, what, winv, h, z;
    std::vector<std::vector<double>> head;
  };

  static double position_code(std::size_t t, std::size_t i, std::size_t m) {
    const double rate =
        std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(m));
    return (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate)
                        : std::cos(static_cast<double>(t) * rate);
  }

  void forward(const double* p, const double* x, std::size_t T, Cache& c) const {
    const std::size_t m = m_, dh = m_ / heads_;
    c.steps = T;
    c.e.assign(T * m, 0.0);
    dense_forward(p + embed_.w, p + embed_.b, x, c.e.data(), T, in_, m);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i) c.e[t * m + i] += position_code(t, i, m);

    c.u.assign(T * m, 0.0);
    c.uhat.assign(T * m, 0.0);
    c.uinv.assign(T, 0.0);
    layernorm_forward(p + ln1_.gain, p + ln1_.bias, c.e.data(), c.u.data(), c.uhat.data(),
                      c.uinv.data(), T, m);
    c.q.assign(T * m, 0.0);
    c.k.assign(T * m, 0.0);
    c.v.assign(T * m, 0.0);
    dense_forward(p + q_.w, p + q_.b, c.u.data(), c.q.data(), T, m, m);
    dense_forward(p + k_.w, p + k_.b, c.u.data(), c.k.data(), T, m, m);
    dense_forward(p + v_.w, p + v_.b, c.u.data(), c.v.data(), T, m, m);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.attn.assign(heads_ * T * T, 0.0);
    c.ctx.assign(T * m, 0.0);
    for (std::size_t h = 0; h < heads_; ++h) {
      double* A = c.attn.data() + h * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t a = 0; a < dh; ++a) s += c.q[i * m + h * dh + a] * c.k[j * m + h * dh + a];
          A[i * T + j] = s * scale;
          mx = std::max(mx, A[i * T + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          A[i * T + j] = std::exp(A[i * T + j] - mx);
          z += A[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) A[i * T + j] /= z;
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t a = 0; a < dh; ++a)
            c.ctx[i * m + h * dh + a] += A[i * T + j] * c.v[j * m + h * dh + a];
      }
    }
    c.r.assign(T * m, 0.0);
    dense_forward(p + o_.w, p + o_.b, c.ctx.data(), c.r.data(), T, m, m);
    for (std::size_t i = 0; i < T * m; ++i) c.r[i] += c.e[i];

    c.w.assign(T * m, 0.0);
    c.what.assign(T * m, 0.0);
    c.winv.assign(T, 0.0);
    layernorm_forward(p + ln2_.gain, p + ln2_.bias, c.r.data(), c.w.data(), c.what.data(),
                      c.winv.data(), T, m);
    c.h.assign(T * ff_, 0.0);
    dense_forward(p + ff1_.w, p + ff1_.b, c.w.data(), c.h.data(), T, m, ff_);
    for (double& v : c.h) v = v > 0.0 ? v : 0.0;
    c.z.assign(T * m, 0.0);
    dense_forward(p + ff2_.w, p + ff2_.b, c.h.data(), c.z.data(), T, ff_, m);
    for (std::size_t i = 0; i < T * m; ++i) c.z[i] += c.r[i];

    std::vector<double> pooled(m, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i) pooled[i] += c.z[t * m + i];
    for (double& v : pooled) v /= static_cast<double>(T);
    c.head.assign(1, std::move(pooled));
    head_.forward(p, c.head);
  }

  void logits(const double* p, const double* x, std::size_t steps, double* out) const override {
    Cache c;
    forward(p, x, steps, c);
    std::copy(c.head.back().begin(), c.head.back().end(), out);
  }

  double loss_grad(const double* p, const double* x, std::size_t T, int label,
                   double* g) const override {
    Cache c;
    forward(p, x, T, c);
    const std::size_t m = m_, dh = m_ / heads_;
    std::vector<double> dl(c.head.back().size());
    const double loss = softmax_xent(c.head.back().data(), dl.size(), label, dl.data());
    auto dpooled = head_.backward(p, c.head, std::move(dl), g);

    // dz: mean pooling spreads evenly over time.
    std::vector<double> dz(T * m);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < m; ++i) dz[t * m + i] = dpooled[i] / static_cast<double>(T);

    // Feed-forward residual.
    std::vector<double> dr = dz;
    std::vector<double> dh_act(T * ff_);
    dense_backward(p + ff2_.w, c.h.data(), dz.data(), g + ff2_.w, g + ff2_.b, dh_act.data(), T,
                   ff_, m);
    for (std::size_t i = 0; i < T * ff_; ++i)
      if (c.h[i] <= 0.0) dh_act[i] = 0.0;
    std::vector<double> dw(T * m);
    dense_backward(p + ff1_.w, c.w.data(), dh_act.data(), g + ff1_.w, g + ff1_.b, dw.data(), T,
                   m, ff_);
    layernorm_backward(p + ln2_.gain, c.what.data(), c.winv.data(), dw.data(), g + ln2_.gain,
                       g + ln2_.bias, dr.data(), T, m);

    // Attention residual.
    std::vector<double> de = dr;
    std::vector<double> dctx(T * m);
    dense_backward(p + o_.w, c.ctx.data(), dr.data(), g + o_.w, g + o_.b, dctx.data(), T, m, m);
    std::vector<double> dq(T * m, 0.0), dk(T * m, 0.0), dv(T * m, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dA(T * T);
    for (std::size_t h = 0; h < heads_; ++h) {
      const double* A = c.attn.data() + h * T * T;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t a = 0; a < dh; ++a) {
            s += dctx[i * m + h * dh + a] * c.v[j * m + h * dh + a];
            dv[j * m + h * dh + a] += A[i * T + j] * dctx[i * m + h * dh + a];
          }
          dA[i * T + j] = s;
        }
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += dA[i * T + j] * A[i * T + j];
        for (std::size_t j = 0; j < T; ++j) {
          const double ds = A[i * T + j] * (dA[i * T + j] - dot) * scale;
          for (std::size_t a = 0; a < dh; ++a) {
            dq[i * m + h * dh + a] += ds * c.k[j * m + h * dh + a];
            dk[j * m + h * dh + a] += ds * c.q[i * m + h * dh + a];
          }
        }
      }
    }
    std::vector<double> du(T * m, 0.0), tmp(T * m);
    dense_backward(p + q_.w, c.u.data(), dq.data(), g + q_.w, g + q_.b, tmp.data(), T, m, m);
    for (std::size_t i = 0; i < T * m; ++i) du[i] += tmp[i];
    dense_backward(p + k_.w, c.u.data(), dk.data(), g + k_.w, g + k_.b, tmp.data(), T, m, m);
    for (std::size_t i = 0; i < T * m; ++i) du[i] += tmp[i];
    dense_backward(p + v_.w, c.u.data(), dv.data(), g + v_.w, g + v_.b, tmp.data(), T, m, m);
    for (std::size_t i = 0; i < T * m; ++i) du[i] += tmp[i];
    layernorm_backward(p + ln1_.gain, c.uhat.data(), c.uinv.data(), du.data(), g + ln1_.gain,
                       g + ln1_.bias, de.data(), T, m);

    dense_backward(p + embed_.w, x, de.data(), g + embed_.w, g + embed_.b, nullptr, T, in_, m);
    return loss;
  }

 private:
  AttnSpec a_;
  std::size_t in_ = 0, m_ = 0, ff_ = 0, heads_ = 1;
  Dense embed_, q_, k_, v_, o_, ff1_, ff2_;
  Norm ln1_, ln2_;
  Head head_;
};

}  // namespace detail

// Parameter layout and per-example evaluation for one ModelSpec. Immutable
// after construction; safe to share across threads.
class Network {
 public:
  explicit Network(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    switch (spec_.arch) {
      case Arch::kMlp: impl_ = std::make_shared<detail::MlpImpl>(spec_, layout_); break;
      case Arch::kConv1d: impl_ = std::make_shared<detail::ConvImpl>(spec_, layout_); break;
      case Arch::kAttnEncoder:
        impl_ = std::make_shared<detail::AttnImpl>(spec_, layout_);
        break;
    }
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t param_count() const { return layout_.size(); }
  std::size_t class_count() const { return static_cast<std::size_t>(spec_.class_count); }

  std::vector<double> init_params(std::uint64_t seed) const {
    std::vector<double> params(param_count());
    Rng rng = make_rng(seed);
    layout_.init(params, rng);
    return params;
  }

  // Throws a dimension error unless the batch fits this network.
  void check_batch(const Tensor& batch) const {
    require(batch.rank() == 2 || batch.rank() == 3, ErrorKind::kDimension,
            "batch must be n x d or n x T x d, got rank " + std::to_string(batch.rank()));
    require(batch.width() == static_cast<std::size_t>(spec_.input_dim), ErrorKind::kDimension,
            "expected feature width " + std::to_string(spec_.input_dim) + ", got " +
                std::to_string(batch.width()));
    if (spec_.arch == Arch::kMlp) {
      require(batch.time_steps() == static_cast<std::size_t>(spec_.time_steps),
              ErrorKind::kDimension,
              "expected " + std::to_string(spec_.time_steps) + " time steps, got " +
                  std::to_string(batch.time_steps()));
    }
  }

  void check_params(std::span<const double> params) const {
    require(params.size() == param_count(), ErrorKind::kDimension,
            "expected " + std::to_string(param_count()) + " parameters, got " +
                std::to_string(params.size()));
  }

  void logits_one(std::span<const double> params, std::span<const double> example,
                  std::size_t steps, std::span<double> out) const {
    impl_->logits(params.data(), example.data(), steps, out.data());
  }

  // Adds the example's gradient into grad; returns the example's loss.
  double loss_grad_one(std::span<const double> params, std::span<const double> example,
                       std::size_t steps, int label, std::span<double> grad) const {
    return impl_->loss_grad(params.data(), example.data(), steps, label, grad.data());
  }

  Tensor logits(std::span<const double> params, const Tensor& batch) const {
    check_params(params);
    check_batch(batch);
    Tensor out = Tensor::zeros({batch.rows(), class_count()});
    for (std::size_t i = 0; i < batch.rows(); ++i)
      logits_one(params, batch.row(i), batch.time_steps(), out.row(i));
    return out;
  }

 private:
  ModelSpec spec_;
  detail::Layout layout_;
  std::shared_ptr<const detail::NetworkImpl> impl_;
};

// ---------------------------------------------------------------------------
// Trained model + serialization

struct PrivacySpent {
  double epsilon = 0.0;
  double delta = 0.0;
  int best_order = 0;

  bool operator==(const PrivacySpent&) const = default;
};

struct ModelMeta {
  int epochs_run = 0;
  double final_loss = 0.0;
  std::optional<PrivacySpent> privacy_spent;
  bool budget_exhausted = false;
  std::optional<double> noise_multiplier;
  std::optional<double> sampling_rate;
  std::int64_t steps = 0;

  bool operator==(const ModelMeta&) const = default;
};

struct TrainedModel {
  ModelSpec spec;
  std::vector<double> params;
  ModelMeta meta;

  Network network() const { return Network(spec); }
};

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json model_to_json(const TrainedModel& m) {
  nlohmann::json meta{{"epochs_run", m.meta.epochs_run},
                      {"final_loss", m.meta.final_loss},
                      {"budget_exhausted", m.meta.budget_exhausted},
                      {"steps", m.meta.steps}};
  meta["privacy_spent"] = nullptr;
  if (m.meta.privacy_spent) {
    meta["privacy_spent"] = {{"epsilon", m.meta.privacy_spent->epsilon},
                             {"delta", m.meta.privacy_spent->delta},
                             {"best_order", m.meta.privacy_spent->best_order}};
  }
  if (m.meta.noise_multiplier) meta["noise_multiplier"] = *m.meta.noise_multiplier;
  if (m.meta.sampling_rate) meta["sampling_rate"] = *m.meta.sampling_rate;
  return {{"format", "privatexr-model"},
          {"version", kModelFormatVersion},
          {"spec", m.spec.to_json()},
          {"params", m.params},
          {"meta", meta}};
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
  try {
    require(j.value("format", std::string()) == "privatexr-model", ErrorKind::kFormat,
            "not a privatexr model document");
    require(j.value("version", 0) == kModelFormatVersion, ErrorKind::kFormat,
            "unsupported model version");
    TrainedModel m;
    m.spec = ModelSpec::from_json(j.at("spec"));
    m.params = j.at("params").get<std::vector<double>>();
    const auto& meta = j.at("meta");
    m.meta.epochs_run = meta.value("epochs_run", 0);
    m.meta.final_loss = meta.value("final_loss", 0.0);
    m.meta.budget_exhausted = meta.value("budget_exhausted", false);
    m.meta.steps = meta.value("steps", std::int64_t{0});
    if (meta.contains("privacy_spent") && !meta.at("privacy_spent").is_null()) {
      const auto& ps = meta.at("privacy_spent");
      m.meta.privacy_spent = PrivacySpent{ps.at("epsilon").get<double>(),
                                          ps.at("delta").get<double>(),
                                          ps.value("best_order", 0)};
    }
    if (meta.contains("noise_multiplier"))
      m.meta.noise_multiplier = meta.at("noise_multiplier").get<double>();
    if (meta.contains("sampling_rate"))
      m.meta.sampling_rate = meta.at("sampling_rate").get<double>();
    Network(m.spec).check_params(m.params);
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed model document: ") + e.what());
  }
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kRuntime, "cannot write " + path.string());
  out << model_to_json(m).dump() << '\n';
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot open model " + path.string());
  try {
    return model_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kFormat, "model file " + path.string() + " is not JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Public operations

inline std::vector<double> init_params(const ModelSpec& spec, std::uint64_t seed) {
  return Network(spec).init_params(seed);
}

inline Tensor forward(const TrainedModel& model, const Tensor& batch) {
  return Network(model.spec).logits(model.params, batch);
}

inline void softmax_rows(Tensor& t) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    auto r = t.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : r) v /= z;
  }
}

inline Tensor predict_proba(const Network& net, std::span<const double> params,
                            const Tensor& batch) {
  Tensor t = net.logits(params, batch);
  softmax_rows(t);
  return t;
}

inline Tensor predict_proba(const TrainedModel& model, const Tensor& batch) {
  return predict_proba(Network(model.spec), model.params, batch);
}

inline std::vector<int> predict_classes(const TrainedModel& model, const Tensor& batch) {
  Tensor logits = forward(model, batch);
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

enum class Reduction { kMean, kPerExample };

struct LossGrads {
  double loss = 0.0;                              // mean loss over the batch
  std::vector<double> losses;                     // per example
  std::vector<double> grad;                       // mean gradient (kMean)
  std::vector<std::vector<double>> per_example;   // kPerExample
};

inline LossGrads loss_and_grads(const Network& net, std::span<const double> params,
                                const Tensor& batch, std::span<const int> labels,
                                Reduction reduction) {
  net.check_params(params);
  net.check_batch(batch);
  require(labels.size() == batch.rows(), ErrorKind::kDimension,
          "label count does not match batch size");
  for (int y : labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < net.class_count(),
            ErrorKind::kInvalidArgument, "label " + std::to_string(y) + " out of range");
  }
  LossGrads out;
  const std::size_t n = batch.rows();
  out.losses.resize(n);
  if (reduction == Reduction::kPerExample) {
    out.per_example.assign(n, std::vector<double>(params.size(), 0.0));
    for (std::size_t i = 0; i < n; ++i)
      out.losses[i] = net.loss_grad_one(params, batch.row(i), batch.time_steps(), labels[i],
                                        out.per_example[i]);
  } else {
    out.grad.assign(params.size(), 0.0);
    std::vector<double> g(params.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(g.begin(), g.end(), 0.0);
      out.losses[i] = net.loss_grad_one(params, batch.row(i), batch.time_steps(), labels[i], g);
      for (std::size_t j = 0; j < g.size(); ++j) out.grad[j] += g[j];
    }
    if (n > 0)
      for (double& v : out.grad) v /= static_cast<double>(n);
  }
  for (double l : out.losses) out.loss += l;
  if (n > 0) out.loss /= static_cast<double>(n);
  return out;
}

inline LossGrads loss_and_grads(const TrainedModel& model, const Tensor& batch,
                                std::span<const int> labels, Reduction reduction) {
  return loss_and_grads(Network(model.spec), model.params, batch, labels, reduction);
}

// Per-example cross-entropy without gradients.
inline std::vector<double> per_example_loss(const Network& net, std::span<const double> params,
                                            const Tensor& batch, std::span<const int> labels) {
  Tensor logits = net.logits(params, batch);
  std::vector<double> out(batch.rows());
  std::vector<double> scratch(net.class_count());
  for (std::size_t i = 0; i < batch.rows(); ++i)
    out[i] = detail::softmax_xent(logits.row(i).data(), net.class_count(), labels[i],
                                  scratch.data());
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

struct Sgd {
  double lr = 0.01;
};

struct Adam {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using UpdateRule = std::variant<Sgd, Adam>;

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

inline void optimizer_step(std::span<double> params, std::span<const double> grads,
                           OptimizerState& state, const UpdateRule& rule) {
  require(params.size() == grads.size(), ErrorKind::kDimension,
          "parameter and gradient lengths differ");
  if (const auto* sgd = std::get_if<Sgd>(&rule)) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= sgd->lr * grads[i];
    ++state.step;
    return;
  }
  const Adam& a = std::get<Adam>(rule);
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = a.beta1 * state.m[i] + (1.0 - a.beta1) * grads[i];
    state.v[i] = a.beta2 * state.v[i] + (1.0 - a.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= a.lr * mhat / (std::sqrt(vhat) + a.eps);
  }
}

}  // namespace privatexr
