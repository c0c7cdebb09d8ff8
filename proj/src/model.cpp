#include "reliscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "reliscope/util.hpp"

namespace reliscope {

using json = nlohmann::json;

Tensor Tensor::zeros(int c, int h, int w) {
  Tensor t;
  t.c = c;
  t.h = h;
  t.w = w;
  t.v.assign(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
                 static_cast<std::size_t>(w),
             0.0);
  return t;
}

const char* to_string(LayerDef::Kind k) {
  switch (k) {
    case LayerDef::Kind::Conv: return "conv";
    case LayerDef::Kind::ReLU: return "relu";
    case LayerDef::Kind::MaxPool2: return "maxpool2";
    case LayerDef::Kind::GlobalAvgPool: return "gap";
    case LayerDef::Kind::Dense: return "dense";
  }
  return "relu";
}

LayerDef::Kind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerDef::Kind::Conv;
  if (s == "relu") return LayerDef::Kind::ReLU;
  if (s == "maxpool2") return LayerDef::Kind::MaxPool2;
  if (s == "gap") return LayerDef::Kind::GlobalAvgPool;
  if (s == "dense") return LayerDef::Kind::Dense;
  throw InvalidInputError("unknown layer kind: '" + s + "'");
}

namespace {

void conv3x3_forward(const Tensor& in, const ParamBlock& p, Tensor& out) {
  const int h = in.h, w = in.w;
  for (int oc = 0; oc < p.out; ++oc) {
    double* dst0 = &out.v[static_cast<std::size_t>(oc) * h * w];
    std::fill(dst0, dst0 + static_cast<std::size_t>(h) * w, p.b[static_cast<std::size_t>(oc)]);
    for (int ic = 0; ic < p.in; ++ic) {
      const double* src0 = &in.v[static_cast<std::size_t>(ic) * h * w];
      const double* wk =
          &p.w[(static_cast<std::size_t>(oc) * p.in + ic) * 9];
      for (int ky = 0; ky < 3; ++ky) {
        int y_lo = std::max(0, 1 - ky);
        int y_hi = std::min(h, h + 1 - ky);
        for (int kx = 0; kx < 3; ++kx) {
          double wv = wk[ky * 3 + kx];
          if (wv == 0.0) continue;
          int x_lo = std::max(0, 1 - kx);
          int x_hi = std::min(w, w + 1 - kx);
          for (int y = y_lo; y < y_hi; ++y) {
            const double* src = src0 + static_cast<std::size_t>(y + ky - 1) * w + (kx - 1);
            double* dst = dst0 + static_cast<std::size_t>(y) * w;
            for (int x = x_lo; x < x_hi; ++x) dst[x] += wv * src[x];
          }
        }
      }
    }
  }
}

// dW, db and (optionally) din for a conv layer.
void conv3x3_backward(const Tensor& in, const ParamBlock& p, const Tensor& dout, Tensor* din,
                      ParamBlock* dp, double scale) {
  const int h = in.h, w = in.w;
  for (int oc = 0; oc < p.out; ++oc) {
    const double* g0 = &dout.v[static_cast<std::size_t>(oc) * h * w];
    if (dp) {
      double bsum = 0.0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) bsum += g0[i];
      dp->b[static_cast<std::size_t>(oc)] += scale * bsum;
    }
    for (int ic = 0; ic < p.in; ++ic) {
      const double* src0 = &in.v[static_cast<std::size_t>(ic) * h * w];
      const double* wk = &p.w[(static_cast<std::size_t>(oc) * p.in + ic) * 9];
      double* dwk = dp ? &dp->w[(static_cast<std::size_t>(oc) * p.in + ic) * 9] : nullptr;
      double* di0 = din ? &din->v[static_cast<std::size_t>(ic) * h * w] : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        int y_lo = std::max(0, 1 - ky);
        int y_hi = std::min(h, h + 1 - ky);
        for (int kx = 0; kx < 3; ++kx) {
          int x_lo = std::max(0, 1 - kx);
          int x_hi = std::min(w, w + 1 - kx);
          double wv = wk[ky * 3 + kx];
          double acc = 0.0;
          for (int y = y_lo; y < y_hi; ++y) {
            const double* src = src0 + static_cast<std::size_t>(y + ky - 1) * w + (kx - 1);
            const double* g = g0 + static_cast<std::size_t>(y) * w;
            if (di0) {
              double* di = di0 + static_cast<std::size_t>(y + ky - 1) * w + (kx - 1);
              for (int x = x_lo; x < x_hi; ++x) {
                acc += g[x] * src[x];
                di[x] += wv * g[x];
              }
            } else {
              for (int x = x_lo; x < x_hi; ++x) acc += g[x] * src[x];
            }
          }
          if (dwk) dwk[ky * 3 + kx] += scale * acc;
        }
      }
    }
  }
}

std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Tensor image_to_tensor(const ImageTensor& image) {
  Tensor t = Tensor::zeros(image.channels, image.height, image.width);
  for (std::size_t i = 0; i < image.data.size(); ++i) t.v[i] = image.data[i];
  return t;
}

}  // namespace

Cnn::Cnn(std::vector<LayerDef> defs) : defs_(std::move(defs)) {
  param_index_.assign(defs_.size(), -1);
  for (std::size_t i = 0; i < defs_.size(); ++i) {
    const LayerDef& d = defs_[i];
    if (d.kind == LayerDef::Kind::Conv || d.kind == LayerDef::Kind::Dense) {
      if (d.in <= 0 || d.out <= 0)
        throw InvalidInputError("layer '" + d.id + "' needs positive in/out sizes");
      if (d.id.empty()) throw InvalidInputError("parametric layers need an id");
      ParamBlock p;
      p.id = d.id;
      p.kind = d.kind;
      p.in = d.in;
      p.out = d.out;
      std::size_t wsize = d.kind == LayerDef::Kind::Conv
                              ? static_cast<std::size_t>(d.out) * d.in * 9
                              : static_cast<std::size_t>(d.out) * d.in;
      p.w.assign(wsize, 0.0);
      p.b.assign(static_cast<std::size_t>(d.out), 0.0);
      param_index_[i] = static_cast<int>(params_.size());
      params_.push_back(std::move(p));
    }
  }
}

void Cnn::init_weights(std::uint64_t seed) {
  for (auto& p : params_) {
    Rng rng(derive_seed(seed, "init/" + p.id));
    int fan_in = p.kind == LayerDef::Kind::Conv ? p.in * 9 : p.in;
    double limit = std::sqrt(6.0 / fan_in);
    for (double& w : p.w) w = quantize_f32(rng.uniform(-limit, limit));
    std::fill(p.b.begin(), p.b.end(), 0.0);
  }
}

int Cnn::input_channels() const {
  for (const auto& d : defs_)
    if (d.kind == LayerDef::Kind::Conv) return d.in;
  return 0;
}

int Cnn::class_count() const {
  for (auto it = defs_.rbegin(); it != defs_.rend(); ++it)
    if (it->kind == LayerDef::Kind::Dense) return it->out;
  return 0;
}

std::string Cnn::last_conv_id() const {
  std::string id;
  for (const auto& d : defs_)
    if (d.kind == LayerDef::Kind::Conv) id = d.id;
  return id;
}

int Cnn::layer_index(const std::string& layer_id) const {
  for (std::size_t i = 0; i < defs_.size(); ++i)
    if (defs_[i].id == layer_id && !layer_id.empty()) return static_cast<int>(i);
  throw InvalidInputError("unknown layer id: '" + layer_id + "'");
}

Tensor Cnn::run_layer(int idx, const Tensor& in, std::vector<int>* argmax) const {
  const LayerDef& d = defs_[static_cast<std::size_t>(idx)];
  switch (d.kind) {
    case LayerDef::Kind::Conv: {
      const ParamBlock& p = params_[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(idx)])];
      if (in.c != p.in)
        throw InvalidInputError("layer '" + d.id + "': expected " + std::to_string(p.in) +
                                " input channels, got " + std::to_string(in.c));
      Tensor out = Tensor::zeros(p.out, in.h, in.w);
      conv3x3_forward(in, p, out);
      return out;
    }
    case LayerDef::Kind::ReLU: {
      Tensor out = in;
      for (double& v : out.v) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case LayerDef::Kind::MaxPool2: {
      int oh = in.h / 2, ow = in.w / 2;
      if (oh < 1 || ow < 1) throw InvalidInputError("maxpool2 input too small");
      Tensor out = Tensor::zeros(in.c, oh, ow);
      if (argmax) argmax->assign(out.size(), 0);
      for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            int best_iy = 2 * y, best_ix = 2 * x;
            double best = in.at(c, best_iy, best_ix);
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                double v = in.at(c, 2 * y + dy, 2 * x + dx);
                if (v > best) {
                  best = v;
                  best_iy = 2 * y + dy;
                  best_ix = 2 * x + dx;
                }
              }
            out.at(c, y, x) = best;
            if (argmax)
              (*argmax)[static_cast<std::size_t>((c * oh + y) * ow + x)] =
                  (c * in.h + best_iy) * in.w + best_ix;
          }
      return out;
    }
    case LayerDef::Kind::GlobalAvgPool: {
      Tensor out = Tensor::zeros(in.c, 1, 1);
      double inv = 1.0 / (static_cast<double>(in.h) * in.w);
      for (int c = 0; c < in.c; ++c) {
        double sum = 0.0;
        const double* src = &in.v[static_cast<std::size_t>(c) * in.h * in.w];
        for (int i = 0; i < in.h * in.w; ++i) sum += src[i];
        out.v[static_cast<std::size_t>(c)] = sum * inv;
      }
      return out;
    }
    case LayerDef::Kind::Dense: {
      const ParamBlock& p = params_[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(idx)])];
      if (static_cast<int>(in.size()) != p.in)
        throw InvalidInputError("layer '" + d.id + "': expected " + std::to_string(p.in) +
                                " inputs, got " + std::to_string(in.size()));
      Tensor out = Tensor::zeros(p.out, 1, 1);
      for (int o = 0; o < p.out; ++o) {
        double acc = p.b[static_cast<std::size_t>(o)];
        const double* wr = &p.w[static_cast<std::size_t>(o) * p.in];
        for (int i = 0; i < p.in; ++i) acc += wr[i] * in.v[static_cast<std::size_t>(i)];
        out.v[static_cast<std::size_t>(o)] = acc;
      }
      return out;
    }
  }
  throw Error("unreachable layer kind");
}

Cnn::Trace Cnn::forward_trace(const ImageTensor& image) const {
  if (defs_.empty()) throw InvalidInputError("network has no layers");
  if (image.channels != input_channels())
    throw InvalidInputError("image has " + std::to_string(image.channels) +
                            " channels, network expects " + std::to_string(input_channels()));
  Trace trace;
  trace.outputs.reserve(defs_.size());
  trace.pool_argmax.resize(defs_.size());
  Tensor cur = image_to_tensor(image);
  for (std::size_t i = 0; i < defs_.size(); ++i) {
    std::vector<int>* am =
        defs_[i].kind == LayerDef::Kind::MaxPool2 ? &trace.pool_argmax[i] : nullptr;
    cur = run_layer(static_cast<int>(i), cur, am);
    trace.outputs.push_back(cur);
  }
  return trace;
}

std::vector<double> Cnn::logits(const ImageTensor& image) const {
  Tensor cur = image_to_tensor(image);
  for (std::size_t i = 0; i < defs_.size(); ++i) cur = run_layer(static_cast<int>(i), cur, nullptr);
  if (cur.h != 1 || cur.w != 1) throw InvalidInputError("network does not end in a vector output");
  return cur.v;
}

ClassScores Cnn::predict(const ImageTensor& image) const {
  ClassScores s;
  s.p = softmax(logits(image));
  return s;
}

Tensor Cnn::backprop(const Trace& trace, const Tensor& input, std::vector<double> dlogits,
                     int stop, std::vector<ParamBlock>* grads, double scale) const {
  Tensor grad = Tensor::zeros(static_cast<int>(dlogits.size()), 1, 1);
  grad.v = std::move(dlogits);
  for (int i = static_cast<int>(defs_.size()) - 1; i > stop; --i) {
    const LayerDef& d = defs_[static_cast<std::size_t>(i)];
    const Tensor& in = i == 0 ? input : trace.outputs[static_cast<std::size_t>(i - 1)];
    switch (d.kind) {
      case LayerDef::Kind::Conv: {
        const ParamBlock& p =
            params_[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(i)])];
        Tensor din;
        Tensor* dinp = nullptr;
        if (i > 0) {  // the image gradient itself is never consumed
          din = Tensor::zeros(in.c, in.h, in.w);
          dinp = &din;
        }
        ParamBlock* dp =
            grads ? &(*grads)[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(i)])]
                  : nullptr;
        conv3x3_backward(in, p, grad, dinp, dp, scale);
        grad = dinp ? std::move(din) : Tensor{};
        break;
      }
      case LayerDef::Kind::ReLU: {
        Tensor din = Tensor::zeros(in.c, in.h, in.w);
        for (std::size_t j = 0; j < in.size(); ++j)
          din.v[j] = in.v[j] > 0.0 ? grad.v[j] : 0.0;
        grad = std::move(din);
        break;
      }
      case LayerDef::Kind::MaxPool2: {
        Tensor din = Tensor::zeros(in.c, in.h, in.w);
        const auto& am = trace.pool_argmax[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < grad.size(); ++j)
          din.v[static_cast<std::size_t>(am[j])] += grad.v[j];
        grad = std::move(din);
        break;
      }
      case LayerDef::Kind::GlobalAvgPool: {
        Tensor din = Tensor::zeros(in.c, in.h, in.w);
        double inv = 1.0 / (static_cast<double>(in.h) * in.w);
        for (int c = 0; c < in.c; ++c) {
          double g = grad.v[static_cast<std::size_t>(c)] * inv;
          double* dst = &din.v[static_cast<std::size_t>(c) * in.h * in.w];
          for (int j = 0; j < in.h * in.w; ++j) dst[j] = g;
        }
        grad = std::move(din);
        break;
      }
      case LayerDef::Kind::Dense: {
        const ParamBlock& p =
            params_[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(i)])];
        if (grads) {
          ParamBlock& dp =
              (*grads)[static_cast<std::size_t>(param_index_[static_cast<std::size_t>(i)])];
          for (int o = 0; o < p.out; ++o) {
            double g = grad.v[static_cast<std::size_t>(o)] * scale;
            dp.b[static_cast<std::size_t>(o)] += g;
            double* dwr = &dp.w[static_cast<std::size_t>(o) * p.in];
            for (int j = 0; j < p.in; ++j) dwr[j] += g * in.v[static_cast<std::size_t>(j)];
          }
        }
        Tensor din = Tensor::zeros(in.c, in.h, in.w);
        for (int j = 0; j < p.in; ++j) {
          double acc = 0.0;
          for (int o = 0; o < p.out; ++o)
            acc += p.w[static_cast<std::size_t>(o) * p.in + j] * grad.v[static_cast<std::size_t>(o)];
          din.v[static_cast<std::size_t>(j)] = acc;
        }
        grad = std::move(din);
        break;
      }
    }
  }
  return grad;
}

std::pair<Tensor, Tensor> Cnn::activations_and_gradients(const ImageTensor& image, ClassLabel cls,
                                                         const std::string& layer_id) const {
  int idx = layer_index(layer_id);
  if (defs_[static_cast<std::size_t>(idx)].kind != LayerDef::Kind::Conv)
    throw InvalidInputError("layer '" + layer_id + "' is not convolutional");
  Trace trace = forward_trace(image);
  const Tensor& logits_t = trace.outputs.back();
  std::vector<double> dlogits(logits_t.size(), 0.0);
  dlogits[static_cast<std::size_t>(cls)] = 1.0;
  Tensor input = image_to_tensor(image);
  Tensor grad = backprop(trace, input, std::move(dlogits), idx, nullptr, 1.0);
  return {trace.outputs[static_cast<std::size_t>(idx)], std::move(grad)};
}

std::vector<double> Cnn::logits_from(const std::string& layer_id, const Tensor& activation) const {
  int idx = layer_index(layer_id);
  Tensor cur = activation;
  for (std::size_t i = static_cast<std::size_t>(idx) + 1; i < defs_.size(); ++i)
    cur = run_layer(static_cast<int>(i), cur, nullptr);
  if (cur.h != 1 || cur.w != 1) throw InvalidInputError("network does not end in a vector output");
  return cur.v;
}

double Cnn::accumulate_gradients(const ImageTensor& image, ClassLabel truth, double scale,
                                 std::vector<ParamBlock>& grads) const {
  Trace trace = forward_trace(image);
  const Tensor& logits_t = trace.outputs.back();
  std::vector<double> probs = softmax(logits_t.v);
  std::size_t y = static_cast<std::size_t>(truth);
  // Unclamped: an underflowed probability yields an infinite loss, which is
  // exactly the divergence signal train() watches for.
  double loss = -std::log(probs[y]);
  std::vector<double> dlogits = probs;
  dlogits[y] -= 1.0;
  Tensor input = image_to_tensor(image);
  backprop(trace, input, std::move(dlogits), -1, &grads, scale);
  return loss;
}

std::vector<ParamBlock> Cnn::zero_gradients() const {
  std::vector<ParamBlock> grads = params_;
  for (auto& g : grads) {
    std::fill(g.w.begin(), g.w.end(), 0.0);
    std::fill(g.b.begin(), g.b.end(), 0.0);
  }
  return grads;
}

Cnn make_mini_cnn(std::uint64_t seed) {
  using K = LayerDef::Kind;
  std::vector<LayerDef> defs = {
      {K::Conv, 3, 8, "conv1"},   {K::ReLU, 0, 0, ""}, {K::MaxPool2, 0, 0, ""},
      {K::Conv, 8, 16, "conv2"},  {K::ReLU, 0, 0, ""}, {K::MaxPool2, 0, 0, ""},
      {K::Conv, 16, 32, "conv3"}, {K::ReLU, 0, 0, ""}, {K::MaxPool2, 0, 0, ""},
      {K::GlobalAvgPool, 0, 0, ""}, {K::Dense, 32, 2, "dense"},
  };
  Cnn net(std::move(defs));
  net.init_weights(seed);
  return net;
}

double scheduled_learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.initial_learning_rate *
         std::pow(cfg.scheduler_gamma, std::floor(static_cast<double>(epoch) /
                                                  cfg.scheduler_step_size));
}

EvalResult evaluate(const Cnn& model, const std::vector<LabeledImage>& set) {
  if (set.empty()) throw EmptyEvaluationSetError();
  std::vector<double> losses(set.size(), 0.0);
  std::vector<char> correct(set.size(), 0);
  parallel_for(set.size(), [&](std::size_t i) {
    std::vector<double> lg = model.logits(set[i].image);
    std::vector<double> probs = softmax(lg);
    std::size_t y = static_cast<std::size_t>(set[i].label);
    losses[i] = -std::log(std::max(probs[y], 1e-300));
    ClassLabel pred = probs[1] > probs[0] ? ClassLabel::Ready : ClassLabel::NotReady;
    correct[i] = pred == set[i].label ? 1 : 0;
  });
  EvalResult r;
  for (std::size_t i = 0; i < set.size(); ++i) {
    r.loss += losses[i];
    r.accuracy += correct[i];
  }
  r.loss /= static_cast<double>(set.size());
  r.accuracy /= static_cast<double>(set.size());
  return r;
}

void adam_step(std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads,
               std::vector<ParamBlock>& m, std::vector<ParamBlock>& v, long long step,
               double lr, double weight_decay) {
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                      std::vector<double>& mm, std::vector<double>& vv) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        double grad = g[k] + weight_decay * p[k];
        mm[k] = beta1 * mm[k] + (1.0 - beta1) * grad;
        vv[k] = beta2 * vv[k] + (1.0 - beta2) * grad * grad;
        double mhat = mm[k] / bc1;
        double vhat = vv[k] / bc2;
        p[k] = quantize_f32(p[k] - lr * mhat / (std::sqrt(vhat) + eps));
      }
    };
    update(params[pi].w, grads[pi].w, m[pi].w, v[pi].w);
    update(params[pi].b, grads[pi].b, m[pi].b, v[pi].b);
  }
}

TrainResult train(const Cnn& init, const std::vector<LabeledImage>& train_set,
                  const std::vector<LabeledImage>& val_set, const TrainConfig& cfg) {
  if (train_set.empty() || val_set.empty())
    throw InsufficientDataError("train: both train and val splits must be nonempty");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.scheduler_step_size < 1 ||
      cfg.initial_learning_rate <= 0.0 || cfg.scheduler_gamma <= 0.0 ||
      cfg.scheduler_gamma > 1.0 || cfg.weight_decay < 0.0)
    throw InvalidInputError("train: invalid training configuration");

  TrainResult result;
  result.model = init;
  result.final_model = init;
  if (cfg.epochs == 0) return result;

  Cnn model = init;
  std::vector<ParamBlock> m = model.zero_gradients();
  std::vector<ParamBlock> v = model.zero_gradients();
  long long step = 0;

  Rng shuffle_rng(derive_seed(cfg.seed, "train/shuffle"));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = scheduled_learning_rate(cfg, epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      double inv_batch = 1.0 / static_cast<double>(end - start);
      std::vector<ParamBlock> grads = model.zero_gradients();
      std::vector<double> batch_losses(end - start, 0.0);
      for (std::size_t j = start; j < end; ++j) {
        const LabeledImage& ex = train_set[order[j]];
        batch_losses[j - start] =
            model.accumulate_gradients(ex.image, ex.label, inv_batch, grads);
      }
      double batch_loss = 0.0;
      for (double bl : batch_losses) batch_loss += bl;
      batch_loss *= inv_batch;
      if (!std::isfinite(batch_loss))
        throw TrainingDivergedError(epoch, "training diverged (non-finite loss) at epoch " +
                                               std::to_string(epoch));
      epoch_loss += batch_loss * static_cast<double>(end - start);

      ++step;
      adam_step(model.params(), grads, m, v, step, lr, cfg.weight_decay);
    }

    EvalResult train_acc_eval = evaluate(model, train_set);
    EvalResult val_eval = evaluate(model, val_set);

    EpochMetrics em;
    em.epoch = epoch;
    em.learning_rate = lr;
    em.train_loss = epoch_loss / static_cast<double>(train_set.size());
    em.train_accuracy = train_acc_eval.accuracy;
    em.val_loss = val_eval.loss;
    em.val_accuracy = val_eval.accuracy;
    result.history.push_back(em);

    if (val_eval.accuracy > result.best_val_accuracy || result.best_epoch < 0) {
      result.best_val_accuracy = val_eval.accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  result.final_model = model;
  return result;
}

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Cnn& model, const std::filesystem::path& path, std::uint64_t seed,
                     int epoch) {
  json header;
  header["architecture"] = json::array();
  for (const auto& d : model.layers()) {
    json l;
    l["kind"] = to_string(d.kind);
    if (d.kind == LayerDef::Kind::Conv || d.kind == LayerDef::Kind::Dense) {
      l["in"] = d.in;
      l["out"] = d.out;
      l["id"] = d.id;
    }
    header["architecture"].push_back(l);
  }
  header["seed"] = seed;
  header["epoch"] = epoch;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write checkpoint '" + path.string() + "'");
  out.write("RSCP", 4);
  unsigned char ver[2] = {kCheckpointVersion & 0xff, kCheckpointVersion >> 8};
  out.write(reinterpret_cast<const char*>(ver), 2);
  std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lb), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : model.params()) {
    write_f32(out, p.w.data(), p.w.size());
    write_f32(out, p.b.data(), p.b.size());
  }
  if (!out) throw Error("checkpoint write failed for '" + path.string() + "'");
}

Cnn load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RSCP", 4) != 0)
    throw CheckpointError("'" + path.string() + "' is not a checkpoint file");
  unsigned char ver[2];
  in.read(reinterpret_cast<char*>(ver), 2);
  if (!in) throw CheckpointError("truncated checkpoint: missing version");
  std::uint16_t version = static_cast<std::uint16_t>(ver[0] | (ver[1] << 8));
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  unsigned char lb[4];
  in.read(reinterpret_cast<char*>(lb), 4);
  if (!in) throw CheckpointError("truncated checkpoint: missing header length");
  std::uint32_t len = static_cast<std::uint32_t>(lb[0]) | (static_cast<std::uint32_t>(lb[1]) << 8) |
                      (static_cast<std::uint32_t>(lb[2]) << 16) |
                      (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint: header ends early");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (!header.contains("architecture") || !header["architecture"].is_array())
    throw CheckpointError("checkpoint header lacks an architecture description");
  std::vector<LayerDef> defs;
  for (const auto& l : header["architecture"]) {
    LayerDef d;
    d.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    if (d.kind == LayerDef::Kind::Conv || d.kind == LayerDef::Kind::Dense) {
      d.in = l.at("in").get<int>();
      d.out = l.at("out").get<int>();
      d.id = l.at("id").get<std::string>();
    }
    defs.push_back(std::move(d));
  }
  Cnn model(std::move(defs));
  for (auto& p : model.params()) {
    if (!read_f32(in, p.w.data(), p.w.size()) || !read_f32(in, p.b.data(), p.b.size()))
      throw CheckpointError("truncated checkpoint: parameter data ends early");
  }
  return model;
}

std::pair<Tensor, Tensor> Classifier::activations_and_gradients(const ImageTensor&, ClassLabel,
                                                                const std::string&) const {
  throw UnsupportedExplainerError("classifier does not expose activations and gradients");
}

}  // namespace reliscope
