#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "reliscope/core.hpp"

namespace reliscope {

// Channel-major 3-d value tensor; vectors are stored with h = w = 1.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> v;

  static Tensor zeros(int c, int h, int w);

  double at(int ch, int y, int x) const {
    return v[static_cast<std::size_t>((ch * h + y) * w + x)];
  }
  double& at(int ch, int y, int x) {
    return v[static_cast<std::size_t>((ch * h + y) * w + x)];
  }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

struct LayerDef {
  enum class Kind { Conv, ReLU, MaxPool2, GlobalAvgPool, Dense };
  Kind kind = Kind::ReLU;
  int in = 0;   // channels (Conv) or features (Dense)
  int out = 0;
  std::string id;  // set for parametric layers
};

const char* to_string(LayerDef::Kind k);
LayerDef::Kind layer_kind_from_string(const std::string& s);

// Parameters of one Conv or Dense layer. Conv weights are laid out
// [out][in][ky][kx] with fixed 3x3 kernels (stride 1, zero padding 1);
// Dense weights are [out][in]. Values are kept on the f32 grid so the
// checkpoint format round-trips without changing predictions.
struct ParamBlock {
  std::string id;
  LayerDef::Kind kind = LayerDef::Kind::Conv;
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;
};

// A small feed-forward CNN built from conv 3x3 / ReLU / max-pool 2 /
// global-average-pool / dense layers. Inference is pure and re-entrant;
// the same immutable instance may be shared across threads.
class Cnn {
 public:
  Cnn() = default;
  explicit Cnn(std::vector<LayerDef> defs);

  // He-uniform fan-in initialization, biases zero.
  void init_weights(std::uint64_t seed);

  int input_channels() const;
  int class_count() const;
  const std::vector<LayerDef>& layers() const { return defs_; }
  const std::vector<ParamBlock>& params() const { return params_; }
  std::vector<ParamBlock>& params() { return params_; }
  // Last convolutional layer id; the default target for Grad-CAM.
  std::string last_conv_id() const;

  std::vector<double> logits(const ImageTensor& image) const;
  ClassScores predict(const ImageTensor& image) const;

  // Output of every layer for one image; index i holds layer i's output.
  struct Trace {
    std::vector<Tensor> outputs;
    std::vector<std::vector<int>> pool_argmax;  // per layer, empty unless MaxPool2
  };
  Trace forward_trace(const ImageTensor& image) const;

  // Activation of a conv layer (its output, before the following ReLU) and
  // the gradient of the pre-softmax logit of cls with respect to it.
  std::pair<Tensor, Tensor> activations_and_gradients(const ImageTensor& image, ClassLabel cls,
                                                      const std::string& layer_id) const;

  // Continues the forward pass with `activation` substituted for the output
  // of layer_id. Used by finite-difference checks of the gradients above.
  std::vector<double> logits_from(const std::string& layer_id, const Tensor& activation) const;

  // Per-parameter gradient of the mean cross-entropy over one example,
  // scaled by `scale` (typically 1/batch). Accumulates into grads.
  // Returns the example's cross-entropy loss.
  double accumulate_gradients(const ImageTensor& image, ClassLabel truth, double scale,
                              std::vector<ParamBlock>& grads) const;

  std::vector<ParamBlock> zero_gradients() const;

 private:
  int layer_index(const std::string& layer_id) const;
  Tensor run_layer(int idx, const Tensor& in, std::vector<int>* argmax) const;
  // Backpropagates dlogits to the output of layer `stop` (exclusive of the
  // layer itself); stop = -1 collects parameter gradients all the way down.
  Tensor backprop(const Trace& trace, const Tensor& input, std::vector<double> dlogits,
                  int stop, std::vector<ParamBlock>* grads, double scale) const;

  std::vector<LayerDef> defs_;
  std::vector<ParamBlock> params_;
  std::vector<int> param_index_;  // per layer, -1 when non-parametric
};

// The bundled classifier: conv(3->8) ReLU pool, conv(8->16) ReLU pool,
// conv(16->32) ReLU pool, global average pool, dense(32->2).
Cnn make_mini_cnn(std::uint64_t seed);

struct TrainConfig {
  int epochs = 25;
  double weight_decay = 1e-4;
  double initial_learning_rate = 1e-4;
  int scheduler_step_size = 5;
  double scheduler_gamma = 0.1;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

// initial_learning_rate * gamma^floor(epoch / step_size), epochs 0-based.
double scheduled_learning_rate(const TrainConfig& cfg, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Cnn model;        // weights of the best validation overall-accuracy epoch
  Cnn final_model;  // weights after the last epoch
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  std::vector<EpochMetrics> history;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const Cnn& model, const std::vector<LabeledImage>& set);

// One Adam update over matching parameter/gradient/moment blocks
// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8; L2 decay added to the gradient).
// step counts updates from 1 for bias correction.
void adam_step(std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads,
               std::vector<ParamBlock>& m, std::vector<ParamBlock>& v, long long step,
               double lr, double weight_decay);

// Adam with L2 weight decay added to the gradient, deterministic batch
// order derived from cfg.seed. Throws TrainingDivergedError when the
// loss stops being finite.
TrainResult train(const Cnn& init, const std::vector<LabeledImage>& train_set,
                  const std::vector<LabeledImage>& val_set, const TrainConfig& cfg);

// Versioned binary container: magic "RSCP", u16 version, u32 JSON header
// length, JSON header (architecture, seed, epoch), then f32 little-endian
// parameter tensors in declaration order (weights then bias per layer).
void save_checkpoint(const Cnn& model, const std::filesystem::path& path,
                     std::uint64_t seed = 0, int epoch = -1);
Cnn load_checkpoint(const std::filesystem::path& path);

// Behavioral contract every explainer consumes. predict must be
// deterministic; gradient support is optional (Grad-CAM requires it,
// occlusion and LIME do not).
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual ClassScores predict(const ImageTensor& image) const = 0;
  virtual bool supports_gradients() const { return false; }
  virtual std::pair<Tensor, Tensor> activations_and_gradients(const ImageTensor& image,
                                                              ClassLabel cls,
                                                              const std::string& layer_id) const;
  // Default layer for gradient-based saliency; empty when unsupported.
  virtual std::string default_saliency_layer() const { return {}; }
};

class CnnClassifier final : public Classifier {
 public:
  explicit CnnClassifier(const Cnn& net) : net_(&net) {}
  ClassScores predict(const ImageTensor& image) const override { return net_->predict(image); }
  bool supports_gradients() const override { return true; }
  std::pair<Tensor, Tensor> activations_and_gradients(const ImageTensor& image, ClassLabel cls,
                                                      const std::string& layer_id) const override {
    return net_->activations_and_gradients(image, cls, layer_id);
  }
  std::string default_saliency_layer() const override { return net_->last_conv_id(); }

 private:
  const Cnn* net_;
};

}  // namespace reliscope
