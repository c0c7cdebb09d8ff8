#include <doctest.h>

#include <cmath>
#include <fstream>

#include "reliscope/model.hpp"
#include "reliscope/util.hpp"
#include "test_helpers.hpp"

using namespace reliscope;
using testutil::TempDir;

namespace {

using K = LayerDef::Kind;

// conv(1->1, identity-capable) -> ReLU -> GAP -> dense(1->2)
Cnn make_toy(double center_weight, double conv_bias, double dense_w, double dense_b) {
  Cnn net({{K::Conv, 1, 1, "conv1"},
           {K::ReLU, 0, 0, ""},
           {K::GlobalAvgPool, 0, 0, ""},
           {K::Dense, 1, 2, "dense"}});
  auto& params = net.params();
  params[0].w.assign(9, 0.0);
  params[0].w[4] = center_weight;  // kernel center
  params[0].b[0] = conv_bias;
  params[1].w = {dense_w, -dense_w};
  params[1].b = {dense_b, -dense_b};
  return net;
}

// Exactly representable 4x4 image: entries k/16.
ImageTensor sixteenths_image() {
  return testutil::make_image(4, 4, 1, [](int, int y, int x) {
    int k = (y * 4 + x + 1) % 16;
    return static_cast<float>(k) / 16.0f;
  });
}

double relative_error(double got, double want) {
  double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

std::vector<LabeledImage> brightness_set(int count, int side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledImage> out;
  for (int i = 0; i < count; ++i) {
    bool bright = i % 2 == 0;
    LabeledImage li;
    li.image = testutil::make_image(side, side, 3, [&](int, int, int) {
      double base = bright ? 0.75 : 0.25;
      return static_cast<float>(std::clamp(base + rng.uniform(-0.1, 0.1), 0.0, 1.0));
    });
    li.label = bright ? ClassLabel::Ready : ClassLabel::NotReady;
    li.id = "b" + std::to_string(i);
    out.push_back(std::move(li));
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("all-zero weights give symmetric scores") {
  Cnn net = make_mini_cnn(1);
  for (auto& p : net.params()) {
    std::fill(p.w.begin(), p.w.end(), 0.0);
    std::fill(p.b.begin(), p.b.end(), 0.0);
  }
  Rng rng(2);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  ClassScores s = net.predict(img);
  CHECK(s.p[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.p[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("predictions are deterministic") {
  Cnn net = make_mini_cnn(3);
  Rng rng(4);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  ClassScores a = net.predict(img);
  ClassScores b = net.predict(img);
  CHECK(a.p[0] == b.p[0]);
  CHECK(a.p[1] == b.p[1]);
  Cnn again = make_mini_cnn(3);
  ClassScores c = again.predict(img);
  CHECK(a.p[0] == c.p[0]);
}

TEST_CASE("hand-computed forward pass: identity conv toy on a 4x4 image") {
  // Image entries k/16 sum to 120/16, so GAP = 120/256 = 0.46875 exactly;
  // identity conv + ReLU pass the image through unchanged.
  Cnn net = make_toy(1.0, 0.0, 2.0, 0.5);
  ImageTensor img = sixteenths_image();
  std::vector<double> logits = net.logits(img);
  REQUIRE(logits.size() == 2);
  CHECK(logits[0] == doctest::Approx(2.0 * 0.46875 + 0.5).epsilon(1e-15));
  CHECK(logits[1] == doctest::Approx(-2.0 * 0.46875 - 0.5).epsilon(1e-15));
  double margin = logits[0] - logits[1];
  ClassScores s = net.predict(img);
  CHECK(s.p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-margin))).epsilon(1e-12));
  CHECK(s.p[0] + s.p[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand-computed forward pass: all-ones kernel with zero padding") {
  // On a 2x2 image every 3x3 window covers all four pixels, so each conv
  // output equals the pixel sum plus bias.
  Cnn net({{K::Conv, 1, 1, "conv1"}, {K::GlobalAvgPool, 0, 0, ""}, {K::Dense, 1, 2, "dense"}});
  auto& params = net.params();
  params[0].w.assign(9, 1.0);
  params[0].b[0] = 0.125;
  params[1].w = {1.0, -1.0};
  params[1].b = {0.0, 0.0};
  ImageTensor img = testutil::make_image(2, 2, 1, [](int, int y, int x) {
    return 0.25f * static_cast<float>(y * 2 + x + 1);  // 0.25 0.5 0.75 1.0
  });
  std::vector<double> logits = net.logits(img);
  CHECK(logits[0] == doctest::Approx(2.625).epsilon(1e-15));
  CHECK(logits[1] == doctest::Approx(-2.625).epsilon(1e-15));
}

TEST_CASE("zero dense weights zero the activation gradients") {
  Cnn net = make_mini_cnn(5);
  auto& dense = net.params().back();
  std::fill(dense.w.begin(), dense.w.end(), 0.0);
  Rng rng(6);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  auto [act, grad] = net.activations_and_gradients(img, ClassLabel::Ready, "conv3");
  CHECK(act.same_shape(grad));
  for (double g : grad.v) CHECK(g == 0.0);
}

TEST_CASE("gradient tensors match activation shapes on every conv layer") {
  Cnn net = make_mini_cnn(7);
  Rng rng(8);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  for (const auto& id : {"conv1", "conv2", "conv3"}) {
    auto [act, grad] = net.activations_and_gradients(img, ClassLabel::NotReady, id);
    CHECK(act.same_shape(grad));
    CHECK(act.h >= 1);
  }
  CHECK_THROWS_AS(net.activations_and_gradients(img, ClassLabel::Ready, "conv9"),
                  InvalidInputError);
  CHECK_THROWS_AS(net.activations_and_gradients(img, ClassLabel::Ready, "dense"),
                  InvalidInputError);
}

TEST_CASE("activation gradients match central finite differences") {
  Cnn net = make_mini_cnn(42);
  Rng rng(43);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  const double h = 1e-3;
  for (const auto& layer : {"conv1", "conv3"}) {
    auto [act, grad] = net.activations_and_gradients(img, ClassLabel::Ready, layer);
    Rng pick(derive_seed(44, layer));
    int checked = 0;
    for (int probe = 0; probe < 80 && checked < 40; ++probe) {
      std::size_t idx = pick.uniform_index(act.size());
      // Stay clear of the ReLU kink at zero.
      if (std::abs(act.v[idx]) < 10.0 * h) continue;
      Tensor plus = act;
      plus.v[idx] += h;
      Tensor minus = act;
      minus.v[idx] -= h;
      double fd = (net.logits_from(layer, plus)[1] - net.logits_from(layer, minus)[1]) /
                  (2.0 * h);
      CHECK(relative_error(grad.v[idx], fd) < 1e-3);
      ++checked;
    }
    CHECK(checked >= 30);
  }
}

TEST_CASE("parameter gradients match central finite differences") {
  Cnn net = make_mini_cnn(51);
  Rng rng(52);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  ClassLabel truth = ClassLabel::NotReady;
  std::vector<ParamBlock> grads = net.zero_gradients();
  net.accumulate_gradients(img, truth, 1.0, grads);

  const double h = 1e-4;
  Rng pick(53);
  auto loss_of = [&](const Cnn& m) {
    ClassScores s = m.predict(img);
    return -std::log(s.p[static_cast<std::size_t>(truth)]);
  };
  for (std::size_t pi = 0; pi < grads.size(); ++pi) {
    for (int probe = 0; probe < 8; ++probe) {
      std::size_t k = pick.uniform_index(grads[pi].w.size());
      Cnn plus = net;
      plus.params()[pi].w[k] += h;
      Cnn minus = net;
      minus.params()[pi].w[k] -= h;
      double fd = (loss_of(plus) - loss_of(minus)) / (2.0 * h);
      CHECK(relative_error(grads[pi].w[k], fd) < 1e-3);
    }
    std::size_t kb = pick.uniform_index(grads[pi].b.size());
    Cnn plus = net;
    plus.params()[pi].b[kb] += h;
    Cnn minus = net;
    minus.params()[pi].b[kb] -= h;
    double fd = (loss_of(plus) - loss_of(minus)) / (2.0 * h);
    CHECK(relative_error(grads[pi].b[kb], fd) < 1e-3);
  }
}

TEST_CASE("softmax scores sum to one on random models") {
  Rng rng(61);
  for (int trial = 0; trial < 5; ++trial) {
    Cnn net = make_mini_cnn(rng.next_u64());
    ImageTensor img = testutil::random_image(16, 16, 3, rng);
    ClassScores s = net.predict(img);
    CHECK(std::abs(s.p[0] + s.p[1] - 1.0) < 1e-6);
    CHECK_NOTHROW(validate(s));
  }
}

TEST_CASE("learning rate schedule steps by gamma every step_size epochs") {
  TrainConfig cfg;  // lr 1e-4, step 5, gamma 0.1
  CHECK(scheduled_learning_rate(cfg, 0) == doctest::Approx(1e-4));
  CHECK(scheduled_learning_rate(cfg, 4) == doctest::Approx(1e-4));
  CHECK(scheduled_learning_rate(cfg, 5) == doctest::Approx(1e-5));
  CHECK(scheduled_learning_rate(cfg, 9) == doctest::Approx(1e-5));
  CHECK(scheduled_learning_rate(cfg, 10) == doctest::Approx(1e-6));
  CHECK(scheduled_learning_rate(cfg, 24) == doctest::Approx(1e-8));
}

TEST_CASE("training separates a linearly separable set") {
  std::vector<LabeledImage> train_set = brightness_set(40, 12, 71);
  std::vector<LabeledImage> val_set = brightness_set(12, 12, 72);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.initial_learning_rate = 5e-3;
  cfg.scheduler_step_size = 6;
  cfg.scheduler_gamma = 0.5;
  cfg.seed = 73;
  Cnn init = make_mini_cnn(74);
  TrainResult result = train(init, train_set, val_set, cfg);
  REQUIRE(result.history.size() == 10);
  CHECK(result.history.back().train_accuracy >= 0.95);
  CHECK(result.best_epoch >= 0);
  CHECK(result.best_val_accuracy >= 0.9);

  // Cross-entropy decreases across width-5 epoch windows.
  double early = 0.0, late = 0.0;
  for (int e = 0; e < 5; ++e) early += result.history[static_cast<std::size_t>(e)].train_loss;
  for (int e = 5; e < 10; ++e) late += result.history[static_cast<std::size_t>(e)].train_loss;
  CHECK(late < early);

  // The recorded learning rates follow the schedule.
  CHECK(result.history[0].learning_rate == doctest::Approx(5e-3));
  CHECK(result.history[6].learning_rate == doctest::Approx(2.5e-3));
}

TEST_CASE("training is deterministic given the seed") {
  std::vector<LabeledImage> train_set = brightness_set(16, 8, 81);
  std::vector<LabeledImage> val_set = brightness_set(8, 8, 82);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.initial_learning_rate = 1e-3;
  cfg.seed = 83;
  Cnn init = make_mini_cnn(84);
  TrainResult a = train(init, train_set, val_set, cfg);
  TrainResult b = train(init, train_set, val_set, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_accuracy == b.history[i].val_accuracy);
  }
  for (std::size_t pi = 0; pi < a.model.params().size(); ++pi)
    CHECK(a.model.params()[pi].w == b.model.params()[pi].w);
}

TEST_CASE("zero epochs returns the initial weights and no metrics") {
  std::vector<LabeledImage> train_set = brightness_set(4, 8, 91);
  std::vector<LabeledImage> val_set = brightness_set(4, 8, 92);
  TrainConfig cfg;
  cfg.epochs = 0;
  Cnn init = make_mini_cnn(93);
  TrainResult result = train(init, train_set, val_set, cfg);
  CHECK(result.history.empty());
  for (std::size_t pi = 0; pi < init.params().size(); ++pi)
    CHECK(result.model.params()[pi].w == init.params()[pi].w);
}

TEST_CASE("training reports divergence with the epoch index") {
  std::vector<LabeledImage> train_set = brightness_set(8, 8, 95);
  std::vector<LabeledImage> val_set = brightness_set(4, 8, 96);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.initial_learning_rate = 1e9;
  cfg.seed = 97;
  Cnn init = make_mini_cnn(98);
  try {
    train(init, train_set, val_set, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDivergedError& e) {
    CHECK(e.epoch() >= 0);
    CHECK(e.epoch() < 4);
  }
}

TEST_CASE("adam with zero gradients and no decay leaves parameters unchanged") {
  Cnn net = make_mini_cnn(101);
  std::vector<ParamBlock> before;
  for (const auto& p : net.params()) before.push_back(p);
  std::vector<ParamBlock> grads = net.zero_gradients();
  std::vector<ParamBlock> m = net.zero_gradients();
  std::vector<ParamBlock> v = net.zero_gradients();
  for (long long step = 1; step <= 3; ++step)
    adam_step(net.params(), grads, m, v, step, 1e-2, 0.0);
  for (std::size_t pi = 0; pi < before.size(); ++pi) {
    CHECK(net.params()[pi].w == before[pi].w);
    CHECK(net.params()[pi].b == before[pi].b);
  }
}

TEST_CASE("evaluation is independent of batch composition") {
  Cnn net = make_mini_cnn(111);
  std::vector<LabeledImage> set = brightness_set(6, 8, 112);
  ClassScores alone = net.predict(set[2].image);
  std::vector<LabeledImage> shuffled = {set[4], set[2], set[0], set[5], set[2]};
  for (const auto& li : shuffled) {
    if (li.image.data == set[2].image.data) {
      ClassScores again = net.predict(li.image);
      CHECK(again.p[0] == alone.p[0]);
      CHECK(again.p[1] == alone.p[1]);
    }
  }
}

TEST_CASE("checkpoint round trip reproduces predictions bit-identically") {
  TempDir tmp("ckpt");
  Cnn net = make_mini_cnn(121);
  Rng rng(122);
  ImageTensor img = testutil::random_image(16, 16, 3, rng);
  ClassScores before = net.predict(img);
  save_checkpoint(net, tmp.path / "m.ckpt", 121, 0);
  Cnn back = load_checkpoint(tmp.path / "m.ckpt");
  ClassScores after = back.predict(img);
  CHECK(before.p[0] == after.p[0]);
  CHECK(before.p[1] == after.p[1]);
  for (std::size_t pi = 0; pi < net.params().size(); ++pi)
    CHECK(back.params()[pi].w == net.params()[pi].w);
}

TEST_CASE("trained checkpoint re-achieves its recorded validation accuracy") {
  TempDir tmp("ckpt_train");
  std::vector<LabeledImage> train_set = brightness_set(24, 8, 131);
  std::vector<LabeledImage> val_set = brightness_set(12, 8, 132);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.initial_learning_rate = 5e-3;
  cfg.seed = 133;
  TrainResult result = train(make_mini_cnn(134), train_set, val_set, cfg);
  save_checkpoint(result.model, tmp.path / "best.ckpt");
  Cnn back = load_checkpoint(tmp.path / "best.ckpt");
  EvalResult eval = evaluate(back, val_set);
  CHECK(eval.accuracy == doctest::Approx(result.best_val_accuracy).epsilon(1e-12));
}

TEST_CASE("checkpoint rejects truncation and version mismatch") {
  TempDir tmp("ckpt_bad");
  Cnn net = make_mini_cnn(141);
  auto path = tmp.path / "m.ckpt";
  save_checkpoint(net, path);

  auto size = std::filesystem::file_size(path);
  std::vector<char> bytes(static_cast<std::size_t>(size));
  std::ifstream(path, std::ios::binary).read(bytes.data(), static_cast<std::streamsize>(size));

  auto truncated = tmp.path / "trunc.ckpt";
  std::ofstream(truncated, std::ios::binary)
      .write(bytes.data(), static_cast<std::streamsize>(size / 2));
  CHECK_THROWS_AS(load_checkpoint(truncated), CheckpointError);

  auto versioned = tmp.path / "ver.ckpt";
  std::vector<char> vb = bytes;
  vb[4] = 9;  // version field
  std::ofstream(versioned, std::ios::binary)
      .write(vb.data(), static_cast<std::streamsize>(vb.size()));
  CHECK_THROWS_AS(load_checkpoint(versioned), CheckpointError);

  auto garbage = tmp.path / "garbage.ckpt";
  std::ofstream(garbage, std::ios::binary) << "not a checkpoint at all";
  CHECK_THROWS_AS(load_checkpoint(garbage), CheckpointError);
}

TEST_CASE("input shape contract") {
  Cnn net = make_mini_cnn(151);
  ImageTensor gray = ImageTensor::zeros(16, 16, 1);
  CHECK_THROWS_AS(net.predict(gray), InvalidInputError);
}

}  // TEST_SUITE
