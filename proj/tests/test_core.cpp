#include <doctest.h>

#include "reliscope/core.hpp"
#include "reliscope/util.hpp"
#include "test_helpers.hpp"

using namespace reliscope;
using testutil::make_record;

TEST_SUITE("core") {

TEST_CASE("outcome_of covers all label pairs") {
  CHECK(outcome_of(ClassLabel::Ready, ClassLabel::Ready) == ConfusionOutcome::TP);
  CHECK(outcome_of(ClassLabel::NotReady, ClassLabel::Ready) == ConfusionOutcome::FN);
  CHECK(outcome_of(ClassLabel::Ready, ClassLabel::NotReady) == ConfusionOutcome::FP);
  CHECK(outcome_of(ClassLabel::NotReady, ClassLabel::NotReady) == ConfusionOutcome::TN);
}

TEST_CASE("confusion_matrix counts outcome multiplicities") {
  std::vector<PredictionRecord> records = {
      make_record("a", ClassLabel::Ready, ClassLabel::Ready),      // TP
      make_record("b", ClassLabel::Ready, ClassLabel::Ready),      // TP
      make_record("c", ClassLabel::NotReady, ClassLabel::Ready),   // FN
      make_record("d", ClassLabel::NotReady, ClassLabel::NotReady) // TN
  };
  ConfusionMatrix cm = confusion_matrix(records);
  CHECK(cm.tp == 2);
  CHECK(cm.tn == 1);
  CHECK(cm.fp == 0);
  CHECK(cm.fn == 1);
}

TEST_CASE("confusion_matrix rejects empty and truthless input") {
  CHECK_THROWS_AS(confusion_matrix({}), EmptyEvaluationSetError);
  PredictionRecord r;
  r.image_id = "x";
  r.predicted = ClassLabel::Ready;
  r.scores.p = {0.4, 0.6};
  CHECK_THROWS_AS(confusion_matrix({r}), InvalidInputError);
}

TEST_CASE("confusion_matrix matches an independent count on 194 records") {
  Rng rng(20240194);
  std::vector<PredictionRecord> records;
  long long want_tp = 0, want_tn = 0, want_fp = 0, want_fn = 0;
  for (int i = 0; i < 194; ++i) {
    ClassLabel predicted = rng.bernoulli(0.5) ? ClassLabel::Ready : ClassLabel::NotReady;
    ClassLabel truth = rng.bernoulli(0.5) ? ClassLabel::Ready : ClassLabel::NotReady;
    // Oracle: count by direct case analysis, not via outcome_of.
    if (predicted == ClassLabel::Ready && truth == ClassLabel::Ready) ++want_tp;
    if (predicted == ClassLabel::NotReady && truth == ClassLabel::NotReady) ++want_tn;
    if (predicted == ClassLabel::Ready && truth == ClassLabel::NotReady) ++want_fp;
    if (predicted == ClassLabel::NotReady && truth == ClassLabel::Ready) ++want_fn;
    records.push_back(make_record("img" + std::to_string(i), predicted, truth));
  }
  ConfusionMatrix cm = confusion_matrix(records);
  CHECK(cm.tp == want_tp);
  CHECK(cm.tn == want_tn);
  CHECK(cm.fp == want_fp);
  CHECK(cm.fn == want_fn);
  CHECK(cm.total() == 194);
}

TEST_CASE("overall_accuracy") {
  CHECK(overall_accuracy({2, 2, 0, 0}) == doctest::Approx(1.0));
  CHECK(overall_accuracy({50, 30, 10, 10}) == doctest::Approx(0.80));
  CHECK(overall_accuracy({0, 0, 1, 1}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(overall_accuracy({0, 0, 0, 0}), EmptyEvaluationSetError);
}

TEST_CASE("average_class_accuracy") {
  CHECK(average_class_accuracy({50, 30, 10, 10}) == doctest::Approx(0.5 * (50.0 / 60 + 30.0 / 40)));
  CHECK(average_class_accuracy({5, 5, 0, 0}) == doctest::Approx(1.0));
  // A class missing from truth entirely is an error.
  CHECK_THROWS_AS(average_class_accuracy({1, 0, 0, 2}), ClassAbsentError);  // no not_ready truth
  CHECK_THROWS_AS(average_class_accuracy({0, 3, 1, 0}), ClassAbsentError);  // no ready truth
  // Zero recall on one class is legitimate, not an error.
  CHECK(average_class_accuracy({1, 0, 2, 0}) == doctest::Approx(0.5));
}

TEST_CASE("accuracies are invariant under scaling all counts") {
  ConfusionMatrix base{7, 11, 3, 5};
  double oa = overall_accuracy(base);
  double aca = average_class_accuracy(base);
  for (long long k : {2, 3, 10}) {
    ConfusionMatrix scaled{base.tp * k, base.tn * k, base.fp * k, base.fn * k};
    CHECK(overall_accuracy(scaled) == doctest::Approx(oa).epsilon(1e-12));
    CHECK(average_class_accuracy(scaled) == doctest::Approx(aca).epsilon(1e-12));
  }
}

TEST_CASE("balanced truth sets make overall equal average-class accuracy") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    long long tp = static_cast<long long>(rng.uniform_index(50));
    long long fn = static_cast<long long>(rng.uniform_index(50)) + 1;
    long long ready = tp + fn;
    long long tn = static_cast<long long>(rng.uniform_index(ready));
    long long fp = ready - tn;  // tn + fp == tp + fn
    ConfusionMatrix cm{tp, tn, fp, fn};
    CHECK(overall_accuracy(cm) ==
          doctest::Approx(average_class_accuracy(cm)).epsilon(1e-12));
  }
}

TEST_CASE("swapping every prediction exchanges TP with FN and TN with FP") {
  Rng rng(4242);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PredictionRecord> records;
    for (int i = 0; i < 40; ++i) {
      ClassLabel predicted = rng.bernoulli(0.6) ? ClassLabel::Ready : ClassLabel::NotReady;
      ClassLabel truth = rng.bernoulli(0.4) ? ClassLabel::Ready : ClassLabel::NotReady;
      records.push_back(make_record("r" + std::to_string(i), predicted, truth));
    }
    ConfusionMatrix before = confusion_matrix(records);
    for (auto& r : records) {
      r.predicted = flipped(r.predicted);
      r.outcome = outcome_of(r.predicted, *r.truth);
    }
    ConfusionMatrix after = confusion_matrix(records);
    CHECK(after.tp == before.fn);
    CHECK(after.fn == before.tp);
    CHECK(after.tn == before.fp);
    CHECK(after.fp == before.tn);
  }
}

TEST_CASE("class scores validate range and normalization") {
  ClassScores good;
  good.p = {0.25, 0.75};
  CHECK_NOTHROW(validate(good));
  CHECK(good.argmax() == ClassLabel::Ready);
  ClassScores bad;
  bad.p = {0.7, 0.7};
  CHECK_THROWS_AS(validate(bad), InvalidInputError);
  ClassScores negative;
  negative.p = {-0.1, 1.1};
  CHECK_THROWS_AS(validate(negative), InvalidInputError);
}

TEST_CASE("image tensor validation") {
  ImageTensor img = ImageTensor::zeros(4, 4, 3);
  CHECK_NOTHROW(validate(img));
  img.data[5] = 1.5f;
  CHECK_THROWS_AS(validate(img), InvalidInputError);
  ImageTensor twochannel = ImageTensor::zeros(4, 4, 3);
  twochannel.channels = 2;
  CHECK_THROWS_AS(validate(twochannel), InvalidInputError);
}

}  // TEST_SUITE
