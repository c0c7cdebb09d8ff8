#include <doctest.h>

#include <fstream>

#include "reliscope/image_io.hpp"
#include "reliscope/ingest.hpp"
#include "reliscope/util.hpp"
#include "test_helpers.hpp"

using namespace reliscope;
using testutil::TempDir;

namespace {

void write_ppm(const std::filesystem::path& path, int side, unsigned char shade) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << side << " " << side << "\n255\n";
  for (int i = 0; i < side * side * 3; ++i) out.put(static_cast<char>(shade));
}

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("manifest round trip") {
  TempDir tmp("manifest");
  DatasetManifest m;
  m.entries = {{"train/a.png", ClassLabel::Ready, Split::Train, false},
               {"val/b.png", ClassLabel::NotReady, Split::Val, true},
               {"test/c.png", ClassLabel::Ready, Split::Test, false}};
  auto path = tmp.path / "manifest.csv";
  write_manifest(path, m);
  DatasetManifest back = read_manifest(path);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[0].image_path == "train/a.png");
  CHECK(back.entries[1].harvested);
  CHECK(back.entries[1].label == ClassLabel::NotReady);
  CHECK(back.entries[2].split == Split::Test);
}

TEST_CASE("manifest rejects duplicates and bad headers") {
  TempDir tmp("manifest_bad");
  auto path = tmp.path / "manifest.csv";
  {
    std::ofstream out(path);
    out << "image_path,label,split,harvested\n";
    out << "a.png,ready,train,false\n";
    out << "a.png,not_ready,val,false\n";
  }
  CHECK_THROWS_AS(read_manifest(path), InvalidInputError);
  {
    std::ofstream out(path);
    out << "path,label\n";
  }
  CHECK_THROWS_AS(read_manifest(path), InvalidInputError);
}

TEST_CASE("load_dataset filters harvested entries") {
  TempDir tmp("load_filter");
  write_ppm(tmp.path / "a.ppm", 4, 100);
  write_ppm(tmp.path / "b.ppm", 4, 120);
  write_ppm(tmp.path / "c.ppm", 4, 140);
  DatasetManifest m;
  m.entries = {{"a.ppm", ClassLabel::Ready, Split::Train, false},
               {"b.ppm", ClassLabel::NotReady, Split::Train, true},
               {"c.ppm", ClassLabel::Ready, Split::Val, false}};
  LoadOptions opt;
  opt.side = 4;
  Dataset ds = load_dataset(m, opt, tmp.path);
  CHECK(ds.train.size() + ds.val.size() + ds.test.size() == 2);
  CHECK(ds.train.size() == 1);
  CHECK(ds.train[0].id == "a");
  CHECK(ds.val.size() == 1);
}

TEST_CASE("load_dataset errors when exclusion empties a populated split") {
  TempDir tmp("load_empty");
  write_ppm(tmp.path / "a.ppm", 4, 100);
  write_ppm(tmp.path / "b.ppm", 4, 100);
  DatasetManifest m;
  m.entries = {{"a.ppm", ClassLabel::Ready, Split::Train, false},
               {"b.ppm", ClassLabel::Ready, Split::Val, true}};
  LoadOptions opt;
  opt.side = 4;
  CHECK_THROWS_AS(load_dataset(m, opt, tmp.path), InsufficientDataError);
}

TEST_CASE("load_dataset reproduces the reference split sizes 541/196/194") {
  TempDir tmp("load_counts");
  DatasetManifest m;
  auto add = [&](const std::string& name, Split split, bool harvested) {
    write_ppm(tmp.path / name, 4, static_cast<unsigned char>(60 + m.entries.size() % 150));
    m.entries.push_back({name, ClassLabel::Ready, split, harvested});
  };
  for (int i = 0; i < 541; ++i) add("tr" + std::to_string(i) + ".ppm", Split::Train, false);
  for (int i = 0; i < 196; ++i) add("va" + std::to_string(i) + ".ppm", Split::Val, false);
  for (int i = 0; i < 194; ++i) add("te" + std::to_string(i) + ".ppm", Split::Test, false);
  // Harvested plants on top, excluded at load time.
  for (int i = 0; i < 7; ++i) add("hv" + std::to_string(i) + ".ppm", Split::Train, true);
  LoadOptions opt;
  opt.side = 4;
  Dataset ds = load_dataset(m, opt, tmp.path);
  CHECK(ds.train.size() == 541);
  CHECK(ds.val.size() == 196);
  CHECK(ds.test.size() == 194);
}

TEST_CASE("load_dataset reports the offending path on decode failure") {
  TempDir tmp("load_corrupt");
  write_ppm(tmp.path / "ok.ppm", 4, 100);
  {
    std::ofstream out(tmp.path / "broken.png", std::ios::binary);
    out << "this is not a png";
  }
  DatasetManifest m;
  m.entries = {{"ok.ppm", ClassLabel::Ready, Split::Train, false},
               {"broken.png", ClassLabel::Ready, Split::Val, false}};
  LoadOptions opt;
  opt.side = 4;
  try {
    load_dataset(m, opt, tmp.path);
    FAIL("expected a decode error");
  } catch (const InvalidInputError& e) {
    CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
  }
}

TEST_CASE("load_dataset resizes and rescales") {
  TempDir tmp("load_resize");
  write_ppm(tmp.path / "a.ppm", 8, 255);
  DatasetManifest m;
  m.entries = {{"a.ppm", ClassLabel::Ready, Split::Train, false}};
  LoadOptions opt;
  opt.side = 4;
  Dataset ds = load_dataset(m, opt, tmp.path);
  const ImageTensor& img = ds.train[0].image;
  CHECK(img.height == 4);
  CHECK(img.width == 4);
  CHECK(img.channels == 3);
  for (float v : img.data) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("augment copy counts follow the class-weighted policy") {
  Rng rng(11);
  std::vector<LabeledImage> train;
  for (int i = 0; i < 30; ++i) {
    LabeledImage li;
    li.image = testutil::random_image(4, 4, 3, rng);
    li.label = i < 15 ? ClassLabel::NotReady : ClassLabel::Ready;
    li.id = "img" + std::to_string(i);
    train.push_back(std::move(li));
  }
  AugmentationPolicy policy;  // base 4, boost 1.5, target NotReady
  std::vector<AugmentedImage> out = augment(train, policy, 5);

  std::map<std::string, int> copies;
  for (const auto& a : out)
    if (a.transform != "orig") ++copies[a.source_id];
  // Integral expected multiplicities sample exactly.
  for (int i = 0; i < 30; ++i) {
    int want = i < 15 ? 6 : 4;
    CHECK(copies["img" + std::to_string(i)] == want);
  }
  CHECK(out.size() == 30 + 15 * 6 + 15 * 4);
}

TEST_CASE("augment fractional multiplicity matches its expectation on average") {
  Rng rng(12);
  std::vector<LabeledImage> train;
  for (int i = 0; i < 400; ++i) {
    LabeledImage li;
    li.image = testutil::random_image(4, 4, 1, rng);
    li.label = ClassLabel::Ready;
    li.id = "f" + std::to_string(i);
    train.push_back(std::move(li));
  }
  AugmentationPolicy policy;
  policy.base_multiplier = 2.25;
  policy.minority_boost = 1.0;
  std::vector<AugmentedImage> out = augment(train, policy, 99);
  double mean = (static_cast<double>(out.size()) - 400.0) / 400.0;
  CHECK(mean == doctest::Approx(2.25).epsilon(0.05));
  // Deterministic given the seed.
  CHECK(augment(train, policy, 99).size() == out.size());
}

TEST_CASE("augment with identity policy returns the originals") {
  Rng rng(13);
  std::vector<LabeledImage> train(3);
  for (int i = 0; i < 3; ++i) {
    train[static_cast<std::size_t>(i)].image = testutil::random_image(4, 4, 3, rng);
    train[static_cast<std::size_t>(i)].label = ClassLabel::NotReady;
    train[static_cast<std::size_t>(i)].id = "o" + std::to_string(i);
  }
  AugmentationPolicy policy;
  policy.base_multiplier = 0.0;
  policy.minority_boost = 1.0;
  std::vector<AugmentedImage> out = augment(train, policy, 1);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out[i].transform == "orig");
    CHECK(out[i].sample.id == train[i].id);
    CHECK(out[i].sample.image.data == train[i].image.data);
  }
}

TEST_CASE("augment preconditions") {
  CHECK_THROWS_AS(augment({}, AugmentationPolicy{}, 1), InsufficientDataError);
  LabeledImage li;
  li.image = ImageTensor::zeros(2, 2, 1);
  li.id = "x";
  AugmentationPolicy bad;
  bad.minority_boost = 0.5;
  CHECK_THROWS_AS(augment({li}, bad, 1), InvalidInputError);
}

TEST_CASE("flips are involutions and quarter turns compose to identity") {
  Rng rng(14);
  ImageTensor img = testutil::random_image(6, 4, 3, rng);
  CHECK(apply_augment_op(apply_augment_op(img, AugmentOp::HFlip), AugmentOp::HFlip).data ==
        img.data);
  CHECK(apply_augment_op(apply_augment_op(img, AugmentOp::VFlip), AugmentOp::VFlip).data ==
        img.data);
  CHECK(apply_augment_op(apply_augment_op(img, AugmentOp::Rot180), AugmentOp::Rot180).data ==
        img.data);
  ImageTensor turned = apply_augment_op(apply_augment_op(img, AugmentOp::Rot90), AugmentOp::Rot270);
  CHECK(turned.data == img.data);
  ImageTensor r90 = apply_augment_op(img, AugmentOp::Rot90);
  CHECK(r90.height == img.width);
  CHECK(r90.width == img.height);
}

TEST_CASE("synth_generate is deterministic and labels agree with logged radii") {
  SyntheticSpec spec;
  spec.train_count = 20;
  spec.val_count = 8;
  spec.test_count = 8;
  spec.side = 32;
  spec.head_radius_min = 3;
  spec.head_radius_max = 7;
  spec.readiness_threshold = 5;
  spec.planted_error_fraction = 0.25;
  spec.seed = 99;
  SyntheticDataset a = synth_generate(spec);
  SyntheticDataset b = synth_generate(spec);
  REQUIRE(a.images.size() == 36);
  REQUIRE(b.images.size() == 36);
  int planted = 0;
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].sample.image.data == b.images[i].sample.image.data);  // bit-identical
    CHECK(a.images[i].sample.label ==
          (a.images[i].true_radius >= spec.readiness_threshold ? ClassLabel::Ready
                                                               : ClassLabel::NotReady));
    if (a.images[i].planted_error) ++planted;
    CHECK_NOTHROW(validate(a.images[i].sample.image));
  }
  CHECK(planted == 5 + 2 + 2);  // round(0.25 * count) per split
}

TEST_CASE("synth_generate without planted errors keeps heads near the center") {
  SyntheticSpec spec;
  spec.train_count = 12;
  spec.val_count = 1;
  spec.test_count = 1;
  spec.side = 48;
  spec.head_radius_min = 5;
  spec.head_radius_max = 9;
  spec.readiness_threshold = 7;
  spec.planted_error_fraction = 0.0;
  spec.canopy_density = 0.3;
  spec.seed = 7;
  SyntheticDataset ds = synth_generate(spec);
  for (const auto& si : ds.images) {
    // Head pixels are bright; their centroid must sit near the image center.
    const ImageTensor& img = si.sample.image;
    double cy = 0, cx = 0, mass = 0;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        if (img.at(0, y, x) > 0.75) {
          cy += y;
          cx += x;
          mass += 1;
        }
    REQUIRE(mass > 0);
    double mid = (spec.side - 1) / 2.0;
    CHECK(std::abs(cy / mass - mid) < 6.0);
    CHECK(std::abs(cx / mass - mid) < 6.0);
  }
}

TEST_CASE("synth_generate balances labels when the threshold is the median radius") {
  SyntheticSpec spec;
  spec.train_count = 600;
  spec.val_count = 0;
  spec.test_count = 0;
  spec.side = 32;
  spec.head_radius_min = 3;
  spec.head_radius_max = 7;
  spec.readiness_threshold = 5;  // midpoint of the uniform radius range
  spec.seed = 2718;
  SyntheticDataset ds = synth_generate(spec);
  long long ready = 0;
  for (const auto& si : ds.images) {
    CHECK(si.sample.label ==
          (si.true_radius >= spec.readiness_threshold ? ClassLabel::Ready
                                                      : ClassLabel::NotReady));
    if (si.sample.label == ClassLabel::Ready) ++ready;
  }
  double fraction = static_cast<double>(ready) / 600.0;
  CHECK(fraction > 0.45);
  CHECK(fraction < 0.55);
}

TEST_CASE("synth_generate rejects infeasible geometry") {
  SyntheticSpec spec;
  spec.side = 24;
  spec.head_radius_min = 4;
  spec.head_radius_max = 14;  // no room at side 24
  CHECK_THROWS_AS(synth_generate(spec), InvalidInputError);
  SyntheticSpec planted;
  planted.side = 64;
  planted.head_radius_min = 6;
  planted.head_radius_max = 14;
  planted.readiness_threshold = 7.0;  // leaves no band below threshold - 2
  planted.planted_error_fraction = 0.2;
  CHECK_THROWS_AS(synth_generate(planted), InvalidInputError);
}

TEST_CASE("png round trip preserves 8-bit content") {
  TempDir tmp("png");
  Rng rng(31);
  ImageTensor img = testutil::make_image(9, 7, 3, [&](int, int, int) {
    return static_cast<float>(rng.uniform_index(256)) / 255.0f;
  });
  write_png(tmp.path / "x.png", img);
  ImageTensor back = read_image(tmp.path / "x.png");
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i)
    CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));
}

TEST_CASE("grayscale png and channel conversion") {
  TempDir tmp("gray");
  ImageTensor gray = testutil::make_image(5, 5, 1, [](int, int y, int x) {
    return static_cast<float>((y * 5 + x) % 256) / 255.0f;
  });
  write_png(tmp.path / "g.png", gray);
  ImageTensor rgb = read_image(tmp.path / "g.png", 3);
  CHECK(rgb.channels == 3);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      CHECK(rgb.at(0, y, x) == doctest::Approx(gray.at(0, y, x)));
      CHECK(rgb.at(1, y, x) == doctest::Approx(gray.at(0, y, x)));
    }
}

TEST_CASE("resize_bilinear preserves constant images and shrinks by averaging") {
  ImageTensor flat = testutil::make_image(8, 8, 1, [](int, int, int) { return 0.25f; });
  ImageTensor small = resize_bilinear(flat, 3, 5);
  for (float v : small.data) CHECK(v == doctest::Approx(0.25f));
  // 2x downscale of a checkerboard averages to gray.
  ImageTensor checker = testutil::make_image(8, 8, 1, [](int, int y, int x) {
    return static_cast<float>((y + x) % 2);
  });
  ImageTensor half = resize_bilinear(checker, 4, 4);
  for (float v : half.data) CHECK(v == doctest::Approx(0.5f));
}

}  // TEST_SUITE
