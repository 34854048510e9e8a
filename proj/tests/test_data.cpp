#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "sacn/data.hpp"
#include "sacn/rng.hpp"

using namespace sacn;

namespace {

std::string tmp_path(const std::string& name) {
  std::filesystem::create_directories("data_test_tmp");
  return "data_test_tmp/" + name;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
}

void push_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

Tensor<std::uint8_t> full_mask(std::size_t h, std::size_t w) {
  auto m = Tensor<std::uint8_t>({h, w});
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = 1;
  return m;
}

LabeledImage image_with_masks(std::size_t h, std::size_t w) {
  LabeledImage img;
  img.id = "fixture";
  img.pixels = Tensor<float>({1, h, w});
  Rng rng(71);
  for (std::size_t i = 0; i < img.pixels.numel(); ++i)
    img.pixels[i] = float(rng.uniform());
  img.lesion_mask = full_mask(h, w);
  img.normal_mask = full_mask(h, w);
  return img;
}

// Best single-threshold accuracy on per-image pixel means, either polarity.
double best_mean_threshold_acc(const std::vector<LabeledImage>& ds) {
  std::vector<std::pair<double, std::size_t>> m;
  std::size_t n1 = 0;
  for (const LabeledImage& im : ds) {
    long double s = 0;
    for (std::size_t i = 0; i < im.pixels.numel(); ++i) s += im.pixels[i];
    m.emplace_back(double(s / im.pixels.numel()), im.label);
    n1 += im.label;
  }
  std::sort(m.begin(), m.end());
  const std::size_t n = m.size();
  std::size_t best = 0, ones_left = 0;
  for (std::size_t k = 0; k <= n; ++k) {
    const std::size_t right_is_one = (k - ones_left) + (n1 - ones_left);
    const std::size_t left_is_one = ones_left + (n - k) - (n1 - ones_left);
    best = std::max({best, right_is_one, left_is_one});
    if (k < n) ones_left += m[k].second;
  }
  return double(best) / double(n);
}

}  // namespace

TEST_CASE("a hand-built one-image IDX pair round-trips exactly") {
  std::vector<unsigned char> img_bytes;
  push_u32_be(img_bytes, 0x00000803u);
  push_u32_be(img_bytes, 1);
  push_u32_be(img_bytes, 3);
  push_u32_be(img_bytes, 2);
  const unsigned char px[6] = {0, 17, 128, 200, 254, 255};
  img_bytes.insert(img_bytes.end(), px, px + 6);
  std::vector<unsigned char> lab_bytes;
  push_u32_be(lab_bytes, 0x00000801u);
  push_u32_be(lab_bytes, 1);
  lab_bytes.push_back(7);
  const std::string ip = tmp_path("one.images"), lp = tmp_path("one.labels");
  write_bytes(ip, img_bytes);
  write_bytes(lp, lab_bytes);

  auto ds = load_idx(ip, lp);
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].label == 7);
  REQUIRE(ds[0].pixels.shape_str() == "[1x3x2]");
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(ds[0].pixels[i] == float(px[i]) / 255.0f);

  const std::string ip2 = tmp_path("one2.images"), lp2 = tmp_path("one2.labels");
  save_idx_images(ip2, {ds[0].pixels});
  save_idx_labels(lp2, {ds[0].label});
  CHECK(slurp(ip2) == img_bytes);
  CHECK(slurp(lp2) == lab_bytes);
}

TEST_CASE("truncated IDX files are rejected outright") {
  std::vector<unsigned char> img_bytes;
  push_u32_be(img_bytes, 0x00000803u);
  push_u32_be(img_bytes, 60000);  // claims a full training set
  push_u32_be(img_bytes, 28);
  push_u32_be(img_bytes, 28);
  for (int i = 0; i < 28 * 28 + 11; ++i) img_bytes.push_back(9);
  const std::string p = tmp_path("trunc.images");
  write_bytes(p, img_bytes);
  CHECK_THROWS_AS(load_idx_images(p), TruncatedError);

  const std::string ph = tmp_path("header_only.images");
  write_bytes(ph, {0x00, 0x00, 0x08, 0x03, 0x00});
  CHECK_THROWS_AS(load_idx_images(ph), TruncatedError);

  std::vector<unsigned char> lab_bytes;
  push_u32_be(lab_bytes, 0x00000801u);
  push_u32_be(lab_bytes, 5);
  lab_bytes.push_back(1);
  const std::string pl = tmp_path("trunc.labels");
  write_bytes(pl, lab_bytes);
  CHECK_THROWS_AS(load_idx_labels(pl), TruncatedError);
}

TEST_CASE("wrong IDX magic numbers are rejected") {
  std::vector<unsigned char> bytes;
  push_u32_be(bytes, 0x00000801u);  // label magic where images belong
  push_u32_be(bytes, 0);
  push_u32_be(bytes, 1);
  push_u32_be(bytes, 1);
  const std::string p = tmp_path("badmagic.images");
  write_bytes(p, bytes);
  CHECK_THROWS_AS(load_idx_images(p), BadMagicError);

  std::vector<unsigned char> lb;
  push_u32_be(lb, 0xdeadbeefu);
  push_u32_be(lb, 0);
  const std::string pl = tmp_path("badmagic.labels");
  write_bytes(pl, lb);
  CHECK_THROWS_AS(load_idx_labels(pl), BadMagicError);
}

TEST_CASE("image and label counts must agree") {
  std::vector<unsigned char> img_bytes;
  push_u32_be(img_bytes, 0x00000803u);
  push_u32_be(img_bytes, 2);
  push_u32_be(img_bytes, 2);
  push_u32_be(img_bytes, 2);
  for (int i = 0; i < 8; ++i) img_bytes.push_back(3);
  std::vector<unsigned char> lab_bytes;
  push_u32_be(lab_bytes, 0x00000801u);
  push_u32_be(lab_bytes, 3);
  for (int i = 0; i < 3; ++i) lab_bytes.push_back(0);
  const std::string ip = tmp_path("mismatch.images"), lp = tmp_path("mismatch.labels");
  write_bytes(ip, img_bytes);
  write_bytes(lp, lab_bytes);
  CHECK_THROWS_AS(load_idx(ip, lp), CountMismatchError);
}

TEST_CASE("write-then-read of an in-memory dataset is identity") {
  Rng rng(72);
  std::vector<Tensor<float>> images;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 5; ++i) {
    Tensor<float> img({1, 4, 7});
    for (std::size_t p = 0; p < img.numel(); ++p)
      img[p] = float(rng.below(256)) / 255.0f;  // byte-exact pixel grid
    images.push_back(std::move(img));
    labels.push_back(std::size_t(rng.below(10)));
  }
  const std::string ip = tmp_path("rt.images"), lp = tmp_path("rt.labels");
  save_idx_images(ip, images);
  save_idx_labels(lp, labels);
  auto ds = load_idx(ip, lp);
  REQUIRE(ds.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(ds[i].label == labels[i]);
    CHECK(ds[i].pixels.bitwise_equal(images[i]));
  }
}

TEST_CASE("PGM masks parse headers, comments, and the 128 threshold") {
  std::ofstream out(tmp_path("mask.pgm"), std::ios::binary);
  out << "P5\n# a comment line\n4 2\n255\n";
  const unsigned char vals[8] = {0, 127, 128, 255, 10, 129, 200, 50};
  out.write(reinterpret_cast<const char*>(vals), 8);
  out.close();

  auto raw = load_pgm(tmp_path("mask.pgm"));
  REQUIRE(raw.shape_str() == "[2x4]");
  for (std::size_t i = 0; i < 8; ++i) CHECK(raw[i] == vals[i]);
  auto mask = load_mask_pgm(tmp_path("mask.pgm"));
  const std::uint8_t want[8] = {0, 0, 1, 1, 0, 1, 1, 0};
  for (std::size_t i = 0; i < 8; ++i) CHECK(mask[i] == want[i]);

  std::ofstream p2(tmp_path("ascii.pgm"), std::ios::binary);
  p2 << "P2\n4 2\n255\n0 0 0 0 0 0 0 0\n";
  p2.close();
  CHECK_THROWS_AS(load_pgm(tmp_path("ascii.pgm")), BadMagicError);

  std::ofstream cut(tmp_path("cut.pgm"), std::ios::binary);
  cut << "P5\n4 2\n255\nab";
  cut.close();
  CHECK_THROWS_AS(load_pgm(tmp_path("cut.pgm")), TruncatedError);

  std::ofstream wide(tmp_path("wide.pgm"), std::ios::binary);
  wide << "P5\n2 1\n65535\n";
  wide.put(0);
  wide.put(0);
  wide.close();
  CHECK_THROWS_AS(load_pgm(tmp_path("wide.pgm")), DataError);
}

TEST_CASE("PGM save and load round-trip through bytes") {
  Tensor<float> img({3, 5});
  Rng rng(73);
  for (std::size_t i = 0; i < img.numel(); ++i)
    img[i] = float(rng.below(256)) / 255.0f;
  save_pgm(tmp_path("rt.pgm"), img);
  auto back = load_pgm(tmp_path("rt.pgm"));
  REQUIRE(back.shape_str() == "[3x5]");
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(float(back[i]) / 255.0f == img[i]);
}

TEST_CASE("a full pair of regions supplies sixty patches") {
  LabeledImage img = image_with_masks(24, 24);
  Rng rng(74);
  auto samples = extract_patches(img, 30, rng);
  REQUIRE(samples.size() == 60);
  std::size_t lesions = 0;
  for (const PatchSample& s : samples) {
    lesions += s.label == kLesionLabel;
    CHECK(s.patch.shape_str() == "[1x16x16]");
    CHECK(s.source_image == "fixture");
    for (std::size_t p = 0; p < s.patch.numel(); ++p) {
      CHECK(s.patch[p] >= 0.0f);
      CHECK(s.patch[p] <= 1.0f);
    }
    for (std::size_t r = 0; r < kPatchSize; ++r)
      for (std::size_t c = 0; c < kPatchSize; ++c)
        CHECK(s.patch.at(0, r, c) == img.pixels.at(0, s.y + r, s.x + c));
  }
  CHECK(lesions == 30);
}

TEST_CASE("a mask admitting one placement forces every patch there") {
  LabeledImage img = image_with_masks(16, 16);
  Rng rng(75);
  auto samples = extract_patches(img, 30, rng);
  REQUIRE(samples.size() == 60);
  for (const PatchSample& s : samples) {
    CHECK(s.x == 0);
    CHECK(s.y == 0);
  }
}

TEST_CASE("the seventy percent membership rule is pixel-exact") {
  // Columns 0..10 fully inside, column 11 partially: the (0,0) window holds
  // 176 + r mask pixels and the 70% rule wants at least 179.2 of 256.
  auto boundary_mask = [](std::size_t r) {
    auto m = Tensor<std::uint8_t>({16, 20});
    for (std::size_t row = 0; row < 16; ++row)
      for (std::size_t col = 0; col <= 10; ++col) m.at(row, col) = 1;
    for (std::size_t row = 0; row < r; ++row) m.at(row, 11) = 1;
    return m;
  };
  LabeledImage img = image_with_masks(16, 20);
  img.lesion_mask = boundary_mask(4);  // 180 inside: just enough
  Rng rng(76);
  auto samples = extract_patches(img, 30, rng);
  for (const PatchSample& s : samples)
    if (s.label == kLesionLabel) {
      CHECK(s.x == 0);
      CHECK(s.y == 0);
    }

  img.lesion_mask = boundary_mask(3);  // 179 inside: one pixel short
  Rng rng2(76);
  try {
    extract_patches(img, 30, rng2);
    FAIL("expected a placement error");
  } catch (const PlacementError& e) {
    CHECK(std::string(e.what()).find("lesion") != std::string::npos);
  }
}

TEST_CASE("mask bookkeeping failures are rejected") {
  LabeledImage img = image_with_masks(20, 20);
  img.normal_mask.reset();
  Rng rng(77);
  CHECK_THROWS_AS(extract_patches(img, 30, rng), DataError);

  LabeledImage bad = image_with_masks(20, 20);
  bad.lesion_mask = full_mask(8, 8);
  CHECK_THROWS_AS(extract_patches(bad, 30, rng), DataError);

  LabeledImage tiny = image_with_masks(12, 12);  // no 16x16 window fits
  CHECK_THROWS_AS(extract_patches(tiny, 30, rng), PlacementError);
}

TEST_CASE("patch placement is deterministic and avoids duplicates when it can") {
  LabeledImage img = image_with_masks(32, 32);
  Rng a(78), b(78), c(79);
  auto s1 = extract_patches(img, 30, a);
  auto s2 = extract_patches(img, 30, b);
  auto s3 = extract_patches(img, 30, c);
  REQUIRE(s1.size() == s2.size());
  bool any_diff = false;
  std::set<std::pair<std::size_t, std::size_t>> lesion_spots;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i].x == s2[i].x);
    CHECK(s1[i].y == s2[i].y);
    any_diff |= s1[i].x != s3[i].x || s1[i].y != s3[i].y;
    if (s1[i].label == kLesionLabel) lesion_spots.emplace(s1[i].y, s1[i].x);
  }
  CHECK(any_diff);                    // a different seed moves the windows
  CHECK(lesion_spots.size() == 30);   // 289 candidates: no repeats needed

  // Five candidate windows only: thirty draws must reuse them.
  auto strip = Tensor<std::uint8_t>({16, 20});
  for (std::size_t row = 0; row < 16; ++row)
    for (std::size_t col = 0; col < 16; ++col) strip.at(row, col) = 1;
  LabeledImage narrow = image_with_masks(16, 20);
  narrow.lesion_mask = strip;
  Rng d(80);
  auto s4 = extract_patches(narrow, 30, d);
  std::set<std::size_t> xs;
  for (const PatchSample& s : s4)
    if (s.label == kLesionLabel) {
      CHECK(s.y == 0);
      CHECK(s.x <= 4);
      xs.insert(s.x);
    }
  CHECK(xs.size() <= 5);
}

TEST_CASE("synthetic datasets are reproducible bytes and balanced") {
  for (auto gen : {&synth_simple, &synth_complex}) {
    Rng a(81), b(81);
    auto d1 = gen(64, a);
    auto d2 = gen(64, b);
    REQUIRE(d1.size() == 64);
    std::size_t ones = 0;
    for (std::size_t i = 0; i < d1.size(); ++i) {
      CHECK(d1[i].pixels.bitwise_equal(d2[i].pixels));
      CHECK(d1[i].label == d2[i].label);
      CHECK(d1[i].pixels.shape_str() == "[1x16x16]");
      ones += d1[i].label;
      for (std::size_t p = 0; p < d1[i].pixels.numel(); ++p) {
        CHECK(d1[i].pixels[p] >= 0.0f);
        CHECK(d1[i].pixels[p] <= 1.0f);
      }
    }
    CHECK(ones == 32);
  }
  Rng r(82);
  CHECK_THROWS_AS(synth_simple(0, r), DataError);
}

TEST_CASE("the mean threshold oracle separates simple but not complex") {
  Rng a(83), b(84);
  auto simple = synth_simple(200, a);
  auto complex_ds = synth_complex(200, b);
  const double acc_simple = best_mean_threshold_acc(simple);
  const double acc_complex = best_mean_threshold_acc(complex_ds);
  INFO("simple ", acc_simple, " complex ", acc_complex);
  CHECK(acc_simple >= 0.95);
  CHECK(acc_complex < 0.75);
}

TEST_CASE("ten sources split eight one one") {
  auto splits = assign_splits(10, 5);
  std::size_t tr = 0, va = 0, te = 0;
  for (Split s : splits) {
    tr += s == Split::Train;
    va += s == Split::Val;
    te += s == Split::Test;
  }
  CHECK(tr == 8);
  CHECK(va == 1);
  CHECK(te == 1);
}

TEST_CASE("split proportions stay within one image of 80/10/10") {
  for (std::size_t n : {10, 11, 14, 19, 25, 37, 100}) {
    auto splits = assign_splits(n, 9);
    double tr = 0, va = 0, te = 0;
    for (Split s : splits) {
      tr += s == Split::Train;
      va += s == Split::Val;
      te += s == Split::Test;
    }
    INFO("n=", n);
    CHECK(std::abs(tr - 0.8 * double(n)) <= 1.0);
    CHECK(std::abs(va - 0.1 * double(n)) <= 1.0);
    CHECK(std::abs(te - 0.1 * double(n)) <= 1.0);
  }
}

TEST_CASE("splits are deterministic per seed and move with it") {
  auto s1 = assign_splits(50, 11);
  auto s2 = assign_splits(50, 11);
  auto s3 = assign_splits(50, 12);
  CHECK(s1 == s2);
  CHECK(s1 != s3);
  CHECK_THROWS_AS(assign_splits(9, 1), DataError);
}

TEST_CASE("no source image ever spans two splits") {
  std::vector<PatchSample> samples;
  Rng rng(85);
  for (int i = 0; i < 12; ++i) {
    LabeledImage img = image_with_masks(24, 24);
    img.id = "img-" + std::to_string(i);
    auto s = extract_patches(img, 30, rng);
    samples.insert(samples.end(), s.begin(), s.end());
  }
  DatasetManifest m = build_manifest(samples, 13);
  REQUIRE(m.rows.size() == 720);
  std::map<std::string, Split> seen;
  for (const ManifestRow& r : m.rows) {
    auto it = seen.find(r.source_image);
    if (it == seen.end())
      seen.emplace(r.source_image, r.split);
    else
      CHECK(it->second == r.split);
  }
  CHECK(seen.size() == 12);

  auto tr = manifest_indices(m, Split::Train);
  auto va = manifest_indices(m, Split::Val);
  auto te = manifest_indices(m, Split::Test);
  CHECK(tr.size() + va.size() + te.size() == m.rows.size());
  CHECK(va.size() == 60);
  CHECK(te.size() == 60);
}

TEST_CASE("manifests round-trip through their tab separated form") {
  Rng rng(86);
  auto ds = synth_simple(20, rng);
  DatasetManifest m = build_manifest(ds, 21);
  const std::string p = tmp_path("manifest.tsv");
  write_manifest(p, m);

  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  CHECK(first == "0\t" + std::string(split_name(m.rows[0].split)) +
                     "\t0\tsynth-simple-0\t0\t0");

  DatasetManifest back = read_manifest(p);
  REQUIRE(back.rows.size() == m.rows.size());
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    CHECK(back.rows[i].sample_id == m.rows[i].sample_id);
    CHECK(back.rows[i].split == m.rows[i].split);
    CHECK(back.rows[i].label == m.rows[i].label);
    CHECK(back.rows[i].source_image == m.rows[i].source_image);
    CHECK(back.rows[i].x == m.rows[i].x);
    CHECK(back.rows[i].y == m.rows[i].y);
  }
  CHECK_THROWS_AS(read_manifest(tmp_path("no_such_manifest.tsv")), DataError);
}

TEST_CASE("batches stack images and reject ragged shapes") {
  Rng rng(87);
  auto ds = synth_simple(6, rng);
  Tensor<float> batch = batch_images(ds, {0, 3, 5});
  REQUIRE(batch.shape_str() == "[3x1x16x16]");
  for (std::size_t p = 0; p < 256; ++p) {
    CHECK(batch[p] == ds[0].pixels[p]);
    CHECK(batch[256 + p] == ds[3].pixels[p]);
    CHECK(batch[512 + p] == ds[5].pixels[p]);
  }
  CHECK_THROWS_AS(batch_images(ds, {}), DataError);
  std::vector<LabeledImage> ragged;
  ragged.push_back(ds[0]);
  LabeledImage odd;
  odd.pixels = Tensor<float>({1, 8, 8});
  ragged.push_back(odd);
  CHECK_THROWS_AS(batch_images(ragged, {0, 1}), DataError);
}
