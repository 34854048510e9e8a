#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sacn/rng.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct BadMagicError : DataError {
  explicit BadMagicError(const std::string& m) : DataError(m) {}
};
struct TruncatedError : DataError {
  explicit TruncatedError(const std::string& m) : DataError(m) {}
};
struct CountMismatchError : DataError {
  explicit CountMismatchError(const std::string& m) : DataError(m) {}
};
struct PlacementError : DataError {
  explicit PlacementError(const std::string& m) : DataError(m) {}
};

inline constexpr std::size_t kPatchSize = 16;
inline constexpr std::size_t kLesionLabel = 1;
inline constexpr std::size_t kNormalLabel = 0;

struct LabeledImage {
  Tensor<float> pixels;  // [C x H x W], values in [0,1]
  std::optional<Tensor<std::uint8_t>> lesion_mask;  // [H x W], 0/1
  std::optional<Tensor<std::uint8_t>> normal_mask;
  std::size_t label = 0;
  std::string id;
};

struct PatchSample {
  Tensor<float> patch;  // [C x 16 x 16]
  std::size_t label = 0;
  std::string source_image;
  std::size_t x = 0, y = 0;  // top-left column, row
};

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split name '" + s + "'");
}

struct ManifestRow {
  std::string sample_id;
  Split split = Split::Train;
  std::size_t label = 0;
  std::string source_image;
  std::size_t x = 0, y = 0;
};

struct DatasetManifest {
  std::vector<ManifestRow> rows;
  std::uint64_t seed = 0;
};

// ---- IDX (big-endian, magic 0x803 images / 0x801 labels, unsigned byte) ----

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw TruncatedError("truncated while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

}  // namespace detail

inline std::vector<Tensor<float>> load_idx_images(const std::string& path) {
  std::ifstream in = detail::open_binary(path);
  const std::uint32_t magic = detail::read_u32_be(in, path + " magic");
  if (magic != 0x00000803u) {
    std::ostringstream os;
    os << path << ": bad image magic 0x" << std::hex << magic;
    throw BadMagicError(os.str());
  }
  const std::uint32_t n = detail::read_u32_be(in, path + " count");
  const std::uint32_t h = detail::read_u32_be(in, path + " rows");
  const std::uint32_t w = detail::read_u32_be(in, path + " cols");
  if (h == 0 || w == 0) throw DataError(path + ": zero image extent");
  std::vector<Tensor<float>> out;
  out.reserve(n);
  std::vector<unsigned char> buf(std::size_t(h) * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!in)
      throw TruncatedError(path + ": truncated at image " + std::to_string(i) +
                           " of " + std::to_string(n));
    Tensor<float> img({1, h, w});
    for (std::size_t p = 0; p < buf.size(); ++p) img[p] = float(buf[p]) / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

inline std::vector<std::size_t> load_idx_labels(const std::string& path) {
  std::ifstream in = detail::open_binary(path);
  const std::uint32_t magic = detail::read_u32_be(in, path + " magic");
  if (magic != 0x00000801u) {
    std::ostringstream os;
    os << path << ": bad label magic 0x" << std::hex << magic;
    throw BadMagicError(os.str());
  }
  const std::uint32_t n = detail::read_u32_be(in, path + " count");
  std::vector<unsigned char> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!in) throw TruncatedError(path + ": truncated label payload");
  return std::vector<std::size_t>(buf.begin(), buf.end());
}

inline std::vector<LabeledImage> load_idx(const std::string& images_path,
                                          const std::string& labels_path) {
  std::vector<Tensor<float>> imgs = load_idx_images(images_path);
  std::vector<std::size_t> labels = load_idx_labels(labels_path);
  if (imgs.size() != labels.size())
    throw CountMismatchError(images_path + " holds " + std::to_string(imgs.size()) +
                             " images but " + labels_path + " holds " +
                             std::to_string(labels.size()) + " labels");
  std::vector<LabeledImage> out(imgs.size());
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    out[i].pixels = std::move(imgs[i]);
    out[i].label = labels[i];
    out[i].id = std::to_string(i);
  }
  return out;
}

inline void save_idx_images(const std::string& path,
                            const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw DataError("refusing to write an empty image set");
  const std::size_t h = images[0].extent(1), w = images[0].extent(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  detail::write_u32_be(out, 0x00000803u);
  detail::write_u32_be(out, std::uint32_t(images.size()));
  detail::write_u32_be(out, std::uint32_t(h));
  detail::write_u32_be(out, std::uint32_t(w));
  std::vector<unsigned char> buf(h * w);
  for (const Tensor<float>& img : images) {
    if (img.rank() != 3 || img.extent(0) != 1 || img.extent(1) != h ||
        img.extent(2) != w)
      throw DataError("IDX writer needs uniform [1 x H x W] images, got " +
                      img.shape_str());
    for (std::size_t p = 0; p < buf.size(); ++p) {
      const float v = std::min(1.0f, std::max(0.0f, img[p]));
      buf[p] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  }
  if (!out) throw DataError("short write to " + path);
}

inline void save_idx_labels(const std::string& path,
                            const std::vector<std::size_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  detail::write_u32_be(out, 0x00000801u);
  detail::write_u32_be(out, std::uint32_t(labels.size()));
  for (std::size_t l : labels) {
    if (l > 255) throw DataError("label " + std::to_string(l) + " exceeds a byte");
    const unsigned char b = static_cast<unsigned char>(l);
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw DataError("short write to " + path);
}

// ---- PGM (P5 binary, maxval up to 255; masks threshold at 128) ----

namespace detail {

inline std::size_t pgm_token(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = in.get();
    c = in.get();
  }
  if (c == EOF) throw TruncatedError(path + ": truncated PGM header");
  std::size_t v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + std::size_t(c - '0');
    c = in.get();
  }
  return v;
}

}  // namespace detail

inline Tensor<std::uint8_t> load_pgm(const std::string& path) {
  std::ifstream in = detail::open_binary(path);
  char p, five;
  in.get(p);
  in.get(five);
  if (!in || p != 'P' || five != '5')
    throw BadMagicError(path + ": not a binary P5 PGM");
  const std::size_t w = detail::pgm_token(in, path);
  const std::size_t h = detail::pgm_token(in, path);
  const std::size_t maxval = detail::pgm_token(in, path);
  if (maxval == 0 || maxval > 255)
    throw DataError(path + ": unsupported PGM maxval " + std::to_string(maxval));
  if (w == 0 || h == 0) throw DataError(path + ": zero PGM extent");
  Tensor<std::uint8_t> out({h, w});
  in.read(reinterpret_cast<char*>(out.data()), std::streamsize(out.numel()));
  if (!in) throw TruncatedError(path + ": truncated PGM payload");
  return out;
}

inline Tensor<std::uint8_t> load_mask_pgm(const std::string& path) {
  Tensor<std::uint8_t> raw = load_pgm(path);
  for (std::size_t i = 0; i < raw.numel(); ++i) raw[i] = raw[i] >= 128 ? 1 : 0;
  return raw;
}

inline void save_pgm(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 2) throw DataError("PGM writer needs [H x W], got " + img.shape_str());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << img.extent(1) << " " << img.extent(0) << "\n255\n";
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img[i]));
    const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0f));
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw DataError("short write to " + path);
}

// ---- Patch extraction ----

namespace detail {

// Placements whose window keeps at least 70% of its pixels inside the mask.
inline std::vector<std::pair<std::size_t, std::size_t>> valid_placements(
    const Tensor<std::uint8_t>& mask) {
  const std::size_t h = mask.extent(0), w = mask.extent(1);
  std::vector<std::pair<std::size_t, std::size_t>> out;  // (y, x)
  if (h < kPatchSize || w < kPatchSize) return out;
  std::vector<std::size_t> ii((h + 1) * (w + 1), 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      ii[(r + 1) * (w + 1) + c + 1] = std::size_t(mask.at(r, c) != 0) +
                                      ii[r * (w + 1) + c + 1] +
                                      ii[(r + 1) * (w + 1) + c] -
                                      ii[r * (w + 1) + c];
  const std::size_t total = kPatchSize * kPatchSize;
  for (std::size_t y = 0; y + kPatchSize <= h; ++y)
    for (std::size_t x = 0; x + kPatchSize <= w; ++x) {
      const std::size_t inside =
          ii[(y + kPatchSize) * (w + 1) + x + kPatchSize] -
          ii[y * (w + 1) + x + kPatchSize] -
          ii[(y + kPatchSize) * (w + 1) + x] + ii[y * (w + 1) + x];
      if (inside * 100 >= 70 * total) out.emplace_back(y, x);
    }
  return out;
}

inline Tensor<float> crop(const Tensor<float>& pixels, std::size_t y, std::size_t x) {
  const std::size_t c = pixels.extent(0);
  Tensor<float> out({c, kPatchSize, kPatchSize});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < kPatchSize; ++r)
      for (std::size_t cc = 0; cc < kPatchSize; ++cc)
        out.at(ch, r, cc) = pixels.at(ch, y + r, x + cc);
  return out;
}

}  // namespace detail

// Thirty uniform placements per region; distinct placements when the region
// admits enough of them, with replacement otherwise.
inline std::vector<PatchSample> extract_patches(const LabeledImage& img,
                                                std::size_t per_region, Rng& rng) {
  if (!img.lesion_mask || !img.normal_mask)
    throw DataError("image '" + img.id + "' lacks region masks");
  if (img.lesion_mask->extent(0) != img.pixels.extent(1) ||
      img.lesion_mask->extent(1) != img.pixels.extent(2) ||
      img.normal_mask->extent(0) != img.pixels.extent(1) ||
      img.normal_mask->extent(1) != img.pixels.extent(2))
    throw DataError("image '" + img.id + "' mask extents differ from pixels");
  struct Region {
    const char* name;
    const Tensor<std::uint8_t>* mask;
    std::size_t label;
  };
  const Region regions[2] = {{"lesion", &*img.lesion_mask, kLesionLabel},
                             {"normal", &*img.normal_mask, kNormalLabel}};
  std::vector<PatchSample> out;
  out.reserve(2 * per_region);
  for (const Region& reg : regions) {
    auto places = detail::valid_placements(*reg.mask);
    if (places.empty())
      throw PlacementError("image '" + img.id + "': " + reg.name +
                           " region has no valid 16x16 placement");
    std::vector<std::size_t> picked;
    picked.reserve(per_region);
    if (places.size() >= per_region) {
      std::vector<std::size_t> idx(places.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      for (std::size_t i = 0; i < per_region; ++i) {
        const std::size_t j = i + std::size_t(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
        picked.push_back(idx[i]);
      }
    } else {
      for (std::size_t i = 0; i < per_region; ++i)
        picked.push_back(std::size_t(rng.below(places.size())));
    }
    for (std::size_t pi : picked) {
      const auto [y, x] = places[pi];
      PatchSample s;
      s.patch = detail::crop(img.pixels, y, x);
      s.label = reg.label;
      s.source_image = img.id;
      s.x = x;
      s.y = y;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---- Synthetic datasets ----

namespace detail {

inline void fill_disc(Tensor<float>& img, double cy, double cx, double rad, float val) {
  const std::size_t h = img.extent(1), w = img.extent(2);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = double(r) - cy, dx = double(c) - cx;
      if (dy * dy + dx * dx <= rad * rad) img.at(0, r, c) = val;
    }
}

inline void fill_ring(Tensor<float>& img, double cy, double cx, double rad, float val) {
  const std::size_t h = img.extent(1), w = img.extent(2);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = double(r) - cy, dx = double(c) - cx;
      const double d2 = dy * dy + dx * dx;
      if (d2 <= rad * rad && d2 >= (rad - 1.2) * (rad - 1.2)) img.at(0, r, c) = val;
    }
}

// Class 1 carries a large disc, class 0 a small one.
inline void class_disc(Tensor<float>& img, std::size_t label, Rng& rng, float fg) {
  const double rad = (label == 1 ? 4.6 : 3.0) + 0.6 * rng.uniform();
  const double margin = rad + 1.0;
  const double span = double(kPatchSize) - 2 * margin;
  const double cy = margin + span * rng.uniform();
  const double cx = margin + span * rng.uniform();
  fill_disc(img, cy, cx, rad, fg);
}

}  // namespace detail

// Flat background, one class-sized blob. A pixel-mean threshold separates it.
inline std::vector<LabeledImage> synth_simple(std::size_t n, Rng& rng) {
  if (n == 0) throw DataError("synthetic dataset needs n > 0");
  std::vector<LabeledImage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage& im = out[i];
    im.label = i % 2;
    im.id = "synth-simple-" + std::to_string(i);
    const float bg = 0.15f + 0.07f * float(rng.uniform());
    im.pixels = Tensor<float>::full({1, kPatchSize, kPatchSize}, bg);
    const float fg = 0.85f + 0.1f * float(rng.uniform());
    detail::class_disc(im.pixels, im.label, rng, fg);
  }
  return out;
}

// The same blobs on a heterogeneous background: gradient, speckle, distractor
// shapes, contrast jitter. The mean threshold stops working; the shape signal
// stays (the class disc is drawn last and never occluded).
inline std::vector<LabeledImage> synth_complex(std::size_t n, Rng& rng) {
  if (n == 0) throw DataError("synthetic dataset needs n > 0");
  std::vector<LabeledImage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage& im = out[i];
    im.label = i % 2;
    im.id = "synth-complex-" + std::to_string(i);
    im.pixels = Tensor<float>({1, kPatchSize, kPatchSize});
    const double base = 0.15 + 0.3 * rng.uniform();
    const double gy = -0.2 + 0.4 * rng.uniform();
    const double gx = -0.2 + 0.4 * rng.uniform();
    for (std::size_t r = 0; r < kPatchSize; ++r)
      for (std::size_t c = 0; c < kPatchSize; ++c) {
        const double noise = -0.15 + 0.3 * rng.uniform();
        im.pixels.at(0, r, c) =
            float(base + gy * double(r) / kPatchSize + gx * double(c) / kPatchSize + noise);
      }
    const std::size_t distractors = 5 + std::size_t(rng.below(5));
    for (std::size_t d = 0; d < distractors; ++d) {
      const float val = rng.below(4) ? 0.55f + 0.4f * float(rng.uniform())
                                     : 0.05f + 0.2f * float(rng.uniform());
      if (rng.below(2)) {
        const std::size_t rw = 2 + std::size_t(rng.below(5));
        const std::size_t rh = 2 + std::size_t(rng.below(5));
        const std::size_t r0 = std::size_t(rng.below(kPatchSize - rh));
        const std::size_t c0 = std::size_t(rng.below(kPatchSize - rw));
        for (std::size_t r = r0; r < r0 + rh; ++r)
          for (std::size_t c = c0; c < c0 + rw; ++c) im.pixels.at(0, r, c) = val;
      } else {
        // rings span both class radii; the hollow centre keeps them tellable
        const double rad = 2.2 + 3.8 * rng.uniform();
        detail::fill_ring(im.pixels, 2.0 + 12.0 * rng.uniform(),
                          2.0 + 12.0 * rng.uniform(), rad, val);
      }
    }
    const float fg = 0.8f + 0.15f * float(rng.uniform());
    detail::class_disc(im.pixels, im.label, rng, fg);
    const float gain = 0.4f + 0.6f * float(rng.uniform());
    const float offset = -0.2f + 0.4f * float(rng.uniform());
    for (std::size_t p = 0; p < im.pixels.numel(); ++p) {
      const float v = (im.pixels[p] - 0.5f) * gain + 0.5f + offset;
      im.pixels[p] = std::min(1.0f, std::max(0.0f, v));
    }
  }
  return out;
}

// ---- Splits and manifests ----

// Image-level 80/10/10. Deterministic per seed, disjoint by construction.
inline std::vector<Split> assign_splits(std::size_t n_sources, std::uint64_t seed) {
  if (n_sources < 10)
    throw DataError("split needs at least 10 source images, got " +
                    std::to_string(n_sources));
  const std::size_t n_val = (n_sources + 5) / 10;
  const std::size_t n_test = (n_sources + 5) / 10;
  std::vector<std::size_t> order(n_sources);
  for (std::size_t i = 0; i < n_sources; ++i) order[i] = i;
  Rng rng(Rng::derive_seed(seed, "split"));
  rng.shuffle(order.begin(), order.end());
  std::vector<Split> out(n_sources, Split::Train);
  for (std::size_t i = 0; i < n_val; ++i) out[order[i]] = Split::Val;
  for (std::size_t i = n_val; i < n_val + n_test; ++i) out[order[i]] = Split::Test;
  return out;
}

namespace detail {

template <typename Row>
DatasetManifest manifest_from(const std::vector<Row>& items, std::uint64_t seed,
                              const std::string& (*source_of)(const Row&),
                              std::size_t (*label_of)(const Row&),
                              std::size_t (*x_of)(const Row&),
                              std::size_t (*y_of)(const Row&)) {
  std::vector<std::string> sources;
  for (const Row& r : items) {
    const std::string& s = source_of(r);
    if (std::find(sources.begin(), sources.end(), s) == sources.end())
      sources.push_back(s);
  }
  std::vector<Split> assignment = assign_splits(sources.size(), seed);
  DatasetManifest m;
  m.seed = seed;
  m.rows.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Row& r = items[i];
    const std::size_t si = std::size_t(
        std::find(sources.begin(), sources.end(), source_of(r)) - sources.begin());
    ManifestRow row;
    row.sample_id = std::to_string(i);
    row.split = assignment[si];
    row.label = label_of(r);
    row.source_image = source_of(r);
    row.x = x_of(r);
    row.y = y_of(r);
    m.rows.push_back(std::move(row));
  }
  return m;
}

}  // namespace detail

inline DatasetManifest build_manifest(const std::vector<PatchSample>& samples,
                                      std::uint64_t seed) {
  return detail::manifest_from<PatchSample>(
      samples, seed, [](const PatchSample& s) -> const std::string& { return s.source_image; },
      [](const PatchSample& s) { return s.label; },
      [](const PatchSample& s) { return s.x; }, [](const PatchSample& s) { return s.y; });
}

inline DatasetManifest build_manifest(const std::vector<LabeledImage>& images,
                                      std::uint64_t seed) {
  return detail::manifest_from<LabeledImage>(
      images, seed, [](const LabeledImage& s) -> const std::string& { return s.id; },
      [](const LabeledImage& s) { return s.label; },
      [](const LabeledImage&) { return std::size_t(0); },
      [](const LabeledImage&) { return std::size_t(0); });
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const ManifestRow& r : m.rows)
    out << r.sample_id << '\t' << split_name(r.split) << '\t' << r.label << '\t'
        << r.source_image << '\t' << r.x << '\t' << r.y << '\n';
  if (!out) throw DataError("short write to " + path);
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRow r;
    std::string split_s, label_s, x_s, y_s;
    if (!std::getline(ls, r.sample_id, '\t') || !std::getline(ls, split_s, '\t') ||
        !std::getline(ls, label_s, '\t') || !std::getline(ls, r.source_image, '\t') ||
        !std::getline(ls, x_s, '\t') || !std::getline(ls, y_s))
      throw DataError(path + ":" + std::to_string(lineno) + ": manifest row needs 6 fields");
    r.split = split_from_name(split_s);
    r.label = std::stoul(label_s);
    r.x = std::stoul(x_s);
    r.y = std::stoul(y_s);
    m.rows.push_back(std::move(r));
  }
  return m;
}

inline std::vector<std::size_t> manifest_indices(const DatasetManifest& m, Split s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.rows.size(); ++i)
    if (m.rows[i].split == s) out.push_back(i);
  return out;
}

// Stack selected images into one [B x C x H x W] batch.
template <typename Item>
Tensor<float> batch_images(const std::vector<Item>& items,
                           const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("empty batch");
  auto pixels_of = [](const Item& it) -> const Tensor<float>& {
    if constexpr (std::is_same_v<Item, LabeledImage>) return it.pixels;
    else return it.patch;
  };
  const Tensor<float>& first = pixels_of(items.at(indices[0]));
  const std::size_t c = first.extent(0), h = first.extent(1), w = first.extent(2);
  Tensor<float> out({indices.size(), c, h, w});
  std::size_t off = 0;
  for (std::size_t idx : indices) {
    const Tensor<float>& img = pixels_of(items.at(idx));
    if (!img.same_shape(first))
      throw DataError("batch images disagree on shape: " + img.shape_str() +
                      " vs " + first.shape_str());
    for (std::size_t p = 0; p < img.numel(); ++p) out[off + p] = img[p];
    off += img.numel();
  }
  return out;
}

}  // namespace sacn
