#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "segqc/dataset.hpp"
#include "segqc/imaging.hpp"

namespace segqc {

enum class DefectClass { None, Erode, Dilate, Jitter, Fragment, Shift };

inline constexpr DefectClass kAllDefects[] = {DefectClass::None,   DefectClass::Erode,    DefectClass::Dilate,
                                              DefectClass::Jitter, DefectClass::Fragment, DefectClass::Shift};

inline std::string_view to_string(DefectClass d) {
  switch (d) {
    case DefectClass::None: return "none";
    case DefectClass::Erode: return "erode";
    case DefectClass::Dilate: return "dilate";
    case DefectClass::Jitter: return "jitter";
    case DefectClass::Fragment: return "fragment";
    case DefectClass::Shift: return "shift";
  }
  return "?";
}

inline std::optional<DefectClass> parse_defect(std::string_view s) {
  for (auto d : kAllDefects)
    if (to_string(d) == s) return d;
  return std::nullopt;
}

struct PhantomSpec {
  int count_per_defect = 10;
  int width = 64;
  int height = 64;
  std::vector<DefectClass> defect_classes{std::begin(kAllDefects), std::end(kAllDefects)};
  double noise_sigma = 0.05;  // normalized intensity units
  std::uint64_t seed = 7;
};

/// One synthetic case held in memory: the slice, the true organ, and the
/// damaged candidate segmentation that is put up for review.
struct PhantomCase {
  CaseRecord record;
  DefectClass defect = DefectClass::None;
  bool severe = false;
  RasterImage image;
  BinaryMask truth;
  BinaryMask candidate;
};

inline constexpr int kJitterScore = 4;
inline constexpr int kModerateErodeRadius = 2;
inline constexpr int kDilateRadius = 4;
inline constexpr double kBackgroundLevel = 0.25;
inline constexpr double kOrganLevel = 0.70;

/// Geometric damage to usability score.
inline int defect_score(DefectClass d, bool severe) {
  switch (d) {
    case DefectClass::None: return 5;
    case DefectClass::Jitter: return kJitterScore;
    case DefectClass::Erode: return severe ? 1 : 3;
    case DefectClass::Dilate: return 2;
    case DefectClass::Shift: return 2;
    case DefectClass::Fragment: return 2;
  }
  return 1;
}

namespace detail {

class PhantomRng {
public:
  explicit PhantomRng(std::uint64_t seed) : rng_(seed) {}
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

private:
  std::mt19937_64 rng_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Ellipse {
  double cx, cy, a, b, theta;

  double major_coord(double x, double y) const { return (x - cx) * std::cos(theta) + (y - cy) * std::sin(theta); }
  double minor_coord(double x, double y) const { return -(x - cx) * std::sin(theta) + (y - cy) * std::cos(theta); }
  bool contains(double x, double y) const {
    const double u = major_coord(x, y) / a, v = minor_coord(x, y) / b;
    return u * u + v * v <= 1.0;
  }
};

inline BinaryMask rasterize(const Ellipse& e, int w, int h) {
  BinaryMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(x, y, e.contains(x, y));
  return m;
}

inline BinaryMask translate(const BinaryMask& m, int dx, int dy) {
  BinaryMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y) && out.in_bounds(x + dx, y + dy)) out.set(x + dx, y + dy);
  return out;
}

inline BinaryMask jitter_boundary(const BinaryMask& truth, PhantomRng& rng) {
  BinaryMask out = truth;
  for (int y = 0; y < truth.height; ++y)
    for (int x = 0; x < truth.width; ++x) {
      bool touches_other = false;
      for (const auto& d : kCross)
        if (truth.in_bounds(x + d.x, y + d.y) && truth.at(x + d.x, y + d.y) != truth.at(x, y)) touches_other = true;
      if (touches_other && rng.uniform() < 0.3) out.set(x, y, !truth.at(x, y));
    }
  return out;
}

} // namespace detail

inline void validate(const PhantomSpec& spec) {
  if (spec.count_per_defect < 1) throw RangeError("count_per_defect must be >= 1");
  if (spec.width < 16 || spec.height < 16) throw RangeError("phantom image must be at least 16x16");
  if (!(spec.noise_sigma >= 0.0)) throw RangeError("noise_sigma must be >= 0");
}

/// Builds the phantom suite in memory. Within the erode class, repetitions
/// alternate in pairs between moderate (2 px) and severe (semi-minor axis)
/// erosion; the two groups alternate by repetition.
inline std::vector<PhantomCase> generate_phantom_cases(const PhantomSpec& spec) {
  validate(spec);
  std::vector<PhantomCase> out;
  const int w = spec.width, h = spec.height;
  for (DefectClass defect : spec.defect_classes) {
    for (int rep = 0; rep < spec.count_per_defect; ++rep) {
      const std::uint64_t case_seed =
          detail::splitmix64(spec.seed ^ detail::splitmix64(static_cast<std::uint64_t>(defect) * 1000003ull +
                                                            static_cast<std::uint64_t>(rep)));
      detail::PhantomRng rng(case_seed);
      detail::Ellipse e{w * rng.uniform(0.45, 0.55), h * rng.uniform(0.45, 0.55), w * rng.uniform(0.26, 0.32),
                        h * rng.uniform(0.16, 0.21), rng.uniform(0.0, std::numbers::pi)};

      PhantomCase pc;
      pc.defect = defect;
      pc.severe = defect == DefectClass::Erode && (rep / 2) % 2 == 1;
      pc.truth = detail::rasterize(e, w, h);

      pc.image = RasterImage(w, h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double base = pc.truth.at(x, y) ? kOrganLevel : kBackgroundLevel;
          // Quantized to 8 bits, same as the written PNG.
          pc.image.at(x, y) = to_byte(base + spec.noise_sigma * rng.normal()) / 255.0;
        }

      switch (defect) {
        case DefectClass::None: pc.candidate = pc.truth; break;
        case DefectClass::Erode:
          pc.candidate = erode_disk(pc.truth, pc.severe ? static_cast<int>(std::ceil(e.b)) : kModerateErodeRadius);
          break;
        case DefectClass::Dilate: pc.candidate = dilate_disk(pc.truth, kDilateRadius); break;
        case DefectClass::Jitter: pc.candidate = detail::jitter_boundary(pc.truth, rng); break;
        case DefectClass::Fragment: {
          pc.candidate = pc.truth;
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
              if (std::abs(e.major_coord(x, y)) < 0.3 * e.a) pc.candidate.set(x, y, false);
          break;
        }
        case DefectClass::Shift: {
          const double dist = std::max(1.0, std::ceil(0.5 * e.b));
          pc.candidate = detail::translate(pc.truth, static_cast<int>(std::lround(-std::sin(e.theta) * dist)),
                                           static_cast<int>(std::lround(std::cos(e.theta) * dist)));
          break;
        }
      }

      char id[64];
      std::snprintf(id, sizeof id, "%s-%03d", std::string(to_string(defect)).c_str(), rep);
      const bool ct = rep % 2 == 0;
      const int score = defect_score(defect, pc.severe);
      pc.record = CaseRecord{id,
                             ct ? "phantom-ct" : "phantom-mr",
                             ct ? Modality::CT : Modality::MR,
                             ct ? "Liver" : "Prostate",
                             std::string("images/") + id + ".png",
                             std::string("masks/") + id + ".png",
                             score,
                             score_to_label(score),
                             std::nullopt};
      out.push_back(std::move(pc));
    }
  }
  return out;
}

/// Directory holding the true organ masks next to a phantom manifest.
inline std::filesystem::path reference_path(const std::filesystem::path& root, const std::string& case_id) {
  return root / "references" / (case_id + ".png");
}

/// Writes images/, masks/, references/ and manifest.jsonl under `outdir`.
inline Manifest generate_phantom_suite(const PhantomSpec& spec, const std::filesystem::path& outdir) {
  auto cases = generate_phantom_cases(spec);
  Manifest m;
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw IoError("cannot create " + outdir.string() + ": " + ec.message());
  for (const auto& pc : cases) {
    write_file_bytes(outdir / pc.record.image_ref, encode_png_gray(pixels_from_raster(pc.image)));
    write_file_bytes(outdir / pc.record.mask_ref, encode_png_gray(pixels_from_mask(pc.candidate)));
    write_file_bytes(reference_path(outdir, pc.record.id), encode_png_gray(pixels_from_mask(pc.truth)));
    m.cases.push_back(pc.record);
  }
  write_manifest(outdir / "manifest.jsonl", m);
  return m;
}

} // namespace segqc
