#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "segqc/error.hpp"
#include "segqc/png_io.hpp"

namespace segqc {

/// Grayscale slice with intensities normalized to [0,1] (byte 0 -> 0.0, 255 -> 1.0).
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  RasterImage() = default;
  RasterImage(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const RasterImage&) const = default;
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  /// Out-of-image positions read as background.
  bool get(int x, int y) const { return in_bounds(x, y) && at(x, y); }
  void set(int x, int y, bool v = true) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }

  std::size_t area() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool empty() const { return area() == 0; }

  bool operator==(const BinaryMask&) const = default;
};

struct Point {
  int x = 0;
  int y = 0;
  bool operator==(const Point&) const = default;
  auto operator<=>(const Point&) const = default;
};

struct RegionTopology {
  std::size_t component_count = 0;
  std::vector<std::size_t> holes_per_component;
  /// One outer boundary per component; each path ends on its first vertex.
  std::vector<std::vector<Point>> contours;
  std::size_t total_area_px = 0;
};

struct OverlapStats {
  double dice = 0.0;
  double under_seg_fraction = 0.0;
  double spill_fraction = 0.0;
};

struct VisualFeatures {
  RegionTopology topology;
  double boundary_edge_strength = 0.0;
  /// Absent for an empty candidate; +inf when the region's mean intensity is 0.
  std::optional<double> interior_cv;
  std::optional<OverlapStats> overlap;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct OverlayStyle {
  Rgb contour_color{255, 0, 0};
  int contour_width = 1;
  double fill_alpha = 0.25;
};

// ---------------------------------------------------------------------------
// Conversions
// ---------------------------------------------------------------------------

inline RasterImage raster_from_pixels(const PixelBuffer& px) {
  RasterImage img(px.width, px.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = px.data[i] / 255.0;
  return img;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline PixelBuffer pixels_from_raster(const RasterImage& img) {
  PixelBuffer px{img.width, img.height, 1, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) px.data[i] = to_byte(img.pixels[i]);
  return px;
}

/// Any nonzero byte is foreground.
inline BinaryMask mask_from_pixels(const PixelBuffer& px) {
  BinaryMask m(px.width, px.height);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = px.data[i] != 0 ? 1 : 0;
  return m;
}

inline PixelBuffer pixels_from_mask(const BinaryMask& m) {
  PixelBuffer px{m.width, m.height, 1, std::vector<std::uint8_t>(m.bits.size())};
  for (std::size_t i = 0; i < m.bits.size(); ++i) px.data[i] = m.bits[i] ? 255 : 0;
  return px;
}

inline RasterImage load_raster(const std::filesystem::path& p) {
  return raster_from_pixels(decode_png_gray(read_file_bytes(p)));
}
inline BinaryMask load_mask(const std::filesystem::path& p) {
  return mask_from_pixels(decode_png_gray(read_file_bytes(p)));
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

namespace detail {

// Clockwise ring in image coordinates (y grows downward), starting east.
inline constexpr std::array<Point, 8> kRing = {
    Point{1, 0}, Point{1, 1}, Point{0, 1}, Point{-1, 1}, Point{-1, 0}, Point{-1, -1}, Point{0, -1}, Point{1, -1}};

inline constexpr std::array<Point, 4> kCross = {Point{1, 0}, Point{0, 1}, Point{-1, 0}, Point{0, -1}};

struct Labeling {
  std::vector<int> labels;  // -1 = not in any region
  int count = 0;
};

/// Labels regions of pixels whose mask value equals `value`; components are
/// numbered in row-major order of their first pixel.
template <std::size_t K>
Labeling label_regions(const BinaryMask& m, bool value, const std::array<Point, K>& nbrs) {
  Labeling out{std::vector<int>(m.bits.size(), -1), 0};
  std::vector<Point> stack;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      std::size_t idx = static_cast<std::size_t>(y) * m.width + x;
      if (m.at(x, y) != value || out.labels[idx] != -1) continue;
      const int label = out.count++;
      out.labels[idx] = label;
      stack.push_back({x, y});
      while (!stack.empty()) {
        Point p = stack.back();
        stack.pop_back();
        for (const auto& d : nbrs) {
          int nx = p.x + d.x, ny = p.y + d.y;
          if (!m.in_bounds(nx, ny) || m.at(nx, ny) != value) continue;
          std::size_t nidx = static_cast<std::size_t>(ny) * m.width + nx;
          if (out.labels[nidx] != -1) continue;
          out.labels[nidx] = label;
          stack.push_back({nx, ny});
        }
      }
    }
  }
  return out;
}

inline int ring_index(Point d) {
  for (int i = 0; i < 8; ++i)
    if (kRing[i] == d) return i;
  return -1;
}

/// Moore-neighbor boundary trace of one 8-connected component, starting at its
/// first pixel in row-major order. Terminates when the first move
/// (start -> second vertex) is about to repeat.
inline std::vector<Point> moore_trace(const BinaryMask& m, const std::vector<int>& labels, int label,
                                      Point start) {
  auto inside = [&](int x, int y) {
    return m.in_bounds(x, y) && labels[static_cast<std::size_t>(y) * m.width + x] == label;
  };

  std::vector<Point> path{start};
  // The west neighbor of the first row-major pixel is never part of the component.
  Point current = start;
  Point backtrack{start.x - 1, start.y};

  auto step = [&](Point& p, Point& b) -> bool {
    int k = ring_index({b.x - p.x, b.y - p.y});
    for (int i = 1; i <= 8; ++i) {
      const Point& d = kRing[(k + i) % 8];
      if (inside(p.x + d.x, p.y + d.y)) {
        const Point& prev = kRing[(k + i - 1) % 8];
        b = {p.x + prev.x, p.y + prev.y};
        p = {p.x + d.x, p.y + d.y};
        return true;
      }
    }
    return false;  // isolated pixel
  };

  Point b = backtrack;
  Point p = current;
  if (!step(p, b)) {
    path.push_back(start);
    return path;
  }
  const Point second = p;
  const Point second_backtrack = b;
  path.push_back(second);
  const std::size_t limit = 4 * m.bits.size() + 8;
  while (path.size() < limit) {
    Point prev_p = p;
    if (!step(p, b)) break;
    if (prev_p == start && p == second && b == second_backtrack) break;
    path.push_back(p);
  }
  // The loop exits right after re-entering start, which is already the last vertex.
  if (path.back() != start) path.push_back(start);
  return path;
}

} // namespace detail

/// Foreground components use 8-connectivity, holes (background regions not
/// reaching the image border) use 4-connectivity.
inline RegionTopology region_topology(const BinaryMask& mask) {
  RegionTopology topo;
  topo.total_area_px = mask.area();
  auto fg = detail::label_regions(mask, true, detail::kRing);
  topo.component_count = static_cast<std::size_t>(fg.count);
  topo.holes_per_component.assign(topo.component_count, 0);

  std::vector<bool> started(topo.component_count, false);
  topo.contours.resize(topo.component_count);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      int label = fg.labels[static_cast<std::size_t>(y) * mask.width + x];
      if (label < 0 || started[label]) continue;
      started[label] = true;
      topo.contours[label] = detail::moore_trace(mask, fg.labels, label, {x, y});
    }
  }

  auto bg = detail::label_regions(mask, false, detail::kCross);
  std::vector<bool> touches_border(static_cast<std::size_t>(bg.count), false);
  std::vector<int> owner(static_cast<std::size_t>(bg.count), -1);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      int label = bg.labels[static_cast<std::size_t>(y) * mask.width + x];
      if (label < 0) continue;
      if (x == 0 || y == 0 || x == mask.width - 1 || y == mask.height - 1) touches_border[label] = true;
      if (owner[label] >= 0) continue;
      for (const auto& d : detail::kCross) {
        if (mask.get(x + d.x, y + d.y)) {
          owner[label] = fg.labels[static_cast<std::size_t>(y + d.y) * mask.width + (x + d.x)];
          break;
        }
      }
    }
  }
  for (int h = 0; h < bg.count; ++h)
    if (!touches_border[h] && owner[h] >= 0) ++topo.holes_per_component[owner[h]];
  return topo;
}

// ---------------------------------------------------------------------------
// Overlap
// ---------------------------------------------------------------------------

inline void require_same_size(int w1, int h1, int w2, int h2) {
  if (w1 != w2 || h1 != h2)
    throw DimensionMismatch(std::to_string(w1) + "x" + std::to_string(h1) + " vs " + std::to_string(w2) + "x" +
                            std::to_string(h2));
}

/// Dice, share of the reference the candidate misses, and share of the
/// candidate lying outside the reference.
inline OverlapStats overlap_stats(const BinaryMask& candidate, const BinaryMask& reference) {
  require_same_size(candidate.width, candidate.height, reference.width, reference.height);
  std::size_t inter = 0, c = 0, r = 0;
  for (std::size_t i = 0; i < candidate.bits.size(); ++i) {
    const bool in_c = candidate.bits[i] != 0, in_r = reference.bits[i] != 0;
    c += in_c;
    r += in_r;
    inter += in_c && in_r;
  }
  if (r == 0) throw EmptyReference("reference mask has no foreground");
  OverlapStats s;
  s.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(c + r);
  s.under_seg_fraction = static_cast<double>(r - inter) / static_cast<double>(r);
  s.spill_fraction = c == 0 ? 0.0 : static_cast<double>(c - inter) / static_cast<double>(c);
  return s;
}

// ---------------------------------------------------------------------------
// Intensity features
// ---------------------------------------------------------------------------

/// Peak Sobel response on a unit step: 1 + 2 + 1.
inline constexpr double kSobelUnitStep = 4.0;

/// 3x3 Sobel gradient magnitude at (x, y) with edge-replicate padding.
inline double sobel_magnitude(const RasterImage& img, int x, int y) {
  auto px = [&](int xx, int yy) {
    xx = std::clamp(xx, 0, img.width - 1);
    yy = std::clamp(yy, 0, img.height - 1);
    return img.at(xx, yy);
  };
  const double gx = (px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)) -
                    (px(x - 1, y - 1) + 2 * px(x - 1, y) + px(x - 1, y + 1));
  const double gy = (px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)) -
                    (px(x - 1, y - 1) + 2 * px(x, y - 1) + px(x + 1, y - 1));
  return std::hypot(gx, gy);
}

/// Mean normalized Sobel magnitude over the distinct pixels of all contours.
inline double boundary_edge_strength(const RasterImage& image, const RegionTopology& topology) {
  std::set<Point> pixels;
  for (const auto& contour : topology.contours) pixels.insert(contour.begin(), contour.end());
  if (pixels.empty()) throw EmptyTopology("no contour pixels to measure");
  double sum = 0.0;
  for (const auto& p : pixels) {
    if (p.x < 0 || p.y < 0 || p.x >= image.width || p.y >= image.height)
      throw DimensionMismatch("contour pixel outside the image");
    sum += sobel_magnitude(image, p.x, p.y);
  }
  return std::clamp(sum / static_cast<double>(pixels.size()) / kSobelUnitStep, 0.0, 1.0);
}

/// Coefficient of variation (population std / mean) of the masked intensities.
inline double interior_homogeneity(const RasterImage& image, const BinaryMask& mask) {
  require_same_size(image.width, image.height, mask.width, mask.height);
  std::size_t n = 0;
  // Welford.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (!mask.bits[i]) continue;
    ++n;
    const double v = image.pixels[i];
    const double delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v - mean);
  }
  if (n == 0) throw EmptyMask("mask has no foreground");
  if (mean == 0.0) return std::numeric_limits<double>::infinity();
  const double variance = std::max(0.0, m2 / static_cast<double>(n));
  return std::sqrt(variance) / mean;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Grayscale slice promoted to RGB with the mask's contour band painted and
/// its interior alpha-blended toward the contour color.
inline Bytes render_overlay(const RasterImage& image, const BinaryMask& mask, const OverlayStyle& style = {}) {
  require_same_size(image.width, image.height, mask.width, mask.height);
  if (style.contour_width < 1) throw EncodeError("contour_width must be >= 1");
  const double alpha = std::clamp(style.fill_alpha, 0.0, 1.0);

  PixelBuffer out{image.width, image.height, 3,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(image.width) * image.height * 3)};
  std::vector<bool> band(static_cast<std::size_t>(image.width) * image.height, false);
  const int lo = -(style.contour_width - 1) / 2, hi = style.contour_width / 2;
  for (const auto& contour : region_topology(mask).contours)
    for (const auto& p : contour)
      for (int dy = lo; dy <= hi; ++dy)
        for (int dx = lo; dx <= hi; ++dx)
          if (mask.in_bounds(p.x + dx, p.y + dy))
            band[static_cast<std::size_t>(p.y + dy) * image.width + p.x + dx] = true;

  const std::array<double, 3> color = {double(style.contour_color.r), double(style.contour_color.g),
                                       double(style.contour_color.b)};
  for (std::size_t i = 0; i < band.size(); ++i) {
    const std::uint8_t gray = to_byte(image.pixels[i]);
    for (int ch = 0; ch < 3; ++ch) {
      std::uint8_t v = gray;
      if (band[i]) {
        v = static_cast<std::uint8_t>(color[ch]);
      } else if (mask.bits[i] && alpha > 0.0) {
        v = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * gray + alpha * color[ch]));
      }
      out.data[i * 3 + ch] = v;
    }
  }
  return encode_png_rgb(out);
}

// ---------------------------------------------------------------------------
// Feature composition
// ---------------------------------------------------------------------------

inline VisualFeatures extract_features(const RasterImage& image, const BinaryMask& candidate,
                                       const BinaryMask* reference = nullptr) {
  require_same_size(image.width, image.height, candidate.width, candidate.height);
  VisualFeatures f;
  f.topology = region_topology(candidate);
  if (f.topology.component_count > 0) {
    f.boundary_edge_strength = boundary_edge_strength(image, f.topology);
    f.interior_cv = interior_homogeneity(image, candidate);
  }
  if (reference) f.overlap = overlap_stats(candidate, *reference);
  return f;
}

// ---------------------------------------------------------------------------
// Morphology (disk structuring element)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Point> disk_offsets(int radius) {
  std::vector<Point> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) out.push_back({dx, dy});
  return out;
}

} // namespace detail

/// Pixels whose whole disk neighborhood is foreground; outside reads as background.
inline BinaryMask erode_disk(const BinaryMask& m, int radius) {
  if (radius <= 0) return m;
  const auto disk = detail::disk_offsets(radius);
  BinaryMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      bool keep = true;
      for (const auto& d : disk)
        if (!m.get(x + d.x, y + d.y)) {
          keep = false;
          break;
        }
      out.set(x, y, keep);
    }
  return out;
}

inline BinaryMask dilate_disk(const BinaryMask& m, int radius) {
  if (radius <= 0) return m;
  const auto disk = detail::disk_offsets(radius);
  BinaryMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      for (const auto& d : disk)
        if (m.in_bounds(x + d.x, y + d.y)) out.set(x + d.x, y + d.y);
    }
  return out;
}

} // namespace segqc
