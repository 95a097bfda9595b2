/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace distildoc {

struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_y() const { return 0.5 * (y1 + y2); }

  friend bool operator==(const BBox&, const BBox&) = default;
  friend std::ostream& operator<<(std::ostream& os, const BBox& b) {
    return os << "(" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ")";
  }
};

enum class BoxFormat { xyxy, xywh };

inline BBox standardize_bbox(const std::array<double, 4>& raw, BoxFormat format) {
  for (double v : raw)
    if (!std::isfinite(v)) throw std::domain_error("bbox coordinates must be finite");
  if (format == BoxFormat::xywh) {
    if (raw[2] < 0.0 || raw[3] < 0.0) throw std::domain_error("xywh bbox has negative width or height");
    return {raw[0], raw[1], raw[0] + raw[2], raw[1] + raw[3]};
  }
  return {std::min(raw[0], raw[2]), std::min(raw[1], raw[3]), std::max(raw[0], raw[2]), std::max(raw[1], raw[3])};
}

struct ImageDims {
  double width = 0.0;
  double height = 0.0;

  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

/// Rescales a box from one image resolution to another, per axis.
inline BBox interpolate_bbox(const BBox& box, const ImageDims& from, const ImageDims& to) {
  if (!(from.width > 0.0 && from.height > 0.0 && to.width > 0.0 && to.height > 0.0))
    throw std::domain_error("interpolate_bbox: image dimensions must be positive");
  const double sx = to.width / from.width;
  const double sy = to.height / from.height;
  return {box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy};
}

inline double iou(const BBox& a, const BBox& b) {
  const BBox inter{std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
  const double i = inter.area();
  const double u = a.area() + b.area() - i;
  return u > 0.0 ? i / u : 0.0;
}

/// Boundary-inclusive containment.
inline bool fully_contains(const BBox& outer, const BBox& inner) {
  return outer.x1 <= inner.x1 && outer.y1 <= inner.y1 && inner.x2 <= outer.x2 && inner.y2 <= outer.y2;
}

enum class Corner { top_left, bottom_right };
enum class CornerNorm { l1, l2 };

inline std::string_view to_string(CornerNorm norm) { return norm == CornerNorm::l1 ? "l1" : "l2"; }

inline CornerNorm corner_norm_from_string(std::string_view name) {
  if (name == "l1" || name == "L1") return CornerNorm::l1;
  if (name == "l2" || name == "L2") return CornerNorm::l2;
  throw std::domain_error("unknown corner norm '" + std::string(name) + "'");
}

/// Distance between the same-named corners of two boxes.
inline double corner_distance(const BBox& region, const BBox& token, Corner corner,
                              CornerNorm norm = CornerNorm::l1) {
  const double dx = corner == Corner::top_left ? region.x1 - token.x1 : region.x2 - token.x2;
  const double dy = corner == Corner::top_left ? region.y1 - token.y1 : region.y2 - token.y2;
  return norm == CornerNorm::l1 ? std::abs(dx) + std::abs(dy) : std::hypot(dx, dy);
}

/// One layout-analysis detection.
struct LayoutRegion {
  BBox bbox;
  std::string class_label;
  double score = 1.0;
  std::map<std::string, std::string> metadata;
};

}  // namespace distildoc
