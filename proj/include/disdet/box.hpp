#pragma once

#include <optional>
#include <ostream>
#include <vector>

namespace disdet {

/// Axis-aligned box in corner format, continuous pixel coordinates.
/// Construction rejects non-finite or degenerate geometry, so every live
/// instance satisfies x_min < x_max and y_min < y_max.
class BoundingBox {
 public:
  BoundingBox(double x_min, double y_min, double x_max, double y_max);

  /// Non-throwing constructor; nullopt when the corners do not form a valid box.
  static std::optional<BoundingBox> try_make(double x_min, double y_min,
                                             double x_max, double y_max);

  double x_min() const { return x_min_; }
  double y_min() const { return y_min_; }
  double x_max() const { return x_max_; }
  double y_max() const { return y_max_; }

  double width() const { return x_max_ - x_min_; }
  double height() const { return y_max_ - y_min_; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min_ + x_max_); }
  double center_y() const { return 0.5 * (y_min_ + y_max_); }

  bool operator==(const BoundingBox&) const = default;

 private:
  struct Unchecked {};
  BoundingBox(Unchecked, double x_min, double y_min, double x_max, double y_max)
      : x_min_(x_min), y_min_(y_min), x_max_(x_max), y_max_(y_max) {}

  double x_min_;
  double y_min_;
  double x_max_;
  double y_max_;
};

std::ostream& operator<<(std::ostream& os, const BoundingBox& b);

/// Intersection over union; 0 for disjoint boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Clamps into [0,width]x[0,height]. Returns nullopt when nothing of the box
/// remains inside the image.
std::optional<BoundingBox> clip_box(const BoundingBox& b, double width, double height);

struct AnnotatedBox {
  BoundingBox box;
  int label;

  bool operator==(const AnnotatedBox&) const = default;
};

}  // namespace disdet
