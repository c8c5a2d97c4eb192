#include "disdet/box.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace disdet {

namespace {

bool valid_corners(double x_min, double y_min, double x_max, double y_max) {
  return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
         std::isfinite(y_max) && x_min < x_max && y_min < y_max;
}

}  // namespace

BoundingBox::BoundingBox(double x_min, double y_min, double x_max, double y_max)
    : x_min_(x_min), y_min_(y_min), x_max_(x_max), y_max_(y_max) {
  if (!valid_corners(x_min, y_min, x_max, y_max)) {
    std::ostringstream msg;
    msg << "invalid bounding box (" << x_min << ", " << y_min << ", " << x_max << ", "
        << y_max << ")";
    throw std::invalid_argument(msg.str());
  }
}

std::optional<BoundingBox> BoundingBox::try_make(double x_min, double y_min, double x_max,
                                                 double y_max) {
  if (!valid_corners(x_min, y_min, x_max, y_max)) return std::nullopt;
  return BoundingBox(Unchecked{}, x_min, y_min, x_max, y_max);
}

std::ostream& operator<<(std::ostream& os, const BoundingBox& b) {
  return os << "(" << b.x_min() << ", " << b.y_min() << ", " << b.x_max() << ", "
            << b.y_max() << ")";
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double ih = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  // min() guards the last ulp when a == b
  return std::min(1.0, inter / (a.area() + b.area() - inter));
}

std::optional<BoundingBox> clip_box(const BoundingBox& b, double width, double height) {
  if (!(width > 0.0) || !(height > 0.0)) {
    throw std::invalid_argument("clip_box: image size must be positive");
  }
  return BoundingBox::try_make(std::clamp(b.x_min(), 0.0, width),
                               std::clamp(b.y_min(), 0.0, height),
                               std::clamp(b.x_max(), 0.0, width),
                               std::clamp(b.y_max(), 0.0, height));
}

}  // namespace disdet
