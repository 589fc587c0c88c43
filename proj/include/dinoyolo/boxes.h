#pragma once

#include <string>

namespace dinoyolo {

/// Normalized center/size box geometry.
struct BoxGeom {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }

  static BoxGeom from_xyxy(double x1, double y1, double x2, double y2) {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
};

/// A scored detection (or a ground-truth box with confidence 1).
struct DetectionBox {
  int cls = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  double confidence = 1.0;

  BoxGeom geom() const { return {cx, cy, w, h}; }
  bool operator==(const DetectionBox&) const = default;
};

/// Annotated object: class id in [0,K) and normalized geometry in [0,1].
struct GroundTruthBox {
  int cls = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  BoxGeom geom() const { return {cx, cy, w, h}; }
  bool operator==(const GroundTruthBox&) const = default;
};

}  // namespace dinoyolo
