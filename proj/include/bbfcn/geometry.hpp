#pragma once

#include <algorithm>
#include <vector>

namespace bbfcn {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Typed 2-d landmark with visibility, in a declared coordinate frame
/// (image pixels unless stated otherwise).
struct Landmark {
    double x = 0.0;
    double y = 0.0;
    bool visible = false;
};

/// One landmark per type, index = type.
using LandmarkSet = std::vector<Landmark>;

struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const { return w * h; }
};

inline double iou(const Box& a, const Box& b) {
    const double x0 = std::max(a.x, b.x);
    const double y0 = std::max(a.y, b.y);
    const double x1 = std::min(a.x + a.w, b.x + b.w);
    const double y1 = std::min(a.y + a.h, b.y + b.h);
    const double iw = std::max(0.0, x1 - x0);
    const double ih = std::max(0.0, y1 - y0);
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace bbfcn
