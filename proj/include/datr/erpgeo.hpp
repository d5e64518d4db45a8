#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

// Geometry of the equirectangular projection (ERP). An ERP image of width W
// arc-length units wraps a sphere of radius R = W / 2pi; a latitude row at
// axial height h from the pole is a circle of radius sqrt(h (W/pi - h)),
// so equally many pixels per row cover shorter true arcs toward the poles.
namespace datr::erpgeo {

inline constexpr double kPi = 3.14159265358979323846;

struct ErpSpec {
  double width = 2 * kPi;  // W, arc-length units
  int pixels_per_row = 8;  // n
  int pixel_separation = 1;  // n', pixel steps between the two measured points
  double axial_height = kPi;  // h, measured from the pole along the axis

  void validate() const {
    if (pixels_per_row < 1) throw std::domain_error("ErpSpec: n must be >= 1");
    if (pixel_separation < 0 || pixel_separation > pixels_per_row)
      throw std::domain_error("ErpSpec: n' must be in [0, n]");
    if (axial_height < 0 || axial_height > width / kPi)
      throw std::domain_error("ErpSpec: h=" + std::to_string(axial_height) +
                              " outside [0, W/pi]");
  }
};

struct SphereDir {
  double longitude = 0;  // radians in [-pi, pi)
  double latitude = 0;   // radians in [-pi/2, pi/2]
};

// True on-sphere width of one pixel step in the row at axial height h:
// (2pi/n) sqrt(h (W/pi - h)). Maximal (= W/n) at the equator h = W/2pi.
inline double pixel_width(const ErpSpec& spec) {
  spec.validate();
  const double span = spec.axial_height * (spec.width / kPi - spec.axial_height);
  return 2 * kPi / spec.pixels_per_row * std::sqrt(span);
}

// Lateral distortion between two pixels n' steps apart in the same row:
// (n'/n) (W - 2pi sqrt(h (W/pi - h))) = n' (W/n - pixel_width). Zero at the
// equator, growing toward either pole, exactly linear in n'.
inline double distortion_coefficient(const ErpSpec& spec) {
  spec.validate();
  const double span = spec.axial_height * (spec.width / kPi - spec.axial_height);
  return static_cast<double>(spec.pixel_separation) / spec.pixels_per_row *
         (spec.width - 2 * kPi * std::sqrt(span));
}

// Pixel-center mapping from ERP image coordinates to a direction.
inline SphereDir erp_to_dir(double u, double v, int w_px, int h_px) {
  if (u < 0 || u >= w_px || v < 0 || v >= h_px)
    throw std::domain_error("erp_to_dir: pixel (" + std::to_string(u) + "," + std::to_string(v) +
                            ") outside " + std::to_string(w_px) + "x" + std::to_string(h_px));
  return {2 * kPi * (u + 0.5) / w_px - kPi, kPi / 2 - kPi * (v + 0.5) / h_px};
}

inline void dir_to_erp(const SphereDir& d, int w_px, int h_px, double& u, double& v) {
  u = (d.longitude + kPi) * w_px / (2 * kPi) - 0.5;
  v = (kPi / 2 - d.latitude) * h_px / kPi - 0.5;
}

// Perspective ray through the pixel center; the principal axis points at
// (longitude 0, latitude 0) and the focal length follows from hfov.
inline SphereDir pinhole_to_dir(double u, double v, int w_px, int h_px, double hfov) {
  if (!(hfov > 0 && hfov < kPi)) throw std::domain_error("pinhole_to_dir: hfov outside (0, pi)");
  if (u < 0 || u >= w_px || v < 0 || v >= h_px)
    throw std::domain_error("pinhole_to_dir: pixel outside image");
  const double f = (w_px / 2.0) / std::tan(hfov / 2.0);
  const double x = (u + 0.5) - w_px / 2.0;
  const double y = h_px / 2.0 - (v + 0.5);
  return {std::atan2(x, f), std::atan2(y, std::sqrt(x * x + f * f))};
}

// Inverse of pinhole_to_dir; returns false when the direction leaves the
// image (or the forward hemisphere).
inline bool dir_to_pinhole(const SphereDir& d, int w_px, int h_px, double hfov, double& u,
                           double& v) {
  if (!(hfov > 0 && hfov < kPi)) throw std::domain_error("dir_to_pinhole: hfov outside (0, pi)");
  if (d.longitude <= -kPi / 2 || d.longitude >= kPi / 2) return false;
  const double f = (w_px / 2.0) / std::tan(hfov / 2.0);
  const double x = f * std::tan(d.longitude);
  const double y = std::tan(d.latitude) * std::sqrt(f * f + x * x);
  u = x + w_px / 2.0 - 0.5;
  v = h_px / 2.0 - y - 0.5;
  return u >= 0 && u < w_px && v >= 0 && v < h_px;
}

struct DistortionRow {
  double h;
  double width;
  double dis;
};

// Samples h at rows+1 even subdivisions of (0, W/pi), symmetric about the
// equator and hitting it exactly when rows is odd.
inline std::vector<DistortionRow> distortion_report(double width, int n, int n_prime, int rows) {
  if (rows < 2) throw std::domain_error("distortion_report: rows must be >= 2");
  std::vector<DistortionRow> table;
  table.reserve(rows);
  const double extent = width / kPi;
  for (int i = 0; i < rows; ++i) {
    ErpSpec spec{width, n, n_prime, extent * (i + 1) / (rows + 1)};
    table.push_back({spec.axial_height, pixel_width(spec), distortion_coefficient(spec)});
  }
  return table;
}

inline std::string distortion_report_csv(const std::vector<DistortionRow>& table) {
  std::string out = "h,width,dis\n";
  char buf[128];
  for (const auto& row : table) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", row.h, row.width, row.dis);
    out += buf;
  }
  return out;
}

}  // namespace datr::erpgeo
