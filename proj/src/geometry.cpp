#include "pointforge/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pointforge::geom {

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a.m[i * 3 + k] * b.m[k * 3 + j];
      out.m[i * 3 + j] = acc;
    }
  return out;
}

Mat3 mat3_transpose(const Mat3& a) {
  Mat3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.m[i * 3 + j] = a.m[j * 3 + i];
  return out;
}

bool mat3_orthonormal(const Mat3& a, double tol) {
  const Mat3 prod = mat3_mul(a, mat3_transpose(a));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double expect = i == j ? 1.0 : 0.0;
      if (std::abs(prod.m[i * 3 + j] - expect) > tol) return false;
    }
  return true;
}

Mat3 rot_z(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Mat3 r;
  r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  return r;
}

Mat3 Mat34::rotation() const {
  Mat3 r;
  r.m = {m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]};
  return r;
}

void validate_calibration(const CameraCalibration& calib, double tol) {
  if (!mat3_orthonormal(calib.R0, tol))
    throw std::invalid_argument("calibration: rectification matrix is not orthonormal");
  if (!mat3_orthonormal(calib.Tr.rotation(), tol))
    throw std::invalid_argument("calibration: LiDAR-to-camera rotation is not orthonormal");
}

Mat34 rigid_inverse(const Mat34& rt) {
  const Mat3 rinv = mat3_transpose(rt.rotation());
  const Vec3 t = rt.translation();
  const Vec3 ti = rinv.apply({-t.x, -t.y, -t.z});
  Mat34 out;
  out.m = {rinv.m[0], rinv.m[1], rinv.m[2], ti.x, rinv.m[3], rinv.m[4],
           rinv.m[5], ti.y,      rinv.m[6], rinv.m[7], rinv.m[8], ti.z};
  return out;
}

ProjectedPoint project_point(const CameraCalibration& calib, const Vec3& p) {
  const Vec3 cam = calib.R0.apply(calib.Tr.apply(p));
  const Vec3 hom = calib.P.apply(cam);
  ProjectedPoint out;
  out.depth = cam.z;
  out.in_view = cam.z > 0.0;
  if (hom.z != 0.0) {
    out.u = hom.x / hom.z;
    out.v = hom.y / hom.z;
  }
  return out;
}

std::vector<ProjectedPoint> project_points(const CameraCalibration& calib,
                                           const std::vector<Vec3>& points) {
  std::vector<ProjectedPoint> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(project_point(calib, p));
  return out;
}

double wrap_angle(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double t = std::fmod(theta + std::numbers::pi, two_pi);
  if (t <= 0.0) t += two_pi;
  return t - std::numbers::pi;
}

Box3D make_box3d(Vec3 center, double l, double w, double h, double yaw) {
  Box3D b;
  b.center = center;
  b.l = l;
  b.w = w;
  b.h = h;
  b.yaw = wrap_angle(yaw);
  if (!box3d_valid(b)) throw std::invalid_argument("box3d: extents must be positive");
  return b;
}

bool box3d_valid(const Box3D& b) {
  return b.l > 0 && b.w > 0 && b.h > 0 && std::isfinite(b.center.x) &&
         std::isfinite(b.center.y) && std::isfinite(b.center.z) && std::isfinite(b.yaw);
}

std::array<Vec3, 8> box3d_corners(const Box3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  // bottom face CCW, then top face CCW (see header for the index map)
  const double sx[8] = {+1, -1, -1, +1, +1, -1, -1, +1};
  const double sy[8] = {+1, +1, -1, -1, +1, +1, -1, -1};
  const double sz[8] = {-1, -1, -1, -1, +1, +1, +1, +1};
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    const double lx = sx[i] * box.l / 2, ly = sy[i] * box.w / 2, lz = sz[i] * box.h / 2;
    out[i] = {box.center.x + c * lx - s * ly, box.center.y + s * lx + c * ly,
              box.center.z + lz};
  }
  return out;
}

Box2DResult corners_to_box2d(const CameraCalibration& calib, const Box3D& box) {
  Box2DResult res;
  bool first = true;
  for (const Vec3& corner : box3d_corners(box)) {
    const ProjectedPoint p = project_point(calib, corner);
    if (!p.in_view) continue;
    if (first) {
      res.box = {p.u, p.v, p.u, p.v};
      first = false;
    } else {
      res.box.u_min = std::min(res.box.u_min, p.u);
      res.box.v_min = std::min(res.box.v_min, p.v);
      res.box.u_max = std::max(res.box.u_max, p.u);
      res.box.v_max = std::max(res.box.v_max, p.v);
    }
  }
  res.visible = !first;
  return res;
}

Box2D enlarge_box2d(const Box2D& b, double factor, double image_w, double image_h) {
  if (factor < 1.0) throw std::invalid_argument("enlarge_box2d: factor must be >= 1");
  const double cu = (b.u_min + b.u_max) / 2, cv = (b.v_min + b.v_max) / 2;
  const double hw = (b.u_max - b.u_min) / 2 * factor, hh = (b.v_max - b.v_min) / 2 * factor;
  Box2D out;
  out.u_min = std::clamp(cu - hw, 0.0, image_w);
  out.u_max = std::clamp(cu + hw, 0.0, image_w);
  out.v_min = std::clamp(cv - hh, 0.0, image_h);
  out.v_max = std::clamp(cv + hh, 0.0, image_h);
  return out;
}

// ------------------------------------------------------------- rotated IoU

namespace {

struct P2 {
  double x, y;
};

// CCW ground-plane footprint
std::array<P2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double sx[4] = {+1, -1, -1, +1};
  const double sy[4] = {+1, +1, -1, -1};
  std::array<P2, 4> out;
  for (int i = 0; i < 4; ++i) {
    const double lx = sx[i] * b.l / 2, ly = sy[i] * b.w / 2;
    out[i] = {b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly};
  }
  return out;
}

double polygon_area(const std::vector<P2>& poly) {
  double a = 0;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const P2& p = poly[i];
    const P2& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return std::abs(a) / 2;
}

// Sutherland-Hodgman: clip subject polygon by the half-plane left of a->b.
std::vector<P2> clip_half_plane(const std::vector<P2>& subject, const P2& a, const P2& b) {
  std::vector<P2> out;
  const size_t n = subject.size();
  auto side = [&](const P2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  for (size_t i = 0; i < n; ++i) {
    const P2& cur = subject[i];
    const P2& nxt = subject[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc >= 0) != (sn >= 0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

}  // namespace

double intersection_area_bev(const Box3D& a, const Box3D& b) {
  // Boxes whose centers are farther apart than the sum of their half
  // diagonals cannot overlap; skip the polygon clip.
  const double dx = a.center.x - b.center.x, dy = a.center.y - b.center.y;
  const double ra = 0.5 * std::hypot(a.l, a.w) + 0.5 * std::hypot(b.l, b.w);
  if (dx * dx + dy * dy > ra * ra) return 0.0;
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  std::vector<P2> poly(ca.begin(), ca.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e)
    poly = clip_half_plane(poly, cb[e], cb[(e + 1) % 4]);
  if (poly.size() < 3) return 0.0;
  return polygon_area(poly);
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = intersection_area_bev(a, b);
  const double area_a = a.l * a.w, area_b = b.l * b.w;
  const double uni = area_a + area_b - inter;
  return uni <= 0 ? 0.0 : std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double inter_bev = intersection_area_bev(a, b);
  const double z_lo = std::max(a.center.z - a.h / 2, b.center.z - b.h / 2);
  const double z_hi = std::min(a.center.z + a.h / 2, b.center.z + b.h / 2);
  const double dz = std::max(0.0, z_hi - z_lo);
  const double inter = inter_bev * dz;
  const double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  return uni <= 0 ? 0.0 : std::clamp(inter / uni, 0.0, 1.0);
}

// ------------------------------------------------------- canonical frames

Vec3 canonical_transform(const Box3D& box, const Vec3& p) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const Vec3 d = p - box.center;
  return {c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
}

Vec3 canonical_inverse(const Box3D& box, const Vec3& pc) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return {box.center.x + c * pc.x - s * pc.y, box.center.y + s * pc.x + c * pc.y,
          box.center.z + pc.z};
}

std::vector<Vec3> canonical_transform(const Box3D& box, const std::vector<Vec3>& points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(canonical_transform(box, p));
  return out;
}

std::vector<Vec3> canonical_inverse(const Box3D& box, const std::vector<Vec3>& points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(canonical_inverse(box, p));
  return out;
}

}  // namespace pointforge::geom
