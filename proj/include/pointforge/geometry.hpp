#pragma once

#include <array>
#include <vector>

// Calibration, projection, oriented boxes, IoU, and canonical transforms.
// Everything here is pure and operates on plain doubles; the differentiable
// image-sampling ops live in feature_map.hpp.
namespace pointforge::geom {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a.x, s * a.y, s * a.z}; }

struct Mat3 {
  // row-major
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
};

Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_transpose(const Mat3& a);
bool mat3_orthonormal(const Mat3& a, double tol);
Mat3 rot_z(double angle);

struct Mat34 {
  // row-major 3x4: [R | t]
  std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  Mat3 rotation() const;
  Vec3 translation() const { return {m[3], m[7], m[11]}; }
  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z + m[3],
            m[4] * v.x + m[5] * v.y + m[6] * v.z + m[7],
            m[8] * v.x + m[9] * v.y + m[10] * v.z + m[11]};
  }
};

// KITTI-style camera model: P projects rectified-camera points to pixels,
// R0 rectifies, Tr maps LiDAR to camera.
struct CameraCalibration {
  Mat34 P;
  Mat3 R0;
  Mat34 Tr;
};

// Throws if a rotation block is not orthonormal within tol.
void validate_calibration(const CameraCalibration& calib, double tol = 1e-6);

// Rigid inverse of [R|t]: [R^T | -R^T t].
Mat34 rigid_inverse(const Mat34& rt);

struct ProjectedPoint {
  double u = 0, v = 0;
  double depth = 0;      // camera-frame forward coordinate
  bool in_view = false;  // depth > 0
};

ProjectedPoint project_point(const CameraCalibration& calib, const Vec3& p);
std::vector<ProjectedPoint> project_points(const CameraCalibration& calib,
                                           const std::vector<Vec3>& points);

// yaw about +z, normalized to (-pi, pi]
double wrap_angle(double theta);

struct Box3D {
  Vec3 center;                     // geometric center, LiDAR frame
  double l = 0, w = 0, h = 0;      // extent along the box x/y/z axes
  double yaw = 0;                  // rotation about vertical
};

Box3D make_box3d(Vec3 center, double l, double w, double h, double yaw);
bool box3d_valid(const Box3D& b);

// Corner ordering: index bit pattern (zyx) over the signed half extents,
//   0:(+l,+w,-h) 1:(-l,+w,-h) 2:(-l,-w,-h) 3:(+l,-w,-h)   bottom face, CCW
//   4:(+l,+w,+h) 5:(-l,+w,+h) 6:(-l,-w,+h) 7:(+l,-w,+h)   top face, CCW
std::array<Vec3, 8> box3d_corners(const Box3D& box);

struct Box2D {
  double u_min = 0, v_min = 0, u_max = 0, v_max = 0;
  double width() const { return u_max - u_min; }
  double height() const { return v_max - v_min; }
  double area() const { return width() * height(); }
};

struct Box2DResult {
  Box2D box;
  bool visible = false;  // at least one corner in front of the camera
};

Box2DResult corners_to_box2d(const CameraCalibration& calib, const Box3D& box);

// Scales about the box center, then clamps to [0,W]x[0,H].
Box2D enlarge_box2d(const Box2D& b, double factor, double image_w, double image_h);

// Rotated-rectangle overlap in the ground plane (Sutherland-Hodgman clip).
double intersection_area_bev(const Box3D& a, const Box3D& b);
double iou_bev(const Box3D& a, const Box3D& b);
// BEV intersection x vertical overlap over volume union.
double iou_3d(const Box3D& a, const Box3D& b);

// p^c = R_z(-yaw) (p - center); inverse composes back to the input.
Vec3 canonical_transform(const Box3D& box, const Vec3& p);
Vec3 canonical_inverse(const Box3D& box, const Vec3& p_canonical);
std::vector<Vec3> canonical_transform(const Box3D& box, const std::vector<Vec3>& points);
std::vector<Vec3> canonical_inverse(const Box3D& box, const std::vector<Vec3>& points);

}  // namespace pointforge::geom
