#pragma once

#include <array>
#include <string>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/tensor.hpp"

// Image feature maps plus the differentiable sampling ops built on them:
// bilinear interpolation, projection-composed point sampling, and RoI Align.
namespace pointforge::img {

struct FeatureMap {
  int C = 0, H = 0, W = 0;
  double stride = 1.0;   // image pixels per feature cell
  ad::Tensor data;       // [C, H*W], row-major per channel

  double at(int c, int y, int x) const { return data.at(c, y * W + x); }
  double image_width() const { return W * stride; }
  double image_height() const { return H * stride; }
};

FeatureMap make_feature_map(int C, int H, int W, double stride, std::vector<double> data,
                            bool requires_grad = false);

// Non-differentiable single sample at image pixel coords (u,v). Sampling
// happens in feature cells (u/stride, v/stride); integer cell coordinates hit
// stored values exactly. Out-of-bounds returns zeros and clears *in_bounds.
std::vector<double> bilinear_sample(const FeatureMap& fm, double u, double v,
                                    bool* in_bounds = nullptr);

// Differentiable batch sample at fixed pixel coords; out [N, C]. Gradients
// flow to fm.data. Out-of-bounds rows are zero.
ad::Tensor sample_rows(const FeatureMap& fm, const std::vector<std::array<double, 2>>& uv,
                       std::vector<bool>* in_bounds = nullptr);

// Projects LiDAR-frame points through calib and samples; gradients flow to
// fm.data and to the point coordinates (the projection is differentiated
// analytically). Behind-camera or out-of-bounds rows are zero with no
// coordinate gradient.
ad::Tensor sample_at_points(const geom::CameraCalibration& calib, const FeatureMap& fm,
                            const ad::Tensor& points, std::vector<bool>* in_bounds = nullptr);

// S x S bins over the box, samples_per_bin^2 regular sub-samples per bin,
// averaged. Out rows are bins in (row, col) order: [S*S, C]. A zero-area box
// collapses every sample onto the single point.
ad::Tensor roi_align(const FeatureMap& fm, const geom::Box2D& box, int S, int samples_per_bin);

void save_fmap(const std::string& path, const FeatureMap& fm);
FeatureMap load_fmap(const std::string& path, bool requires_grad = false);

}  // namespace pointforge::img
