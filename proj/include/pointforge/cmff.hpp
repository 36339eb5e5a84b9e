#pragma once

#include <vector>

#include "pointforge/feature_map.hpp"
#include "pointforge/geometry.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/tensor.hpp"

// Cross-modal fusion over RoI grid points: voxel-neighborhood pooling, image
// sampling per grid point, an RoI-level image vector, and the final
// concatenate-and-mix step.
namespace pointforge::cmff {

// Centers of the G^3 equal subvoxels of the oriented box, in the LiDAR frame.
// Index layout: ((ix*G)+iy)*G+iz over the box's length/width/height axes.
std::vector<geom::Vec3> make_grid_points(const geom::Box3D& box, int G);

// Half of one subvoxel's diagonal — the neighborhood radius that just covers
// the gap between adjacent grid points.
double default_pool_radius(const geom::Box3D& box, int G);

// Per query point: up to K occupied voxels within radius (nearest first,
// ties to the lower voxel row), each embedded as MLP([voxel mean - point;
// voxel features]) and channel max-pooled. Empty neighborhoods give zeros.
ad::Tensor pool_voxel_features(const pc::VoxelGrid& grid, const ad::Tensor& voxel_features,
                               const std::vector<geom::Vec3>& points, double radius, int K,
                               const nn::MlpSpec& mlp_spec, const nn::MlpParams& mlp);

// Project each point and bilinearly sample the map; zeros when out of view.
ad::Tensor grid_image_features(const std::vector<geom::Vec3>& points, const img::FeatureMap& fm,
                               const geom::CameraCalibration& calib,
                               std::vector<bool>* in_view = nullptr);

// Project the box corners, enlarge the bounding rectangle, RoI-Align S x S
// bins, flatten, and reduce through the MLP: one [1, Cb] row. A box with no
// corner in front of the camera gives zeros.
ad::Tensor roi_image_feature(const geom::Box3D& box, const img::FeatureMap& fm,
                             const geom::CameraCalibration& calib, double enlarge_factor, int S,
                             int samples_per_bin, const nn::MlpSpec& mlp_spec,
                             const nn::MlpParams& mlp);

// Row-wise MLP([f_v; f_i; f_b]) with the RoI vector broadcast to every grid
// point.
ad::Tensor fuse(const ad::Tensor& fv, const ad::Tensor& fi, const ad::Tensor& fb,
                const nn::MlpSpec& mlp_spec, const nn::MlpParams& mlp);

}  // namespace pointforge::cmff
