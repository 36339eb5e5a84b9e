#pragma once

#include <vector>

#include "pointforge/feature_map.hpp"
#include "pointforge/geometry.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/tensor.hpp"

// Semantic points encoding: decorate 3D points with bilinearly sampled image
// features and reduce channels through an MLP. Used once on the raw cloud
// (before voxelization) and once more on generated points.
namespace pointforge::spe {

struct DecoratedPoints {
  std::vector<geom::Vec3> coords;
  ad::Tensor features;        // [N, Fd]
  std::vector<bool> in_view;  // false rows carried zero image contribution
};

// Projects every point, samples the map (zeros when out of view), and feeds
// [point features; image features] through the reducer. Differentiable into
// fm.data and the reducer parameters.
DecoratedPoints decorate(const pc::PointCloud& cloud, const img::FeatureMap& fm,
                         const geom::CameraCalibration& calib, const nn::MlpSpec& reducer_spec,
                         const nn::MlpParams& reducer);

// Same sampling path for generated points: returns per-point image features
// from the reducer applied to [semantic features; sampled image features].
// Differentiable through the point coordinates.
ad::Tensor decorate_generated(const ad::Tensor& coords, const ad::Tensor& semantic,
                              const img::FeatureMap& fm, const geom::CameraCalibration& calib,
                              const nn::MlpSpec& reducer_spec, const nn::MlpParams& reducer,
                              std::vector<bool>* in_view = nullptr);

}  // namespace pointforge::spe
