#include "pointforge/spe.hpp"

#include <stdexcept>
#include <utility>

namespace pointforge::spe {

namespace {

// [semantic; sampled image features] -> reducer
ad::Tensor reduce_with_samples(const ad::Tensor& semantic, const ad::Tensor& sampled,
                               const nn::MlpSpec& reducer_spec, const nn::MlpParams& reducer) {
  if (reducer_spec.in_width() != semantic.cols() + sampled.cols())
    throw std::invalid_argument("spe: reducer input width must equal point width + map channels");
  std::vector<ad::Tensor> parts{semantic, sampled};
  return nn::mlp_forward(reducer_spec, reducer, ad::concat_cols(parts));
}

}  // namespace

DecoratedPoints decorate(const pc::PointCloud& cloud, const img::FeatureMap& fm,
                         const geom::CameraCalibration& calib, const nn::MlpSpec& reducer_spec,
                         const nn::MlpParams& reducer) {
  geom::validate_calibration(calib);
  pc::validate_cloud(cloud);
  const int n = cloud.size();

  // Raw input points are not optimized, so coordinates enter as constants.
  std::vector<double> xyz(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i) {
    xyz[3 * i + 0] = cloud.coords[i].x;
    xyz[3 * i + 1] = cloud.coords[i].y;
    xyz[3 * i + 2] = cloud.coords[i].z;
  }
  ad::Tensor coords = ad::Tensor::matrix(n, 3, std::move(xyz));
  ad::Tensor point_feats = ad::Tensor::matrix(n, cloud.feature_width, cloud.features);

  DecoratedPoints out;
  out.coords = cloud.coords;
  ad::Tensor sampled = img::sample_at_points(calib, fm, coords, &out.in_view);
  out.features = reduce_with_samples(point_feats, sampled, reducer_spec, reducer);
  return out;
}

ad::Tensor decorate_generated(const ad::Tensor& coords, const ad::Tensor& semantic,
                              const img::FeatureMap& fm, const geom::CameraCalibration& calib,
                              const nn::MlpSpec& reducer_spec, const nn::MlpParams& reducer,
                              std::vector<bool>* in_view) {
  geom::validate_calibration(calib);
  if (coords.ndim() != 2 || coords.cols() != 3)
    throw std::invalid_argument("spe: coords must be [N,3]");
  if (semantic.ndim() != 2 || semantic.rows() != coords.rows())
    throw std::invalid_argument("spe: semantic rows must match coords");
  std::vector<bool> mask;
  ad::Tensor sampled = img::sample_at_points(calib, fm, coords, &mask);
  if (in_view) *in_view = std::move(mask);
  return reduce_with_samples(semantic, sampled, reducer_spec, reducer);
}

}  // namespace pointforge::spe
