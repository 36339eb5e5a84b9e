#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/tensor.hpp"

// RoI point generation: box-relative positional codes, transformer refinement
// of fused grid features, offset/feature/score heads, and the Chamfer + focal
// losses that supervise the generated points.
namespace pointforge::rpg {

// Concatenates [g - center; g - corner_1; ...; g - corner_8] (width 27) per
// grid point and applies the FFN: [G^3, d].
ad::Tensor positional_encoding(const geom::Box3D& box, const std::vector<geom::Vec3>& grid_points,
                               const nn::MlpSpec& ffn_spec, const nn::MlpParams& ffn);

struct RefinerSpec {
  nn::TransformerLayerSpec layer;
  int layers = 2;
};

struct RefinerParams {
  std::vector<nn::TransformerLayerParams> layers;
};

RefinerParams refiner_init(const RefinerSpec& spec, std::uint64_t seed, bool requires_grad = true);

// Adds the positional code before every attention block:
// x <- layer(x + delta), repeated.
ad::Tensor refine(const RefinerSpec& spec, const RefinerParams& params, const ad::Tensor& fused,
                  const ad::Tensor& delta);

struct PointHeads {
  nn::MlpSpec point_spec;  // d -> 3 + Cs, rows [offset; semantic features]
  nn::MlpParams point;
  nn::MlpSpec score_spec;  // Cs -> 1
  nn::MlpParams score;
};

PointHeads point_heads_init(int d, int cs, std::uint64_t seed, bool requires_grad = true);

struct GeneratedPoints {
  std::vector<geom::Vec3> grid;  // source grid points g_i
  ad::Tensor offsets;            // [G^3, 3]
  ad::Tensor coords;             // [G^3, 3] = grid + offsets
  ad::Tensor features;           // [G^3, Cs]
  ad::Tensor scores;             // [G^3, 1], sigmoid clamped to (1e-7, 1-1e-7)

  int size() const { return static_cast<int>(grid.size()); }
  std::vector<geom::Vec3> coord_values() const;
};

GeneratedPoints generate(const std::vector<geom::Vec3>& grid_points, const ad::Tensor& refined,
                         const PointHeads& heads);

struct OffsetLossResult {
  ad::Tensor loss;        // scalar; zero when nothing contributed
  int skipped_empty = 0;  // positives dropped for having no template points
  bool had_positives = false;
};

// Mean Chamfer distance between each positive RoI's generated coords and its
// dense template (already posed in the LiDAR frame).
OffsetLossResult loss_offset(const std::vector<GeneratedPoints>& generated,
                             const std::vector<std::vector<geom::Vec3>>& templates);

// Farthest-point-samples up to n_samples points per RoI (seeded start pick),
// labels each 1/0 by containment in the RoI's matched ground-truth box (no
// match = all zero), and averages the focal terms over every sampled point.
ad::Tensor loss_score(const std::vector<GeneratedPoints>& generated,
                      const std::vector<std::optional<geom::Box3D>>& matched_gt, double gamma,
                      int n_samples, std::uint64_t seed);

ad::Tensor rpg_loss(const OffsetLossResult& offset, const ad::Tensor& score);

// Dump format for generated points: per RoI, box as 7 f32
// (cx,cy,cz,l,w,h,yaw), point count u32, then (x,y,z,score) f32 rows.
struct GptsRoi {
  geom::Box3D box;
  std::vector<std::array<float, 4>> points;
};

GptsRoi make_gpts_roi(const geom::Box3D& box, const GeneratedPoints& gen);
void save_gpts(const std::string& path, const std::vector<GptsRoi>& rois);
std::vector<GptsRoi> load_gpts(const std::string& path);

}  // namespace pointforge::rpg
