#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/tensor.hpp"

// First-stage proposal machinery: pillar-style BEV encoding, anchor grids,
// target assignment with residual encoding, per-anchor heads, NMS, and the
// focal + smooth-L1 proposal loss.
namespace pointforge::rpn {

struct BevGrid {
  pc::RangeSpec range;
  double cell_size = 0.0;
  int nx = 0, ny = 0;   // cells along x / y
  int channels = 0;
  ad::Tensor features;  // [nx*ny, channels]; cell (ix,iy) sits at row ix*ny+iy

  int cell_row(int ix, int iy) const { return ix * ny + iy; }
  geom::Vec3 cell_center(int ix, int iy) const;
};

// Cell counts covering [min, max) per axis (ceiling).
std::pair<int, int> bev_dims(const pc::RangeSpec& range, double cell_size);

// Per cell, max-pools the MLP of [voxel coords relative to the cell center;
// voxel features] over the voxels whose mean falls in that cell. Empty cells
// are zero. voxel_features rows align with grid.voxels.
BevGrid encode_bev(const pc::VoxelGrid& grid, const ad::Tensor& voxel_features,
                   const pc::RangeSpec& range, double cell_size, const nn::MlpSpec& mlp_spec,
                   const nn::MlpParams& mlp);

struct AnchorSpec {
  std::string name;
  double l = 0.0, w = 0.0, h = 0.0;
  double z_center = 0.0;
};

struct Anchor {
  geom::Box3D box;
  int class_id = 0;
};

// One anchor per (cell, class, yaw in {0, pi/2}); cell-major (row ix*ny+iy),
// then class, then yaw — the same flattening the heads produce.
std::vector<Anchor> make_anchors(const pc::RangeSpec& range, double cell_size,
                                 const std::vector<AnchorSpec>& classes);

struct GtBox {
  geom::Box3D box;
  int class_id = 0;
};

// (dx/d_a, dy/d_a, dz/h_a, log l/l_a, log w/w_a, log h/h_a, dtheta) with
// d_a = sqrt(l_a^2 + w_a^2); dtheta wrapped to (-pi, pi].
std::array<double, 7> encode_residual(const geom::Box3D& gt, const geom::Box3D& anchor);
geom::Box3D decode_residual(const geom::Box3D& anchor, const std::array<double, 7>& r);

struct AnchorTargets {
  std::vector<int> labels;      // 1 positive, 0 negative, -1 ignored
  std::vector<int> matched_gt;  // row into the gt list, -1 when unmatched
  std::vector<std::array<double, 7>> residuals;  // meaningful on positives

  int positive_count() const;
};

// BEV-IoU matching against same-class ground truth: positive at iou >= pos_iou
// or as the best anchor for a ground-truth box (when overlap exists), negative
// below neg_iou, ignored in between.
AnchorTargets assign_targets(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts,
                             double pos_iou, double neg_iou);

struct RpnHeads {
  nn::MlpSpec cls_spec, reg_spec;
  nn::MlpParams cls, reg;
};

// Per-cell heads over BEV channels; cls emits 2*num_classes logits per cell,
// reg emits 7 residuals per anchor. hidden > 0 inserts one ReLU layer.
RpnHeads rpn_heads_init(int bev_channels, int num_classes, std::uint64_t seed,
                        bool requires_grad = true, int hidden = 0);

struct RpnOutput {
  ad::Tensor scores;     // [A,1], sigmoid
  ad::Tensor residuals;  // [A,7]
};

RpnOutput rpn_forward(const BevGrid& bev, int num_classes, const RpnHeads& heads);

// Value-level decode of every anchor (no gradient path).
std::vector<geom::Box3D> decode_boxes(const std::vector<Anchor>& anchors,
                                      const ad::Tensor& residuals);

struct Proposal {
  geom::Box3D box;
  int class_id = 0;
  double score = 0.0;
  int source_index = 0;  // anchor row the proposal came from
};

std::vector<Proposal> make_proposals(const std::vector<Anchor>& anchors, const RpnOutput& out);

// Greedy BEV NMS: descending score (ties broken by source order), drops any
// box overlapping a kept one above iou_thresh, stops at max_keep.
std::vector<Proposal> nms_bev(const std::vector<Proposal>& proposals, double iou_thresh,
                              int max_keep);

struct RpnLossTerms {
  ad::Tensor cls;    // focal sum over labeled anchors / max(1, positives)
  ad::Tensor reg;    // smooth-L1 mean over positive residual entries
  ad::Tensor total;
};

RpnLossTerms rpn_loss(const RpnOutput& out, const AnchorTargets& targets, double gamma,
                      double beta);

}  // namespace pointforge::rpn
