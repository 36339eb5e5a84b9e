#pragma once
// Full-detector assembly: every stage's parameters under one roof, a named
// parameter registry for checkpoints and optimizers, the per-scene training
// step, and inference.

#include <cstdint>
#include <optional>
#include <vector>

#include "pointforge/cmff.hpp"
#include "pointforge/config.hpp"
#include "pointforge/dataset.hpp"
#include "pointforge/densify.hpp"
#include "pointforge/head.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/rpg.hpp"
#include "pointforge/rpn.hpp"
#include "pointforge/spe.hpp"

namespace pointforge::model {

struct Detector {
  cfg::RunConfig rc;
  std::vector<rpn::Anchor> anchors;

  nn::MlpSpec spe_spec;  // [point features + image channels] -> spe_channels
  nn::MlpParams spe;
  nn::MlpSpec bev_spec;  // [3 + spe_channels] -> bev_channels
  nn::MlpParams bev;
  rpn::RpnHeads rpn_heads;
  nn::MlpSpec pool_spec;  // [3 + spe_channels] -> fused pooling width
  nn::MlpParams pool;
  nn::MlpSpec roib_spec;  // flattened RoI-aligned image patch -> box feature
  nn::MlpParams roib;
  nn::MlpSpec fuse_spec;  // [pool + image + box widths] -> fused_channels
  nn::MlpParams fuse;
  nn::MlpSpec pe_spec;    // 27 -> fused_channels
  nn::MlpParams pe;
  rpg::RefinerSpec refiner_spec;
  rpg::RefinerParams refiner;
  rpg::PointHeads point_heads;
  nn::MlpSpec spe_post_spec;  // [generated + image channels] -> spe_channels
  nn::MlpParams spe_post;
  nn::MlpSpec canon_spec;  // 5 -> canonical feature width
  nn::MlpParams canon;
  head::SetEncoder set_enc;
  head::RefineHeads refine_heads;

  // Stable names ("spe.w0", "refiner.0.wq", ...); tensors share storage with
  // the detector, so checkpoint loads and optimizer steps mutate it directly.
  nn::NamedParams named_params() const;
  std::vector<ad::Tensor> parameters() const;
};

Detector detector_init(const cfg::RunConfig& rc, std::uint64_t seed);

// One RoI's second-stage outputs.
struct RoiResult {
  rpn::Proposal proposal;
  rpg::GeneratedPoints generated;
  head::Refinement refinement;
  std::optional<geom::Box3D> matched_gt;  // best same-class 3D-IoU ground truth
  int matched_index = -1;                 // row into the scene's gt list
};

// Shared first stage: decorated points -> voxel means -> BEV -> proposals.
struct StageOneResult {
  pc::VoxelGrid grid;
  ad::Tensor voxel_features;
  rpn::RpnOutput rpn_out;
  std::vector<rpn::Proposal> proposals;  // after NMS
};

StageOneResult forward_stage_one(const Detector& det, const data::SceneSample& scene,
                                 int max_proposals);

// Second stage over one RoI (grid fusion, point generation, refinement).
RoiResult forward_roi(const Detector& det, const data::SceneSample& scene,
                      const StageOneResult& s1, const rpn::Proposal& proposal);

struct LossBreakdown {
  double rpn_cls = 0, rpn_reg = 0;
  double rcnn_conf = 0, rcnn_reg = 0;
  double rpg_offset = 0, rpg_score = 0;
  double total = 0;
  int proposals = 0, positive_anchors = 0;
};

// Full forward + backward + Adam update on one scene. Ground-truth boxes are
// appended as extra RoIs when the config asks for it; `templates` supervise
// the offset loss via track-id lookup (scaled to each matched box's dims).
// `step_seed` drives the score loss's point sampling.
LossBreakdown train_step(Detector& det, const data::SceneSample& scene,
                         const std::vector<densify::DenseObjectTemplate>& templates,
                         nn::AdamState& opt, std::vector<ad::Tensor>& params,
                         std::uint64_t step_seed);

// As train_step, but accumulates gradients over several scenes before the
// single Adam update (losses are averaged). Reported losses are the batch
// means; counts are batch sums.
LossBreakdown train_step_batch(Detector& det,
                               const std::vector<const data::SceneSample*>& batch,
                               const std::vector<densify::DenseObjectTemplate>& templates,
                               nn::AdamState& opt, std::vector<ad::Tensor>& params,
                               std::uint64_t step_seed);

// Loss evaluation without the optimizer step (same code path).
LossBreakdown compute_losses(const Detector& det, const data::SceneSample& scene,
                             const std::vector<densify::DenseObjectTemplate>& templates,
                             std::uint64_t step_seed, ad::Tensor* total_out = nullptr);

struct InferenceResult {
  std::vector<head::Detection> detections;       // confidence-thresholded, NMS'd
  std::vector<rpg::GptsRoi> roi_points;          // aligned with detections
};

InferenceResult infer_scene(const Detector& det, const data::SceneSample& scene);

}  // namespace pointforge::model
