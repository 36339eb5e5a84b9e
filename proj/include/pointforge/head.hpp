#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/nn.hpp"
#include "pointforge/rpn.hpp"
#include "pointforge/tensor.hpp"

// Second-stage detection head: canonical per-point features, an
// order-invariant RoI set encoder, box refinement + confidence, their loss,
// and the detections text format.
namespace pointforge::head {

// Per point: [canonical coords w.r.t. the proposal box, pre-canonical range
// ||p||, score] (5 wide) through the MLP. Differentiable in coords/scores.
ad::Tensor canonical_features(const geom::Box3D& box, const ad::Tensor& coords,
                              const ad::Tensor& scores, const nn::MlpSpec& mlp_spec,
                              const nn::MlpParams& mlp);

struct SetEncoder {
  nn::MlpSpec point_spec;  // per-point MLP over the concatenated features
  nn::MlpParams point;
  nn::MlpSpec out_spec;    // applied after the channel max-pool
  nn::MlpParams out;
};

SetEncoder set_encoder_init(int in_width, int mid_width, int out_width, std::uint64_t seed,
                            bool requires_grad = true);

// [p_i; f_c; f_s; f_i] per point -> per-point MLP -> max-pool -> MLP: [1, out].
// Exactly invariant to the ordering of the points.
ad::Tensor encode_roi(const ad::Tensor& coords, const ad::Tensor& fc, const ad::Tensor& fs,
                      const ad::Tensor& fi, const SetEncoder& enc);

struct RefineHeads {
  nn::MlpSpec box_spec;  // f_roi -> 7 residuals
  nn::MlpParams box;
  nn::MlpSpec conf_spec;  // f_roi -> 1 confidence logit
  nn::MlpParams conf;
};

RefineHeads refine_heads_init(int in_width, std::uint64_t seed, bool requires_grad = true);

struct Refinement {
  ad::Tensor residual;    // [1,7], same encoding as the proposal stage
  ad::Tensor confidence;  // [1,1], sigmoid
};

Refinement refine_and_score(const ad::Tensor& f_roi, const RefineHeads& heads);

struct Detection {
  geom::Box3D box;
  int class_id = 0;
  double confidence = 0.0;
};

// Value-level decode of the residual against the proposal box.
Detection apply_refinement(const rpn::Proposal& proposal, const Refinement& r);

struct RcnnLossTerms {
  ad::Tensor conf;  // BCE against clip(2*(iou3d - 0.25), 0, 1)
  ad::Tensor reg;   // smooth-L1 residual error on proposals with iou3d >= pos_iou
  ad::Tensor total;
};

RcnnLossTerms rcnn_loss(const std::vector<Refinement>& refinements,
                        const std::vector<rpn::Proposal>& proposals,
                        const std::vector<std::optional<geom::Box3D>>& matched_gt, double pos_iou,
                        double beta);

ad::Tensor total_loss(const ad::Tensor& rpn, const ad::Tensor& rcnn, const ad::Tensor& rpg);

// Detections text format: a header line, then one line per detection —
// frame id, class name, cx cy cz l w h yaw, confidence (6 decimals).
struct DetectionRecord {
  int frame_id = 0;
  std::string class_name;
  geom::Box3D box;
  double confidence = 0.0;
};

void save_detections(const std::string& path, const std::vector<DetectionRecord>& dets);
std::vector<DetectionRecord> load_detections(const std::string& path);

}  // namespace pointforge::head
