#include "pointforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pointforge::model {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("model: " + msg); }

void append_mlp(nn::NamedParams& out, const std::string& prefix, const nn::MlpParams& mlp) {
  for (size_t i = 0; i < mlp.weights.size(); ++i) {
    out.emplace_back(prefix + ".w" + std::to_string(i), mlp.weights[i]);
    out.emplace_back(prefix + ".b" + std::to_string(i), mlp.biases[i]);
  }
}

}  // namespace

nn::NamedParams Detector::named_params() const {
  nn::NamedParams out;
  append_mlp(out, "spe", spe);
  append_mlp(out, "bev", bev);
  append_mlp(out, "rpn.cls", rpn_heads.cls);
  append_mlp(out, "rpn.reg", rpn_heads.reg);
  append_mlp(out, "pool", pool);
  append_mlp(out, "roib", roib);
  append_mlp(out, "fuse", fuse);
  append_mlp(out, "pe", pe);
  for (size_t i = 0; i < refiner.layers.size(); ++i) {
    const std::string p = "refiner." + std::to_string(i);
    const nn::TransformerLayerParams& t = refiner.layers[i];
    out.emplace_back(p + ".wq", t.wq);
    out.emplace_back(p + ".bq", t.bq);
    out.emplace_back(p + ".wk", t.wk);
    out.emplace_back(p + ".bk", t.bk);
    out.emplace_back(p + ".wv", t.wv);
    out.emplace_back(p + ".bv", t.bv);
    out.emplace_back(p + ".wo", t.wo);
    out.emplace_back(p + ".bo", t.bo);
    out.emplace_back(p + ".norm1_gamma", t.norm1_gamma);
    out.emplace_back(p + ".norm1_beta", t.norm1_beta);
    out.emplace_back(p + ".norm2_gamma", t.norm2_gamma);
    out.emplace_back(p + ".norm2_beta", t.norm2_beta);
    out.emplace_back(p + ".ff1_w", t.ff1_w);
    out.emplace_back(p + ".ff1_b", t.ff1_b);
    out.emplace_back(p + ".ff2_w", t.ff2_w);
    out.emplace_back(p + ".ff2_b", t.ff2_b);
  }
  append_mlp(out, "point", point_heads.point);
  append_mlp(out, "score", point_heads.score);
  append_mlp(out, "spe_post", spe_post);
  append_mlp(out, "canon", canon);
  append_mlp(out, "set.point", set_enc.point);
  append_mlp(out, "set.out", set_enc.out);
  append_mlp(out, "refine.box", refine_heads.box);
  append_mlp(out, "refine.conf", refine_heads.conf);
  return out;
}

std::vector<ad::Tensor> Detector::parameters() const {
  std::vector<ad::Tensor> out;
  for (auto& [name, t] : named_params()) {
    (void)name;
    out.push_back(t);
  }
  return out;
}

Detector detector_init(const cfg::RunConfig& rc, std::uint64_t seed) {
  if (rc.anchors.size() != data::class_names().size())
    fail("detector_init: one anchor spec per class required");
  Detector d;
  d.rc = rc;
  d.anchors = rpn::make_anchors(rc.range, rc.bev_cell, rc.anchors);

  const int ci = rc.image_channels, cp = rc.spe_channels, cf = rc.fused_channels;
  d.spe_spec = nn::MlpSpec::make({1 + ci, cp, cp});
  d.spe = nn::mlp_init(d.spe_spec, seed + 1);
  d.bev_spec = nn::MlpSpec::make({3 + cp, rc.bev_channels, rc.bev_channels});
  d.bev = nn::mlp_init(d.bev_spec, seed + 2);
  d.rpn_heads = rpn::rpn_heads_init(rc.bev_channels, static_cast<int>(rc.anchors.size()),
                                    seed + 3, true, rc.rpn_hidden);
  d.pool_spec = nn::MlpSpec::make({3 + cp, cf, cf});
  d.pool = nn::mlp_init(d.pool_spec, seed + 4);
  d.roib_spec = nn::MlpSpec::make({rc.roi_bins * rc.roi_bins * ci, cf});
  d.roib = nn::mlp_init(d.roib_spec, seed + 5);
  d.fuse_spec = nn::MlpSpec::make({cf + ci + cf, cf});
  d.fuse = nn::mlp_init(d.fuse_spec, seed + 6);
  d.pe_spec = nn::MlpSpec::make({27, cf});
  d.pe = nn::mlp_init(d.pe_spec, seed + 7);
  d.refiner_spec.layer = {cf, rc.refiner_heads, rc.refiner_ff};
  d.refiner_spec.layers = rc.refiner_layers;
  d.refiner = rpg::refiner_init(d.refiner_spec, seed + 8);
  d.point_heads = rpg::point_heads_init(cf, rc.generated_channels, seed + 9);
  d.spe_post_spec = nn::MlpSpec::make({rc.generated_channels + ci, cp});
  d.spe_post = nn::mlp_init(d.spe_post_spec, seed + 10);
  d.canon_spec = nn::MlpSpec::make({5, cp});
  d.canon = nn::mlp_init(d.canon_spec, seed + 11);
  d.set_enc = head::set_encoder_init(3 + cp + rc.generated_channels + cp, rc.set_mid,
                                     rc.set_out, seed + 12);
  d.refine_heads = head::refine_heads_init(rc.set_out, seed + 13);
  return d;
}

StageOneResult forward_stage_one(const Detector& det, const data::SceneSample& scene,
                                 int max_proposals) {
  const cfg::RunConfig& rc = det.rc;
  if (scene.fmap.C != rc.image_channels)
    fail("forward_stage_one: feature map channels do not match the config");
  StageOneResult s1;
  const spe::DecoratedPoints dec =
      spe::decorate(scene.cloud, scene.fmap, scene.calib, det.spe_spec, det.spe);
  s1.grid = pc::voxelize(scene.cloud, rc.range, rc.voxel_size);
  std::vector<std::vector<int>> groups;
  groups.reserve(s1.grid.voxels.size());
  for (const pc::Voxel& v : s1.grid.voxels) groups.push_back(v.point_rows);
  s1.voxel_features = ad::group_mean_rows(dec.features, groups);
  const rpn::BevGrid bev =
      rpn::encode_bev(s1.grid, s1.voxel_features, rc.range, rc.bev_cell, det.bev_spec, det.bev);
  s1.rpn_out = rpn::rpn_forward(bev, static_cast<int>(rc.anchors.size()), det.rpn_heads);
  s1.proposals =
      rpn::nms_bev(rpn::make_proposals(det.anchors, s1.rpn_out), rc.nms_iou, max_proposals);
  return s1;
}

RoiResult forward_roi(const Detector& det, const data::SceneSample& scene,
                      const StageOneResult& s1, const rpn::Proposal& proposal) {
  const cfg::RunConfig& rc = det.rc;
  RoiResult r;
  r.proposal = proposal;
  for (size_t gi = 0; gi < scene.gts.size(); ++gi) {
    const data::GtObject& gt = scene.gts[gi];
    if (gt.class_id != proposal.class_id) continue;
    const double iou = geom::iou_3d(proposal.box, gt.box);
    if (iou > 0.0 && (!r.matched_gt || iou > geom::iou_3d(proposal.box, *r.matched_gt))) {
      r.matched_gt = gt.box;
      r.matched_index = static_cast<int>(gi);
    }
  }

  const std::vector<geom::Vec3> gp = cmff::make_grid_points(proposal.box, rc.grid_g);
  const double radius =
      cmff::default_pool_radius(proposal.box, rc.grid_g) * rc.pool_radius_scale;
  const ad::Tensor fv = cmff::pool_voxel_features(s1.grid, s1.voxel_features, gp, radius,
                                                  rc.pool_k, det.pool_spec, det.pool);
  const ad::Tensor fi = cmff::grid_image_features(gp, scene.fmap, scene.calib);
  const ad::Tensor fb =
      cmff::roi_image_feature(proposal.box, scene.fmap, scene.calib, rc.enlarge_factor,
                              rc.roi_bins, rc.roi_samples_per_bin, det.roib_spec, det.roib);
  const ad::Tensor fused = cmff::fuse(fv, fi, fb, det.fuse_spec, det.fuse);
  const ad::Tensor delta = rpg::positional_encoding(proposal.box, gp, det.pe_spec, det.pe);
  const ad::Tensor refined = rpg::refine(det.refiner_spec, det.refiner, fused, delta);
  r.generated = rpg::generate(gp, refined, det.point_heads);

  const ad::Tensor fpost = spe::decorate_generated(r.generated.coords, r.generated.features,
                                                   scene.fmap, scene.calib, det.spe_post_spec,
                                                   det.spe_post);
  const ad::Tensor fc = head::canonical_features(proposal.box, r.generated.coords,
                                                 r.generated.scores, det.canon_spec, det.canon);
  // The set encoder sees box-relative coordinates: canonical frame, scaled by
  // the half dims so a perfect proposal spans [-1, 1].  The box residual is a
  // near-linear readout of that geometry; world coordinates would make it a
  // different function at every scene location.
  const int ng = r.generated.coords.rows();
  const geom::Mat3 rot = geom::rot_z(proposal.box.yaw);
  const ad::Tensor rot_t = ad::Tensor::matrix(3, 3, {rot.m.begin(), rot.m.end()});
  const ad::Tensor center = ad::Tensor::matrix(
      1, 3, {proposal.box.center.x, proposal.box.center.y, proposal.box.center.z});
  ad::Tensor rel = ad::matmul(ad::sub(r.generated.coords, ad::repeat_row(center, ng)), rot_t);
  const ad::Tensor inv_half = ad::Tensor::matrix(
      1, 3, {2.0 / proposal.box.l, 2.0 / proposal.box.w, 2.0 / proposal.box.h});
  rel = ad::mul(rel, ad::repeat_row(inv_half, ng));
  const ad::Tensor froi = head::encode_roi(rel, fc, r.generated.features, fpost, det.set_enc);
  r.refinement = head::refine_and_score(froi, det.refine_heads);
  return r;
}

LossBreakdown compute_losses(const Detector& det, const data::SceneSample& scene,
                             const std::vector<densify::DenseObjectTemplate>& templates,
                             std::uint64_t step_seed, ad::Tensor* total_out) {
  const cfg::RunConfig& rc = det.rc;
  StageOneResult s1 = forward_stage_one(det, scene, rc.train_proposals);

  std::vector<rpn::GtBox> gts;
  for (const data::GtObject& gt : scene.gts) gts.push_back({gt.box, gt.class_id});
  const rpn::AnchorTargets targets =
      rpn::assign_targets(det.anchors, gts, rc.rpn_pos_iou, rc.rpn_neg_iou);
  const rpn::RpnLossTerms rpn_terms =
      rpn::rpn_loss(s1.rpn_out, targets, rc.gamma, rc.rpn_beta);

  std::vector<rpn::Proposal> rois = s1.proposals;
  if (rc.gt_as_rois) {
    // One clean copy plus jittered copies per ground truth: the refinement
    // head only learns to correct boxes it has seen perturbed, and the
    // confidence head needs a spread of overlaps to rank.
    Rng jitter(step_seed ^ 0xD1B54A32D192ED03ULL);
    // Graduated perturbation scales so the head sees everything from
    // almost-right boxes to proposal-grade errors.
    static constexpr double kXy[] = {0.3, 0.6, 0.9}, kZ[] = {0.15, 0.25, 0.35},
                            kYaw[] = {0.15, 0.3, 0.45}, kDim[] = {0.05, 0.08, 0.1};
    for (const data::GtObject& gt : scene.gts) {
      rois.push_back({gt.box, gt.class_id, 1.0, -1});
      for (int j = 0; j < 3; ++j) {
        const geom::Box3D& b = gt.box;
        const geom::Vec3 c{b.center.x + jitter.uniform(-kXy[j], kXy[j]),
                           b.center.y + jitter.uniform(-kXy[j], kXy[j]),
                           b.center.z + jitter.uniform(-kZ[j], kZ[j])};
        const double s = jitter.uniform(1.0 - kDim[j], 1.0 + kDim[j]);
        rois.push_back(
            {geom::make_box3d(c, s * b.l, s * b.w, s * b.h,
                              geom::wrap_angle(b.yaw + jitter.uniform(-kYaw[j], kYaw[j]))),
             gt.class_id, 1.0, -2});
      }
    }
  }

  LossBreakdown out;
  out.proposals = static_cast<int>(rois.size());
  out.positive_anchors = targets.positive_count();
  out.rpn_cls = rpn_terms.cls.item();
  out.rpn_reg = rpn_terms.reg.item();

  ad::Tensor total = ad::scale(rpn_terms.total, rc.w_rpn);
  if (!rois.empty()) {
    std::map<std::uint64_t, const densify::DenseObjectTemplate*> by_track;
    for (const densify::DenseObjectTemplate& t : templates) by_track[t.object_id] = &t;

    std::vector<rpg::GeneratedPoints> generated;
    std::vector<head::Refinement> refinements;
    std::vector<rpn::Proposal> proposals;
    std::vector<std::optional<geom::Box3D>> matched;
    std::vector<std::vector<geom::Vec3>> roi_templates;
    for (const rpn::Proposal& roi : rois) {
      RoiResult r = forward_roi(det, scene, s1, roi);
      std::vector<geom::Vec3> tmpl;
      if (r.matched_index >= 0) {
        const data::GtObject& gt = scene.gts[static_cast<size_t>(r.matched_index)];
        const auto it = by_track.find(gt.track_id);
        if (it != by_track.end()) {
          // Template points live in a canonical box of the template's dims;
          // rescale per axis to the matched box, pulled slightly inward so
          // the targets sit strictly inside it.  Surface-exact targets put
          // half the generated points outside the box and the in/out score
          // labels become coin flips.
          static constexpr double kShrink = 0.8;
          const densify::DenseObjectTemplate& t = *it->second;
          const double sx = kShrink * gt.box.l / t.dims.x, sy = kShrink * gt.box.w / t.dims.y,
                       sz = kShrink * gt.box.h / t.dims.z;
          tmpl.reserve(t.points.size());
          for (const geom::Vec3& p : t.points)
            tmpl.push_back(geom::canonical_inverse(gt.box, {p.x * sx, p.y * sy, p.z * sz}));
        }
      }
      roi_templates.push_back(std::move(tmpl));
      matched.push_back(r.matched_gt);
      proposals.push_back(r.proposal);
      generated.push_back(std::move(r.generated));
      refinements.push_back(std::move(r.refinement));
    }

    // Point-generation losses only see well-posed frames: on a perturbed box
    // the template targets live in the true frame, so the offsets would have
    // to undo a perturbation the inputs barely expose.  Box refinement keeps
    // the perturbed copies; point generation trains on the clean ones.
    std::vector<rpg::GeneratedPoints> rpg_gen;
    std::vector<std::optional<geom::Box3D>> rpg_matched;
    std::vector<std::vector<geom::Vec3>> rpg_templates;
    bool have_clean = false;
    for (const rpn::Proposal& roi : rois) have_clean |= roi.source_index == -1;
    for (size_t i = 0; i < rois.size(); ++i) {
      const int src = rois[i].source_index;
      if (src == -2 || (have_clean && src != -1)) continue;
      rpg_gen.push_back(generated[i]);
      rpg_matched.push_back(matched[i]);
      rpg_templates.push_back(roi_templates[i]);
    }
    const rpg::OffsetLossResult off = rpg::loss_offset(rpg_gen, rpg_templates);
    const ad::Tensor score =
        rpg::loss_score(rpg_gen, rpg_matched, rc.gamma, rc.score_samples, step_seed);
    const head::RcnnLossTerms rcnn =
        head::rcnn_loss(refinements, proposals, matched, rc.rcnn_pos_iou, rc.rcnn_beta);
    out.rcnn_conf = rcnn.conf.item();
    out.rcnn_reg = rcnn.reg.item();
    out.rpg_offset = off.loss.item();
    out.rpg_score = score.item();
    total = ad::add(total, ad::add(ad::scale(rcnn.total, rc.w_rcnn),
                                   ad::scale(rpg::rpg_loss(off, score), rc.w_rpg)));
  }
  out.total = total.item();
  if (total_out) *total_out = total;
  return out;
}

LossBreakdown train_step(Detector& det, const data::SceneSample& scene,
                         const std::vector<densify::DenseObjectTemplate>& templates,
                         nn::AdamState& opt, std::vector<ad::Tensor>& params,
                         std::uint64_t step_seed) {
  return train_step_batch(det, {&scene}, templates, opt, params, step_seed);
}

LossBreakdown train_step_batch(Detector& det,
                               const std::vector<const data::SceneSample*>& batch,
                               const std::vector<densify::DenseObjectTemplate>& templates,
                               nn::AdamState& opt, std::vector<ad::Tensor>& params,
                               std::uint64_t step_seed) {
  if (batch.empty()) fail("train_step_batch: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossBreakdown agg;
  for (size_t b = 0; b < batch.size(); ++b) {
    ad::Tensor total;
    const LossBreakdown out =
        compute_losses(det, *batch[b], templates, step_seed + b, &total);
    // Backward accumulates, so scaling each scene's loss averages the batch.
    ad::backward(ad::scale(total, inv));
    agg.rpn_cls += inv * out.rpn_cls;
    agg.rpn_reg += inv * out.rpn_reg;
    agg.rcnn_conf += inv * out.rcnn_conf;
    agg.rcnn_reg += inv * out.rcnn_reg;
    agg.rpg_offset += inv * out.rpg_offset;
    agg.rpg_score += inv * out.rpg_score;
    agg.total += inv * out.total;
    agg.proposals += out.proposals;
    agg.positive_anchors += out.positive_anchors;
  }
  // Stages that never ran this batch (e.g. a camera-invisible RoI skipping the
  // box-feature head) leave their params without grad buffers; Adam requires
  // one for every param.
  for (ad::Tensor& p : params)
    if (p.requires_grad() && !p.has_grad()) p.impl()->ensure_grad();
  nn::adam_step(opt, params);
  return agg;
}

InferenceResult infer_scene(const Detector& det, const data::SceneSample& scene) {
  const cfg::RunConfig& rc = det.rc;
  const StageOneResult s1 = forward_stage_one(det, scene, rc.infer_proposals);

  std::vector<head::Detection> dets;
  std::vector<rpg::GptsRoi> points;
  for (const rpn::Proposal& p : s1.proposals) {
    const RoiResult r = forward_roi(det, scene, s1, p);
    const head::Detection d = head::apply_refinement(p, r.refinement);
    if (d.confidence < rc.infer_score_threshold) continue;
    dets.push_back(d);
    points.push_back(rpg::make_gpts_roi(p.box, r.generated));
  }
  // Final suppression on the refined boxes, by refined confidence.
  std::vector<rpn::Proposal> final_props;
  for (size_t i = 0; i < dets.size(); ++i)
    final_props.push_back(
        {dets[i].box, dets[i].class_id, dets[i].confidence, static_cast<int>(i)});
  const std::vector<rpn::Proposal> kept =
      rpn::nms_bev(final_props, rc.final_nms_iou, static_cast<int>(final_props.size()));

  InferenceResult out;
  for (const rpn::Proposal& p : kept) {
    out.detections.push_back(dets[static_cast<size_t>(p.source_index)]);
    out.roi_points.push_back(points[static_cast<size_t>(p.source_index)]);
  }
  return out;
}

}  // namespace pointforge::model
