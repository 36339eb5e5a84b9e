#include "pointforge/rpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pointforge::rpn {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("rpn: " + msg); }

}  // namespace

geom::Vec3 BevGrid::cell_center(int ix, int iy) const {
  return {range.min.x + (ix + 0.5) * cell_size, range.min.y + (iy + 0.5) * cell_size,
          0.5 * (range.min.z + range.max.z)};
}

std::pair<int, int> bev_dims(const pc::RangeSpec& range, double cell_size) {
  if (!(cell_size > 0.0)) fail("cell_size must be positive");
  const double sx = range.max.x - range.min.x;
  const double sy = range.max.y - range.min.y;
  if (!(sx > 0.0) || !(sy > 0.0)) fail("degenerate range");
  return {static_cast<int>(std::ceil(sx / cell_size)), static_cast<int>(std::ceil(sy / cell_size))};
}

BevGrid encode_bev(const pc::VoxelGrid& grid, const ad::Tensor& voxel_features,
                   const pc::RangeSpec& range, double cell_size, const nn::MlpSpec& mlp_spec,
                   const nn::MlpParams& mlp) {
  const auto [nx, ny] = bev_dims(range, cell_size);
  const int nvox = static_cast<int>(grid.voxels.size());
  if (voxel_features.defined() && nvox > 0) {
    if (voxel_features.ndim() != 2 || voxel_features.rows() != nvox)
      fail("voxel_features rows must match grid.voxels");
    if (mlp_spec.in_width() != 3 + voxel_features.cols())
      fail("bev mlp input width must be 3 + voxel feature width");
  }

  BevGrid bev;
  bev.range = range;
  bev.cell_size = cell_size;
  bev.nx = nx;
  bev.ny = ny;
  bev.channels = mlp_spec.out_width();

  // Voxels sorted by destination cell give contiguous per-cell segments.
  std::vector<std::pair<int, int>> cell_of;  // (cell row, voxel row)
  cell_of.reserve(nvox);
  for (int v = 0; v < nvox; ++v) {
    const geom::Vec3& c = grid.voxels[v].mean_coords;
    const int ix = static_cast<int>(std::floor((c.x - range.min.x) / cell_size));
    const int iy = static_cast<int>(std::floor((c.y - range.min.y) / cell_size));
    if (ix < 0 || ix >= nx || iy < 0 || iy >= ny) continue;
    cell_of.emplace_back(bev.cell_row(ix, iy), v);
  }
  std::sort(cell_of.begin(), cell_of.end());

  if (cell_of.empty()) {
    bev.features = ad::Tensor::zeros({nx * ny, bev.channels});
    return bev;
  }

  std::vector<double> rel(static_cast<size_t>(nvox) * 3, 0.0);
  for (int v = 0; v < nvox; ++v) {
    const geom::Vec3& c = grid.voxels[v].mean_coords;
    const int ix = static_cast<int>(std::floor((c.x - range.min.x) / cell_size));
    const int iy = static_cast<int>(std::floor((c.y - range.min.y) / cell_size));
    const geom::Vec3 cc = bev.cell_center(ix, iy);
    rel[3 * v + 0] = c.x - cc.x;
    rel[3 * v + 1] = c.y - cc.y;
    rel[3 * v + 2] = c.z - cc.z;
  }
  std::vector<ad::Tensor> parts{ad::Tensor::matrix(nvox, 3, std::move(rel)), voxel_features};
  ad::Tensor embedded = nn::mlp_forward(mlp_spec, mlp, ad::concat_cols(parts));

  std::vector<int> order(cell_of.size());
  for (size_t i = 0; i < cell_of.size(); ++i) order[i] = cell_of[i].second;
  ad::Tensor sorted = ad::gather_rows(embedded, order);

  ad::Segments segs(static_cast<size_t>(nx) * ny, {0, 0});
  for (size_t i = 0; i < cell_of.size();) {
    size_t j = i;
    while (j < cell_of.size() && cell_of[j].first == cell_of[i].first) ++j;
    segs[cell_of[i].first] = {static_cast<int>(i), static_cast<int>(j - i)};
    i = j;
  }
  bev.features = ad::segment_max_rows(sorted, segs);
  return bev;
}

std::vector<Anchor> make_anchors(const pc::RangeSpec& range, double cell_size,
                                 const std::vector<AnchorSpec>& classes) {
  if (classes.empty()) fail("no anchor classes");
  const auto [nx, ny] = bev_dims(range, cell_size);
  const double yaws[2] = {0.0, M_PI / 2.0};
  std::vector<Anchor> anchors;
  anchors.reserve(static_cast<size_t>(nx) * ny * classes.size() * 2);
  for (int ix = 0; ix < nx; ++ix)
    for (int iy = 0; iy < ny; ++iy) {
      const double cx = range.min.x + (ix + 0.5) * cell_size;
      const double cy = range.min.y + (iy + 0.5) * cell_size;
      for (int c = 0; c < static_cast<int>(classes.size()); ++c) {
        const AnchorSpec& s = classes[c];
        for (double yaw : yaws)
          anchors.push_back(
              {geom::make_box3d({cx, cy, s.z_center}, s.l, s.w, s.h, yaw), c});
      }
    }
  return anchors;
}

std::array<double, 7> encode_residual(const geom::Box3D& gt, const geom::Box3D& anchor) {
  const double da = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  return {(gt.center.x - anchor.center.x) / da,
          (gt.center.y - anchor.center.y) / da,
          (gt.center.z - anchor.center.z) / anchor.h,
          std::log(gt.l / anchor.l),
          std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h),
          geom::wrap_angle(gt.yaw - anchor.yaw)};
}

geom::Box3D decode_residual(const geom::Box3D& anchor, const std::array<double, 7>& r) {
  const double da = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  return geom::make_box3d({anchor.center.x + r[0] * da, anchor.center.y + r[1] * da,
                           anchor.center.z + r[2] * anchor.h},
                          anchor.l * std::exp(r[3]), anchor.w * std::exp(r[4]),
                          anchor.h * std::exp(r[5]), geom::wrap_angle(anchor.yaw + r[6]));
}

int AnchorTargets::positive_count() const {
  return static_cast<int>(std::count(labels.begin(), labels.end(), 1));
}

AnchorTargets assign_targets(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts,
                             double pos_iou, double neg_iou) {
  if (anchors.empty()) fail("assign_targets: no anchors");
  if (!(pos_iou > neg_iou)) fail("assign_targets: pos_iou must exceed neg_iou");
  const int na = static_cast<int>(anchors.size());
  const int ng = static_cast<int>(gts.size());

  AnchorTargets t;
  t.labels.assign(na, 0);
  t.matched_gt.assign(na, -1);
  t.residuals.assign(na, {});

  std::vector<double> best_iou(na, 0.0);
  std::vector<double> gt_best_iou(ng, 0.0);
  std::vector<int> gt_best_anchor(ng, -1);
  for (int a = 0; a < na; ++a) {
    for (int g = 0; g < ng; ++g) {
      if (gts[g].class_id != anchors[a].class_id) continue;
      const double iou = geom::iou_bev(anchors[a].box, gts[g].box);
      if (iou > best_iou[a]) {
        best_iou[a] = iou;
        t.matched_gt[a] = g;
      }
      if (iou > gt_best_iou[g]) {
        gt_best_iou[g] = iou;
        gt_best_anchor[g] = a;
      }
    }
    if (best_iou[a] >= pos_iou)
      t.labels[a] = 1;
    else if (best_iou[a] < neg_iou)
      t.labels[a] = 0;
    else
      t.labels[a] = -1;
  }
  // The closest anchor to each ground-truth box is positive even below the
  // threshold, so no box goes unsupervised.
  for (int g = 0; g < ng; ++g) {
    const int a = gt_best_anchor[g];
    if (a < 0) continue;
    if (t.labels[a] != 1) {
      t.labels[a] = 1;
      t.matched_gt[a] = g;
    }
  }
  for (int a = 0; a < na; ++a)
    if (t.labels[a] == 1) t.residuals[a] = encode_residual(gts[t.matched_gt[a]].box, anchors[a].box);
  return t;
}

RpnHeads rpn_heads_init(int bev_channels, int num_classes, std::uint64_t seed,
                        bool requires_grad, int hidden) {
  if (bev_channels < 1 || num_classes < 1) fail("rpn_heads_init: bad widths");
  RpnHeads h;
  if (hidden > 0) {
    h.cls_spec = nn::MlpSpec::make({bev_channels, hidden, 2 * num_classes});
    h.reg_spec = nn::MlpSpec::make({bev_channels, hidden, 2 * num_classes * 7});
  } else {
    h.cls_spec = nn::MlpSpec::make({bev_channels, 2 * num_classes});
    h.reg_spec = nn::MlpSpec::make({bev_channels, 2 * num_classes * 7});
  }
  h.cls = nn::mlp_init(h.cls_spec, seed, requires_grad);
  h.reg = nn::mlp_init(h.reg_spec, seed + 1, requires_grad);
  // Focal prior: bias the logits so every anchor starts near score 0.018,
  // keeping the sea of easy negatives from dominating the first updates.
  std::vector<double>& cb = h.cls.biases.back().mutable_value();
  std::fill(cb.begin(), cb.end(), -4.0);
  return h;
}

RpnOutput rpn_forward(const BevGrid& bev, int num_classes, const RpnHeads& heads) {
  if (!bev.features.defined()) fail("rpn_forward: undefined BEV features");
  const int per_cell = 2 * num_classes;
  if (heads.cls_spec.in_width() != bev.channels || heads.cls_spec.out_width() != per_cell)
    fail("rpn_forward: cls head shape mismatch");
  if (heads.reg_spec.in_width() != bev.channels || heads.reg_spec.out_width() != per_cell * 7)
    fail("rpn_forward: reg head shape mismatch");
  const int cells = bev.features.rows();
  RpnOutput out;
  out.scores = ad::sigmoid(
      ad::reshape(nn::mlp_forward(heads.cls_spec, heads.cls, bev.features), {cells * per_cell, 1}));
  out.residuals =
      ad::reshape(nn::mlp_forward(heads.reg_spec, heads.reg, bev.features), {cells * per_cell, 7});
  return out;
}

std::vector<geom::Box3D> decode_boxes(const std::vector<Anchor>& anchors,
                                      const ad::Tensor& residuals) {
  if (residuals.ndim() != 2 || residuals.cols() != 7 ||
      residuals.rows() != static_cast<int>(anchors.size()))
    fail("decode_boxes: residuals must be [num anchors, 7]");
  std::vector<geom::Box3D> out;
  out.reserve(anchors.size());
  for (size_t a = 0; a < anchors.size(); ++a) {
    std::array<double, 7> r;
    for (int j = 0; j < 7; ++j) r[j] = residuals.at(static_cast<int>(a), j);
    out.push_back(decode_residual(anchors[a].box, r));
  }
  return out;
}

std::vector<Proposal> make_proposals(const std::vector<Anchor>& anchors, const RpnOutput& out) {
  if (out.scores.numel() != static_cast<int>(anchors.size()))
    fail("make_proposals: score count must match anchors");
  std::vector<geom::Box3D> boxes = decode_boxes(anchors, out.residuals);
  std::vector<Proposal> props(anchors.size());
  for (size_t a = 0; a < anchors.size(); ++a)
    props[a] = {boxes[a], anchors[a].class_id, out.scores.value()[a], static_cast<int>(a)};
  return props;
}

std::vector<Proposal> nms_bev(const std::vector<Proposal>& proposals, double iou_thresh,
                              int max_keep) {
  std::vector<int> order(proposals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return proposals[a].score > proposals[b].score;
  });
  std::vector<Proposal> kept;
  for (int idx : order) {
    if (static_cast<int>(kept.size()) >= max_keep) break;
    bool suppressed = false;
    for (const Proposal& k : kept)
      if (geom::iou_bev(k.box, proposals[idx].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(proposals[idx]);
  }
  return kept;
}

RpnLossTerms rpn_loss(const RpnOutput& out, const AnchorTargets& targets, double gamma,
                      double beta) {
  const int na = static_cast<int>(targets.labels.size());
  if (out.scores.numel() != na || out.residuals.rows() != na)
    fail("rpn_loss: output/target size mismatch");

  std::vector<int> labeled, positive;
  std::vector<double> cls_targets;
  for (int a = 0; a < na; ++a) {
    if (targets.labels[a] < 0) continue;
    labeled.push_back(a);
    cls_targets.push_back(targets.labels[a] == 1 ? 1.0 : 0.0);
    if (targets.labels[a] == 1) positive.push_back(a);
  }
  const double norm = std::max<size_t>(1, positive.size());

  RpnLossTerms terms;
  terms.cls = labeled.empty()
                  ? ad::Tensor::scalar(0.0)
                  : ad::scale(ad::sum(ad::focal_binary(ad::gather_rows(out.scores, labeled),
                                                       cls_targets, gamma)),
                              1.0 / norm);
  if (positive.empty()) {
    terms.reg = ad::Tensor::scalar(0.0);
  } else {
    std::vector<double> reg_targets;
    reg_targets.reserve(positive.size() * 7);
    for (int a : positive)
      for (int j = 0; j < 7; ++j) reg_targets.push_back(targets.residuals[a][j]);
    terms.reg = ad::loss_smooth_l1(ad::gather_rows(out.residuals, positive), reg_targets, beta);
  }
  terms.total = terms.cls + terms.reg;
  return terms;
}

}  // namespace pointforge::rpn
