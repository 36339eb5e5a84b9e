#include "pointforge/head.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace pointforge::head {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("head: " + msg); }

}  // namespace

ad::Tensor canonical_features(const geom::Box3D& box, const ad::Tensor& coords,
                              const ad::Tensor& scores, const nn::MlpSpec& mlp_spec,
                              const nn::MlpParams& mlp) {
  if (coords.ndim() != 2 || coords.cols() != 3) fail("canonical_features: coords must be [N,3]");
  const int n = coords.rows();
  if (scores.ndim() != 2 || scores.rows() != n || scores.cols() != 1)
    fail("canonical_features: scores must be [N,1]");
  if (mlp_spec.in_width() != 5) fail("canonical_features: mlp input width must be 5");

  // Row-vector form of R_z(-yaw)(p - c): (p - c) right-multiplied by R_z(yaw).
  const geom::Mat3 r = geom::rot_z(box.yaw);
  ad::Tensor rot = ad::Tensor::matrix(3, 3, {r.m.begin(), r.m.end()});
  ad::Tensor center = ad::Tensor::matrix(1, 3, {box.center.x, box.center.y, box.center.z});
  ad::Tensor canon = ad::matmul(ad::sub(coords, ad::repeat_row(center, n)), rot);
  ad::Tensor range = ad::reshape(ad::row_norms(coords), {n, 1});
  std::vector<ad::Tensor> parts{canon, range, scores};
  return nn::mlp_forward(mlp_spec, mlp, ad::concat_cols(parts));
}

SetEncoder set_encoder_init(int in_width, int mid_width, int out_width, std::uint64_t seed,
                            bool requires_grad) {
  if (in_width < 1 || mid_width < 1 || out_width < 1) fail("set_encoder_init: bad widths");
  SetEncoder e;
  e.point_spec = nn::MlpSpec::make({in_width, mid_width, mid_width});
  e.out_spec = nn::MlpSpec::make({mid_width, out_width});
  e.point = nn::mlp_init(e.point_spec, seed, requires_grad);
  e.out = nn::mlp_init(e.out_spec, seed + 31, requires_grad);
  return e;
}

ad::Tensor encode_roi(const ad::Tensor& coords, const ad::Tensor& fc, const ad::Tensor& fs,
                      const ad::Tensor& fi, const SetEncoder& enc) {
  const int n = coords.rows();
  if (fc.rows() != n || fs.rows() != n || fi.rows() != n) fail("encode_roi: row counts differ");
  if (enc.point_spec.in_width() != coords.cols() + fc.cols() + fs.cols() + fi.cols())
    fail("encode_roi: per-point width mismatch");
  std::vector<ad::Tensor> parts{coords, fc, fs, fi};
  ad::Tensor per_point = nn::mlp_forward(enc.point_spec, enc.point, ad::concat_cols(parts));
  ad::Tensor pooled = ad::reshape(ad::maxpool_rows(per_point), {1, enc.point_spec.out_width()});
  return nn::mlp_forward(enc.out_spec, enc.out, pooled);
}

RefineHeads refine_heads_init(int in_width, std::uint64_t seed, bool requires_grad) {
  if (in_width < 1) fail("refine_heads_init: bad width");
  RefineHeads h;
  h.box_spec = nn::MlpSpec::make({in_width, in_width, 7});
  h.conf_spec = nn::MlpSpec::make({in_width, in_width, 1});
  h.box = nn::mlp_init(h.box_spec, seed, requires_grad);
  h.conf = nn::mlp_init(h.conf_spec, seed + 7, requires_grad);
  return h;
}

Refinement refine_and_score(const ad::Tensor& f_roi, const RefineHeads& heads) {
  if (f_roi.ndim() != 2 || f_roi.rows() != 1 || f_roi.cols() != heads.box_spec.in_width())
    fail("refine_and_score: f_roi width mismatch");
  Refinement r;
  r.residual = nn::mlp_forward(heads.box_spec, heads.box, f_roi);
  r.confidence = ad::sigmoid(nn::mlp_forward(heads.conf_spec, heads.conf, f_roi));
  return r;
}

Detection apply_refinement(const rpn::Proposal& proposal, const Refinement& r) {
  std::array<double, 7> res;
  for (int j = 0; j < 7; ++j) res[j] = r.residual.at(0, j);
  return {rpn::decode_residual(proposal.box, res), proposal.class_id, r.confidence.at(0, 0)};
}

RcnnLossTerms rcnn_loss(const std::vector<Refinement>& refinements,
                        const std::vector<rpn::Proposal>& proposals,
                        const std::vector<std::optional<geom::Box3D>>& matched_gt, double pos_iou,
                        double beta) {
  const size_t n = refinements.size();
  if (proposals.size() != n || matched_gt.size() != n) fail("rcnn_loss: input sizes differ");
  if (n == 0) fail("rcnn_loss: no proposals");

  std::vector<ad::Tensor> conf_rows;
  std::vector<double> conf_targets;
  std::vector<ad::Tensor> reg_rows;
  std::vector<double> reg_targets;
  for (size_t i = 0; i < n; ++i) {
    const double iou =
        matched_gt[i] ? geom::iou_3d(proposals[i].box, *matched_gt[i]) : 0.0;
    conf_rows.push_back(refinements[i].confidence);
    conf_targets.push_back(std::clamp(2.0 * (iou - 0.25), 0.0, 1.0));
    if (matched_gt[i] && iou >= pos_iou) {
      reg_rows.push_back(refinements[i].residual);
      const auto enc = rpn::encode_residual(*matched_gt[i], proposals[i].box);
      reg_targets.insert(reg_targets.end(), enc.begin(), enc.end());
    }
  }

  RcnnLossTerms terms;
  terms.conf = ad::mean(ad::bce_binary(
      conf_rows.size() == 1 ? conf_rows[0] : ad::concat_rows(conf_rows), conf_targets));
  terms.reg = reg_rows.empty()
                  ? ad::Tensor::scalar(0.0)
                  : ad::loss_smooth_l1(
                        reg_rows.size() == 1 ? reg_rows[0] : ad::concat_rows(reg_rows),
                        reg_targets, beta);
  terms.total = terms.conf + terms.reg;
  return terms;
}

ad::Tensor total_loss(const ad::Tensor& rpn, const ad::Tensor& rcnn, const ad::Tensor& rpg) {
  return rpn + rcnn + rpg;
}

void save_detections(const std::string& path, const std::vector<DetectionRecord>& dets) {
  std::ofstream out(path);
  if (!out) fail("save_detections: cannot open " + path);
  out << "frame class cx cy cz l w h yaw confidence\n";
  out << std::fixed << std::setprecision(6);
  for (const DetectionRecord& d : dets) {
    if (d.class_name.empty() || d.class_name.find_first_of(" \t\n") != std::string::npos)
      fail("save_detections: class name must be a single token");
    out << d.frame_id << ' ' << d.class_name << ' ' << d.box.center.x << ' ' << d.box.center.y
        << ' ' << d.box.center.z << ' ' << d.box.l << ' ' << d.box.w << ' ' << d.box.h << ' '
        << d.box.yaw << ' ' << d.confidence << '\n';
  }
  if (!out) fail("save_detections: write failed for " + path);
}

std::vector<DetectionRecord> load_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_detections: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail("load_detections: missing header in " + path);
  std::vector<DetectionRecord> dets;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    DetectionRecord d;
    double cx, cy, cz, l, w, h, yaw;
    if (!(ss >> d.frame_id >> d.class_name >> cx >> cy >> cz >> l >> w >> h >> yaw >>
          d.confidence))
      fail("load_detections: malformed line '" + line + "'");
    d.box = geom::make_box3d({cx, cy, cz}, l, w, h, yaw);
    dets.push_back(std::move(d));
  }
  return dets;
}

}  // namespace pointforge::head
