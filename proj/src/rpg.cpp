#include "pointforge/rpg.hpp"

#include <fstream>
#include <stdexcept>
#include <utility>

#include "binio.hpp"
#include "pointforge/rng.hpp"

namespace pointforge::rpg {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("rpg: " + msg); }

}  // namespace

ad::Tensor positional_encoding(const geom::Box3D& box, const std::vector<geom::Vec3>& grid_points,
                               const nn::MlpSpec& ffn_spec, const nn::MlpParams& ffn) {
  if (ffn_spec.in_width() != 27) fail("positional encoding ffn input width must be 27");
  const auto corners = geom::box3d_corners(box);
  const int n = static_cast<int>(grid_points.size());
  std::vector<double> rel(static_cast<size_t>(n) * 27);
  for (int i = 0; i < n; ++i) {
    double* row = rel.data() + static_cast<size_t>(i) * 27;
    const geom::Vec3 dc = grid_points[i] - box.center;
    row[0] = dc.x;
    row[1] = dc.y;
    row[2] = dc.z;
    for (int k = 0; k < 8; ++k) {
      const geom::Vec3 d = grid_points[i] - corners[k];
      row[3 + 3 * k + 0] = d.x;
      row[3 + 3 * k + 1] = d.y;
      row[3 + 3 * k + 2] = d.z;
    }
  }
  return nn::mlp_forward(ffn_spec, ffn, ad::Tensor::matrix(n, 27, std::move(rel)));
}

RefinerParams refiner_init(const RefinerSpec& spec, std::uint64_t seed, bool requires_grad) {
  if (spec.layers < 1) fail("refiner needs at least one layer");
  RefinerParams p;
  for (int i = 0; i < spec.layers; ++i)
    p.layers.push_back(nn::transformer_layer_init(spec.layer, seed + static_cast<std::uint64_t>(i),
                                                  requires_grad));
  return p;
}

ad::Tensor refine(const RefinerSpec& spec, const RefinerParams& params, const ad::Tensor& fused,
                  const ad::Tensor& delta) {
  if (static_cast<int>(params.layers.size()) != spec.layers) fail("refiner layer count mismatch");
  if (fused.ndim() != 2 || fused.cols() != spec.layer.d) fail("refine: fused width mismatch");
  if (delta.ndim() != 2 || delta.cols() != spec.layer.d || delta.rows() != fused.rows())
    fail("refine: delta shape mismatch");
  ad::Tensor x = fused;
  for (int i = 0; i < spec.layers; ++i)
    x = nn::transformer_layer_forward(spec.layer, params.layers[i], x + delta);
  return x;
}

PointHeads point_heads_init(int d, int cs, std::uint64_t seed, bool requires_grad) {
  if (d < 1 || cs < 1) fail("point_heads_init: bad widths");
  PointHeads h;
  h.point_spec = nn::MlpSpec::make({d, d, 3 + cs});
  h.score_spec = nn::MlpSpec::make({cs, cs, 1});
  h.point = nn::mlp_init(h.point_spec, seed, requires_grad);
  h.score = nn::mlp_init(h.score_spec, seed + 101, requires_grad);
  return h;
}

std::vector<geom::Vec3> GeneratedPoints::coord_values() const {
  std::vector<geom::Vec3> out(grid.size());
  for (size_t i = 0; i < grid.size(); ++i)
    out[i] = {coords.at(static_cast<int>(i), 0), coords.at(static_cast<int>(i), 1),
              coords.at(static_cast<int>(i), 2)};
  return out;
}

GeneratedPoints generate(const std::vector<geom::Vec3>& grid_points, const ad::Tensor& refined,
                         const PointHeads& heads) {
  const int n = static_cast<int>(grid_points.size());
  if (refined.ndim() != 2 || refined.rows() != n) fail("generate: refined rows must match grid");
  if (heads.point_spec.in_width() != refined.cols()) fail("generate: point head width mismatch");
  const int cs = heads.point_spec.out_width() - 3;
  if (cs < 1 || heads.score_spec.in_width() != cs) fail("generate: score head width mismatch");

  GeneratedPoints g;
  g.grid = grid_points;
  ad::Tensor raw = nn::mlp_forward(heads.point_spec, heads.point, refined);
  g.offsets = ad::slice_cols(raw, 0, 3);
  g.features = ad::slice_cols(raw, 3, cs);
  std::vector<double> base(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i) {
    base[3 * i + 0] = grid_points[i].x;
    base[3 * i + 1] = grid_points[i].y;
    base[3 * i + 2] = grid_points[i].z;
  }
  g.coords = ad::add(g.offsets, ad::Tensor::matrix(n, 3, std::move(base)));
  g.scores = ad::clamp_op(ad::sigmoid(nn::mlp_forward(heads.score_spec, heads.score, g.features)),
                          1e-7, 1.0 - 1e-7);
  return g;
}

OffsetLossResult loss_offset(const std::vector<GeneratedPoints>& generated,
                             const std::vector<std::vector<geom::Vec3>>& templates) {
  if (generated.size() != templates.size()) fail("loss_offset: roi/template count mismatch");
  OffsetLossResult r;
  std::vector<ad::Tensor> terms;
  for (size_t i = 0; i < generated.size(); ++i) {
    if (templates[i].empty()) {
      ++r.skipped_empty;
      continue;
    }
    terms.push_back(pc::chamfer_distance_ad(generated[i].coords, templates[i]));
  }
  if (terms.empty()) {
    r.loss = ad::Tensor::scalar(0.0);
    return r;
  }
  r.had_positives = true;
  ad::Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
  r.loss = ad::scale(acc, 1.0 / static_cast<double>(terms.size()));
  return r;
}

ad::Tensor loss_score(const std::vector<GeneratedPoints>& generated,
                      const std::vector<std::optional<geom::Box3D>>& matched_gt, double gamma,
                      int n_samples, std::uint64_t seed) {
  if (n_samples < 1) fail("loss_score: n_samples must be at least 1");
  if (generated.size() != matched_gt.size()) fail("loss_score: roi/gt count mismatch");
  Rng rng(seed);
  std::vector<ad::Tensor> gathered;
  std::vector<double> labels;
  for (size_t i = 0; i < generated.size(); ++i) {
    const GeneratedPoints& g = generated[i];
    if (g.size() == 0) continue;
    const std::vector<geom::Vec3> pts = g.coord_values();
    const int start = rng.uniform_int(0, g.size() - 1);
    std::vector<int> sample =
        pc::farthest_point_sample(pts, std::min(n_samples, g.size()), start);
    gathered.push_back(ad::gather_rows(g.scores, sample));
    for (int row : sample) {
      const bool inside = matched_gt[i] && pc::point_in_box(*matched_gt[i], pts[row]);
      labels.push_back(inside ? 1.0 : 0.0);
    }
  }
  if (gathered.empty()) return ad::Tensor::scalar(0.0);
  ad::Tensor scores = gathered.size() == 1 ? gathered[0] : ad::concat_rows(gathered);
  return ad::mean(ad::focal_binary(scores, labels, gamma));
}

ad::Tensor rpg_loss(const OffsetLossResult& offset, const ad::Tensor& score) {
  return offset.loss + score;
}

GptsRoi make_gpts_roi(const geom::Box3D& box, const GeneratedPoints& gen) {
  GptsRoi r;
  r.box = box;
  r.points.reserve(gen.grid.size());
  for (int i = 0; i < gen.size(); ++i)
    r.points.push_back({static_cast<float>(gen.coords.at(i, 0)),
                        static_cast<float>(gen.coords.at(i, 1)),
                        static_cast<float>(gen.coords.at(i, 2)),
                        static_cast<float>(gen.scores.at(i, 0))});
  return r;
}

void save_gpts(const std::string& path, const std::vector<GptsRoi>& rois) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_gpts: cannot open " + path);
  for (const GptsRoi& r : rois) {
    binio::write_f32(out, static_cast<float>(r.box.center.x));
    binio::write_f32(out, static_cast<float>(r.box.center.y));
    binio::write_f32(out, static_cast<float>(r.box.center.z));
    binio::write_f32(out, static_cast<float>(r.box.l));
    binio::write_f32(out, static_cast<float>(r.box.w));
    binio::write_f32(out, static_cast<float>(r.box.h));
    binio::write_f32(out, static_cast<float>(r.box.yaw));
    binio::write_u32(out, static_cast<std::uint32_t>(r.points.size()));
    for (const auto& p : r.points)
      for (float v : p) binio::write_f32(out, v);
  }
  if (!out) fail("save_gpts: write failed for " + path);
}

std::vector<GptsRoi> load_gpts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_gpts: cannot open " + path);
  std::vector<GptsRoi> rois;
  while (in.peek() != std::char_traits<char>::eof()) {
    GptsRoi r;
    float b[7];
    for (float& v : b) v = binio::read_f32(in, "gpts box");
    r.box = geom::make_box3d({b[0], b[1], b[2]}, b[3], b[4], b[5], b[6]);
    const std::uint32_t count = binio::read_u32(in, "gpts point count");
    r.points.resize(count);
    for (auto& p : r.points)
      for (float& v : p) v = binio::read_f32(in, "gpts point");
    rois.push_back(std::move(r));
  }
  return rois;
}

}  // namespace pointforge::rpg
