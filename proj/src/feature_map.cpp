#include "pointforge/feature_map.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "binio.hpp"

namespace pointforge::img {

using ad::Tensor;

FeatureMap make_feature_map(int C, int H, int W, double stride, std::vector<double> data,
                            bool requires_grad) {
  if (C <= 0 || H <= 0 || W <= 0) throw std::invalid_argument("feature map: bad extents");
  if (stride <= 0) throw std::invalid_argument("feature map: stride must be positive");
  if (static_cast<int>(data.size()) != C * H * W)
    throw std::invalid_argument("feature map: data length does not match C*H*W");
  FeatureMap fm;
  fm.C = C;
  fm.H = H;
  fm.W = W;
  fm.stride = stride;
  fm.data = Tensor({C, H * W}, std::move(data), requires_grad);
  return fm;
}

namespace {

// One bilinear sample in feature-cell coordinates. Returns the four source
// cell indices (within a channel plane) and their convex weights, plus the
// weight derivatives w.r.t. the continuous cell coords.
struct BilinearTap {
  bool in_bounds = false;
  int idx[4] = {0, 0, 0, 0};       // y0x0, y0x1, y1x0, y1x1
  double w[4] = {0, 0, 0, 0};
  double dw_dx[4] = {0, 0, 0, 0};
  double dw_dy[4] = {0, 0, 0, 0};
};

BilinearTap make_tap(const FeatureMap& fm, double cell_x, double cell_y) {
  BilinearTap tap;
  if (!(cell_x >= 0.0) || !(cell_y >= 0.0) || cell_x > fm.W - 1 || cell_y > fm.H - 1)
    return tap;  // out of bounds (also catches NaN)
  tap.in_bounds = true;
  int x0 = static_cast<int>(std::floor(cell_x));
  int y0 = static_cast<int>(std::floor(cell_y));
  x0 = std::min(x0, fm.W - 2 >= 0 ? fm.W - 2 : 0);
  y0 = std::min(y0, fm.H - 2 >= 0 ? fm.H - 2 : 0);
  const int x1 = std::min(x0 + 1, fm.W - 1);
  const int y1 = std::min(y0 + 1, fm.H - 1);
  const double fx = fm.W == 1 ? 0.0 : cell_x - x0;
  const double fy = fm.H == 1 ? 0.0 : cell_y - y0;
  tap.idx[0] = y0 * fm.W + x0;
  tap.idx[1] = y0 * fm.W + x1;
  tap.idx[2] = y1 * fm.W + x0;
  tap.idx[3] = y1 * fm.W + x1;
  tap.w[0] = (1 - fx) * (1 - fy);
  tap.w[1] = fx * (1 - fy);
  tap.w[2] = (1 - fx) * fy;
  tap.w[3] = fx * fy;
  if (fm.W > 1) {
    tap.dw_dx[0] = -(1 - fy);
    tap.dw_dx[1] = (1 - fy);
    tap.dw_dx[2] = -fy;
    tap.dw_dx[3] = fy;
  }
  if (fm.H > 1) {
    tap.dw_dy[0] = -(1 - fx);
    tap.dw_dy[1] = -fx;
    tap.dw_dy[2] = (1 - fx);
    tap.dw_dy[3] = fx;
  }
  return tap;
}

}  // namespace

std::vector<double> bilinear_sample(const FeatureMap& fm, double u, double v, bool* in_bounds) {
  const BilinearTap tap = make_tap(fm, u / fm.stride, v / fm.stride);
  if (in_bounds) *in_bounds = tap.in_bounds;
  std::vector<double> out(fm.C, 0.0);
  if (!tap.in_bounds) return out;
  const auto& data = fm.data.value();
  const int plane = fm.H * fm.W;
  for (int c = 0; c < fm.C; ++c) {
    const double* ch = data.data() + static_cast<size_t>(c) * plane;
    out[c] = tap.w[0] * ch[tap.idx[0]] + tap.w[1] * ch[tap.idx[1]] + tap.w[2] * ch[tap.idx[2]] +
             tap.w[3] * ch[tap.idx[3]];
  }
  return out;
}

Tensor sample_rows(const FeatureMap& fm, const std::vector<std::array<double, 2>>& uv,
                   std::vector<bool>* in_bounds) {
  const int n = static_cast<int>(uv.size());
  const int c = fm.C, plane = fm.H * fm.W;
  std::vector<BilinearTap> taps(n);
  std::vector<double> out(static_cast<size_t>(n) * c, 0.0);
  const auto& data = fm.data.value();
  if (in_bounds) in_bounds->assign(n, false);
  for (int i = 0; i < n; ++i) {
    taps[i] = make_tap(fm, uv[i][0] / fm.stride, uv[i][1] / fm.stride);
    if (!taps[i].in_bounds) continue;
    if (in_bounds) (*in_bounds)[i] = true;
    for (int ch = 0; ch < c; ++ch) {
      const double* plane_data = data.data() + static_cast<size_t>(ch) * plane;
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += taps[i].w[k] * plane_data[taps[i].idx[k]];
      out[static_cast<size_t>(i) * c + ch] = acc;
    }
  }
  auto* di = fm.data.impl().get();
  return ad::make_op({n, c}, std::move(out), {fm.data},
                     [di, taps = std::move(taps), c, plane](ad::TensorImpl& self) {
                       if (!di->requires_grad) return;
                       di->ensure_grad();
                       const int n_rows = static_cast<int>(taps.size());
                       for (int i = 0; i < n_rows; ++i) {
                         if (!taps[i].in_bounds) continue;
                         for (int ch = 0; ch < c; ++ch) {
                           const double g = self.grad[static_cast<size_t>(i) * c + ch];
                           if (g == 0.0) continue;
                           double* gplane = di->grad.data() + static_cast<size_t>(ch) * plane;
                           for (int k = 0; k < 4; ++k)
                             gplane[taps[i].idx[k]] += g * taps[i].w[k];
                         }
                       }
                     });
}

Tensor sample_at_points(const geom::CameraCalibration& calib, const FeatureMap& fm,
                        const Tensor& points, std::vector<bool>* in_bounds) {
  if (points.ndim() != 2 || points.cols() != 3)
    throw std::invalid_argument("sample_at_points: points must be [N,3]");
  const int n = points.rows();
  const int c = fm.C, plane = fm.H * fm.W;

  // Combined LiDAR -> homogeneous-pixel transform: hom = P * [R0*Tr ; 0 0 0 1].
  const geom::Mat3 rot = geom::mat3_mul(calib.R0, calib.Tr.rotation());
  const geom::Vec3 trans = calib.R0.apply(calib.Tr.translation());
  geom::Mat34 cam_from_lidar;
  cam_from_lidar.m = {rot.m[0], rot.m[1], rot.m[2], trans.x, rot.m[3], rot.m[4],
                      rot.m[5], trans.y,  rot.m[6], rot.m[7], rot.m[8], trans.z};
  geom::Mat34 M;  // hom-pixel from LiDAR
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      double acc = j == 3 ? calib.P.m[i * 4 + 3] : 0.0;
      for (int k = 0; k < 3; ++k) acc += calib.P.m[i * 4 + k] * cam_from_lidar.m[k * 4 + j];
      M.m[i * 4 + j] = acc;
    }
  }

  struct RowTap {
    BilinearTap tap;
    double du_dp[3] = {0, 0, 0};  // pixel-u derivative w.r.t. LiDAR xyz
    double dv_dp[3] = {0, 0, 0};
  };
  std::vector<RowTap> rows(n);
  std::vector<double> out(static_cast<size_t>(n) * c, 0.0);
  const auto& data = fm.data.value();
  const auto& pv = points.value();
  if (in_bounds) in_bounds->assign(n, false);
  for (int i = 0; i < n; ++i) {
    const geom::Vec3 p{pv[i * 3 + 0], pv[i * 3 + 1], pv[i * 3 + 2]};
    const geom::Vec3 cam = cam_from_lidar.apply(p);
    if (cam.z <= 0.0) continue;
    const geom::Vec3 hom = M.apply(p);
    if (hom.z <= 0.0) continue;
    const double u = hom.x / hom.z, v = hom.y / hom.z;
    RowTap& rt = rows[i];
    rt.tap = make_tap(fm, u / fm.stride, v / fm.stride);
    if (!rt.tap.in_bounds) continue;
    if (in_bounds) (*in_bounds)[i] = true;
    for (int k = 0; k < 3; ++k) {
      rt.du_dp[k] = (M.m[0 * 4 + k] - u * M.m[2 * 4 + k]) / hom.z;
      rt.dv_dp[k] = (M.m[1 * 4 + k] - v * M.m[2 * 4 + k]) / hom.z;
    }
    for (int ch = 0; ch < c; ++ch) {
      const double* plane_data = data.data() + static_cast<size_t>(ch) * plane;
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += rt.tap.w[k] * plane_data[rt.tap.idx[k]];
      out[static_cast<size_t>(i) * c + ch] = acc;
    }
  }

  auto* di = fm.data.impl().get();
  auto* pi = points.impl().get();
  const double inv_stride = 1.0 / fm.stride;
  return ad::make_op(
      {n, c}, std::move(out), {fm.data, points},
      [di, pi, rows = std::move(rows), c, plane, inv_stride](ad::TensorImpl& self) {
        const int n_rows = static_cast<int>(rows.size());
        for (int i = 0; i < n_rows; ++i) {
          const RowTap& rt = rows[i];
          if (!rt.tap.in_bounds) continue;
          for (int ch = 0; ch < c; ++ch) {
            const double g = self.grad[static_cast<size_t>(i) * c + ch];
            if (g == 0.0) continue;
            if (di->requires_grad) {
              di->ensure_grad();
              double* gplane = di->grad.data() + static_cast<size_t>(ch) * plane;
              for (int k = 0; k < 4; ++k) gplane[rt.tap.idx[k]] += g * rt.tap.w[k];
            }
            if (pi->requires_grad) {
              pi->ensure_grad();
              const double* plane_data = di->value.data() + static_cast<size_t>(ch) * plane;
              double dval_dx = 0, dval_dy = 0;  // in feature-cell coords
              for (int k = 0; k < 4; ++k) {
                dval_dx += rt.tap.dw_dx[k] * plane_data[rt.tap.idx[k]];
                dval_dy += rt.tap.dw_dy[k] * plane_data[rt.tap.idx[k]];
              }
              for (int k = 0; k < 3; ++k)
                pi->grad[static_cast<size_t>(i) * 3 + k] +=
                    g * inv_stride * (dval_dx * rt.du_dp[k] + dval_dy * rt.dv_dp[k]);
            }
          }
        }
      });
}

Tensor roi_align(const FeatureMap& fm, const geom::Box2D& box, int S, int samples_per_bin) {
  if (S < 1 || samples_per_bin < 1)
    throw std::invalid_argument("roi_align: grid sizes must be >= 1");
  const int nsub = samples_per_bin;
  const double bw = box.width() / S, bh = box.height() / S;
  std::vector<std::array<double, 2>> uv;
  uv.reserve(static_cast<size_t>(S) * S * nsub * nsub);
  for (int by = 0; by < S; ++by)
    for (int bx = 0; bx < S; ++bx)
      for (int sy = 0; sy < nsub; ++sy)
        for (int sx = 0; sx < nsub; ++sx) {
          const double u = box.u_min + (bx + (sx + 0.5) / nsub) * bw;
          const double v = box.v_min + (by + (sy + 0.5) / nsub) * bh;
          uv.push_back({u, v});
        }
  Tensor samples = sample_rows(fm, uv);
  ad::Segments segs(static_cast<size_t>(S) * S);
  for (int b = 0; b < S * S; ++b) segs[b] = {b * nsub * nsub, nsub * nsub};
  return ad::segment_mean_rows(samples, segs);
}

void save_fmap(const std::string& path, const FeatureMap& fm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("fmap: cannot open " + path + " for writing");
  os.write("FMAP", 4);
  binio::write_u32(os, 1);
  binio::write_u32(os, static_cast<std::uint32_t>(fm.C));
  binio::write_u32(os, static_cast<std::uint32_t>(fm.H));
  binio::write_u32(os, static_cast<std::uint32_t>(fm.W));
  binio::write_f32(os, static_cast<float>(fm.stride));
  for (double v : fm.data.value()) binio::write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("fmap: write failed for " + path);
}

FeatureMap load_fmap(const std::string& path, bool requires_grad) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("fmap: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "FMAP")
    throw std::runtime_error("fmap: bad magic in " + path);
  const std::uint32_t version = binio::read_u32(is, "fmap");
  if (version != 1) throw std::runtime_error("fmap: unsupported version");
  const int C = static_cast<int>(binio::read_u32(is, "fmap"));
  const int H = static_cast<int>(binio::read_u32(is, "fmap"));
  const int W = static_cast<int>(binio::read_u32(is, "fmap"));
  const double stride = binio::read_f32(is, "fmap");
  std::vector<double> data(static_cast<size_t>(C) * H * W);
  for (double& v : data) v = binio::read_f32(is, "fmap");
  return make_feature_map(C, H, W, stride, std::move(data), requires_grad);
}

}  // namespace pointforge::img
