#include "pointforge/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "binio.hpp"

namespace pointforge::data {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("data: " + msg); }

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string frame_name(int frame_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", frame_id);
  return buf;
}

// Box dims (l, w, h) sampled around per-class means with +-8% jitter.
struct ClassDims {
  double l, w, h;
};
const ClassDims kClassDims[3] = {{3.9, 1.6, 1.56}, {0.8, 0.6, 1.73}, {1.76, 0.6, 1.73}};

}  // namespace

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"car", "pedestrian", "cyclist"};
  return names;
}

const std::string& kitti_type_name(int class_id) {
  static const std::vector<std::string> types{"Car", "Pedestrian", "Cyclist"};
  if (class_id < 0 || class_id >= static_cast<int>(types.size()))
    fail("kitti_type_name: unknown class id " + std::to_string(class_id));
  return types[static_cast<size_t>(class_id)];
}

int class_id_from_type(const std::string& type) {
  const std::string t = lower(type);
  const auto& names = class_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (t == names[i]) return static_cast<int>(i);
  return -1;
}

pc::PointCloud read_velodyne_bin(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) fail("read_velodyne_bin: cannot open " + path);
  const std::streamoff size = is.tellg();
  if (size % 16 != 0)
    fail("read_velodyne_bin: " + path + " length " + std::to_string(size) +
         " is not a multiple of 16; trailing bytes start at offset " +
         std::to_string(size - size % 16));
  is.seekg(0);
  pc::PointCloud cloud;
  cloud.feature_width = 1;
  const auto n = static_cast<size_t>(size / 16);
  cloud.coords.reserve(n);
  cloud.features.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    geom::Vec3 p;
    p.x = binio::read_f32(is, "velodyne");
    p.y = binio::read_f32(is, "velodyne");
    p.z = binio::read_f32(is, "velodyne");
    cloud.coords.push_back(p);
    cloud.features.push_back(binio::read_f32(is, "velodyne"));
  }
  return cloud;
}

void write_velodyne_bin(const std::string& path, const pc::PointCloud& cloud) {
  if (cloud.feature_width != 1) fail("write_velodyne_bin: needs intensity-only features");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("write_velodyne_bin: cannot open " + path);
  for (int i = 0; i < cloud.size(); ++i) {
    const geom::Vec3& p = cloud.coords[static_cast<size_t>(i)];
    binio::write_f32(os, static_cast<float>(p.x));
    binio::write_f32(os, static_cast<float>(p.y));
    binio::write_f32(os, static_cast<float>(p.z));
    binio::write_f32(os, static_cast<float>(cloud.features[static_cast<size_t>(i)]));
  }
  if (!os) fail("write_velodyne_bin: write failed for " + path);
}

geom::CameraCalibration read_calib(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("read_calib: cannot open " + path);
  bool have_p = false, have_r = false, have_tr = false;
  geom::CameraCalibration calib;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const size_t colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream ss(line.substr(colon + 1));
    auto read_values = [&](double* dst, int n) {
      for (int i = 0; i < n; ++i)
        if (!(ss >> dst[i]))
          fail("read_calib: " + path + " line " + std::to_string(line_no) + ": expected " +
               std::to_string(n) + " values for " + key);
    };
    if (key == "P2") {
      read_values(calib.P.m.data(), 12);
      have_p = true;
    } else if (key == "R0_rect") {
      read_values(calib.R0.m.data(), 9);
      have_r = true;
    } else if (key == "Tr_velo_to_cam") {
      read_values(calib.Tr.m.data(), 12);
      have_tr = true;
    }
  }
  if (!have_p) fail("read_calib: " + path + " is missing P2");
  if (!have_r) fail("read_calib: " + path + " is missing R0_rect");
  if (!have_tr) fail("read_calib: " + path + " is missing Tr_velo_to_cam");
  geom::validate_calibration(calib);
  return calib;
}

void write_calib(const std::string& path, const geom::CameraCalibration& calib) {
  std::ofstream os(path);
  if (!os) fail("write_calib: cannot open " + path);
  os << std::setprecision(17);
  auto row = [&](const char* key, const double* v, int n) {
    os << key << ':';
    for (int i = 0; i < n; ++i) os << ' ' << v[i];
    os << '\n';
  };
  row("P2", calib.P.m.data(), 12);
  row("R0_rect", calib.R0.m.data(), 9);
  row("Tr_velo_to_cam", calib.Tr.m.data(), 12);
  if (!os) fail("write_calib: write failed for " + path);
}

std::vector<LabelRecord> read_label_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("read_label_records: cannot open " + path);
  std::vector<LabelRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ss >> tok) fields.push_back(tok);
    if (fields.size() != 15 && fields.size() != 16)
      fail("read_label_records: " + path + " line " + std::to_string(line_no) + ": expected 15" +
           " or 16 fields, got " + std::to_string(fields.size()));
    LabelRecord rec;
    try {
      rec.type = fields[0];
      rec.truncation = std::stod(fields[1]);
      rec.occlusion = std::stoi(fields[2]);
      rec.alpha = std::stod(fields[3]);
      rec.bbox.u_min = std::stod(fields[4]);
      rec.bbox.v_min = std::stod(fields[5]);
      rec.bbox.u_max = std::stod(fields[6]);
      rec.bbox.v_max = std::stod(fields[7]);
      rec.h = std::stod(fields[8]);
      rec.w = std::stod(fields[9]);
      rec.l = std::stod(fields[10]);
      rec.cam_center = {std::stod(fields[11]), std::stod(fields[12]), std::stod(fields[13])};
      rec.ry = std::stod(fields[14]);
      if (fields.size() == 16) {
        rec.track_id = std::stoull(fields[15]);
        rec.has_track = true;
      } else {
        rec.track_id = records.size();
      }
    } catch (const std::exception&) {
      fail("read_label_records: " + path + " line " + std::to_string(line_no) +
           ": non-numeric field");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_label_records(const std::string& path, const std::vector<LabelRecord>& records) {
  std::ofstream os(path);
  if (!os) fail("write_label_records: cannot open " + path);
  os << std::fixed << std::setprecision(6);
  for (const LabelRecord& rec : records) {
    os << rec.type << ' ' << rec.truncation << ' ' << rec.occlusion << ' ' << rec.alpha << ' '
       << rec.bbox.u_min << ' ' << rec.bbox.v_min << ' ' << rec.bbox.u_max << ' '
       << rec.bbox.v_max << ' ' << rec.h << ' ' << rec.w << ' ' << rec.l << ' '
       << rec.cam_center.x << ' ' << rec.cam_center.y << ' ' << rec.cam_center.z << ' '
       << rec.ry;
    if (rec.has_track) os << ' ' << rec.track_id;
    os << '\n';
  }
  if (!os) fail("write_label_records: write failed for " + path);
}

GtObject label_to_gt(const LabelRecord& rec, const geom::CameraCalibration& calib) {
  const geom::Mat3 r0_t = geom::mat3_transpose(calib.R0);
  const geom::Mat34 tr_inv = geom::rigid_inverse(calib.Tr);
  const geom::Vec3 center_rect = rec.cam_center - geom::Vec3{0, 0.5 * rec.h, 0};
  const geom::Vec3 center = tr_inv.apply(r0_t.apply(center_rect));
  const geom::Vec3 dir_cam{std::cos(rec.ry), 0.0, -std::sin(rec.ry)};
  const geom::Vec3 dir = geom::mat3_transpose(calib.Tr.rotation()).apply(r0_t.apply(dir_cam));
  GtObject gt;
  gt.box = geom::make_box3d(center, rec.l, rec.w, rec.h, std::atan2(dir.y, dir.x));
  gt.class_id = class_id_from_type(rec.type);
  gt.track_id = rec.track_id;
  return gt;
}

LabelRecord gt_to_label(const GtObject& gt, const geom::CameraCalibration& calib, int image_w,
                        int image_h) {
  LabelRecord rec;
  rec.type = kitti_type_name(gt.class_id);
  rec.h = gt.box.h;
  rec.w = gt.box.w;
  rec.l = gt.box.l;
  const geom::Vec3 center_rect = calib.R0.apply(calib.Tr.apply(gt.box.center));
  rec.cam_center = center_rect + geom::Vec3{0, 0.5 * gt.box.h, 0};
  const geom::Vec3 dir_l{std::cos(gt.box.yaw), std::sin(gt.box.yaw), 0.0};
  const geom::Vec3 dir_cam = calib.R0.apply(calib.Tr.rotation().apply(dir_l));
  rec.ry = std::atan2(-dir_cam.z, dir_cam.x);
  rec.alpha = geom::wrap_angle(rec.ry - std::atan2(rec.cam_center.x, rec.cam_center.z));
  const geom::Box2DResult proj = geom::corners_to_box2d(calib, gt.box);
  if (proj.visible && proj.box.area() > 0.0) {
    geom::Box2D clipped;
    clipped.u_min = std::max(0.0, proj.box.u_min);
    clipped.v_min = std::max(0.0, proj.box.v_min);
    clipped.u_max = std::min(static_cast<double>(image_w), proj.box.u_max);
    clipped.v_max = std::min(static_cast<double>(image_h), proj.box.v_max);
    if (clipped.u_max > clipped.u_min && clipped.v_max > clipped.v_min) {
      rec.bbox = clipped;
      rec.truncation = 1.0 - clipped.area() / proj.box.area();
    } else {
      rec.truncation = 1.0;  // projects entirely outside the image
    }
  } else {
    rec.truncation = 1.0;  // behind the camera
  }
  rec.occlusion = 0;
  rec.track_id = gt.track_id;
  rec.has_track = true;
  return rec;
}

std::vector<GtObject> read_labels(const std::string& path,
                                  const geom::CameraCalibration& calib) {
  std::vector<GtObject> gts;
  for (const LabelRecord& rec : read_label_records(path)) {
    if (class_id_from_type(rec.type) < 0) continue;  // DontCare and out-of-scope types
    gts.push_back(label_to_gt(rec, calib));
  }
  return gts;
}

void write_labels(const std::string& path, const std::vector<GtObject>& gts,
                  const geom::CameraCalibration& calib, int image_w, int image_h) {
  std::vector<LabelRecord> records;
  records.reserve(gts.size());
  for (const GtObject& gt : gts) records.push_back(gt_to_label(gt, calib, image_w, image_h));
  write_label_records(path, records);
}

double keep_probability(const SyntheticSpec& spec, double distance) {
  const double p = 1.0 - spec.dropout_rate * std::max(0.0, distance - spec.dropout_start);
  return std::clamp(p, spec.dropout_floor, 1.0);
}

void render_silhouette(img::FeatureMap& fmap, const geom::CameraCalibration& calib,
                       const geom::Box3D& box, int class_id) {
  if (class_id < 0 || class_id >= fmap.C) fail("render_silhouette: class id outside channels");
  const geom::Box2DResult proj = geom::corners_to_box2d(calib, box);
  if (!proj.visible) return;
  std::vector<double>& v = fmap.data.mutable_value();
  for (int y = 0; y < fmap.H; ++y) {
    const double pv = y * fmap.stride;
    if (pv < proj.box.v_min || pv > proj.box.v_max) continue;
    for (int x = 0; x < fmap.W; ++x) {
      const double pu = x * fmap.stride;
      if (pu < proj.box.u_min || pu > proj.box.u_max) continue;
      for (int c = 0; c < fmap.C; ++c)
        v[static_cast<size_t>(c) * fmap.H * fmap.W + static_cast<size_t>(y) * fmap.W + x] =
            c == class_id ? 1.0 : 0.0;
    }
  }
}

std::vector<SceneSample> gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.sequences < 1 || spec.frames_per_sequence < 1) fail("gen_synthetic: empty spec");
  if (spec.class_mix.size() != class_names().size())
    fail("gen_synthetic: class_mix needs one weight per class");
  if (!(spec.distance_range[0] > 0 && spec.distance_range[1] > spec.distance_range[0]))
    fail("gen_synthetic: bad distance range");
  double mix_total = 0.0;
  for (double w : spec.class_mix) {
    if (w < 0) fail("gen_synthetic: negative class weight");
    mix_total += w;
  }
  if (mix_total <= 0) fail("gen_synthetic: class_mix sums to zero");

  geom::CameraCalibration calib;
  calib.P.m = {spec.focal, 0, spec.image_w / 2.0, 0, 0, spec.focal, spec.image_h / 2.0, 0,
               0,          0, 1,                  0};
  calib.Tr.m = {0, -1, 0, 0, 0, 0, -1, 0, 1, 0, 0, 0};
  const double half_fov = std::atan2(spec.image_w / 2.0, spec.focal);

  Rng rng(seed);
  auto pick_class = [&]() {
    double u = rng.uniform(0.0, mix_total);
    for (size_t i = 0; i < spec.class_mix.size(); ++i) {
      u -= spec.class_mix[i];
      if (u < 0) return static_cast<int>(i);
    }
    return static_cast<int>(spec.class_mix.size()) - 1;
  };

  std::vector<SceneSample> scenes;
  int frame_id = 0;
  for (int seq = 0; seq < spec.sequences; ++seq) {
    // Persistent objects for this sequence.
    struct TrackedBox {
      geom::Box3D box;
      int class_id;
      std::uint64_t track_id;
    };
    std::vector<TrackedBox> objects;
    const int want = rng.uniform_int(spec.objects_per_frame[0], spec.objects_per_frame[1]);
    for (int i = 0; i < want; ++i) {
      const int cid = pick_class();
      const ClassDims base = kClassDims[cid];
      const double l = base.l * rng.uniform(0.92, 1.08);
      const double w = base.w * rng.uniform(0.92, 1.08);
      const double h = base.h * rng.uniform(0.92, 1.08);
      bool placed = false;
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        const double d = rng.uniform(spec.distance_range[0], spec.distance_range[1]);
        const double az = rng.uniform(-0.9 * half_fov, 0.9 * half_fov);
        const double zlo = spec.range.min.z + 0.5 * h, zhi = spec.range.max.z - 0.5 * h;
        if (!(zhi > zlo)) fail("gen_synthetic: range too shallow for object height");
        // Objects rest on the ground plane at the bottom of the range, with a
        // little terrain variation.
        const double cz = std::min(zlo + rng.uniform(0.0, 0.3), zhi);
        geom::Vec3 center{d * std::cos(az), d * std::sin(az), cz};
        // Yaw stays within +-pi/4 of the x axis so the axis-aligned anchor is
        // always the best footprint match: direct heading-residual regression
        // cannot represent the +-pi ambiguity of the rotated anchor.
        const geom::Box3D box =
            geom::make_box3d(center, l, w, h, rng.uniform(-M_PI / 4, M_PI / 4));
        if (!spec.range.contains(center)) continue;
        bool collides = false;
        for (const TrackedBox& o : objects)
          if (geom::iou_bev(box, o.box) > 0.0) collides = true;
        if (collides) continue;
        objects.push_back({box, cid, static_cast<std::uint64_t>(seq) * 100 + i});
        placed = true;
      }
    }

    for (int f = 0; f < spec.frames_per_sequence; ++f) {
      if (f > 0) {
        // Drift each object; keep the previous pose on collision or range exit.
        for (size_t i = 0; i < objects.size(); ++i) {
          geom::Box3D moved = objects[i].box;
          moved.center.x += rng.uniform(-0.4, 0.4);
          moved.center.y += rng.uniform(-0.4, 0.4);
          moved.yaw = geom::wrap_angle(moved.yaw + rng.uniform(-0.15, 0.15));
          bool ok = spec.range.contains(moved.center);
          for (size_t j = 0; ok && j < objects.size(); ++j)
            if (j != i && geom::iou_bev(moved, objects[j].box) > 0.0) ok = false;
          if (ok) objects[i].box = moved;
        }
      }

      SceneSample s;
      s.frame_id = frame_id++;
      s.calib = calib;
      s.image_w = spec.image_w;
      s.image_h = spec.image_h;
      const int fw = static_cast<int>(std::lround(spec.image_w / spec.fmap_stride));
      const int fh = static_cast<int>(std::lround(spec.image_h / spec.fmap_stride));
      s.fmap = img::make_feature_map(
          static_cast<int>(class_names().size()), fh, fw, spec.fmap_stride,
          std::vector<double>(class_names().size() * static_cast<size_t>(fh) * fw, 0.0));

      // Silhouettes far to near so closer objects overwrite.
      std::vector<int> order(objects.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto da = objects[static_cast<size_t>(a)].box.center,
                   db = objects[static_cast<size_t>(b)].box.center;
        return da.x * da.x + da.y * da.y > db.x * db.x + db.y * db.y;
      });
      for (int oi : order)
        render_silhouette(s.fmap, calib, objects[static_cast<size_t>(oi)].box,
                          objects[static_cast<size_t>(oi)].class_id);

      for (const TrackedBox& o : objects) {
        s.gts.push_back({o.box, o.class_id, o.track_id});
        const double dist = std::sqrt(o.box.center.x * o.box.center.x +
                                      o.box.center.y * o.box.center.y);
        const double keep = keep_probability(spec, dist);
        // Surface sampling: faces weighted by area.
        const double al = o.box.w * o.box.h, aw = o.box.l * o.box.h, ah = o.box.l * o.box.w;
        const double area_total = 2 * (al + aw + ah);
        for (int n = 0; n < spec.points_per_object; ++n) {
          const double face_u = rng.uniform(0.0, area_total);
          const double u1 = rng.uniform(-0.5, 0.5), u2 = rng.uniform(-0.5, 0.5);
          geom::Vec3 c;
          if (face_u < 2 * al) {
            c = {face_u < al ? 0.5 * o.box.l : -0.5 * o.box.l, u1 * o.box.w, u2 * o.box.h};
          } else if (face_u < 2 * (al + aw)) {
            c = {u1 * o.box.l, face_u < 2 * al + aw ? 0.5 * o.box.w : -0.5 * o.box.w,
                 u2 * o.box.h};
          } else {
            c = {u1 * o.box.l, u2 * o.box.w,
                 face_u < 2 * (al + aw) + ah ? 0.5 * o.box.h : -0.5 * o.box.h};
          }
          const bool kept = rng.uniform() < keep;
          geom::Vec3 p = geom::canonical_inverse(o.box, c);
          p.x += spec.noise_sigma * rng.normal();
          p.y += spec.noise_sigma * rng.normal();
          p.z += spec.noise_sigma * rng.normal();
          const double intensity = rng.uniform(0.0, 1.0);
          if (!kept || !spec.range.contains(p)) continue;
          s.cloud.coords.push_back(p);
          s.cloud.features.push_back(intensity);
        }
      }
      for (int n = 0; n < spec.background_points; ++n) {
        for (int attempt = 0; attempt < 50; ++attempt) {
          geom::Vec3 p{rng.uniform(spec.range.min.x, spec.range.max.x),
                       rng.uniform(spec.range.min.y, spec.range.max.y),
                       rng.uniform(spec.range.min.z, spec.range.max.z)};
          bool inside = false;
          for (const TrackedBox& o : objects)
            if (pc::point_in_box(o.box, p)) inside = true;
          if (inside) continue;
          s.cloud.coords.push_back(p);
          s.cloud.features.push_back(rng.uniform(0.0, 1.0));
          break;
        }
      }
      scenes.push_back(std::move(s));
    }
  }
  return scenes;
}

void write_dataset(const std::string& dir, const std::vector<SceneSample>& scenes) {
  std::filesystem::create_directories(dir);
  std::ofstream frames(dir + "/frames.txt");
  if (!frames) fail("write_dataset: cannot open " + dir + "/frames.txt");
  for (const SceneSample& s : scenes) {
    const std::string base = dir + "/" + frame_name(s.frame_id);
    frames << frame_name(s.frame_id) << '\n';
    write_velodyne_bin(base + ".bin", s.cloud);
    write_calib(base + "_calib.txt", s.calib);
    write_labels(base + "_label.txt", s.gts, s.calib, s.image_w, s.image_h);
    img::save_fmap(base + ".fmap", s.fmap);
  }
  if (!frames) fail("write_dataset: write failed for frames.txt");
  frames.close();
  eval::save_ground_truth(dir + "/gt.txt", to_gt_records(scenes));
}

std::vector<SceneSample> read_dataset(const std::string& dir) {
  std::ifstream frames(dir + "/frames.txt");
  if (!frames) fail("read_dataset: cannot open " + dir + "/frames.txt");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(frames, line))
    if (!line.empty()) names.push_back(line);

  std::vector<SceneSample> scenes;
  scenes.reserve(names.size());
  for (const std::string& name : names) {
    const std::string base = dir + "/" + name;
    SceneSample s;
    s.frame_id = std::stoi(name);
    s.cloud = read_velodyne_bin(base + ".bin");
    s.calib = read_calib(base + "_calib.txt");
    s.fmap = img::load_fmap(base + ".fmap");
    s.image_w = static_cast<int>(std::lround(s.fmap.image_width()));
    s.image_h = static_cast<int>(std::lround(s.fmap.image_height()));
    for (const LabelRecord& rec : read_label_records(base + "_label.txt")) {
      if (class_id_from_type(rec.type) < 0) continue;
      s.gts.push_back(label_to_gt(rec, s.calib));
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

std::vector<densify::TrackedObservation> to_observations(
    const std::vector<SceneSample>& scenes) {
  std::vector<densify::TrackedObservation> obs;
  for (const SceneSample& s : scenes) {
    for (const GtObject& gt : s.gts) {
      densify::TrackedObservation o;
      o.frame_id = s.frame_id;
      o.object_id = gt.track_id;
      o.class_id = gt.class_id;
      o.box = gt.box;
      for (const geom::Vec3& p : s.cloud.coords)
        if (pc::point_in_box(gt.box, p)) o.points.push_back(p);
      if (!o.points.empty()) obs.push_back(std::move(o));
    }
  }
  return obs;
}

std::vector<eval::GtRecord> to_gt_records(const std::vector<SceneSample>& scenes) {
  std::vector<eval::GtRecord> records;
  for (const SceneSample& s : scenes) {
    for (const GtObject& gt : s.gts) {
      eval::GtRecord r;
      r.frame_id = s.frame_id;
      r.class_name = class_names()[static_cast<size_t>(gt.class_id)];
      r.box = gt.box;
      r.point_count = pc::count_points_in_box(gt.box, s.cloud.coords);
      const LabelRecord rec = gt_to_label(gt, s.calib, s.image_w, s.image_h);
      r.bbox_height = rec.bbox.height();
      r.occlusion = rec.occlusion;
      r.truncation = rec.truncation;
      records.push_back(std::move(r));
    }
  }
  return records;
}

SceneSample augment(const SceneSample& sample, const AugmentConfig& cfg,
                    const std::vector<densify::DenseObjectTemplate>& templates, Rng& rng) {
  SceneSample s = sample;
  if (s.cloud.feature_width != 1) fail("augment: needs intensity-only features");

  // Template pasting first, in the un-transformed frame so the silhouette
  // patch matches the pasted points' projection.
  for (int n = 0; n < cfg.gt_samples && !templates.empty(); ++n) {
    const densify::DenseObjectTemplate& t =
        templates[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(templates.size()) - 1))];
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double d = rng.uniform(cfg.gt_sample_distance[0], cfg.gt_sample_distance[1]);
      const double az = rng.uniform(-0.35, 0.35);
      const geom::Vec3 center{d * std::cos(az), d * std::sin(az),
                              -2.0 + 0.5 * t.dims.z + rng.uniform(0.0, 0.3)};
      const geom::Box3D box = geom::make_box3d(center, t.dims.x, t.dims.y, t.dims.z,
                                               rng.uniform(-M_PI / 4, M_PI / 4));
      bool collides = false;
      for (const GtObject& gt : s.gts)
        if (geom::iou_bev(box, gt.box) > 0.0) collides = true;
      if (collides) continue;
      for (const geom::Vec3& cp : t.points) {
        s.cloud.coords.push_back(geom::canonical_inverse(box, cp));
        s.cloud.features.push_back(rng.uniform(0.0, 1.0));
      }
      render_silhouette(s.fmap, s.calib, box, t.class_id);
      s.gts.push_back({box, t.class_id, 1000000 + t.object_id});
      break;
    }
  }

  const bool do_flip = cfg.flip && rng.uniform() < 0.5;
  const double scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
  const double theta = rng.uniform(cfg.rotation_range[0], cfg.rotation_range[1]);
  const double c = std::cos(theta), sn = std::sin(theta);
  auto transform = [&](geom::Vec3 p) {
    if (do_flip) p.y = -p.y;
    p = scale * p;
    return geom::Vec3{c * p.x - sn * p.y, sn * p.x + c * p.y, p.z};
  };
  for (geom::Vec3& p : s.cloud.coords) p = transform(p);
  for (GtObject& gt : s.gts) {
    gt.box.center = transform(gt.box.center);
    double yaw = do_flip ? -gt.box.yaw : gt.box.yaw;
    gt.box = geom::make_box3d(gt.box.center, scale * gt.box.l, scale * gt.box.w,
                              scale * gt.box.h, geom::wrap_angle(yaw + theta));
  }
  return s;
}

}  // namespace pointforge::data
