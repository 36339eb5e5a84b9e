#include "pointforge/densify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <unordered_set>

#include "binio.hpp"
#include "pointforge/pointcloud.hpp"

namespace pointforge::densify {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("densify: " + msg); }

bool inside_dims(const geom::Vec3& p, const geom::Vec3& dims, double tol) {
  return std::abs(p.x) <= 0.5 * dims.x + tol && std::abs(p.y) <= 0.5 * dims.y + tol &&
         std::abs(p.z) <= 0.5 * dims.z + tol;
}

}  // namespace

std::vector<geom::Vec3> dedup_points(const std::vector<geom::Vec3>& points, double cell) {
  if (!(cell > 0.0)) fail("dedup cell must be positive");
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(points.size() * 2);
  std::vector<geom::Vec3> out;
  out.reserve(points.size());
  for (const geom::Vec3& p : points) {
    // 21-bit signed cell coordinates packed into one key; cells cover +-2e4
    // cells per axis, far beyond any object extent at 2 cm.
    const auto cx = static_cast<std::int64_t>(std::floor(p.x / cell));
    const auto cy = static_cast<std::int64_t>(std::floor(p.y / cell));
    const auto cz = static_cast<std::int64_t>(std::floor(p.z / cell));
    const std::uint64_t mask = (1u << 21) - 1;
    const std::uint64_t key = ((static_cast<std::uint64_t>(cx) & mask) << 42) |
                              ((static_cast<std::uint64_t>(cy) & mask) << 21) |
                              (static_cast<std::uint64_t>(cz) & mask);
    if (seen.insert(key).second) out.push_back(p);
  }
  return out;
}

void check_template(const DenseObjectTemplate& t) {
  if (t.points.empty()) fail("template has no points");
  if (!(t.dims.x > 0 && t.dims.y > 0 && t.dims.z > 0)) fail("template dims must be positive");
  for (const geom::Vec3& p : t.points)
    if (!inside_dims(p, t.dims, 1e-6)) fail("template point outside its canonical box");
}

DenseObjectTemplate aggregate_by_id(const std::vector<TrackedObservation>& observations,
                                    double dedup_cell) {
  if (observations.empty()) fail("aggregate_by_id: no observations");
  std::vector<const TrackedObservation*> ordered;
  ordered.reserve(observations.size());
  for (const TrackedObservation& o : observations) {
    if (o.object_id != observations.front().object_id)
      fail("aggregate_by_id: mixed object ids");
    if (o.class_id != observations.front().class_id) fail("aggregate_by_id: mixed classes");
    if (o.points.empty()) fail("aggregate_by_id: observation with no points");
    for (const geom::Vec3& p : o.points)
      if (!pc::point_in_box(o.box, p)) fail("aggregate_by_id: point outside its box");
    ordered.push_back(&o);
  }
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->frame_id < b->frame_id; });

  DenseObjectTemplate t;
  t.object_id = observations.front().object_id;
  t.class_id = observations.front().class_id;
  t.source_frames = static_cast<int>(observations.size());
  t.aggregated = true;
  std::vector<geom::Vec3> merged;
  for (const TrackedObservation* o : ordered) {
    t.dims.x = std::max(t.dims.x, o->box.l);
    t.dims.y = std::max(t.dims.y, o->box.w);
    t.dims.z = std::max(t.dims.z, o->box.h);
    const std::vector<geom::Vec3> canon = geom::canonical_transform(o->box, o->points);
    merged.insert(merged.end(), canon.begin(), canon.end());
  }
  t.points = dedup_points(merged, dedup_cell);
  check_template(t);
  return t;
}

DenseObjectTemplate mirror_symmetric(const DenseObjectTemplate& t,
                                     const std::vector<int>& symmetric_classes,
                                     double dedup_cell) {
  check_template(t);
  DenseObjectTemplate out = t;
  if (std::find(symmetric_classes.begin(), symmetric_classes.end(), t.class_id) ==
      symmetric_classes.end())
    return out;  // asymmetric class: no-op, mirrored stays false
  std::vector<geom::Vec3> merged = t.points;
  for (const geom::Vec3& p : t.points) merged.push_back({p.x, -p.y, p.z});
  out.points = dedup_points(merged, dedup_cell);
  out.mirrored = true;
  check_template(out);
  return out;
}

DenseObjectTemplate best_match_complete(const DenseObjectTemplate& sparse,
                                        const std::vector<DenseObjectTemplate>& library, int k,
                                        double dedup_cell) {
  check_template(sparse);
  if (k < 1) fail("best_match_complete: k must be >= 1");
  // (chamfer score, library index) over size-compatible candidates.
  std::vector<std::pair<double, int>> ranked;
  std::vector<std::vector<geom::Vec3>> scaled(library.size());
  for (size_t i = 0; i < library.size(); ++i) {
    const DenseObjectTemplate& cand = library[i];
    const double rx = cand.dims.x / sparse.dims.x, ry = cand.dims.y / sparse.dims.y,
                 rz = cand.dims.z / sparse.dims.z;
    if (std::abs(rx - 1) > 0.1 || std::abs(ry - 1) > 0.1 || std::abs(rz - 1) > 0.1) continue;
    scaled[i].reserve(cand.points.size());
    for (const geom::Vec3& p : cand.points) scaled[i].push_back({p.x / rx, p.y / ry, p.z / rz});
    ranked.emplace_back(pc::chamfer_one_sided(sparse.points, scaled[i]), static_cast<int>(i));
  }
  DenseObjectTemplate out = sparse;
  if (ranked.empty()) return out;  // no compatible donor: unchanged, matched stays false
  std::sort(ranked.begin(), ranked.end());
  std::vector<geom::Vec3> merged = sparse.points;
  for (int j = 0; j < std::min<int>(k, static_cast<int>(ranked.size())); ++j) {
    const std::vector<geom::Vec3>& donor = scaled[static_cast<size_t>(ranked[j].second)];
    merged.insert(merged.end(), donor.begin(), donor.end());
  }
  out.points = dedup_points(merged, dedup_cell);
  out.matched = true;
  check_template(out);
  return out;
}

std::vector<DenseObjectTemplate> build_gt_database(
    const std::vector<TrackedObservation>& observations, const DatabaseOptions& opts) {
  std::map<std::uint64_t, std::vector<TrackedObservation>> tracks;
  for (const TrackedObservation& o : observations) tracks[o.object_id].push_back(o);

  std::vector<DenseObjectTemplate> templates;
  templates.reserve(tracks.size());
  for (const auto& [id, obs] : tracks) {
    DenseObjectTemplate t = aggregate_by_id(obs, opts.dedup_cell);
    templates.push_back(mirror_symmetric(t, opts.symmetric_classes, opts.dedup_cell));
  }

  std::vector<DenseObjectTemplate> library;
  for (const DenseObjectTemplate& t : templates)
    if (static_cast<int>(t.points.size()) >= opts.density_threshold) library.push_back(t);
  for (DenseObjectTemplate& t : templates)
    if (static_cast<int>(t.points.size()) < opts.density_threshold)
      t = best_match_complete(t, library, opts.merge_candidates, opts.dedup_cell);
  return templates;
}

std::vector<std::string> save_template_store(const std::string& dir,
                                             const std::vector<DenseObjectTemplate>& templates,
                                             const std::vector<std::string>& class_names) {
  std::map<int, std::vector<const DenseObjectTemplate*>> by_class;
  for (const DenseObjectTemplate& t : templates) {
    if (t.class_id < 0 || t.class_id >= static_cast<int>(class_names.size()))
      fail("save_template_store: class id without a name");
    by_class[t.class_id].push_back(&t);
  }
  std::filesystem::create_directories(dir);
  std::vector<std::string> errors;
  for (const auto& [cid, group] : by_class) {
    const std::string path = dir + "/" + class_names[static_cast<size_t>(cid)] + ".dgtb";
    try {
      std::ofstream os(path, std::ios::binary);
      if (!os) throw std::runtime_error("cannot open " + path);
      os.write("DGTB", 4);
      binio::write_u32(os, 1);  // version
      binio::write_u32(os, static_cast<std::uint32_t>(group.size()));
      for (const DenseObjectTemplate* t : group) {
        binio::write_u64(os, t->object_id);
        binio::write_u8(os, static_cast<std::uint8_t>(t->class_id));
        binio::write_f32(os, static_cast<float>(t->dims.x));
        binio::write_f32(os, static_cast<float>(t->dims.y));
        binio::write_f32(os, static_cast<float>(t->dims.z));
        binio::write_u32(os, static_cast<std::uint32_t>(t->points.size()));
        for (const geom::Vec3& p : t->points) {
          binio::write_f32(os, static_cast<float>(p.x));
          binio::write_f32(os, static_cast<float>(p.y));
          binio::write_f32(os, static_cast<float>(p.z));
        }
      }
      if (!os) throw std::runtime_error("write failed for " + path);
    } catch (const std::exception& e) {
      errors.push_back(e.what());
      std::remove(path.c_str());
    }
  }
  return errors;
}

std::vector<DenseObjectTemplate> load_template_store(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".dgtb") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<DenseObjectTemplate> out;
  for (const auto& path : files) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "DGTB") fail("bad magic in " + path.string());
    const std::uint32_t version = binio::read_u32(is, "template store version");
    if (version != 1) fail("unsupported template store version in " + path.string());
    const std::uint32_t count = binio::read_u32(is, "template store count");
    for (std::uint32_t i = 0; i < count; ++i) {
      DenseObjectTemplate t;
      t.object_id = binio::read_u64(is, "template id");
      t.class_id = binio::read_u8(is, "template class");
      t.dims.x = binio::read_f32(is, "template dims");
      t.dims.y = binio::read_f32(is, "template dims");
      t.dims.z = binio::read_f32(is, "template dims");
      const std::uint32_t m = binio::read_u32(is, "template point count");
      t.points.reserve(m);
      for (std::uint32_t j = 0; j < m; ++j) {
        geom::Vec3 p;
        p.x = binio::read_f32(is, "template point");
        p.y = binio::read_f32(is, "template point");
        p.z = binio::read_f32(is, "template point");
        t.points.push_back(p);
      }
      t.aggregated = true;  // provenance flags are not persisted
      out.push_back(std::move(t));
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.object_id < b.object_id; });
  return out;
}

}  // namespace pointforge::densify
