// pointforge CLI: synthetic data generation, dense template building,
// training, inference, and evaluation over one shared config file.
//
// Layout: the config's data.dir holds the dataset (gen-synthetic writes it),
// data.store_dir holds the dense template store (densify writes it), and
// --out collects run outputs (loss CSV, checkpoint, detections, point dumps,
// report, PR curves). Every command is deterministic under a fixed seed:
// output files carry no timestamps and reruns are byte-identical.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pointforge/config.hpp"
#include "pointforge/dataset.hpp"
#include "pointforge/densify.hpp"
#include "pointforge/eval.hpp"
#include "pointforge/model.hpp"
#include "pointforge/parallel.hpp"
#include "pointforge/rng.hpp"

namespace pf = pointforge;

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

// Shortest round-trippable decimal form; keeps the CSV invariant checkable.
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

pf::cfg::RunConfig load_run_config(const CliOptions& opt) {
  pf::cfg::RunConfig rc = pf::cfg::run_config_from(pf::cfg::Config::load(opt.config_path));
  if (opt.seed_set) rc.seed = opt.seed;
  return rc;
}

std::vector<pf::data::SceneSample> load_scenes(const pf::cfg::RunConfig& rc) {
  std::vector<pf::data::SceneSample> scenes = pf::data::read_dataset(rc.data_dir);
  if (scenes.empty()) throw std::runtime_error("dataset at " + rc.data_dir + " has no scenes");
  return scenes;
}

std::vector<pf::densify::DenseObjectTemplate> load_templates(const pf::cfg::RunConfig& rc) {
  if (!std::filesystem::is_directory(rc.store_dir)) return {};
  return pf::densify::load_template_store(rc.store_dir);
}

int cmd_gen_synthetic(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const std::vector<pf::data::SceneSample> scenes = pf::data::gen_synthetic(rc.synth, rc.seed);
  pf::data::write_dataset(rc.data_dir, scenes);
  std::cout << "wrote " << scenes.size() << " scenes to " << rc.data_dir << "\n";
  return 0;
}

int cmd_densify(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const std::vector<pf::data::SceneSample> scenes = load_scenes(rc);
  const std::vector<pf::densify::TrackedObservation> obs = pf::data::to_observations(scenes);
  pf::densify::DatabaseOptions db;
  db.density_threshold = rc.density_threshold;
  const std::vector<pf::densify::DenseObjectTemplate> templates =
      pf::densify::build_gt_database(obs, db);
  const std::vector<std::string> errors =
      pf::densify::save_template_store(rc.store_dir, templates, pf::data::class_names());
  if (!errors.empty()) {
    for (const std::string& e : errors) std::cerr << "error: " << e << "\n";
    return 1;
  }
  int dense = 0;
  for (const auto& t : templates)
    if (static_cast<int>(t.points.size()) >= rc.density_threshold) ++dense;
  std::cout << "wrote " << templates.size() << " templates (" << dense << " at density) to "
            << rc.store_dir << "\n";
  return 0;
}

int cmd_train(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const std::vector<pf::data::SceneSample> scenes = load_scenes(rc);
  const std::vector<pf::densify::DenseObjectTemplate> templates = load_templates(rc);

  pf::model::Detector det = pf::model::detector_init(rc, rc.seed);
  std::vector<pf::ad::Tensor> params = det.parameters();
  pf::nn::AdamState adam = pf::nn::adam_init(rc.lr, params);
  pf::Rng aug_rng(rc.seed ^ 0x9E3779B97F4A7C15ULL);

  std::filesystem::create_directories(opt.out_dir);
  const std::string csv_path = opt.out_dir + "/losses.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open " + csv_path);
  csv << "iteration,rpn_cls,rpn_reg,rcnn_conf,rcnn_reg,rpg_offset,rpg_score,total\n";

  const int batch = std::max(1, rc.batch);
  std::vector<pf::data::SceneSample> batch_scenes(static_cast<size_t>(batch));
  for (int it = 0; it < rc.iterations; ++it) {
    std::vector<const pf::data::SceneSample*> batch_ptrs;
    for (int b = 0; b < batch; ++b) {
      const size_t si = (static_cast<size_t>(it) * batch + b) % scenes.size();
      batch_scenes[static_cast<size_t>(b)] =
          rc.augment_enable ? pf::data::augment(scenes[si], rc.aug, templates, aug_rng)
                            : scenes[si];
      batch_ptrs.push_back(&batch_scenes[static_cast<size_t>(b)]);
    }
    const std::uint64_t step_seed =
        rc.seed + 1000003ULL * static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(batch);
    const pf::model::LossBreakdown lb =
        pf::model::train_step_batch(det, batch_ptrs, templates, adam, params, step_seed);
    csv << it << ',' << fmt(lb.rpn_cls) << ',' << fmt(lb.rpn_reg) << ',' << fmt(lb.rcnn_conf)
        << ',' << fmt(lb.rcnn_reg) << ',' << fmt(lb.rpg_offset) << ',' << fmt(lb.rpg_score)
        << ',' << fmt(lb.total) << '\n';
    if (it == 0 || (it + 1) % 50 == 0 || it + 1 == rc.iterations)
      std::cout << "iter " << (it + 1) << "/" << rc.iterations << " total " << fmt(lb.total)
                << "\n";
  }
  if (!csv) throw std::runtime_error("write failed for " + csv_path);
  csv.close();

  const std::string ckpt_path = opt.out_dir + "/model.ckpt";
  pf::nn::save_checkpoint(ckpt_path, det.named_params());
  std::cout << "wrote " << csv_path << " and " << ckpt_path << "\n";
  return 0;
}

int cmd_infer(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const std::vector<pf::data::SceneSample> scenes = load_scenes(rc);
  pf::model::Detector det = pf::model::detector_init(rc, rc.seed);
  pf::nn::NamedParams np = det.named_params();
  pf::nn::load_checkpoint_into(opt.out_dir + "/model.ckpt", np);

  // Scenes are independent; tapes only read the shared parameters.
  std::vector<pf::model::InferenceResult> results(scenes.size());
  pf::par::parallel_for(static_cast<int>(scenes.size()), [&](int i) {
    results[static_cast<size_t>(i)] = pf::model::infer_scene(det, scenes[static_cast<size_t>(i)]);
  });

  std::vector<pf::head::DetectionRecord> records;
  std::vector<pf::rpg::GptsRoi> points;
  for (size_t i = 0; i < scenes.size(); ++i) {
    for (size_t j = 0; j < results[i].detections.size(); ++j) {
      const pf::head::Detection& d = results[i].detections[j];
      records.push_back({scenes[i].frame_id,
                         pf::data::class_names()[static_cast<size_t>(d.class_id)], d.box,
                         d.confidence});
      points.push_back(results[i].roi_points[j]);
    }
  }
  std::filesystem::create_directories(opt.out_dir);
  pf::head::save_detections(opt.out_dir + "/detections.txt", records);
  pf::rpg::save_gpts(opt.out_dir + "/roi_points.gpts", points);
  std::cout << "wrote " << records.size() << " detections over " << scenes.size()
            << " scenes to " << opt.out_dir << "\n";
  return 0;
}

pf::eval::EvalReport run_evaluation(const pf::cfg::RunConfig& rc, const CliOptions& opt) {
  const std::vector<pf::head::DetectionRecord> dets =
      pf::head::load_detections(opt.out_dir + "/detections.txt");
  const std::vector<pf::eval::GtRecord> gts =
      pf::eval::load_ground_truth(rc.data_dir + "/gt.txt");
  return pf::eval::evaluate(dets, gts, rc.eval);
}

int cmd_eval(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const pf::eval::EvalReport report = run_evaluation(rc, opt);
  std::filesystem::create_directories(opt.out_dir);
  const std::string path = opt.out_dir + "/eval_report.txt";
  pf::eval::write_report(path, report);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", report.map_3d);
  std::cout << "map_3d " << buf << " over " << report.defined_classes
            << " defined classes; wrote " << path << "\n";
  return 0;
}

int cmd_plot_pr(const CliOptions& opt) {
  const pf::cfg::RunConfig rc = load_run_config(opt);
  const pf::eval::EvalReport report = run_evaluation(rc, opt);
  std::filesystem::create_directories(opt.out_dir);
  pf::eval::write_pr_csv(opt.out_dir, report);
  std::cout << "wrote PR curves for " << report.classes.size() << " classes to " << opt.out_dir
            << "\n";
  return 0;
}

void add_common(CLI::App* sub, CliOptions& opt) {
  sub->add_option("--config", opt.config_path, "run configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", opt.seed, "override the config seed");
  sub->add_option("--out", opt.out_dir, "working directory for run outputs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pointforge: LiDAR-camera fusion 3D detection pipeline"};
  app.require_subcommand(1);
  CliOptions opt;

  CLI::App* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
  CLI::App* den = app.add_subcommand("densify", "build the dense object template store");
  CLI::App* tra = app.add_subcommand("train", "train the detector");
  CLI::App* inf = app.add_subcommand("infer", "run inference over the dataset");
  CLI::App* eva = app.add_subcommand("eval", "evaluate detections against ground truth");
  CLI::App* plt = app.add_subcommand("plot-pr", "write precision-recall CSV curves");
  for (CLI::App* sub : {gen, den, tra, inf, eva, plt}) add_common(sub, opt);

  CLI11_PARSE(app, argc, argv);
  opt.seed_set = app.get_subcommands()[0]->count("--seed") > 0;

  try {
    CLI::App* sub = app.get_subcommands()[0];
    if (sub == gen) return cmd_gen_synthetic(opt);
    if (sub == den) return cmd_densify(opt);
    if (sub == tra) return cmd_train(opt);
    if (sub == inf) return cmd_infer(opt);
    if (sub == eva) return cmd_eval(opt);
    return cmd_plot_pr(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
