// Pipeline driver: gen-scene, calibrate, subsample, train, finetune, infer,
// eval, report. Every subcommand reads an optional pipeline config JSON;
// flags override the config. Exit codes: 0 ok, 1 module error, 2 usage or
// missing artifact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hdv/density.hpp"
#include "hdv/infer.hpp"
#include "hdv/metrics.hpp"
#include "hdv/model.hpp"
#include "hdv/params.hpp"
#include "hdv/pipeline.hpp"
#include "hdv/ply_io.hpp"
#include "hdv/scene.hpp"
#include "hdv/subsample.hpp"
#include "hdv/train.hpp"

namespace {

struct MissingArtifact {
  std::string path;
};

void need_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifact{path};
}

const std::vector<std::array<uint8_t, 3>> kPalette = {
    {230, 80, 60},  {70, 140, 220}, {90, 190, 90},  {240, 200, 60},
    {170, 90, 200}, {100, 210, 210}, {240, 140, 40}, {140, 140, 140}};

void stamp_artifact(const std::string& path, const hdv::PipelineConfig& cfg) {
  nlohmann::json j{{"config_hash", hdv::hex64(hdv::config_hash(cfg))},
                   {"seed", cfg.seed},
                   {"rng_version", hdv::kRngVersion}};
  hdv::write_file_atomic(path + ".meta.json", j.dump(2) + "\n");
}

void save_checkpoint_atomic(const std::string& path, const hdv::ParamStore& ps,
                            const std::string& meta) {
  hdv::save_checkpoint(path + ".tmp", ps, meta);
  std::error_code ec;
  std::filesystem::rename(path + ".tmp", path, ec);
  if (ec) throw hdv::IoError("cannot move checkpoint into place: " + ec.message());
}

// Restore a checkpoint into a fresh store; the model config embedded in the
// checkpoint wins over the local one so shapes always match the tensors.
std::string load_model_config(const std::string& ckpt_path, hdv::PipelineConfig& cfg,
                              hdv::ParamStore& ps) {
  need_file(ckpt_path);
  const std::string meta = hdv::load_checkpoint(ckpt_path, ps);
  auto m = hdv::parse_checkpoint_meta(meta);
  if (m.config.contains("model")) hdv::apply_model_json(cfg.model, m.config.at("model"));
  if (m.config.contains("class_names"))
    cfg.class_names = m.config.at("class_names").get<std::vector<std::string>>();
  return m.stage;
}

hdv::StateThresholds thresholds_for(const std::string& path) {
  need_file(path);
  return hdv::load_thresholds(path);
}

hdv::PointCloud cloud_for(const std::string& path) {
  need_file(path);
  return hdv::load_cloud(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"density-aware point cloud segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed_flag = 0;
  int threads = 1;
  app.add_option("--config", config_path, "pipeline config JSON")->configurable(false);
  auto* seed_opt = app.add_option("--seed", seed_flag, "override config seed");
  app.add_option("--threads", threads, "worker cap for parallel stages");

  auto* gen = app.add_subcommand("gen-scene", "ray-cast a synthetic labeled scan");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "scene spec JSON")->required();
  gen->add_option("--out", gen_out, "output cloud path")->required();

  auto* cal = app.add_subcommand("calibrate", "fit density state thresholds on training clouds");
  std::vector<std::string> cal_clouds;
  std::string cal_out;
  std::vector<double> cal_fracs{0.98, 0.85, 0.55, 0.25, 0.05};
  double cal_t0 = hdv::kDefaultT0;
  int cal_delta_max = hdv::kDefaultDeltaMax;
  cal->add_option("--cloud", cal_clouds, "training cloud(s)")->required();
  cal->add_option("--out", cal_out, "thresholds JSON path")->required();
  cal->add_option("--fractions", cal_fracs, "five decreasing >=t_d target fractions, t_4 first")
      ->expected(5);
  cal->add_option("--t0", cal_t0, "densest lattice threshold");
  cal->add_option("--delta-max", cal_delta_max, "lattice depth");

  auto* sub = app.add_subcommand("subsample", "scan-line-preserving grid subsampling");
  std::string sub_cloud, sub_out;
  int sub_group = -1;
  int64_t sub_count = -1;
  sub->add_option("--cloud", sub_cloud, "input cloud")->required();
  sub->add_option("--out", sub_out, "output cloud")->required();
  sub->add_option("--target-group", sub_group, "homogenize to density group delta");
  sub->add_option("--target-count", sub_count, "subsample to an exact point count");

  auto* trn = app.add_subcommand("train", "stage 1: backbone + per-density classifiers");
  std::vector<std::string> trn_cloud;
  std::string trn_thr, trn_out, trn_metrics;
  trn->add_option("--cloud", trn_cloud, "labeled training cloud(s)")->required();
  trn->add_option("--thresholds", trn_thr, "state thresholds JSON")->required();
  trn->add_option("--out", trn_out, "checkpoint path")->required();
  trn->add_option("--metrics", trn_metrics, "metrics JSONL path (default <out>.metrics.jsonl)");

  auto* fin = app.add_subcommand("finetune", "stage 2: lock backbone, tune final classifier");
  std::vector<std::string> fin_cloud;
  std::string fin_ckpt, fin_thr, fin_out, fin_metrics;
  bool fin_fco = false;
  fin->add_option("--checkpoint", fin_ckpt, "stage-1 checkpoint (omit with --fco)");
  fin->add_option("--cloud", fin_cloud, "labeled training cloud(s)")->required();
  fin->add_option("--thresholds", fin_thr, "state thresholds JSON")->required();
  fin->add_option("--out", fin_out, "checkpoint path")->required();
  fin->add_option("--metrics", fin_metrics, "metrics JSONL path (default <out>.metrics.jsonl)");
  fin->add_flag("--fco", fin_fco, "train everything from scratch with the final loss only");

  auto* inf = app.add_subcommand("infer", "segment a cloud with sphere-cover fusion");
  std::string inf_ckpt, inf_cloud, inf_thr, inf_out, inf_labels, inf_orig;
  std::string inf_mode = "final";
  inf->add_option("--checkpoint", inf_ckpt, "trained checkpoint")->required();
  inf->add_option("--cloud", inf_cloud, "cloud to segment")->required();
  inf->add_option("--thresholds", inf_thr, "state thresholds JSON")->required();
  inf->add_option("--out", inf_out, "colored prediction PLY")->required();
  inf->add_option("--labels-out", inf_labels, "flat label file (default <out>.labels.txt)");
  inf->add_option("--original", inf_orig, "upsample predictions onto this cloud");
  inf->add_option("--mode", inf_mode, "final | tco");

  auto* evl = app.add_subcommand("eval", "per-density MIoU against ground truth");
  std::string evl_cloud, evl_pred, evl_thr, evl_out;
  evl->add_option("--cloud", evl_cloud, "labeled cloud")->required();
  evl->add_option("--pred", evl_pred, "flat label file from infer")->required();
  evl->add_option("--thresholds", evl_thr, "state thresholds JSON")->required();
  evl->add_option("--out", evl_out, "metrics CSV path")->required();

  auto* rep = app.add_subcommand("report", "render metrics table and density histogram");
  std::string rep_cloud, rep_pred, rep_thr, rep_dir;
  rep->add_option("--cloud", rep_cloud, "labeled cloud")->required();
  rep->add_option("--pred", rep_pred, "flat label file from infer")->required();
  rep->add_option("--thresholds", rep_thr, "state thresholds JSON")->required();
  rep->add_option("--out-dir", rep_dir, "directory for report.csv/report.md/histogram.csv")
      ->required();

  for (auto* s : app.get_subcommands({})) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int r = app.exit(e);
    return r == 0 ? 0 : 2;
  }

  try {
    if (!config_path.empty()) need_file(config_path);
    hdv::PipelineConfig cfg = hdv::load_pipeline_config(config_path);
    if (seed_opt->count() > 0) {
      cfg.seed = seed_flag;
      cfg.train.seed = seed_flag;
    }
    auto path = [&](const std::string& p) { return hdv::resolve_path(cfg, p); };

    if (gen->parsed()) {
      need_file(path(gen_spec));
      const auto spec = hdv::load_scene_spec(path(gen_spec));
      const auto cloud = hdv::generate_scene(spec, cfg.seed, threads);
      hdv::save_cloud(path(gen_out), cloud);
      stamp_artifact(path(gen_out), cfg);
      std::cout << "generated " << cloud.size() << " points -> " << path(gen_out) << "\n";
    } else if (cal->parsed()) {
      std::vector<hdv::DensityProfile> profiles;
      for (const auto& c : cal_clouds) {
        const auto cloud = cloud_for(path(c));
        hdv::SpatialIndex index(cloud.pos);
        const int k = std::min(cfg.model.k_neighbors, static_cast<int>(cloud.size()) - 1);
        profiles.push_back(hdv::estimate_density(hdv::knn(index, k)));
      }
      std::array<double, 5> fr;
      std::copy(cal_fracs.begin(), cal_fracs.end(), fr.begin());
      const auto st = hdv::calibrate_states(profiles, fr, cal_t0, cal_delta_max);
      hdv::save_thresholds(path(cal_out), st, cfg.seed, hdv::hex64(hdv::config_hash(cfg)));
      std::cout << "thresholds";
      for (double t : st.t) std::cout << " " << t;
      std::cout << " -> " << path(cal_out) << "\n";
    } else if (sub->parsed()) {
      if ((sub_group < 0) == (sub_count < 0))
        throw hdv::ValidationError("give exactly one of --target-group / --target-count");
      const auto cloud = cloud_for(path(sub_cloud));
      hdv::SpatialIndex index(cloud.pos);
      const int k = std::min(cfg.model.k_neighbors, static_cast<int>(cloud.size()) - 1);
      const auto prof = hdv::estimate_density(hdv::knn(index, k));
      const auto groups = hdv::assign_groups(prof, hdv::group_thresholds());
      std::vector<int> keep;
      if (sub_group >= 0) {
        keep = hdv::lidar_grid_subsample(cloud, groups, sub_group);
      } else {
        hdv::Rng rng(cfg.seed);
        keep = hdv::lidar_grid_subsample(cloud, groups, static_cast<size_t>(sub_count), rng);
      }
      hdv::save_cloud(path(sub_out), cloud.select(keep));
      stamp_artifact(path(sub_out), cfg);
      std::cout << "kept " << keep.size() << " of " << cloud.size() << " points -> "
                << path(sub_out) << "\n";
    } else if (trn->parsed()) {
      const auto st = thresholds_for(path(trn_thr));
      std::vector<hdv::TrainScene> scenes;
      for (const auto& c : trn_cloud)
        scenes.push_back(hdv::prepare_scene(cloud_for(path(c)), cfg.model.k_neighbors, st));
      hdv::ParamStore ps;
      hdv::HdvModel model(cfg.model, ps, cfg.seed);
      const std::string mpath =
          trn_metrics.empty() ? path(trn_out) + ".metrics.jsonl" : path(trn_metrics);
      std::ofstream metrics(mpath, std::ios::trunc);
      if (!metrics) throw hdv::IoError("cannot write metrics log " + mpath);
      const auto rep_last = hdv::train_backbone(model, ps, scenes, st, cfg.train, &metrics);
      save_checkpoint_atomic(path(trn_out), ps, hdv::make_checkpoint_meta("backbone", cfg));
      stamp_artifact(path(trn_out), cfg);
      std::cout << "trained backbone, last L_total " << rep_last.total << " -> " << path(trn_out)
                << "\n";
    } else if (fin->parsed()) {
      const auto st = thresholds_for(path(fin_thr));
      hdv::ParamStore ps;
      std::string stage;
      if (!fin_ckpt.empty())
        stage = load_model_config(path(fin_ckpt), cfg, ps);
      else if (!fin_fco)
        throw hdv::ContractError("finetune requires --checkpoint unless --fco is set");
      hdv::HdvModel model(cfg.model, ps, cfg.seed);
      std::vector<hdv::TrainScene> scenes;
      for (const auto& c : fin_cloud)
        scenes.push_back(hdv::prepare_scene(cloud_for(path(c)), cfg.model.k_neighbors, st));
      const std::string mpath =
          fin_metrics.empty() ? path(fin_out) + ".metrics.jsonl" : path(fin_metrics);
      std::ofstream metrics(mpath, std::ios::trunc);
      if (!metrics) throw hdv::IoError("cannot write metrics log " + mpath);
      const auto rep_last =
          hdv::finetune_final(model, ps, scenes, st, cfg.train, stage, fin_fco, &metrics);
      save_checkpoint_atomic(path(fin_out), ps,
                             hdv::make_checkpoint_meta(fin_fco ? "fco" : "finetuned", cfg));
      stamp_artifact(path(fin_out), cfg);
      std::cout << "finetuned, last loss " << rep_last.total << " -> " << path(fin_out) << "\n";
    } else if (inf->parsed()) {
      const auto st = thresholds_for(path(inf_thr));
      hdv::ParamStore ps;
      load_model_config(path(inf_ckpt), cfg, ps);
      hdv::HdvModel model(cfg.model, ps, cfg.seed);
      auto scene = hdv::prepare_scene(cloud_for(path(inf_cloud)), cfg.model.k_neighbors, st);
      const auto mode = hdv::infer_mode_from_string(inf_mode);
      auto res = hdv::segment_cloud(model, scene, st, mode, cfg.seed);

      std::vector<uint16_t> pred = res.pred;
      const hdv::PointCloud* out_cloud = &scene.cloud;
      hdv::PointCloud original;
      if (!inf_orig.empty()) {
        original = cloud_for(path(inf_orig));
        pred = hdv::upsample_predictions(scene.cloud, original, pred);
        out_cloud = &original;
      }
      std::vector<int> pal_idx(pred.size());
      for (size_t i = 0; i < pred.size(); ++i)
        pal_idx[i] = static_cast<int>(pred[i]) % static_cast<int>(kPalette.size());
      hdv::export_colored(path(inf_out), *out_cloud, pal_idx, kPalette);
      const std::string lpath =
          inf_labels.empty() ? path(inf_out) + ".labels.txt" : path(inf_labels);
      hdv::save_labels(lpath, pred);
      stamp_artifact(path(inf_out), cfg);
      std::cout << "segmented " << pred.size() << " points -> " << path(inf_out) << "\n";
    } else if (evl->parsed() || rep->parsed()) {
      const bool as_report = rep->parsed();
      const std::string cpath = as_report ? rep_cloud : evl_cloud;
      const std::string ppath = as_report ? rep_pred : evl_pred;
      const std::string tpath = as_report ? rep_thr : evl_thr;
      const auto st = thresholds_for(path(tpath));
      const auto cloud = cloud_for(path(cpath));
      if (!cloud.has_labels()) throw hdv::MetadataRequired("eval cloud has no labels");
      need_file(path(ppath));
      const auto pred = hdv::load_labels(path(ppath));
      if (pred.size() != cloud.size())
        throw hdv::ContractError("prediction count " + std::to_string(pred.size()) +
                                 " != cloud size " + std::to_string(cloud.size()));
      hdv::SpatialIndex index(cloud.pos);
      const int k = std::min(cfg.model.k_neighbors, static_cast<int>(cloud.size()) - 1);
      const auto prof = hdv::estimate_density(hdv::knn(index, k));
      const auto states = hdv::inherent_state(prof, st);
      const auto table = hdv::per_density_report(pred, cloud.label, states, cfg.model.classes);
      if (as_report) {
        std::filesystem::create_directories(path(rep_dir));
        const auto dir = std::filesystem::path(path(rep_dir));
        hdv::write_file_atomic((dir / "report.csv").string(),
                               hdv::report_csv(table, cfg.class_names));
        hdv::write_file_atomic((dir / "report.md").string(),
                               hdv::report_markdown(table, cfg.class_names));
        std::string hist = "delta,count,percent\n";
        for (const auto& row : hdv::density_histogram(prof, hdv::group_thresholds()))
          hist += std::to_string(row.bucket) + "," + std::to_string(row.count) + "," +
                  std::to_string(row.percent) + "\n";
        hdv::write_file_atomic((dir / "histogram.csv").string(), hist);
        stamp_artifact((dir / "report.csv").string(), cfg);
        std::cout << hdv::report_markdown(table, cfg.class_names);
      } else {
        hdv::write_file_atomic(path(evl_out), hdv::report_csv(table, cfg.class_names));
        stamp_artifact(path(evl_out), cfg);
      }
      std::cout << "MIoU(all) = " << 100.0 * table.all.miou << "\n";
    }
    return 0;
  } catch (const MissingArtifact& m) {
    std::cerr << "missing artifact: " << m.path << "\n";
    return 2;
  } catch (const hdv::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
