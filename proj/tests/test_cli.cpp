#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hdv/pipeline.hpp"
#include "hdv/ply_io.hpp"

using namespace hdv;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HDV_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// A small three-class scan: ground plane, one wall, one sphere.
const char* kSpec = R"({
  "scanner": [0, 0, 1.5],
  "rows": 24,
  "cols": 72,
  "fov_up_deg": 5.0,
  "fov_down_deg": -25.0,
  "max_range": 60.0,
  "noise_sigma": 0.01,
  "min_points": 256,
  "class_names": ["wall", "ground", "other"],
  "primitives": [
    {"kind": "rect", "label": 1, "albedo": [0.4, 0.35, 0.3],
     "origin": [-30, -30, 0], "u": [60, 0, 0], "v": [0, 60, 0]},
    {"kind": "rect", "label": 0, "albedo": [0.6, 0.55, 0.5],
     "origin": [8, -10, 0], "u": [0, 20, 0], "v": [0, 0, 5]},
    {"kind": "sphere", "label": 2, "albedo": [0.2, 0.5, 0.7],
     "center": [4, 2, 0.5], "radius": 1.0}
  ]
})";

const char* kConfig = R"({
  "seed": 5,
  "class_names": ["wall", "ground", "other"],
  "model": {
    "counts": [24, 12, 6],
    "e_widths": [4, 4, 4],
    "k_neighbors": 8,
    "classes": 3,
    "pos_width": 3,
    "final_att_hidden": 4,
    "final_hidden": 8
  },
  "train": {
    "epochs": 1,
    "batches_per_epoch": 4,
    "batch_size": 2,
    "lr": 0.01,
    "seed": 5
  }
})";

struct Workspace {
  std::string dir;
  std::string config, spec, scan, thr;

  explicit Workspace(const std::string& name) {
    dir = "/tmp/" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir + "/config.json";
    spec = dir + "/spec.json";
    scan = dir + "/scan.ply";
    thr = dir + "/thr.json";
    std::ofstream(config) << kConfig;
    std::ofstream(spec) << kSpec;
    REQUIRE(run_cli("--config " + config + " gen-scene --spec " + spec + " --out " + scan) == 0);
    REQUIRE(run_cli("--config " + config + " calibrate --cloud " + scan + " --out " + thr) == 0);
  }

  std::string base() const { return "--config " + config + " "; }
};

}  // namespace

TEST_CASE("cli pipeline runs end to end") {
  Workspace ws("hdv_cli_ws");
  const auto scan_cloud = load_cloud(ws.scan);
  REQUIRE(scan_cloud.size() >= 256);
  REQUIRE(fs::exists(ws.scan + ".meta.json"));
  REQUIRE(fs::exists(ws.thr));

  // Subsampling in both modes.
  const std::string sub = ws.dir + "/sub.ply";
  REQUIRE(run_cli(ws.base() + "subsample --cloud " + ws.scan + " --out " + sub +
                  " --target-count 600") == 0);
  const auto sub_cloud = load_cloud(sub);
  REQUIRE(sub_cloud.size() == 600);
  REQUIRE(run_cli(ws.base() + "subsample --cloud " + ws.scan + " --out " + ws.dir +
                  "/subg.ply --target-group 2") == 0);
  REQUIRE(run_cli(ws.base() + "subsample --cloud " + ws.scan + " --out " + ws.dir +
                  "/sboth.ply --target-count 5 --target-group 2") == 1);

  // Two-stage training.
  const std::string ck1 = ws.dir + "/ck1.hdv", ck2 = ws.dir + "/ck2.hdv";
  REQUIRE(run_cli(ws.base() + "train --cloud " + ws.scan + " --thresholds " + ws.thr +
                  " --out " + ck1) == 0);
  REQUIRE(fs::exists(ck1));
  const std::string mlog = slurp(ck1 + ".metrics.jsonl");
  REQUIRE(mlog.rfind("{\"step\":1,", 0) == 0);
  REQUIRE(mlog.find("\"L_total\":") != std::string::npos);
  REQUIRE(run_cli(ws.base() + "finetune --checkpoint " + ck1 + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + ck2) == 0);
  REQUIRE(slurp(ck2 + ".metrics.jsonl").find("\"L_final\":") != std::string::npos);

  // Inference in both modes, then upsampling onto the unsubsampled scan.
  const std::string pred = ws.dir + "/pred.ply";
  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + ck2 + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + pred + " --mode final") == 0);
  const auto labels = load_labels(pred + ".labels.txt");
  REQUIRE(labels.size() == scan_cloud.size());
  for (uint16_t l : labels) REQUIRE(l < 3);
  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + ck2 + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + ws.dir + "/pred_tco.ply --mode tco") ==
          0);
  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + ck2 + " --cloud " + sub +
                  " --thresholds " + ws.thr + " --out " + ws.dir + "/pred_up.ply --original " +
                  ws.scan) == 0);
  REQUIRE(load_labels(ws.dir + "/pred_up.ply.labels.txt").size() == scan_cloud.size());

  // Metrics table and report bundle.
  const std::string csv = ws.dir + "/metrics.csv";
  REQUIRE(run_cli(ws.base() + "eval --cloud " + ws.scan + " --pred " + pred + ".labels.txt" +
                  " --thresholds " + ws.thr + " --out " + csv) == 0);
  const std::string table = slurp(csv);
  REQUIRE(table.rfind("row,All,I(0)", 0) == 0);
  REQUIRE(table.find("\npoints_pct,100.00,") != std::string::npos);
  REQUIRE(table.find("iou_ground,") != std::string::npos);
  REQUIRE(run_cli(ws.base() + "report --cloud " + ws.scan + " --pred " + pred + ".labels.txt" +
                  " --thresholds " + ws.thr + " --out-dir " + ws.dir + "/rep") == 0);
  REQUIRE(fs::exists(ws.dir + "/rep/report.csv"));
  REQUIRE(slurp(ws.dir + "/rep/report.md").rfind("| metric | All |", 0) == 0);
  const std::string hist = slurp(ws.dir + "/rep/histogram.csv");
  REQUIRE(hist.rfind("delta,count,percent", 0) == 0);
}

TEST_CASE("cli seeds make artifacts reproducible") {
  Workspace ws("hdv_cli_det");
  const std::string a = ws.dir + "/a.hdv", b = ws.dir + "/b.hdv";
  REQUIRE(run_cli(ws.base() + "--seed 9 train --cloud " + ws.scan + " --thresholds " + ws.thr +
                  " --out " + a) == 0);
  REQUIRE(run_cli(ws.base() + "--seed 9 train --cloud " + ws.scan + " --thresholds " + ws.thr +
                  " --out " + b) == 0);
  REQUIRE(slurp(a) == slurp(b));
  REQUIRE(slurp(a + ".metrics.jsonl") == slurp(b + ".metrics.jsonl"));

  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + a + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + ws.dir + "/p1.ply") == 0);
  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + a + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + ws.dir + "/p2.ply") == 0);
  REQUIRE(slurp(ws.dir + "/p1.ply.labels.txt") == slurp(ws.dir + "/p2.ply.labels.txt"));
  REQUIRE(slurp(ws.dir + "/p1.ply") == slurp(ws.dir + "/p2.ply"));
}

TEST_CASE("cli distinguishes usage errors from module errors") {
  Workspace ws("hdv_cli_err");
  const std::string ck = ws.dir + "/ck.hdv";
  REQUIRE(run_cli(ws.base() + "train --cloud " + ws.scan + " --thresholds " + ws.thr +
                  " --out " + ck) == 0);

  REQUIRE(run_cli("") == 2);                 // a subcommand is required
  REQUIRE(run_cli("--help") == 0);
  REQUIRE(run_cli("frobnicate") == 2);
  REQUIRE(run_cli("eval --cloud " + ws.scan) == 2);  // missing required flags
  REQUIRE(run_cli("--config /tmp/hdv_cli_no_such_config.json gen-scene --spec " + ws.spec +
                  " --out /tmp/x.ply") == 2);

  // Referenced artifacts that do not exist are usage errors too.
  REQUIRE(run_cli(ws.base() + "eval --cloud " + ws.scan + " --pred " + ws.dir +
                  "/nope.txt --thresholds " + ws.thr + " --out " + ws.dir + "/m.csv") == 2);

  // Module failures inside a correctly phrased invocation exit 1.
  REQUIRE(run_cli(ws.base() + "infer --checkpoint " + ck + " --cloud " + ws.scan +
                  " --thresholds " + ws.thr + " --out " + ws.dir + "/p.ply --mode argmax") == 1);
  {
    std::ofstream f(ws.dir + "/short.txt");
    f << "0\n1\n2\n";
  }
  REQUIRE(run_cli(ws.base() + "eval --cloud " + ws.scan + " --pred " + ws.dir +
                  "/short.txt --thresholds " + ws.thr + " --out " + ws.dir + "/m.csv") == 1);
}
