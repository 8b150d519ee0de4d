// End-to-end runs of the command line and of the file formats it writes.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "json.hpp"
#include "regconv/cli.hpp"
#include "regconv/report.hpp"
#include "regconv/synth.hpp"
#include "regconv/train.hpp"
#include "test_util.hpp"

namespace regconv {
namespace {

using nlohmann::json;
using testing::TempDir;

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "regconv");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  EXPECT_TRUE(is) << path;
  return json::parse(is);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

// ---- verify -----------------------------------------------------------------

TEST(CliVerify, EquivarianceN4Passes) {
  TempDir dir("cli");
  const auto r = run({"verify", "--group", "4", "--suite", "equivariance", "--trials", "3", "--seed", "5", "--out",
                      dir.file("r.json")});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  EXPECT_NE(r.out.find("equivariance: PASS"), std::string::npos);
  const json rep = read_json(dir.file("r.json"));
  EXPECT_EQ(rep["format"], "regconv-report-v1");
  EXPECT_EQ(rep["kind"], "verify");
  EXPECT_EQ(rep["pass"], true);
  EXPECT_EQ(rep["group_order"], 4);
  EXPECT_EQ(rep["seed"], 5);
  EXPECT_LE(rep["metrics"]["equivariance"]["max_error"].get<double>(), 1e-4);
  EXPECT_GE(rep["metrics"]["equivariance"]["plain_min_error"].get<double>(), 0.1);
  EXPECT_EQ(rep["mask"], interior_mask_spec());
}

TEST(CliVerify, RoIInvarianceN8WithTolerance) {
  TempDir dir("cli");
  const auto r = run({"verify", "--group", "8", "--suite", "roi-invariance", "--scenes", "4", "--tol", "0.08",
                      "--out", dir.file("r.json")});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const json rep = read_json(dir.file("r.json"));
  EXPECT_EQ(rep["tolerances"]["roi-invariance"]["max_cov"], 0.08);
  EXPECT_LE(rep["metrics"]["roi-invariance"]["max_cov"].get<double>(), 0.08);
  EXPECT_GE(rep["metrics"]["roi-invariance"]["plain_spatial_min_pairwise"].get<double>(), 0.1);
}

TEST(CliVerify, ImpossibleToleranceIsMetricFailure) {
  TempDir dir("cli");
  const auto r = run({"verify", "--group", "4", "--suite", "roi-invariance", "--scenes", "2", "--tol", "1e-30",
                      "--out", dir.file("r.json")});
  EXPECT_EQ(r.code, kExitMetricFailure);
  EXPECT_NE(r.out.find("roi-invariance: FAIL"), std::string::npos);
  EXPECT_NE(r.err.find("FAIL roi-invariance"), std::string::npos);
  EXPECT_EQ(read_json(dir.file("r.json"))["pass"], false);
}

TEST(CliVerify, ParamsAndGradcheckSuites) {
  TempDir dir("cli");
  for (const char* n : {"4", "8", "16"}) {
    const auto r = run({"verify", "--group", n, "--suite", "params", "--out", dir.file("p.json")});
    EXPECT_EQ(r.code, kExitPass) << n << ' ' << r.err;
  }
  const auto r = run({"verify", "--suite", "gradcheck", "--out", dir.file("g.json")});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  EXPECT_LE(read_json(dir.file("g.json"))["metrics"]["gradcheck"]["max_rel_error"].get<double>(), 1e-4);
}

TEST(CliVerify, ReportsAreDeterministic) {
  TempDir dir("cli");
  for (const char* name : {"a.json", "b.json"}) {
    run({"verify", "--group", "4", "--suite", "roi-invariance", "--scenes", "2", "--seed", "9", "--out",
         dir.file(name)});
  }
  json a = read_json(dir.file("a.json")), b = read_json(dir.file("b.json"));
  EXPECT_EQ(a["config_hash"], config_hash(a["config"]));
  EXPECT_EQ(a["config"]["seed"], 9);
  EXPECT_EQ(a["version"], version());
  EXPECT_EQ(a, b);
}

TEST(CliVerify, RejectsNonIntegerGroup) {
  const auto r = run({"verify", "--group", "3.5"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("error: group order must be a positive integer"), std::string::npos);
  EXPECT_EQ(run({"verify", "--group", "0"}).code, kExitUsage);
  EXPECT_EQ(run({"verify", "--suite", "nonsense"}).code, kExitUsage);
  EXPECT_EQ(run({"verify", "--precision", "f16"}).code, kExitUsage);
}

TEST(CliVerify, RejectsBadConfigFiles) {
  TempDir dir("cli");
  std::ofstream(dir.file("unknown.json")) << R"({"group": 4, "colour": "red"})";
  std::ofstream(dir.file("type.json")) << R"({"group": "four"})";
  std::ofstream(dir.file("broken.json")) << "{";
  auto unknown = run({"verify", "--config", dir.file("unknown.json")});
  EXPECT_EQ(unknown.code, kExitUsage);
  EXPECT_NE(unknown.err.find("unknown config key 'colour'"), std::string::npos);
  EXPECT_EQ(run({"verify", "--config", dir.file("type.json")}).code, kExitUsage);
  EXPECT_EQ(run({"verify", "--config", dir.file("broken.json")}).code, kExitUsage);
  EXPECT_EQ(run({"verify", "--config", dir.file("missing.json")}).code, kExitUsage);
}

TEST(Cli, NeedsASubcommand) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
}

// ---- bench-params -----------------------------------------------------------

TEST(CliBenchParams, EightfoldTable) {
  const auto r = run({"bench-params", "--group", "8"});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const auto rows = read_csv(r.out);
  ASSERT_GE(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"group_order", "layer", "equivariant", "plain", "ratio"}));
  std::size_t layers = 0, totals = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), 5u);
    EXPECT_EQ(rows[i][0], "8");
    const double eq = std::stod(rows[i][2]), plain = std::stod(rows[i][3]);
    if (rows[i][1] == "TOTAL") {
      ++totals;
      EXPECT_GE(eq / plain, 1.0 / 8);
      EXPECT_LE(eq / plain, 1.3 / 8);
    } else {
      ++layers;
      EXPECT_EQ(eq * 8, plain) << rows[i][1];
      EXPECT_DOUBLE_EQ(std::stod(rows[i][4]), 0.125);
    }
  }
  EXPECT_EQ(totals, 1u);
  EXPECT_GT(layers, 0u);
}

TEST(CliBenchParams, TrivialGroupRatioIsOne) {
  const auto r = run({"bench-params", "--group", "1"});
  EXPECT_EQ(r.code, kExitPass);
  for (const auto& row : read_csv(r.out)) {
    if (row[0] == "group_order") continue;
    EXPECT_DOUBLE_EQ(std::stod(row[4]), 1.0) << row[1];
  }
}

TEST(CliBenchParams, DefaultGroupsToFile) {
  TempDir dir("cli");
  const auto r = run({"bench-params", "--out", dir.file("t.csv")});
  EXPECT_EQ(r.code, kExitPass);
  std::vector<std::string> groups;
  for (const auto& row : read_csv(read_text(dir.file("t.csv"))))
    if (row[1] == "TOTAL") groups.push_back(row[0]);
  EXPECT_EQ(groups, (std::vector<std::string>{"4", "8", "16"}));
}

// ---- train-toy --------------------------------------------------------------

TEST(CliTrain, UntrainedModelScoresChance) {
  TempDir dir("cli");
  const auto r = run({"train-toy", "--variant", "equi", "--steps", "0", "--out", dir.path().string()});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const json rep = read_json(dir.file("report.json"));
  EXPECT_EQ(rep["kind"], "train-toy");
  EXPECT_DOUBLE_EQ(rep["metrics"]["rotated_accuracy"].get<double>(), 0.25);
  EXPECT_DOUBLE_EQ(rep["metrics"]["upright_accuracy"].get<double>(), 0.25);
  EXPECT_TRUE(std::filesystem::exists(dir.file("checkpoint.ckpt")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("curve.csv")));
}

TEST(CliTrain, RejectsUnknownVariant) {
  EXPECT_EQ(run({"train-toy", "--variant", "magic"}).code, kExitUsage);
}

TEST(CliTrain, EquivariantModelGeneralisesToRotations) {
  TempDir dir("cli");
  const auto r = run({"train-toy", "--variant", "equi", "--group", "4", "--steps", "2000", "--seed", "1", "--out",
                      dir.path().string()});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const json m = read_json(dir.file("report.json"))["metrics"];
  EXPECT_EQ(m["steps"], 2000);
  EXPECT_GE(m["rotated_accuracy"].get<double>(), m["upright_accuracy"].get<double>() - 0.05);
  const auto curve = read_csv(read_text(dir.file("curve.csv")));
  EXPECT_EQ(curve[0], (std::vector<std::string>{"step", "loss", "accuracy"}));
  EXPECT_EQ(curve.back()[0], "2000");
}

TEST(Trainer, ResumeContinuesExactly) {
  TempDir dir("trainer");
  ToyTaskConfig cfg;
  cfg.train_scenes = 8;
  cfg.test_scenes = 4;
  const auto data = std::make_shared<const ToyData>(make_toy_data(cfg, 3));
  Trainer straight(cfg, Variant::Equi, 3, data);
  for (int i = 0; i < 5; ++i) straight.step();
  Trainer first(cfg, Variant::Equi, 3, data);
  for (int i = 0; i < 3; ++i) first.step();
  first.save(dir.file("c.ckpt"));
  Trainer resumed(cfg, Variant::Equi, 3, data);
  resumed.load(dir.file("c.ckpt"));
  EXPECT_EQ(resumed.steps_done(), 3u);
  for (int i = 0; i < 2; ++i) resumed.step();
  EXPECT_EQ(resumed.step(), straight.step());
}

TEST(Trainer, CheckpointOfOtherVariantIsRejected) {
  TempDir dir("trainer");
  ToyTaskConfig cfg;
  cfg.train_scenes = 4;
  cfg.test_scenes = 2;
  const auto data = std::make_shared<const ToyData>(make_toy_data(cfg, 1));
  Trainer(cfg, Variant::Equi, 1, data).save(dir.file("c.ckpt"));
  Trainer plain(cfg, Variant::Plain, 1, data);
  EXPECT_THROW(plain.load(dir.file("c.ckpt")), Error);
}

// ---- eval-invariance --------------------------------------------------------

TEST(CliEvalInvariance, RiRoIBeatsSpatialAtN4) {
  TempDir dir("cli");
  const auto r = run({"eval-invariance", "--group", "4", "--scenes", "3", "--out", dir.file("e.json"),
                      "--dump-features", "--dump-dir", dir.file("feat")});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const json m = read_json(dir.file("e.json"))["metrics"];
  EXPECT_EQ(m["fraction_l2_lt_spatial"], 1.0);
  for (const char* mode : {"plain-spatial", "spatial", "maxpool", "riroi-l1", "riroi-l2", "riroi-l4"}) {
    ASSERT_TRUE(m.contains(mode)) << mode;
    EXPECT_EQ(m[mode]["pairwise"].size(), 3u);
  }
  EXPECT_LE(m["riroi-l2"]["max_pairwise"].get<double>(), 1e-3);
  EXPECT_GE(m["plain-spatial"]["max_pairwise"].get<double>(), 0.1);

  // Dumps: one tensor and sidecar per scene, mode and rotation.
  const json side = read_json(dir.file("feat/scene000_maxpool_k0.json"));
  EXPECT_EQ(side["N"], 1);
  const json riroi = read_json(dir.file("feat/scene002_riroi-l2_k3.json"));
  EXPECT_EQ(riroi["N"], 4);
  const Tensor t = load_tensor(dir.file("feat/scene002_riroi-l2_k3.rgt"));
  EXPECT_EQ(t.dim(0), riroi["K"].get<std::size_t>());
  EXPECT_EQ(t.dim(1), 4u);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.file("feat"))) ++files;
  EXPECT_EQ(files, 3u * 6 * 4 * 2);
}

// ---- make-dataset -----------------------------------------------------------

TEST(CliMakeDataset, WritesLoadableScenesAndPngs) {
  TempDir dir("cli");
  const auto r = run({"make-dataset", "--scenes", "3", "--seed", "4", "--upright", "--out", dir.file("d.rgd"),
                      "--png", dir.file("png")});
  EXPECT_EQ(r.code, kExitPass) << r.err;
  const auto scenes = load_dataset(dir.file("d.rgd"));
  ASSERT_EQ(scenes.size(), 3u);
  for (const auto& s : scenes)
    for (const auto& a : s.annotations) EXPECT_EQ(a.box.theta, 0.0);
  for (const char* f : {"scene000.png", "scene001.png", "scene002.png"}) {
    const std::string png = read_text(dir.file(std::string("png/") + f));
    ASSERT_GE(png.size(), 8u);
    EXPECT_EQ(png.substr(1, 3), "PNG");
  }
  EXPECT_EQ(run({"make-dataset", "--scenes", "1"}).code, kExitUsage);
}

TEST(DatasetFile, TruncationAndVersionErrors) {
  SceneOptions o;
  o.num_objects = 2;
  std::stringstream ss;
  write_dataset(ss, {gen_scene(1, o), gen_scene(2, o)});
  const std::string full = ss.str();

  // Drop the final annotation line.
  std::stringstream cut(full.substr(0, full.rfind('\n', full.size() - 2) + 1));
  try {
    read_dataset(cut);
    FAIL() << "truncated dataset was accepted";
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("truncated dataset", 0), 0u) << e.what();
  }

  std::string other = full;
  other.replace(other.find("regconv-ds-v1"), 13, "regconv-ds-v9");
  std::stringstream wrong(other);
  try {
    read_dataset(wrong);
    FAIL() << "foreign version was accepted";
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "dataset version mismatch: expected regconv-ds-v1, got regconv-ds-v9");
  }

  std::stringstream empty;
  EXPECT_THROW(read_dataset(empty), Error);
}

}  // namespace
}  // namespace regconv
