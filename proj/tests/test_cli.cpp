#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "xattn/pipeline.hpp"

using namespace xattn;
namespace fs = std::filesystem;

#ifndef XATTN_CLI_PATH
#define XATTN_CLI_PATH "xattn"
#endif

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(XATTN_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("xattn_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
};

RunConfig fast_config(const fs::path& root) {
  RunConfig cfg;
  cfg.dataset_dir = (root / "ds").string();
  cfg.out_dir = (root / "run").string();
  cfg.seed = 42;
  cfg.workers = 2;
  cfg.n_folds = 4;
  cfg.bootstrap_samples = 200;
  cfg.model.image_encoder.conv_channels = {4, 8};
  cfg.model.image_encoder.pooled_feature_dim = 8;
  cfg.model.image_encoder.projection_dim = 16;
  cfg.model.metadata_encoder.hidden_dim = 32;
  cfg.model.metadata_encoder.embed_dim = 16;
  cfg.model.attention.n_layers = 2;
  cfg.model.attention.n_heads = 2;
  cfg.model.optimizer.lr = 1e-3;
  cfg.model.training.epochs = 6;
  cfg.model.training.train_batch = 16;
  return cfg;
}

}  // namespace

TEST(CliBinary, UsageAndGuardExitCodes) {
  EXPECT_EQ(run_cli(""), 1);                      // missing subcommand
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("cross-validate"), 1);        // missing required --config
  EXPECT_EQ(run_cli("gen-data --n 10 --seed 1 --out /tmp/xattn_too_small"), 2);  // n < 20
  EXPECT_EQ(run_cli("cross-validate --config /nonexistent.json"), 2);
}

TEST(CliBinary, GenDataIdempotentDigest) {
  Workspace ws;
  const auto a = (ws.root / "a").string();
  const auto b = (ws.root / "b").string();
  ASSERT_EQ(run_cli("gen-data --n 30 --seed 9 --out " + a), 0);
  ASSERT_EQ(run_cli("gen-data --n 30 --seed 9 --out " + b), 0);
  EXPECT_EQ(testutil::dir_digest(a), testutil::dir_digest(b));
}

TEST(Config, UnknownKeysRejected) {
  auto j = run_config_to_json(RunConfig{});
  j["mystery"] = 1;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j.erase("mystery");
  j["model"]["image_encoder"]["typo_key"] = 2;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

TEST(Config, RoundTripAndHashStability) {
  RunConfig cfg;
  cfg.dataset_dir = "somewhere";
  cfg.model.fusion_mode = FusionMode::kConcat;
  cfg.model.loss = LossKind::kHuber;
  auto j = run_config_to_json(cfg);
  auto back = run_config_from_json(j);
  EXPECT_EQ(run_config_to_json(back).dump(), j.dump());
  EXPECT_EQ(config_hash(cfg), config_hash(back));
  back.seed = 43;
  EXPECT_NE(config_hash(cfg), config_hash(back));
}

TEST(Pipeline, FullLoopContractsAndDeterminism) {
  Workspace ws;
  auto cfg = fast_config(ws.root);
  cmd_gen_data(40, 7, cfg.dataset_dir);

  auto s1 = cmd_cross_validate(cfg);
  EXPECT_EQ(s1.pooled_count, 40u);  // every sample predicted exactly once
  const fs::path out = cfg.out_dir;

  // metrics.csv: header contract + fold rows + mean/sd summary rows
  auto lines = testutil::read_lines(out / "metrics.csv");
  ASSERT_EQ(lines.size(), 1u + 4u + 2u);
  EXPECT_EQ(lines[0], "fold,mse,mae,r2");
  EXPECT_EQ(lines[5].substr(0, 5), "mean,");
  EXPECT_EQ(lines[6].substr(0, 3), "sd,");

  // predictions.csv has one row per sample plus header
  EXPECT_EQ(testutil::read_lines(out / "predictions.csv").size(), 41u);

  // report embeds the config hash
  const auto report = testutil::slurp(out / "run_report.json");
  EXPECT_NE(report.find(hash_hex(s1.config_hash)), std::string::npos);

  // SVGs are standalone documents
  for (const auto& entry : fs::recursive_directory_iterator(out))
    if (entry.path().extension() == ".svg") {
      const auto svg = testutil::slurp(entry.path());
      EXPECT_EQ(svg.rfind("<svg xmlns", 0), 0u) << entry.path();
      EXPECT_NE(svg.find("</svg>"), std::string::npos) << entry.path();
    }

  // CSVs all carry a header line
  for (const auto& entry : fs::recursive_directory_iterator(out))
    if (entry.path().extension() == ".csv") {
      const auto first = testutil::read_lines(entry.path()).at(0);
      EXPECT_NE(first.find(","), std::string::npos) << entry.path();
      EXPECT_FALSE(first.empty() || std::isdigit(static_cast<unsigned char>(first[0])))
          << entry.path();
    }

  // identical rerun -> identical digests (idempotence / determinism)
  const auto digest1 = testutil::dir_digest(out);
  cmd_cross_validate(cfg);
  EXPECT_EQ(testutil::dir_digest(out), digest1);

  // screening + perturbation + attention export on the same run directory
  auto screen = cmd_screen(cfg);
  EXPECT_FALSE(screen.partial);
  EXPECT_TRUE(fs::exists(out / "screening" / "roc.csv"));
  EXPECT_TRUE(fs::exists(out / "screening" / "pr.svg"));

  auto perturb = cmd_perturb(cfg, {}, 4);
  EXPECT_EQ(perturb.rows.size(), 3u);  // three best folds by default
  EXPECT_TRUE(fs::exists(out / "perturbation" / "perturbation.csv"));

  auto exported = cmd_export_attention(cfg, 1);
  EXPECT_EQ(exported.field_names.size(), 10u);
  // exported per-layer attention masses sum to 1
  auto att_lines = testutil::read_lines(out / "attention" / "fold_01_attention.csv");
  ASSERT_EQ(att_lines.size(), 1u + 2u + 1u);  // header + 2 layers + all
  for (size_t r = 1; r < att_lines.size(); ++r) {
    const auto cells = io_detail::split_csv_line(att_lines[r]);
    double sum = 0;
    for (size_t c = 1; c < cells.size(); ++c) sum += std::stod(cells[c]);
    EXPECT_NEAR(sum, 1.0, 1e-5) << att_lines[r];
  }

  // missing checkpoint error names the fold
  try {
    cmd_perturb(cfg, {99}, 4);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos);
  }
}

TEST(Pipeline, ScreenSingleClassWritesFlaggedPartialReport) {
  Workspace ws;
  auto cfg = fast_config(ws.root);
  fs::create_directories(cfg.out_dir);
  // hand-craft single-class out-of-fold predictions (all low BMD)
  std::ofstream pred(fs::path(cfg.out_dir) / "predictions.csv");
  pred << "id,fold,y_true,y_pred\n";
  for (int i = 0; i < 12; ++i)
    pred << "s" << i << ",0,0." << (70 + i) << ",0." << (71 + i) << "\n";
  pred.close();
  auto s = cmd_screen(cfg);
  EXPECT_TRUE(s.partial);
  EXPECT_FALSE(s.metrics.auc_defined);
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "screening" / "report.json"));
  EXPECT_FALSE(fs::exists(fs::path(cfg.out_dir) / "screening" / "roc.csv"));
  const auto report = testutil::slurp(fs::path(cfg.out_dir) / "screening" / "report.json");
  EXPECT_NE(report.find("\"auc_defined\": false"), std::string::npos);
}

TEST(Pipeline, ScreenBeforeCrossValidateFails) {
  Workspace ws;
  auto cfg = fast_config(ws.root);
  cmd_gen_data(25, 3, cfg.dataset_dir);
  EXPECT_THROW(cmd_screen(cfg), DataError);
  EXPECT_THROW(cmd_perturb(cfg, {}, 4), DataError);
}
