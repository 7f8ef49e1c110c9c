#include <gtest/gtest.h>

#include <fstream>
#include <string>

#include "hycam/config.hpp"

namespace {

using namespace hycam;

const char* kFullConfig = R"json({
  "backbone": {"vocab_size": 45, "d_model": 32, "n_layers": 2, "n_heads": 2,
               "d_ff": 64, "max_seq_len": 48, "layer_norm_eps": 1e-5},
  "adapter": {"variant": "spec-only", "rank": 4, "num_specialists": 3,
              "tau": 0.7, "lambda_balance": 0.25},
  "train": {"learning_rate": 0.002, "max_steps": 120, "batch_size": 4,
            "warmup_steps": 6, "early_stop_patience": 3, "eval_interval": 10,
            "eval_max_sequences": 64, "seed": 11, "precision": "f64"},
  "data": {"seed": 5, "samples_per_task": 50, "min_len": 2, "max_len": 6},
  "paths": {"checkpoint_dir": "ck", "log_dir": "lg", "export_dir": "ex"}
})json";

TEST(ConfigParse, FullDocumentLandsInEveryField) {
  auto c = parse_run_config(std::string(kFullConfig));
  EXPECT_EQ(c.backbone.vocab_size, 45);
  EXPECT_EQ(c.backbone.d_model, 32);
  EXPECT_EQ(c.backbone.n_layers, 2);
  EXPECT_EQ(c.backbone.max_seq_len, 48);
  EXPECT_EQ(c.adapter.variant, Variant::SpecOnly);
  EXPECT_EQ(c.adapter.rank, 4);
  EXPECT_EQ(c.adapter.num_specialists, 3);
  EXPECT_DOUBLE_EQ(c.adapter.tau, 0.7);
  EXPECT_DOUBLE_EQ(c.lambda_balance, 0.25);
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 0.002);
  EXPECT_EQ(c.train.max_steps, 120);
  EXPECT_EQ(c.train.precision, "f64");
  EXPECT_EQ(c.data.samples_per_task, 50);
  EXPECT_EQ(c.paths.checkpoint_dir, "ck");
  c.validate();
}

TEST(ConfigParse, EmptyDocumentYieldsDefaults) {
  auto c = parse_run_config(std::string("{}"));
  EXPECT_EQ(c.backbone.d_model, 64);
  EXPECT_EQ(c.backbone.n_layers, 4);
  EXPECT_EQ(c.adapter.variant, Variant::FullHybrid);
  EXPECT_EQ(c.adapter.rank, 8);
  EXPECT_EQ(c.adapter.num_specialists, 5);
  EXPECT_DOUBLE_EQ(c.lambda_balance, 0.1);
  EXPECT_EQ(c.train.precision, "f32");
  c.validate();
}

TEST(ConfigParse, LambdaBalanceThreadsIntoTrainConfig) {
  auto c = parse_run_config(std::string(R"({"adapter": {"lambda_balance": 0.3}})"));
  EXPECT_DOUBLE_EQ(c.train_for_run().lambda_balance, 0.3);
}

TEST(ConfigParse, UnknownKeysAreRejectedByName) {
  try {
    parse_run_config(std::string(R"({"backbonne": {}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("backbonne"), std::string::npos);
  }
  try {
    parse_run_config(std::string(R"({"adapter": {"tua": 0.5}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("tua"), std::string::npos);
    EXPECT_NE(msg.find("adapter"), std::string::npos);
  }
}

TEST(ConfigParse, WrongValueTypeNamesTheField) {
  try {
    parse_run_config(std::string(R"({"train": {"max_steps": "lots"}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.max_steps"), std::string::npos);
  }
}

TEST(ConfigParse, MalformedJsonRejected) {
  EXPECT_THROW(parse_run_config(std::string("{not json")), ConfigError);
}

TEST(ConfigValidate, NamesTheOffendingField) {
  auto expect_names = [](const std::string& doc, const std::string& needle) {
    auto c = parse_run_config(doc);
    try {
      c.validate();
      FAIL() << "expected ConfigError naming " << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_names(R"({"adapter": {"rank": 64}})", "adapter.rank");           // r >= d
  expect_names(R"({"adapter": {"tau": 0.0}})", "adapter.tau");            // tau <= 0
  expect_names(R"({"adapter": {"lambda_balance": -1}})", "adapter.lambda_balance");
  expect_names(R"({"adapter": {"num_specialists": 0}})", "adapter.num_specialists");
  expect_names(R"({"train": {"learning_rate": 0}})", "train.learning_rate");
  expect_names(R"({"data": {"samples_per_task": 5}})", "data.samples_per_task");
  expect_names(R"({"backbone": {"max_seq_len": 8}})", "data.max_len");    // samples can't fit
}

TEST(ConfigOverride, DottedPathsEditAndRevalidate) {
  nlohmann::json base = nlohmann::json::parse(kFullConfig);
  auto c = parse_run_config_with_overrides(
      base, {"adapter.tau=0.25", "train.max_steps=50", "adapter.variant=shared-only",
             "paths.export_dir=elsewhere"});
  EXPECT_DOUBLE_EQ(c.adapter.tau, 0.25);
  EXPECT_EQ(c.train.max_steps, 50);
  EXPECT_EQ(c.adapter.variant, Variant::SharedOnly);
  EXPECT_EQ(c.paths.export_dir, "elsewhere");
}

TEST(ConfigOverride, CreatesMissingSections) {
  auto c = parse_run_config_with_overrides(nlohmann::json::object(), {"adapter.rank=2"});
  EXPECT_EQ(c.adapter.rank, 2);
}

TEST(ConfigOverride, UnknownKeysStillRejected) {
  EXPECT_THROW(
      parse_run_config_with_overrides(nlohmann::json::object(), {"adapter.rnak=2"}),
      ConfigError);
}

TEST(ConfigOverride, MalformedSpecsRejected) {
  EXPECT_THROW(apply_override(nlohmann::json::object(), "no-equals-sign"), ConfigError);
  EXPECT_THROW(apply_override(nlohmann::json::object(), "=5"), ConfigError);
  EXPECT_THROW(apply_override(nlohmann::json::object(), "a..b=5"), ConfigError);
}

TEST(ConfigFile, LoadsFromDiskAndReportsMissingFiles) {
  const std::string path = ::testing::TempDir() + "run_config_test.json";
  {
    std::ofstream f(path);
    f << kFullConfig;
  }
  auto c = load_run_config(path);
  EXPECT_EQ(c.backbone.d_model, 32);
  EXPECT_THROW(load_run_config(::testing::TempDir() + "does_not_exist.json"), IoError);
}

}  // namespace
