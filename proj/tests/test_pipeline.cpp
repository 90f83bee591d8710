#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace mitodet;
using testing_support::TempDir;

namespace {

PipelineConfig tiny_config(const std::string& kind = "baseline") {
  PipelineConfig c;
  c.synthetic = testing_support::tiny_spec();
  c.detector_kind = kind;
  c.classifier_kind = kind;
  c.members = 2;
  c.detector.logistic.epochs = 150;
  c.classifier.logistic.epochs = 150;
  return c;
}

const std::vector<std::string> kCompared = {
    artifact::kSplit,    artifact::kReference,       artifact::kDetector,   artifact::kDetections,
    artifact::kMinedFp,  artifact::kMinedTp,         artifact::kStage2,     artifact::kEnsemble,
    artifact::kClassified, artifact::kSweepJson,     artifact::kFused,      artifact::kReport,
    artifact::kTable,    "models/ensemble/member_0.json", "models/ensemble/member_1.json"};

void expect_same_artifacts(const fs::path& a, const fs::path& b) {
  for (const auto& rel : kCompared) EXPECT_TRUE(testing_support::files_equal(a / rel, b / rel)) << rel;
}

/// The baseline run is the slowest fixture; later tests reuse its directory.
class BaselineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline_all");
    run_stage(Stage::kAll, tiny_config(), {dir_->path(), 1, nullptr});
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static TempDir* dir_;
};
TempDir* BaselineRun::dir_ = nullptr;

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  PipelineConfig c = tiny_config();
  EXPECT_NO_THROW(validate(c));
  const PipelineConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 43;
  EXPECT_NE(config_hash(c), config_hash(back));
}

TEST(Config, RejectsBadValues) {
  auto broken = [](auto mutate) {
    PipelineConfig c = tiny_config();
    mutate(c);
    return c;
  };
  EXPECT_THROW(validate(broken([](auto& c) { c.alpha = 1.5; })), ValidationError);
  EXPECT_THROW(validate(broken([](auto& c) { c.members = 0; })), ValidationError);
  EXPECT_THROW(validate(broken([](auto& c) { c.weights = {0.5, 0.6}; })), ValidationError);
  EXPECT_THROW(validate(broken([](auto& c) { c.detector_kind = "yolo"; })), ValidationError);
  EXPECT_THROW(validate(broken([](auto& c) { c.candidate_threshold = -0.1; })), ValidationError);
  EXPECT_THROW(validate(broken([](auto& c) {
                 c.synthetic.reset();
                 c.manifest.clear();
               })),
               ValidationError);

  nlohmann::json j = config_to_json(tiny_config());
  j["detector"]["treshold"] = 0.3;
  EXPECT_THROW(config_from_json(j), ValidationError);
  j = config_to_json(tiny_config());
  j["fusion"]["alpha"] = "high";
  EXPECT_THROW(config_from_json(j), ValidationError);
}

TEST(Config, ManifestPathIsRelativeToConfigFile) {
  TempDir dir("cfg");
  nlohmann::json j = config_to_json(tiny_config());
  j["dataset"] = {{"manifest", "data/manifest.json"}};
  write_json_file(dir / "sub/config.json", j);
  const PipelineConfig c = load_config(dir / "sub/config.json");
  EXPECT_EQ(fs::path(c.manifest), dir / "sub/data/manifest.json");
  EXPECT_FALSE(c.synthetic.has_value());
}

TEST(Stages, NamesRoundTrip) {
  for (const auto& [stage, name] : kStageNames) EXPECT_EQ(stage_from_string(std::string(name)), stage);
  EXPECT_THROW(stage_from_string("train"), ValidationError);
  EXPECT_EQ(full_chain().size(), 11u);
}

TEST(Stages, MissingPrerequisiteNamesProducer) {
  TempDir dir("prereq");
  try {
    run_stage(Stage::kMine, tiny_config(), {dir.path(), 1, nullptr});
    FAIL() << "mine ran without a detector";
  } catch (const PrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("train-detector"), std::string::npos) << e.what();
  }
  try {
    run_stage(Stage::kFuse, tiny_config(), {dir.path(), 1, nullptr});
    FAIL() << "fuse ran without classified candidates";
  } catch (const PrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("classify"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, OracleModelsScorePerfectly) {
  TempDir dir("oracle");
  std::ostringstream log;
  const RunManifest m = run_stage(Stage::kAll, tiny_config("oracle"), {dir.path(), 2, &log});
  const nlohmann::json report = read_json_file(dir / artifact::kReport);
  EXPECT_DOUBLE_EQ(report.at("fused").at("f1").get<double>(), 1.0);
  EXPECT_EQ(report.at("fused").at("fp").get<int>(), 0);
  EXPECT_GT(report.at("fused").at("tp").get<int>(), 0);
  EXPECT_EQ(report.at("config_hash").get<std::string>(), m.config_hash);
  EXPECT_EQ(m.stages.size(), full_chain().size());
  EXPECT_FALSE(log.str().empty());
  for (const auto& [name, rel] : m.artifacts) EXPECT_TRUE(fs::exists(dir / rel)) << name;
}

TEST_F(BaselineRun, ProducesReportsAndTable) {
  const nlohmann::json report = read_json_file(dir_->path() / artifact::kReport);
  for (const char* key : {"fused", "detector_only"}) {
    const double f1 = report.at(key).at("f1").get<double>();
    EXPECT_GE(f1, 0.0);
    EXPECT_LE(f1, 1.0);
  }
  EXPECT_EQ(report.at("detector_only").at("operating").at("alpha").get<double>(), 0.0);
  EXPECT_EQ(report.at("fused").at("operating").at("alpha").get<double>(), 0.9);
  const nlohmann::json sweep = read_json_file(dir_->path() / artifact::kSweepJson);
  EXPECT_EQ(sweep.at("reports").size(), 21u);
  const nlohmann::json split = read_json_file(dir_->path() / artifact::kSplit);
  EXPECT_EQ(split.at("val_ids").size(), 15u);
}

TEST_F(BaselineRun, StageByStageMatchesAll) {
  TempDir dir("pipeline_steps");
  for (Stage s : full_chain()) run_stage(s, tiny_config(), {dir.path(), 1, nullptr});
  expect_same_artifacts(dir_->path(), dir.path());
}

TEST_F(BaselineRun, WorkerCountDoesNotChangeArtifacts) {
  TempDir dir("pipeline_w4");
  run_stage(Stage::kAll, tiny_config(), {dir.path(), 4, nullptr});
  expect_same_artifacts(dir_->path(), dir.path());
}

TEST_F(BaselineRun, RerunningAStageIsIdempotent) {
  const fs::path report = dir_->path() / artifact::kReport;
  std::ifstream in(report);
  const std::string before((std::istreambuf_iterator<char>(in)), {});
  run_stage(Stage::kFuse, tiny_config(), {dir_->path(), 1, nullptr});
  run_stage(Stage::kEval, tiny_config(), {dir_->path(), 1, nullptr});
  std::ifstream again(report);
  EXPECT_EQ(std::string((std::istreambuf_iterator<char>(again)), {}), before);
}

TEST(Synthetic, AnnotationCountsAndReproducibility) {
  TempDir dir("synth");
  SyntheticSpec spec = testing_support::tiny_spec();
  spec.num_slides = 12;
  spec.num_scanners = 3;
  spec.annotated_scanners = 3;
  spec.num_mitoses = 20;
  const auto manifest = generate_synthetic_dataset(spec, dir / "a", 2);
  const Dataset ds = load_dataset(manifest);
  std::size_t mitoses = 0;
  for (const auto& a : ds.annotations) mitoses += a.category == Category::kMitotic;
  EXPECT_EQ(mitoses, 240u);
  EXPECT_EQ(ds.records.size(), 12u);

  generate_synthetic_dataset(spec, dir / "b", 1);
  EXPECT_TRUE(testing_support::files_equal(dir / "a/manifest.json", dir / "b/manifest.json"));
  for (const auto& img : ds.records) {
    EXPECT_EQ(read_image(dir / "a" / img.file_name), read_image(dir / "b" / img.file_name)) << img.id;
  }
}

TEST(Synthetic, UnannotatedScannersHaveNoLabels) {
  TempDir dir("synth_unlabeled");
  SyntheticSpec spec = testing_support::tiny_spec();
  spec.num_slides = 8;
  const Dataset ds = load_dataset(generate_synthetic_dataset(spec, dir.path()));
  std::set<std::string> labeled_scanners;
  std::map<std::string, std::string> scanner_of;
  for (const auto& img : ds.records) scanner_of[img.id] = img.scanner;
  for (const auto& a : ds.annotations) labeled_scanners.insert(scanner_of.at(a.image_id));
  EXPECT_EQ(labeled_scanners.size(), 3u);
}
