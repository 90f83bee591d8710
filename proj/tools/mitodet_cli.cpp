// mitodet command line: pipeline stages, synthetic data and augmentation
// previews over a run directory.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mitodet/mitodet.hpp"

namespace fs = std::filesystem;
using namespace mitodet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitPrerequisite = 3;

struct PipelineFlags {
  std::string config;
  std::string run_dir = "run";
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string reference;
  std::optional<double> alpha;
  bool sweep = false;
};

void add_pipeline_flags(CLI::App* cmd, PipelineFlags& f) {
  cmd->add_option("--config", f.config, "pipeline config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--run-dir", f.run_dir, "run directory for artifacts")->capture_default_str();
  cmd->add_option("--seed", f.seed, "global seed (overrides the config)");
  cmd->add_option("--workers", f.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--reference", f.reference, "reference slide: image id, image path or profile JSON");
  auto* alpha = cmd->add_option("--alpha", f.alpha, "fusion weight of the ensemble score")->check(CLI::Range(0.0, 1.0));
  auto* sweep = cmd->add_flag("--sweep", f.sweep, "take alpha from the sweep-alpha stage");
  alpha->excludes(sweep);
}

PipelineConfig resolve_config(const PipelineFlags& f) {
  PipelineConfig cfg;
  if (!f.config.empty()) {
    cfg = load_config(f.config);
  } else {
    cfg.synthetic = SyntheticSpec{};
  }
  if (f.seed) cfg.seed = *f.seed;
  if (!f.reference.empty()) cfg.reference = f.reference;
  if (f.alpha) {
    cfg.alpha = *f.alpha;
    cfg.sweep = false;
  }
  if (f.sweep) cfg.sweep = true;
  validate(cfg);
  return cfg;
}

void augment_preview(const std::string& input, const std::string& stage, const std::string& spec_path,
                     const std::string& out, int count, std::uint64_t seed) {
  AugmentSpec spec;
  if (!spec_path.empty()) {
    spec = augment_spec_from_json(read_json_file(spec_path));
  } else if (stage == "detector") {
    spec = default_detector_spec(seed);
  } else if (stage == "classifier") {
    spec = default_classifier_spec(seed);
  } else {
    throw ValidationError("--stage must be detector or classifier");
  }

  std::vector<Patch> patches;
  if (fs::is_directory(input)) {
    patches = load_patch_set(input);
  } else {
    Patch p;
    p.image_id = fs::path(input).stem().string();
    p.pixels = read_image(input);
    p.size = p.pixels.width();
    patches.push_back(std::move(p));
  }
  if (patches.empty()) throw ValidationError("no patches found in " + input);

  fs::create_directories(out);
  nlohmann::json log = nlohmann::json::array();
  for (int k = 0; k < count; ++k) {
    const Patch& p = patches[static_cast<std::size_t>(k) % patches.size()];
    const AugmentedSample s = apply(p, spec, static_cast<std::uint64_t>(k));
    char name[32];
    std::snprintf(name, sizeof name, "%03d", k);
    write_image(fs::path(out) / (std::string(name) + "_before.png"), p.pixels);
    write_image(fs::path(out) / (std::string(name) + "_after.png"), s.pixels);
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& a : s.applied) {
      if (a.applied) ops.push_back({{"op", to_string(a.op)}, {"values", a.values}});
    }
    log.push_back({{"pair", name}, {"image_id", p.image_id}, {"ops", ops}});
  }
  write_json_file(fs::path(out) / "preview.json", log);
  std::cout << "wrote " << count << " before/after pairs to " << out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mitodet: two-stage mitotic figure detection toolkit"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  PipelineFlags flags;
  std::optional<Stage> chosen;
  for (const auto& [stage, name] : kStageNames) {
    const std::string help = stage == Stage::kAll ? "run every stage in order" : "run the " + std::string(name) + " stage";
    auto* cmd = app.add_subcommand(std::string(name), help);
    add_pipeline_flags(cmd, flags);
    cmd->callback([&chosen, s = stage] { chosen = s; });
  }

  auto* show = app.add_subcommand("config", "print the fully resolved config");
  add_pipeline_flags(show, flags);

  std::string synth_config, synth_out = "synthetic";
  int synth_workers = 1;
  std::optional<int> synth_slides, synth_size;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "render a synthetic dataset");
  synth->add_option("--config", synth_config, "pipeline config with dataset.synthetic")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  synth->add_option("--slides", synth_slides, "number of slides");
  synth->add_option("--size", synth_size, "slide edge in pixels (>= 512)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--workers", synth_workers, "worker threads")->check(CLI::PositiveNumber);

  auto* augment = app.add_subcommand("augment", "augmentation utilities");
  augment->require_subcommand(1);
  std::string aug_input, aug_stage = "detector", aug_spec, aug_out = "preview";
  int aug_count = 8;
  std::uint64_t aug_seed = 0;
  auto* preview = augment->add_subcommand("preview", "write before/after PNG pairs");
  preview->add_option("--input", aug_input, "image file or patch-set directory")->required();
  preview->add_option("--stage", aug_stage, "detector or classifier")->capture_default_str();
  preview->add_option("--spec", aug_spec, "augment spec JSON (overrides --stage defaults)");
  preview->add_option("--out", aug_out, "output directory")->capture_default_str();
  preview->add_option("--count", aug_count, "number of pairs")->check(CLI::PositiveNumber)->capture_default_str();
  preview->add_option("--seed", aug_seed, "augmentation seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (chosen) {
      const PipelineConfig cfg = resolve_config(flags);
      const RunManifest m = run_stage(*chosen, cfg, {flags.run_dir, flags.workers, &std::cerr});
      std::cout << "run " << flags.run_dir << " config " << m.config_hash << ": " << m.artifacts.size()
                << " artifacts\n";
      if (*chosen == Stage::kEval || *chosen == Stage::kAll) {
        std::ifstream table(fs::path(flags.run_dir) / artifact::kTable);
        std::cout << table.rdbuf();
      }
    } else if (show->parsed()) {
      std::cout << config_to_json(resolve_config(flags)).dump(2) << '\n';
    } else if (synth->parsed()) {
      SyntheticSpec spec;
      if (!synth_config.empty()) {
        const PipelineConfig cfg = load_config(synth_config);
        if (!cfg.synthetic) throw ValidationError("config has no dataset.synthetic section");
        spec = *cfg.synthetic;
      }
      if (synth_slides) spec.num_slides = *synth_slides;
      if (synth_size) spec.slide_size = *synth_size;
      if (synth_seed) spec.seed = *synth_seed;
      const auto path = generate_synthetic_dataset(spec, synth_out, synth_workers);
      std::cout << "wrote " << path.string() << '\n';
    } else if (preview->parsed()) {
      augment_preview(aug_input, aug_stage, aug_spec, aug_out, aug_count, aug_seed);
    }
  } catch (const PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPrerequisite;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
