// Acceptance gate: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. Tolerances and runtime budgets are fixed here.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace mitodet;
namespace oracle = testing_support::oracle;
using testing_support::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> check;
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 -------------------------------------------------------------------------

Outcome table_metrics() {
  constexpr double kTol = 1e-3;
  struct Row {
    int p_e4, r_e4;
    double f1;
  };
  double worst = 0.0;
  for (const Row& row : {Row{4719, 7904, 0.5909}, Row{7270, 6993, 0.7128}, Row{7238, 7892, 0.7550}}) {
    const auto c = oracle::counts_for(row.p_e4, row.r_e4);
    worst = std::max(worst, std::abs(compute_metrics(c.tp, c.fp, c.fn).f1 - row.f1));
  }
  return {worst <= kTol, fmt("max |F1 - reference| = %.2e (tol %.0e)", worst, kTol)};
}

// 2 -------------------------------------------------------------------------

Outcome fusion_arithmetic() {
  constexpr double kTol = 1e-12;
  auto rng = make_stream(2024, "acceptance-fuse");
  std::vector<ClassifiedCandidate> c;
  for (int i = 0; i < 1000; ++i) {
    c.push_back({{"001", i, i, kDetectionBoxSize, uniform_real(rng, 0, 1)}, uniform_real(rng, 0, 1)});
  }
  bool endpoints = true;
  const auto zero = fuse(c, 0.0), one = fuse(c, 1.0), mid = fuse(c, 0.9);
  double worst = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    endpoints &= zero[i].s_final == c[i].detection.s_dect && one[i].s_final == c[i].s_de;
    const double reference = 0.9 * c[i].s_de + 0.1 * c[i].detection.s_dect;
    worst = std::max(worst, std::abs(mid[i].s_final - reference));
  }
  return {endpoints && worst <= kTol,
          fmt("alpha 0/1 exact: %s; alpha 0.9 max error %.1e (tol %.0e)", endpoints ? "yes" : "no", worst, kTol)};
}

// 3 -------------------------------------------------------------------------

Outcome stain_round_trip() {
  constexpr double kMadTol = 2.0;
  RgbImage all(256, 1);
  for (int v = 0; v < 256; ++v)
    for (int ch = 0; ch < 3; ++ch) all.at(v, 0, ch) = static_cast<std::uint8_t>(v);
  const bool exact = od_to_rgb(rgb_to_od(all)) == all;

  SyntheticSpec spec;
  spec.num_slides = 3;
  spec.num_scanners = 3;
  spec.seed = 303;
  const SyntheticSlide ref = synthesize_slide(spec, 0);
  const StainProfile target = estimate_stain_profile(render_concentrations(ref.concentrations, ref.stain_matrix, ref.gain));
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    const SyntheticSlide s = synthesize_slide(spec, i);
    const RgbImage once = normalize_to(render_concentrations(s.concentrations, s.stain_matrix, s.gain), target);
    const RgbImage twice = normalize_to(once, target);
    std::array<double, 3> mad{};
    for (std::size_t k = 0; k < once.bytes().size(); ++k) mad[k % 3] += std::abs(int(once.bytes()[k]) - int(twice.bytes()[k]));
    for (double m : mad) worst = std::max(worst, m / static_cast<double>(once.pixel_count()));
  }
  return {exact && worst <= kMadTol,
          fmt("256-value round trip exact: %s; idempotence max channel MAD %.3f (tol %.1f) on 3 slides",
              exact ? "yes" : "no", worst, kMadTol)};
}

// 4 -------------------------------------------------------------------------

Outcome stain_recovery() {
  constexpr double kTolDeg = 2.0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SyntheticSpec spec;
    spec.num_slides = 4;
    spec.seed = 4000 + seed;
    const SyntheticSlide s = synthesize_slide(spec, static_cast<int>(seed % 4));
    const StainProfile p = estimate_stain_profile(render_concentrations(s.concentrations, s.stain_matrix, s.gain));
    for (int col = 0; col < 2; ++col) {
      worst = std::max(worst, oracle::angle_deg(p.stain_matrix.col(col), s.stain_matrix.col(col)));
    }
  }
  return {worst < kTolDeg, fmt("max column angle %.3f deg over 10 slides (tol %.1f)", worst, kTolDeg)};
}

// 5 -------------------------------------------------------------------------

Outcome matching_oracle() {
  constexpr double kRadius = 25.0;
  int unambiguous = 0, mismatches = 0, exceed = 0;
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    auto rng = make_stream(trial, "acceptance-match");
    const int np = uniform_int(rng, 0, 8), ng = uniform_int(rng, 0, 8);
    std::vector<ScoredPoint> preds;
    std::vector<GtPoint> gt;
    for (int i = 0; i < np; ++i) {
      preds.push_back({i % 4 ? "a" : "b", uniform_real(rng, 0, 160), uniform_real(rng, 0, 160), uniform_real(rng, 0, 1)});
    }
    for (int g = 0; g < ng; ++g) gt.push_back({g % 4 ? "a" : "b", uniform_real(rng, 0, 160), uniform_real(rng, 0, 160)});
    const std::size_t greedy = greedy_match(preds, gt, kRadius).tp;
    const std::size_t best = oracle::optimal_tp(preds, gt, kRadius);
    exceed += greedy > best;
    if (oracle::unambiguous(preds, gt, kRadius)) {
      ++unambiguous;
      mismatches += greedy != best;
    }
  }
  return {mismatches == 0 && exceed == 0,
          fmt("%d unambiguous instances, %d mismatches; %d instances above optimal", unambiguous, mismatches, exceed)};
}

// 6 -------------------------------------------------------------------------

Outcome sampling_contracts() {
  constexpr int kJitter = 205;
  const SlideImage slide{"001", "A", testing_support::random_image(1400, 1400, 6)};
  auto rng = make_stream(6, "acceptance-anchors");
  std::vector<Annotation> anchors;
  // Anchors far enough from the border that clamping never moves a patch.
  for (int i = 0; i < 100; ++i) {
    anchors.push_back({"001", uniform_int(rng, 256 + kJitter, 1400 - 256 - kJitter),
                       uniform_int(rng, 256 + kJitter, 1400 - 256 - kJitter), Category::kMitotic});
  }
  // One anchor at a time keeps at most 100 patches (~80 MB) alive.
  std::size_t draws = 0;
  int bad_shape = 0, bad_center = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto patches = extract_stage1_patches(slide, std::span(&anchors[i], 1), kJitter, 100, 66 + i);
    draws += patches.size();
    for (const auto& p : patches) {
      bad_shape += p.pixels.width() != 512 || p.pixels.height() != 512;
      const auto& a = *p.source_annotation;
      bad_center += std::abs(p.origin_x + 256 - a.x) > kJitter || std::abs(p.origin_y + 256 - a.y) > kJitter;
    }
  }

  const SlideImage small{"002", "A", testing_support::random_image(64, 64, 7)};
  const SlideIndex index(std::span<const SlideImage>(&small, 1));
  int unbalanced = 0;
  std::string worst_pair;
  for (int pair = 0; pair < 20; ++pair) {
    const int pos = uniform_int(rng, 1, 300), neg = uniform_int(rng, 1, 300);
    std::vector<SampleSource> p(pos, {"002", 32, 32, PatchLabel::kMitotic});
    std::vector<SampleSource> n(neg, {"002", 32, 32, PatchLabel::kNegative});
    const auto samples = build_stage2_samples(index, p, n, {0, 4, 4}, 6);
    const BalancePlan plan = plan_balance(pos, neg);
    long long np = 0, nn = 0;
    for (const auto& s : samples) (s.label == PatchLabel::kMitotic ? np : nn)++;
    if (std::llabs(np - nn) >= std::max(plan.k_pos, plan.k_neg)) {
      ++unbalanced;
      worst_pair = fmt(" e.g. %d/%d", pos, neg);
    }
  }
  const bool ok = draws == 10000 && bad_shape == 0 && bad_center == 0 && unbalanced == 0;
  return {ok, fmt("%zu stage-1 draws: %d off-size, %d off-center; %d/20 unbalanced pairs%s", draws, bad_shape,
                  bad_center, unbalanced, worst_pair.c_str())};
}

// 7 -------------------------------------------------------------------------

PipelineConfig synthetic_config(const std::string& kind) {
  PipelineConfig c;
  c.synthetic = SyntheticSpec{};
  c.detector_kind = kind;
  c.classifier_kind = kind;
  return c;
}

nlohmann::json run_all(const PipelineConfig& cfg, const fs::path& dir, int workers) {
  run_stage(Stage::kAll, cfg, {dir, workers, nullptr});
  return read_json_file(dir / artifact::kReport);
}

Outcome end_to_end() {
  TempDir oracle_dir("accept_oracle"), base_dir("accept_baseline");
  const auto o = run_all(synthetic_config("oracle"), oracle_dir.path(), 1);
  const auto b = run_all(synthetic_config("baseline"), base_dir.path(), 1);
  const double oracle_f1 = o.at("fused").at("f1").get<double>();
  const double fused = b.at("fused").at("f1").get<double>();
  const double detector = b.at("detector_only").at("f1").get<double>();
  return {oracle_f1 == 1.0 && fused > detector,
          fmt("oracle F1 %.4f; baseline fused F1 %.4f vs detector-only %.4f", oracle_f1, fused, detector)};
}

// 8 -------------------------------------------------------------------------

Outcome sweep_sanity() {
  auto rng = make_stream(8, "acceptance-sweep");
  std::vector<Annotation> gt;
  std::vector<ClassifiedCandidate> cands;
  for (int s = 0; s < 4; ++s) {
    const std::string id = "s" + std::to_string(s);
    for (int k = 0; k < 6; ++k) {
      gt.push_back({id, 60 + 120 * k, 100, Category::kMitotic});
      cands.push_back({{id, 60 + 120 * k + uniform_int(rng, -8, 8), 100 + uniform_int(rng, -8, 8), kDetectionBoxSize,
                        uniform_real(rng, 0.3, 1.0)},
                       1.0});
      cands.push_back({{id, uniform_int(rng, 0, 760), uniform_int(rng, 300, 760), kDetectionBoxSize,
                        uniform_real(rng, 0.3, 1.0)},
                       0.0});
    }
  }
  // Any alpha < 1 lifts every positive to at least alpha, so a threshold
  // above the last sub-unit grid value (0.95) is needed to separate alpha = 1.
  const AlphaSweep oracle_sweep = sweep_alpha(cands, gt, default_alpha_grid(), 25, 0.995);
  auto tied = cands;
  for (auto& c : tied) c.s_de = c.detection.s_dect;
  const AlphaSweep tied_sweep = sweep_alpha(tied, gt, default_alpha_grid(), 25, 0.5);
  const bool ok = oracle_sweep.best_alpha == 1.0 && tied_sweep.best_alpha == default_alpha_grid().front();
  return {ok, fmt("oracle classifier best alpha %.2f (F1 %.4f); identical channels best alpha %.2f",
                  oracle_sweep.best_alpha, oracle_sweep.reports.back().f1, tied_sweep.best_alpha)};
}

// 9 -------------------------------------------------------------------------

Outcome determinism() {
  const std::vector<std::string> compared = {artifact::kDetections, artifact::kMinedFp, artifact::kMinedTp,
                                             artifact::kClassified, artifact::kFused,   artifact::kReport,
                                             artifact::kSweepJson};
  const PipelineConfig cfg = synthetic_config("baseline");
  TempDir first("accept_det_w1a");
  run_all(cfg, first.path(), 1);
  std::vector<std::string> diffs;
  int runs = 1;
  for (int workers : {1, 8, 8}) {
    TempDir other("accept_det_w" + std::to_string(workers));
    run_all(cfg, other.path(), workers);
    ++runs;
    for (const auto& rel : compared) {
      if (!testing_support::files_equal(first / rel, other / rel)) diffs.push_back(rel + "@w" + std::to_string(workers));
    }
  }
  std::string detail = fmt("%d runs (workers 1,1,8,8), %zu differing artifacts", runs, diffs.size());
  for (const auto& d : diffs) detail += " " + d;
  return {diffs.empty(), detail};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "metric consistency on reference triads", 1.0, table_metrics},
      {2, "fusion boundary and arithmetic", 1.0, fusion_arithmetic},
      {3, "stain round trip and idempotence", 10.0, stain_round_trip},
      {4, "stain matrix recovery", 30.0, stain_recovery},
      {5, "matching oracle equivalence", 30.0, matching_oracle},
      {6, "sampling contracts", 30.0, sampling_contracts},
      {7, "end-to-end oracle and baseline runs", 300.0, end_to_end},
      {8, "alpha sweep sanity", 10.0, sweep_sanity},
      {9, "determinism across runs and workers", 600.0, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.check();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = secs <= c.budget_s;
    const bool pass = out.pass && in_budget;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << out.detail
              << fmt(" [%.2fs, budget %.0fs%s]", secs, c.budget_s, in_budget ? "" : ", OVER BUDGET") << std::endl;
  }
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : fmt("%d CRITERIA FAILED", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
