#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"
#include "mitodet/image.hpp"
#include "mitodet/image_io.hpp"

namespace mitodet {

using nlohmann::json;

enum class Category { kMitotic = 1, kHardNegative = 2 };

inline Category category_from_int(int v) {
  if (v == 1) return Category::kMitotic;
  if (v == 2) return Category::kHardNegative;
  throw ValidationError("annotation category must be 1 (mitotic) or 2 (hard_negative), got " + std::to_string(v));
}

struct SlideImage {
  std::string id;
  std::string scanner;
  RgbImage pixels;

  int width() const { return pixels.width(); }
  int height() const { return pixels.height(); }
};

struct Annotation {
  std::string image_id;
  int x = 0;
  int y = 0;
  Category category = Category::kMitotic;

  bool operator==(const Annotation&) const = default;
};

/// One entry of the "images" array of a dataset manifest. Unknown keys are
/// kept in `extra` (the synthetic generator records its stain matrix there).
struct ImageRecord {
  std::string id;
  std::string file_name;
  std::string scanner;
  int width = 0;
  int height = 0;
  json extra = json::object();
};

struct DatasetSummary {
  std::size_t mitotic = 0;
  std::size_t hard_negative = 0;
  // scanner -> {mitotic, hard_negative}
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_scanner;
};

struct Manifest {
  std::filesystem::path root;  // directory file names are resolved against
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  DatasetSummary summary;
};

struct Dataset {
  std::vector<SlideImage> slides;
  std::vector<Annotation> annotations;
  DatasetSummary summary;
  std::vector<ImageRecord> records;
};

inline json manifest_to_json(const std::vector<ImageRecord>& images, const std::vector<Annotation>& annotations) {
  json j;
  j["images"] = json::array();
  for (const auto& r : images) {
    json e = r.extra.is_object() ? r.extra : json::object();
    e["id"] = r.id;
    e["file_name"] = r.file_name;
    e["scanner"] = r.scanner;
    e["width"] = r.width;
    e["height"] = r.height;
    j["images"].push_back(std::move(e));
  }
  j["annotations"] = json::array();
  for (const auto& a : annotations) {
    j["annotations"].push_back(
        {{"image_id", a.image_id}, {"x", a.x}, {"y", a.y}, {"category", static_cast<int>(a.category)}});
  }
  return j;
}

/// Parses and validates a manifest without decoding pixels.
inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("images") || !j["images"].is_array() || !j.contains("annotations") ||
      !j["annotations"].is_array()) {
    throw ValidationError("manifest must be an object with 'images' and 'annotations' arrays");
  }

  Manifest m;
  m.root = path.parent_path();
  std::map<std::string, std::size_t> by_id;
  try {
    for (const auto& e : j["images"]) {
      ImageRecord r;
      r.id = e.at("id").get<std::string>();
      r.file_name = e.at("file_name").get<std::string>();
      r.scanner = e.at("scanner").get<std::string>();
      r.width = e.at("width").get<int>();
      r.height = e.at("height").get<int>();
      r.extra = e;
      for (const char* k : {"id", "file_name", "scanner", "width", "height"}) r.extra.erase(k);
      if (r.width <= 0 || r.height <= 0) throw ValidationError("image '" + r.id + "' has non-positive dimensions");
      if (!by_id.emplace(r.id, m.images.size()).second) throw ValidationError("duplicate image id '" + r.id + "'");
      m.images.push_back(std::move(r));
    }
    for (const auto& e : j["annotations"]) {
      Annotation a;
      a.image_id = e.at("image_id").get<std::string>();
      a.x = e.at("x").get<int>();
      a.y = e.at("y").get<int>();
      a.category = category_from_int(e.at("category").get<int>());
      auto it = by_id.find(a.image_id);
      if (it == by_id.end()) throw ValidationError("annotation references unknown image '" + a.image_id + "'");
      const auto& img = m.images[it->second];
      if (a.x < 0 || a.y < 0 || a.x >= img.width || a.y >= img.height) {
        throw ValidationError("annotation (" + std::to_string(a.x) + ", " + std::to_string(a.y) +
                              ") out of bounds for image '" + a.image_id + "'");
      }
      auto& counts = m.summary.per_scanner[img.scanner];
      if (a.category == Category::kMitotic) {
        ++m.summary.mitotic;
        ++counts.first;
      } else {
        ++m.summary.hard_negative;
        ++counts.second;
      }
      m.annotations.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest schema violation: " + std::string(e.what()));
  }
  return m;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Manifest m = read_manifest(manifest_path);
  Dataset d;
  d.slides.reserve(m.images.size());
  for (const auto& r : m.images) {
    const auto file = m.root / r.file_name;
    if (!std::filesystem::exists(file)) {
      throw LoadError("image '" + r.id + "' not found: " + file.string());
    }
    SlideImage s{r.id, r.scanner, read_image(file)};
    if (s.width() != r.width || s.height() != r.height) {
      throw ValidationError("image '" + r.id + "' is " + std::to_string(s.width()) + "x" + std::to_string(s.height()) +
                            " but manifest declares " + std::to_string(r.width) + "x" + std::to_string(r.height));
    }
    d.slides.push_back(std::move(s));
  }
  d.annotations = std::move(m.annotations);
  d.summary = std::move(m.summary);
  d.records = std::move(m.images);
  return d;
}

// ---------------------------------------------------------------------------
// Train / validation split

struct DatasetSplit {
  std::set<std::string> train_ids;
  std::set<std::string> val_ids;
  std::uint64_t seed = 0;

  bool operator==(const DatasetSplit&) const = default;
};

inline constexpr int kValidationPerScanner = 5;

/// Seeded split: for each annotated scanner, ids are sorted, shuffled with a
/// stream keyed by (seed, scanner) and the first five go to validation.
/// Works on any image type exposing `id` and `scanner`.
template <typename ImageLike>
DatasetSplit make_split(std::span<const ImageLike> images, const std::set<std::string>& annotated_scanners,
                        std::uint64_t seed) {
  std::map<std::string, std::vector<std::string>> by_scanner;
  for (const auto& img : images) {
    if (annotated_scanners.contains(img.scanner)) by_scanner[img.scanner].push_back(img.id);
  }
  DatasetSplit split;
  split.seed = seed;
  for (const auto& scanner : annotated_scanners) {
    auto& ids = by_scanner[scanner];
    if (ids.size() < kValidationPerScanner + 1) {
      throw SamplingError("scanner '" + scanner + "' has " + std::to_string(ids.size()) +
                          " images; a split needs at least " + std::to_string(kValidationPerScanner + 1));
    }
    std::sort(ids.begin(), ids.end());
    auto rng = make_stream(seed, "split/" + scanner);
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i < kValidationPerScanner ? split.val_ids : split.train_ids).insert(ids[i]);
    }
  }
  return split;
}

template <typename ImageLike>
DatasetSplit make_split(const std::vector<ImageLike>& images, const std::set<std::string>& annotated_scanners,
                        std::uint64_t seed) {
  return make_split(std::span<const ImageLike>(images), annotated_scanners, seed);
}

inline json split_to_json(const DatasetSplit& s) {
  return {{"train_ids", s.train_ids}, {"val_ids", s.val_ids}, {"seed", s.seed}};
}

inline DatasetSplit split_from_json(const json& j) {
  DatasetSplit s;
  s.train_ids = j.at("train_ids").get<std::set<std::string>>();
  s.val_ids = j.at("val_ids").get<std::set<std::string>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

// ---------------------------------------------------------------------------
// Patches

enum class PatchLabel { kMitotic, kNegative, kUnlabeled };

inline std::string to_string(PatchLabel l) {
  switch (l) {
    case PatchLabel::kMitotic: return "mitotic";
    case PatchLabel::kNegative: return "negative";
    case PatchLabel::kUnlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline PatchLabel patch_label_from_string(const std::string& s) {
  if (s == "mitotic") return PatchLabel::kMitotic;
  if (s == "negative") return PatchLabel::kNegative;
  if (s == "unlabeled") return PatchLabel::kUnlabeled;
  throw ValidationError("unknown patch label '" + s + "'");
}

/// A square window cut from a slide. `size` is the window edge in slide
/// pixels; `pixels` may have been resized (stage-2 windows are stored at the
/// classifier input size).
struct Patch {
  std::string image_id;
  int origin_x = 0;
  int origin_y = 0;
  int size = 0;
  RgbImage pixels;
  PatchLabel label = PatchLabel::kUnlabeled;
  std::optional<Annotation> source_annotation;
};

inline constexpr int kStage1PatchSize = 512;
inline constexpr int kStage1Jitter = 205;

inline PatchLabel label_for(Category c) {
  return c == Category::kMitotic ? PatchLabel::kMitotic : PatchLabel::kNegative;
}

/// Cuts `per_annotation` jittered windows around every annotation of `slide`.
/// The window center is the annotation plus a uniform integer offset in
/// [-jitter, jitter] per axis; the origin is then clamped into the slide.
inline std::vector<Patch> extract_stage1_patches(const SlideImage& slide, std::span<const Annotation> annotations,
                                                 int jitter, int per_annotation, std::uint64_t rng_seed,
                                                 int patch_size = kStage1PatchSize) {
  if (jitter < 0) throw SamplingError("jitter must be >= 0");
  if (per_annotation < 1) throw SamplingError("per_annotation must be >= 1");
  if (slide.width() < patch_size || slide.height() < patch_size) {
    throw SamplingError("slide '" + slide.id + "' is smaller than the " + std::to_string(patch_size) + " px patch");
  }
  std::vector<Patch> patches;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const Annotation& a = annotations[i];
    if (a.image_id != slide.id) continue;
    auto rng = make_stream(rng_seed, slide.id, i);
    for (int k = 0; k < per_annotation; ++k) {
      const int cx = a.x + uniform_int(rng, -jitter, jitter);
      const int cy = a.y + uniform_int(rng, -jitter, jitter);
      Patch p;
      p.image_id = slide.id;
      p.origin_x = clamped_origin(cx, patch_size, slide.width());
      p.origin_y = clamped_origin(cy, patch_size, slide.height());
      p.size = patch_size;
      p.pixels = crop(slide.pixels, p.origin_x, p.origin_y, patch_size, patch_size);
      p.label = label_for(a.category);
      p.source_annotation = a;
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

// ---------------------------------------------------------------------------
// Stage-2 samples

/// A labeled point that a stage-2 training window is cut around: a ground
/// truth annotation or a mined detection.
struct SampleSource {
  std::string image_id;
  int cx = 0;
  int cy = 0;
  PatchLabel label = PatchLabel::kUnlabeled;
};

struct Stage2Params {
  int jitter = 5;
  int crop_size = 50;
  int target_size = 120;
};

struct BalancePlan {
  int k_pos = 1;
  int k_neg = 1;
};

inline bool balance_holds(std::size_t pos, std::size_t neg, const BalancePlan& p) {
  const long long diff = static_cast<long long>(pos) * p.k_pos - static_cast<long long>(neg) * p.k_neg;
  return std::llabs(diff) < std::max(p.k_pos, p.k_neg);
}

/// Replication factors. The minority class is replicated
/// round(majority / minority) times; when that leaves a class-count gap of
/// at least the larger factor, the smallest pair (ordered by larger factor,
/// then sum) that closes the gap is used instead.
inline BalancePlan plan_balance(std::size_t pos, std::size_t neg) {
  if (pos == 0 || neg == 0) throw SamplingError("stage-2 sampling needs both classes");
  const std::size_t minority = std::min(pos, neg);
  const std::size_t majority = std::max(pos, neg);
  const int k = static_cast<int>(std::llround(static_cast<double>(majority) / static_cast<double>(minority)));
  BalancePlan plan = pos <= neg ? BalancePlan{k, 1} : BalancePlan{1, k};
  if (balance_holds(pos, neg, plan)) return plan;
  // (neg/g, pos/g) always balances exactly, so the search terminates.
  const std::size_t g = std::gcd(pos, neg);
  const int limit = static_cast<int>(std::max(pos, neg) / g);
  for (int m = 1; m <= limit; ++m) {
    for (int s = m + 1; s <= 2 * m; ++s) {
      const int other = s - m;
      for (BalancePlan cand : {BalancePlan{m, other}, BalancePlan{other, m}}) {
        if (balance_holds(pos, neg, cand)) return cand;
      }
    }
  }
  return {static_cast<int>(neg / g), static_cast<int>(pos / g)};
}

class SlideIndex {
 public:
  SlideIndex() = default;
  explicit SlideIndex(std::span<const SlideImage> slides) {
    for (const auto& s : slides) add(s);
  }
  void add(const SlideImage& s) { map_[s.id] = &s; }
  const SlideImage& at(const std::string& id) const {
    auto it = map_.find(id);
    if (it == map_.end()) throw ValidationError("unknown slide '" + id + "'");
    return *it->second;
  }
  bool contains(const std::string& id) const { return map_.contains(id); }

 private:
  std::map<std::string, const SlideImage*> map_;
};

/// Square window of `crop_size` centered at (cx, cy), clamped into the slide,
/// resized to `target_size`.
inline Patch window_patch(const SlideImage& slide, int cx, int cy, int crop_size, int target_size) {
  Patch p;
  p.image_id = slide.id;
  p.size = std::min({crop_size, slide.width(), slide.height()});
  p.origin_x = clamped_origin(cx, p.size, slide.width());
  p.origin_y = clamped_origin(cy, p.size, slide.height());
  p.pixels = resize_bilinear(crop(slide.pixels, p.origin_x, p.origin_y, p.size, p.size), target_size, target_size);
  return p;
}

inline std::vector<Patch> build_stage2_samples(const SlideIndex& slides, std::span<const SampleSource> positives,
                                               std::span<const SampleSource> negatives, const Stage2Params& params,
                                               std::uint64_t rng_seed) {
  if (params.jitter < 0 || params.crop_size <= 0 || params.target_size <= 0) {
    throw SamplingError("invalid stage-2 parameters");
  }
  const BalancePlan plan = plan_balance(positives.size(), negatives.size());
  std::vector<Patch> out;
  out.reserve(positives.size() * plan.k_pos + negatives.size() * plan.k_neg);
  auto emit = [&](std::span<const SampleSource> sources, int k, PatchLabel label, const char* stream) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const SampleSource& src = sources[i];
      const SlideImage& slide = slides.at(src.image_id);
      auto rng = make_stream(rng_seed, std::string(stream) + src.image_id, i);
      for (int r = 0; r < k; ++r) {
        const int cx = src.cx + uniform_int(rng, -params.jitter, params.jitter);
        const int cy = src.cy + uniform_int(rng, -params.jitter, params.jitter);
        Patch p = window_patch(slide, cx, cy, params.crop_size, params.target_size);
        p.label = label;
        out.push_back(std::move(p));
      }
    }
  };
  emit(positives, plan.k_pos, PatchLabel::kMitotic, "stage2/pos/");
  emit(negatives, plan.k_neg, PatchLabel::kNegative, "stage2/neg/");
  return out;
}

// ---------------------------------------------------------------------------
// Patch-set persistence: a directory of PNGs plus index.json.

inline json patch_to_json(const Patch& p, const std::string& file) {
  json j = {{"file", file},         {"image_id", p.image_id}, {"origin_x", p.origin_x},
            {"origin_y", p.origin_y}, {"size", p.size},         {"label", to_string(p.label)}};
  if (p.source_annotation) {
    const auto& a = *p.source_annotation;
    j["source_annotation"] = {
        {"image_id", a.image_id}, {"x", a.x}, {"y", a.y}, {"category", static_cast<int>(a.category)}};
  } else {
    j["source_annotation"] = nullptr;
  }
  return j;
}

inline void save_patch_set(const std::filesystem::path& dir, std::span<const Patch> patches, int workers = 1) {
  std::filesystem::create_directories(dir);
  json index = json::array();
  std::vector<std::string> names(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.png", i);
    names[i] = buf;
    index.push_back(patch_to_json(patches[i], names[i]));
  }
  parallel_for(patches.size(), workers, [&](std::size_t i) { write_image(dir / names[i], patches[i].pixels); });
  std::ofstream(dir / "index.json") << index.dump(1) << '\n';
}

inline std::vector<Patch> load_patch_set(const std::filesystem::path& dir, int workers = 1) {
  std::ifstream in(dir / "index.json");
  if (!in) throw LoadError("patch index not found in " + dir.string());
  const json index = json::parse(in);
  std::vector<Patch> patches(index.size());
  parallel_for(index.size(), workers, [&](std::size_t i) {
    const json& e = index[i];
    Patch& p = patches[i];
    p.image_id = e.at("image_id").get<std::string>();
    p.origin_x = e.at("origin_x").get<int>();
    p.origin_y = e.at("origin_y").get<int>();
    p.size = e.at("size").get<int>();
    p.label = patch_label_from_string(e.at("label").get<std::string>());
    if (!e.at("source_annotation").is_null()) {
      const json& a = e["source_annotation"];
      p.source_annotation = Annotation{a.at("image_id").get<std::string>(), a.at("x").get<int>(), a.at("y").get<int>(),
                                       category_from_int(a.at("category").get<int>())};
    }
    p.pixels = read_image(dir / e.at("file").get<std::string>());
  });
  return patches;
}

}  // namespace mitodet
