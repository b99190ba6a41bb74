#include "stda/scenario_data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

namespace stda {

namespace fs = std::filesystem;

std::string to_string(HazardKind kind) {
  switch (kind) {
    case HazardKind::kCutInLeft: return "cut_in_left";
    case HazardKind::kCutInRight: return "cut_in_right";
    case HazardKind::kLeadBrake: return "lead_brake";
  }
  return "unknown";
}

HazardKind parse_hazard_kind(const std::string& s) {
  if (s == "cut_in_left") return HazardKind::kCutInLeft;
  if (s == "cut_in_right") return HazardKind::kCutInRight;
  if (s == "lead_brake") return HazardKind::kLeadBrake;
  fail(ErrorCode::kValue, "unknown hazard kind '" + s + "'");
}

BehaviorLabel label_for(HazardKind kind) {
  switch (kind) {
    case HazardKind::kCutInLeft: return BehaviorLabel::kTurnRight;
    case HazardKind::kCutInRight: return BehaviorLabel::kTurnLeft;
    case HazardKind::kLeadBrake: return BehaviorLabel::kBrake;
  }
  return BehaviorLabel::kBrake;
}

namespace {

HazardKind kind_for(BehaviorLabel label) {
  switch (label) {
    case BehaviorLabel::kBrake: return HazardKind::kLeadBrake;
    case BehaviorLabel::kTurnRight: return HazardKind::kCutInLeft;
    case BehaviorLabel::kTurnLeft: return HazardKind::kCutInRight;
  }
  return HazardKind::kLeadBrake;
}

using Rgb = std::array<float, 3>;

constexpr Rgb kSky{0.55f, 0.70f, 0.90f};
constexpr Rgb kRoad{0.32f, 0.32f, 0.34f};
constexpr Rgb kLane{0.85f, 0.85f, 0.80f};
constexpr Rgb kBody{0.20f, 0.25f, 0.70f};
constexpr Rgb kMarker{0.85f, 0.20f, 0.15f};

constexpr double kHorizon = 0.3;

struct Box {
  double cx, cy, w, h;
  Rgb colour;
};

double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

// Area-weighted box rasterisation so sub-pixel motion stays visible.
void draw_box(std::vector<float>& img, int s, const Box& b) {
  const double x0 = b.cx - b.w / 2, x1 = b.cx + b.w / 2, y0 = b.cy - b.h / 2, y1 = b.cy + b.h / 2;
  const int px0 = std::max(0, static_cast<int>(std::floor(x0))), px1 = std::min(s - 1, static_cast<int>(std::ceil(x1)));
  const int py0 = std::max(0, static_cast<int>(std::floor(y0))), py1 = std::min(s - 1, static_cast<int>(std::ceil(y1)));
  const size_t plane = static_cast<size_t>(s) * s;
  for (int y = py0; y <= py1; ++y) {
    const double cy = overlap(y, y + 1, y0, y1);
    for (int x = px0; x <= px1; ++x) {
      const float cov = static_cast<float>(cy * overlap(x, x + 1, x0, x1));
      if (cov <= 0.f) continue;
      for (int c = 0; c < 3; ++c) {
        float& v = img[c * plane + static_cast<size_t>(y) * s + x];
        v = (1.f - cov) * v + cov * b.colour[c];
      }
    }
  }
}

std::vector<float> background(int s) {
  std::vector<float> img(3 * static_cast<size_t>(s) * s);
  const size_t plane = static_cast<size_t>(s) * s;
  const int horizon = static_cast<int>(kHorizon * s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      Rgb c = y < horizon ? kSky : kRoad;
      const bool lane = y >= horizon && (x == s / 3 || x == (2 * s) / 3) && ((y / 3) % 2 == 0);
      if (lane) c = kLane;
      for (int k = 0; k < 3; ++k) img[k * plane + static_cast<size_t>(y) * s + x] = c[k];
    }
  }
  return img;
}

}  // namespace

LabeledSequence render_sequence(const ScenarioSpec& spec, int image_size, int t_len, const SceneStyle& style) {
  const int s = image_size;
  require(t_len >= 2, ErrorCode::kValue, "generate: need at least 2 frames to express hazard motion");
  require(spec.hazard_size > 0.0 && spec.hazard_size <= 0.25, ErrorCode::kValue,
          "generate: hazard_size must lie in (0, 0.25]");
  require(spec.hazard_size * s >= 3.0, ErrorCode::kValue,
          "generate: image of " + std::to_string(s) + " px is too small for hazard_size " +
              std::to_string(spec.hazard_size));
  require(spec.noise_level >= 0.0 && spec.hazard_speed >= 0.0, ErrorCode::kValue,
          "generate: noise_level and hazard_speed must be non-negative");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };

  const double width = spec.hazard_size * s;
  const double height = 0.75 * width;
  const double sigma = width / 2;
  const double margin = 3 * sigma;
  const double centre = s / 2.0;

  LabeledSequence seq;
  seq.t_len = t_len;
  seq.height = seq.width = s;
  seq.label = label_for(spec.hazard_kind);
  seq.meta = spec;

  // Kinematics: cut-ins move laterally towards the centre and stop short of
  // it; a braking lead vehicle stays near the centre, approaching and growing.
  const double steps = t_len - 1;
  const double y_lo = std::max(margin, kHorizon * s + height), y_hi = s - margin;
  if (spec.hazard_kind == HazardKind::kLeadBrake) {
    const double x = std::clamp(centre + style.brake_jitter * s * (2 * u01(rng) - 1), margin, s - margin);
    const double dy = std::min(0.5 * spec.hazard_speed, (y_hi - y_lo) / steps);
    const double y0 = uniform(y_lo, y_hi - dy * steps);
    for (int t = 0; t < t_len; ++t) {
      const double grow = std::min(1.0 + 0.08 * t, 2.0);
      seq.hazard_track.push_back({x, y0 + dy * t, width * grow, height * grow});
    }
  } else {
    const double offset_lo = 0.06 * s, offset_hi = std::max(offset_lo, centre - margin - 0.05 * steps);
    const double offset = uniform(offset_lo, std::min(offset_hi, 0.22 * s));
    const double room = centre - offset - margin;
    const double speed = std::clamp(spec.hazard_speed, 0.05, std::max(0.05, room / steps));
    const double dir = spec.hazard_kind == HazardKind::kCutInLeft ? 1.0 : -1.0;
    const double x_end = centre - dir * offset;
    const double y = uniform(y_lo, y_hi);
    for (int t = 0; t < t_len; ++t) {
      seq.hazard_track.push_back({x_end - dir * speed * (steps - t), y, width, height});
    }
  }

  // Stationary decoys that look like the hazard apart from its marker.
  std::uniform_int_distribution<int> n_decoys(style.min_decoys, std::max(style.min_decoys, style.max_decoys));
  const int decoys = n_decoys(rng);
  std::vector<Box> static_boxes;
  for (int d = 0; d < decoys; ++d) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double x = uniform(width / 2 + 1, s - width / 2 - 1);
      const double y = uniform(kHorizon * s + height / 2 + 1, s - height / 2 - 1);
      bool clear = true;
      for (const auto& h : seq.hazard_track) clear = clear && std::hypot(x - h.cx, y - h.cy) > 1.3 * h.w;
      for (const auto& b : static_boxes) clear = clear && std::hypot(x - b.cx, y - b.cy) > 1.3 * width;
      if (clear) {
        static_boxes.push_back({x, y, width, height, kBody});
        break;
      }
    }
  }

  Rgb hazard_colour;
  for (int c = 0; c < 3; ++c) {
    hazard_colour[c] = static_cast<float>((1 - style.marker_strength) * kBody[c] + style.marker_strength * kMarker[c]);
  }

  const size_t plane = static_cast<size_t>(s) * s;
  const auto bg = background(s);
  std::normal_distribution<double> noise(0.0, 1.0);
  seq.frames.resize(static_cast<size_t>(t_len) * 3 * plane);
  seq.attention.resize(static_cast<size_t>(t_len) * plane);
  for (int t = 0; t < t_len; ++t) {
    auto img = bg;
    for (const auto& b : static_boxes) draw_box(img, s, b);
    const auto& h = seq.hazard_track[t];
    draw_box(img, s, {h.cx, h.cy, h.w, h.h, hazard_colour});
    for (auto& v : img) {
      const double n = spec.noise_level > 0 ? spec.noise_level * noise(rng) : 0.0;
      v = static_cast<float>(std::clamp(v + n, 0.0, 1.0));
    }
    std::copy(img.begin(), img.end(), seq.frames.begin() + static_cast<int64_t>(t * 3 * plane));
    float* att = seq.attention.data() + t * plane;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double dx = x + 0.5 - h.cx, dy = y + 0.5 - h.cy;
        att[static_cast<size_t>(y) * s + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
      }
    }
  }
  return seq;
}

std::vector<LabeledSequence> generate_dataset(int64_t n, const std::vector<double>& class_ratios, int image_size,
                                              int t_len, uint64_t seed, const SceneStyle& style) {
  require(n >= 0, ErrorCode::kValue, "generate: n must be non-negative");
  require(class_ratios.size() == kNumBehaviors, ErrorCode::kValue, "generate: need 3 class ratios");
  double sum = 0.0;
  for (double r : class_ratios) {
    require(std::isfinite(r) && r >= 0.0, ErrorCode::kValue, "generate: class ratios must be non-negative");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-6, ErrorCode::kValue, "generate: class ratios sum to " + std::to_string(sum));

  // Largest-remainder quotas keep realised proportions within 1/n of the request.
  std::vector<int64_t> quota(kNumBehaviors);
  std::vector<std::pair<double, int>> remainders;
  int64_t assigned = 0;
  for (int c = 0; c < kNumBehaviors; ++c) {
    const double exact = class_ratios[c] * static_cast<double>(n);
    quota[c] = static_cast<int64_t>(std::floor(exact));
    assigned += quota[c];
    remainders.push_back({exact - static_cast<double>(quota[c]), c});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (int64_t k = 0; assigned < n; ++k, ++assigned) ++quota[remainders[k % kNumBehaviors].second];

  std::vector<BehaviorLabel> labels;
  for (int c = 0; c < kNumBehaviors; ++c) labels.insert(labels.end(), quota[c], static_cast<BehaviorLabel>(c));
  std::mt19937_64 order(seed);
  std::shuffle(labels.begin(), labels.end(), order);

  std::vector<LabeledSequence> out;
  out.reserve(n);
  const double speed_scale = image_size / 32.0;
  for (int64_t i = 0; i < n; ++i) {
    const uint64_t seq_seed = seed + static_cast<uint64_t>(i);
    std::mt19937_64 rng(seq_seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> speed(style.min_speed, style.max_speed);
    ScenarioSpec spec;
    spec.hazard_kind = kind_for(labels[i]);
    spec.hazard_speed = speed(rng) * speed_scale;
    spec.hazard_size = style.hazard_size;
    spec.noise_level = style.noise_level;
    spec.seed = seq_seed;
    auto seq = render_sequence(spec, image_size, t_len, style);
    char id[32];
    std::snprintf(id, sizeof id, "seq%06lld", static_cast<long long>(i));
    seq.id = id;
    out.push_back(std::move(seq));
  }
  return out;
}

void assign_splits(std::vector<LabeledSequence>& seqs, double val_fraction, double test_fraction, uint64_t seed) {
  require(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction < 1, ErrorCode::kValue,
          "assign_splits: fractions must be non-negative and sum below 1");
  std::mt19937_64 rng(seed);
  for (int c = 0; c < kNumBehaviors; ++c) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < seqs.size(); ++i) {
      if (static_cast<int>(seqs[i].label) == c) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<size_t>(std::llround(test_fraction * idx.size()));
    const auto n_val = static_cast<size_t>(std::llround(val_fraction * idx.size()));
    for (size_t k = 0; k < idx.size(); ++k) {
      seqs[idx[k]].split = k < n_test ? "test" : (k < n_test + n_val ? "val" : "train");
    }
  }
}

Batch make_batch(const std::vector<LabeledSequence>& seqs, const std::vector<size_t>& indices) {
  require(!indices.empty(), ErrorCode::kValue, "make_batch: no sequences selected");
  const auto& first = seqs.at(indices[0]);
  const int64_t n = static_cast<int64_t>(indices.size()), t = first.t_len, h = first.height, w = first.width;
  const bool with_att = !first.attention.empty();
  Batch b;
  b.frames = Tensor<float>({n, t, 3, h, w});
  if (with_att) b.attention = Tensor<float>({n, t, 1, h, w});
  const size_t fsz = static_cast<size_t>(t * 3 * h * w), asz = static_cast<size_t>(t * h * w);
  for (int64_t i = 0; i < n; ++i) {
    const auto& s = seqs.at(indices[i]);
    require(s.t_len == t && s.height == h && s.width == w, ErrorCode::kShape,
            "make_batch: sequence " + s.id + " differs in shape from " + first.id);
    std::copy(s.frames.begin(), s.frames.end(), b.frames.data() + i * fsz);
    if (with_att) {
      require(s.attention.size() == asz, ErrorCode::kShape, "make_batch: sequence " + s.id + " lacks attention");
      std::copy(s.attention.begin(), s.attention.end(), b.attention.data() + i * asz);
    }
    b.labels.push_back(static_cast<int>(s.label));
  }
  return b;
}

std::vector<size_t> indices_of_split(const std::vector<LabeledSequence>& seqs, const std::string& split) {
  std::vector<size_t> out;
  for (size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].split == split) out.push_back(i);
  }
  return out;
}

Image read_png(const fs::path& path) {
  require(fs::exists(path), ErrorCode::kIo, "cannot open image " + path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorCode::kFormat, "undecodable image " + path.string() + ": " + img.message);
  }
  const bool colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = colour ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(ErrorCode::kFormat, "undecodable image " + path.string() + ": " + img.message);
  }
  return out;
}

void write_png(const fs::path& path, const Image& img) {
  require(img.channels == 1 || img.channels == 3, ErrorCode::kValue, "write_png: channels must be 1 or 3");
  require(img.pixels.size() == static_cast<size_t>(img.width) * img.height * img.channels, ErrorCode::kShape,
          "write_png: pixel buffer does not match dimensions");
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&out, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, "cannot write " + path.string() + ": " + out.message);
  }
}

std::vector<float> preprocess(const Image& img, int size) {
  require(img.width > 0 && img.height > 0 && (img.channels == 1 || img.channels == 3), ErrorCode::kFormat,
          "preprocess: undecodable image");
  require(size > 0, ErrorCode::kValue, "preprocess: target size must be positive");
  const int side = std::min(img.width, img.height);
  const int ox = (img.width - side) / 2, oy = (img.height - side) / 2;
  const double scale = static_cast<double>(side) / size;
  auto src = [&](int x, int y, int c) {
    const int ch = img.channels == 3 ? c : 0;
    return static_cast<double>(img.pixels[(static_cast<size_t>(oy + y) * img.width + ox + x) * img.channels + ch]);
  };
  std::vector<float> out(3 * static_cast<size_t>(size) * size);
  const size_t plane = static_cast<size_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, side - 1.0);
    const int y0 = static_cast<int>(std::floor(sy)), y1 = std::min(y0 + 1, side - 1);
    const double fy = sy - y0;
    for (int x = 0; x < size; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, side - 1.0);
      const int x0 = static_cast<int>(std::floor(sx)), x1 = std::min(x0 + 1, side - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - fx) * src(x0, y0, c) + fx * src(x1, y0, c);
        const double bot = (1 - fx) * src(x0, y1, c) + fx * src(x1, y1, c);
        out[c * plane + static_cast<size_t>(y) * size + x] = static_cast<float>(((1 - fy) * top + fy * bot) / 255.0);
      }
    }
  }
  return out;
}

DatasetManifest load_manifest(const fs::path& path, int min_frames) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot read manifest " + path.string());
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  std::set<std::string> ids;
  std::string line;
  size_t index = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest record " + std::to_string(index);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kFormat, where + ": malformed JSON (" + e.what() + ")");
    }
    ManifestRecord rec;
    try {
      rec.sequence_id = j.at("sequence_id").get<std::string>();
      for (const auto& f : j.at("frames")) rec.frames.push_back(base / f.get<std::string>());
      if (j.contains("attention")) {
        for (const auto& f : j.at("attention")) rec.attention.push_back(base / f.get<std::string>());
      }
      rec.label = parse_behavior(j.at("label").get<std::string>());
      rec.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kFormat, where + ": missing or mistyped field (" + e.what() + ")");
    } catch (const Error& e) {
      fail(ErrorCode::kFormat, where + ": " + e.what());
    }
    const std::string named = where + " (" + rec.sequence_id + ")";
    require(rec.split == "train" || rec.split == "val" || rec.split == "test", ErrorCode::kFormat,
            named + ": split must be train, val or test");
    require(ids.insert(rec.sequence_id).second, ErrorCode::kFormat, named + ": duplicate sequence_id");
    require(static_cast<int>(rec.frames.size()) >= min_frames, ErrorCode::kFormat,
            named + ": has " + std::to_string(rec.frames.size()) + " frames, need " + std::to_string(min_frames));
    require(rec.attention.empty() || rec.attention.size() == rec.frames.size(), ErrorCode::kFormat,
            named + ": attention count differs from frame count");
    for (const auto& f : rec.frames) {
      require(fs::exists(f), ErrorCode::kNotFound, named + ": missing frame file " + f.string());
    }
    for (const auto& f : rec.attention) {
      require(fs::exists(f), ErrorCode::kNotFound, named + ": missing attention file " + f.string());
    }
    manifest.records.push_back(std::move(rec));
    ++index;
  }
  require(!manifest.records.empty(), ErrorCode::kFormat, "empty manifest " + path.string());
  return manifest;
}

fs::path save_dataset(const std::vector<LabeledSequence>& seqs, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  fs::create_directories(dir / "attention", ec);
  require(!ec, ErrorCode::kIo, "cannot create dataset directory " + dir.string());
  const fs::path manifest_path = dir / "manifest.jsonl";
  std::ofstream out(manifest_path);
  require(out.good(), ErrorCode::kIo, "cannot write " + manifest_path.string());
  for (const auto& s : seqs) {
    const size_t plane = static_cast<size_t>(s.height) * s.width;
    nlohmann::json rec;
    rec["sequence_id"] = s.id;
    rec["frames"] = nlohmann::json::array();
    rec["attention"] = nlohmann::json::array();
    for (int t = 0; t < s.t_len; ++t) {
      const std::string stem = s.id + "_t" + std::to_string(t) + ".png";
      Image rgb{s.width, s.height, 3, std::vector<uint8_t>(3 * plane)};
      for (size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
          rgb.pixels[p * 3 + c] = static_cast<uint8_t>(std::lround(255.0f * s.frames[(t * 3 + c) * plane + p]));
        }
      }
      write_png(dir / "frames" / stem, rgb);
      rec["frames"].push_back("frames/" + stem);
      if (!s.attention.empty()) {
        Image gray{s.width, s.height, 1, std::vector<uint8_t>(plane)};
        for (size_t p = 0; p < plane; ++p) {
          gray.pixels[p] = static_cast<uint8_t>(std::lround(255.0f * s.attention[t * plane + p]));
        }
        write_png(dir / "attention" / stem, gray);
        rec["attention"].push_back("attention/" + stem);
      }
    }
    if (rec["attention"].empty()) rec.erase("attention");
    rec["label"] = to_string(s.label);
    rec["split"] = s.split;
    out << rec.dump() << "\n";
  }
  return manifest_path;
}

std::vector<LabeledSequence> load_sequences(const DatasetManifest& manifest, int t_len, int image_size) {
  std::vector<LabeledSequence> out;
  const size_t plane = static_cast<size_t>(image_size) * image_size;
  for (const auto& rec : manifest.records) {
    require(static_cast<int>(rec.frames.size()) >= t_len, ErrorCode::kShape,
            "sequence " + rec.sequence_id + " has fewer than " + std::to_string(t_len) + " frames");
    LabeledSequence s;
    s.id = rec.sequence_id;
    s.t_len = t_len;
    s.height = s.width = image_size;
    s.label = rec.label;
    s.meta.hazard_kind = kind_for(rec.label);
    s.split = rec.split;
    for (int t = 0; t < t_len; ++t) {
      auto f = preprocess(read_png(rec.frames[t]), image_size);
      s.frames.insert(s.frames.end(), f.begin(), f.end());
      if (!rec.attention.empty()) {
        auto a = preprocess(read_png(rec.attention[t]), image_size);
        s.attention.insert(s.attention.end(), a.begin(), a.begin() + static_cast<int64_t>(plane));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace stda
