#include "cxal/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "cxal/digest.hpp"

namespace cxal::corpus {

namespace {

constexpr std::array<std::string_view, kKindCount> kKindNames{
    "opacity", "consolidation", "pleural_effusion", "pneumothorax", "cardiomegaly",
    "edema",   "nodule",        "granuloma",        "atelectasis",  "support_device"};
constexpr std::array<std::string_view, 7> kLocationNames{"right_upper", "right_mid", "right_lower", "left_upper",
                                                         "left_mid",    "left_lower", "none"};
constexpr std::array<std::string_view, 4> kSeverityNames{"none", "mild", "moderate", "severe"};
constexpr std::array<std::string_view, 5> kTemporalNames{"none", "new", "stable", "improved", "worsened"};
constexpr std::array<std::string_view, 8> kErrorNames{"Change Severity",     "Change Location",
                                                      "False Prediction",    "False Negation",
                                                      "Change Measurement",  "Add Opposite Sentence",
                                                      "Add Medical Device",  "Change Position of Device"};

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<E>(i);
  }
  throw std::invalid_argument(std::string("unknown ") + what + ": '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Kind k) { return kKindNames[static_cast<std::size_t>(k)]; }
std::string_view to_string(Location l) { return kLocationNames[static_cast<std::size_t>(l)]; }
std::string_view to_string(Severity s) { return kSeverityNames[static_cast<std::size_t>(s)]; }
std::string_view to_string(Temporal t) { return kTemporalNames[static_cast<std::size_t>(t)]; }
std::string_view to_string(ErrorCategory c) { return kErrorNames[static_cast<std::size_t>(c)]; }
Kind parse_kind(std::string_view s) { return parse_enum<Kind>(s, kKindNames, "finding kind"); }
Location parse_location(std::string_view s) { return parse_enum<Location>(s, kLocationNames, "location"); }
Severity parse_severity(std::string_view s) { return parse_enum<Severity>(s, kSeverityNames, "severity"); }
Temporal parse_temporal(std::string_view s) { return parse_enum<Temporal>(s, kTemporalNames, "temporal flag"); }
ErrorCategory parse_error_category(std::string_view s) {
  return parse_enum<ErrorCategory>(s, kErrorNames, "error category");
}

bool is_device_category(ErrorCategory c) {
  return c == ErrorCategory::add_medical_device || c == ErrorCategory::change_position_of_device;
}

std::vector<Location> allowed_locations(Kind k) {
  switch (k) {
    case Kind::cardiomegaly:
    case Kind::edema:
      return {Location::none};
    case Kind::pleural_effusion:
      return {Location::right_lower, Location::left_lower};
    case Kind::pneumothorax:
      return {Location::right_upper, Location::left_upper};
    default:
      return {Location::right_upper, Location::right_mid, Location::right_lower,
              Location::left_upper,  Location::left_mid,  Location::left_lower};
  }
}

std::string describe(const Finding& f) {
  std::string s = "(" + std::string(to_string(f.kind)) + ", " + std::string(to_string(f.location)) + ", " +
                  std::string(to_string(f.severity)) + ", " + (f.negated ? "negated" : "positive") + ", " +
                  std::string(to_string(f.temporal)) + ")";
  return s;
}

std::string validate(const Finding& f) {
  const auto allowed = allowed_locations(f.kind);
  if (f.negated) {
    if (f.location != Location::none || f.severity != Severity::none) return "negated finding carries location or severity";
    if (f.temporal != Temporal::none) return "negated finding carries a temporal flag";
    return "";
  }
  if (std::find(allowed.begin(), allowed.end(), f.location) == allowed.end()) return "location not allowed for kind";
  if (f.kind == Kind::support_device) {
    if (f.severity != Severity::none) return "device carries a severity";
    if (f.temporal != Temporal::none && f.temporal != Temporal::new_onset) return "device temporal flag must be none or new";
  } else if (f.severity == Severity::none) {
    return "positive finding lacks a severity";
  }
  return "";
}

std::vector<Finding> without_temporal(std::vector<Finding> findings) {
  for (auto& f : findings) f.temporal = Temporal::none;
  return findings;
}

void validate_profile(const Profile& profile) {
  if (!(profile.normal_probability >= 0.0 && profile.normal_probability <= 1.0)) {
    throw std::invalid_argument("profile: normal probability must be in [0, 1]");
  }
  if (!(profile.negation_probability >= 0.0 && profile.negation_probability <= 1.0) ||
      !(profile.temporal_probability >= 0.0 && profile.temporal_probability <= 1.0)) {
    throw std::invalid_argument("profile: negation/temporal probabilities must be in [0, 1]");
  }
  if (profile.max_findings == 0 || profile.max_findings > 5) {
    throw std::invalid_argument("profile: max_findings must be in [1, 5]");
  }
  double total = 0.0;
  for (double w : profile.prevalence) {
    if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("profile: prevalence weights must be non-negative");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("profile: prevalence weights are all zero");
}

LatentStudy sample_latent_study(std::uint64_t seed, const Profile& profile, std::string study_id) {
  validate_profile(profile);
  Rng rng(seed);
  LatentStudy study{std::move(study_id), seed, {}};
  if (rng.bernoulli(profile.normal_probability)) return study;

  const std::size_t n = 1 + rng.below(profile.max_findings);
  std::set<Kind> positive;
  std::set<Kind> negated;
  std::set<std::pair<Kind, Location>> used;
  auto free_locations = [&](Kind k) {
    std::vector<Location> out;
    for (Location l : allowed_locations(k)) {
      if (!used.contains({k, l})) out.push_back(l);
    }
    return out;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const bool neg = rng.bernoulli(profile.negation_probability);
    std::vector<std::pair<Kind, double>> candidates;
    double total = 0.0;
    for (std::size_t k = 0; k < kKindCount; ++k) {
      const auto kind = static_cast<Kind>(k);
      const double w = profile.prevalence[k];
      if (w <= 0.0 || negated.contains(kind)) continue;
      if (neg ? positive.contains(kind) : free_locations(kind).empty()) continue;
      candidates.emplace_back(kind, w);
      total += w;
    }
    if (candidates.empty()) continue;
    double u = rng.uniform() * total;
    Kind kind = candidates.back().first;
    for (const auto& [k, w] : candidates) {
      if (u < w) {
        kind = k;
        break;
      }
      u -= w;
    }
    if (neg) {
      negated.insert(kind);
      used.insert({kind, Location::none});
      study.findings.push_back(Finding{kind, Location::none, Severity::none, true, Temporal::none});
      continue;
    }
    const auto locs = free_locations(kind);
    const Location loc = locs[rng.below(locs.size())];
    Severity sev = Severity::none;
    if (kind != Kind::support_device) sev = static_cast<Severity>(1 + rng.below(3));
    Temporal t = Temporal::none;
    if (rng.bernoulli(profile.temporal_probability)) {
      t = kind == Kind::support_device ? Temporal::new_onset : static_cast<Temporal>(1 + rng.below(4));
    }
    positive.insert(kind);
    used.insert({kind, loc});
    study.findings.push_back(Finding{kind, loc, sev, false, t});
  }
  std::sort(study.findings.begin(), study.findings.end());
  return study;
}

int template_bank(const LatentStudy& study) {
  return static_cast<int>(mix_seed(study.seed ^ 0x5eedba4bULL) & 1ULL);
}

float severity_intensity(Severity s) {
  switch (s) {
    case Severity::mild:
      return 0.4F;
    case Severity::moderate:
      return 0.7F;
    case Severity::severe:
      return 1.0F;
    case Severity::none:
      break;
  }
  return 0.9F;
}

ZoneRect zone_rect(Location loc, std::size_t size) {
  const auto s = static_cast<double>(size);
  const auto px = [&](double f) { return static_cast<std::size_t>(std::lround(f * s)); };
  if (loc == Location::none) return {px(0.30), px(0.70), px(0.45), px(0.80)};
  // Patient-right lung is drawn on the image-left column.
  const bool right = loc == Location::right_upper || loc == Location::right_mid || loc == Location::right_lower;
  const bool image_left = right == kImageLeftIsPatientRight;
  const int level = (loc == Location::right_upper || loc == Location::left_upper)   ? 0
                    : (loc == Location::right_mid || loc == Location::left_mid) ? 1
                                                                                    : 2;
  const double x0 = image_left ? 0.06 : 0.53;
  const double y0 = 0.08 + 0.28 * level;
  return {px(x0), px(x0 + 0.41), px(y0), px(y0 + 0.28)};
}

Image render_image(const LatentStudy& study, std::uint64_t noise_seed, double noise_sigma, std::size_t size) {
  if (noise_sigma < 0.0 || !std::isfinite(noise_sigma)) {
    throw std::invalid_argument("render_image: noise sigma must be non-negative");
  }
  if (size < 16) throw std::invalid_argument("render_image: canvas must be at least 16 pixels");
  Image img{size, size, std::vector<float>(size * size, kBackgroundIntensity)};
  const auto s = static_cast<double>(size);
  auto paint = [&](std::size_t x, std::size_t y, float v) {
    if (x < size && y < size) {
      float& p = img.pixels[y * size + x];
      p = std::max(p, v);
    }
  };
  auto disc = [&](double cx, double cy, double r, float v, bool soft) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx;
        const double dy = y + 0.5 - cy;
        const double d2 = (dx * dx + dy * dy) / (r * r);
        if (d2 <= 1.0) paint(x, y, soft ? static_cast<float>(v * (1.0 - 0.5 * d2)) : v);
      }
    }
  };
  auto ellipse = [&](double cx, double cy, double rx, double ry, float v) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx;
        const double dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy <= 1.0) paint(x, y, v);
      }
    }
  };

  for (const auto& f : study.findings) {
    if (f.negated) continue;
    const float v = severity_intensity(f.severity);
    const ZoneRect z = zone_rect(f.location, size);
    const double cx = 0.5 * static_cast<double>(z.x0 + z.x1);
    const double cy = 0.5 * static_cast<double>(z.y0 + z.y1);
    const double w = static_cast<double>(z.x1 - z.x0);
    const double h = static_cast<double>(z.y1 - z.y0);
    const bool image_left = z.x0 < size / 2;
    switch (f.kind) {
      case Kind::opacity:
        disc(cx, cy, 0.30 * w, v, true);
        break;
      case Kind::consolidation:
        disc(cx, cy, 0.34 * w, v, false);
        break;
      case Kind::pleural_effusion:
        // Wedge along the zone floor, deepest at the lateral wall.
        for (std::size_t y = z.y0; y < z.y1; ++y) {
          for (std::size_t x = z.x0; x < z.x1; ++x) {
            const double lateral = image_left ? (z.x1 - x) / w : (x - z.x0 + 1.0) / w;
            if (static_cast<double>(z.y1 - y) <= 0.15 * h + 0.55 * h * lateral) paint(x, y, v);
          }
        }
        break;
      case Kind::pneumothorax: {
        const std::size_t band = std::max<std::size_t>(2, size / 20);
        const std::size_t bx0 = image_left ? z.x0 : z.x1 - band;
        for (std::size_t y = z.y0; y < z.y1; ++y) {
          for (std::size_t x = bx0; x < bx0 + band; ++x) paint(x, y, v);
        }
        for (std::size_t x = z.x0; x < z.x1; ++x) {
          for (std::size_t y = z.y0; y < z.y0 + band; ++y) paint(x, y, v);
        }
        break;
      }
      case Kind::cardiomegaly:
        ellipse(0.5 * s, 0.62 * s, 0.22 * s, 0.15 * s, v);
        break;
      case Kind::edema:
        ellipse(0.33 * s, 0.48 * s, 0.09 * s, 0.16 * s, v);
        ellipse(0.67 * s, 0.48 * s, 0.09 * s, 0.16 * s, v);
        break;
      case Kind::nodule:
        disc(cx, cy, 0.06 * s, v, false);
        break;
      case Kind::granuloma:
        disc(cx, cy, 0.035 * s, v, false);
        break;
      case Kind::atelectasis: {
        const auto band = std::max<std::size_t>(2, size / 24);
        const auto y0 = static_cast<std::size_t>(cy) - band / 2;
        for (std::size_t y = y0; y < y0 + band; ++y) {
          for (std::size_t x = z.x0 + 1; x + 1 < z.x1; ++x) paint(x, y, v);
        }
        break;
      }
      case Kind::support_device: {
        const double x0 = 0.5 * s;
        const double y0 = 0.02 * s;
        const int steps = static_cast<int>(2 * s);
        for (int i = 0; i <= steps; ++i) {
          const double t = static_cast<double>(i) / steps;
          const auto px = static_cast<std::size_t>(x0 + t * (cx - x0));
          const auto py = static_cast<std::size_t>(y0 + t * (cy - y0));
          paint(px, py, v);
          paint(px + 1, py, v);
        }
        break;
      }
    }
  }

  if (noise_sigma > 0.0) {
    Rng rng(noise_seed);
    for (float& p : img.pixels) p = static_cast<float>(p + noise_sigma * rng.normal());
  }
  for (float& p : img.pixels) p = std::clamp(p, 0.0F, 1.0F);
  return img;
}

StudyRecord generate_study(const CorpusConfig& config, std::size_t index) {
  const std::uint64_t seed = derive_seed(config.seed, index);
  std::string id = std::to_string(index);
  id = "s" + std::string(id.size() < 6 ? 6 - id.size() : 0, '0') + id;
  StudyRecord rec;
  rec.latent = sample_latent_study(seed, config.profile, std::move(id));
  const auto canonical = render_report(rec.latent, Style::canonical);
  rec.rendered.findings_text = canonical.findings;
  rec.rendered.impression_text = canonical.impression;
  rec.rendered.variants = make_variants(rec.latent);
  Rng error_rng(derive_seed(seed, 2));
  rec.rendered.errors = inject_errors(rec.latent, error_rng);
  rec.rendered.image = render_image(rec.latent, derive_seed(seed, 1), config.noise_sigma, config.image_size);
  return rec;
}

std::vector<StudyRecord> generate_corpus(const CorpusConfig& config) {
  validate_profile(config.profile);
  std::vector<StudyRecord> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) out.push_back(generate_study(config, config.first_index + i));
  return out;
}

std::vector<std::string> all_texts(const StudyRecord& record) {
  std::vector<std::string> out{record.rendered.findings_text, record.rendered.impression_text};
  for (const auto& [name, text] : record.rendered.variants) out.push_back(text);
  for (const auto& e : record.rendered.errors) out.push_back(e.text);
  out.push_back(render_report(record.latent, Style::verbose).impression);
  out.push_back(render_report(record.latent, Style::abbreviated).impression);
  return out;
}

std::array<double, 5> default_variant_mix() {
  // Report counts per type used for pretraining; the mix is their proportion.
  constexpr std::array<double, 5> kCounts{319564.0, 178993.0, 169491.0, 178096.0, 272230.0};
  double total = 0.0;
  for (double c : kCounts) total += c;
  std::array<double, 5> mix{};
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = kCounts[i] / total;
  return mix;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

namespace {

using nlohmann::json;

std::string encode_pixels(const std::vector<float>& px) {
  std::vector<std::uint8_t> bytes(px.size() * 4);
  for (std::size_t i = 0; i < px.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(px[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

std::vector<float> decode_pixels(std::string_view text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw std::invalid_argument("image payload is not a whole number of floats");
  std::vector<float> px(bytes.size() / 4);
  for (std::size_t i = 0; i < px.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    px[i] = std::bit_cast<float>(bits);
  }
  return px;
}

json to_json(const StudyRecord& r, ImageEncoding enc) {
  json findings = json::array();
  for (const auto& f : r.latent.findings) {
    findings.push_back({{"kind", to_string(f.kind)},
                        {"location", to_string(f.location)},
                        {"severity", to_string(f.severity)},
                        {"negated", f.negated},
                        {"temporal", to_string(f.temporal)}});
  }
  json image{{"height", r.rendered.image.height}, {"width", r.rendered.image.width}};
  if (enc == ImageEncoding::base64_f32le) {
    image["encoding"] = "f32le-base64";
    image["data"] = encode_pixels(r.rendered.image.pixels);
  } else {
    image["encoding"] = "inline";
    image["data"] = r.rendered.image.pixels;
  }
  json errors = json::array();
  for (const auto& e : r.rendered.errors) errors.push_back({{"category", to_string(e.category)}, {"text", e.text}});
  return json{{"study_id", r.latent.study_id},
              {"seed", r.latent.seed},
              {"findings", findings},
              {"image", image},
              {"findings_text", r.rendered.findings_text},
              {"impression_text", r.rendered.impression_text},
              {"variants", r.rendered.variants},
              {"errors", errors}};
}

StudyRecord from_json(const json& j) {
  StudyRecord r;
  r.latent.study_id = j.at("study_id").get<std::string>();
  r.latent.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& f : j.at("findings")) {
    r.latent.findings.push_back(Finding{parse_kind(f.at("kind").get<std::string>()),
                                        parse_location(f.at("location").get<std::string>()),
                                        parse_severity(f.at("severity").get<std::string>()),
                                        f.at("negated").get<bool>(),
                                        parse_temporal(f.at("temporal").get<std::string>())});
  }
  const auto& img = j.at("image");
  r.rendered.image.height = img.at("height").get<std::size_t>();
  r.rendered.image.width = img.at("width").get<std::size_t>();
  const auto enc = img.at("encoding").get<std::string>();
  if (enc == "f32le-base64") {
    r.rendered.image.pixels = decode_pixels(img.at("data").get<std::string>());
  } else if (enc == "inline") {
    r.rendered.image.pixels = img.at("data").get<std::vector<float>>();
  } else {
    throw std::invalid_argument("unknown image encoding '" + enc + "'");
  }
  if (r.rendered.image.pixels.size() != r.rendered.image.height * r.rendered.image.width) {
    throw std::invalid_argument("image data does not match its dimensions");
  }
  r.rendered.findings_text = j.at("findings_text").get<std::string>();
  r.rendered.impression_text = j.at("impression_text").get<std::string>();
  r.rendered.variants = j.at("variants").get<std::map<std::string, std::string>>();
  for (const auto& e : j.at("errors")) {
    r.rendered.errors.push_back({parse_error_category(e.at("category").get<std::string>()), e.at("text").get<std::string>()});
  }
  return r;
}

}  // namespace

void write_corpus(const std::filesystem::path& path, const std::vector<StudyRecord>& studies, ImageEncoding encoding) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  for (const auto& s : studies) out << to_json(s, encoding).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for corpus " + path.string());
}

std::vector<StudyRecord> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<StudyRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw CorpusFormatError(lineno, e.what());
    }
  }
  return out;
}

}  // namespace cxal::corpus
