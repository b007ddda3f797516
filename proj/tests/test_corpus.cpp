#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "cxal/corpus.hpp"

using namespace cxal;
using namespace cxal::corpus;

namespace {

LatentStudy one_finding(Finding f) {
  LatentStudy s;
  s.study_id = "t";
  s.seed = 1;
  s.findings = {f};
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cxal_test_corpus_" + name);
}

double zone_mean(const Image& img, Location loc) {
  const ZoneRect z = zone_rect(loc, img.width);
  double s = 0.0;
  for (std::size_t y = z.y0; y < z.y1; ++y) {
    for (std::size_t x = z.x0; x < z.x1; ++x) s += img.at(y, x);
  }
  return s / static_cast<double>((z.y1 - z.y0) * (z.x1 - z.x0));
}

}  // namespace

TEST_CASE("normal probability one gives empty findings") {
  Profile p;
  p.normal_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) CHECK(sample_latent_study(seed, p, "s").normal());
}

TEST_CASE("sampling is deterministic and respects invariants") {
  const Profile p;
  CHECK(sample_latent_study(7, p, "a") == sample_latent_study(7, p, "a"));
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const LatentStudy s = sample_latent_study(seed, p, "s");
    CHECK(s.findings.size() <= 5);
    CHECK(std::is_sorted(s.findings.begin(), s.findings.end()));
    for (const Finding& f : s.findings) CHECK(validate(f).empty());
  }
}

TEST_CASE("zero prevalence excludes a kind over 10000 samples") {
  Profile p;
  p.prevalence[static_cast<std::size_t>(Kind::pneumothorax)] = 0.0;
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    for (const Finding& f : sample_latent_study(seed, p, "s").findings) hits += f.kind == Kind::pneumothorax;
  }
  CHECK(hits == 0);
}

TEST_CASE("invalid profiles are rejected") {
  Profile neg;
  neg.prevalence[0] = -1.0;
  CHECK_THROWS_AS(validate_profile(neg), std::invalid_argument);
  Profile zero;
  zero.prevalence.fill(0.0);
  CHECK_THROWS_AS(validate_profile(zero), std::invalid_argument);
}

TEST_CASE("normal study renders the fixed normal templates") {
  LatentStudy s;
  s.study_id = "n";
  const ReportText r = render_report(s, Style::canonical);
  CHECK(r.findings.find("No acute osseous abnormality.") != std::string::npos);
  const bool known = r.impression == "No acute cardiopulmonary process." || r.impression == "No active lung disease.";
  CHECK(known);
}

TEST_CASE("abbreviated right upper granuloma uses RULF") {
  const LatentStudy s = one_finding({Kind::granuloma, Location::right_upper, Severity::mild});
  const ReportText r = render_report(s, Style::abbreviated);
  CHECK(r.findings.find("RULF") != std::string::npos);
  CHECK(extract_labels(r.findings).labels == s.findings);
}

TEST_CASE("No pneumothorax parses as a negated finding") {
  const LabelParse p = extract_labels("No pneumothorax.");
  REQUIRE(p.complete());
  REQUIRE(p.labels.size() == 1);
  CHECK(p.labels[0].kind == Kind::pneumothorax);
  CHECK(p.labels[0].negated);
  CHECK(p.labels[0].location == Location::none);
  CHECK(p.labels[0].temporal == Temporal::none);
}

TEST_CASE("PTX sentence parses like its expansion") {
  const LatentStudy s = one_finding({Kind::pneumothorax, Location::left_upper, Severity::mild});
  const std::string full = render_report(s, Style::canonical).findings;
  const std::string abbr = render_report(s, Style::abbreviated).findings;
  CHECK(abbr.find("PTX") != std::string::npos);
  CHECK(extract_labels(abbr).complete());
  CHECK(extract_labels(abbr).labels == extract_labels(full).labels);
}

TEST_CASE("unrecognized sentences are kept as unparsed") {
  const LabelParse p = extract_labels("No pneumothorax. The moon is bright.");
  CHECK(p.labels.size() == 1);
  CHECK(p.unparsed == std::vector<std::string>{"The moon is bright."});
}

TEST_CASE("labels round-trip through every style and variant") {
  CorpusConfig cfg;
  cfg.count = 300;
  for (const StudyRecord& rec : generate_corpus(cfg)) {
    const auto& truth = rec.latent.findings;
    CHECK(extract_labels(rec.rendered.findings_text).labels == truth);
    for (Style st : {Style::canonical, Style::verbose, Style::abbreviated}) {
      CHECK(extract_labels(render_report(rec.latent, st).findings).labels == truth);
    }
    for (const auto& [name, text] : rec.rendered.variants) {
      CAPTURE(name);
      const LabelParse p = extract_labels(text);
      CHECK(p.complete());
      if (name == variant::prior_omitted) {
        CHECK(p.labels == without_temporal(truth));
      } else {
        CHECK(p.labels == truth);
      }
    }
  }
}

TEST_CASE("prior-omitted variant drops temporal vocabulary") {
  CorpusConfig cfg;
  cfg.count = 200;
  for (const StudyRecord& rec : generate_corpus(cfg)) {
    const std::string& ro = rec.rendered.variants.at(std::string(variant::prior_omitted));
    for (const char* w : {" new ", "stable", "improved", "worsened", "compared to prior", "interval"}) {
      CHECK(ro.find(w) == std::string::npos);
    }
    const bool any_temporal = std::any_of(rec.latent.findings.begin(), rec.latent.findings.end(),
                                          [](const Finding& f) { return f.temporal != Temporal::none; });
    if (!any_temporal) CHECK(ro == rec.rendered.findings_text);
  }
}

TEST_CASE("impression labels are a subset of findings labels") {
  CorpusConfig cfg;
  cfg.count = 200;
  for (const StudyRecord& rec : generate_corpus(cfg)) {
    const LabelParse p = extract_labels(rec.rendered.impression_text);
    CHECK(p.complete());
    for (const Finding& f : p.labels) {
      if (f.negated) continue;
      const bool found = std::any_of(rec.latent.findings.begin(), rec.latent.findings.end(),
                                     [&](const Finding& g) { return g.kind == f.kind && !g.negated; });
      CHECK(found);
    }
  }
}

TEST_CASE("variant mix proportions") {
  const auto mix = default_variant_mix();
  const std::array<double, 5> expected{0.29, 0.16, 0.15, 0.16, 0.24};
  for (std::size_t i = 0; i < 5; ++i) CHECK(mix[i] == doctest::Approx(expected[i]).epsilon(0.05));
}

TEST_CASE("erroneous impressions change the labels") {
  CorpusConfig cfg;
  cfg.count = 300;
  for (const StudyRecord& rec : generate_corpus(cfg)) {
    REQUIRE(rec.rendered.errors.size() == 3);
    const auto truth = extract_labels(rec.rendered.impression_text).labels;
    for (const auto& e : rec.rendered.errors) {
      CHECK(e.text != rec.rendered.impression_text);
      CHECK(extract_labels(e.text).labels != truth);
    }
    if (rec.latent.normal()) {
      for (const auto& e : rec.rendered.errors) {
        const bool allowed = e.category == ErrorCategory::false_prediction ||
                              e.category == ErrorCategory::add_medical_device ||
                              e.category == ErrorCategory::add_opposite_sentence;
        CHECK(allowed);
      }
    }
  }
}

TEST_CASE("change severity on a mild effusion changes severity only") {
  const LatentStudy s = one_finding({Kind::pleural_effusion, Location::right_lower, Severity::mild});
  bool seen = false;
  for (std::uint64_t seed = 0; seed < 50 && !seen; ++seed) {
    Rng rng(seed);
    for (const auto& e : inject_errors(s, rng)) {
      if (e.category != ErrorCategory::change_severity) continue;
      seen = true;
      const auto labels = extract_labels(e.text).labels;
      REQUIRE(labels.size() == 1);
      CHECK(labels[0].kind == Kind::pleural_effusion);
      CHECK(labels[0].location == Location::right_lower);
      CHECK(labels[0].severity != Severity::mild);
    }
  }
  CHECK(seen);
}

TEST_CASE("false negation on the sole finding negates it") {
  const LatentStudy s = one_finding({Kind::pneumothorax, Location::left_upper, Severity::moderate});
  bool seen = false;
  for (std::uint64_t seed = 0; seed < 50 && !seen; ++seed) {
    Rng rng(seed);
    for (const auto& e : inject_errors(s, rng)) {
      if (e.category != ErrorCategory::false_negation) continue;
      seen = true;
      const auto labels = extract_labels(e.text).labels;
      REQUIRE(labels.size() == 1);
      CHECK(labels[0].kind == Kind::pneumothorax);
      CHECK(labels[0].negated);
    }
  }
  CHECK(seen);
}

TEST_CASE("normal image with zero noise is constant background") {
  LatentStudy s;
  const Image img = render_image(s, 3, 0.0);
  CHECK(img.width == 64);
  for (float p : img.pixels) CHECK(p == kBackgroundIntensity);
  CHECK_THROWS_AS(render_image(s, 3, -0.1), std::invalid_argument);
}

TEST_CASE("images are deterministic and severity raises zone intensity") {
  const LatentStudy mild = one_finding({Kind::opacity, Location::right_mid, Severity::mild});
  const LatentStudy severe = one_finding({Kind::opacity, Location::right_mid, Severity::severe});
  CHECK(render_image(mild, 5, 0.05) == render_image(mild, 5, 0.05));
  CHECK(zone_mean(render_image(severe, 5, 0.0), Location::right_mid) >
        zone_mean(render_image(mild, 5, 0.0), Location::right_mid));
  for (float p : render_image(severe, 5, 0.5).pixels) CHECK((p >= 0.0F && p <= 1.0F));
}

TEST_CASE("lexicon expansions contain no shorthand and round-trip as text") {
  const AcronymLexicon lex = AcronymLexicon::standard();
  for (const auto& [shorthand, expansion] : lex.entries()) {
    CHECK(lex.expand(expansion) == expansion);
  }
  const AcronymLexicon back = AcronymLexicon::from_text(lex.to_text());
  CHECK(back.entries() == lex.entries());
}

TEST_CASE("corpus files round-trip in both image encodings") {
  CorpusConfig cfg;
  cfg.count = 100;
  const auto studies = generate_corpus(cfg);
  for (ImageEncoding enc : {ImageEncoding::base64_f32le, ImageEncoding::inline_floats}) {
    const auto path = temp_file("roundtrip.jsonl");
    write_corpus(path, studies, enc);
    CHECK(read_corpus(path) == studies);
  }
  const auto empty = temp_file("empty.jsonl");
  write_corpus(empty, {});
  CHECK(std::filesystem::file_size(empty) == 0);
  CHECK(read_corpus(empty).empty());
}

TEST_CASE("a corrupted line is reported by number") {
  CorpusConfig cfg;
  cfg.count = 20;
  const auto path = temp_file("corrupt.jsonl");
  write_corpus(path, generate_corpus(cfg));
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  lines[16] = lines[16].substr(0, lines[16].size() / 2);
  {
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : lines) out << l << '\n';
  }
  try {
    read_corpus(path);
    FAIL("expected CorpusFormatError");
  } catch (const CorpusFormatError& e) {
    CHECK(e.line() == 17);
  }
}

TEST_CASE("generation is index-addressable") {
  CorpusConfig cfg;
  cfg.count = 10;
  const auto all = generate_corpus(cfg);
  CHECK(generate_study(cfg, 7) == all[7]);
  CorpusConfig shifted = cfg;
  shifted.first_index = 5;
  shifted.count = 3;
  CHECK(generate_corpus(shifted)[0] == all[5]);
}
