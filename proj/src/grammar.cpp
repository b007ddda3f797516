// Report grammar: surface rendering, variants, error injection and the
// inverse label parser.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <optional>
#include <set>
#include <sstream>

#include "cxal/corpus.hpp"

namespace cxal::corpus {

namespace {

// ---------------------------------------------------------------------------
// Small text helpers

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

/// "a", "a or b", "a, b, or c"
std::string join_list(const std::vector<std::string>& items, std::string_view conj) {
  if (items.size() == 1) return items[0];
  if (items.size() == 2) return items[0] + " " + std::string(conj) + " " + items[1];
  std::string out;
  for (std::size_t i = 0; i + 1 < items.size(); ++i) out += items[i] + ", ";
  return out + std::string(conj) + " " + items.back();
}

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '-' || c == '/';
}

// ---------------------------------------------------------------------------
// Vocabulary tables

enum class Region { lungs, pleura, heart, devices };

Region region_of(Kind k) {
  switch (k) {
    case Kind::pleural_effusion:
    case Kind::pneumothorax:
      return Region::pleura;
    case Kind::cardiomegaly:
      return Region::heart;
    case Kind::support_device:
      return Region::devices;
    default:
      return Region::lungs;
  }
}

constexpr std::array<std::string_view, 4> kRegionHeadings{"Lungs", "Pleura", "Heart", "Devices"};

constexpr std::array<std::string_view, 3> kLevelWords{"upper", "mid", "lower"};

Location zone_of(bool right, int level) {
  static constexpr std::array<Location, 3> kRight{Location::right_upper, Location::right_mid,
                                                  Location::right_lower};
  static constexpr std::array<Location, 3> kLeft{Location::left_upper, Location::left_mid, Location::left_lower};
  return right ? kRight[static_cast<std::size_t>(level)] : kLeft[static_cast<std::size_t>(level)];
}

std::string location_phrase(std::vector<Location> zones) {
  std::vector<std::string> items;
  bool bilateral = false;
  for (int level = 0; level < 3; ++level) {
    const bool r = std::find(zones.begin(), zones.end(), zone_of(true, level)) != zones.end();
    const bool l = std::find(zones.begin(), zones.end(), zone_of(false, level)) != zones.end();
    const std::string lw(kLevelWords[static_cast<std::size_t>(level)]);
    if (r && l) {
      items.push_back("bilateral " + lw);
      bilateral = true;
    } else if (r) {
      items.push_back("right " + lw);
    } else if (l) {
      items.push_back("left " + lw);
    }
  }
  const bool plural = items.size() > 1 || bilateral;
  return join_list(items, "and") + (plural ? " lung fields" : " lung field");
}

std::string severity_adjective(Severity s, int bank) {
  switch (s) {
    case Severity::mild:
      return bank == 0 ? "mild" : "minimal";
    case Severity::moderate:
      return "moderate";
    case Severity::severe:
      return bank == 0 ? "severe" : "extensive";
    case Severity::none:
      break;
  }
  return "";
}

std::string severity_adverb(Severity s) {
  switch (s) {
    case Severity::mild:
      return "mildly";
    case Severity::moderate:
      return "moderately";
    case Severity::severe:
      return "severely";
    case Severity::none:
      break;
  }
  return "";
}

std::string granuloma_size_word(Severity s) {
  switch (s) {
    case Severity::mild:
      return "tiny";
    case Severity::moderate:
      return "small";
    case Severity::severe:
      return "large";
    case Severity::none:
      break;
  }
  return "";
}

int canonical_nodule_mm(Severity s) {
  switch (s) {
    case Severity::mild:
      return 4;
    case Severity::moderate:
      return 7;
    default:
      return 15;
  }
}

Severity severity_from_mm(double mm) {
  if (mm < 6.0) return Severity::mild;
  if (mm < 12.0) return Severity::moderate;
  return Severity::severe;
}

std::string positive_noun(Kind k, int bank, bool plural) {
  switch (k) {
    case Kind::opacity:
      return bank == 0 ? (plural ? "opacities" : "opacity") : (plural ? "ground-glass opacities" : "ground-glass opacity");
    case Kind::consolidation:
      return bank == 0 ? "consolidation" : "airspace consolidation";
    case Kind::pleural_effusion:
      return bank == 0 ? (plural ? "pleural effusions" : "pleural effusion") : "pleural fluid";
    case Kind::pneumothorax:
      return plural ? "pneumothoraces" : "pneumothorax";
    case Kind::cardiomegaly:
      return "cardiomegaly";
    case Kind::edema:
      return bank == 0 ? "pulmonary edema" : "interstitial edema";
    case Kind::nodule:
      return bank == 0 ? (plural ? "nodules" : "nodule") : (plural ? "nodular opacities" : "nodular opacity");
    case Kind::granuloma:
      return plural ? "calcified granulomas" : "calcified granuloma";
    case Kind::atelectasis:
      return bank == 0 ? "atelectasis" : "collapse of lung";
    case Kind::support_device:
      return bank == 0 ? (plural ? "central venous catheters" : "central venous catheter")
                       : (plural ? "central lines" : "central line");
  }
  return "";
}

std::string negation_noun(Kind k, int bank) {
  switch (k) {
    case Kind::opacity:
      return bank == 0 ? "focal opacity" : "ground-glass opacity";
    case Kind::consolidation:
      return bank == 0 ? "focal consolidation" : "airspace consolidation";
    case Kind::pleural_effusion:
      return bank == 0 ? "pleural effusion" : "pleural fluid";
    case Kind::pneumothorax:
      return "pneumothorax";
    case Kind::cardiomegaly:
      return "cardiomegaly";
    case Kind::edema:
      return bank == 0 ? "pulmonary edema" : "interstitial edema";
    case Kind::nodule:
      return bank == 0 ? "pulmonary nodule" : "nodular opacity";
    case Kind::granuloma:
      return "calcified granuloma";
    case Kind::atelectasis:
      return bank == 0 ? "atelectasis" : "collapse of lung";
    case Kind::support_device:
      return bank == 0 ? "central venous catheter" : "central line";
  }
  return "";
}

std::string_view temporal_word(Temporal t) {
  switch (t) {
    case Temporal::new_onset:
      return "new";
    case Temporal::stable:
      return "stable";
    case Temporal::improved:
      return "improved";
    case Temporal::worsened:
      return "worsened";
    case Temporal::none:
      break;
  }
  return "";
}

/// Trailing comparison clause for stable / improved / worsened.
std::string temporal_suffix(Temporal t, int bank, bool verbose) {
  if (t == Temporal::none || t == Temporal::new_onset) return "";
  const std::string w(temporal_word(t));
  if (verbose) return ", which is " + w + " compared to the prior examination";
  return bank == 0 ? ", " + w + " compared to prior" : ", " + w + " since the prior study";
}

// ---------------------------------------------------------------------------
// Clauses: one rendered sentence each

struct Clause {
  enum class Form { finding, negation, boilerplate } form = Form::finding;
  Kind kind = Kind::opacity;
  Severity severity = Severity::none;
  Temporal temporal = Temporal::none;
  std::vector<Location> zones;
  std::vector<Kind> negated_kinds;
  int size = 0;  // nodule measurement
  std::string unit = "mm";
  std::string text;  // boilerplate sentence
};

Clause finding_clause(Kind k, Severity s, Temporal t, std::vector<Location> zones) {
  Clause c;
  c.kind = k;
  c.severity = s;
  c.temporal = t;
  c.zones = std::move(zones);
  c.zones.erase(std::remove(c.zones.begin(), c.zones.end(), Location::none), c.zones.end());
  if (k == Kind::nodule) c.size = canonical_nodule_mm(s);
  return c;
}

Clause negation_clause(std::vector<Kind> kinds) {
  Clause c;
  c.form = Clause::Form::negation;
  c.negated_kinds = std::move(kinds);
  return c;
}

Clause boilerplate_clause(std::string text) {
  Clause c;
  c.form = Clause::Form::boilerplate;
  c.text = std::move(text);
  return c;
}

std::string render_finding(const Clause& c, int bank, bool verbose) {
  const bool plural = c.zones.size() > 1;
  const bool is_new = c.temporal == Temporal::new_onset;
  const std::string noun = positive_noun(c.kind, bank, plural);
  const std::string loc = c.zones.empty() ? "" : location_phrase(c.zones);
  const std::string tsuf = temporal_suffix(c.temporal, bank, verbose);
  const std::string nw = is_new ? "new " : "";
  const std::string sev = severity_adjective(c.severity, bank);
  const std::string measure = std::to_string(c.size) + " " + c.unit;
  std::string s;

  if (verbose) {
    switch (c.kind) {
      case Kind::cardiomegaly:
        s = "The cardiac silhouette is " + severity_adverb(c.severity) + " enlarged" + (is_new ? ", which is new" : tsuf);
        break;
      case Kind::edema:
        s = "There is evidence of " + nw + sev + " " + noun + " in both lungs" + tsuf;
        break;
      case Kind::support_device:
        s = plural ? capitalize(nw + noun) + " are present, projecting over the " + loc + tsuf
                   : "A " + nw + noun + " is present, projecting over the " + loc + tsuf;
        break;
      case Kind::nodule:
        s = "In the " + loc + ", there " + (plural ? "are " : "is a ") + nw + measure + " " + noun + tsuf;
        break;
      case Kind::granuloma:
        s = "In the " + loc + ", there " + (plural ? "are " : "is a ") + nw + granuloma_size_word(c.severity) + " " +
            noun + tsuf;
        break;
      default:
        s = "In the " + loc + ", there is evidence of " + nw + sev + " " + noun + tsuf;
        break;
    }
    return s + ".";
  }

  if (bank == 0) {
    switch (c.kind) {
      case Kind::nodule:
        s = (is_new ? "New " : (plural ? "" : "A ")) + measure + " " + noun + " in the " + loc + tsuf;
        break;
      case Kind::granuloma:
        s = (is_new ? "New " : (plural ? "" : "A ")) + granuloma_size_word(c.severity) + " " + noun + " in the " +
            loc + tsuf;
        break;
      case Kind::support_device:
        s = (is_new ? "New " : (plural ? "" : "A ")) + noun + (plural ? " project over the " : " projects over the ") +
            loc + tsuf;
        break;
      case Kind::cardiomegaly:
      case Kind::edema:
        s = nw + sev + " " + noun + tsuf;
        break;
      default:
        s = nw + sev + " " + noun + " in the " + loc + tsuf;
        break;
    }
    return capitalize(s) + ".";
  }

  switch (c.kind) {
    case Kind::cardiomegaly:
      s = "The heart is " + severity_adverb(c.severity) + " enlarged" + (is_new ? ", which is new" : tsuf);
      break;
    case Kind::support_device:
      s = plural ? "The tips of " + nw + noun + " overlie the " + loc + tsuf
                 : "The tip of a " + nw + noun + " overlies the " + loc + tsuf;
      break;
    case Kind::nodule:
      s = std::string("There ") + (plural ? "are " : "is a ") + nw + measure + " " + noun + " in the " + loc + tsuf;
      break;
    case Kind::granuloma:
      s = std::string("There ") + (plural ? "are " : "is a ") + nw + granuloma_size_word(c.severity) + " " + noun +
          " in the " + loc + tsuf;
      break;
    case Kind::edema:
      s = "There is " + nw + sev + " " + noun + tsuf;
      break;
    default:
      s = std::string("There ") + (plural ? "are " : "is ") + nw + sev + " " + noun + " in the " + loc + tsuf;
      break;
  }
  return s + ".";
}

std::string render_negation(const std::vector<Kind>& kinds, int bank, bool verbose) {
  std::vector<std::string> nouns;
  nouns.reserve(kinds.size());
  for (Kind k : kinds) nouns.push_back(negation_noun(k, bank));
  const std::string list = join_list(nouns, "or");
  if (verbose) return "There is no evidence of " + list + ".";
  return bank == 0 ? "No " + list + "." : "There is no " + list + ".";
}

std::string render_clause(const Clause& c, int bank, bool verbose) {
  switch (c.form) {
    case Clause::Form::finding:
      return render_finding(c, bank, verbose);
    case Clause::Form::negation:
      return render_negation(c.negated_kinds, bank, verbose);
    case Clause::Form::boilerplate:
      return c.text;
  }
  return "";
}

const std::vector<std::string>& normal_findings_sentences(int bank, bool verbose) {
  static const std::vector<std::string> kBank0{"The lungs are clear.",
                                               "The cardiomediastinal silhouette is within normal limits.",
                                               "No acute osseous abnormality."};
  static const std::vector<std::string> kBank1{"The lungs are well expanded and clear.",
                                               "Mediastinal contours are unremarkable.",
                                               "No acute osseous abnormality."};
  static const std::vector<std::string> kVerbose{"The lungs are well expanded and clear bilaterally.",
                                                 "The mediastinal and hilar contours are unremarkable.",
                                                 "There is no acute osseous abnormality."};
  if (verbose) return kVerbose;
  return bank == 0 ? kBank0 : kBank1;
}

std::string normal_impression(int bank, bool verbose) {
  if (verbose) return "There is no acute cardiopulmonary process.";
  return bank == 0 ? "No acute cardiopulmonary process." : "No active lung disease.";
}

enum class Layout { original, split, partitioned };

std::vector<Finding> positives(const std::vector<Finding>& fs) {
  std::vector<Finding> out;
  for (const auto& f : fs) {
    if (!f.negated) out.push_back(f);
  }
  return out;
}

std::vector<Kind> negated_kinds(const std::vector<Finding>& fs) {
  std::vector<Kind> out;
  for (const auto& f : fs) {
    if (f.negated) out.push_back(f.kind);
  }
  return out;
}

std::string render_findings(const std::vector<Finding>& findings, int bank, bool verbose, Layout layout) {
  if (findings.empty()) {
    const auto& normal = normal_findings_sentences(bank, verbose);
    if (layout != Layout::partitioned) return join(normal, " ");
    return "Lungs: " + normal[0] + " Heart: " + normal[1] + " Other: " + normal[2];
  }
  const auto pos = positives(findings);
  const auto negs = negated_kinds(findings);

  if (layout == Layout::partitioned) {
    std::vector<std::string> out;
    for (std::size_t r = 0; r < kRegionHeadings.size(); ++r) {
      const auto region = static_cast<Region>(r);
      std::vector<std::string> sentences;
      for (const auto& f : pos) {
        if (region_of(f.kind) == region) {
          sentences.push_back(render_finding(finding_clause(f.kind, f.severity, f.temporal, {f.location}), bank, verbose));
        }
      }
      std::vector<Kind> region_negs;
      for (Kind k : negs) {
        if (region_of(k) == region) region_negs.push_back(k);
      }
      if (!region_negs.empty()) sentences.push_back(render_negation(region_negs, bank, verbose));
      if (sentences.empty()) continue;
      sentences[0] = std::string(kRegionHeadings[r]) + ": " + sentences[0];
      out.push_back(join(sentences, " "));
    }
    return join(out, " ");
  }

  std::vector<std::string> sentences;
  for (const auto& f : pos) {
    sentences.push_back(render_finding(finding_clause(f.kind, f.severity, f.temporal, {f.location}), bank, verbose));
  }
  if (!negs.empty()) {
    if (layout == Layout::split) {
      for (Kind k : negs) sentences.push_back(render_negation({k}, bank, verbose));
    } else {
      sentences.push_back(render_negation(negs, bank, verbose));
    }
  }
  return join(sentences, " ");
}

/// Impression: positive findings only, merged across locations that share kind, severity and temporal flag.
std::vector<Clause> impression_clauses(const LatentStudy& study, int bank) {
  std::vector<Clause> out;
  for (const auto& f : positives(study.findings)) {
    auto it = std::find_if(out.begin(), out.end(), [&](const Clause& c) {
      return c.kind == f.kind && c.severity == f.severity && c.temporal == f.temporal;
    });
    if (it == out.end()) {
      out.push_back(finding_clause(f.kind, f.severity, f.temporal, {f.location}));
    } else if (f.location != Location::none) {
      it->zones.push_back(f.location);
      std::sort(it->zones.begin(), it->zones.end());
    }
  }
  if (out.empty()) out.push_back(boilerplate_clause(normal_impression(bank, false)));
  return out;
}

std::string render_clauses(const std::vector<Clause>& clauses, int bank, bool verbose) {
  std::vector<std::string> s;
  s.reserve(clauses.size());
  for (const auto& c : clauses) s.push_back(render_clause(c, bank, verbose));
  return join(s, " ");
}

std::string render_impression(const LatentStudy& study, int bank, bool verbose) {
  auto clauses = impression_clauses(study, bank);
  if (verbose && clauses.size() == 1 && clauses[0].form == Clause::Form::boilerplate) {
    return normal_impression(bank, true);
  }
  return render_clauses(clauses, bank, verbose);
}

// ---------------------------------------------------------------------------
// Parser

struct Phrase {
  std::vector<std::string> tokens;
  Kind kind;
};

const std::vector<Phrase>& phrase_table() {
  static const std::vector<Phrase> kTable = [] {
    std::vector<Phrase> t{
        {{"nodular", "opacity"}, Kind::nodule},
        {{"nodular", "opacities"}, Kind::nodule},
        {{"pulmonary", "nodule"}, Kind::nodule},
        {{"nodule"}, Kind::nodule},
        {{"nodules"}, Kind::nodule},
        {{"calcified", "granuloma"}, Kind::granuloma},
        {{"calcified", "granulomas"}, Kind::granuloma},
        {{"granuloma"}, Kind::granuloma},
        {{"focal", "opacity"}, Kind::opacity},
        {{"ground-glass", "opacity"}, Kind::opacity},
        {{"ground-glass", "opacities"}, Kind::opacity},
        {{"opacity"}, Kind::opacity},
        {{"opacities"}, Kind::opacity},
        {{"focal", "consolidation"}, Kind::consolidation},
        {{"airspace", "consolidation"}, Kind::consolidation},
        {{"consolidation"}, Kind::consolidation},
        {{"pleural", "effusion"}, Kind::pleural_effusion},
        {{"pleural", "effusions"}, Kind::pleural_effusion},
        {{"pleural", "fluid"}, Kind::pleural_effusion},
        {{"pneumothorax"}, Kind::pneumothorax},
        {{"pneumothoraces"}, Kind::pneumothorax},
        {{"cardiomegaly"}, Kind::cardiomegaly},
        {{"heart"}, Kind::cardiomegaly},
        {{"cardiac", "silhouette"}, Kind::cardiomegaly},
        {{"pulmonary", "edema"}, Kind::edema},
        {{"interstitial", "edema"}, Kind::edema},
        {{"edema"}, Kind::edema},
        {{"atelectasis"}, Kind::atelectasis},
        {{"collapse", "of", "lung"}, Kind::atelectasis},
        {{"central", "venous", "catheter"}, Kind::support_device},
        {{"central", "venous", "catheters"}, Kind::support_device},
        {{"central", "line"}, Kind::support_device},
        {{"central", "lines"}, Kind::support_device},
    };
    std::stable_sort(t.begin(), t.end(),
                     [](const Phrase& a, const Phrase& b) { return a.tokens.size() > b.tokens.size(); });
    return t;
  }();
  return kTable;
}

std::optional<Severity> severity_word(std::string_view w) {
  static const std::map<std::string, Severity, std::less<>> kWords{
      {"mild", Severity::mild},         {"minimal", Severity::mild},         {"tiny", Severity::mild},
      {"mildly", Severity::mild},       {"moderate", Severity::moderate},    {"moderately", Severity::moderate},
      {"small", Severity::moderate},    {"severe", Severity::severe},        {"extensive", Severity::severe},
      {"large", Severity::severe},      {"severely", Severity::severe},
  };
  const auto it = kWords.find(w);
  if (it == kWords.end()) return std::nullopt;
  return it->second;
}

std::optional<Temporal> temporal_token(std::string_view w) {
  if (w == "new") return Temporal::new_onset;
  if (w == "stable") return Temporal::stable;
  if (w == "improved") return Temporal::improved;
  if (w == "worsened") return Temporal::worsened;
  return std::nullopt;
}

bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

std::vector<std::string> word_tokens(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(lower(cur));
    cur.clear();
  };
  for (char c : sentence) {
    if (std::isspace(static_cast<unsigned char>(c)) != 0) {
      flush();
    } else if (c == '.' || c == ',' || c == ':') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  flush();
  return out;
}

const std::set<std::string>& boilerplate_set() {
  static const std::set<std::string> kSet = [] {
    std::set<std::string> s;
    auto add = [&](const std::string& sentence) {
      std::vector<std::string> toks;
      for (auto& t : word_tokens(sentence)) {
        if (!is_article(t) && t != "." && t != ",") toks.push_back(t);
      }
      s.insert(join(toks, " "));
    };
    for (int bank = 0; bank < 2; ++bank) {
      for (const auto& x : normal_findings_sentences(bank, false)) add(x);
      add(normal_impression(bank, false));
    }
    for (const auto& x : normal_findings_sentences(0, true)) add(x);
    add(normal_impression(0, true));
    return s;
  }();
  return kSet;
}

const std::set<std::string>& heading_words() {
  static const std::set<std::string> kSet{"lungs", "pleura", "heart", "devices", "other"};
  return kSet;
}

/// Parses one sentence; returns false when the grammar does not recognize it.
bool parse_sentence(const std::vector<std::string>& raw, std::vector<Finding>& out) {
  std::vector<std::string> toks;
  std::size_t start = 0;
  if (raw.size() >= 2 && raw[1] == ":" && heading_words().contains(raw[0])) start = 2;
  for (std::size_t i = start; i < raw.size(); ++i) {
    if (raw[i] == "." || is_article(raw[i])) continue;
    toks.push_back(raw[i]);
  }
  if (toks.empty()) return true;

  std::vector<Kind> kinds;
  std::vector<bool> consumed(toks.size(), false);
  for (std::size_t i = 0; i < toks.size();) {
    bool matched = false;
    for (const auto& p : phrase_table()) {
      if (i + p.tokens.size() > toks.size()) continue;
      if (std::equal(p.tokens.begin(), p.tokens.end(), toks.begin() + static_cast<std::ptrdiff_t>(i))) {
        kinds.push_back(p.kind);
        for (std::size_t k = 0; k < p.tokens.size(); ++k) consumed[i + k] = true;
        i += p.tokens.size();
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }

  if (kinds.empty()) {
    std::vector<std::string> plain;
    for (const auto& t : toks) {
      if (t != ",") plain.push_back(t);
    }
    return boilerplate_set().contains(join(plain, " "));
  }

  const bool negated = toks[0] == "no" || (toks.size() >= 3 && toks[0] == "there" && toks[1] == "is" && toks[2] == "no");
  if (negated) {
    for (Kind k : kinds) out.push_back(Finding{k, Location::none, Severity::none, true, Temporal::none});
    return true;
  }
  if (kinds.size() != 1) return false;
  const Kind kind = kinds[0];

  std::vector<Location> zones;
  std::optional<Severity> severity;
  Temporal temporal = Temporal::none;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (consumed[i]) continue;
    const auto& t = toks[i];
    if ((t == "right" || t == "left" || t == "bilateral") && i + 1 < toks.size()) {
      const auto lvl = std::find(kLevelWords.begin(), kLevelWords.end(), toks[i + 1]);
      if (lvl != kLevelWords.end()) {
        const int level = static_cast<int>(lvl - kLevelWords.begin());
        if (t != "left") zones.push_back(zone_of(true, level));
        if (t != "right") zones.push_back(zone_of(false, level));
        ++i;
        continue;
      }
    }
    if (i + 1 < toks.size() && (toks[i + 1] == "mm" || toks[i + 1] == "cm") &&
        std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; })) {
      const double v = std::strtod(t.c_str(), nullptr) * (toks[i + 1] == "cm" ? 10.0 : 1.0);
      severity = severity_from_mm(v);
      ++i;
      continue;
    }
    if (auto s = severity_word(t); s && kind != Kind::nodule) {
      if (severity && *severity != *s) return false;
      severity = s;
      continue;
    }
    if (auto tw = temporal_token(t)) {
      if (temporal != Temporal::none && temporal != *tw) return false;
      temporal = *tw;
    }
  }

  const auto allowed = allowed_locations(kind);
  const bool localized = !(allowed.size() == 1 && allowed[0] == Location::none);
  if (localized == zones.empty()) return false;
  for (Location z : zones) {
    if (std::find(allowed.begin(), allowed.end(), z) == allowed.end()) return false;
  }
  if (kind == Kind::support_device) {
    if (severity) return false;
    severity = Severity::none;
  } else if (!severity) {
    return false;
  }
  if (zones.empty()) zones.push_back(Location::none);
  for (Location z : zones) out.push_back(Finding{kind, z, *severity, false, temporal});
  return true;
}

// ---------------------------------------------------------------------------
// Error injection

struct ErrorDraft {
  std::vector<Clause> clauses;
  bool ok = false;
};

bool impression_is_normal(const std::vector<Clause>& cs) {
  return cs.size() == 1 && cs[0].form == Clause::Form::boilerplate;
}

std::vector<std::size_t> finding_indices(const std::vector<Clause>& cs, auto&& pred) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (cs[i].form == Clause::Form::finding && pred(cs[i])) out.push_back(i);
  }
  return out;
}

std::vector<Location> free_zones(const std::vector<Clause>& cs, Kind kind) {
  std::vector<Location> out;
  for (Location z : allowed_locations(kind)) {
    if (z == Location::none) continue;
    bool used = false;
    for (const auto& c : cs) {
      if (c.form == Clause::Form::finding && c.kind == kind &&
          std::find(c.zones.begin(), c.zones.end(), z) != c.zones.end()) {
        used = true;
      }
    }
    if (!used) out.push_back(z);
  }
  return out;
}

std::set<Kind> positive_kinds(const std::vector<Clause>& cs) {
  std::set<Kind> out;
  for (const auto& c : cs) {
    if (c.form == Clause::Form::finding) out.insert(c.kind);
  }
  return out;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

Severity other_severity(Severity s, Rng& rng) {
  std::vector<Severity> opts;
  for (Severity x : {Severity::mild, Severity::moderate, Severity::severe}) {
    if (x != s) opts.push_back(x);
  }
  return pick(opts, rng);
}

bool can_relocate(const std::vector<Clause>& cs, const Clause& c) {
  return !c.zones.empty() && !free_zones(cs, c.kind).empty();
}

bool category_applies(ErrorCategory cat, const std::vector<Clause>& cs) {
  switch (cat) {
    case ErrorCategory::change_severity:
      return !finding_indices(cs, [](const Clause& c) {
                return c.kind != Kind::support_device && c.kind != Kind::nodule;
              }).empty();
    case ErrorCategory::change_location:
      return !finding_indices(cs, [&](const Clause& c) {
                return c.kind != Kind::support_device && can_relocate(cs, c);
              }).empty();
    case ErrorCategory::false_prediction:
    case ErrorCategory::add_opposite_sentence:
      return true;
    case ErrorCategory::false_negation:
      return !finding_indices(cs, [](const Clause& c) { return c.kind != Kind::support_device; }).empty();
    case ErrorCategory::change_measurement:
      return !finding_indices(cs, [](const Clause& c) { return c.kind == Kind::nodule; }).empty();
    case ErrorCategory::add_medical_device:
      return !positive_kinds(cs).contains(Kind::support_device);
    case ErrorCategory::change_position_of_device:
      return !finding_indices(cs, [&](const Clause& c) {
                return c.kind == Kind::support_device && can_relocate(cs, c);
              }).empty();
  }
  return false;
}

/// Inserts or replaces one sentence: a normal impression's boilerplate is replaced.
void insert_clause(std::vector<Clause>& cs, Clause c) {
  if (impression_is_normal(cs)) {
    cs[0] = std::move(c);
  } else {
    cs.push_back(std::move(c));
  }
}

std::vector<Clause> apply_error(ErrorCategory cat, std::vector<Clause> cs, Rng& rng, std::set<Kind>& used_fp_kinds) {
  switch (cat) {
    case ErrorCategory::change_severity: {
      const auto idx = finding_indices(cs, [](const Clause& c) {
        return c.kind != Kind::support_device && c.kind != Kind::nodule;
      });
      Clause& c = cs[pick(idx, rng)];
      c.severity = other_severity(c.severity, rng);
      break;
    }
    case ErrorCategory::change_location:
    case ErrorCategory::change_position_of_device: {
      const bool device = cat == ErrorCategory::change_position_of_device;
      const auto idx = finding_indices(cs, [&](const Clause& c) {
        return (c.kind == Kind::support_device) == device && can_relocate(cs, c);
      });
      const std::size_t i = pick(idx, rng);
      const auto targets = free_zones(cs, cs[i].kind);
      Clause& c = cs[i];
      c.zones[rng.below(c.zones.size())] = pick(targets, rng);
      std::sort(c.zones.begin(), c.zones.end());
      break;
    }
    case ErrorCategory::false_prediction: {
      std::vector<Kind> kinds;
      const auto present = positive_kinds(cs);
      for (std::size_t k = 0; k < kKindCount; ++k) {
        const auto kind = static_cast<Kind>(k);
        if (kind != Kind::support_device && !present.contains(kind) && !used_fp_kinds.contains(kind)) {
          kinds.push_back(kind);
        }
      }
      const Kind kind = pick(kinds, rng);
      used_fp_kinds.insert(kind);
      const auto zones = allowed_locations(kind);
      const Severity sev = pick(std::vector<Severity>{Severity::mild, Severity::moderate, Severity::severe}, rng);
      insert_clause(cs, finding_clause(kind, sev, Temporal::none, {pick(zones, rng)}));
      break;
    }
    case ErrorCategory::false_negation: {
      const auto idx = finding_indices(cs, [](const Clause& c) { return c.kind != Kind::support_device; });
      const std::size_t i = pick(idx, rng);
      cs[i] = negation_clause({cs[i].kind});
      break;
    }
    case ErrorCategory::change_measurement: {
      const auto idx = finding_indices(cs, [](const Clause& c) { return c.kind == Kind::nodule; });
      Clause& c = cs[pick(idx, rng)];
      const Severity current = severity_from_mm(c.unit == "cm" ? c.size * 10.0 : c.size);
      std::vector<std::pair<int, std::string>> options;
      for (int mm : {3, 5, 6, 9, 10, 13, 16, 20}) {
        if (severity_from_mm(mm) != current) options.emplace_back(mm, "mm");
      }
      if (severity_from_mm(c.size * 10.0) != current) options.emplace_back(c.size, "cm");
      const auto& [size, unit] = pick(options, rng);
      c.size = size;
      c.unit = unit;
      break;
    }
    case ErrorCategory::add_opposite_sentence: {
      const auto idx = finding_indices(cs, [](const Clause&) { return true; });
      if (idx.empty()) {
        cs.push_back(finding_clause(Kind::cardiomegaly, Severity::moderate, Temporal::none, {}));
      } else {
        cs.push_back(negation_clause({cs[pick(idx, rng)].kind}));
      }
      break;
    }
    case ErrorCategory::add_medical_device: {
      const auto zones = allowed_locations(Kind::support_device);
      insert_clause(cs, finding_clause(Kind::support_device, Severity::none, Temporal::none, {pick(zones, rng)}));
      break;
    }
  }
  return cs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

std::string_view kind_noun(Kind kind) {
  switch (kind) {
    case Kind::opacity:
      return "opacity";
    case Kind::consolidation:
      return "consolidation";
    case Kind::pleural_effusion:
      return "pleural effusion";
    case Kind::pneumothorax:
      return "pneumothorax";
    case Kind::cardiomegaly:
      return "cardiomegaly";
    case Kind::edema:
      return "pulmonary edema";
    case Kind::nodule:
      return "nodule";
    case Kind::granuloma:
      return "calcified granuloma";
    case Kind::atelectasis:
      return "atelectasis";
    case Kind::support_device:
      return "central venous catheter";
  }
  return "";
}

std::string status_sentence(Kind kind, std::string_view status) {
  return capitalize(std::string(kind_noun(kind))) + " is " + std::string(status) + ".";
}

std::string kind_status(const LatentStudy& study, Kind kind) {
  for (const auto& f : study.findings) {
    if (f.kind != kind) continue;
    if (f.negated) return "absent";
    if (f.temporal == Temporal::none) return "present";
    return std::string(temporal_word(f.temporal));
  }
  return "absent";
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    cur += text[i];
    if (text[i] == '.' && (i + 1 == text.size() || text[i + 1] == ' ')) {
      out.push_back(cur);
      cur.clear();
      while (i + 1 < text.size() && text[i + 1] == ' ') ++i;
    }
  }
  std::size_t b = cur.find_first_not_of(' ');
  if (b != std::string::npos) out.push_back(cur.substr(b));
  return out;
}

ReportText render_report(const LatentStudy& study, Style style) {
  const int bank = template_bank(study);
  switch (style) {
    case Style::canonical:
      return {render_findings(study.findings, bank, false, Layout::original), render_impression(study, bank, false)};
    case Style::verbose:
      return {render_findings(study.findings, bank, true, Layout::original), render_impression(study, bank, true)};
    case Style::abbreviated: {
      const auto lex = AcronymLexicon::standard();
      return {lex.abbreviate(render_findings(study.findings, bank, false, Layout::original)),
              lex.abbreviate(render_impression(study, bank, false))};
    }
  }
  return {};
}

std::map<std::string, std::string> make_variants(const LatentStudy& study) {
  const int bank = template_bank(study);
  std::map<std::string, std::string> v;
  v[std::string(variant::paraphrase)] = render_findings(study.findings, 1 - bank, false, Layout::original);
  v[std::string(variant::split)] = render_findings(study.findings, bank, false, Layout::split);
  v[std::string(variant::prior_omitted)] =
      render_findings(without_temporal(study.findings), bank, false, Layout::original);
  v[std::string(variant::partitioned)] = render_findings(study.findings, bank, false, Layout::partitioned);
  v[std::string(variant::abbreviated)] = render_report(study, Style::abbreviated).findings;
  v[std::string(variant::verbose)] = render_findings(study.findings, bank, true, Layout::original);
  return v;
}

std::vector<ErrorCategory> eligible_error_categories(const LatentStudy& study) {
  const auto cs = impression_clauses(study, template_bank(study));
  std::vector<ErrorCategory> out;
  for (int c = 0; c <= static_cast<int>(ErrorCategory::change_position_of_device); ++c) {
    const auto cat = static_cast<ErrorCategory>(c);
    if (category_applies(cat, cs)) out.push_back(cat);
  }
  std::stable_partition(out.begin(), out.end(), [](ErrorCategory c) { return !is_device_category(c); });
  return out;
}

std::vector<ErroneousImpression> inject_errors(const LatentStudy& study, Rng& rng) {
  const int bank = template_bank(study);
  const auto truth = impression_clauses(study, bank);
  std::vector<ErrorCategory> primary;
  std::vector<ErrorCategory> device;
  for (ErrorCategory c : eligible_error_categories(study)) {
    (is_device_category(c) ? device : primary).push_back(c);
  }
  rng.shuffle(std::span(primary));
  rng.shuffle(std::span(device));
  std::vector<ErrorCategory> chosen;
  for (ErrorCategory c : primary) {
    if (chosen.size() < 3) chosen.push_back(c);
  }
  for (ErrorCategory c : device) {
    if (chosen.size() < 3) chosen.push_back(c);
  }
  while (chosen.size() < 3) chosen.push_back(ErrorCategory::false_prediction);

  std::set<Kind> used_fp;
  std::vector<ErroneousImpression> out;
  for (ErrorCategory c : chosen) {
    out.push_back({c, render_clauses(apply_error(c, truth, rng, used_fp), bank, false)});
  }
  return out;
}

LabelParse extract_labels(std::string_view text) {
  const auto lex = AcronymLexicon::standard();
  LabelParse result;
  for (const auto& sentence : split_sentences(text)) {
    const auto tokens = word_tokens(lex.expand(sentence));
    if (!parse_sentence(tokens, result.labels)) result.unparsed.push_back(sentence);
  }
  std::sort(result.labels.begin(), result.labels.end());
  result.labels.erase(std::unique(result.labels.begin(), result.labels.end()), result.labels.end());
  return result;
}

// ---------------------------------------------------------------------------
// Lexicon

AcronymLexicon AcronymLexicon::standard() {
  static const AcronymLexicon kStandard = [] {
    AcronymLexicon lex;
    lex.add("PTX", "pneumothorax");
    lex.add("GGO", "ground-glass opacity");
    lex.add("CVC", "central venous catheter");
    lex.add("RULF", "right upper lung field");
    lex.add("RMLF", "right mid lung field");
    lex.add("RLLF", "right lower lung field");
    lex.add("LULF", "left upper lung field");
    lex.add("LMLF", "left mid lung field");
    lex.add("LLLF", "left lower lung field");
    lex.add("BULF", "bilateral upper lung fields");
    lex.add("BMLF", "bilateral mid lung fields");
    lex.add("BLLF", "bilateral lower lung fields");
    lex.add("s/p", "status post");
    return lex;
  }();
  return kStandard;
}

void AcronymLexicon::add(std::string shorthand, std::string expansion) {
  if (shorthand.empty() || expansion.empty()) {
    throw std::invalid_argument("lexicon entry must have a shorthand and an expansion");
  }
  const std::string key = lower(shorthand);
  for (const auto& [k, e] : entries_) {
    if (lower(k) == key) throw std::invalid_argument("duplicate lexicon shorthand: " + shorthand);
  }
  entries_.emplace_back(std::move(shorthand), std::move(expansion));
  for (const auto& [k, e] : entries_) {
    for (const auto& tok : word_tokens(e)) {
      for (const auto& [k2, e2] : entries_) {
        if (tok == lower(k2)) {
          entries_.pop_back();
          throw std::invalid_argument("lexicon expansion of '" + k + "' contains shorthand '" + k2 + "'");
        }
      }
    }
  }
}

AcronymLexicon AcronymLexicon::from_text(std::string_view text) {
  AcronymLexicon lex;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("lexicon line " + std::to_string(lineno) + ": expected key=expansion");
    }
    lex.add(line.substr(0, eq), line.substr(eq + 1));
  }
  return lex;
}

std::string AcronymLexicon::to_text() const {
  std::string out;
  for (const auto& [k, e] : entries_) out += k + "=" + e + "\n";
  return out;
}

std::string AcronymLexicon::expand(std::string_view text) const {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i])) {
      out += text[i++];
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    const std::string word(text.substr(i, j - i));
    const std::string lw = lower(word);
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return lower(e.first) == lw; });
    out += it == entries_.end() ? word : it->second;
    i = j;
  }
  return out;
}

std::string AcronymLexicon::abbreviate(std::string_view text) const {
  std::vector<std::pair<std::string, std::string>> order(entries_.begin(), entries_.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });
  std::string s(text);
  for (const auto& [key, expansion] : order) {
    const std::string le = lower(expansion);
    std::string ls = lower(s);
    std::size_t pos = 0;
    while ((pos = ls.find(le, pos)) != std::string::npos) {
      const std::size_t end = pos + le.size();
      const bool left_ok = pos == 0 || !is_word_char(s[pos - 1]);
      const bool right_ok = end >= s.size() || !is_word_char(s[end]);
      if (left_ok && right_ok) {
        s.replace(pos, le.size(), key);
        ls = lower(s);
        pos += key.size();
      } else {
        ++pos;
      }
    }
  }
  // Drop articles and restore sentence-initial capitals.
  std::string out;
  std::size_t i = 0;
  bool sentence_start = true;
  while (i < s.size()) {
    if (!is_word_char(s[i])) {
      if (s[i] == ' ' && (out.empty() || out.back() == ' ')) {
        ++i;
        continue;
      }
      if (s[i] == '.' || s[i] == ':') sentence_start = true;
      out += s[i++];
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && is_word_char(s[j])) ++j;
    std::string word = s.substr(i, j - i);
    i = j;
    if (is_article(lower(word))) {
      while (i < s.size() && s[i] == ' ') ++i;
      continue;
    }
    if (sentence_start) {
      word = capitalize(word);
      sentence_start = false;
    }
    out += word;
  }
  return out;
}

}  // namespace cxal::corpus
