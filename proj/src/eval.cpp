#include "cxal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cxal/digest.hpp"

namespace cxal {

// ---------------------------------------------------------------------------
// Retrieval

void EmbeddingIndex::add(std::string id, std::span<const float> vec) {
  if (ids.empty() && dim == 0) dim = vec.size();
  if (vec.size() != dim || dim == 0) {
    throw ShapeError("embedding index: row of dimension " + std::to_string(vec.size()) + ", index has " +
                     std::to_string(dim));
  }
  const double norm = std::sqrt(static_cast<double>(dot(vec, vec)));
  if (std::abs(norm - 1.0) > 1e-5) {
    throw std::invalid_argument("embedding index: row '" + id + "' has norm " + std::to_string(norm));
  }
  if (std::find(ids.begin(), ids.end(), id) != ids.end()) {
    throw std::invalid_argument("embedding index: duplicate id '" + id + "'");
  }
  ids.push_back(std::move(id));
  data.insert(data.end(), vec.begin(), vec.end());
}

float dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(s);
}

void normalize(std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  if (!(s > 0.0)) throw NumericError("normalize: zero vector");
  const double inv = 1.0 / std::sqrt(s);
  for (float& x : v) x = static_cast<float>(x * inv);
}

std::vector<std::vector<std::size_t>> retrieve_topk(const EmbeddingIndex& queries, const EmbeddingIndex& pool,
                                                    std::size_t k) {
  if (pool.size() == 0) throw std::invalid_argument("retrieve: empty pool");
  if (k == 0 || k > pool.size()) {
    throw std::invalid_argument("retrieve: k = " + std::to_string(k) + " outside [1, " + std::to_string(pool.size()) +
                                "]");
  }
  if (queries.size() > 0 && queries.dim != pool.dim) {
    throw ShapeError("retrieve: query dimension " + std::to_string(queries.dim) + " vs pool " +
                     std::to_string(pool.dim));
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(queries.size());
  std::vector<float> scores(pool.size());
  std::vector<std::size_t> order(pool.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t p = 0; p < pool.size(); ++p) scores[p] = dot(queries.row(q), pool.row(p));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (scores[a] != scores[b]) return scores[a] > scores[b];
                        return pool.ids[a] < pool.ids[b];
                      });
    out.emplace_back(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

RecallAtK recall_at_k(const EmbeddingIndex& queries, const EmbeddingIndex& pool, std::span<const std::size_t> truth) {
  if (truth.size() != queries.size()) throw std::invalid_argument("recall: one truth index per query required");
  RecallAtK r;
  r.queries = queries.size();
  r.pool = pool.size();
  if (queries.size() == 0) return r;
  const std::size_t kmax = std::min<std::size_t>(10, pool.size());
  const auto top = retrieve_topk(queries, pool, kmax);
  std::array<std::size_t, 3> hits{};
  const std::array<std::size_t, 3> ks{1, 5, 10};
  for (std::size_t q = 0; q < top.size(); ++q) {
    const auto it = std::find(top[q].begin(), top[q].end(), truth[q]);
    const auto rank = static_cast<std::size_t>(it - top[q].begin());
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (rank < std::min(ks[i], kmax)) ++hits[i];
    }
  }
  const double n = static_cast<double>(queries.size());
  r.at1 = static_cast<double>(hits[0]) / n;
  r.at5 = static_cast<double>(hits[1]) / n;
  r.at10 = static_cast<double>(hits[2]) / n;
  return r;
}

}  // namespace cxal

namespace cxal::eval {

namespace {

using corpus::Finding;
using corpus::StudyRecord;
using nlohmann::json;

std::vector<float> random_unit(std::uint64_t seed, std::size_t dim) {
  Rng rng(seed);
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  normalize(v);
  return v;
}

const std::string* find_variant(const StudyRecord& rec, std::string_view name) {
  const auto it = rec.rendered.variants.find(std::string(name));
  return it == rec.rendered.variants.end() ? nullptr : &it->second;
}

std::vector<Finding> positive_entities(const std::vector<Finding>& labels) {
  std::vector<Finding> out;
  for (auto f : labels) {
    if (f.negated) continue;
    f.temporal = corpus::Temporal::none;
    out.push_back(f);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string entity_key(const Finding& f) {
  return std::string(corpus::to_string(f.kind)) + "/" + std::string(corpus::to_string(f.location)) + "/" +
         std::string(corpus::to_string(f.severity));
}

void add_recall(TaskResult& r, const RecallAtK& rec) {
  r.metrics["recall@1"] = rec.at1;
  r.metrics["recall@5"] = rec.at5;
  r.metrics["recall@10"] = rec.at10;
  r.metrics["random_recall@1"] = rec.pool == 0 ? 0.0 : 1.0 / static_cast<double>(rec.pool);
  r.items = rec.queries;
  r.pool = rec.pool;
}

using TextOf = std::function<const std::string*(const StudyRecord&)>;

/// Query -> unique mate retrieval over studies whose query and target texts are both unseen.
TaskResult paired_recall(std::string name, const TextEmbedder& embed, const std::vector<StudyRecord>& test,
                         std::size_t pool_size, const TextOf& query_of, std::string_view query_instr,
                         const TextOf& target_of, std::string_view target_instr) {
  TaskResult r;
  r.task = std::move(name);
  std::vector<StudyRecord> usable;
  std::size_t missing = 0;
  std::size_t verbatim = 0;
  for (const auto& rec : test) {
    const auto* q = query_of(rec);
    const auto* t = target_of(rec);
    if (q == nullptr || t == nullptr) {
      ++missing;
    } else if (*q == *t) {
      // A query identical to its target carries no signal.
      ++verbatim;
    } else {
      usable.push_back(rec);
    }
  }
  r.excluded = missing + verbatim;
  if (missing > 0) r.notes.push_back(std::to_string(missing) + " studies lack the needed variant");
  if (verbatim > 0) r.notes.push_back(std::to_string(verbatim) + " studies whose query equals the target skipped");
  if (usable.empty()) {
    r.notes.push_back("skipped: no study carries the needed variant");
    return r;
  }
  const auto picked = select_unique(usable, pool_size, [&](const StudyRecord& rec) {
    return std::vector<std::string>{*query_of(rec), *target_of(rec)};
  });
  if (picked.size() < pool_size) {
    r.notes.push_back("pool limited to " + std::to_string(picked.size()) + " unique pairs");
  }
  EmbeddingIndex queries{"text", 0, {}, {}};
  EmbeddingIndex pool{"text", 0, {}, {}};
  std::vector<std::size_t> truth;
  for (std::size_t i : picked) {
    const auto& rec = usable[i];
    queries.add(rec.latent.study_id, embed(*query_of(rec), Section::none, query_instr));
    pool.add(rec.latent.study_id, embed(*target_of(rec), Section::none, target_instr));
    truth.push_back(truth.size());
  }
  add_recall(r, recall_at_k(queries, pool, truth));
  return r;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

TextEmbedder random_text_embedder(std::uint64_t seed, std::size_t dim) {
  return [seed, dim](std::string_view text, Section, std::string_view) {
    return random_unit(mix_seed(seed ^ fnv1a(text)), dim);
  };
}

ImageEmbedder random_image_embedder(std::uint64_t seed, std::size_t dim) {
  return [seed, dim](const corpus::Image& img) {
    Fnv1a h;
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(img.pixels.data()), img.pixels.size() * sizeof(float)));
    return random_unit(mix_seed(seed ^ h.value()), dim);
  };
}

TextEmbedder text_embedder(const Encoder& enc) {
  return [&enc](std::string_view text, Section section, std::string_view instr) {
    return enc.text(text, section, instr, false);
  };
}

TextEmbedder report_embedder(const Encoder& enc) {
  return [&enc](std::string_view text, Section section, std::string_view) { return enc.report(text, section); };
}

ImageEmbedder image_embedder(const Encoder& enc) {
  return [&enc](const corpus::Image& img) { return enc.image(img); };
}

std::string_view to_string(Side s) {
  switch (s) {
    case Side::findings:
      return "findings";
    case Side::impression:
      return "impression";
    case Side::image:
      return "image";
  }
  return "findings";
}

Side parse_side(std::string_view s) {
  if (s == "findings") return Side::findings;
  if (s == "impression") return Side::impression;
  if (s == "image") return Side::image;
  throw std::invalid_argument("unknown side '" + std::string(s) + "' (findings, impression, image)");
}

EmbeddingIndex embed_corpus(const Encoder& enc, const std::vector<StudyRecord>& studies, Side side, bool section_tag) {
  if (side == Side::image && !enc.has_vision()) {
    throw std::invalid_argument("embed: image side requested from a text-only checkpoint");
  }
  EmbeddingIndex index{side == Side::image ? "image" : "text", 0, {}, {}};
  for (const auto& rec : studies) {
    if (side == Side::image) {
      index.add(rec.latent.study_id, enc.image(rec.rendered.image));
      continue;
    }
    const bool imp = side == Side::impression;
    const auto& text = imp ? rec.rendered.impression_text : rec.rendered.findings_text;
    const Section section = section_tag ? (imp ? Section::impression : Section::findings) : Section::none;
    if (enc.has_vision()) {
      index.add(rec.latent.study_id, enc.report(text, section));
    } else {
      index.add(rec.latent.study_id, enc.text(text, section, {}, false));
    }
  }
  return index;
}

const TaskResult* EvalReport::find(std::string_view task) const {
  for (const auto& t : tasks) {
    if (t.task == task) return &t;
  }
  return nullptr;
}

bool EvalReport::passed() const {
  return std::all_of(flags.begin(), flags.end(), [](const auto& kv) { return kv.second; });
}

std::string to_json(const EvalReport& r) {
  json tasks = json::array();
  for (const auto& t : r.tasks) {
    tasks.push_back({{"task", t.task},
                     {"items", t.items},
                     {"pool", t.pool},
                     {"excluded", t.excluded},
                     {"metrics", t.metrics},
                     {"notes", t.notes}});
  }
  json j{{"label", r.label}, {"config_digest", r.config_digest}, {"tasks", tasks}, {"flags", r.flags},
         {"passed", r.passed()}};
  return j.dump(2);
}

EvalReport parse_eval_report(std::string_view text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.label = j.value("label", "");
    r.config_digest = j.value("config_digest", "");
    for (const auto& t : j.at("tasks")) {
      TaskResult tr;
      tr.task = t.at("task").get<std::string>();
      tr.items = t.value("items", std::size_t{0});
      tr.pool = t.value("pool", std::size_t{0});
      tr.excluded = t.value("excluded", std::size_t{0});
      tr.metrics = t.value("metrics", std::map<std::string, double>{});
      tr.notes = t.value("notes", std::vector<std::string>{});
      r.tasks.push_back(std::move(tr));
    }
    r.flags = j.value("flags", std::map<std::string, bool>{});
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("eval report: ") + e.what());
  }
  return r;
}

std::string render_table(const std::vector<EvalReport>& reports) {
  const std::vector<std::pair<std::string, std::string>> cols{
      {"@1", "recall@1"},  {"@5", "recall@5"},   {"@10", "recall@10"},  {"Acc", "accuracy"},
      {"MF1", "macro_f1"}, {"EF1", "entity_f1"}, {"Rank", "mean_rank"},
  };
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Run", "Task", "Pool"});
  for (const auto& c : cols) rows.front().push_back(c.first);
  for (const auto& rep : reports) {
    for (const auto& t : rep.tasks) {
      std::vector<std::string> row{rep.label.empty() ? "-" : rep.label, t.task, std::to_string(t.pool)};
      for (const auto& c : cols) {
        const auto it = t.metrics.find(c.second);
        row.push_back(it == t.metrics.end() ? "-" : fmt(it->second, c.first == "Rank" ? 2 : 3));
      }
      rows.push_back(std::move(row));
    }
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      if (i > 0) os << "  ";
      if (i < 2) {
        os << std::left << std::setw(static_cast<int>(width[i])) << rows[r][i];
      } else {
        os << std::right << std::setw(static_cast<int>(width[i])) << rows[r][i];
      }
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

void apply_thresholds(EvalReport& report, const std::map<std::string, double>& minimums) {
  for (const auto& [name, min] : minimums) {
    const auto dot_pos = name.find('.');
    if (dot_pos == std::string::npos) throw std::invalid_argument("threshold '" + name + "' must be task.metric");
    const auto* task = report.find(name.substr(0, dot_pos));
    bool ok = false;
    if (task != nullptr) {
      const auto it = task->metrics.find(name.substr(dot_pos + 1));
      ok = it != task->metrics.end() && it->second >= min;
    }
    report.flags[name + ">=" + fmt(min, 4)] = ok;
  }
}

std::vector<std::size_t> select_unique(const std::vector<StudyRecord>& studies, std::size_t limit,
                                       const std::function<std::vector<std::string>(const StudyRecord&)>& keys) {
  std::vector<std::set<std::string>> seen;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < studies.size() && out.size() < limit; ++i) {
    const auto k = keys(studies[i]);
    if (seen.size() < k.size()) seen.resize(k.size());
    bool fresh = true;
    for (std::size_t j = 0; j < k.size(); ++j) fresh = fresh && !seen[j].contains(k[j]);
    if (!fresh) continue;
    for (std::size_t j = 0; j < k.size(); ++j) seen[j].insert(k[j]);
    out.push_back(i);
  }
  return out;
}

std::string visible_signature(const corpus::LatentStudy& study) {
  std::string s;
  for (const auto& f : positive_entities(study.findings)) s += entity_key(f) + ";";
  return s;
}

TaskResult task1_prior_omitted(const TextEmbedder& embed, const std::vector<StudyRecord>& test, std::size_t pool_size) {
  return paired_recall(
      "task1", embed, test, pool_size, [](const StudyRecord& r) { return find_variant(r, corpus::variant::prior_omitted); },
      {}, [](const StudyRecord& r) { return &r.rendered.findings_text; }, instruction::similar);
}

TaskResult task2_summarization(const TextEmbedder& embed, const std::vector<StudyRecord>& test, std::size_t pool_size) {
  return paired_recall(
      "task2", embed, test, pool_size, [](const StudyRecord& r) { return &r.rendered.findings_text; },
      instruction::summarize, [](const StudyRecord& r) { return &r.rendered.impression_text; }, {});
}

TaskResult task4_acronym(const TextEmbedder& embed, const std::vector<StudyRecord>& test, std::size_t pool_size) {
  return paired_recall(
      "task4", embed, test, pool_size, [](const StudyRecord& r) { return find_variant(r, corpus::variant::abbreviated); },
      instruction::similar, [](const StudyRecord& r) { return &r.rendered.findings_text; }, {});
}

TaskResult task3_error_discrimination(const TextEmbedder& embed, const std::vector<StudyRecord>& test,
                                      std::size_t max_items) {
  TaskResult r;
  r.task = "task3";
  std::size_t correct = 0;
  // Studies sharing a findings text would repeat one item; keep the first.
  const auto picked = select_unique(test, max_items, [](const StudyRecord& rec) {
    return std::vector<std::string>{rec.rendered.findings_text};
  });
  const std::size_t duplicates = test.size() - picked.size();
  std::size_t verbatim = 0;
  for (std::size_t i : picked) {
    const auto& rec = test[i];
    if (rec.rendered.errors.size() < 3 || rec.rendered.impression_text.empty()) {
      ++r.excluded;
      continue;
    }
    // A findings text that is its own impression makes the item trivial.
    if (rec.rendered.findings_text == rec.rendered.impression_text) {
      ++verbatim;
      continue;
    }
    const auto anchor = embed(rec.rendered.findings_text, Section::none, instruction::summarize);
    const float truth = dot(anchor, embed(rec.rendered.impression_text, Section::none, {}));
    bool best = true;
    for (const auto& e : rec.rendered.errors) best = best && dot(anchor, embed(e.text, Section::none, {})) < truth;
    correct += best ? 1 : 0;
    ++r.items;
  }
  if (r.excluded > 0) r.notes.push_back(std::to_string(r.excluded) + " items with fewer than 4 candidates excluded");
  if (duplicates > 0) r.notes.push_back(std::to_string(duplicates) + " studies with a repeated findings text skipped");
  if (verbatim > 0) r.notes.push_back(std::to_string(verbatim) + " studies whose findings equal the impression skipped");
  r.pool = 4;
  r.metrics["accuracy"] = r.items == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(r.items);
  r.metrics["random_accuracy"] = 0.25;
  return r;
}

LabelScores label_scores(const std::vector<std::pair<std::vector<Finding>, std::vector<Finding>>>& pairs) {
  std::array<std::size_t, corpus::kKindCount> tp{};
  std::array<std::size_t, corpus::kKindCount> fp{};
  std::array<std::size_t, corpus::kKindCount> fn{};
  std::size_t etp = 0;
  std::size_t efp = 0;
  std::size_t efn = 0;
  for (const auto& [truth_raw, got_raw] : pairs) {
    const auto truth = positive_entities(truth_raw);
    const auto got = positive_entities(got_raw);
    std::array<bool, corpus::kKindCount> tk{};
    std::array<bool, corpus::kKindCount> gk{};
    for (const auto& f : truth) tk[static_cast<std::size_t>(f.kind)] = true;
    for (const auto& f : got) gk[static_cast<std::size_t>(f.kind)] = true;
    for (std::size_t k = 0; k < corpus::kKindCount; ++k) {
      tp[k] += tk[k] && gk[k];
      fp[k] += !tk[k] && gk[k];
      fn[k] += tk[k] && !gk[k];
    }
    std::vector<Finding> common;
    std::set_intersection(truth.begin(), truth.end(), got.begin(), got.end(), std::back_inserter(common));
    etp += common.size();
    efp += got.size() - common.size();
    efn += truth.size() - common.size();
  }
  LabelScores s;
  double total = 0.0;
  std::size_t supported = 0;
  for (std::size_t k = 0; k < corpus::kKindCount; ++k) {
    if (tp[k] + fp[k] + fn[k] == 0) continue;
    total += 2.0 * static_cast<double>(tp[k]) / static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
    ++supported;
  }
  s.macro_f1 = supported == 0 ? 1.0 : total / static_cast<double>(supported);
  s.entity_f1 = etp + efp + efn == 0 ? 1.0
                                     : 2.0 * static_cast<double>(etp) / static_cast<double>(2 * etp + efp + efn);
  return s;
}

TaskResult task5_clinical_similarity(const TextEmbedder& embed, const std::vector<StudyRecord>& queries,
                                     const std::vector<StudyRecord>& pool) {
  if (pool.empty()) throw std::invalid_argument("task5: empty pool");
  TaskResult r;
  r.task = "task5";
  EmbeddingIndex q{"text", 0, {}, {}};
  EmbeddingIndex p{"text", 0, {}, {}};
  std::vector<const StudyRecord*> qrec;
  for (const auto& rec : queries) {
    const auto* verbose = find_variant(rec, corpus::variant::verbose);
    if (verbose == nullptr) {
      ++r.excluded;
      continue;
    }
    q.add(rec.latent.study_id, embed(*verbose, Section::none, instruction::similar));
    qrec.push_back(&rec);
  }
  for (const auto& rec : pool) p.add(rec.latent.study_id, embed(rec.rendered.findings_text, Section::none, {}));
  if (r.excluded > 0) r.notes.push_back(std::to_string(r.excluded) + " queries lack a verbose rendering");
  r.items = q.size();
  r.pool = p.size();
  if (q.size() == 0) {
    r.notes.push_back("skipped: no verbose queries");
    return r;
  }
  const auto top = retrieve_topk(q, p, 1);
  std::vector<std::pair<std::vector<Finding>, std::vector<Finding>>> pairs;
  for (std::size_t i = 0; i < top.size(); ++i) {
    pairs.emplace_back(qrec[i]->latent.findings, corpus::extract_labels(pool[top[i][0]].rendered.findings_text).labels);
  }
  const auto s = label_scores(pairs);
  r.metrics["macro_f1"] = s.macro_f1;
  r.metrics["entity_f1"] = s.entity_f1;
  return r;
}

TaskResult multimodal_eval(const ImageEmbedder& image, const TextEmbedder& report, const std::vector<StudyRecord>& test,
                           const std::vector<StudyRecord>& label_pool, const MultimodalOptions& opt) {
  if (test.empty() || label_pool.empty()) throw std::invalid_argument("multimodal: empty test set or pool");
  TaskResult r;
  r.task = opt.impression_queries_only ? "multimodal_impression" : "multimodal";
  auto section_of = [&](const StudyRecord& rec) {
    return impression_only(rec.latent.study_id, opt.impression_only_fraction) ? Section::impression : Section::findings;
  };
  auto text_of = [&](const StudyRecord& rec) -> const std::string& {
    return section_of(rec) == Section::impression ? rec.rendered.impression_text : rec.rendered.findings_text;
  };
  const auto picked = select_unique(test, opt.pool_size, [&](const StudyRecord& rec) {
    return std::vector<std::string>{visible_signature(rec.latent), text_of(rec)};
  });
  if (picked.size() < opt.pool_size) {
    r.notes.push_back("pool limited to " + std::to_string(picked.size()) + " visibly distinct studies");
  }
  EmbeddingIndex queries{"image", 0, {}, {}};
  EmbeddingIndex pool{"text", 0, {}, {}};
  std::vector<std::size_t> truth;
  std::vector<const StudyRecord*> qrec;
  for (std::size_t i : picked) {
    const auto& rec = test[i];
    const std::size_t row = pool.size();
    pool.add(rec.latent.study_id, report(text_of(rec), section_of(rec), {}));
    if (opt.impression_queries_only && section_of(rec) != Section::impression) continue;
    queries.add(rec.latent.study_id, image(rec.rendered.image));
    truth.push_back(row);
    qrec.push_back(&rec);
  }
  if (queries.size() == 0) {
    r.notes.push_back("skipped: no queries");
    return r;
  }
  add_recall(r, recall_at_k(queries, pool, truth));

  EmbeddingIndex reports{"text", 0, {}, {}};
  for (const auto& rec : label_pool) reports.add(rec.latent.study_id, report(rec.rendered.findings_text, Section::findings, {}));
  const auto top = retrieve_topk(queries, reports, 1);
  Rng rng(derive_seed(opt.seed, 0xba5e));
  std::vector<std::pair<std::vector<Finding>, std::vector<Finding>>> model_pairs;
  std::vector<std::pair<std::vector<Finding>, std::vector<Finding>>> random_pairs;
  for (std::size_t i = 0; i < top.size(); ++i) {
    model_pairs.emplace_back(qrec[i]->latent.findings,
                             corpus::extract_labels(label_pool[top[i][0]].rendered.findings_text).labels);
    random_pairs.emplace_back(
        qrec[i]->latent.findings,
        corpus::extract_labels(label_pool[rng.below(label_pool.size())].rendered.findings_text).labels);
  }
  const auto m = label_scores(model_pairs);
  const auto b = label_scores(random_pairs);
  r.metrics["macro_f1"] = m.macro_f1;
  r.metrics["entity_f1"] = m.entity_f1;
  r.metrics["random_macro_f1"] = b.macro_f1;
  r.metrics["random_entity_f1"] = b.entity_f1;
  r.notes.push_back("recall pool: " + std::to_string(pool.size()) + " held-out reports; label pool: " +
                    std::to_string(reports.size()) + " train+validation findings");
  return r;
}

int judge_score(const std::vector<Finding>& truth_raw, const std::vector<Finding>& candidate_raw, const JudgeWeights& w) {
  const auto truth = positive_entities(truth_raw);
  auto remaining = positive_entities(candidate_raw);
  std::vector<bool> matched(truth.size(), false);
  int score = 0;
  // Exact (kind, location) matches first; severity may still differ.
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto it = std::find_if(remaining.begin(), remaining.end(), [&](const Finding& c) {
      return c.kind == truth[i].kind && c.location == truth[i].location;
    });
    if (it == remaining.end()) continue;
    if (it->severity != truth[i].severity) score += w.severity;
    matched[i] = true;
    remaining.erase(it);
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (matched[i]) continue;
    const auto it = std::find_if(remaining.begin(), remaining.end(),
                                 [&](const Finding& c) { return c.kind == truth[i].kind; });
    if (it == remaining.end()) {
      score += w.omission;
      continue;
    }
    score += w.location;
    remaining.erase(it);
  }
  score += w.false_prediction * static_cast<int>(remaining.size());
  return score;
}

JudgeResult oracle_judge_rank(const std::vector<Finding>& truth, const std::vector<std::string>& candidates,
                              const JudgeWeights& w) {
  JudgeResult r;
  const std::size_t n = candidates.size();
  for (const auto& c : candidates) {
    const auto parse = corpus::extract_labels(c);
    r.flagged.push_back(!parse.complete());
    r.scores.push_back(parse.complete() ? judge_score(truth, parse.labels, w) : -1);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (r.flagged[i]) {
      r.ranks.push_back(static_cast<int>(n));
      continue;
    }
    int better = 0;
    for (std::size_t j = 0; j < n; ++j) better += !r.flagged[j] && r.scores[j] < r.scores[i];
    r.ranks.push_back(1 + better);
  }
  return r;
}

TaskResult judge_eval(const TextEmbedder& embed, const std::vector<StudyRecord>& test,
                      const std::vector<StudyRecord>& pool, std::size_t max_items, std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("judge: empty pool");
  TaskResult r;
  r.task = "judge";
  const auto pool_pick = select_unique(pool, pool.size(), [](const StudyRecord& rec) {
    return std::vector<std::string>{rec.rendered.impression_text};
  });
  EmbeddingIndex impressions{"text", 0, {}, {}};
  for (std::size_t i : pool_pick) {
    impressions.add(pool[i].latent.study_id, embed(pool[i].rendered.impression_text, Section::none, {}));
  }
  Rng rng(derive_seed(seed, 0x1d6e));
  std::vector<double> model_rank;
  std::vector<double> random_rank;
  std::vector<double> truth_rank;
  std::vector<double> error_rank;
  std::size_t flagged = 0;
  for (const auto& rec : test) {
    if (r.items >= max_items) break;
    if (rec.rendered.errors.size() < 3) {
      ++r.excluded;
      continue;
    }
    EmbeddingIndex q{"text", 0, {}, {}};
    q.add(rec.latent.study_id, embed(rec.rendered.findings_text, Section::none, instruction::summarize));
    const std::size_t retrieved = pool_pick[retrieve_topk(q, impressions, 1)[0][0]];
    const std::size_t random = pool_pick[rng.below(pool_pick.size())];
    std::vector<std::string> cands{rec.rendered.impression_text};
    for (const auto& e : rec.rendered.errors) cands.push_back(e.text);
    cands.push_back(pool[retrieved].rendered.impression_text);
    cands.push_back(pool[random].rendered.impression_text);
    const auto truth = corpus::extract_labels(rec.rendered.impression_text).labels;
    const auto res = oracle_judge_rank(truth, cands);
    flagged += static_cast<std::size_t>(std::count(res.flagged.begin(), res.flagged.end(), true));
    truth_rank.push_back(res.ranks[0]);
    for (std::size_t i = 1; i <= 3; ++i) error_rank.push_back(res.ranks[i]);
    model_rank.push_back(res.ranks[4]);
    random_rank.push_back(res.ranks[5]);
    ++r.items;
  }
  r.pool = impressions.size();
  r.metrics["mean_rank"] = mean(model_rank);
  r.metrics["random_mean_rank"] = mean(random_rank);
  r.metrics["truth_mean_rank"] = mean(truth_rank);
  r.metrics["error_mean_rank"] = mean(error_rank);
  if (flagged > 0) r.notes.push_back(std::to_string(flagged) + " unparseable candidates ranked last");
  return r;
}

}  // namespace cxal::eval
