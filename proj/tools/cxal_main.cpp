// cxal: corpus generation, three-stage training, embedding and evaluation.

#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cxal/corpus.hpp"
#include "cxal/digest.hpp"
#include "cxal/eval.hpp"
#include "cxal/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using cxal::file_digest;
using cxal::hex64;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::optional<std::uint64_t> config_digest;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  json extra = json::object();

  void input(const fs::path& p) { inputs[p.string()] = hex64(file_digest(p)); }
  void output(const fs::path& p) { outputs[p.string()] = hex64(file_digest(p)); }

  void write(const fs::path& dir) const {
    json j{{"command", command},
           {"argv", argv},
           {"version", kVersion},
           {"inputs", inputs},
           {"outputs", outputs},
           {"extra", extra}};
    if (config_digest) j["config_digest"] = hex64(*config_digest);
    if (seed) j["seed"] = *seed;
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << '\n';
  }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void apply_thread_cap() {
  if (const char* env = std::getenv("CXAL_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

int run_gen_corpus(std::uint64_t seed, std::size_t n, std::size_t offset, double noise, const fs::path& out,
                   Manifest& m) {
  cxal::corpus::CorpusConfig cfg;
  cfg.seed = seed;
  cfg.count = n;
  cfg.first_index = offset;
  cfg.noise_sigma = noise;
  const auto studies = cxal::corpus::generate_corpus(cfg);
  const fs::path path = out / "corpus.jsonl";
  cxal::corpus::write_corpus(path, studies);
  m.seed = seed;
  m.output(path);
  m.extra = {{"count", n}, {"offset", offset}, {"noise_sigma", noise}};
  std::cout << "wrote " << studies.size() << " studies to " << path.string() << '\n';
  return 0;
}

int run_train(const std::string& stage_name, const fs::path& config_path, std::optional<std::uint64_t> seed,
              const fs::path& corpus_path, const std::string& init_path, const std::string& resume_path,
              std::optional<std::uint64_t> stop_after, const fs::path& out, Manifest& m) {
  const auto stage = cxal::parse_stage(stage_name);
  auto cfg = cxal::load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  m.input(config_path);
  m.input(corpus_path);
  m.seed = cfg.seed;
  m.config_digest = cxal::config_digest(cfg);
  const auto corpus = cxal::corpus::read_corpus(corpus_path);

  std::ofstream log(out / (stage_name + ".log.jsonl"));
  cxal::TrainControl control;
  control.log = [&](const cxal::LogEntry& e) {
    const auto line = cxal::to_json_line(e);
    log << line << '\n';
    log.flush();
    std::cerr << line << '\n';
  };
  control.divergence_path = out / (stage_name + ".diverged.ckpt");
  control.stop_after = stop_after;
  std::optional<cxal::Checkpoint> resume;
  if (!resume_path.empty()) {
    resume = cxal::load_checkpoint(resume_path);
    m.input(resume_path);
    control.resume = &*resume;
  }
  std::optional<cxal::Checkpoint> init;
  if (!init_path.empty()) {
    init = cxal::load_checkpoint(init_path);
    m.input(init_path);
  }

  const auto t0 = std::chrono::steady_clock::now();
  cxal::Checkpoint ckpt;
  switch (stage) {
    case cxal::Stage::mntp:
      ckpt = cxal::train_mntp(cfg, corpus, control);
      break;
    case cxal::Stage::contrastive:
      ckpt = cxal::train_contrastive(init ? &*init : nullptr, corpus, cfg, control);
      break;
    case cxal::Stage::clip:
      if (!init) throw std::invalid_argument("train clip requires --init with a text checkpoint");
      ckpt = cxal::train_clip(*init, corpus, cfg, control);
      break;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path path = out / (stage_name + ".ckpt");
  cxal::save_checkpoint(path, ckpt);
  log.close();
  m.output(path);
  m.output(out / (stage_name + ".log.jsonl"));
  m.extra = {{"stage", stage_name}, {"steps", ckpt.step}, {"seconds", secs}};
  std::cout << "wrote " << path.string() << " (" << ckpt.step << " steps, " << secs << " s)\n";
  return 0;
}

int run_embed(const fs::path& ckpt_path, const fs::path& corpus_path, const std::string& side, bool section_tag,
              const fs::path& out, Manifest& m) {
  const auto ckpt = cxal::load_checkpoint(ckpt_path);
  m.input(ckpt_path);
  m.input(corpus_path);
  m.config_digest = ckpt.config_digest;
  const auto corpus = cxal::corpus::read_corpus(corpus_path);
  const bool image_side = cxal::eval::parse_side(side) == cxal::eval::Side::image;
  const cxal::Encoder enc(ckpt, ckpt.stage == cxal::Stage::clip || image_side);
  const auto index = cxal::eval::embed_corpus(enc, corpus, cxal::eval::parse_side(side), section_tag);
  json rows = json::array();
  for (std::size_t i = 0; i < index.size(); ++i) {
    rows.push_back({{"id", index.ids[i]}, {"vector", std::vector<float>(index.row(i).begin(), index.row(i).end())}});
  }
  const fs::path path = out / ("embeddings." + side + ".json");
  write_text(path, json{{"modality", index.modality}, {"dim", index.dim}, {"rows", rows}}.dump() + "\n");
  m.output(path);
  std::cout << "wrote " << index.size() << " embeddings to " << path.string() << '\n';
  return 0;
}

int run_eval(const std::string& task, const fs::path& ckpt_path, const fs::path& test_path, const std::string& pool_path,
             std::size_t pool_size, const std::vector<std::string>& mins, const std::string& label, const fs::path& out,
             Manifest& m) {
  static const std::vector<std::string> kTasks{"task1", "task2", "task3", "task4", "task5", "multimodal", "judge"};
  std::vector<std::string> tasks;
  if (task == "all") {
    tasks = kTasks;
  } else if (std::find(kTasks.begin(), kTasks.end(), task) != kTasks.end()) {
    tasks = {task};
  } else {
    throw CLI::ValidationError("eval", "unknown task '" + task + "'");
  }
  std::map<std::string, double> minimums;
  for (const auto& kv : mins) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--min", "expected task.metric=value, got '" + kv + "'");
    minimums[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
  }

  const auto ckpt = cxal::load_checkpoint(ckpt_path);
  m.input(ckpt_path);
  m.input(test_path);
  m.config_digest = ckpt.config_digest;
  const auto cfg = ckpt.config();
  const auto test = cxal::corpus::read_corpus(test_path);
  std::vector<cxal::corpus::StudyRecord> pool;
  if (!pool_path.empty()) {
    pool = cxal::corpus::read_corpus(pool_path);
    m.input(pool_path);
  }
  const bool multimodal = ckpt.stage == cxal::Stage::clip;
  const cxal::Encoder text_enc(ckpt, false);
  std::optional<cxal::Encoder> dual;
  if (multimodal) dual.emplace(ckpt, true);
  const auto embed = cxal::eval::text_embedder(text_enc);

  cxal::eval::EvalReport report;
  report.label = label.empty() ? ckpt_path.stem().string() : label;
  report.config_digest = hex64(ckpt.config_digest);
  auto need_pool = [&](const std::string& t) {
    if (pool.empty()) throw std::invalid_argument(t + " requires --pool (training corpus)");
  };
  for (const auto& t : tasks) {
    if (t == "task1") report.tasks.push_back(cxal::eval::task1_prior_omitted(embed, test, pool_size));
    if (t == "task2") report.tasks.push_back(cxal::eval::task2_summarization(embed, test, pool_size));
    if (t == "task3") report.tasks.push_back(cxal::eval::task3_error_discrimination(embed, test));
    if (t == "task4") report.tasks.push_back(cxal::eval::task4_acronym(embed, test, pool_size));
    if (t == "task5") {
      need_pool(t);
      report.tasks.push_back(cxal::eval::task5_clinical_similarity(embed, test, pool));
    }
    if (t == "judge") {
      need_pool(t);
      report.tasks.push_back(cxal::eval::judge_eval(embed, test, pool, pool_size, cfg.seed));
    }
    if (t == "multimodal") {
      if (!multimodal) {
        if (task == "all") continue;
        throw std::invalid_argument("multimodal evaluation needs a stage-3 checkpoint");
      }
      need_pool(t);
      cxal::eval::MultimodalOptions opt;
      opt.pool_size = pool_size;
      opt.impression_only_fraction = cfg.impression_only_fraction;
      opt.seed = cfg.seed;
      const auto img = cxal::eval::image_embedder(*dual);
      const auto rep = cxal::eval::report_embedder(*dual);
      report.tasks.push_back(cxal::eval::multimodal_eval(img, rep, test, pool, opt));
      if (cfg.impression_only_fraction > 0.0) {
        opt.impression_queries_only = true;
        report.tasks.push_back(cxal::eval::multimodal_eval(img, rep, test, pool, opt));
      }
    }
  }
  cxal::eval::apply_thresholds(report, minimums);
  const fs::path path = out / "eval_report.json";
  write_text(path, cxal::eval::to_json(report) + "\n");
  m.output(path);
  std::cout << cxal::eval::render_table({report});
  for (const auto& [name, ok] : report.flags) std::cout << (ok ? "PASS " : "FAIL ") << name << '\n';
  return report.passed() ? 0 : 1;
}

int run_report(const std::vector<std::string>& inputs, const fs::path& out, Manifest& m) {
  std::vector<cxal::eval::EvalReport> reports;
  for (const auto& p : inputs) {
    reports.push_back(cxal::eval::parse_eval_report(read_text(p)));
    m.input(p);
  }
  const auto table = cxal::eval::render_table(reports);
  const fs::path path = out / "report.txt";
  write_text(path, table);
  m.output(path);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cxal: chest X-ray report alignment toolkit"};
  app.require_subcommand(1);
  fs::path out = ".";
  std::optional<std::uint64_t> seed;
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--seed", seed, "Random seed (overrides the config seed)");

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic paired corpus");
  std::size_t n = 2000;
  std::size_t offset = 0;
  double noise = 0.05;
  gen->add_option("--n", n, "Number of studies")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--offset", offset, "Index of the first study (disjoint held-out sets)")->capture_default_str();
  gen->add_option("--noise", noise, "Image noise sigma")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", seed, "Random seed");
  gen->add_option("--out", out, "Output directory");

  auto* train = app.add_subcommand("train", "Train one stage");
  std::string stage;
  fs::path config_path;
  fs::path corpus_path;
  std::string init_path;
  std::string resume_path;
  std::optional<std::uint64_t> stop_after;
  train->add_option("stage", stage, "mntp | contrastive | clip")
      ->required()
      ->check(CLI::IsMember({"mntp", "contrastive", "clip"}));
  train->add_option("--config", config_path, "RunConfig JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--corpus", corpus_path, "Training corpus (JSONL)")->required()->check(CLI::ExistingFile);
  train->add_option("--init", init_path, "Checkpoint of the previous stage")->check(CLI::ExistingFile);
  train->add_option("--resume", resume_path, "Partially trained checkpoint of this stage")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "Stop after this many optimizer steps");
  train->add_option("--seed", seed, "Random seed (overrides the config seed)");
  train->add_option("--out", out, "Output directory");

  auto* embed = app.add_subcommand("embed", "Embed a corpus side with a checkpoint");
  fs::path ckpt_path;
  std::string side = "findings";
  bool section_tag = false;
  embed->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  embed->add_option("--corpus", corpus_path, "Corpus (JSONL)")->required()->check(CLI::ExistingFile);
  embed->add_option("--side", side, "findings | impression | image")
      ->capture_default_str()
      ->check(CLI::IsMember({"findings", "impression", "image"}));
  embed->add_flag("--section-tag", section_tag, "Prepend the section token");
  embed->add_option("--out", out, "Output directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a held-out corpus");
  std::string task;
  fs::path test_path;
  std::string pool_path;
  std::size_t pool_size = 200;
  std::vector<std::string> mins;
  std::string label;
  ev->add_option("task", task, "task1..task5 | multimodal | judge | all")->required();
  ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--test", test_path, "Held-out corpus (JSONL)")->required()->check(CLI::ExistingFile);
  ev->add_option("--pool", pool_path, "Training corpus used as the retrieval pool for label metrics")
      ->check(CLI::ExistingFile);
  ev->add_option("--pool-size", pool_size, "Held-out pool size")->capture_default_str()->check(CLI::PositiveNumber);
  ev->add_option("--min", mins, "Acceptance threshold task.metric=value (repeatable)");
  ev->add_option("--label", label, "Run label in the report");
  ev->add_option("--out", out, "Output directory");

  auto* rep = app.add_subcommand("report", "Render evaluation reports as one comparison table");
  std::vector<std::string> inputs;
  rep->add_option("reports", inputs, "eval_report.json files")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << '\n' << app.help();
    return 2;
  }

  apply_thread_cap();
  Manifest m;
  m.argv.assign(argv, argv + argc);
  int code = 0;
  try {
    fs::create_directories(out);
    if (*gen) {
      m.command = "gen-corpus";
      code = run_gen_corpus(seed.value_or(4096), n, offset, noise, out, m);
    } else if (*train) {
      m.command = "train";
      code = run_train(stage, config_path, seed, corpus_path, init_path, resume_path, stop_after, out, m);
    } else if (*embed) {
      m.command = "embed";
      code = run_embed(ckpt_path, corpus_path, side, section_tag, out, m);
    } else if (*ev) {
      m.command = "eval";
      code = run_eval(task, ckpt_path, test_path, pool_path, pool_size, mins, label, out, m);
    } else if (*rep) {
      m.command = "report";
      code = run_report(inputs, out, m);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    m.extra["error"] = e.what();
    code = 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    m.extra["error"] = e.what();
    code = 1;
  }
  m.extra["exit_code"] = code;
  try {
    m.write(out);
  } catch (const std::exception& e) {
    std::cerr << "error: cannot write manifest: " << e.what() << '\n';
  }
  return code;
}
