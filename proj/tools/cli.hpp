/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "distildoc/distildoc.hpp"

namespace distildoc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

inline constexpr double kGradcheckTolerance = 1e-4;

// The fixed toy task behind `distill`.
struct ToyTask {
  std::size_t classes = 3;
  std::size_t n_per_class = 300;
  double spread = 0.15;
  std::size_t teacher_width = 64;
  std::size_t student_width = 8;
};

inline std::shared_ptr<spdlog::logger> logger() {
  auto log = spdlog::get("distildoc");
  if (!log) {
    log = spdlog::stderr_color_mt("distildoc");
    log->set_pattern("[%l] %v");
    const char* env = std::getenv("DISTILDOC_LOG");
    const std::string level = env ? env : "warn";
    if (level == "error" || level == "warn" || level == "info" || level == "debug") {
      log->set_level(spdlog::level::from_str(level));
    } else {
      log->set_level(spdlog::level::warn);
      log->warn("ignoring DISTILDOC_LOG={} (expected error, warn, info or debug)", level);
    }
  }
  return log;
}

/// Written next to every output as <out>.manifest.json.
struct RunManifest {
  explicit RunManifest(std::string name) : subcommand(std::move(name)) {}

  std::string subcommand;
  json config = json::object();
  std::optional<std::uint64_t> seed;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void write(const fs::path& out) const {
    json j{{"version", kSchemaVersion}, {"tool", "distildoc"}, {"tool_version", kVersion},
           {"subcommand", subcommand},  {"config", config},    {"inputs", inputs},
           {"outputs", outputs},        {"rng", Rng::kName}};
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_text_file(out.string() + ".manifest.json", j.dump(1) + "\n");
  }
};

inline void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(1) + "\n"); }

// ---------------------------------------------------------------------------
// distill

struct DistillOptions {
  std::string method = "vanilla";
  std::optional<double> alpha, tau, gamma;
  std::string projector = "linear-cls";
  std::uint64_t seed = 0;
  int epochs = 60;
  std::string out;
};

inline KDHyperparams resolve_hyperparams(const DistillOptions& o, TrainMethod method) {
  KDHyperparams hp = method == TrainMethod::nkd ? KDHyperparams::nkd_defaults() : KDHyperparams::vanilla_defaults();
  if (o.alpha) hp.alpha = *o.alpha;
  if (o.tau) hp.tau = *o.tau;
  if (o.gamma) hp.gamma = *o.gamma;
  return hp;
}

inline int run_distill(const DistillOptions& o, std::ostream& out) {
  RunManifest manifest{"distill"};
  const ToyTask task;
  const auto method = train_method_from_string(o.method);
  TrainConfig cfg;
  cfg.method = method;
  cfg.hyperparams = resolve_hyperparams(o, method);
  cfg.projector_kind = projector_kind_from_string(o.projector);
  cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.validate();

  manifest.seed = o.seed;
  manifest.config = {{"method", o.method},
                     {"alpha", cfg.hyperparams.alpha},
                     {"tau", cfg.hyperparams.tau},
                     {"gamma", cfg.hyperparams.gamma},
                     {"projector", o.projector},
                     {"epochs", cfg.epochs},
                     {"learning_rate", cfg.learning_rate},
                     {"batch_size", cfg.batch_size},
                     {"task",
                      {{"classes", task.classes},
                       {"n_per_class", task.n_per_class},
                       {"spread", task.spread},
                       {"teacher_width", task.teacher_width},
                       {"student_width", task.student_width}}}};

  auto log = logger();
  const auto train_set = gen_gaussian_blobs(task.classes, task.n_per_class, task.spread, derive_seed(o.seed, "data/train"));
  const auto test_set = gen_gaussian_blobs(task.classes, task.n_per_class, task.spread, derive_seed(o.seed, "data/test"));

  TrainConfig teacher_cfg = cfg;
  teacher_cfg.method = TrainMethod::ce;
  teacher_cfg.seed = derive_seed(o.seed, "teacher");
  const auto teacher_init = Mlp::create({2, task.teacher_width, task.teacher_width, task.classes}, teacher_cfg.seed);
  log->info("training teacher ({} epochs)", cfg.epochs);
  const auto teacher = train(teacher_init, train_set, teacher_cfg);

  const auto student_init = Mlp::create({2, task.student_width, task.student_width, task.classes},
                                        derive_seed(o.seed, "student"));
  TrainConfig ce_cfg = cfg;
  ce_cfg.method = TrainMethod::ce;
  log->info("training CE-only student");
  const auto ce_student = train(student_init, train_set, ce_cfg);
  log->info("training {} student", o.method);
  const auto kd_student = train(student_init, train_set, cfg, &teacher.model);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  auto emit = [&](const std::string& name, const json& j) {
    write_json(dir / name, j);
    manifest.outputs.push_back((dir / name).string());
  };
  emit("teacher.weights.json", to_json(teacher.model.to_document()));
  emit("student_ce.weights.json", to_json(ce_student.model.to_document()));
  emit("student_kd.weights.json", to_json(kd_student.model.to_document()));
  if (kd_student.projector) emit("projector.weights.json", to_json(kd_student.projector->to_document()));
  emit("loss_trace.json", {{"version", kSchemaVersion},
                           {"method", o.method},
                           {"teacher", teacher.loss_trace},
                           {"student_ce", ce_student.loss_trace},
                           {"student_kd", kd_student.loss_trace}});

  const Inference kd_inference =
      method == TrainMethod::simkd ? Inference(SimkdReuse{*kd_student.projector, teacher.model.head()}) : OwnHead{};
  const auto teacher_records = evaluate(teacher.model, test_set);
  const auto ce_records = evaluate(ce_student.model, test_set);
  const auto kd_records = evaluate(kd_student.model, test_set, kd_inference);
  const json metrics{{"version", kSchemaVersion},
                     {"split", "held_out"},
                     {"teacher", to_json(MetricsReport::compute(teacher_records))},
                     {"student_ce", to_json(MetricsReport::compute(ce_records))},
                     {"student_kd", to_json(MetricsReport::compute(kd_records))},
                     {"teacher_agreement",
                      {{"student_ce", argmax_agreement(ce_records, teacher_records)},
                       {"student_kd", argmax_agreement(kd_records, teacher_records)}}}};
  emit("metrics.json", metrics);
  manifest.write(dir);
  out << metrics.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

inline int run_gradcheck(const std::string& loss, int trials, double eps, std::uint64_t seed, std::ostream& out) {
  std::vector<LossKind> kinds;
  if (loss == "all") {
    kinds.assign(kAllLosses.begin(), kAllLosses.end());
  } else {
    kinds.push_back(loss_kind_from_string(loss));
  }
  bool ok = true;
  for (auto kind : kinds) {
    const auto r = gradcheck_loss(kind, trials, eps, seed);
    const bool pass = r.max_relative_error < kGradcheckTolerance;
    ok = ok && pass;
    out << to_string(kind) << " trials=" << r.trials << " coordinates=" << r.coordinates
        << " max_relative_error=" << r.max_relative_error << (pass ? " ok" : " FAIL") << "\n";
  }
  return ok ? kOk : kFailure;
}

// ---------------------------------------------------------------------------
// enrich / serialize / prompt

struct EnrichOptions {
  std::string ocr, dla, out;
  double iou_threshold = 0.3;
  std::vector<std::string> ignore_labels{"Text"};
  double score_threshold = kDefaultScoreThreshold;
  std::string corner_norm = "l1";
};

inline int run_enrich(const EnrichOptions& o) {
  RunManifest manifest{"enrich"};
  EnrichmentConfig cfg;
  cfg.iou_threshold = o.iou_threshold;
  cfg.ignore_labels.clear();
  for (const auto& label : o.ignore_labels)
    if (!label.empty()) cfg.ignore_labels.insert(label);
  cfg.corner_norm = corner_norm_from_string(o.corner_norm);
  cfg.validate();
  manifest.config = {{"iou_threshold", cfg.iou_threshold},
                     {"ignore_labels", cfg.ignore_labels},
                     {"score_threshold", o.score_threshold},
                     {"corner_norm", to_string(cfg.corner_norm)}};
  manifest.inputs = {o.ocr, o.dla};

  auto log = logger();
  const auto ocr = load_ocr_document(o.ocr);
  if (ocr.clamped) log->warn("{}: clamped {} token boxes to the image bounds", o.ocr, ocr.clamped);
  const auto dla = load_dla_predictions(o.dla, o.score_threshold);
  log->info("{}: dropped {} detections below score {}", o.dla, dla.dropped, o.score_threshold);

  std::vector<LayoutRegion> regions;
  std::optional<std::int64_t> image_id = ocr.image_id;
  if (!image_id && dla.regions.size() > 1)
    throw ParseError("detections cover several images; set image_id in the OCR file", o.dla);
  if (!image_id && dla.regions.size() == 1) image_id = dla.regions.begin()->first;
  if (image_id) {
    if (const auto it = dla.regions.find(*image_id); it != dla.regions.end()) regions = it->second;
  }
  ImageDims detection_dims = ocr.doc.dims();
  if (image_id) {
    if (const auto it = dla.image_dims.find(*image_id); it != dla.image_dims.end()) detection_dims = it->second;
  }

  const auto enriched = enrich(ocr.doc, regions, detection_dims, cfg);
  log->info("inserted {} tag pairs from {} regions", enriched.tag_spans.size(), regions.size());
  write_enriched_tokens(o.out, enriched);
  const auto sidecar = o.out + ".prompt.txt";
  write_text_file(sidecar, render_prompt(serialize_plain(enriched.tokens), ""));
  manifest.outputs = {o.out, sidecar};
  manifest.write(o.out);
  return kOk;
}

inline int run_serialize(const std::string& ocr_path, const std::string& mode, const std::string& enriched_path,
                         const std::string& out) {
  RunManifest manifest{"serialize"};
  manifest.config = {{"mode", mode}};
  manifest.inputs = {ocr_path};
  const auto ocr = load_ocr_document(ocr_path);
  std::vector<std::string> tokens = ocr.doc.tokens;
  std::vector<BBox> boxes = ocr.doc.boxes;
  if (!enriched_path.empty()) {
    const auto enriched = load_enriched_tokens(enriched_path);
    if (!(strip_tags(enriched) == ocr.doc))
      throw ParseError("enriched tokens do not belong to this OCR document", enriched_path);
    tokens = enriched.tokens;
    boxes = space_anchor_boxes(enriched);
    manifest.inputs.push_back(enriched_path);
  }
  std::string text;
  if (mode == "plain") {
    text = serialize_plain(tokens);
  } else {
    const auto layout = serialize_space(tokens, boxes, ocr.doc.dims());
    if (layout.truncated) logger()->warn("truncated {} tokens wider than a grid row", layout.truncated);
    text = layout.text;
  }
  write_text_file(out, text);
  manifest.outputs = {out};
  manifest.write(out);
  return kOk;
}

inline int run_prompt(const std::string& doc_text, const std::string& question, const std::string& out) {
  RunManifest manifest{"prompt"};
  manifest.config = {{"question", question}};
  manifest.inputs = {doc_text};
  write_text_file(out, render_prompt(read_text_file(doc_text), question));
  manifest.outputs = {out};
  manifest.write(out);
  return kOk;
}

// ---------------------------------------------------------------------------
// metrics / anls

inline int run_metrics(const std::string& records_path, int bins, std::ostream& out) {
  const auto records = load_prediction_records(records_path);
  out << to_json(MetricsReport::compute(records, bins)).dump(2) << "\n";
  return kOk;
}

inline int run_anls(const std::string& pred, const std::string& gold, double threshold, std::ostream& out) {
  const auto inputs = load_anls_inputs(pred, gold);
  json items = json::array();
  for (std::size_t i = 0; i < inputs.items.size(); ++i)
    items.push_back({{"question_id", inputs.question_ids[i]},
                     {"score", anls_single(inputs.items[i].prediction, inputs.items[i].golds, threshold)}});
  const json report{{"n", inputs.items.size()},
                    {"threshold", threshold},
                    {"anls", anls_dataset(inputs.items, threshold)},
                    {"items", std::move(items)}};
  out << report.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

/// Parses argv, runs one subcommand and returns 0 (success), 1 (validation
/// or contract failure) or 2 (usage error).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Knowledge distillation and layout-enriched prompting toolkit", "distildoc"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  DistillOptions distill;
  auto* distill_cmd = app.add_subcommand("distill", "Train a toy teacher and distill it into a student");
  distill_cmd->add_option("--method", distill.method, "Student objective")
      ->check(CLI::IsMember({"ce", "vanilla", "nkd", "mse", "fitnet", "simkd"}))
      ->capture_default_str();
  distill_cmd->add_option("--alpha", distill.alpha, "Weight of the supervised term (default 0.5)");
  distill_cmd->add_option("--tau", distill.tau, "Softmax temperature (default 2.5, or 1 for nkd)");
  distill_cmd->add_option("--gamma", distill.gamma, "NKD non-target weight (default 1.5)");
  distill_cmd->add_option("--projector", distill.projector, "Feature projector for fitnet and simkd")
      ->check(CLI::IsMember({"identity", "linear-cls", "conv-reshape"}))
      ->capture_default_str();
  distill_cmd->add_option("--seed", distill.seed, "Seed for every random stream")->capture_default_str();
  distill_cmd->add_option("--epochs", distill.epochs, "Training epochs")->capture_default_str();
  distill_cmd->add_option("--out", distill.out, "Output directory")->required();

  std::string gc_loss = "all";
  int gc_trials = 50;
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 0;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Compare loss gradients with finite differences");
  gradcheck_cmd->add_option("--loss", gc_loss, "vanilla, mse, nkd, fitnet, simkd or all")
      ->check(CLI::IsMember({"all", "vanilla", "mse", "nkd", "fitnet", "simkd"}))
      ->capture_default_str();
  gradcheck_cmd->add_option("--trials", gc_trials, "Random instances per loss")->capture_default_str();
  gradcheck_cmd->add_option("--eps", gc_eps, "Central difference step")->capture_default_str();
  gradcheck_cmd->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();

  EnrichOptions enrich_opts;
  auto* enrich_cmd = app.add_subcommand("enrich", "Insert layout tags into OCR tokens");
  enrich_cmd->add_option("--ocr", enrich_opts.ocr, "OCR document JSON")->required()->check(CLI::ExistingFile);
  enrich_cmd->add_option("--dla", enrich_opts.dla, "Layout detections JSON")->required()->check(CLI::ExistingFile);
  enrich_cmd->add_option("--iou-threshold", enrich_opts.iou_threshold, "Token/region IoU threshold")
      ->capture_default_str();
  enrich_cmd->add_option("--ignore-labels", enrich_opts.ignore_labels, "Region classes to skip (comma separated)")
      ->delimiter(',')
      ->capture_default_str();
  enrich_cmd->add_option("--score-threshold", enrich_opts.score_threshold, "Minimum detection score")
      ->capture_default_str();
  enrich_cmd->add_option("--corner-norm", enrich_opts.corner_norm, "Corner distance norm")
      ->check(CLI::IsMember({"l1", "l2"}))
      ->capture_default_str();
  enrich_cmd->add_option("--out", enrich_opts.out, "Enriched tokens JSON")->required();

  std::string ser_ocr, ser_mode = "plain", ser_enriched, ser_out;
  auto* serialize_cmd = app.add_subcommand("serialize", "Render OCR tokens as document text");
  serialize_cmd->add_option("--ocr", ser_ocr, "OCR document JSON")->required()->check(CLI::ExistingFile);
  serialize_cmd->add_option("--mode", ser_mode, "plain or space")
      ->check(CLI::IsMember({"plain", "space"}))
      ->capture_default_str();
  serialize_cmd->add_option("--enriched", ser_enriched, "Enriched tokens JSON to serialize instead")
      ->check(CLI::ExistingFile);
  serialize_cmd->add_option("--out", ser_out, "Output text file")->required();

  std::string prompt_doc, prompt_question, prompt_out;
  auto* prompt_cmd = app.add_subcommand("prompt", "Render the extractive QA prompt");
  prompt_cmd->add_option("--doc-text", prompt_doc, "Document text file")->required()->check(CLI::ExistingFile);
  prompt_cmd->add_option("--question", prompt_question, "Question")->required();
  prompt_cmd->add_option("--out", prompt_out, "Output prompt file")->required();

  std::string records_path;
  int bins = 10;
  auto* metrics_cmd = app.add_subcommand("metrics", "Accuracy, ECE and AURC of prediction records");
  metrics_cmd->add_option("--records", records_path, "Prediction records JSON")->required()->check(CLI::ExistingFile);
  metrics_cmd->add_option("--bins", bins, "ECE bins")->capture_default_str();

  std::string anls_pred, anls_gold;
  double anls_threshold = kDefaultAnlsThreshold;
  auto* anls_cmd = app.add_subcommand("anls", "Average normalized Levenshtein similarity");
  anls_cmd->add_option("--pred", anls_pred, "Predictions JSON")->required()->check(CLI::ExistingFile);
  anls_cmd->add_option("--gold", anls_gold, "Gold answers JSON")->required()->check(CLI::ExistingFile);
  anls_cmd->add_option("--threshold", anls_threshold, "Similarity cut-off")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (distill_cmd->parsed()) return run_distill(distill, out);
    if (gradcheck_cmd->parsed()) return run_gradcheck(gc_loss, gc_trials, gc_eps, gc_seed, out);
    if (enrich_cmd->parsed()) return run_enrich(enrich_opts);
    if (serialize_cmd->parsed()) return run_serialize(ser_ocr, ser_mode, ser_enriched, ser_out);
    if (prompt_cmd->parsed()) return run_prompt(prompt_doc, prompt_question, prompt_out);
    if (metrics_cmd->parsed()) return run_metrics(records_path, bins, out);
    if (anls_cmd->parsed()) return run_anls(anls_pred, anls_gold, anls_threshold, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace distildoc::cli
