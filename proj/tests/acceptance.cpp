/*
 * SPDX-License-Identifier: Apache-2.0
 */

// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "distildoc/distildoc.hpp"
#include "oracles.hpp"

namespace distildoc::acceptance {
namespace {

namespace fs = std::filesystem;

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 10.0;
constexpr double kIdentityTolerance = 1e-10;
constexpr double kAgreementFloor = 0.90;
constexpr double kSimkdAccuracySlack = 0.01;
constexpr double kToyBudgetSeconds = 60.0;
constexpr double kMetricTolerance = 1e-12;
constexpr double kIouTolerance = 1e-12;
constexpr double kRoundTripTolerance = 1e-9;

struct Verdict {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double loss_value(const std::function<Tensor(GradTape&)>& f) {
  GradTape tape;
  return f(tape).item();
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

// 1. Gradient correctness.
Verdict gradients() {
  const auto start = Clock::now();
  Verdict v;
  for (auto kind : kAllLosses) {
    const auto r = gradcheck_loss(kind, 50, 1e-5, 2024);
    v.pass = v.pass && r.trials == 50 && r.max_relative_error < kGradTolerance;
    v.detail += std::string(to_string(kind)) + "=" + fmt_double(r.max_relative_error) + " ";
  }
  const double elapsed = seconds_since(start);
  v.pass = v.pass && elapsed < kGradBudgetSeconds;
  v.detail += "time=" + fmt_double(elapsed) + "s";
  return v;
}

// 2. Limiting-case identities.
Verdict limiting_cases() {
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto batch = detail::random_batch(rng);
    const double tau = rng.uniform(1.0, 6.0);

    const double kd_ce = loss_value([&](GradTape& t) { return vanilla_kd_loss(t, batch, {1.0, tau, 0.0}); });
    const double ce = loss_value([&](GradTape& t) { return cross_entropy_loss(t, batch.student_logits, batch.labels); });
    worst = std::max(worst, std::abs(kd_ce - ce));

    const double nkd0 = loss_value([&](GradTape& t) { return nkd_loss(t, batch, {0.5, tau, 0.0}); });
    double weighted = 0.0;
    const std::size_t k = batch.student_logits.dim(1);
    for (std::size_t r = 0; r < batch.batch(); ++r) {
      const auto c = static_cast<std::size_t>(batch.labels[r]);
      const auto s = batch.student_logits.values().subspan(r * k, k);
      const auto t = batch.teacher_logits.values().subspan(r * k, k);
      weighted += -temp_softmax({t.begin(), t.end()}, 1.0)[c] * std::log(temp_softmax({s.begin(), s.end()}, 1.0)[c]);
    }
    worst = std::max(worst, std::abs(nkd0 - weighted / static_cast<double>(batch.batch())));

    batch.teacher_logits = batch.student_logits.detach();
    worst = std::max(worst, std::abs(loss_value([&](GradTape& t) { return vanilla_kd_loss(t, batch, {0.0, tau, 0.0}); })));
    worst = std::max(worst, std::abs(loss_value([&](GradTape& t) { return mse_logit_loss(t, batch); })));

    const std::size_t d = static_cast<std::size_t>(rng.integer(1, 16));
    const auto x = detail::random_tensor(rng, {batch.batch(), d}, true);
    const auto proj = make_projector(ProjectorKind::identity, {d}, {d}, 1);
    worst = std::max(worst, std::abs(loss_value([&](GradTape& t) { return simkd_loss(t, {x, x.detach(), 1}, proj, 1); })));
  }
  return {worst <= kIdentityTolerance, "max deviation=" + fmt_double(worst)};
}

// 3. Toy distillation.
Verdict toy_distillation() {
  const auto start = Clock::now();
  const cli::ToyTask task;
  std::map<TrainMethod, std::vector<double>> agreement;
  std::vector<double> simkd_acc, ce_acc;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train_set = gen_gaussian_blobs(task.classes, task.n_per_class, task.spread, derive_seed(seed, "data/train"));
    const auto test_set = gen_gaussian_blobs(task.classes, task.n_per_class, task.spread, derive_seed(seed, "data/test"));
    TrainConfig teacher_cfg;
    teacher_cfg.method = TrainMethod::ce;
    teacher_cfg.seed = derive_seed(seed, "teacher");
    const auto teacher =
        train(Mlp::create({2, task.teacher_width, task.teacher_width, task.classes}, teacher_cfg.seed), train_set,
              teacher_cfg);
    const auto teacher_records = evaluate(teacher.model, test_set);
    const auto student_init =
        Mlp::create({2, task.student_width, task.student_width, task.classes}, derive_seed(seed, "student"));

    for (auto method : kAllMethods) {
      TrainConfig cfg;
      cfg.method = method;
      cfg.hyperparams = method == TrainMethod::nkd ? KDHyperparams::nkd_defaults() : KDHyperparams::vanilla_defaults();
      cfg.seed = seed;
      const auto student = train(student_init, train_set, cfg, &teacher.model);
      const Inference inference =
          method == TrainMethod::simkd ? Inference(SimkdReuse{*student.projector, teacher.model.head()}) : OwnHead{};
      const auto records = evaluate(student.model, test_set, inference);
      if (method == TrainMethod::ce) {
        ce_acc.push_back(accuracy(records));
        continue;
      }
      agreement[method].push_back(argmax_agreement(records, teacher_records));
      if (method == TrainMethod::simkd) simkd_acc.push_back(accuracy(records));
    }
  }
  Verdict v;
  for (const auto& [method, values] : agreement) {
    const double m = median(values);
    v.pass = v.pass && m >= kAgreementFloor;
    v.detail += std::string(to_string(method)) + "=" + fmt_double(m) + " ";
  }
  const double simkd = median(simkd_acc), ce = median(ce_acc);
  v.pass = v.pass && simkd >= ce - kSimkdAccuracySlack;
  const double elapsed = seconds_since(start);
  v.pass = v.pass && elapsed < kToyBudgetSeconds;
  v.detail += "acc simkd=" + fmt_double(simkd) + " ce=" + fmt_double(ce) + " time=" + fmt_double(elapsed) + "s";
  return v;
}

// 4. Metrics oracle equivalence.
Verdict metrics_oracle() {
  Rng rng(11);
  double worst = 0.0;
  bool invariant = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto records = oracle::random_records(rng);
    const int bins = rng.integer(1, 20);
    worst = std::max(worst, std::abs(ece(records, bins) - oracle::ece(records, bins)));
    const double base = aurc(records);
    worst = std::max(worst, std::abs(base - oracle::aurc(records)));
    auto transformed = records;
    for (auto& r : transformed) r.confidence = std::pow(r.confidence, 3.0) * 0.5;
    invariant = invariant && aurc(transformed) == base;
  }
  return {worst <= kMetricTolerance && invariant,
          "max deviation=" + fmt_double(worst) + (invariant ? " monotone invariance holds" : " invariance broken")};
}

// 5. ANLS.
Verdict anls_checks() {
  const std::vector<std::string> table3{"table 3"}, table{"table"};
  const bool examples = anls_single("Table 3", table3) == 1.0 && std::abs(anls_single("tabel", table) - 0.6) < 1e-15 &&
                        anls_single("x", table) == 0.0;
  Rng rng(13);
  int mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto a = oracle::random_string(rng, 12), b = oracle::random_string(rng, 12);
    mismatches += levenshtein(std::string_view(a), std::string_view(b)) != oracle::levenshtein(a, b);
  }
  return {examples && mismatches == 0, std::string("worked examples ") + (examples ? "exact" : "wrong") +
                                           ", levenshtein mismatches=" + std::to_string(mismatches) + "/10000"};
}

// 6. Tag insertion against the brute-force matcher.
Verdict tag_insertion() {
  Rng rng(17);
  const EnrichmentConfig cfg;
  int span_mismatch = 0, roundtrip_mismatch = 0, count_mismatch = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto c = oracle::random_document(rng);
    const auto events = find_region_spans(c.doc, c.regions, cfg);
    const auto expected = oracle::region_spans(c, cfg);
    span_mismatch += oracle::keys(events) != expected;
    const auto enriched = insert_tags(c.doc, events);
    roundtrip_mismatch += !(strip_tags(enriched) == c.doc);
    count_mismatch += enriched.tokens.size() - c.doc.tokens.size() != expected.size() ||
                      enriched.tag_spans.size() * 2 != expected.size();
  }
  return {span_mismatch + roundtrip_mismatch + count_mismatch == 0,
          "span mismatches=" + std::to_string(span_mismatch) + " roundtrip failures=" +
              std::to_string(roundtrip_mismatch) + " tag count errors=" + std::to_string(count_mismatch) + " /500"};
}

// 7. Prompt rendering.
Verdict prompt_golden() {
  const auto golden = read_text_file(std::string(DISTILDOC_GOLDEN_DIR) + "/prompt_single_line.txt");
  const auto rendered = render_prompt("<Title> ACME Corp </Title> Invoice 42 Total: $10.00", "What is the invoice total?");
  std::vector<std::string> lines;
  std::istringstream in(golden);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  const bool anchored =
      lines.size() >= 8 && lines[0] == "You are asked to answer questions asked on a document image." &&
      lines[7] == "Directly extract the answer to the question from the document with as few words as possible.";
  const bool exact = rendered == golden;
  return {exact && anchored, std::string(exact ? "byte-exact" : "differs from golden") +
                                 (anchored ? ", golden lines 1 and 8 verified" : ", golden anchors wrong")};
}

// 8. Geometry.
Verdict geometry() {
  const double overlap = iou({0, 0, 10, 10}, {5, 0, 15, 10});
  Rng rng(19);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto b = standardize_bbox({rng.uniform(0, 1000), rng.uniform(0, 1000), rng.uniform(0, 1000),
                                     rng.uniform(0, 1000)},
                                    BoxFormat::xyxy);
    const ImageDims d1{rng.uniform(1, 5000), rng.uniform(1, 5000)};
    const ImageDims d2{rng.uniform(1, 5000), rng.uniform(1, 5000)};
    const auto back = interpolate_bbox(interpolate_bbox(b, d1, d2), d2, d1);
    worst = std::max({worst, std::abs(back.x1 - b.x1), std::abs(back.y1 - b.y1), std::abs(back.x2 - b.x2),
                      std::abs(back.y2 - b.y2)});
  }
  const double iou_error = std::abs(overlap - 1.0 / 3.0);
  return {iou_error <= kIouTolerance && worst <= kRoundTripTolerance,
          "iou error=" + fmt_double(iou_error) + " roundtrip max error=" + fmt_double(worst)};
}

// 9. Determinism of `distill`.
Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "distildoc_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  auto run_once = [&](const std::string& name) {
    const std::string out = (root / name).string();
    const char* argv[] = {"distildoc", "distill", "--method", "simkd", "--seed", "5", "--out", out.c_str()};
    std::ostringstream sink_out, sink_err;
    return cli::run(8, argv, sink_out, sink_err);
  };
  Verdict v;
  if (run_once("a") != cli::kOk || run_once("b") != cli::kOk) return {false, "distill failed"};
  int compared = 0;
  for (const char* name : {"teacher.weights.json", "student_ce.weights.json", "student_kd.weights.json",
                           "projector.weights.json", "loss_trace.json"}) {
    const bool same = read_text_file(root / "a" / name) == read_text_file(root / "b" / name);
    v.pass = v.pass && same;
    if (!same) v.detail += std::string(name) + " differs; ";
    ++compared;
  }
  fs::remove_all(root);
  v.detail += std::to_string(compared) + " files compared";
  return v;
}

}  // namespace
}  // namespace distildoc::acceptance

int main() {
  using namespace distildoc::acceptance;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradients},     {"limiting-case identities", limiting_cases},
      {"toy distillation", toy_distillation},  {"metrics oracle equivalence", metrics_oracle},
      {"anls", anls_checks},                   {"tag insertion oracle", tag_insertion},
      {"prompt golden file", prompt_golden},   {"geometry", geometry},
      {"distill determinism", determinism}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << v.detail
              << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
