/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distildoc/enrichment.hpp"
#include "distildoc/geometry.hpp"
#include "distildoc/metrics.hpp"
#include "distildoc/tensor_json.hpp"

namespace distildoc {

inline constexpr double kDefaultScoreThreshold = 0.6;

namespace detail {

using nlohmann::json;

inline void require_version(const json& j, const std::string& source) {
  if (!j.is_object()) throw ParseError("expected a JSON object at top level", source);
  if (!j.contains("version") || j["version"] != kSchemaVersion)
    throw ParseError("unsupported or missing schema version (want \"v1\")", source + ": version");
}

template <class T>
T field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ParseError("expected an object", where);
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + key + "'", where);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("field '") + key + "' has the wrong type", where + "." + key);
  }
}

inline const json& array_field(const json& obj, const char* key, const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_array()) throw ParseError(std::string("missing array '") + key + "'", where);
  return *it;
}

inline std::string indexed(const std::string& name, std::size_t i) { return name + "[" + std::to_string(i) + "]"; }

// Question ids may be strings or integers; both compare as text.
inline std::string id_text(const json& obj, const std::string& where) {
  const auto it = obj.find("question_id");
  if (it == obj.end()) throw ParseError("missing field 'question_id'", where);
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return it->dump();
  throw ParseError("question_id must be a string or integer", where);
}

inline json box_json(const BBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline BBox box_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw ParseError("expected a box of 4 numbers", where);
  std::array<double, 4> raw{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!j[i].is_number()) throw ParseError("box coordinate is not a number", where);
    raw[i] = j[i].get<double>();
  }
  try {
    return standardize_bbox(raw, BoxFormat::xyxy);
  } catch (const std::domain_error& e) {
    throw ParseError(e.what(), where);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layout detections
//
// {"version": "v1",
//  "categories": [{"id", "name"}],
//  "images": [{"id", "width", "height"}],           optional
//  "detections": [{"image_id", "category_id", "bbox": [x, y, w, h], "score"}]}

struct DlaPredictions {
  std::map<std::int64_t, std::vector<LayoutRegion>> regions;  // by image id
  std::map<std::int64_t, ImageDims> image_dims;               // when the file lists images
  std::size_t dropped = 0;                                    // below the score threshold
};

inline DlaPredictions parse_dla_predictions(const nlohmann::json& j, const std::string& source,
                                            double score_threshold = kDefaultScoreThreshold) {
  detail::require_version(j, source);
  std::map<std::int64_t, std::string> categories;
  const auto& cats = detail::array_field(j, "categories", source);
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const auto where = source + ": " + detail::indexed("categories", i);
    categories[detail::field<std::int64_t>(cats[i], "id", where)] = detail::field<std::string>(cats[i], "name", where);
  }

  DlaPredictions out;
  if (j.contains("images")) {
    const auto& images = detail::array_field(j, "images", source);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto where = source + ": " + detail::indexed("images", i);
      const ImageDims dims{detail::field<double>(images[i], "width", where),
                           detail::field<double>(images[i], "height", where)};
      if (!(dims.width > 0.0 && dims.height > 0.0)) throw ParseError("image dimensions must be positive", where);
      out.image_dims[detail::field<std::int64_t>(images[i], "id", where)] = dims;
    }
  }

  const auto& dets = detail::array_field(j, "detections", source);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto where = source + ": " + detail::indexed("detections", i);
    const auto& d = dets[i];
    const auto image_id = detail::field<std::int64_t>(d, "image_id", where);
    const auto category = detail::field<std::int64_t>(d, "category_id", where);
    const auto score = detail::field<double>(d, "score", where);
    const auto raw = detail::field<std::vector<double>>(d, "bbox", where);
    const auto name = categories.find(category);
    if (name == categories.end()) throw ParseError("unknown category_id " + std::to_string(category), where);
    if (!(score >= 0.0 && score <= 1.0)) throw ParseError("score outside [0, 1]", where);
    if (raw.size() != 4) throw ParseError("bbox must have 4 numbers", where);
    LayoutRegion region;
    try {
      region.bbox = standardize_bbox({raw[0], raw[1], raw[2], raw[3]}, BoxFormat::xywh);
    } catch (const std::domain_error& e) {
      throw ParseError(e.what(), where);
    }
    if (score < score_threshold) {
      ++out.dropped;
      continue;
    }
    region.class_label = name->second;
    region.score = score;
    region.metadata["category_id"] = std::to_string(category);
    out.regions[image_id].push_back(std::move(region));
  }
  return out;
}

inline DlaPredictions load_dla_predictions(const std::filesystem::path& path,
                                           double score_threshold = kDefaultScoreThreshold) {
  return parse_dla_predictions(parse_json_text(read_text_file(path), path.string()), path.string(), score_threshold);
}

// ---------------------------------------------------------------------------
// OCR documents
//
// {"version": "v1", "width", "height", "tokens": [...], "boxes": [[x1, y1, x2, y2], ...],
//  "image_id": optional}

struct OcrFile {
  OcrDocument doc;
  std::optional<std::int64_t> image_id;
  std::size_t clamped = 0;  // boxes pulled back inside the image
};

inline nlohmann::json to_json(const OcrDocument& doc, std::optional<std::int64_t> image_id = std::nullopt) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : doc.boxes) boxes.push_back(detail::box_json(b));
  nlohmann::json j{{"version", kSchemaVersion}, {"width", doc.width}, {"height", doc.height},
                   {"tokens", doc.tokens},      {"boxes", std::move(boxes)}};
  if (image_id) j["image_id"] = *image_id;
  return j;
}

inline OcrFile parse_ocr_document(const nlohmann::json& j, const std::string& source) {
  detail::require_version(j, source);
  OcrFile out;
  out.doc.width = detail::field<double>(j, "width", source);
  out.doc.height = detail::field<double>(j, "height", source);
  if (!(out.doc.width > 0.0 && out.doc.height > 0.0))
    throw ParseError("image dimensions must be positive", source + ": width/height");
  out.doc.tokens = detail::field<std::vector<std::string>>(j, "tokens", source);
  const auto& boxes = detail::array_field(j, "boxes", source);
  if (boxes.size() != out.doc.tokens.size())
    throw ParseError(std::to_string(out.doc.tokens.size()) + " tokens but " + std::to_string(boxes.size()) + " boxes",
                     source + ": boxes");
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto b = detail::box_from_json(boxes[i], source + ": " + detail::indexed("boxes", i));
    const BBox c{std::clamp(b.x1, 0.0, out.doc.width), std::clamp(b.y1, 0.0, out.doc.height),
                 std::clamp(b.x2, 0.0, out.doc.width), std::clamp(b.y2, 0.0, out.doc.height)};
    if (!(c == b)) ++out.clamped;
    out.doc.boxes.push_back(c);
  }
  if (j.contains("image_id")) out.image_id = detail::field<std::int64_t>(j, "image_id", source);
  return out;
}

inline OcrFile load_ocr_document(const std::filesystem::path& path) {
  return parse_ocr_document(parse_json_text(read_text_file(path), path.string()), path.string());
}

inline void write_ocr_document(const std::filesystem::path& path, const OcrDocument& doc,
                               std::optional<std::int64_t> image_id = std::nullopt) {
  write_text_file(path, to_json(doc, image_id).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Enriched tokens
//
// {"version": "v1", "width", "height", "tokens", "boxes", "tag_spans": [[region_id, start, end], ...]}

inline nlohmann::json to_json(const EnrichedTokens& e) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : e.boxes) boxes.push_back(detail::box_json(b));
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : e.tag_spans) spans.push_back({s.region_id, s.start, s.end});
  return {{"version", kSchemaVersion}, {"width", e.width},          {"height", e.height},
          {"tokens", e.tokens},        {"boxes", std::move(boxes)}, {"tag_spans", std::move(spans)}};
}

inline EnrichedTokens parse_enriched_tokens(const nlohmann::json& j, const std::string& source) {
  detail::require_version(j, source);
  EnrichedTokens e;
  e.width = detail::field<double>(j, "width", source);
  e.height = detail::field<double>(j, "height", source);
  e.tokens = detail::field<std::vector<std::string>>(j, "tokens", source);
  const auto& boxes = detail::array_field(j, "boxes", source);
  if (boxes.size() != e.tokens.size()) throw ParseError("tokens and boxes differ in length", source + ": boxes");
  for (std::size_t i = 0; i < boxes.size(); ++i)
    e.boxes.push_back(detail::box_from_json(boxes[i], source + ": " + detail::indexed("boxes", i)));
  const auto& spans = detail::array_field(j, "tag_spans", source);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto where = source + ": " + detail::indexed("tag_spans", i);
    std::vector<std::size_t> v;
    try {
      v = spans[i].get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError("tag span must be [region_id, start, end]", where);
    }
    if (v.size() != 3 || v[1] >= v[2] || v[2] >= e.tokens.size())
      throw ParseError("tag span must be [region_id, start, end] with start < end < token count", where);
    e.tag_spans.push_back({v[0], v[1], v[2]});
  }
  return e;
}

inline EnrichedTokens load_enriched_tokens(const std::filesystem::path& path) {
  return parse_enriched_tokens(parse_json_text(read_text_file(path), path.string()), path.string());
}

inline void write_enriched_tokens(const std::filesystem::path& path, const EnrichedTokens& e) {
  write_text_file(path, to_json(e).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Prediction records
//
// {"version": "v1", "records": [{"confidence", "correct", "probabilities": optional}]}

inline nlohmann::json to_json(std::span<const PredictionRecord> records) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json item{{"confidence", r.confidence}, {"correct", r.correct}};
    if (!r.probabilities.empty()) item["probabilities"] = r.probabilities;
    list.push_back(std::move(item));
  }
  return {{"version", kSchemaVersion}, {"records", std::move(list)}};
}

inline std::vector<PredictionRecord> parse_prediction_records(const nlohmann::json& j, const std::string& source) {
  detail::require_version(j, source);
  const auto& list = detail::array_field(j, "records", source);
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto where = source + ": " + detail::indexed("records", i);
    PredictionRecord r;
    r.confidence = detail::field<double>(list[i], "confidence", where);
    r.correct = detail::field<bool>(list[i], "correct", where);
    if (!(r.confidence > 0.0 && r.confidence <= 1.0)) throw ParseError("confidence outside (0, 1]", where);
    if (list[i].contains("probabilities")) {
      r.probabilities = detail::field<std::vector<double>>(list[i], "probabilities", where);
      if (r.probabilities.empty() || *std::max_element(r.probabilities.begin(), r.probabilities.end()) != r.confidence)
        throw ParseError("confidence is not the maximum of probabilities", where);
      r.predicted = static_cast<int>(std::max_element(r.probabilities.begin(), r.probabilities.end()) -
                                     r.probabilities.begin());
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<PredictionRecord> load_prediction_records(const std::filesystem::path& path) {
  return parse_prediction_records(parse_json_text(read_text_file(path), path.string()), path.string());
}

// ---------------------------------------------------------------------------
// ANLS inputs
//
// predictions: {"version": "v1", "predictions": [{"question_id", "answer"}]}
// golds:       {"version": "v1", "questions": [{"question_id", "answers": [...]}]}

struct AnlsInputs {
  std::vector<std::string> question_ids;  // gold order
  std::vector<AnlsItem> items;
};

/// Joins predictions to gold questions on question_id. Every gold question
/// needs exactly one prediction and every prediction a gold question.
inline AnlsInputs join_anls_inputs(const nlohmann::json& pred, const std::string& pred_source,
                                   const nlohmann::json& gold, const std::string& gold_source) {
  detail::require_version(pred, pred_source);
  detail::require_version(gold, gold_source);
  std::map<std::string, std::string> answers;
  const auto& preds = detail::array_field(pred, "predictions", pred_source);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto where = pred_source + ": " + detail::indexed("predictions", i);
    const auto id = detail::id_text(preds[i], where);
    if (!answers.emplace(id, detail::field<std::string>(preds[i], "answer", where)).second)
      throw ParseError("duplicate question_id " + id, where);
  }
  AnlsInputs out;
  const auto& questions = detail::array_field(gold, "questions", gold_source);
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto where = gold_source + ": " + detail::indexed("questions", i);
    const auto id = detail::id_text(questions[i], where);
    auto golds = detail::field<std::vector<std::string>>(questions[i], "answers", where);
    if (golds.empty()) throw ParseError("empty gold answer list", where);
    const auto it = answers.find(id);
    if (it == answers.end()) throw ParseError("no prediction for question_id " + id, where);
    out.question_ids.push_back(id);
    out.items.push_back({std::move(it->second), std::move(golds)});
    answers.erase(it);
  }
  if (!answers.empty())
    throw ParseError("prediction for unknown question_id " + answers.begin()->first, pred_source);
  return out;
}

inline AnlsInputs load_anls_inputs(const std::filesystem::path& pred_path, const std::filesystem::path& gold_path) {
  return join_anls_inputs(parse_json_text(read_text_file(pred_path), pred_path.string()), pred_path.string(),
                          parse_json_text(read_text_file(gold_path), gold_path.string()), gold_path.string());
}

}  // namespace distildoc
