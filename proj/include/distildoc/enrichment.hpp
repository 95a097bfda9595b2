/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "distildoc/geometry.hpp"
#include "distildoc/text.hpp"

namespace distildoc {

struct OcrDocument {
  std::vector<std::string> tokens;
  std::vector<BBox> boxes;
  double width = 0.0;
  double height = 0.0;

  ImageDims dims() const { return {width, height}; }

  void validate() const {
    if (tokens.size() != boxes.size())
      throw std::domain_error("OCR document has " + std::to_string(tokens.size()) + " tokens but " +
                              std::to_string(boxes.size()) + " boxes");
    if (!(width > 0.0 && height > 0.0)) throw std::domain_error("OCR document dimensions must be positive");
  }

  friend bool operator==(const OcrDocument&, const OcrDocument&) = default;
};

struct EnrichmentConfig {
  double iou_threshold = 0.3;
  std::set<std::string> ignore_labels{"Text"};
  CornerNorm corner_norm = CornerNorm::l1;

  void validate() const {
    if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0))
      throw std::domain_error("iou threshold must lie in [0, 1]");
  }
};

enum class TagKind { start, end };

struct InsertionEvent {
  std::size_t token_index = 0;
  TagKind kind = TagKind::start;
  std::size_t region_id = 0;
  std::string class_label;
  BBox bbox;

  friend bool operator==(const InsertionEvent&, const InsertionEvent&) = default;
};

struct TagSpan {
  std::size_t region_id = 0;
  std::size_t start = 0;  // index of the start tag in the enriched stream
  std::size_t end = 0;    // index of the end tag

  friend bool operator==(const TagSpan&, const TagSpan&) = default;
};

struct EnrichedTokens {
  std::vector<std::string> tokens;
  std::vector<BBox> boxes;
  std::vector<TagSpan> tag_spans;
  double width = 0.0;
  double height = 0.0;

  friend bool operator==(const EnrichedTokens&, const EnrichedTokens&) = default;
};

/// Replaces whitespace in a class name with '-'.
inline std::string sanitize_label(std::string_view label) {
  std::string out(label);
  for (auto& c : out)
    if (text::is_space(static_cast<unsigned char>(c))) c = '-';
  return out;
}

inline bool is_valid_tag_label(std::string_view label) {
  return !label.empty() && label.find_first_of("<> \t\r\n\f\v") == std::string_view::npos;
}

inline std::string start_tag(std::string_view label) { return "<" + std::string(label) + ">"; }
inline std::string end_tag(std::string_view label) { return "</" + std::string(label) + ">"; }

/// Events sort by token index, then start before end, then region id.
inline bool event_order(const InsertionEvent& a, const InsertionEvent& b) {
  return std::tuple(a.token_index, a.kind == TagKind::end, a.region_id) <
         std::tuple(b.token_index, b.kind == TagKind::end, b.region_id);
}

/// Matches each non-ignored region to its start and end tokens. A token
/// qualifies when the region fully contains it or their IoU exceeds the
/// threshold; the start token is the qualifying token nearest the region's
/// top-left corner and the end token the one nearest its bottom-right
/// corner (lowest index wins ties). If the start token comes after the end
/// token in reading order the two are swapped.
inline std::vector<InsertionEvent> find_region_spans(const OcrDocument& doc, std::span<const LayoutRegion> regions,
                                                     const EnrichmentConfig& cfg = {}) {
  doc.validate();
  cfg.validate();
  std::vector<InsertionEvent> events;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& region = regions[r];
    if (region.class_label.empty()) throw std::domain_error("layout region " + std::to_string(r) + " has no class");
    if (cfg.ignore_labels.contains(region.class_label)) continue;

    std::size_t start = doc.tokens.size(), end = doc.tokens.size();
    double best_start = 0.0, best_end = 0.0;
    for (std::size_t t = 0; t < doc.tokens.size(); ++t) {
      const auto& box = doc.boxes[t];
      if (!(fully_contains(region.bbox, box) || iou(region.bbox, box) > cfg.iou_threshold)) continue;
      const double ds = corner_distance(region.bbox, box, Corner::top_left, cfg.corner_norm);
      const double de = corner_distance(region.bbox, box, Corner::bottom_right, cfg.corner_norm);
      if (start == doc.tokens.size() || ds < best_start) start = t, best_start = ds;
      if (end == doc.tokens.size() || de < best_end) end = t, best_end = de;
    }
    if (start == doc.tokens.size()) continue;
    if (start > end) std::swap(start, end);

    const auto label = sanitize_label(region.class_label);
    events.push_back({start, TagKind::start, r, label, region.bbox});
    events.push_back({end, TagKind::end, r, label, region.bbox});
  }
  std::sort(events.begin(), events.end(), event_order);
  return events;
}

/// Inserts start and end tags with a running insertion counter C: a start
/// event at token I goes to position I + C and an end event to I + C + 1.
inline EnrichedTokens insert_tags(const OcrDocument& doc, std::span<const InsertionEvent> events) {
  doc.validate();
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (!is_valid_tag_label(e.class_label))
      throw std::domain_error("malformed tag label '" + e.class_label + "'");
    if (e.token_index >= doc.tokens.size())
      throw std::domain_error("insertion event refers to token " + std::to_string(e.token_index) + " of " +
                              std::to_string(doc.tokens.size()));
    if (i > 0 && event_order(e, events[i - 1])) throw std::domain_error("insertion events are not sorted");
  }

  EnrichedTokens out{doc.tokens, doc.boxes, {}, doc.width, doc.height};
  std::size_t inserted = 0;
  for (const auto& e : events) {
    const std::size_t pos = e.token_index + inserted + (e.kind == TagKind::end ? 1 : 0);
    out.tokens.insert(out.tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                      e.kind == TagKind::start ? start_tag(e.class_label) : end_tag(e.class_label));
    out.boxes.insert(out.boxes.begin() + static_cast<std::ptrdiff_t>(pos), e.bbox);
    ++inserted;
    // Positions are strictly increasing, so recorded indices stay valid.
    if (e.kind == TagKind::start) {
      out.tag_spans.push_back({e.region_id, pos, pos});
      continue;
    }
    auto span = std::find_if(out.tag_spans.begin(), out.tag_spans.end(), [&](const TagSpan& s) {
      return s.region_id == e.region_id && s.start == s.end;
    });
    if (span == out.tag_spans.end())
      throw std::domain_error("end event for region " + std::to_string(e.region_id) + " has no open start");
    span->end = pos;
  }
  for (const auto& s : out.tag_spans)
    if (s.start == s.end) throw std::domain_error("region " + std::to_string(s.region_id) + " has no end event");
  return out;
}

/// Removes the tag entries recorded in tag_spans.
inline OcrDocument strip_tags(const EnrichedTokens& enriched) {
  if (enriched.tokens.size() != enriched.boxes.size())
    throw std::domain_error("enriched tokens and boxes differ in length");
  std::vector<bool> is_tag(enriched.tokens.size(), false);
  for (const auto& s : enriched.tag_spans) {
    if (s.start >= s.end || s.end >= enriched.tokens.size())
      throw std::domain_error("tag span for region " + std::to_string(s.region_id) + " is out of range");
    is_tag[s.start] = is_tag[s.end] = true;
  }
  OcrDocument doc{{}, {}, enriched.width, enriched.height};
  for (std::size_t i = 0; i < enriched.tokens.size(); ++i) {
    if (is_tag[i]) continue;
    doc.tokens.push_back(enriched.tokens[i]);
    doc.boxes.push_back(enriched.boxes[i]);
  }
  return doc;
}

/// Detections in their own image space, interpolated into the OCR image
/// before matching.
inline EnrichedTokens enrich(const OcrDocument& doc, std::span<const LayoutRegion> detections,
                             const ImageDims& detection_dims, const EnrichmentConfig& cfg = {}) {
  doc.validate();
  std::vector<LayoutRegion> regions(detections.begin(), detections.end());
  for (auto& r : regions) r.bbox = interpolate_bbox(r.bbox, detection_dims, doc.dims());
  const auto events = find_region_spans(doc, regions, cfg);
  return insert_tags(doc, events);
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string serialize_plain(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

struct CharCell {
  double width = 0.0;
  double height = 0.0;
};

/// Default cell maps a page to roughly 100 columns by 60 rows.
inline CharCell default_char_cell(const ImageDims& dims) { return {dims.width / 100.0, dims.height / 60.0}; }

struct SpacePlacement {
  std::size_t line = 0;    // output line
  std::size_t column = 0;  // code-point column
};

struct SpaceLayout {
  std::string text;
  std::vector<SpacePlacement> placements;  // one per input token
  std::size_t truncated = 0;
};

/// Writes each token on a character grid at column floor(x1 / cell_w) of row
/// floor(y_center / cell_h). A token needs a free cell on either side; on
/// collision it moves right to the first column that fits, and when the row
/// has no room it goes to an overflow line below that row. Tokens longer
/// than a whole row are truncated.
inline SpaceLayout serialize_space(std::span<const std::string> tokens, std::span<const BBox> boxes,
                                   const ImageDims& dims, std::optional<CharCell> cell = std::nullopt) {
  if (tokens.size() != boxes.size()) throw std::domain_error("serialize_space: tokens and boxes differ in length");
  if (!(dims.width > 0.0 && dims.height > 0.0)) throw std::domain_error("serialize_space: bad image dimensions");
  const CharCell c = cell.value_or(default_char_cell(dims));
  if (!(c.width > 0.0 && c.height > 0.0)) throw std::domain_error("serialize_space: char cell must be positive");

  auto cells = [](double extent, double size) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(extent / size - 1e-9)));
  };
  const std::size_t rows = cells(dims.height, c.height);
  const std::size_t cols = cells(dims.width, c.width);
  auto clamp_index = [](double v, std::size_t n) {
    if (!(v > 0.0)) return std::size_t{0};
    return std::min(n - 1, static_cast<std::size_t>(v));
  };

  // grid[row][sub-line] is a row of code points, 0 meaning free.
  std::vector<std::vector<std::u32string>> grid(rows);
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> where;  // row, sub-line, column
  SpaceLayout layout;

  auto free_run = [&](const std::u32string& line, std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i)
      if (line[i] != 0) return false;
    return true;
  };

  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto cps = text::decode_utf8(tokens[t]);
    if (cps.size() > cols) {
      cps.resize(cols);
      ++layout.truncated;
    }
    const std::size_t row = clamp_index(boxes[t].center_y() / c.height, rows);
    const std::size_t want = clamp_index(boxes[t].x1 / c.width, cols);
    const std::size_t len = std::max<std::size_t>(1, cps.size());
    bool placed = false;
    for (std::size_t sub = 0; !placed; ++sub) {
      if (sub == grid[row].size()) grid[row].emplace_back(cols, char32_t{0});
      auto& line = grid[row][sub];
      // Prefer the requested column or later; fall back to anywhere in the line.
      for (std::size_t pass = 0; pass < 2 && !placed; ++pass) {
        for (std::size_t col = pass == 0 ? want : 0; col + len <= cols; ++col) {
          const std::size_t lo = col > 0 ? col - 1 : col;
          const std::size_t hi = std::min(cols, col + len + 1);
          if (!free_run(line, lo, hi)) continue;
          std::copy(cps.begin(), cps.end(), line.begin() + static_cast<std::ptrdiff_t>(col));
          if (cps.empty()) line[col] = U' ';
          where.emplace_back(row, sub, col);
          placed = true;
          break;
        }
      }
    }
  }

  // Emit lines; each run of empty rows becomes one blank line and a trailing
  // run is dropped.
  std::vector<std::vector<std::size_t>> line_of(rows);
  std::vector<std::string> lines;
  bool in_gap = false;
  for (std::size_t r = 0; r < rows; ++r) {
    if (grid[r].empty()) {
      if (!in_gap) lines.emplace_back();
      in_gap = true;
      continue;
    }
    in_gap = false;
    for (auto& line : grid[r]) {
      std::u32string s(line);
      for (auto& ch : s)
        if (ch == 0) ch = U' ';
      while (!s.empty() && s.back() == U' ') s.pop_back();
      line_of[r].push_back(lines.size());
      lines.push_back(text::encode_utf8(s));
    }
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i) layout.text += '\n';
    layout.text += lines[i];
  }
  for (const auto& [row, sub, col] : where) layout.placements.push_back({line_of[row][sub], col});
  return layout;
}

/// Boxes for laying out an enriched stream: a start tag borrows the box of
/// the token after it and an end tag the box of the token before it, so tags
/// sit next to the text they delimit.
inline std::vector<BBox> space_anchor_boxes(const EnrichedTokens& enriched) {
  std::vector<bool> is_tag(enriched.tokens.size(), false);
  std::vector<bool> is_start(enriched.tokens.size(), false);
  for (const auto& s : enriched.tag_spans) {
    is_tag.at(s.start) = is_tag.at(s.end) = true;
    is_start[s.start] = true;
  }
  auto boxes = enriched.boxes;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (!is_tag[i]) continue;
    if (is_start[i]) {
      for (std::size_t j = i + 1; j < boxes.size(); ++j)
        if (!is_tag[j]) {
          boxes[i] = enriched.boxes[j];
          break;
        }
    } else {
      for (std::size_t j = i; j-- > 0;)
        if (!is_tag[j]) {
          boxes[i] = enriched.boxes[j];
          break;
        }
    }
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Prompt

inline constexpr std::string_view kPromptInstruction[] = {
    "You are asked to answer questions asked on a document image.",
    "The answers to questions are short text spans taken verbatim from the document.",
    "This means that the answers comprise a set of contiguous text tokens present in the document.",
};
inline constexpr std::string_view kPromptDirective =
    "Directly extract the answer to the question from the document with as few words as possible.";

/// Zero-shot extractive QA prompt. Ends with "Answer: " and no newline.
inline std::string render_prompt(std::string_view document_text, std::string_view question) {
  std::string out;
  for (auto line : kPromptInstruction) {
    out += line;
    out += '\n';
  }
  out += "Document:\n";
  out += document_text;
  out += "\nQuestion: ";
  out += question;
  out += "\n\n";
  out += kPromptDirective;
  out += "\n\nAnswer: ";
  return out;
}

}  // namespace distildoc
