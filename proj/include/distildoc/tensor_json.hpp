/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distildoc/tensor.hpp"

namespace distildoc {

/// Raised by every reader in this library. `where` locates the problem
/// (byte offset, record index or field path).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::string where)
      : std::runtime_error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

inline constexpr const char* kTensorDocumentFormat = "distildoc-tensors";
inline constexpr const char* kSchemaVersion = "v1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Parameter container shared by projectors and MLPs:
/// {"format", "version", "kind", "seed", "shapes", "attributes", "tensors"}.
struct TensorDocument {
  std::string kind;
  std::uint64_t seed = 0;
  std::map<std::string, Shape> shapes;
  nlohmann::json attributes = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw ParseError("missing tensor '" + name + "'", "tensors");
  }
};

inline nlohmann::json to_json(const TensorDocument& doc) {
  nlohmann::json j;
  j["format"] = kTensorDocumentFormat;
  j["version"] = kSchemaVersion;
  j["kind"] = doc.kind;
  j["seed"] = doc.seed;
  j["shapes"] = nlohmann::json::object();
  for (const auto& [name, shape] : doc.shapes) j["shapes"][name] = shape;
  j["attributes"] = doc.attributes;
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : doc.tensors) {
    j["tensors"].push_back({{"name", t.name},
                            {"shape", t.tensor.shape()},
                            {"values", std::vector<double>(t.tensor.values().begin(),
                                                           t.tensor.values().end())}});
  }
  return j;
}

inline TensorDocument tensor_document_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw ParseError("expected a JSON object", "$");
    if (j.value("version", "") != kSchemaVersion)
      throw ParseError("unsupported or missing schema version (want \"v1\")", "version");
    if (j.value("format", "") != kTensorDocumentFormat)
      throw ParseError("not a tensor document", "format");
    TensorDocument doc;
    doc.kind = j.at("kind").get<std::string>();
    doc.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [name, shape] : j.at("shapes").items()) doc.shapes[name] = shape.get<Shape>();
    doc.attributes = j.value("attributes", nlohmann::json::object());
    const auto& tensors = j.at("tensors");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      try {
        doc.tensors.push_back({t.at("name").get<std::string>(),
                               Tensor(t.at("shape").get<Shape>(), t.at("values").get<std::vector<double>>())});
      } catch (const std::domain_error& e) {
        throw ParseError(e.what(), "tensors[" + std::to_string(i) + "]");
      }
    }
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what(), "tensor document");
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file", path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Parses JSON text, reporting malformed input with its byte offset.
inline nlohmann::json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), source + " at byte " + std::to_string(e.byte));
  }
}

inline void write_tensor_document(const std::filesystem::path& path, const TensorDocument& doc) {
  write_text_file(path, to_json(doc).dump(1) + "\n");
}

inline TensorDocument read_tensor_document(const std::filesystem::path& path) {
  return tensor_document_from_json(parse_json_text(read_text_file(path), path.string()));
}

}  // namespace distildoc
