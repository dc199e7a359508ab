#pragma once

// Checkpoint = JSON manifest + raw little-endian f64 blob.
//
//   {"format_version": 1,
//    "blob": "<file name next to the manifest>",
//    "config": {...run config...},
//    "schema": {"item_vocab": N, "attributes": [{"name": .., "vocab": ..}]},
//    "tensors": {"<name>": {"shape": [..], "dtype": "f64", "offset": bytes, "length": bytes}}}

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/errors.hpp"
#include "difsr/model/config.hpp"
#include "difsr/model/model.hpp"

namespace difsr::model {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  RunConfig config;
  Schema schema;
  ModelParams params;
};

inline nlohmann::json schema_json(const Schema& s) {
  nlohmann::json attrs = nlohmann::json::array();
  for (std::size_t j = 0; j < s.attribute_names.size(); ++j) {
    attrs.push_back({{"name", s.attribute_names[j]}, {"vocab", s.attribute_vocab[j]}});
  }
  return {{"item_vocab", s.item_vocab}, {"attributes", attrs}};
}

inline Schema parse_schema(const nlohmann::json& j) {
  Schema s;
  s.item_vocab = j.at("item_vocab").get<std::size_t>();
  for (const auto& a : j.at("attributes")) {
    s.attribute_names.push_back(a.at("name").get<std::string>());
    s.attribute_vocab.push_back(a.at("vocab").get<std::size_t>());
  }
  return s;
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto blob = manifest;
  blob.replace_extension(".bin");
  return blob;
}

/// Writes `<path>` (manifest) and `<path stem>.bin` (blob).
inline void save_checkpoint(const std::filesystem::path& manifest_path, const RunConfig& config, const Schema& schema,
                            const ModelParams& params) {
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  const auto blob_path = blob_path_for(manifest_path);
  nlohmann::json tensors = nlohmann::json::object();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + blob_path.string());
  std::size_t offset = 0;
  for (const auto& p : params.named()) {
    const auto bytes = p.value.size() * sizeof(double);
    blob.write(reinterpret_cast<const char*>(p.value.data().data()), static_cast<std::streamsize>(bytes));
    tensors[p.name] = {{"shape", p.value.shape()}, {"dtype", "f64"}, {"offset", offset}, {"length", bytes}};
    offset += bytes;
  }
  if (!blob) throw std::runtime_error("failed writing " + blob_path.string());
  const nlohmann::json manifest = {
      {"format_version", kCheckpointFormatVersion},
      {"blob", blob_path.filename().string()},
      {"config", to_json(config)},
      {"schema", schema_json(schema)},
      {"tensors", tensors},
  };
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format_version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format_version");
  }
  Checkpoint ck;
  ck.config = parse_config(manifest.at("config"));
  ck.schema = parse_schema(manifest.at("schema"));
  numcore::Rng rng(0);
  ck.params = init_params(ck.config.model, ck.schema, rng);

  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open checkpoint blob " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != ck.params.named().size()) {
    throw std::runtime_error("checkpoint tensor count does not match its config");
  }
  ck.params.visit([&](const std::string& name, Value& v, bool) {
    if (!tensors.contains(name)) throw std::runtime_error("checkpoint is missing tensor " + name);
    const auto& t = tensors.at(name);
    if (t.at("dtype") != "f64") throw std::runtime_error("tensor " + name + " is not f64");
    if (t.at("shape").get<Shape>() != v.shape()) throw std::runtime_error("tensor " + name + " has an unexpected shape");
    const auto offset = t.at("offset").get<std::size_t>();
    const auto length = t.at("length").get<std::size_t>();
    if (length != v.size() * sizeof(double) || offset + length > bytes.size()) {
      throw std::runtime_error("tensor " + name + " lies outside the blob");
    }
    std::memcpy(v.mutable_data().data(), bytes.data() + offset, length);
  });
  return ck;
}

}  // namespace difsr::model
