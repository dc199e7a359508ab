#pragma once

// Binary cache of a prepared dataset (portable little-endian cereal archive)
// next to its JSON manifest.

#include <filesystem>
#include <fstream>
#include <string>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include "difsr/dataset/dataset.hpp"

namespace difsr::data {

inline constexpr const char* kCacheFile = "dataset.bin";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr std::uint32_t kCacheFormatVersion = 1;

namespace detail {

struct CachedAttribute {
  std::string name;
  std::vector<std::string> tokens;
  std::vector<std::vector<std::int32_t>> values_by_item;
  std::uint64_t max_values = 1;

  template <class Archive>
  void serialize(Archive& ar) {
    ar(name, tokens, values_by_item, max_values);
  }
};

struct CachedDataset {
  std::uint32_t format_version = kCacheFormatVersion;
  std::vector<std::string> users;
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<std::string> item_tokens;
  std::vector<CachedAttribute> attributes;

  template <class Archive>
  void serialize(Archive& ar) {
    ar(format_version, users, sequences, item_tokens, attributes);
  }
};

}  // namespace detail

inline void save_cache(const InteractionDataset& ds, const std::filesystem::path& file) {
  detail::CachedDataset cached;
  cached.users = ds.users;
  cached.sequences = ds.sequences;
  cached.item_tokens = ds.items.tokens();
  for (const auto& a : ds.attributes) {
    cached.attributes.push_back({a.name, a.vocab.tokens(), a.values_by_item, a.max_values});
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  cereal::PortableBinaryOutputArchive archive(out);
  archive(cached);
}

inline InteractionDataset load_cache(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset cache " + file.string());
  detail::CachedDataset cached;
  try {
    cereal::PortableBinaryInputArchive archive(in);
    archive(cached);
  } catch (const cereal::Exception& e) {
    throw std::runtime_error("corrupt dataset cache " + file.string() + ": " + e.what());
  }
  if (cached.format_version != kCacheFormatVersion) {
    throw std::runtime_error("unsupported dataset cache version " + std::to_string(cached.format_version));
  }
  InteractionDataset ds;
  ds.users = std::move(cached.users);
  ds.sequences = std::move(cached.sequences);
  ds.items = Vocabulary::from_tokens(std::move(cached.item_tokens));
  for (auto& a : cached.attributes) {
    AttributeCatalog cat;
    cat.name = std::move(a.name);
    cat.vocab = Vocabulary::from_tokens(std::move(a.tokens));
    cat.values_by_item = std::move(a.values_by_item);
    cat.max_values = a.max_values;
    ds.attributes.push_back(std::move(cat));
  }
  return ds;
}

/// Writes manifest.json and dataset.bin into `dir`.
inline void save_prepared(const InteractionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_cache(ds, dir / kCacheFile);
  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  out << manifest(ds).dump(2) << '\n';
}

inline InteractionDataset load_prepared(const std::filesystem::path& dir) { return load_cache(dir / kCacheFile); }

}  // namespace difsr::data
