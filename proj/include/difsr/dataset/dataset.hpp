#pragma once

// Interaction logs and attribute catalogs: ingestion with iterative 5-core
// filtering, leave-one-out splitting, and padded batch construction.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/errors.hpp"
#include "difsr/numcore/random.hpp"

namespace difsr::data {

inline constexpr std::int32_t kPadding = 0;
inline constexpr std::size_t kDefaultMinOccurrences = 5;
inline constexpr std::size_t kDefaultMaxAttributeValues = 8;

/// Dense string <-> index map. Index 0 is reserved (padding / "no value").
class Vocabulary {
 public:
  explicit Vocabulary(std::string reserved = "<pad>") : tokens_{std::move(reserved)} {}

  std::int32_t add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, static_cast<std::int32_t>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }
  std::optional<std::int32_t> find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& token(std::int32_t index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  /// Including the reserved entry.
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    Vocabulary v(tokens.empty() ? std::string("<pad>") : tokens.front());
    for (std::size_t i = 1; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct AttributeCatalog {
  std::string name;
  Vocabulary vocab{"<none>"};
  /// Indexed by item index (row 0 = padding item, always empty). Values in catalog order.
  std::vector<std::vector<std::int32_t>> values_by_item;
  /// Widest per-item value list after capping (>= 1).
  std::size_t max_values = 1;
};

struct InteractionDataset {
  std::vector<std::string> users;
  std::vector<std::vector<std::int32_t>> sequences;  // chronological item indices, parallel to users
  Vocabulary items;
  std::vector<AttributeCatalog> attributes;  // sorted by name

  std::size_t num_items() const { return items.size() - 1; }
  std::size_t num_actions() const {
    std::size_t total = 0;
    for (const auto& s : sequences) total += s.size();
    return total;
  }
  std::optional<std::size_t> find_user(const std::string& id) const {
    auto it = std::find(users.begin(), users.end(), id);
    if (it == users.end()) return std::nullopt;
    return static_cast<std::size_t>(it - users.begin());
  }
  std::optional<std::size_t> find_attribute(const std::string& name) const {
    for (std::size_t j = 0; j < attributes.size(); ++j) {
      if (attributes[j].name == name) return j;
    }
    return std::nullopt;
  }
};

struct RawInteraction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct IngestOptions {
  std::size_t min_occurrences = kDefaultMinOccurrences;
  std::size_t max_attribute_values = kDefaultMaxAttributeValues;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parses the `user_id<TAB>item_id<TAB>timestamp` interaction file.
inline std::vector<RawInteraction> read_interactions(std::istream& in) {
  std::vector<RawInteraction> rows;
  std::string line;
  std::size_t line_number = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_number;
    const auto view = detail::strip_cr(line);
    if (!header_seen) {
      std::string_view header = view;
      if (header.starts_with("\xEF\xBB\xBF")) header.remove_prefix(3);
      if (header != "user_id\titem_id\ttimestamp") {
        throw ParseError("expected header 'user_id<TAB>item_id<TAB>timestamp'", line_number);
      }
      header_seen = true;
      continue;
    }
    if (view.empty()) continue;
    const auto fields = detail::split_tabs(view);
    if (fields.size() != 3) {
      throw ParseError("expected 3 tab-separated fields, found " + std::to_string(fields.size()), line_number);
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError("empty user or item id", line_number);
    RawInteraction row{std::string(fields[0]), std::string(fields[1]), 0};
    const auto ts = fields[2];
    auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), row.timestamp);
    if (ec != std::errc() || ptr != ts.data() + ts.size() || ts.empty()) {
      throw ParseError("timestamp '" + std::string(ts) + "' is not a decimal integer", line_number);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// item id -> (attribute name -> values), from the JSON Lines catalog.
using RawAttributes = std::map<std::string, std::map<std::string, std::vector<std::string>>>;

inline RawAttributes read_attributes(std::istream& in) {
  RawAttributes out;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const auto view = detail::strip_cr(line);
    if (view.find_first_not_of(" \t") == std::string_view::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(view);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
    if (!obj.is_object() || !obj.contains("item_id") || !obj["item_id"].is_string()) {
      throw ParseError("expected an object with a string \"item_id\"", line_number);
    }
    auto& entry = out[obj["item_id"].get<std::string>()];
    if (!obj.contains("attributes")) continue;
    const auto& attrs = obj["attributes"];
    if (!attrs.is_object()) throw ParseError("\"attributes\" must be an object", line_number);
    for (const auto& [name, values] : attrs.items()) {
      auto& list = entry[name];
      if (values.is_string()) {
        list.push_back(values.get<std::string>());
      } else if (values.is_array()) {
        for (const auto& v : values) {
          if (!v.is_string()) throw ParseError("attribute '" + name + "' has a non-string value", line_number);
          list.push_back(v.get<std::string>());
        }
      } else if (!values.is_null()) {
        throw ParseError("attribute '" + name + "' must be a list of strings", line_number);
      }
    }
  }
  return out;
}

/// Keeps only interactions whose user and item both occur at least
/// `min_occurrences` times, re-counting until nothing changes.
inline std::vector<RawInteraction> k_core_filter(std::vector<RawInteraction> rows, std::size_t min_occurrences) {
  while (true) {
    std::unordered_map<std::string, std::size_t> user_count, item_count;
    for (const auto& r : rows) {
      ++user_count[r.user];
      ++item_count[r.item];
    }
    std::vector<RawInteraction> kept;
    kept.reserve(rows.size());
    for (auto& r : rows) {
      if (user_count[r.user] >= min_occurrences && item_count[r.item] >= min_occurrences) kept.push_back(std::move(r));
    }
    if (kept.size() == rows.size()) return kept;
    rows = std::move(kept);
  }
}

/// Builds a dataset from parsed rows. Users and items are indexed in order of
/// first appearance; each user's sequence is stably sorted by timestamp.
inline InteractionDataset build_dataset(std::vector<RawInteraction> rows, const RawAttributes& raw_attributes,
                                        const IngestOptions& options = {}) {
  rows = k_core_filter(std::move(rows), options.min_occurrences);
  if (rows.empty()) throw EmptyDatasetError("no interactions remain after filtering");

  InteractionDataset ds;
  std::unordered_map<std::string, std::size_t> user_index;
  std::vector<std::vector<std::pair<std::int64_t, std::int32_t>>> timed;
  for (const auto& r : rows) {
    auto [it, inserted] = user_index.try_emplace(r.user, ds.users.size());
    if (inserted) {
      ds.users.push_back(r.user);
      timed.emplace_back();
    }
    timed[it->second].emplace_back(r.timestamp, ds.items.add(r.item));
  }
  ds.sequences.reserve(timed.size());
  for (auto& events : timed) {
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::int32_t> seq;
    seq.reserve(events.size());
    for (const auto& e : events) seq.push_back(e.second);
    ds.sequences.push_back(std::move(seq));
  }

  std::set<std::string> names;
  for (const auto& [item, attrs] : raw_attributes) {
    for (const auto& [name, values] : attrs) names.insert(name);
  }
  for (const auto& name : names) {
    AttributeCatalog catalog;
    catalog.name = name;
    catalog.values_by_item.resize(ds.items.size());
    for (std::size_t item = 1; item < ds.items.size(); ++item) {
      auto it = raw_attributes.find(ds.items.token(static_cast<std::int32_t>(item)));
      if (it == raw_attributes.end()) continue;
      auto values = it->second.find(name);
      if (values == it->second.end()) continue;
      auto& slot = catalog.values_by_item[item];
      for (const auto& v : values->second) {
        if (slot.size() >= options.max_attribute_values) break;
        const auto idx = catalog.vocab.add(v);
        if (std::find(slot.begin(), slot.end(), idx) == slot.end()) slot.push_back(idx);
      }
      catalog.max_values = std::max(catalog.max_values, slot.size());
    }
    ds.attributes.push_back(std::move(catalog));
  }
  return ds;
}

inline InteractionDataset ingest(const std::string& interactions_path, const std::string& attributes_path,
                                 const IngestOptions& options = {}) {
  std::ifstream interactions(interactions_path);
  if (!interactions) throw std::runtime_error("cannot open interactions file " + interactions_path);
  auto rows = read_interactions(interactions);
  RawAttributes attrs;
  if (!attributes_path.empty()) {
    std::ifstream attributes(attributes_path);
    if (!attributes) throw std::runtime_error("cannot open attributes file " + attributes_path);
    attrs = read_attributes(attributes);
  }
  return build_dataset(std::move(rows), attrs, options);
}

/// Table-1 style summary.
inline nlohmann::json manifest(const InteractionDataset& ds) {
  const auto users = ds.users.size(), items = ds.num_items(), actions = ds.num_actions();
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : ds.attributes) {
    attrs.push_back({{"name", a.name}, {"values", a.vocab.size() - 1}, {"max_values_per_item", a.max_values}});
  }
  return {
      {"format_version", 1},
      {"users", users},
      {"items", items},
      {"actions", actions},
      {"avg_actions_per_user", users ? static_cast<double>(actions) / static_cast<double>(users) : 0.0},
      {"avg_actions_per_item", items ? static_cast<double>(actions) / static_cast<double>(items) : 0.0},
      {"sparsity", users && items ? 1.0 - static_cast<double>(actions) / (static_cast<double>(users) * static_cast<double>(items)) : 1.0},
      {"attributes", attrs},
  };
}

// ---------------------------------------------------------------------------
// Leave-one-out split

/// One prediction example: context = sequences[user][0, end), target = sequences[user][end].
struct SampleRef {
  std::uint32_t user = 0;
  std::uint32_t end = 0;
};

struct Split {
  std::vector<SampleRef> train;
  std::vector<SampleRef> valid;
  std::vector<SampleRef> test;
  /// Users with fewer than 3 interactions (no valid/test sample).
  std::size_t short_sequences = 0;
};

/// Last item -> test, second-to-last -> validation, every earlier prefix -> training.
/// Training targets never include the validation or test items.
inline Split split_leave_one_out(const InteractionDataset& ds) {
  Split split;
  for (std::uint32_t u = 0; u < ds.sequences.size(); ++u) {
    const auto n = static_cast<std::uint32_t>(ds.sequences[u].size());
    if (n < 3) {
      ++split.short_sequences;
      for (std::uint32_t end = 1; end < n; ++end) split.train.push_back({u, end});
      continue;
    }
    for (std::uint32_t end = 1; end + 2 < n; ++end) split.train.push_back({u, end});
    split.valid.push_back({u, n - 2});
    split.test.push_back({u, n - 1});
  }
  return split;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::size_t size = 0;     // B
  std::size_t max_len = 0;  // n
  std::vector<std::int32_t> items;  // [B x n], left-padded with 0
  /// Per selected attribute: [B x n x width[j]] value indices, 0-padded.
  std::vector<std::vector<std::int32_t>> attributes;
  std::vector<std::size_t> attribute_widths;
  std::vector<std::size_t> lengths;  // real positions per row (<= n)
  std::vector<std::int32_t> targets;
  /// Per selected attribute: [B x (vocab-1)] multi-hot of the target item's values.
  std::vector<std::vector<double>> target_attributes;
  std::vector<std::uint32_t> users;
};

/// Builds one padded batch. `attribute_slots` selects dataset attribute catalogs in model order.
inline Batch make_batch(const InteractionDataset& ds, std::span<const SampleRef> samples, std::size_t max_len,
                        std::span<const std::size_t> attribute_slots) {
  if (max_len < 1) throw ContractError("max_len must be at least 1");
  Batch batch;
  batch.size = samples.size();
  batch.max_len = max_len;
  batch.items.assign(batch.size * max_len, kPadding);
  batch.lengths.resize(batch.size);
  batch.targets.resize(batch.size);
  batch.users.resize(batch.size);
  for (auto slot : attribute_slots) {
    const auto& cat = ds.attributes.at(slot);
    batch.attribute_widths.push_back(cat.max_values);
    batch.attributes.emplace_back(batch.size * max_len * cat.max_values, kPadding);
    batch.target_attributes.emplace_back(batch.size * (cat.vocab.size() - 1), 0.0);
  }
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& sample = samples[b];
    const auto& seq = ds.sequences.at(sample.user);
    const std::size_t end = sample.end;
    const std::size_t len = std::min(end, max_len);
    batch.lengths[b] = len;
    batch.users[b] = sample.user;
    batch.targets[b] = seq.at(end);
    const std::size_t offset = max_len - len;
    for (std::size_t t = 0; t < len; ++t) {
      const auto item = seq[end - len + t];
      batch.items[b * max_len + offset + t] = item;
      for (std::size_t j = 0; j < attribute_slots.size(); ++j) {
        const auto& values = ds.attributes[attribute_slots[j]].values_by_item[static_cast<std::size_t>(item)];
        const std::size_t width = batch.attribute_widths[j];
        auto* cell = batch.attributes[j].data() + ((b * max_len) + offset + t) * width;
        std::copy_n(values.begin(), std::min(values.size(), width), cell);
      }
    }
    for (std::size_t j = 0; j < attribute_slots.size(); ++j) {
      const auto& cat = ds.attributes[attribute_slots[j]];
      const std::size_t classes = cat.vocab.size() - 1;
      for (auto v : cat.values_by_item[static_cast<std::size_t>(batch.targets[b])]) {
        batch.target_attributes[j][b * classes + static_cast<std::size_t>(v) - 1] = 1.0;
      }
    }
  }
  return batch;
}

/// Pulls batches from a view in a (seed, epoch)-determined order.
class BatchStream {
 public:
  BatchStream(const InteractionDataset& ds, std::vector<SampleRef> view, std::size_t max_len, std::size_t batch_size,
              std::vector<std::size_t> attribute_slots, bool shuffle, std::uint64_t seed, std::uint64_t epoch)
      : ds_(&ds), view_(std::move(view)), max_len_(max_len), batch_size_(batch_size),
        slots_(std::move(attribute_slots)) {
    if (max_len < 1) throw ContractError("max_len must be at least 1");
    if (batch_size < 1) throw ContractError("batch_size must be at least 1");
    if (shuffle) {
      numcore::Rng rng(numcore::mix_seed(seed, epoch));
      std::shuffle(view_.begin(), view_.end(), rng);
    }
  }

  std::optional<Batch> next() {
    if (cursor_ >= view_.size()) return std::nullopt;
    const std::size_t count = std::min(batch_size_, view_.size() - cursor_);
    auto batch = make_batch(*ds_, std::span(view_).subspan(cursor_, count), max_len_, slots_);
    cursor_ += count;
    return batch;
  }

  std::size_t batches() const { return (view_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<SampleRef>& order() const { return view_; }

 private:
  const InteractionDataset* ds_;
  std::vector<SampleRef> view_;
  std::size_t max_len_;
  std::size_t batch_size_;
  std::vector<std::size_t> slots_;
  std::size_t cursor_ = 0;
};

}  // namespace difsr::data
