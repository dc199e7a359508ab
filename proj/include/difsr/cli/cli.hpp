#pragma once

// difsr command line: prepare, train, evaluate, diagnose.
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "difsr/dataset/cache.hpp"
#include "difsr/dataset/dataset.hpp"
#include "difsr/diagnostics/diagnostics.hpp"
#include "difsr/errors.hpp"
#include "difsr/evaluation/evaluate.hpp"
#include "difsr/model/checkpoint.hpp"
#include "difsr/model/config.hpp"
#include "difsr/train/trainer.hpp"

namespace difsr::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr const char* kBestCheckpoint = "checkpoint_best.json";
inline constexpr const char* kLastCheckpoint = "checkpoint_last.json";
inline constexpr const char* kTrainLog = "train_log.jsonl";
inline constexpr const char* kEpochReports = "epoch_reports.jsonl";
inline constexpr const char* kTestReport = "test_report.json";
inline constexpr const char* kTiming = "timing.json";

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string interactions;
  std::string attributes;
  std::string out;
  std::size_t min_occurrences = data::kDefaultMinOccurrences;
};

inline int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  data::IngestOptions options;
  options.min_occurrences = a.min_occurrences;
  const auto ds = data::ingest(a.interactions, a.attributes, options);
  data::save_prepared(ds, a.out);
  out << data::manifest(ds).dump(2) << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
};

/// Writes best/last checkpoints, the per-step loss log, per-epoch validation
/// reports and the best checkpoint's test report. Timing goes to its own file.
inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto config = load_config(a.config);
  config.validate();
  const auto ds = data::load_prepared(a.data);
  const fs::path dir(a.out);
  fs::create_directories(dir);

  std::ofstream log(dir / kTrainLog, std::ios::trunc | std::ios::binary);
  std::ofstream epochs(dir / kEpochReports, std::ios::trunc | std::ios::binary);
  if (!log || !epochs) throw std::runtime_error("cannot write logs under " + dir.string());
  nlohmann::json timing = {{"format_version", 1}, {"epochs", nlohmann::json::array()}};

  train::FitHooks hooks;
  hooks.on_step = [&](const train::LossRecord& r) { log << train::to_json(r).dump() << '\n'; };
  hooks.on_epoch = [&](std::size_t epoch, const eval::EvalReport& r) {
    auto j = eval::to_json(r);
    j["epoch"] = epoch;
    j["split"] = "valid";
    epochs << j.dump() << '\n';
    timing["epochs"].push_back({{"epoch", epoch}, {"valid_wall_clock_s", r.wall_clock_s}});
  };
  const auto started = std::chrono::steady_clock::now();
  auto result = train::fit(ds, config, hooks);
  log.close();
  epochs.close();

  model::save_checkpoint(dir / kBestCheckpoint, config, result.schema, result.best);
  model::save_checkpoint(dir / kLastCheckpoint, config, result.schema, result.last);

  const auto split = data::split_leave_one_out(ds);
  nlohmann::json summary = {{"format_version", 1},
                            {"variant", to_string(config.model.variant)},
                            {"steps", result.state.step},
                            {"epochs", config.train.epochs}};
  summary["best_epoch"] = result.state.best_epoch ? nlohmann::json(*result.state.best_epoch) : nlohmann::json(nullptr);
  if (!split.test.empty()) {
    const auto report =
        eval::evaluate(result.best, config.model, ds, split.test, result.attribute_slots, train::eval_options(config.train));
    summary["test"] = eval::to_json(report);
  }
  write_text(dir / kTestReport, summary.dump(2) + "\n");
  timing["total_wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_text(dir / kTiming, timing.dump(2) + "\n");
  out << summary.dump(2) << '\n';
  return kExitOk;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::optional<bool> exclude_seen;
};

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  if (a.split != "valid" && a.split != "test") throw ValidationError("--split must be 'valid' or 'test'");
  const auto ck = model::load_checkpoint(a.checkpoint);
  const auto ds = data::load_prepared(a.data);
  auto [schema, slots] = model::Schema::resolve(ds, ck.config.model);
  if (schema.item_vocab != ck.schema.item_vocab || schema.attribute_vocab != ck.schema.attribute_vocab) {
    throw ValidationError("checkpoint schema does not match the dataset");
  }
  const auto split = data::split_leave_one_out(ds);
  auto options = train::eval_options(ck.config.train);
  if (a.exclude_seen) options.exclude_seen = *a.exclude_seen;
  const auto& view = a.split == "valid" ? split.valid : split.test;
  const auto report = eval::evaluate(ck.params, ck.config.model, ds, view, slots, options);
  auto j = eval::to_json(report, true);
  j["split"] = a.split;
  out << j.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct RankArgs {
  std::size_t trials = 100;
  double rel_tol = numcore::kDefaultRankTolerance;
  std::uint64_t seed = 0;
  std::size_t n = 64;
  std::size_t d = 32;
  std::size_t heads = 2;
  std::vector<std::size_t> attribute_dims = {16};
  std::string checkpoint;
  std::string data;
  std::size_t samples = 32;
  std::string out;
};

inline nlohmann::json summary_json(const std::vector<diagnostics::RankRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : diagnostics::summarize(rows)) {
    arr.push_back({{"variant", to_string(s.variant)},
                   {"layer", s.layer},
                   {"head", s.head},
                   {"mean_rank", s.mean_rank},
                   {"max_rank", s.max_rank},
                   {"min_rank", s.min_rank},
                   {"trials", s.trials}});
  }
  return arr;
}

/// Random-initialisation profile always; trained profile when a checkpoint is given.
inline int cmd_diagnose_rank(const RankArgs& a, std::ostream& out) {
  if (a.trials == 0) throw ValidationError("--trials must be at least 1");
  if (!(a.rel_tol > 0.0 && a.rel_tol < 1.0)) throw ValidationError("--rel-tol must lie in (0, 1)");
  if (a.heads == 0 || a.d % a.heads != 0) throw ValidationError("--d must be divisible by --heads");
  for (auto dim : a.attribute_dims) {
    if (dim == 0 || dim % a.heads != 0) throw ValidationError("--attr-dim must be a positive multiple of --heads");
  }
  diagnostics::RankProfileOptions opt;
  opt.n = a.n;
  opt.d = a.d;
  opt.heads = a.heads;
  opt.attribute_dims = a.attribute_dims;
  opt.trials = a.trials;
  opt.rel_tol = a.rel_tol;
  opt.seed = a.seed;
  const auto random_rows = diagnostics::rank_profile(opt);
  std::string csv = diagnostics::rank_csv(random_rows);
  nlohmann::json summary = {{"format_version", 1}, {"random_init", summary_json(random_rows)}};
  if (!a.checkpoint.empty()) {
    if (a.data.empty()) throw ValidationError("--checkpoint requires --data");
    const auto ck = model::load_checkpoint(a.checkpoint);
    const auto ds = data::load_prepared(a.data);
    const auto trained = diagnostics::rank_profile_trained(ck, ds, a.samples, a.rel_tol);
    summary["trained"] = summary_json(trained);
    write_text(fs::path(a.out).replace_extension(".trained.csv"), diagnostics::rank_csv(trained));
  }
  write_text(a.out, csv);
  out << summary.dump(2) << '\n';
  return kExitOk;
}

struct GradArgs {
  std::string variant = "sasrec_f";
  std::string config;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::string out;
};

/// Configuration used by `diagnose grad` when no config file is given.
inline ModelConfig default_grad_config() {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 6;
  c.attributes = {{"category", 16}, {"brand", 16}};
  c.dropout = 0.0;
  return c;
}

inline int cmd_diagnose_grad(const GradArgs& a, std::ostream& out) {
  const Variant variant = parse_variant(a.variant);
  if (variant == Variant::sasrec) throw ValidationError("--variant must be one of sasrec_f, nova, dif");
  if (a.seeds == 0) throw ValidationError("--seeds must be at least 1");
  ModelConfig config = a.config.empty() ? default_grad_config() : load_config(a.config).model;
  nlohmann::json verdicts = nlohmann::json::array();
  bool all_equal = true;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    const auto v = diagnostics::gradient_rigidity_check(variant, config, a.seed + s);
    all_equal = all_equal && v.equal;
    verdicts.push_back(diagnostics::to_json(v));
  }
  const nlohmann::json doc = a.seeds == 1 ? verdicts.front()
                                          : nlohmann::json{{"format_version", 1},
                                                           {"variant", to_string(variant)},
                                                           {"equal", all_equal},
                                                           {"verdicts", verdicts}};
  if (!a.out.empty()) write_text(a.out, doc.dump(2) + "\n");
  out << doc.dump(2) << '\n';
  return kExitOk;
}

struct AttentionArgs {
  std::string checkpoint;
  std::string data;
  std::string user;
  std::string out;
};

inline int cmd_diagnose_attention(const AttentionArgs& a, std::ostream& out) {
  const auto ck = model::load_checkpoint(a.checkpoint);
  const auto ds = data::load_prepared(a.data);
  const auto lines = diagnostics::export_attention(ck, ds, a.user, a.out);
  out << nlohmann::json{{"format_version", 1}, {"user", a.user}, {"lines", lines}, {"out", a.out}}.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sequential recommendation with decoupled side-information attention"};
  app.require_subcommand(1);

  PrepareArgs prepare;
  auto* p = app.add_subcommand("prepare", "Ingest interactions and attributes into a binary cache");
  p->add_option("--interactions", prepare.interactions, "user_id<TAB>item_id<TAB>timestamp file")->required();
  p->add_option("--attributes", prepare.attributes, "JSON Lines item attributes");
  p->add_option("--out", prepare.out, "Output directory")->required();
  p->add_option("--min-occurrences", prepare.min_occurrences, "k-core threshold");

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", train_args.config)->required();
  t->add_option("--data", train_args.data, "Prepared dataset directory")->required();
  t->add_option("--out", train_args.out, "Run directory")->required();

  EvaluateArgs evaluate;
  bool include_seen = false;
  auto* e = app.add_subcommand("evaluate", "Full-ranking evaluation of a checkpoint");
  e->add_option("--checkpoint", evaluate.checkpoint)->required();
  e->add_option("--data", evaluate.data)->required();
  e->add_option("--split", evaluate.split)->check(CLI::IsMember({"valid", "test"}));
  e->add_flag("--include-seen", include_seen, "Keep previously seen items among the candidates");

  auto* d = app.add_subcommand("diagnose", "Rank, gradient and attention diagnostics");
  d->require_subcommand(1);
  RankArgs rank;
  auto* dr = d->add_subcommand("rank", "Numeric rank of per-head attention logits (CSV)");
  dr->add_option("--trials", rank.trials);
  dr->add_option("--rel-tol", rank.rel_tol);
  dr->add_option("--seed", rank.seed);
  dr->add_option("--n", rank.n);
  dr->add_option("--d", rank.d);
  dr->add_option("--heads", rank.heads);
  dr->add_option("--attr-dim", rank.attribute_dims, "Attribute embedding widths");
  dr->add_option("--checkpoint", rank.checkpoint);
  dr->add_option("--data", rank.data);
  dr->add_option("--samples", rank.samples);
  dr->add_option("--out", rank.out)->required();

  GradArgs grad;
  auto* dg = d->add_subcommand("grad", "Gradient rigidity verdict (JSON)");
  dg->add_option("--variant", grad.variant)->check(CLI::IsMember({"sasrec_f", "nova", "dif"}));
  dg->add_option("--config", grad.config);
  dg->add_option("--seed", grad.seed);
  dg->add_option("--seeds", grad.seeds, "Number of consecutive seeds");
  dg->add_option("--out", grad.out);

  AttentionArgs attention;
  auto* da = d->add_subcommand("attention", "Export attention matrices (JSON Lines)");
  da->add_option("--checkpoint", attention.checkpoint)->required();
  da->add_option("--data", attention.data)->required();
  da->add_option("--user", attention.user)->required();
  da->add_option("--out", attention.out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitValidation;
  }

  try {
    if (p->parsed()) return cmd_prepare(prepare, out);
    if (t->parsed()) return cmd_train(train_args, out);
    if (e->parsed()) {
      if (include_seen) evaluate.exclude_seen = false;
      return cmd_evaluate(evaluate, out);
    }
    if (dr->parsed()) return cmd_diagnose_rank(rank, out);
    if (dg->parsed()) return cmd_diagnose_grad(grad, out);
    if (da->parsed()) return cmd_diagnose_attention(attention, out);
  } catch (const ValidationError& ex) {
    err << "validation error: " << ex.what() << '\n';
    return kExitValidation;
  } catch (const ParseError& ex) {
    err << "validation error: " << ex.what() << '\n';
    return kExitValidation;
  } catch (const LookupError& ex) {
    err << "validation error: " << ex.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(std::move(args));
}

}  // namespace difsr::cli
