#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctxmem/ablation.hpp"
#include "ctxmem/checkpoint.hpp"
#include "ctxmem/config.hpp"
#include "ctxmem/corpus.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/evaluation.hpp"
#include "ctxmem/inference.hpp"
#include "ctxmem/pipeline.hpp"
#include "ctxmem/training.hpp"

namespace ctxmem {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitInternal = 4;

/// Runs `body`, mapping the library's error classes onto exit codes with a
/// one-line diagnostic on `err`.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IngestionError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

inline void write_documents(std::ostream& out, const std::vector<TextDocument>& docs) {
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : docs[d]) out << s << '\n';
  }
}

inline std::optional<double> parse_gate_override(const std::string& value) {
  if (value == "none") return std::nullopt;
  return detail::parse_number<double>("gate-override", value);
}

/// One vector per line: `token v1 v2 ...`. A `<unk>` line sets the unknown
/// vector, which is zero otherwise.
inline EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open embeddings " + path);
  EmbeddingTable t;
  std::string line;
  std::size_t lineno = 0, dim = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto fields = split_whitespace(line);
    if (fields.empty()) continue;
    std::vector<double> v;
    for (std::size_t i = 1; i < fields.size(); ++i) v.push_back(detail::parse_number<double>("embeddings", fields[i]));
    if (dim == 0) dim = v.size();
    if (v.empty() || v.size() != dim)
      throw IngestionError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values");
    if (fields[0] == "<unk>")
      t.unknown = std::move(v);
    else
      t.vectors[fields[0]] = std::move(v);
  }
  if (dim == 0) throw IngestionError(path + ": no vectors");
  if (t.unknown.empty()) t.unknown.assign(dim, 0.0);
  return t;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string source;
  std::string target;
  std::string output_dir;
  bool resume = false;
};

inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_config(args.config);
  const auto text = load_parallel_text(args.source, args.target);
  if (text.empty()) throw IngestionError("training corpus " + args.source + " is empty");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(args.output_dir, ec);
  if (ec) throw IngestionError("cannot create output directory " + args.output_dir + ": " + ec.message());
  const fs::path dir(args.output_dir);

  const auto data = prepare_training_data(text, cfg.bpe_merges);
  data.bpe.save((dir / kBpeFile).string());
  data.source_vocab.save((dir / kSourceVocabFile).string());
  data.target_vocab.save((dir / kTargetVocabFile).string());
  {
    std::ofstream cfg_out(dir / "config.txt", std::ios::binary);
    cfg_out << format_config(cfg);
  }

  ContextualTransformer<float> model(cfg.model(data.source_vocab.size(), data.target_vocab.size()), cfg.seed);
  Trainer<float> trainer(model, cfg, data.corpus);
  trainer.set_warning_stream(&err);
  const std::string ckpt = (dir / kCheckpointFile).string();
  if (args.resume && fs::exists(ckpt)) {
    const auto ck = load_checkpoint(ckpt);
    if (ck.source_vocab != data.source_vocab.size() || ck.target_vocab != data.target_vocab.size())
      throw CheckpointError(ckpt + ": vocabulary sizes differ from this corpus");
    restore_training(trainer, ck);
  }

  out << "step\tloss\tlr\n";
  char line[96];
  while (trainer.global_step() < cfg.train_steps) {
    const double loss = trainer.step();
    std::snprintf(line, sizeof(line), "%llu\t%.6f\t%.6e\n",
                  static_cast<unsigned long long>(trainer.global_step()), loss, trainer.last_lr());
    out << line << std::flush;
    if (cfg.checkpoint_every > 0 && trainer.global_step() % cfg.checkpoint_every == 0 &&
        trainer.global_step() < cfg.train_steps)
      save_checkpoint(ckpt, make_checkpoint(trainer));
  }
  save_checkpoint(ckpt, make_checkpoint(trainer));
  return kExitOk;
}

// ---------------------------------------------------------------- translate

struct TranslateArgs {
  std::string checkpoint;
  std::string input;
  std::string output;  // empty: standard output
  std::optional<std::string> context_mode;
  std::optional<std::size_t> memory_size;
  std::optional<std::string> gate_override;
  std::size_t beam = 4;
  double alpha = 0.6;
  std::size_t max_len = 128;
  std::size_t threads = 1;
};

inline ContextMode decoding_mode(const std::optional<std::string>& flag, const RunConfig& trained) {
  const ContextMode mode = flag ? parse_context_mode(*flag) : trained.context_mode;
  if (mode == ContextMode::random)
    throw ConfigError(flag ? "--context-mode random is a training control and cannot be used for decoding"
                           : "checkpoint was trained with random context; pass --context-mode previous or next");
  return mode;
}

template <class T>
void apply_overrides(TranslationSystem<T>& sys, const std::optional<std::size_t>& memory_size,
                     const std::optional<std::string>& gate_override) {
  if (memory_size) sys.model.set_memory_size(*memory_size);
  if (gate_override) sys.model.set_gate_override(parse_gate_override(*gate_override));
}

inline int cmd_translate(const TranslateArgs& args, std::ostream& out, std::ostream&) {
  auto sys = load_system<float>(args.checkpoint);
  const ContextMode mode = decoding_mode(args.context_mode, sys.config);
  apply_overrides(sys, args.memory_size, args.gate_override);
  if (args.beam == 0) throw ConfigError("--beam must be at least 1");
  if (args.max_len == 0) throw ConfigError("--max-len must be at least 1");
  const auto docs = load_documents(args.input);
  const auto translations = translate_text(sys, docs, mode, DecodeOptions{args.beam, args.alpha, args.max_len}, args.threads);
  if (args.output.empty())
    write_documents(out, translations);
  else
    write_documents(args.output, translations);
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string outputs;
  std::string references;
  std::string metric = "all";
  std::string window = "previous";
  std::size_t m = 3;
  std::optional<std::string> dict;
  std::optional<std::string> stopwords;
  std::optional<std::string> sources;
  std::optional<std::string> checkpoint;
  std::optional<std::string> embeddings;
  std::string unk = "<unk>";
};

inline int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err) {
  EvaluationSettings s;
  s.metric = parse_metric(args.metric);
  s.window = parse_context_mode(args.window);
  s.m = args.m;
  s.stopwords_path = args.stopwords;
  s.dictionary_path = args.dict;
  s.unk_token = args.unk;
  const bool needs_coherence = wants(s.metric, Metric::coherence);
  const bool needs_sources = wants(s.metric, Metric::disambiguation);
  if (wants(s.metric, Metric::consistency) && !s.stopwords_path)
    throw ConfigError("metric consistency requires --stopwords");
  if (needs_sources && !s.dictionary_path) throw ConfigError("metric disambiguation requires --dict");
  if (needs_sources && !args.sources) throw ConfigError("metric disambiguation requires --sources");
  if (needs_coherence && !args.checkpoint && !args.embeddings)
    throw ConfigError("metric coherence requires --checkpoint or --embeddings");

  const auto outputs_text = load_documents(args.outputs);
  const auto refs = tokenize_documents(load_documents(args.references));
  std::optional<TokenDocuments> sources;
  if (needs_sources) sources = tokenize_documents(load_documents(*args.sources));

  const TokenDocuments outputs = tokenize_documents(outputs_text);
  std::optional<EmbeddingTable> table;
  if (needs_coherence) {
    if (args.embeddings) {
      table = load_embeddings(*args.embeddings);
      s.embeddings_source = *args.embeddings;
    } else {
      auto sys = load_system<float>(*args.checkpoint);
      table = word_embedding_table(sys, outputs_text);
      s.embeddings_source = *args.checkpoint + " target embedding";
    }
  }

  auto report = evaluate(outputs, refs, sources ? &*sources : nullptr, table ? &*table : nullptr, s, &err);
  out << report.to_json().dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string kind;
  std::string grid;
  std::vector<std::string> checkpoints;
  std::string sources;
  std::string references;
  std::string output;  // empty: standard output
  std::optional<std::string> context_mode;
  std::size_t beam = 4;
  double alpha = 0.6;
  std::size_t max_len = 128;
  std::size_t threads = 1;
  std::optional<std::string> stopwords;
  std::optional<std::string> dict;
  std::string window = "previous";
  std::size_t m = 3;
};

inline int cmd_ablate(const AblateArgs& args, std::ostream& out, std::ostream& err) {
  const SweepKind kind = parse_sweep_kind(args.kind);
  const auto grid = parse_grid(args.grid);
  if (args.checkpoints.empty()) throw ConfigError("--checkpoint is required");
  if (overridable(kind) && args.checkpoints.size() != 1)
    throw ConfigError(to_string(kind) + " sweeps override a single shared checkpoint");

  SweepData data;
  data.decode = DecodeOptions{args.beam, args.alpha, args.max_len};
  data.threads = args.threads;
  data.window = parse_context_mode(args.window);
  data.window_size = args.m;
  if (args.stopwords) data.stopwords = load_stopwords(*args.stopwords);
  if (args.dict) data.dictionary = load_dictionary(*args.dict, &err);

  std::vector<std::unique_ptr<TranslationSystem<float>>> owned;
  std::vector<TranslationSystem<float>*> systems;
  for (const auto& path : args.checkpoints) {
    owned.push_back(std::make_unique<TranslationSystem<float>>(load_system<float>(path)));
    systems.push_back(owned.back().get());
  }
  if (kind == SweepKind::context_mode) {
    data.mode = ContextMode::previous;
  } else {
    data.mode = decoding_mode(args.context_mode, systems[0]->config);
  }
  data.sources = load_documents(args.sources);
  data.references = load_documents(args.references);

  const auto rows = ablation_sweep(kind, grid, systems, data, &err);
  if (args.output.empty()) {
    write_sweep_tsv(out, kind, rows);
  } else {
    std::ofstream f(args.output, std::ios::binary);
    if (!f) throw IngestionError("cannot write " + args.output);
    write_sweep_tsv(f, kind, rows);
  }
  return kExitOk;
}

// ---------------------------------------------------------------- entry point

/// Parses `args` (program name excluded) and runs the selected command.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Document-level translation with a contextual memory network", "ctxmem"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write it to an output directory");
  t->add_option("--config", train.config, "Run configuration (key = value)")->required();
  t->add_option("--source", train.source, "Source-side corpus")->required();
  t->add_option("--target", train.target, "Target-side corpus")->required();
  t->add_option("--output", train.output_dir, "Output directory")->required();
  t->add_flag("--resume", train.resume, "Continue from output/model.ckpt when present");

  TranslateArgs tr;
  std::size_t tr_memory = 0;
  auto* x = app.add_subcommand("translate", "Translate a document corpus");
  x->add_option("--checkpoint", tr.checkpoint, "model.ckpt inside a training output directory")->required();
  x->add_option("--input", tr.input, "Source documents")->required();
  x->add_option("--output", tr.output, "Output file (default: standard output)");
  auto* tr_mode = x->add_option("--context-mode", "previous or next");
  auto* tr_mem = x->add_option("--memory-size", tr_memory, "Number of context sentences");
  auto* tr_gate = x->add_option("--gate-override", "Constant gate in [0,1], or none");
  x->add_option("--beam", tr.beam, "Beam size")->capture_default_str();
  x->add_option("--alpha", tr.alpha, "Length penalty exponent")->capture_default_str();
  x->add_option("--max-len", tr.max_len, "Maximum output length in subwords")->capture_default_str();
  x->add_option("--threads", tr.threads, "Decoding workers")->capture_default_str();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score translations against references");
  e->add_option("--outputs", ev.outputs, "Translations")->required();
  e->add_option("--references", ev.references, "References")->required();
  e->add_option("--metric", ev.metric, "bleu, consistency, disambiguation, coherence or all")->capture_default_str();
  e->add_option("--window", ev.window, "Consistency window: previous or next")->capture_default_str();
  e->add_option("--m", ev.m, "Consistency window size")->capture_default_str();
  auto* e_dict = e->add_option("--dict", "Ambiguous-word dictionary");
  auto* e_stop = e->add_option("--stopwords", "Stopword list");
  auto* e_src = e->add_option("--sources", "Source documents (for disambiguation)");
  auto* e_ck = e->add_option("--checkpoint", "Checkpoint whose target embedding scores coherence");
  auto* e_emb = e->add_option("--embeddings", "Embedding file for coherence");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Run an ablation sweep");
  a->add_option("--kind", ab.kind, "gate_constant, memory_size, context_mode, merge_strategy or rnn_core")->required();
  a->add_option("--grid", ab.grid, "start:stop:step or a comma-separated list")->required();
  a->add_option("--checkpoint", ab.checkpoints, "Checkpoint(s); one per grid point for retrained kinds")->required();
  a->add_option("--sources", ab.sources, "Source documents")->required();
  a->add_option("--references", ab.references, "Reference documents")->required();
  a->add_option("--output", ab.output, "TSV file (default: standard output)");
  auto* a_mode = a->add_option("--context-mode", "previous or next");
  a->add_option("--beam", ab.beam, "Beam size")->capture_default_str();
  a->add_option("--alpha", ab.alpha, "Length penalty exponent")->capture_default_str();
  a->add_option("--max-len", ab.max_len, "Maximum output length in subwords")->capture_default_str();
  a->add_option("--threads", ab.threads, "Decoding workers")->capture_default_str();
  auto* a_stop = a->add_option("--stopwords", "Stopword list (adds consistency)");
  auto* a_dict = a->add_option("--dict", "Ambiguous-word dictionary (adds disambiguation)");
  a->add_option("--window", ab.window, "Consistency window")->capture_default_str();
  a->add_option("--m", ab.m, "Consistency window size")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& pe) {
    err << "config error: " << pe.what() << '\n';
    return kExitConfig;
  }

  auto opt = [](CLI::Option* o) -> std::optional<std::string> {
    if (o->count() == 0) return std::nullopt;
    return o->as<std::string>();
  };
  return guarded(err, [&]() -> int {
    if (*t) return cmd_train(train, out, err);
    if (*x) {
      tr.context_mode = opt(tr_mode);
      if (tr_mem->count()) tr.memory_size = tr_memory;
      tr.gate_override = opt(tr_gate);
      return cmd_translate(tr, out, err);
    }
    if (*e) {
      ev.dict = opt(e_dict);
      ev.stopwords = opt(e_stop);
      ev.sources = opt(e_src);
      ev.checkpoint = opt(e_ck);
      ev.embeddings = opt(e_emb);
      return cmd_evaluate(ev, out, err);
    }
    ab.context_mode = opt(a_mode);
    ab.stopwords = opt(a_stop);
    ab.dict = opt(a_dict);
    return cmd_ablate(ab, out, err);
  });
}

}  // namespace ctxmem
