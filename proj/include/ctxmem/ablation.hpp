#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/config.hpp"
#include "ctxmem/evaluation.hpp"
#include "ctxmem/inference.hpp"
#include "ctxmem/pipeline.hpp"

namespace ctxmem {

enum class SweepKind { gate_constant, memory_size, context_mode, merge_strategy, rnn_core };

inline SweepKind parse_sweep_kind(std::string_view name) {
  if (name == "gate_constant") return SweepKind::gate_constant;
  if (name == "memory_size") return SweepKind::memory_size;
  if (name == "context_mode") return SweepKind::context_mode;
  if (name == "merge_strategy") return SweepKind::merge_strategy;
  if (name == "rnn_core") return SweepKind::rnn_core;
  throw ConfigError("unknown ablation kind '" + std::string(name) + "'");
}

inline std::string to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::gate_constant: return "gate_constant";
    case SweepKind::memory_size: return "memory_size";
    case SweepKind::context_mode: return "context_mode";
    case SweepKind::merge_strategy: return "merge_strategy";
    case SweepKind::rnn_core: return "rnn_core";
  }
  return "?";
}

/// Only these kinds can be applied to a single trained checkpoint.
inline bool overridable(SweepKind kind) {
  return kind == SweepKind::gate_constant || kind == SweepKind::memory_size ||
         kind == SweepKind::context_mode;
}

/// Parses `start:stop:step` ranges or comma-separated lists. Ranges are
/// generated as start + i*step, printed with the step's decimal precision.
inline std::vector<std::string> parse_grid(std::string_view spec) {
  std::vector<std::string> out;
  const std::string s(spec);
  if (s.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::size_t b = 0;
    for (std::size_t e; (e = s.find(':', b)) != std::string::npos; b = e + 1) parts.push_back(s.substr(b, e - b));
    parts.push_back(s.substr(b));
    if (parts.size() != 3) throw ConfigError("grid range must be start:stop:step, got '" + s + "'");
    const double start = detail::parse_number<double>("grid", parts[0]);
    const double stop = detail::parse_number<double>("grid", parts[1]);
    const double step = detail::parse_number<double>("grid", parts[2]);
    if (!(step > 0) || stop < start) throw ConfigError("grid range '" + s + "' is empty");
    std::size_t decimals = 0;
    if (auto dot = parts[2].find('.'); dot != std::string::npos) decimals = parts[2].size() - dot - 1;
    const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < n; ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.*f", static_cast<int>(decimals), start + static_cast<double>(i) * step);
      out.emplace_back(buf);
    }
    return out;
  }
  std::size_t b = 0;
  for (std::size_t e = 0; e != std::string::npos; b = e + 1) {
    e = s.find(',', b);
    auto item = detail::trim(std::string_view(s).substr(b, e == std::string::npos ? std::string::npos : e - b));
    if (!item.empty()) out.push_back(std::move(item));
  }
  if (out.empty()) throw ConfigError("empty grid");
  return out;
}

struct SweepRow {
  std::string setting;
  EvaluationReport report;
};

struct SweepData {
  std::vector<TextDocument> sources;
  std::vector<TextDocument> references;
  ContextMode mode = ContextMode::previous;
  DecodeOptions decode;
  std::size_t threads = 1;
  std::optional<StopwordList> stopwords;
  std::optional<std::vector<DictionaryEntry>> dictionary;
  ContextMode window = ContextMode::previous;
  std::size_t window_size = 3;
};

/// BLEU and coherence always; consistency and disambiguation when their
/// resources are present.
template <class T>
EvaluationReport score_translations(const TranslationSystem<T>& system, const std::vector<TextDocument>& outputs,
                                    const SweepData& data, std::ostream* warnings) {
  const auto out_tokens = tokenize_documents(outputs);
  EvaluationReport r;
  r.bleu = bleu(flatten(out_tokens), flatten(tokenize_documents(data.references)));
  if (data.stopwords) {
    r.consistency = consistency(out_tokens, {data.window, data.window_size, data.stopwords});
    r.metadata["window_mode"] = to_string(data.window);
    r.metadata["window_size"] = data.window_size;
  }
  if (data.dictionary)
    r.disambiguation_std = disambiguation(flatten(out_tokens), flatten(tokenize_documents(data.sources)), *data.dictionary);
  r.coherence = coherence(out_tokens, word_embedding_table(system, outputs), warnings);
  return r;
}

/// Evaluates each grid point. Overridable kinds take one shared system;
/// merge_strategy and rnn_core need one trained system per grid point.
template <class T>
std::vector<SweepRow> ablation_sweep(SweepKind kind, const std::vector<std::string>& grid,
                                     const std::vector<TranslationSystem<T>*>& systems, const SweepData& data,
                                     std::ostream* warnings = nullptr) {
  if (grid.empty()) throw ConfigError("empty ablation grid");
  if (systems.empty()) throw ConfigError("ablation needs at least one checkpoint");
  std::vector<SweepRow> rows;
  if (overridable(kind)) {
    if (systems.size() != 1)
      throw ConfigError(to_string(kind) + " sweeps override a single shared checkpoint");
    auto& sys = *systems[0];
    const auto saved_gate = sys.model.gate_override();
    const auto saved_m = sys.model.memory_size();
    for (const auto& value : grid) {
      ContextMode mode = data.mode;
      try {
        if (kind == SweepKind::gate_constant) {
          sys.model.set_gate_override(detail::parse_number<double>("gate_constant", value));
        } else if (kind == SweepKind::memory_size) {
          sys.model.set_memory_size(detail::parse_number<std::size_t>("memory_size", value));
        } else {
          mode = parse_context_mode(value);
        }
        const auto outputs = translate_text(sys, data.sources, mode, data.decode, data.threads);
        rows.push_back({value, score_translations(sys, outputs, data, rows.empty() ? warnings : nullptr)});
      } catch (...) {
        sys.model.set_gate_override(saved_gate);
        sys.model.set_memory_size(saved_m);
        throw;
      }
      sys.model.set_gate_override(saved_gate);
      sys.model.set_memory_size(saved_m);
    }
    return rows;
  }
  if (systems.size() != grid.size()) {
    throw ConfigError(to_string(kind) + " cannot be overridden at evaluation time; it needs a trained checkpoint per grid point (" +
                      std::to_string(grid.size()) + " settings, " + std::to_string(systems.size()) + " checkpoints)");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& merge = systems[i]->config.memory.merge;
    const std::string trained = kind == SweepKind::merge_strategy ? to_string(merge.kind) : to_string(merge.core);
    const std::string wanted =
        kind == SweepKind::merge_strategy ? to_string(parse_merge_kind(grid[i])) : to_string(parse_rnn_core(grid[i]));
    if (trained != wanted)
      throw ConfigError("checkpoint " + std::to_string(i) + " was trained with " + to_string(kind) + " " + trained +
                        ", grid asks for " + wanted);
    const auto outputs = translate_text(*systems[i], data.sources, data.mode, data.decode, data.threads);
    rows.push_back({grid[i], score_translations(*systems[i], outputs, data, rows.empty() ? warnings : nullptr)});
  }
  return rows;
}

inline void write_sweep_tsv(std::ostream& out, SweepKind kind, const std::vector<SweepRow>& rows) {
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return std::string(buf);
  };
  out << to_string(kind) << "\tbleu\tconsistency\tdisambiguation_std\tcoherence\n";
  for (const auto& r : rows) {
    out << r.setting << '\t' << cell(r.report.bleu) << '\t' << cell(r.report.consistency) << '\t'
        << cell(r.report.disambiguation_std) << '\t' << cell(r.report.coherence) << '\n';
  }
}

}  // namespace ctxmem
