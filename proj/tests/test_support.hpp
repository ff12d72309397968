#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctxmem/config.hpp"
#include "ctxmem/corpus.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem::testing_support {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ctxmem") {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::string(info->test_suite_name()) + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name, const std::string& content) const {
    const auto p = path_ / name;
    std::ofstream(p, std::ios::binary) << content;
    return p.string();
  }
  std::string path(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& root() const { return path_; }

 private:
  fs::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Id-level corpus: target ids are the source ids shifted by `offset`.
inline DocumentCorpus id_corpus(const std::vector<std::vector<std::vector<int>>>& docs, int offset = 0) {
  DocumentCorpus corpus;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::vector<SentencePair> doc;
    for (std::size_t p = 0; p < docs[d].size(); ++p) {
      SentencePair pair;
      pair.source = docs[d][p];
      pair.source.push_back(kEosId);
      for (int id : docs[d][p]) pair.target.push_back(id + offset);
      pair.target.push_back(kEosId);
      pair.doc_index = d;
      pair.position = p;
      doc.push_back(std::move(pair));
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

inline RunConfig toy_run_config(std::size_t m = 2, MergeKind kind = MergeKind::contextual_rnn) {
  RunConfig c;
  c.transformer.num_layers = 1;
  c.transformer.model_dim = 16;
  c.transformer.num_heads = 2;
  c.transformer.ffn_dim = 32;
  c.transformer.dropout = 0.1;
  c.transformer.max_positions = 64;
  c.memory.memory_size = m;
  c.memory.merge.kind = kind;
  c.context_mode = ContextMode::previous;
  c.label_smoothing = 0.1;
  c.warmup_steps = 10;
  c.train_steps = 20;
  c.batch_tokens = 12;
  c.seed = 42;
  c.bpe_merges = 50;
  return c;
}

}  // namespace ctxmem::testing_support
