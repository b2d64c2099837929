#pragma once

#include "exitlm/common.hpp"
#include "exitlm/tokenizer.hpp"

#include <array>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace exitlm {

enum class Split { kTrain, kValidation, kTest };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct CodeSample {
  std::string source_path;
  TokenSeq token_ids;
  Split split = Split::kTrain;
};

struct ContextTarget {
  TokenSeq context;
  TokenSeq target;
  double context_fraction = 0.0;
};

struct IngestOptions {
  std::set<std::string> extensions;      // matched against path extension, e.g. ".py"
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  int min_tokens = 32;                   // files below this are dropped
};

struct Corpus {
  std::vector<CodeSample> samples;
  int dropped_files = 0;
  std::uint64_t seed = 0;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};

  std::vector<const CodeSample*> split(Split s) const;
};

// Scans dir recursively, tokenizes matching files at byte level and assigns
// train/validation/test splits. Deterministic for fixed directory contents
// and seed: paths are sorted before the seeded shuffle.
Corpus ingest(const std::filesystem::path& dir, const IngestOptions& opts);

// First floor(fraction*len) tokens as context (left-truncated to
// max_context, keeping the most recent tokens), the next max_new tokens as
// target (fewer if the sample ends).
ContextTarget make_context_target(const CodeSample& sample, double fraction,
                                  int max_new, int max_context);

// Concatenates samples with EOS separators and chunks into fixed-size
// blocks; the final partial block is padded with PAD.
std::vector<TokenSeq> pack_training_blocks(
    const std::vector<const CodeSample*>& samples, int block_len);

// Corpus manifest: JSON file listing {path, split, token_count} per sample
// plus the ingest settings, so downstream stages reuse one split assignment.
void write_manifest(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_manifest(const std::filesystem::path& path);

}  // namespace exitlm
