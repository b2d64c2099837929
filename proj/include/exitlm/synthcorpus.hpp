#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace exitlm {

// Writes a deterministic corpus of small Python-like source files, used by
// the test suites and as a ready-made demo corpus. Files mix short local
// idioms (keywords, indentation) with longer-range structure (identifiers
// declared once and reused later in the file).
struct SynthCorpusOptions {
  int n_files = 240;
  std::uint64_t seed = 2024;
  std::string extension = ".py";
};

void write_synthetic_corpus(const std::filesystem::path& dir,
                            const SynthCorpusOptions& opts);

// One generated file's text (deterministic in (seed, index)).
std::string synthetic_file_text(std::uint64_t seed, int index);

}  // namespace exitlm
