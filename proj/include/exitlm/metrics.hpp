#pragma once

#include "exitlm/common.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace exitlm {

using WordSeq = std::vector<std::string>;

// Splits text for scoring: runs of [A-Za-z0-9_] form one token, every other
// non-space byte is a single-character token, whitespace only separates.
WordSeq split_words(const std::string& text);

// LCS-based F-measure with beta = 1. Empty candidate scores 0.
double rouge_l(const WordSeq& candidate, const WordSeq& reference);

// BLEU for one candidate against one or more references: geometric mean of
// clipped n-gram precisions (n = 1..max_n) times the brevity penalty.
// Smoothing is fixed: when the clipped match count is zero for some n >= 2,
// it becomes 1/(total+1); a unigram miss still scores 0. Orders with no
// candidate n-grams (candidate shorter than n) are left out of the mean.
double bleu(const WordSeq& candidate, const std::vector<WordSeq>& references,
            int max_n = 4);
double bleu(const WordSeq& candidate, const WordSeq& reference, int max_n = 4);

// Reduced CodeBLEU: 0.5 * bleu + 0.5 * keyword-weighted n-gram precision,
// where n-grams containing a keyword token count keyword_weight times.
// The syntax/dataflow submetrics of full CodeBLEU are intentionally absent;
// with keyword_weight = 1 this equals plain bleu. An empty keyword set
// falls back to bleu and reports a warning through the optional flag.
double codebleu_lite(const WordSeq& candidate, const WordSeq& reference,
                     const std::set<std::string>& keywords,
                     double keyword_weight = 5.0, int max_n = 4,
                     bool* used_fallback = nullptr);

std::set<std::string> python_keywords();
std::set<std::string> load_keyword_file(const std::filesystem::path& path);

// Deterministic energy stand-in, in layer-cost units.
struct EnergyCosts {
  double per_layer = 1.0;
  double head = 0.15;
  double controller = 0.05;
};

// Sum over tokens of exit_layer * per_layer + head + consults * controller.
double energy_proxy(const std::vector<int>& per_token_exit_layer,
                    const std::vector<int>& per_token_consults,
                    const EnergyCosts& costs);

}  // namespace exitlm
