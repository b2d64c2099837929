#include "exitlm/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

namespace exitlm {

WordSeq split_words(const std::string& text) {
  WordSeq out;
  std::string word;
  auto flush = [&]() {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '_') {
      word.push_back(static_cast<char>(c));
    } else {
      flush();
      if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return out;
}

double rouge_l(const WordSeq& candidate, const WordSeq& reference) {
  EXITLM_CHECK(!reference.empty(), "rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const int n = static_cast<int>(candidate.size());
  const int m = static_cast<int>(reference.size());
  std::vector<int> prev(m + 1, 0), curr(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      curr[j] = candidate[i - 1] == reference[j - 1]
                    ? prev[j - 1] + 1
                    : std::max(prev[j], curr[j - 1]);
    }
    std::swap(prev, curr);
  }
  const double lcs = prev[m];
  if (lcs == 0.0) return 0.0;
  const double p = lcs / n;
  const double r = lcs / m;
  return 2.0 * p * r / (p + r);
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const WordSeq& words, int n) {
  NgramCounts counts;
  const int len = static_cast<int>(words.size());
  for (int i = 0; i + n <= len; ++i) {
    counts[std::vector<std::string>(words.begin() + i, words.begin() + i + n)]++;
  }
  return counts;
}

}  // namespace

double bleu(const WordSeq& candidate, const std::vector<WordSeq>& references,
            int max_n) {
  EXITLM_CHECK(!references.empty(), "bleu: no references");
  for (const auto& r : references) EXITLM_CHECK(!r.empty(), "bleu: empty reference");
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  int used_orders = 0;
  for (int n = 1; n <= max_n; ++n) {
    NgramCounts cand = count_ngrams(candidate, n);
    NgramCounts best_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, cnt] : count_ngrams(ref, n)) {
        auto& slot = best_ref[gram];
        slot = std::max(slot, cnt);
      }
    }
    double matches = 0.0, total = 0.0;
    for (const auto& [gram, cnt] : cand) {
      total += cnt;
      auto it = best_ref.find(gram);
      if (it != best_ref.end()) matches += std::min(cnt, it->second);
    }
    if (total == 0.0) continue;  // candidate shorter than n
    if (matches == 0.0) {
      if (n == 1) return 0.0;
      matches = 1.0;
      total += 1.0;
    }
    log_sum += std::log(matches / total);
    ++used_orders;
  }
  if (used_orders == 0) return 0.0;
  const double cand_len = static_cast<double>(candidate.size());
  double ref_len = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    double len = static_cast<double>(ref.size());
    if (std::abs(len - cand_len) < std::abs(ref_len - cand_len)) ref_len = len;
  }
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / used_orders);
}

double bleu(const WordSeq& candidate, const WordSeq& reference, int max_n) {
  return bleu(candidate, std::vector<WordSeq>{reference}, max_n);
}

double codebleu_lite(const WordSeq& candidate, const WordSeq& reference,
                     const std::set<std::string>& keywords,
                     double keyword_weight, int max_n, bool* used_fallback) {
  const double plain = bleu(candidate, reference, max_n);
  if (used_fallback) *used_fallback = keywords.empty();
  if (keywords.empty()) return plain;
  if (candidate.empty()) return 0.0;

  auto gram_weight = [&](const std::vector<std::string>& gram) {
    for (const auto& tok : gram) {
      if (keywords.count(tok)) return keyword_weight;
    }
    return 1.0;
  };

  double log_sum = 0.0;
  int used_orders = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    NgramCounts cand = count_ngrams(candidate, n);
    NgramCounts ref = count_ngrams(reference, n);
    double matches = 0.0, total = 0.0;
    for (const auto& [gram, cnt] : cand) {
      const double w = gram_weight(gram);
      total += w * cnt;
      auto it = ref.find(gram);
      if (it != ref.end()) matches += w * std::min(cnt, it->second);
    }
    if (total == 0.0) continue;
    if (matches == 0.0) {
      if (n == 1) {
        zero = true;
        break;
      }
      matches = 1.0;
      total += 1.0;
    }
    log_sum += std::log(matches / total);
    ++used_orders;
  }
  const double cand_len = static_cast<double>(candidate.size());
  const double ref_len = static_cast<double>(reference.size());
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  const double weighted =
      (zero || used_orders == 0) ? 0.0 : bp * std::exp(log_sum / used_orders);
  return 0.5 * plain + 0.5 * weighted;
}

std::set<std::string> python_keywords() {
  return {"False",  "None",   "True",    "and",    "as",     "assert", "async",
          "await",  "break",  "class",   "continue", "def",  "del",    "elif",
          "else",   "except", "finally", "for",    "from",   "global", "if",
          "import", "in",     "is",      "lambda", "nonlocal", "not",  "or",
          "pass",   "raise",  "return",  "try",    "while",  "with",   "yield",
          "self"};
}

std::set<std::string> load_keyword_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  EXITLM_CHECK(in.good(), "cannot open keyword file: " + path.string());
  std::set<std::string> out;
  std::string word;
  while (in >> word) out.insert(word);
  return out;
}

double energy_proxy(const std::vector<int>& per_token_exit_layer,
                    const std::vector<int>& per_token_consults,
                    const EnergyCosts& costs) {
  EXITLM_CHECK(costs.per_layer >= 0 && costs.head >= 0 && costs.controller >= 0,
               "energy costs must be non-negative");
  EXITLM_CHECK(per_token_exit_layer.size() == per_token_consults.size(),
               "energy_proxy: trace length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < per_token_exit_layer.size(); ++i) {
    total += per_token_exit_layer[i] * costs.per_layer + costs.head +
             per_token_consults[i] * costs.controller;
  }
  return total;
}

}  // namespace exitlm
