#include "exitlm/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace exitlm {

namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "validation") return Split::kValidation;
  if (name == "test") return Split::kTest;
  throw Error("unknown split name: " + name);
}

std::vector<const CodeSample*> Corpus::split(Split s) const {
  std::vector<const CodeSample*> out;
  for (const auto& sample : samples) {
    if (sample.split == s) out.push_back(&sample);
  }
  return out;
}

static std::string read_file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXITLM_CHECK(in.good(), "cannot open file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Corpus ingest(const fs::path& dir, const IngestOptions& opts) {
  EXITLM_CHECK(fs::exists(dir) && fs::is_directory(dir),
               "corpus directory does not exist: " + dir.string());
  double ratio_sum = opts.split_ratios[0] + opts.split_ratios[1] + opts.split_ratios[2];
  EXITLM_CHECK(std::abs(ratio_sum - 1.0) <= 1e-9, "split ratios must sum to 1");

  std::vector<fs::path> paths;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (!opts.extensions.empty() &&
        opts.extensions.count(entry.path().extension().string()) == 0) {
      continue;
    }
    paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());

  ByteTokenizer tokenizer;
  Corpus corpus;
  corpus.seed = opts.seed;
  corpus.split_ratios = opts.split_ratios;
  for (const auto& p : paths) {
    TokenSeq ids = tokenizer.encode(read_file_bytes(p));
    if (static_cast<int>(ids.size()) < opts.min_tokens) {
      ++corpus.dropped_files;
      continue;
    }
    CodeSample sample;
    sample.source_path = p.string();
    sample.token_ids = std::move(ids);
    corpus.samples.push_back(std::move(sample));
  }
  EXITLM_CHECK(!corpus.samples.empty(), "empty corpus");

  // Split assignment: seeded shuffle of sample indices, then contiguous
  // slices of sizes floor(r0*n), floor(r1*n), remainder.
  const int n = static_cast<int>(corpus.samples.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opts.seed);
  std::shuffle(order.begin(), order.end(), rng);
  int n_train = static_cast<int>(std::floor(opts.split_ratios[0] * n));
  int n_val = static_cast<int>(std::floor(opts.split_ratios[1] * n));
  for (int i = 0; i < n; ++i) {
    Split s = i < n_train                ? Split::kTrain
              : i < n_train + n_val      ? Split::kValidation
                                         : Split::kTest;
    corpus.samples[order[i]].split = s;
  }
  return corpus;
}

ContextTarget make_context_target(const CodeSample& sample, double fraction,
                                  int max_new, int max_context) {
  EXITLM_CHECK(fraction > 0.0 && fraction < 1.0, "fraction must be in (0,1)");
  EXITLM_CHECK(max_new >= 1 && max_context >= 1, "max_new and max_context must be positive");
  const int len = static_cast<int>(sample.token_ids.size());
  const int ctx_len = static_cast<int>(std::floor(fraction * len));
  if (ctx_len < 1 || ctx_len >= len) {
    throw Error("insufficient tokens in sample " + sample.source_path);
  }
  ContextTarget out;
  out.context_fraction = fraction;
  const int ctx_begin = std::max(0, ctx_len - max_context);
  out.context.assign(sample.token_ids.begin() + ctx_begin,
                     sample.token_ids.begin() + ctx_len);
  const int tgt_end = std::min(len, ctx_len + max_new);
  out.target.assign(sample.token_ids.begin() + ctx_len,
                    sample.token_ids.begin() + tgt_end);
  return out;
}

std::vector<TokenSeq> pack_training_blocks(
    const std::vector<const CodeSample*>& samples, int block_len) {
  EXITLM_CHECK(block_len >= 2, "block_len must be >= 2");
  std::vector<TokenSeq> blocks;
  TokenSeq current;
  current.reserve(block_len);
  auto push_token = [&](TokenId id) {
    current.push_back(id);
    if (static_cast<int>(current.size()) == block_len) {
      blocks.push_back(current);
      current.clear();
    }
  };
  for (const CodeSample* sample : samples) {
    for (TokenId id : sample->token_ids) push_token(id);
    push_token(ByteTokenizer::kEos);
  }
  if (!current.empty()) {
    current.resize(block_len, ByteTokenizer::kPad);
    blocks.push_back(current);
  }
  return blocks;
}

void write_manifest(const Corpus& corpus, const fs::path& path) {
  json j;
  j["format_version"] = 1;
  j["seed"] = corpus.seed;
  j["split_ratios"] = corpus.split_ratios;
  j["dropped_files"] = corpus.dropped_files;
  json files = json::array();
  for (const auto& s : corpus.samples) {
    files.push_back({{"path", s.source_path},
                     {"split", split_name(s.split)},
                     {"token_count", s.token_ids.size()}});
  }
  j["files"] = std::move(files);
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

Corpus load_manifest(const fs::path& path) {
  std::ifstream in(path);
  EXITLM_CHECK(in.good(), "cannot open manifest: " + path.string() +
                              " (run `exitlm ingest` first)");
  json j = json::parse(in);
  Corpus corpus;
  corpus.seed = j.value("seed", 0ULL);
  if (j.contains("split_ratios")) {
    for (int i = 0; i < 3; ++i) corpus.split_ratios[i] = j["split_ratios"][i];
  }
  corpus.dropped_files = j.value("dropped_files", 0);
  ByteTokenizer tokenizer;
  for (const auto& f : j.at("files")) {
    CodeSample sample;
    sample.source_path = f.at("path").get<std::string>();
    sample.split = split_from_name(f.at("split").get<std::string>());
    sample.token_ids = tokenizer.encode(read_file_bytes(sample.source_path));
    EXITLM_CHECK(sample.token_ids.size() == f.at("token_count").get<std::size_t>(),
                 "file changed since ingest: " + sample.source_path);
    corpus.samples.push_back(std::move(sample));
  }
  EXITLM_CHECK(!corpus.samples.empty(), "empty corpus");
  return corpus;
}

}  // namespace exitlm
