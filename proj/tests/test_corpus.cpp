#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitlm/corpus.hpp"
#include "exitlm/synthcorpus.hpp"
#include "exitlm/tokenizer.hpp"
#include "test_support.hpp"

#include <fstream>
#include <numeric>

using namespace exitlm;
using exitlm::testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

CodeSample sample_of(int len) {
  CodeSample s;
  s.source_path = "mem";
  for (int i = 0; i < len; ++i) s.token_ids.push_back(i % 256);
  return s;
}

}  // namespace

TEST_CASE("tokenizer round trips") {
  ByteTokenizer tok;
  CHECK(tok.vocab_size() == 259);

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    const int len = static_cast<int>(uniform_real(rng, 0, 200));
    for (int i = 0; i < len; ++i) {
      text.push_back(static_cast<char>(static_cast<int>(uniform_real(rng, 0, 256))));
    }
    CHECK(tok.decode(tok.encode(text)) == text);

    TokenSeq ids;
    for (int i = 0; i < len; ++i) {
      ids.push_back(static_cast<TokenId>(uniform_real(rng, 0, 256)));
    }
    CHECK(tok.encode(tok.decode(ids)) == ids);
  }
}

TEST_CASE("tokenizer drops specials when decoding") {
  ByteTokenizer tok;
  TokenSeq ids = {'h', 'i', ByteTokenizer::kEos, ByteTokenizer::kPad};
  CHECK(tok.decode(ids) == "hi");
}

TEST_CASE("ingest splits 10 files as 8/1/1 and is deterministic") {
  TempDir dir("ingest");
  for (int i = 0; i < 10; ++i) {
    std::string body(40 + i, 'a' + static_cast<char>(i));
    write_file(dir.path() / ("f" + std::to_string(i) + ".py"), body);
  }
  IngestOptions opts;
  opts.extensions = {".py"};
  opts.seed = 7;
  Corpus c1 = ingest(dir.path(), opts);
  CHECK(c1.samples.size() == 10);
  CHECK(c1.split(Split::kTrain).size() == 8);
  CHECK(c1.split(Split::kValidation).size() == 1);
  CHECK(c1.split(Split::kTest).size() == 1);

  Corpus c2 = ingest(dir.path(), opts);
  REQUIRE(c2.samples.size() == c1.samples.size());
  for (std::size_t i = 0; i < c1.samples.size(); ++i) {
    CHECK(c1.samples[i].source_path == c2.samples[i].source_path);
    CHECK(c1.samples[i].split == c2.samples[i].split);
    CHECK(c1.samples[i].token_ids == c2.samples[i].token_ids);
  }
}

TEST_CASE("ingest drops short files and rejects empty corpora") {
  TempDir dir("ingest_empty");
  write_file(dir.path() / "tiny.py", "x=1\n");
  IngestOptions opts;
  opts.extensions = {".py"};
  CHECK_THROWS_WITH_AS(ingest(dir.path(), opts), "empty corpus", Error);

  write_file(dir.path() / "ok.py", std::string(64, 'y'));
  Corpus c = ingest(dir.path(), opts);
  CHECK(c.samples.size() == 1);
  CHECK(c.dropped_files == 1);

  IngestOptions none = opts;
  none.extensions = {".java"};
  CHECK_THROWS_AS(ingest(dir.path(), none), Error);
}

TEST_CASE("ingest round trips file bytes exactly") {
  TempDir dir("ingest_bytes");
  std::string body = "def f():\n\treturn \xc3\xa9\x00tail";
  body.resize(48, '#');
  write_file(dir.path() / "a.py", body);
  IngestOptions opts;
  opts.extensions = {".py"};
  Corpus c = ingest(dir.path(), opts);
  ByteTokenizer tok;
  CHECK(tok.decode(c.samples[0].token_ids) == body);
}

TEST_CASE("make_context_target slices per the documented rules") {
  SUBCASE("fraction of 100 tokens with room for max_new") {
    CodeSample s = sample_of(100);
    ContextTarget ct = make_context_target(s, 0.2, 15, 512);
    REQUIRE(ct.context.size() == 20);
    REQUIRE(ct.target.size() == 15);
    CHECK(ct.context.front() == s.token_ids[0]);
    CHECK(ct.context.back() == s.token_ids[19]);
    CHECK(ct.target.front() == s.token_ids[20]);
    CHECK(ct.target.back() == s.token_ids[34]);
  }
  SUBCASE("target clamps at sample end") {
    CodeSample s = sample_of(10);
    ContextTarget ct = make_context_target(s, 0.2, 15, 512);
    CHECK(ct.context.size() == 2);
    CHECK(ct.target.size() == 8);
  }
  SUBCASE("context keeps the rightmost max_context tokens") {
    CodeSample s = sample_of(4000);
    ContextTarget ct = make_context_target(s, 0.5, 15, 512);
    REQUIRE(ct.context.size() == 512);
    CHECK(ct.context.front() == s.token_ids[1488]);
    CHECK(ct.context.back() == s.token_ids[1999]);
  }
  SUBCASE("too-short samples raise") {
    CodeSample s = sample_of(3);
    CHECK_THROWS_AS(make_context_target(s, 0.2, 15, 512), Error);
  }
}

TEST_CASE("pack_training_blocks") {
  SUBCASE("two samples of five tokens fit one 12-token block exactly") {
    CodeSample a = sample_of(5), b = sample_of(5);
    auto blocks = pack_training_blocks({&a, &b}, 12);
    REQUIRE(blocks.size() == 1);
    CHECK(blocks[0].size() == 12);
    CHECK(blocks[0][5] == ByteTokenizer::kEos);
    CHECK(blocks[0][11] == ByteTokenizer::kEos);
  }
  SUBCASE("one sample of three tokens pads with four PADs") {
    CodeSample a = sample_of(3);
    auto blocks = pack_training_blocks({&a}, 8);
    REQUIRE(blocks.size() == 1);
    int pads = 0;
    for (TokenId id : blocks[0]) pads += id == ByteTokenizer::kPad;
    CHECK(pads == 4);
  }
  SUBCASE("1000 tokens across four samples give four 256-token blocks") {
    std::vector<CodeSample> samples(4, sample_of(250));
    std::vector<const CodeSample*> ptrs;
    for (auto& s : samples) ptrs.push_back(&s);
    auto blocks = pack_training_blocks(ptrs, 256);
    REQUIRE(blocks.size() == 4);
    int pads = 0;
    for (TokenId id : blocks.back()) pads += id == ByteTokenizer::kPad;
    CHECK(pads == 4 * 256 - (1000 + 4));
  }
  SUBCASE("conservation: non-PAD tokens = total tokens + separators") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<CodeSample> samples;
      std::size_t total = 0;
      const int n = 1 + static_cast<int>(uniform_real(rng, 0, 8));
      for (int i = 0; i < n; ++i) {
        samples.push_back(sample_of(1 + static_cast<int>(uniform_real(rng, 0, 300))));
        total += samples.back().token_ids.size();
      }
      std::vector<const CodeSample*> ptrs;
      for (auto& s : samples) ptrs.push_back(&s);
      const int block_len = 2 + static_cast<int>(uniform_real(rng, 0, 100));
      auto blocks = pack_training_blocks(ptrs, block_len);
      std::size_t non_pad = 0;
      for (const auto& b : blocks) {
        CHECK(b.size() == static_cast<std::size_t>(block_len));
        for (TokenId id : b) non_pad += id != ByteTokenizer::kPad;
      }
      CHECK(non_pad == total + samples.size());
    }
  }
}

TEST_CASE("manifest round trip preserves splits and counts") {
  TempDir dir("manifest");
  SynthCorpusOptions gen;
  gen.n_files = 12;
  write_synthetic_corpus(dir.path() / "corpus", gen);
  IngestOptions opts;
  opts.extensions = {".py"};
  opts.seed = 5;
  Corpus c = ingest(dir.path() / "corpus", opts);
  write_manifest(c, dir.path() / "manifest.json");
  Corpus loaded = load_manifest(dir.path() / "manifest.json");
  REQUIRE(loaded.samples.size() == c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    CHECK(loaded.samples[i].source_path == c.samples[i].source_path);
    CHECK(loaded.samples[i].split == c.samples[i].split);
    CHECK(loaded.samples[i].token_ids == c.samples[i].token_ids);
  }
}

TEST_CASE("synthetic corpus is deterministic") {
  CHECK(synthetic_file_text(9, 4) == synthetic_file_text(9, 4));
  CHECK(synthetic_file_text(9, 4) != synthetic_file_text(9, 5));
}
