#include "exitlm/synthcorpus.hpp"

#include "exitlm/common.hpp"

#include <fstream>
#include <sstream>
#include <vector>

namespace exitlm {

namespace {

const std::vector<std::string> kNouns = {
    "count", "total", "value", "item",  "node",  "entry", "user",
    "score", "cache", "index", "limit", "batch", "config", "result",
    "queue", "token", "frame", "label", "state", "weight"};

const std::vector<std::string> kVerbs = {
    "get",   "set",    "add",   "load",  "save",  "update",
    "build", "check",  "parse", "merge", "apply", "filter"};

const std::vector<std::string> kModules = {
    "os", "sys", "json", "math", "time", "logging", "collections"};

template <class T>
const T& pick(Rng& rng, const std::vector<T>& pool) {
  std::uniform_int_distribution<std::size_t> dist(0, pool.size() - 1);
  return pool[dist(rng)];
}

int pick_int(Rng& rng, int lo, int hi) {
  std::uniform_int_distribution<int> dist(lo, hi);
  return dist(rng);
}

std::string sum_function(Rng& rng) {
  std::string fn = pick(rng, kVerbs) + "_" + pick(rng, kNouns);
  std::string arg = pick(rng, kNouns) + "s";
  std::string acc = pick(rng, kNouns);
  int limit = pick_int(rng, 1, 99);
  std::ostringstream out;
  out << "def " << fn << "(" << arg << "):\n";
  out << "    \"\"\"Return the " << acc << " of " << fn << ".\"\"\"\n";
  out << "    " << acc << " = 0\n";
  out << "    for item in " << arg << ":\n";
  out << "        if item > " << limit << ":\n";
  out << "            " << acc << " = " << acc << " + item\n";
  out << "    return " << acc << "\n";
  return out.str();
}

std::string dict_function(Rng& rng) {
  std::string fn = pick(rng, kVerbs) + "_" + pick(rng, kNouns);
  std::string arg = pick(rng, kNouns) + "s";
  std::string key = pick(rng, kNouns);
  std::ostringstream out;
  out << "def " << fn << "(" << arg << "):\n";
  out << "    table = {}\n";
  out << "    for " << key << " in " << arg << ":\n";
  out << "        if " << key << " not in table:\n";
  out << "            table[" << key << "] = 0\n";
  out << "        table[" << key << "] = table[" << key << "] + 1\n";
  out << "    return table\n";
  return out.str();
}

std::string class_block(Rng& rng) {
  std::string noun = pick(rng, kNouns);
  std::string cls;
  cls += static_cast<char>(noun[0] - 'a' + 'A');
  cls += noun.substr(1);
  cls += "Store";
  std::string field = pick(rng, kNouns);
  std::ostringstream out;
  out << "class " << cls << ":\n";
  out << "    def __init__(self, " << field << "):\n";
  out << "        self." << field << " = " << field << "\n";
  out << "        self.items = []\n\n";
  out << "    def add_item(self, item):\n";
  out << "        self.items.append(item)\n";
  out << "        return len(self.items)\n\n";
  out << "    def get_" << field << "(self):\n";
  out << "        return self." << field << "\n";
  return out.str();
}

std::string guard_function(Rng& rng) {
  std::string fn = pick(rng, kVerbs) + "_" + pick(rng, kNouns);
  std::string arg = pick(rng, kNouns);
  int lo = pick_int(rng, 0, 9);
  int hi = lo + pick_int(rng, 10, 90);
  std::ostringstream out;
  out << "def " << fn << "(" << arg << "):\n";
  out << "    if " << arg << " is None:\n";
  out << "        raise ValueError(\"" << arg << " must not be None\")\n";
  out << "    if " << arg << " < " << lo << ":\n";
  out << "        return " << lo << "\n";
  out << "    if " << arg << " > " << hi << ":\n";
  out << "        return " << hi << "\n";
  out << "    return " << arg << "\n";
  return out.str();
}

std::string format_function(Rng& rng) {
  std::string fn = "format_" + pick(rng, kNouns);
  std::string a = pick(rng, kNouns);
  std::string b = pick(rng, kNouns);
  std::ostringstream out;
  out << "def " << fn << "(" << a << ", " << b << "):\n";
  out << "    name = \"%s=%s\" % (" << a << ", " << b << ")\n";
  out << "    return name\n";
  return out.str();
}

}  // namespace

std::string synthetic_file_text(std::uint64_t seed, int index) {
  Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(index));
  std::ostringstream out;
  out << "# module " << pick(rng, kNouns) << "_" << index << "\n";
  int n_imports = pick_int(rng, 1, 3);
  for (int i = 0; i < n_imports; ++i) out << "import " << pick(rng, kModules) << "\n";
  out << "\n\n";
  int n_defs = pick_int(rng, 2, 4);
  for (int i = 0; i < n_defs; ++i) {
    switch (pick_int(rng, 0, 4)) {
      case 0: out << sum_function(rng); break;
      case 1: out << dict_function(rng); break;
      case 2: out << class_block(rng); break;
      case 3: out << guard_function(rng); break;
      default: out << format_function(rng); break;
    }
    out << "\n\n";
  }
  return out.str();
}

void write_synthetic_corpus(const std::filesystem::path& dir,
                            const SynthCorpusOptions& opts) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < opts.n_files; ++i) {
    std::ostringstream name;
    name << "mod_" << i / 100 << (i / 10) % 10 << i % 10 << opts.extension;
    std::ofstream out(dir / name.str(), std::ios::binary);
    EXITLM_CHECK(out.good(), "cannot write synthetic corpus file");
    out << synthetic_file_text(opts.seed, i);
  }
}

}  // namespace exitlm
