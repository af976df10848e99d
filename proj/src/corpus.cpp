#include "triphase/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "triphase/errors.hpp"

namespace triphase::corpus {

namespace {

const char* const kReserved[] = {"<pad>", "<unk>", "<mask>", "<bos>", "<eos>"};

bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
bool is_ascii_space(unsigned char c) { return c < 0x80 && std::isspace(c) != 0; }

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_ascii_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (const char* tok : kReserved) add(tok);
}

void Vocab::add(const std::string& token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(std::span<const Example> examples, std::size_t max_size) {
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& ex : examples) {
    for (auto& w : split_words(ex.text)) ++freq[w];
  }
  if (freq.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  Vocab v;
  for (const auto& [tok, count] : ranked) {
    if (v.size() >= max_size) break;
    if (v.index_.count(tok) == 0) v.add(tok);
  }
  return v;
}

TokenId Vocab::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? special::kUnk : it->second;
}

const std::string& Vocab::token_of(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(id_of(w));
  return ids;
}

void Vocab::tokenize_all(std::vector<Example>& examples) const {
  for (auto& ex : examples) ex.tokens = encode(ex.text);
}

nlohmann::json Vocab::to_json() const { return tokens_; }

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  const auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < static_cast<std::size_t>(special::kCount)) throw SchemaError("vocabulary missing reserved tokens");
  for (std::size_t i = static_cast<std::size_t>(special::kCount); i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

// ---------------------------------------------------------------------------
// LabelSpace

LabelSpace::LabelSpace(std::span<const Example> examples) {
  for (const auto& ex : examples) index_.emplace(ex.label_path, 0);
  for (auto& [path, id] : index_) {
    id = paths_.size();
    paths_.push_back(path);
  }
}

std::size_t LabelSpace::class_of(const LabelPath& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw SchemaError("unknown label path: " + join_path(path));
  return it->second;
}

std::string LabelSpace::name(std::size_t class_id) const { return join_path(path(class_id)); }

nlohmann::json LabelSpace::to_json() const { return paths_; }

LabelSpace LabelSpace::from_json(const nlohmann::json& j) {
  LabelSpace ls;
  for (const auto& p : j) {
    auto path = p.get<LabelPath>();
    ls.index_.emplace(path, ls.paths_.size());
    ls.paths_.push_back(std::move(path));
  }
  return ls;
}

std::string join_path(const LabelPath& path) {
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) out += "/";
    out += path[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset construction and IO

void Dataset::rebuild_index() {
  class_index.clear();
  for (const auto& ex : examples) class_index[ex.label_path].push_back(ex.id);
}

Dataset make_dataset(std::vector<Example> examples) {
  Dataset ds;
  if (!examples.empty()) ds.levels = examples.front().label_path.size();
  for (const auto& ex : examples) {
    if (ex.label_path.size() != ds.levels) {
      throw SchemaError("example '" + ex.id + "' has label depth " + std::to_string(ex.label_path.size()) +
                        ", expected " + std::to_string(ds.levels));
    }
  }
  ds.examples = std::move(examples);
  ds.rebuild_index();
  return ds;
}

Dataset parse_jsonl(std::string_view content, bool require_labels) {
  std::vector<Example> examples;
  std::size_t line_no = 0;
  std::size_t levels = 0;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    const auto end = std::min(content.find('\n', pos), content.size());
    std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == content.size()) break;
      continue;
    }

    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(line_no, "record is not an object");
    if (!rec.contains("text") || !rec["text"].is_string()) throw ParseError(line_no, "missing string field \"text\"");
    if (require_labels && (!rec.contains("labels") || !rec["labels"].is_array() || rec["labels"].empty())) {
      throw ParseError(line_no, "missing non-empty array field \"labels\"");
    }

    Example ex;
    ex.text = rec["text"].get<std::string>();
    if (ex.text.empty()) throw ParseError(line_no, "empty \"text\"");
    if (require_labels) {
      for (const auto& l : rec["labels"]) {
        if (!l.is_string()) throw ParseError(line_no, "labels must be strings");
        ex.label_path.push_back(l.get<std::string>());
      }
    }
    if (rec.contains("id")) {
      if (!rec["id"].is_string()) throw ParseError(line_no, "\"id\" must be a string");
      ex.id = rec["id"].get<std::string>();
    } else {
      ex.id = "line" + std::to_string(line_no);
    }

    if (examples.empty()) levels = ex.label_path.size();
    if (ex.label_path.size() != levels) {
      throw SchemaError("line " + std::to_string(line_no) + ": label depth " + std::to_string(ex.label_path.size()) +
                        " differs from first record's depth " + std::to_string(levels));
    }
    examples.push_back(std::move(ex));
    if (end == content.size()) break;
  }

  std::unordered_map<std::string, std::size_t> seen;
  for (const auto& ex : examples) {
    if (++seen[ex.id] > 1) throw SchemaError("duplicate example id '" + ex.id + "'");
  }
  if (!require_labels) {
    Dataset ds;
    ds.examples = std::move(examples);
    return ds;
  }
  return make_dataset(std::move(examples));
}

Dataset load_dataset(const std::filesystem::path& path, bool require_labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str(), require_labels);
}

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json rec{{"id", ex.id}, {"text", ex.text}, {"labels", ex.label_path}};
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splitting

Splits split_dataset(const Dataset& ds, double val_frac, double test_frac, std::uint64_t seed) {
  if (val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac >= 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and sum to less than 1");
  }

  std::map<LabelPath, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) by_class[ds.examples[i].label_path].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<int> assignment(ds.examples.size(), 0);  // 0 train, 1 val, 2 test
  Splits out;
  for (auto& [path, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = idx.size();
    auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
    auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n)));
    const std::size_t slots = 1 + (val_frac > 0.0 ? 1 : 0) + (test_frac > 0.0 ? 1 : 0);
    if (n < slots) {
      out.warnings.push_back("class '" + join_path(path) + "' has " + std::to_string(n) +
                             " examples for " + std::to_string(slots) + " split slots; best-effort assignment");
    }
    while (n_val + n_test >= n && (n_val + n_test) > 0) {
      if (n_test > 0 && (n_test >= n_val)) {
        --n_test;
      } else {
        --n_val;
      }
    }
    for (std::size_t j = 0; j < n_val; ++j) assignment[idx[j]] = 1;
    for (std::size_t j = n_val; j < n_val + n_test; ++j) assignment[idx[j]] = 2;
  }

  std::vector<Example> parts[3];
  for (std::size_t i = 0; i < ds.examples.size(); ++i) parts[assignment[i]].push_back(ds.examples[i]);
  out.train = make_dataset(std::move(parts[0]));
  out.val = make_dataset(std::move(parts[1]));
  out.test = make_dataset(std::move(parts[2]));
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->levels = ds.levels;
    d->vocab = ds.vocab;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization and statistics

Dataset build_vocab_and_tokenize(Dataset ds, std::size_t max_vocab) {
  if (ds.empty()) throw std::invalid_argument("cannot tokenize an empty corpus");
  ds.vocab = Vocab::build(ds.examples, max_vocab);
  ds.vocab->tokenize_all(ds.examples);
  return ds;
}

std::size_t estimate_max_length(const Dataset& ds, double sample_frac, double factor, std::size_t model_cap) {
  if (!(sample_frac > 0.0 && sample_frac <= 1.0)) throw std::invalid_argument("sample_frac must be in (0, 1]");
  const auto n = ds.examples.size();
  if (n == 0) return std::min<std::size_t>(model_cap, 1);
  const auto m = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(sample_frac * static_cast<double>(n))));
  std::size_t longest = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& ex = ds.examples[i * n / m];
    longest = std::max(longest, ex.tokens.size());
  }
  const auto est = static_cast<std::size_t>(std::ceil(factor * static_cast<double>(longest) - 1e-9));
  return std::clamp<std::size_t>(est, 1, model_cap);
}

CorpusStats compute_stats(const Dataset& ds) {
  CorpusStats s;
  s.count = ds.examples.size();
  s.empty = s.count == 0;
  std::size_t total = 0;
  for (const auto& ex : ds.examples) {
    total += ex.tokens.size();
    s.max_length = std::max(s.max_length, ex.tokens.size());
    ++s.per_class[join_path(ex.label_path)];
  }
  s.avg_length = s.empty ? 0.0 : static_cast<double>(total) / static_cast<double>(s.count);
  return s;
}

namespace {
double round1(double x) { return std::round(x * 10.0) / 10.0; }
}  // namespace

nlohmann::json stats_to_json(const std::vector<std::pair<std::string, CorpusStats>>& splits) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, s] : splits) {
    j[name] = {{"count", s.count},
               {"avg_length", round1(s.avg_length)},
               {"max_length", s.max_length},
               {"per_class", s.per_class},
               {"empty", s.empty}};
  }
  return j;
}

std::string stats_to_text(const std::vector<std::pair<std::string, CorpusStats>>& splits) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "Split" << std::right << std::setw(10) << "Examples" << '\n';
  for (const auto& [name, s] : splits) os << std::left << std::setw(12) << name << std::right << std::setw(10) << s.count << '\n';
  os << '\n' << std::left << std::setw(12) << "Split" << std::right << std::setw(14) << "Avg. Length" << std::setw(14)
     << "Max. Length" << '\n';
  for (const auto& [name, s] : splits) {
    os << std::left << std::setw(12) << name << std::right << std::setw(14) << std::fixed << std::setprecision(1)
       << round1(s.avg_length) << std::setw(14) << s.max_length << '\n';
  }
  return os.str();
}

}  // namespace triphase::corpus
