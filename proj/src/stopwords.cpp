#include <fstream>
#include <stdexcept>

#include "triphase/noise.hpp"

namespace triphase::noise {

const std::vector<std::string>& default_stopwords() {
  static const std::vector<std::string> words = {
      "a",       "about", "above", "after",  "again", "against", "all",    "am",    "an",    "and",
      "any",     "are",   "as",    "at",     "be",    "because", "been",   "before", "being", "below",
      "between", "both",  "but",   "by",     "can",   "could",   "did",    "do",    "does",  "doing",
      "down",    "during", "each", "few",    "for",   "from",    "further", "had",  "has",   "have",
      "having",  "he",    "her",   "here",   "hers",  "herself", "him",    "himself", "his", "how",
      "i",       "if",    "in",    "into",   "is",    "it",      "its",    "itself", "just", "me",
      "more",    "most",  "my",    "myself", "no",    "nor",     "not",    "now",   "of",    "off",
      "on",      "once",  "only",  "or",     "other", "our",     "ours",   "ourselves", "out", "over",
      "own",     "same",  "she",   "should", "so",    "some",    "such",   "than",  "that",  "the",
      "their",   "theirs", "them", "themselves", "then", "there", "these", "they",  "this",  "those",
      "through", "to",    "too",   "under",  "until", "up",      "very",   "was",   "we",    "were",
      "what",    "when",  "where", "which",  "while", "who",     "whom",   "why",   "will",  "with",
      "would",   "you",   "your",  "yours",  "yourself", "yourselves"};
  return words;
}

std::unordered_set<std::string> load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open stop-word file " + path.string());
  std::unordered_set<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    const auto start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    out.insert(line.substr(start));
  }
  return out;
}

StopwordNoiseConfig default_stopword_noise() {
  StopwordNoiseConfig cfg;
  const auto& words = default_stopwords();
  cfg.stopwords.insert(words.begin(), words.end());
  return cfg;
}

}  // namespace triphase::noise
