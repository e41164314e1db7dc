#pragma once

// Brute-force reference implementations used to cross-check the metric code.
// They are written from the metric definitions, not from the library source.

#include <algorithm>
#include <cctype>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "tree/core.hpp"

namespace oracle {

inline std::string normalize(const std::string& text) {
  std::string lowered;
  for (unsigned char c : text) lowered.push_back(static_cast<char>(std::tolower(c)));
  lowered = std::regex_replace(lowered, std::regex(R"([.,!?'"])"), "");
  static const std::map<std::string, std::string> numbers = {
      {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"}, {"four", "4"}, {"five", "5"},
      {"six", "6"},  {"seven", "7"}, {"eight", "8"}, {"nine", "9"},  {"ten", "10"}};
  std::istringstream words(lowered);
  std::vector<std::string> kept;
  for (std::string w; words >> w;) {
    if (w == "a" || w == "an" || w == "the") continue;
    const auto it = numbers.find(w);
    kept.push_back(it == numbers.end() ? w : it->second);
  }
  std::string out;
  for (std::size_t i = 0; i < kept.size(); ++i) out += (i ? " " : "") + kept[i];
  return out;
}

inline std::vector<std::string> flatten(const std::vector<tree::GoldAnswer>& gold) {
  std::vector<std::string> flat;
  for (const auto& g : gold) flat.insert(flat.end(), static_cast<std::size_t>(g.count), g.text);
  return flat;
}

inline double vqa_simple(const std::string& pred, const std::vector<tree::GoldAnswer>& gold) {
  const auto p = normalize(pred);
  int matches = 0;
  for (const auto& a : flatten(gold)) matches += normalize(a) == p ? 1 : 0;
  return std::min(1.0, matches / 3.0);
}

/// Averages min(matches/3, 1) over every subset that leaves out one annotator.
inline double vqa_subsets(const std::string& pred, const std::vector<tree::GoldAnswer>& gold) {
  const auto p = normalize(pred);
  const auto flat = flatten(gold);
  double total = 0.0;
  for (std::size_t left_out = 0; left_out < flat.size(); ++left_out) {
    int matches = 0;
    for (std::size_t j = 0; j < flat.size(); ++j) {
      if (j != left_out && normalize(flat[j]) == p) ++matches;
    }
    total += std::min(1.0, matches / 3.0);
  }
  return total / static_cast<double>(flat.size());
}

inline int exact(const std::string& pred, const std::string& gold) {
  return normalize(pred) == normalize(gold) ? 1 : 0;
}

inline double f1(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::vector<std::string> ta, tb;
  for (std::string w; sa >> w;) ta.push_back(w);
  for (std::string w; sb >> w;) tb.push_back(w);
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  std::vector<std::string> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double p = static_cast<double>(common.size()) / ta.size();
  const double r = static_cast<double>(common.size()) / tb.size();
  return 2 * p * r / (p + r);
}

inline std::size_t choose(const std::string& pred, const std::vector<std::string>& options) {
  const auto p = normalize(pred);
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (normalize(options[i]) == p) return i;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < options.size(); ++i) {
    if (f1(p, normalize(options[i])) > f1(p, normalize(options[best]))) best = i;
  }
  return best;
}

/// Random short answers drawn from a vocabulary that exercises every
/// normalization rule (case, punctuation, articles, spelled numbers).
class AnswerGen {
 public:
  explicit AnswerGen(std::uint64_t seed) : rng_(seed) {}

  std::string phrase(int max_words = 3) {
    static const std::vector<std::string> vocab = {
        "cat", "Cat", "dog", "the", "a", "an", "The", "two", "2", "Two", "red", "red.", "blue!", "it's",
        "its", "\"yes\"", "yes", "no", "No?", "ten", "10", "one", "zebra", "A", "surfing", "sur,fing",
        "big", "big dog"};
    std::uniform_int_distribution<int> count(1, max_words);
    std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1);
    std::string out = coin(0.1) ? " " : "";
    const int n = count(rng_);
    for (int i = 0; i < n; ++i) out += (i ? (coin(0.2) ? "  " : " ") : "") + vocab[pick(rng_)];
    if (coin(0.1)) out += " ";
    return out;
  }

  std::vector<tree::GoldAnswer> gold() {
    std::vector<std::string> flat;
    std::uniform_int_distribution<int> size(1, 10);
    const int n = size(rng_);
    for (int i = 0; i < n; ++i) flat.push_back(phrase(2));
    return tree::fold_answers(flat);
  }

  std::vector<std::string> options() {
    std::uniform_int_distribution<int> size(2, 5);
    std::vector<std::string> out(static_cast<std::size_t>(size(rng_)));
    for (auto& o : out) o = phrase(3);
    return out;
  }

  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace oracle
