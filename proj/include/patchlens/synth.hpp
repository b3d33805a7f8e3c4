#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchlens/data.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/metrics.hpp"
#include "patchlens/rng.hpp"
#include "patchlens/vocab.hpp"

// Synthetic biased corpus: a desk-scale stand-in for pretraining data. Lines
// pair professions with pronouns at a controlled rate p, and objects carry a
// planted gender association usable by the feature probe.

namespace patchlens {

struct SynthCorpusSpec {
  int64_t professions_per_gender = 8;
  std::string profession_prefix = "worker";  // names are deliberately gender-neutral strings
  std::vector<std::string> verbs = {"said", "yelled", "whispered", "wished", "claimed"};
  std::vector<std::string> second_verbs = {"wanted", "liked", "cleaned", "took"};
  std::vector<std::string> male_objects = {"car", "hammer", "truck"};
  std::vector<std::string> female_objects = {"dishes", "ribbon", "vase"};
  std::vector<std::string> adjectives = {"old", "new", "clean", "heavy"};
  double bias_strength = 1.0;  // p = P(pronoun matches the profession's planted gender)
  int64_t size = 1000;         // number of biased training lines
  uint64_t seed = 0;

  void validate() const {
    if (bias_strength < 0.5 || bias_strength > 1.0)
      throw ConfigError("bias_strength must be in [0.5, 1]");
    if (size < 1) throw ConfigError("corpus size must be >= 1");
    if (professions_per_gender < 1) throw ConfigError("need at least one profession per gender");
    if (verbs.empty() || second_verbs.empty() || male_objects.empty() || female_objects.empty())
      throw ConfigError("word lists must be non-empty");
  }
};

struct SynthCorpus {
  std::vector<std::string> lines;           // biased training lines
  std::vector<std::string> counterfactual;  // the same lines, gendered words swapped
  std::vector<std::string> neutral;         // no gendered words; perplexity guard
  std::vector<MinimalPair> pairs;           // held-out stereo/anti prompts
  std::vector<std::string> templates;       // "the [profession] {verb} that", for experiments
  ProfessionSet professions;
  GenderWordFilter filter;  // he/she, him/her
  Vocab vocab;              // word-level: "the" plus " word" entries
};

namespace detail {

inline std::string zero_pad(int64_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

inline void collect_words(const std::string& line, std::set<std::string>& words) {
  std::istringstream in(line);
  std::string w;
  while (in >> w) words.insert(w);
}

}  // namespace detail

// Applies the filter's swap map word by word; non-gendered words pass
// through. The A5 map is an involution, so applying this twice is identity.
inline std::string swap_gendered_words(const std::string& line, const GenderWordFilter& filter) {
  std::istringstream in(line);
  std::string w, out;
  while (in >> w) {
    if (!out.empty()) out += ' ';
    auto swapped = filter.swap_word(w);
    out += swapped ? *swapped : w;
  }
  return out;
}

inline SynthCorpus gen_synth_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SynthCorpus out;

  const int width = spec.professions_per_gender * 2 > 100 ? 3 : 2;
  for (int64_t i = 0; i < spec.professions_per_gender; ++i) {
    out.professions.male.push_back(spec.profession_prefix + detail::zero_pad(i, width));
    out.professions.female.push_back(
        spec.profession_prefix + detail::zero_pad(spec.professions_per_gender + i, width));
  }
  out.filter = GenderWordFilter({"he", "him"}, {"she", "her"}, {{"he", "she"}, {"him", "her"}});

  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[rng.uniform_int(v.size())];
  };

  // Biased lines, two grammatical forms:
  //   A: "the {prof} {verb} that {he|she} {verb2} the {object}"
  //   B: "the {object} belonged to {him|her}"
  // Form A plants profession->pronoun bias at strength p; both forms tie
  // objects to the pronoun's gender at strength p.
  for (int64_t i = 0; i < spec.size; ++i) {
    const bool form_b = rng.bernoulli(0.25);
    if (form_b) {
      const bool male = rng.bernoulli(0.5);
      const bool match = rng.bernoulli(spec.bias_strength);
      const std::string& object = male == match ? pick(spec.male_objects)
                                                : pick(spec.female_objects);
      out.lines.push_back("the " + object + " belonged to " + (male ? "him" : "her"));
    } else {
      const bool male_prof = rng.bernoulli(0.5);
      const auto& prof = male_prof ? pick(out.professions.male) : pick(out.professions.female);
      const bool match = rng.bernoulli(spec.bias_strength);
      const bool male_pron = male_prof == match;
      const bool object_match = rng.bernoulli(spec.bias_strength);
      const std::string& object =
          male_pron == object_match ? pick(spec.male_objects) : pick(spec.female_objects);
      out.lines.push_back("the " + prof + " " + pick(spec.verbs) + " that " +
                          (male_pron ? "he" : "she") + " " + pick(spec.second_verbs) + " the " +
                          object);
    }
  }

  for (const auto& line : out.lines)
    out.counterfactual.push_back(swap_gendered_words(line, out.filter));

  // Neutral lines mention objects and adjectives only.
  const int64_t n_neutral = std::max<int64_t>(8, spec.size / 10);
  for (int64_t i = 0; i < n_neutral; ++i) {
    const std::string& object =
        rng.bernoulli(0.5) ? pick(spec.male_objects) : pick(spec.female_objects);
    out.neutral.push_back("the " + object + " was very " + pick(spec.adjectives));
  }

  // Held-out minimal pairs: every profession with the first verb, cut right
  // after the pronoun.
  for (int g = 0; g < 2; ++g) {
    const bool male = g == 0;
    for (const auto& prof : (male ? out.professions.male : out.professions.female)) {
      MinimalPair p;
      p.stereo_text = "the " + prof + " " + spec.verbs[0] + " that " + (male ? "he" : "she");
      p.anti_text = "the " + prof + " " + spec.verbs[0] + " that " + (male ? "she" : "he");
      p.category = male ? "male" : "female";
      out.pairs.push_back(std::move(p));
    }
  }

  for (const auto& verb : spec.verbs)
    out.templates.push_back("the [profession] " + verb + " that");

  // Vocabulary: every word that can occur. Lines start with "the"; every
  // other word appears with a leading space.
  std::set<std::string> words;
  for (const auto& l : out.lines) detail::collect_words(l, words);
  for (const auto& l : out.neutral) detail::collect_words(l, words);
  words.insert("he");
  words.insert("she");
  words.insert("him");
  words.insert("her");
  for (const auto& p : out.professions.male) words.insert(p);
  for (const auto& p : out.professions.female) words.insert(p);
  for (const auto& v : spec.verbs) words.insert(v);
  for (const auto& v : spec.second_verbs) words.insert(v);
  for (const auto& o : spec.male_objects) words.insert(o);
  for (const auto& o : spec.female_objects) words.insert(o);
  for (const auto& a : spec.adjectives) words.insert(a);
  words.insert("belonged");
  words.insert("to");
  words.insert("that");
  words.insert("was");
  words.insert("very");
  words.insert("the");

  std::vector<std::string> tokens;
  tokens.push_back("the");
  for (const auto& w : words) tokens.push_back(" " + w);
  out.vocab = Vocab(tokens);
  return out;
}

}  // namespace patchlens
