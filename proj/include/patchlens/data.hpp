#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchlens/errors.hpp"
#include "patchlens/metric_spec.hpp"
#include "patchlens/vocab.hpp"

// Dataset layer for the bias harness: profession templates, counterfactual
// pairing, and the gendered-word filter used both for corpus filtering and
// for pronoun detection in generated text.

namespace patchlens {

enum class Gender { male, female };

inline const char* gender_name(Gender g) { return g == Gender::male ? "male" : "female"; }

inline Gender opposite(Gender g) { return g == Gender::male ? Gender::female : Gender::male; }

// Token-index span, end exclusive. Distinct from TokenSpanChars, which is in
// byte offsets.
struct TokenSpan {
  int64_t start = 0;
  int64_t end = 0;

  int64_t length() const { return end - start; }
  bool operator==(const TokenSpan&) const = default;
};

struct ProfessionSet {
  std::vector<std::string> male;
  std::vector<std::string> female;

  const std::vector<std::string>& list(Gender g) const {
    return g == Gender::male ? male : female;
  }
};

inline ProfessionSet load_professions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open professions file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("professions file " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("male") || !j.contains("female"))
    throw LoadError("professions file needs \"male\" and \"female\" lists: " + path.string());
  ProfessionSet out;
  for (const auto& p : j["male"]) out.male.push_back(p.get<std::string>());
  for (const auto& p : j["female"]) out.female.push_back(p.get<std::string>());
  if (out.male.empty() || out.female.empty())
    throw LoadError("professions file has an empty gender list: " + path.string());
  return out;
}

// One template per line; blank lines are skipped. Placeholder validation
// happens in build_samples so programmatic template lists get it too.
inline std::vector<std::string> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open templates file: " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  if (out.empty()) throw LoadError("templates file is empty: " + path.string());
  return out;
}

constexpr std::string_view kProfessionPlaceholder = "[profession]";

// Next-token pronoun strings used to build PronounTargets. The leading space
// matters: after "... said that" the model predicts " he" / " she".
struct PronounChoice {
  std::string male_token = " he";
  std::string female_token = " she";
};

struct TemplateSample {
  std::string template_text;  // still contains the placeholder
  std::string profession;
  Gender gender = Gender::male;
  std::string prompt;         // placeholder substituted
  std::vector<int64_t> tokens;
  TokenSpan span;             // token indices covering the profession
  PronounTarget target;       // stereo = pronoun matching the profession's gender
};

inline TemplateSample make_sample(const std::string& template_text,
                                  const std::string& profession, Gender gender,
                                  const Vocab& vocab, const PronounChoice& pronouns = {}) {
  const auto first = template_text.find(kProfessionPlaceholder);
  if (first == std::string::npos)
    throw ConfigError("template is missing the " + std::string(kProfessionPlaceholder) +
                      " placeholder: \"" + template_text + "\"");
  if (template_text.find(kProfessionPlaceholder, first + 1) != std::string::npos)
    throw ConfigError("template has more than one placeholder: \"" + template_text + "\"");

  TemplateSample s;
  s.template_text = template_text;
  s.profession = profession;
  s.gender = gender;
  s.prompt = template_text;
  s.prompt.replace(first, kProfessionPlaceholder.size(), profession);

  // The profession occupies bytes [first, first + size) of the prompt; its
  // token span is every token whose byte range overlaps that window. A
  // leading-space token like " nanny" starts one byte early and still counts.
  const int64_t prof_begin = static_cast<int64_t>(first);
  const int64_t prof_end = prof_begin + static_cast<int64_t>(profession.size());
  TokenizeResult tok = vocab.tokenize(s.prompt);
  s.tokens = tok.ids;
  int64_t lo = -1, hi = -1;
  for (int64_t i = 0; i < static_cast<int64_t>(tok.ids.size()); ++i) {
    if (tok.spans[i].start < prof_end && tok.spans[i].end > prof_begin) {
      if (lo < 0) lo = i;
      hi = i + 1;
    }
  }
  if (lo < 0)
    throw ConfigError("profession \"" + profession + "\" produced no tokens in prompt \"" +
                      s.prompt + "\"");
  s.span = {lo, hi};

  const std::string& same = gender == Gender::male ? pronouns.male_token : pronouns.female_token;
  const std::string& other = gender == Gender::male ? pronouns.female_token : pronouns.male_token;
  s.target.stereo_token = vocab.id_of(same);
  s.target.anti_token = vocab.id_of(other);
  if (s.target.stereo_token < 0 || s.target.anti_token < 0)
    throw ConfigError("pronoun tokens \"" + same + "\"/\"" + other + "\" not in vocab");
  return s;
}

// Cross product, template-major, male professions before female ones. 15
// templates x 55 professions = 825 samples with the shipped lists.
inline std::vector<TemplateSample> build_samples(const std::vector<std::string>& templates,
                                                 const ProfessionSet& professions,
                                                 const Vocab& vocab,
                                                 const PronounChoice& pronouns = {}) {
  std::vector<TemplateSample> out;
  out.reserve(templates.size() * (professions.male.size() + professions.female.size()));
  for (const auto& t : templates) {
    for (const auto& p : professions.male) out.push_back(make_sample(t, p, Gender::male, vocab, pronouns));
    for (const auto& p : professions.female)
      out.push_back(make_sample(t, p, Gender::female, vocab, pronouns));
  }
  return out;
}

enum class SpanAlignment { last_token, all_tokens };

inline const char* span_alignment_name(SpanAlignment a) {
  return a == SpanAlignment::last_token ? "last-token" : "all-tokens";
}

// Clean prompt + its opposite-gender counterpart, built from the same
// template so the two token sequences line up position for position.
struct CounterfactualPair {
  TemplateSample clean;
  TemplateSample corrupt;
  SpanAlignment alignment = SpanAlignment::last_token;
};

enum class PairMode { anchor, same_length };

struct PairingOptions {
  PairMode mode = PairMode::anchor;
  // Anchor professions (stereotypically male / female) used to corrupt
  // samples of the opposite gender.
  std::string male_anchor = "wrestler";
  std::string female_anchor = "nanny";
  PronounChoice pronouns;
};

namespace detail {

inline bool pair_shapes_match(const TemplateSample& a, const TemplateSample& b) {
  return a.tokens.size() == b.tokens.size() && a.span.length() == b.span.length() &&
         a.span.start == b.span.start;
}

}  // namespace detail

// Builds the corrupt twin of `sample`. Anchor mode uses the fixed
// opposite-gender anchor profession; if the anchor's token span does not line
// up (multi-token professions), it falls back to the same-length search.
// Same-length mode scans the opposite-gender list in order and takes the
// first profession whose substitution preserves both span and total length.
inline CounterfactualPair pair_counterfactual(const TemplateSample& sample,
                                              const ProfessionSet& professions,
                                              const Vocab& vocab,
                                              const PairingOptions& opts = {}) {
  const Gender corrupt_gender = opposite(sample.gender);
  const auto& candidates = professions.list(corrupt_gender);
  if (candidates.empty())
    throw PairingError(std::string("no ") + gender_name(corrupt_gender) +
                       " professions to pair with");

  CounterfactualPair pair;
  pair.clean = sample;

  if (opts.mode == PairMode::anchor) {
    const std::string& anchor =
        corrupt_gender == Gender::male ? opts.male_anchor : opts.female_anchor;
    TemplateSample corrupt =
        make_sample(sample.template_text, anchor, corrupt_gender, vocab, opts.pronouns);
    if (detail::pair_shapes_match(sample, corrupt)) {
      pair.corrupt = std::move(corrupt);
      return pair;
    }
    // fall through to the same-length search
  }
  for (const auto& p : candidates) {
    TemplateSample corrupt =
        make_sample(sample.template_text, p, corrupt_gender, vocab, opts.pronouns);
    if (detail::pair_shapes_match(sample, corrupt)) {
      pair.corrupt = std::move(corrupt);
      return pair;
    }
  }
  throw PairingError("no " + std::string(gender_name(corrupt_gender)) +
                     " profession matches span length " + std::to_string(sample.span.length()) +
                     " for \"" + sample.profession + "\"");
}

// ---------------------------------------------------------------------------
// Gendered-word filter

namespace detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Strips leading/trailing punctuation so "him," and "(He" compare cleanly.
inline std::string strip_punct(std::string_view w) {
  size_t b = 0, e = w.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(w[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(w[e - 1]))) --e;
  return std::string(w.substr(b, e - b));
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace detail

// Binary gender word lists plus the swap map between them. The swap map must
// be an involution: swap(swap(w)) == w, with every listed word covered.
class GenderWordFilter {
 public:
  GenderWordFilter() = default;

  GenderWordFilter(std::vector<std::string> male_words, std::vector<std::string> female_words,
                   const std::vector<std::pair<std::string, std::string>>& swap_pairs) {
    for (auto& w : male_words) male_.insert(detail::lower(w));
    for (auto& w : female_words) female_.insert(detail::lower(w));
    for (const auto& [a, b] : swap_pairs) {
      const std::string la = detail::lower(a), lb = detail::lower(b);
      if (la == lb) throw ConfigError("swap pair maps \"" + la + "\" to itself");
      swap_[la] = lb;
      swap_[lb] = la;
    }
    for (const auto& [k, v] : swap_)
      if (swap_.at(v) != k)
        throw ConfigError("swap map is not an involution at \"" + k + "\"");
    for (const auto& w : male_)
      if (!swap_.count(w)) throw ConfigError("male word \"" + w + "\" has no swap entry");
    for (const auto& w : female_)
      if (!swap_.count(w)) throw ConfigError("female word \"" + w + "\" has no swap entry");
  }

  static GenderWordFilter load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open gender filter file: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("gender filter file " + path.string() + ": " + e.what());
    }
    if (!j.contains("male") || !j.contains("female") || !j.contains("pairs"))
      throw LoadError("gender filter needs \"male\", \"female\" and \"pairs\": " + path.string());
    std::vector<std::string> male, female;
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& w : j["male"]) male.push_back(w.get<std::string>());
    for (const auto& w : j["female"]) female.push_back(w.get<std::string>());
    for (const auto& p : j["pairs"]) {
      if (!p.is_array() || p.size() != 2)
        throw LoadError("gender filter pair entries must be two-element arrays");
      pairs.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
    }
    return GenderWordFilter(std::move(male), std::move(female), pairs);
  }

  // Membership in the swap map (covers swap-only targets like "hers" that the
  // selected-word lists omit). Case-insensitive; punctuation is stripped.
  bool in_swap_map(std::string_view word) const {
    return swap_.count(detail::lower(detail::strip_punct(word))) > 0;
  }

  std::optional<std::string> swap_word(std::string_view word) const {
    auto it = swap_.find(detail::lower(detail::strip_punct(word)));
    if (it == swap_.end()) return std::nullopt;
    return it->second;
  }

  // Gender of a word per the selected-word lists; nullopt when ungendered.
  std::optional<Gender> gender_of(std::string_view word) const {
    const std::string w = detail::lower(detail::strip_punct(word));
    if (male_.count(w)) return Gender::male;
    if (female_.count(w)) return Gender::female;
    return std::nullopt;
  }

  // First gendered word in `text`, scanning whitespace-separated words.
  std::optional<std::pair<std::string, Gender>> first_gendered_word(const std::string& text) const {
    for (const auto& raw : detail::split_words(text)) {
      const std::string w = detail::lower(detail::strip_punct(raw));
      if (auto g = gender_of(w)) return std::make_pair(w, *g);
    }
    return std::nullopt;
  }

  const std::set<std::string>& male_words() const { return male_; }
  const std::set<std::string>& female_words() const { return female_; }

 private:
  std::set<std::string> male_;
  std::set<std::string> female_;
  std::map<std::string, std::string> swap_;
};

struct PerturbationRecord {
  std::string original;
  std::string perturbed;
};

// JSON-lines corpus: one {"original": s, "perturbed": s} object per line.
inline std::vector<PerturbationRecord> load_perturbation_corpus(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open perturbation corpus: " + path.string());
  std::vector<PerturbationRecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("perturbation corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("original") || !j.contains("perturbed"))
      throw LoadError("perturbation corpus line " + std::to_string(lineno) +
                      ": needs \"original\" and \"perturbed\"");
    out.push_back({j["original"].get<std::string>(), j["perturbed"].get<std::string>()});
  }
  return out;
}

struct FilterOutcome {
  std::vector<PerturbationRecord> kept;
  int64_t dropped = 0;    // well-formed but swapping words outside the filter
  int64_t malformed = 0;  // word counts differ; cannot align
};

// Keeps records whose perturbation only touches words in the filter's swap
// map. Records whose two sides do not align word for word are skipped and
// counted as malformed.
inline FilterOutcome filter_perturbation_corpus(const std::vector<PerturbationRecord>& records,
                                                const GenderWordFilter& filter) {
  FilterOutcome out;
  for (const auto& r : records) {
    const auto a = detail::split_words(r.original);
    const auto b = detail::split_words(r.perturbed);
    if (a.size() != b.size()) {
      ++out.malformed;
      continue;
    }
    bool ok = true;
    for (size_t i = 0; i < a.size() && ok; ++i) {
      if (detail::strip_punct(a[i]) == detail::strip_punct(b[i])) continue;
      ok = filter.in_swap_map(a[i]) && filter.in_swap_map(b[i]);
    }
    if (ok)
      out.kept.push_back(r);
    else
      ++out.dropped;
  }
  return out;
}

}  // namespace patchlens
