// Command-line front-end: wires checkpoints, vocabularies, and data files to
// the experiment runners and trainer. All outputs are byte-stable given the
// same inputs and seed; every command records the seed it ran with.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patchlens/patchlens.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using namespace patchlens;

// ------------------------------------------------------------ flag helpers

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

int env_threads_default() {
  const char* v = std::getenv("PATCHLENS_THREADS");
  if (!v || !*v) return 0;  // 0 -> all available cores
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw ConfigError(std::string("PATCHLENS_THREADS is not an integer: '") + v + "'");
  }
}

// Omitted --seed draws one from the system and records it in the output.
uint64_t resolve_seed(const std::optional<uint64_t>& flag) {
  if (flag) return *flag;
  std::random_device rd;
  return (static_cast<uint64_t>(rd()) << 32) ^ static_cast<uint64_t>(rd());
}

// "a..b" is inclusive..exclusive and 0-based; items may be single layers and
// are comma-separated: "0..3,5" -> {0,1,2,5}.
std::vector<int64_t> parse_layers(const std::string& text) {
  std::vector<int64_t> out;
  std::string item;
  std::istringstream in(text);
  auto bad = [&](const std::string& it) {
    throw ConfigError("bad layer item '" + it + "' in '" + text +
                      "' (want N or A..B, 0-based, A < B)");
  };
  while (std::getline(in, item, ',')) {
    if (item.empty()) bad(item);
    const auto dots = item.find("..");
    try {
      if (dots == std::string::npos) {
        size_t used = 0;
        const int64_t l = std::stoll(item, &used);
        if (used != item.size() || l < 0) bad(item);
        out.push_back(l);
      } else {
        size_t used = 0;
        const int64_t a = std::stoll(item.substr(0, dots), &used);
        if (used != dots) bad(item);
        const std::string tail = item.substr(dots + 2);
        const int64_t b = std::stoll(tail, &used);
        if (used != tail.size() || a < 0 || b <= a) bad(item);
        for (int64_t l = a; l < b; ++l) out.push_back(l);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      bad(item);
    }
  }
  if (out.empty()) throw ConfigError("empty layer list '" + text + "'");
  return out;
}

std::vector<int64_t> parse_counts(const std::string& text, const char* what) {
  std::vector<int64_t> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      size_t used = 0;
      const int64_t k = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(k);
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " value '" + item + "' in '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

// "full" | "none" | "mlp:<layers>" | "attn:<l.h,...>" | "attn:<layers>x<heads>"
ComponentMask parse_mask(const std::string& text) {
  if (text == "full") return ComponentMask::full();
  if (text == "none") return ComponentMask::none();
  if (text.rfind("mlp:", 0) == 0) {
    auto layers = parse_layers(text.substr(4));
    return ComponentMask::mlp({layers.begin(), layers.end()});
  }
  if (text.rfind("attn:", 0) == 0) {
    const std::string body = text.substr(5);
    std::set<std::pair<int64_t, int64_t>> heads;
    if (const auto cross = body.find('x'); cross != std::string::npos) {
      for (int64_t l : parse_layers(body.substr(0, cross)))
        for (int64_t h : parse_layers(body.substr(cross + 1))) heads.emplace(l, h);
    } else {
      std::string item;
      std::istringstream in(body);
      while (std::getline(in, item, ',')) {
        const auto dot = item.find('.');
        try {
          if (dot == std::string::npos) throw std::invalid_argument(item);
          heads.emplace(std::stoll(item.substr(0, dot)), std::stoll(item.substr(dot + 1)));
        } catch (const std::exception&) {
          throw ConfigError("bad head '" + item + "' in mask '" + text + "' (want L.H)");
        }
      }
    }
    return ComponentMask::attn(std::move(heads));
  }
  throw ConfigError("bad mask '" + text + "' (want full | none | mlp:<layers> | attn:<heads>)");
}

SpanAlignment parse_span_mode(const std::string& text) {
  if (text == "last-token") return SpanAlignment::last_token;
  if (text == "all-tokens") return SpanAlignment::all_tokens;
  throw ConfigError("bad --mode '" + text + "' (want last-token | all-tokens)");
}

Site parse_site(const std::string& text) {
  for (Site s : {Site::resid_pre, Site::resid_post, Site::attn_out, Site::attn_head_out,
                 Site::mlp_out})
    if (text == site_name(s)) return s;
  throw ConfigError("bad --family '" + text + "'");
}

std::vector<std::string> load_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void save_checkpoint_at(const Checkpoint<double>& ck, const std::string& manifest) {
  if (const auto parent = fs::path(manifest).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_checkpoint(ck, manifest);
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  for (const auto& l : lines) f << l << '\n';
  if (!f) throw ConfigError("write failed for '" + path.string() + "'");
}

// ------------------------------------------------------- shared option sets

struct CommonOpts {
  std::string checkpoint;
  std::string vocab;
  std::string out = env_or("PATCHLENS_OUT_DIR", "reports");
  int threads = env_threads_default();
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_model = true) {
  if (needs_model) {
    cmd->add_option("--checkpoint", o.checkpoint, "checkpoint manifest (.json)")->required();
    cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  }
  cmd->add_option("--out", o.out,
                  "report directory (env PATCHLENS_OUT_DIR overrides the default)");
  cmd->add_option("--threads", o.threads,
                  "worker threads, 0 = all cores (env PATCHLENS_THREADS overrides the default)");
  cmd->add_option("--seed", o.seed, "RNG seed; omitted -> drawn and recorded");
}

struct HarnessOpts {
  std::string templates;
  std::string professions;
  std::string mode = "last-token";
  std::string pairing = "anchor";
  std::string male_anchor = "wrestler";
  std::string female_anchor = "nanny";
};

void add_harness(CLI::App* cmd, HarnessOpts& o) {
  cmd->add_option("--templates", o.templates, "templates file ([profession] placeholder)")
      ->required();
  cmd->add_option("--professions", o.professions, "professions JSON {male, female}")->required();
  cmd->add_option("--mode", o.mode, "span alignment: last-token | all-tokens");
  cmd->add_option("--pairing", o.pairing, "counterfactual pairing: anchor | same-length");
  cmd->add_option("--male-anchor", o.male_anchor, "male anchor profession");
  cmd->add_option("--female-anchor", o.female_anchor, "female anchor profession");
}

PairingOptions pairing_from(const HarnessOpts& o) {
  PairingOptions p;
  if (o.pairing == "anchor") p.mode = PairMode::anchor;
  else if (o.pairing == "same-length") p.mode = PairMode::same_length;
  else throw ConfigError("bad --pairing '" + o.pairing + "' (want anchor | same-length)");
  p.male_anchor = o.male_anchor;
  p.female_anchor = o.female_anchor;
  return p;
}

struct HarnessInputs {
  Vocab vocab;
  Checkpoint<double> ck;
  std::vector<std::string> templates;
  ProfessionSet professions;
  std::vector<TemplateSample> samples;
};

HarnessInputs load_harness(const CommonOpts& c, const HarnessOpts& h) {
  HarnessInputs in;
  in.vocab = Vocab::load(c.vocab);
  in.ck = load_checkpoint<double>(c.checkpoint);
  in.templates = load_templates(h.templates);
  in.professions = load_professions(h.professions);
  in.samples = build_samples(in.templates, in.professions, in.vocab);
  return in;
}

void finish_report(ExperimentReport& report, const CommonOpts& c, uint64_t seed) {
  report.seed = seed;
  report.config["threads"] = c.threads;  // informational; results are thread-count invariant
  const auto path = report.write(c.out);
  std::cout << path.string() << '\n';
}

// ------------------------------------------------------------ model commands

struct ModelInitOpts {
  CommonOpts common;
  std::string config_path;
  std::string preset;
  std::string output;
};

void run_model_init(const ModelInitOpts& o) {
  const uint64_t seed = resolve_seed(o.common.seed);
  Vocab vocab = Vocab::load(o.common.vocab);
  ModelConfig config;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw LoadError("cannot open '" + o.config_path + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("bad config JSON '" + o.config_path + "': " + e.what());
    }
    config = config_from_json(j);
    if (config.vocab_size != vocab.size())
      throw ConfigError("config vocab_size " + std::to_string(config.vocab_size) +
                        " does not match vocabulary size " + std::to_string(vocab.size()));
  } else if (o.preset == "toy") {
    config = toy_model_config(vocab.size());
  } else {
    throw ConfigError("model init needs --config or --preset toy");
  }

  auto ck = init_checkpoint<double>(config, seed);
  save_checkpoint_at(ck, o.output);

  ordered_json out;
  out["command"] = "model init";
  out["seed"] = seed;
  out["checkpoint"] = o.output;
  out["parameters"] = trainable_param_count(config, ComponentMask::full());
  std::cout << out.dump(2) << '\n';
}

struct ModelTrainOpts {
  CommonOpts common;
  std::string corpus;
  std::string mask = "full";
  std::string output;
  TrainConfig train;
  TrainHooks hooks;
};

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--lr", t.learning_rate, "learning rate");
  cmd->add_option("--weight-decay", t.weight_decay, "decoupled weight decay");
  cmd->add_option("--batch-size", t.batch_size, "lines per optimizer step");
  cmd->add_option("--epochs", t.epochs, "training epochs");
  cmd->add_option("--val-fraction", t.validation_fraction, "validation split fraction");
}

ExperimentReport curve_report(const std::string& experiment, const TrainResult<double>& result,
                              const Checkpoint<double>& ck, const ModelTrainOpts& o,
                              uint64_t seed) {
  ExperimentReport report;
  report.experiment = experiment;
  report.config = config_to_json(ck.config);
  report.config["corpus"] = o.corpus;
  report.config["mask"] = o.mask;
  report.config["learning_rate"] = o.train.learning_rate;
  report.config["weight_decay"] = o.train.weight_decay;
  report.config["batch_size"] = o.train.batch_size;
  report.config["epochs"] = o.train.epochs;
  report.config["validation_fraction"] = o.train.validation_fraction;
  report.config["freeze_embed"] = o.hooks.freeze_embed;
  report.config["head_dropout"] = o.hooks.head_dropout;
  report.rows = Table({"epoch", "train_loss", "val_loss"});
  for (size_t e = 0; e < result.curve.size(); ++e)
    report.rows.add_row({static_cast<int64_t>(e), result.curve[e].train,
                         result.curve[e].val ? format_double(*result.curve[e].val)
                                             : std::string()});
  report.aggregates = {
      {"steps", result.steps},
      {"train_lines", result.train_lines},
      {"val_lines", result.val_lines},
      {"skipped_lines", result.skipped_lines},
      {"final_train_loss", result.curve.empty() ? 0.0 : result.curve.back().train}};
  report.seed = seed;
  return report;
}

void run_model_train(ModelTrainOpts& o) {
  const uint64_t seed = resolve_seed(o.common.seed);
  o.train.seed = seed;
  Vocab vocab = Vocab::load(o.common.vocab);
  auto ck = load_checkpoint<double>(o.common.checkpoint);
  auto corpus = load_lines(o.corpus);
  const auto mask = parse_mask(o.mask);

  auto result = train_lm(corpus, vocab, ck, mask, o.train, o.hooks);
  save_checkpoint_at(result.model, o.output);

  auto report = curve_report("train", result, ck, o, seed);
  report.config["output_checkpoint"] = o.output;
  finish_report(report, o.common, seed);
}

void run_model_info(const std::string& checkpoint) {
  auto ck = load_checkpoint<double>(checkpoint);
  ordered_json out;
  out["config"] = config_to_json(ck.config);
  out["parameters"] = trainable_param_count(ck.config, ComponentMask::full());
  std::cout << out.dump(2) << '\n';
}

// -------------------------------------------------------------- run commands

void run_mlp_sweep(const CommonOpts& c, const HarnessOpts& h, const std::string& layers) {
  const uint64_t seed = resolve_seed(c.seed);
  auto in = load_harness(c, h);
  // "--layers 0..5" runs incremental prefixes of the list, Fig 3a style,
  // with the empty set first as the unpatched baseline.
  const auto ordered = parse_layers(layers);
  std::vector<std::vector<int64_t>> sets = {{}};
  for (size_t n = 1; n <= ordered.size(); ++n)
    sets.emplace_back(ordered.begin(), ordered.begin() + static_cast<int64_t>(n));

  auto report = exp_mlp_sweep<double>(in.samples, in.professions, in.vocab, in.ck, sets,
                                      parse_span_mode(h.mode), pairing_from(h), c.threads, seed);
  report.config["templates"] = h.templates;
  report.config["professions"] = h.professions;
  finish_report(report, c, seed);
}

void run_attn_topk(const CommonOpts& c, const HarnessOpts& h, const std::string& ks,
                   std::optional<int64_t> ceiling) {
  const uint64_t seed = resolve_seed(c.seed);
  auto in = load_harness(c, h);
  const int64_t layer_ceiling = ceiling ? *ceiling : in.ck.config.n_layers - 1;
  auto report = exp_attn_topk<double>(in.samples, in.professions, in.vocab, in.ck,
                                      parse_counts(ks, "k"), layer_ceiling, pairing_from(h),
                                      c.threads, seed);
  report.config["templates"] = h.templates;
  report.config["professions"] = h.professions;
  finish_report(report, c, seed);
}

void run_upper_mlp(const CommonOpts& c, const HarnessOpts& h, int64_t floor) {
  const uint64_t seed = resolve_seed(c.seed);
  auto in = load_harness(c, h);
  auto report = exp_upper_mlp<double>(in.samples, in.professions, in.vocab, in.ck, floor,
                                      pairing_from(h), c.threads, seed);
  report.config["templates"] = h.templates;
  report.config["professions"] = h.professions;
  finish_report(report, c, seed);
}

void run_logit_lens(const CommonOpts& c, const HarnessOpts& h) {
  const uint64_t seed = resolve_seed(c.seed);
  auto in = load_harness(c, h);
  auto report = exp_logit_lens<double>(in.samples, in.ck, c.threads, seed);
  report.config["templates"] = h.templates;
  report.config["professions"] = h.professions;
  finish_report(report, c, seed);
}

struct GenCheckOpts {
  std::string family = "mlp_out";
  std::string layers;
  std::string filter;  // empty -> built-in pronoun set
  int64_t n_samples = 20;
  int64_t n_tokens = 30;
};

void run_gen_check(const CommonOpts& c, const HarnessOpts& h, const GenCheckOpts& g) {
  const uint64_t seed = resolve_seed(c.seed);
  auto in = load_harness(c, h);
  const auto pairing = pairing_from(h);

  std::vector<CounterfactualPair> pairs;
  int64_t pairing_failures = 0;
  for (const auto& s : in.samples) {
    try {
      pairs.push_back(pair_counterfactual(s, in.professions, in.vocab, pairing));
    } catch (const PairingError&) {
      ++pairing_failures;
    }
  }
  if (pairs.empty()) throw ConfigError("no sample could be counterfactually paired");

  GenPatchConfig patch;
  patch.family = parse_site(g.family);
  if (!g.layers.empty()) patch.layers = parse_layers(g.layers);
  patch.span_mode = parse_span_mode(h.mode);

  const GenderWordFilter filter =
      g.filter.empty() ? GenderWordFilter({"he", "him"}, {"she", "her"},
                                          {{"he", "she"}, {"him", "her"}})
                       : GenderWordFilter::load(g.filter);
  auto report = exp_generation_check<double>(pairs, in.ck, in.vocab, filter, patch, g.n_samples,
                                             g.n_tokens, seed, c.threads);
  report.config["templates"] = h.templates;
  report.config["professions"] = h.professions;
  report.config["pairing_failures"] = pairing_failures;
  finish_report(report, c, seed);
}

struct ProbeOpts {
  std::string prompt;
  std::string counter;
  std::string family = "mlp_out";
  std::string layers;
  std::string where = "differing";
  int64_t top_n = 10;
};

void run_feature_probe(const CommonOpts& c, const ProbeOpts& p) {
  const uint64_t seed = resolve_seed(c.seed);
  Vocab vocab = Vocab::load(c.vocab);
  auto ck = load_checkpoint<double>(c.checkpoint);

  ProbeConfig probe;
  probe.family = parse_site(p.family);
  if (!p.layers.empty()) probe.layers = parse_layers(p.layers);
  if (p.where == "differing") probe.where = ProbeConfig::Where::differing_span;
  else if (p.where == "final") probe.where = ProbeConfig::Where::final_token;
  else throw ConfigError("bad --where '" + p.where + "' (want differing | final)");

  auto result = exp_feature_probe<double>(p.prompt, p.counter, ck, vocab, probe, p.top_n);

  ExperimentReport report;
  report.experiment = "feature_probe";
  report.config = config_to_json(ck.config);
  report.config["prompt"] = p.prompt;
  report.config["counter_prompt"] = p.counter;
  report.config["family"] = p.family;
  report.config["layers"] = probe.layers;
  report.config["where"] = p.where;
  report.config["top_n"] = p.top_n;
  report.rows = Table({"list", "rank", "token", "spelling", "prob"});
  auto add_list = [&](const char* name, const std::vector<TokenProb>& list) {
    for (size_t i = 0; i < list.size(); ++i)
      report.rows.add_row({std::string(name), static_cast<int64_t>(i), list[i].token,
                           list[i].spelling, list[i].prob});
  };
  add_list("before", result.before);
  add_list("after", result.after);
  add_list("entered", result.entered);
  add_list("left", result.left);
  report.aggregates = {{"differing_start", result.differing.start},
                       {"differing_end", result.differing.end},
                       {"n_entered", static_cast<int64_t>(result.entered.size())},
                       {"n_left", static_cast<int64_t>(result.left.size())}};
  finish_report(report, c, seed);
}

// ------------------------------------------------------------ other commands

struct DebiasOpts {
  CommonOpts common;
  std::string corpus;
  std::string pairs;
  std::string neutral;
  std::string mask;
  std::string output;
  TrainConfig train;
};

void run_debias(DebiasOpts& o) {
  const uint64_t seed = resolve_seed(o.common.seed);
  o.train.seed = seed;
  Vocab vocab = Vocab::load(o.common.vocab);
  auto ck = load_checkpoint<double>(o.common.checkpoint);
  auto corpus = load_lines(o.corpus);
  auto pairs = load_minimal_pairs(o.pairs);
  auto neutral = load_lines(o.neutral);
  const auto mask = parse_mask(o.mask);

  auto result = debias_run(ck, mask, corpus, pairs, neutral, vocab, o.train);
  save_checkpoint_at(result.model, o.output);

  ExperimentReport report;
  report.experiment = "debias";
  report.config = config_to_json(ck.config);
  report.config["corpus"] = o.corpus;
  report.config["pairs"] = o.pairs;
  report.config["neutral"] = o.neutral;
  report.config["mask"] = o.mask;
  report.config["learning_rate"] = o.train.learning_rate;
  report.config["weight_decay"] = o.train.weight_decay;
  report.config["batch_size"] = o.train.batch_size;
  report.config["epochs"] = o.train.epochs;
  report.config["validation_fraction"] = o.train.validation_fraction;
  report.config["output_checkpoint"] = o.output;
  report.rows = Table({"component", "trainable_params", "preference_before", "preference_after",
                       "perplexity_before", "perplexity_after"});
  report.rows.add_row({result.component, result.trainable_params, result.preference_before,
                       result.preference_after, result.perplexity_before,
                       result.perplexity_after});
  report.aggregates = result.to_json();
  finish_report(report, o.common, seed);
}

void run_eval_preference(const CommonOpts& c, const std::string& pairs_path) {
  const uint64_t seed = resolve_seed(c.seed);
  Vocab vocab = Vocab::load(c.vocab);
  auto ck = load_checkpoint<double>(c.checkpoint);
  auto pairs = load_minimal_pairs(pairs_path);
  if (pairs.empty()) throw ConfigError("pairs file '" + pairs_path + "' has no pairs");

  ExperimentReport report;
  report.experiment = "preference";
  report.config = config_to_json(ck.config);
  report.config["pairs"] = pairs_path;
  report.rows =
      Table({"pair", "category", "logprob_stereo", "logprob_anti", "stereotypical"});

  auto rows = parallel_map<std::vector<Cell>>(
      static_cast<int64_t>(pairs.size()), c.threads, [&](int64_t i) -> std::vector<Cell> {
        const auto& p = pairs[static_cast<size_t>(i)];
        const double lp_s = sequence_logprob<double>(p.stereo_text, ck, vocab);
        const double lp_a = sequence_logprob<double>(p.anti_text, ck, vocab);
        return {i, p.category, lp_s, lp_a, lp_s >= lp_a};
      });
  for (auto& row : rows) report.rows.add_row(std::move(row));

  int64_t stereo = 0;
  std::map<std::string, std::pair<int64_t, int64_t>> per_category;  // n, stereo
  for (const auto& row : report.rows.rows) {
    auto& bucket = per_category[std::get<std::string>(row[1])];
    ++bucket.first;
    if (std::get<bool>(row[4])) {
      ++stereo;
      ++bucket.second;
    }
  }
  ordered_json cats = ordered_json::array();
  for (const auto& [cat, counts] : per_category)
    cats.push_back({{"category", cat},
                    {"n", counts.first},
                    {"fraction", fraction(counts.second, counts.first)}});
  report.aggregates = {{"n", static_cast<int64_t>(pairs.size())},
                       {"stereotypical", stereo},
                       {"preference_fraction", fraction(stereo, static_cast<int64_t>(pairs.size()))},
                       {"per_category", cats}};
  finish_report(report, c, seed);
}

struct SynthOpts {
  CommonOpts common;
  SynthCorpusSpec spec;
};

void run_data_synth(const SynthOpts& o) {
  const uint64_t seed = resolve_seed(o.common.seed);
  SynthCorpusSpec spec = o.spec;
  spec.seed = seed;
  auto corpus = gen_synth_corpus(spec);

  const fs::path dir(o.common.out);
  fs::create_directories(dir);
  write_lines(dir / "synth_corpus.txt", corpus.lines);
  write_lines(dir / "synth_counterfactual.txt", corpus.counterfactual);
  write_lines(dir / "synth_neutral.txt", corpus.neutral);
  write_lines(dir / "synth_templates.txt", corpus.templates);
  corpus.vocab.save((dir / "synth_vocab.txt").string());

  {
    std::ofstream f(dir / "synth_pairs.jsonl", std::ios::binary);
    if (!f) throw ConfigError("cannot write synth_pairs.jsonl");
    for (const auto& p : corpus.pairs) {
      ordered_json j{{"stereo", p.stereo_text}, {"anti", p.anti_text}, {"category", p.category}};
      f << j.dump() << '\n';
    }
  }
  {
    ordered_json j{{"male", corpus.professions.male}, {"female", corpus.professions.female}};
    std::ofstream f(dir / "synth_professions.json", std::ios::binary);
    if (!f) throw ConfigError("cannot write synth_professions.json");
    f << j.dump(2) << '\n';
  }

  ordered_json summary;
  summary["command"] = "data synth";
  summary["seed"] = seed;
  summary["professions_per_gender"] = spec.professions_per_gender;
  summary["bias_strength"] = spec.bias_strength;
  summary["size"] = spec.size;
  summary["lines"] = corpus.lines.size();
  summary["neutral_lines"] = corpus.neutral.size();
  summary["pairs"] = corpus.pairs.size();
  summary["vocab_size"] = corpus.vocab.size();
  std::ofstream f(dir / "synth.json", std::ios::binary);
  if (!f) throw ConfigError("cannot write synth.json");
  f << summary.dump(2) << '\n';
  std::cout << (dir / "synth.json").string() << '\n';
}

void run_filter_perturb(const CommonOpts& c, const std::string& input,
                        const std::string& filter_path) {
  const uint64_t seed = resolve_seed(c.seed);
  auto records = load_perturbation_corpus(input);
  auto filter = GenderWordFilter::load(filter_path);
  auto outcome = filter_perturbation_corpus(records, filter);

  const fs::path dir(c.out);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "filtered.jsonl", std::ios::binary);
    if (!f) throw ConfigError("cannot write filtered.jsonl");
    for (const auto& r : outcome.kept) {
      ordered_json j{{"original", r.original}, {"perturbed", r.perturbed}};
      f << j.dump() << '\n';
    }
  }

  ExperimentReport report;
  report.experiment = "filter_perturb";
  report.config = {{"input", input}, {"filter", filter_path}};
  report.rows = Table({"original", "perturbed"});
  for (const auto& r : outcome.kept) report.rows.add_row({r.original, r.perturbed});
  report.aggregates = {{"input_records", static_cast<int64_t>(records.size())},
                       {"kept", static_cast<int64_t>(outcome.kept.size())},
                       {"dropped", outcome.dropped},
                       {"malformed", outcome.malformed}};
  finish_report(report, c, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchlens: activation patching, attribution, and targeted debiasing "
               "for a small decoder-only transformer"};
  app.require_subcommand(1);

  // ---- model ----
  auto* model = app.add_subcommand("model", "create, train, and inspect checkpoints");
  model->require_subcommand(1);

  ModelInitOpts init_opts;
  auto* minit = model->add_subcommand("init", "random-init a checkpoint");
  add_common(minit, init_opts.common, /*needs_model=*/false);
  minit->add_option("--vocab", init_opts.common.vocab, "vocabulary file")->required();
  minit->add_option("--config", init_opts.config_path, "model config JSON");
  minit->add_option("--preset", init_opts.preset, "named config preset: toy");
  minit->add_option("--output", init_opts.output, "checkpoint manifest to write")->required();
  minit->callback([&] { run_model_init(init_opts); });

  ModelTrainOpts train_opts;
  auto* mtrain = model->add_subcommand("train", "LM-train a checkpoint on a line corpus");
  add_common(mtrain, train_opts.common);
  mtrain->add_option("--corpus", train_opts.corpus, "training corpus, one sentence per line")
      ->required();
  mtrain->add_option("--mask", train_opts.mask, "trainable components (full | none | mlp:... | attn:...)");
  mtrain->add_option("--output", train_opts.output, "checkpoint manifest to write")->required();
  add_train_flags(mtrain, train_opts.train);
  mtrain->add_flag("--freeze-embed", train_opts.hooks.freeze_embed,
                   "keep the embedding matrix fixed");
  mtrain->add_option("--head-dropout", train_opts.hooks.head_dropout,
                     "per-batch probability of silencing each attention head");
  mtrain->callback([&] { run_model_train(train_opts); });

  std::string info_checkpoint;
  auto* minfo = model->add_subcommand("info", "print config and parameter count");
  minfo->add_option("--checkpoint", info_checkpoint, "checkpoint manifest (.json)")->required();
  minfo->callback([&] { run_model_info(info_checkpoint); });

  // ---- run ----
  auto* run = app.add_subcommand("run", "experiment runners");
  run->require_subcommand(1);

  CommonOpts sweep_common;
  HarnessOpts sweep_harness;
  std::string sweep_layers;
  auto* sweep = run->add_subcommand("mlp-sweep",
                                    "incremental MLP-prefix patching at the profession span");
  add_common(sweep, sweep_common);
  add_harness(sweep, sweep_harness);
  sweep->add_option("--layers", sweep_layers, "layer list; prefixes of it are swept")->required();
  sweep->callback([&] { run_mlp_sweep(sweep_common, sweep_harness, sweep_layers); });

  CommonOpts topk_common;
  HarnessOpts topk_harness;
  std::string topk_ks = "1";
  std::optional<int64_t> topk_ceiling;
  auto* topk = run->add_subcommand("attn-topk",
                                   "attribution-ranked top-k head and grouped-layer patching");
  add_common(topk, topk_common);
  add_harness(topk, topk_harness);
  topk->add_option("--k", topk_ks, "comma-separated k values");
  topk->add_option("--layer-ceiling", topk_ceiling,
                   "highest layer (0-based, inclusive) eligible for ranking");
  topk->callback([&] { run_attn_topk(topk_common, topk_harness, topk_ks, topk_ceiling); });

  CommonOpts upper_common;
  HarnessOpts upper_harness;
  int64_t upper_floor = 0;
  auto* upper = run->add_subcommand("upper-mlp",
                                    "patch MLPs of layers >= floor at the final position");
  add_common(upper, upper_common);
  add_harness(upper, upper_harness);
  upper->add_option("--layer-floor", upper_floor, "first patched layer (0-based)")->required();
  upper->callback([&] { run_upper_mlp(upper_common, upper_harness, upper_floor); });

  CommonOpts lens_common;
  HarnessOpts lens_harness;
  auto* lens = run->add_subcommand("logit-lens",
                                   "per-layer logit order of the target pronouns");
  add_common(lens, lens_common);
  add_harness(lens, lens_harness);
  lens->callback([&] { run_logit_lens(lens_common, lens_harness); });

  CommonOpts gen_common;
  HarnessOpts gen_harness;
  GenCheckOpts gen_opts;
  auto* gen = run->add_subcommand("gen-check",
                                  "greedy generations with and without patches, audit flags");
  add_common(gen, gen_common);
  add_harness(gen, gen_harness);
  gen->add_option("--family", gen_opts.family, "patched site family")
      ->check(CLI::IsMember({"mlp_out", "resid_pre", "attn_head_out"}));
  gen->add_option("--layers", gen_opts.layers, "patched layers; empty = unpatched control");
  gen->add_option("--filter", gen_opts.filter,
                  "gender filter JSON; default is the built-in pronoun set");
  gen->add_option("--n-samples", gen_opts.n_samples, "sampled pairs");
  gen->add_option("--n-tokens", gen_opts.n_tokens, "tokens to generate");
  gen->callback([&] { run_gen_check(gen_common, gen_harness, gen_opts); });

  CommonOpts probe_common;
  ProbeOpts probe_opts;
  auto* probe = run->add_subcommand("feature-probe",
                                    "top-n token shifts when patching one prompt with another");
  add_common(probe, probe_common);
  probe->add_option("--prompt", probe_opts.prompt, "clean prompt")->required();
  probe->add_option("--counter-prompt", probe_opts.counter, "counterfactual prompt")->required();
  probe->add_option("--family", probe_opts.family, "patched site family");
  probe->add_option("--layers", probe_opts.layers, "patched layers");
  probe->add_option("--where", probe_opts.where, "patch position: differing | final");
  probe->add_option("--top-n", probe_opts.top_n, "list length");
  probe->callback([&] { run_feature_probe(probe_common, probe_opts); });

  // ---- debias ----
  DebiasOpts debias_opts;
  auto* debias = app.add_subcommand("debias",
                                    "masked fine-tune on counterfactual text, before/after report");
  add_common(debias, debias_opts.common);
  debias->add_option("--corpus", debias_opts.corpus, "counterfactual corpus")->required();
  debias->add_option("--pairs", debias_opts.pairs, "minimal pairs JSONL")->required();
  debias->add_option("--neutral", debias_opts.neutral, "neutral corpus for perplexity")
      ->required();
  debias->add_option("--mask", debias_opts.mask, "trainable components")->required();
  debias->add_option("--output", debias_opts.output, "debiased checkpoint manifest")->required();
  add_train_flags(debias, debias_opts.train);
  debias->callback([&] { run_debias(debias_opts); });

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluation metrics");
  eval->require_subcommand(1);
  CommonOpts pref_common;
  std::string pref_pairs;
  auto* pref = eval->add_subcommand("preference", "stereotype preference fraction over pairs");
  add_common(pref, pref_common);
  pref->add_option("--pairs", pref_pairs, "minimal pairs JSONL")->required();
  pref->callback([&] { run_eval_preference(pref_common, pref_pairs); });

  // ---- data ----
  auto* data = app.add_subcommand("data", "dataset generation and filtering");
  data->require_subcommand(1);

  SynthOpts synth_opts;
  auto* synth = data->add_subcommand("synth", "generate a planted-bias corpus");
  add_common(synth, synth_opts.common, /*needs_model=*/false);
  synth->add_option("--professions-per-gender", synth_opts.spec.professions_per_gender,
                    "synthetic professions per gender");
  synth->add_option("--bias-strength", synth_opts.spec.bias_strength,
                    "P(pronoun matches planted gender), in [0.5, 1]");
  synth->add_option("--size", synth_opts.spec.size, "biased line count");
  synth->callback([&] { run_data_synth(synth_opts); });

  CommonOpts filter_common;
  std::string filter_input, filter_file;
  auto* fperturb = data->add_subcommand("filter-perturb",
                                        "keep records whose swapped words are gender words");
  add_common(fperturb, filter_common, /*needs_model=*/false);
  fperturb->add_option("--input", filter_input, "perturbation corpus JSONL")->required();
  fperturb->add_option("--filter", filter_file, "gender filter JSON")->required();
  fperturb->callback([&] { run_filter_perturb(filter_common, filter_input, filter_file); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version land here with exit code 0; anything else is a
    // usage problem.
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
