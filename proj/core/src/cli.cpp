#include "cocon/cli.hpp"

#include "cocon/analysis.hpp"
#include "cocon/hash.hpp"
#include "cocon/inference.hpp"
#include "cocon/metrics.hpp"
#include "cocon/pairing.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <climits>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace cocon {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

template <class C, class F>
void for_each_field(C& c, F&& f) {
  f("seed", c.seed);
  f("split_seed", c.split_seed);
  f("split", c.split);
  f("min_turns", c.min_turns);
  f("min_count", c.min_count);
  f("max_vocab", c.max_vocab);
  f("max_len", c.max_len);
  f("embed_dim", c.embed_dim);
  f("filters", c.filters);
  f("filter_width", c.filter_width);
  f("stride", c.stride);
  f("encoder_dim", c.encoder_dim);
  f("dropout", c.dropout);
  f("hard_dropout", c.hard_dropout);
  f("feature_dim", c.feature_dim);
  f("tau_match", c.tau_match);
  f("matcher_hidden", c.matcher_hidden);
  f("min_gap", c.min_gap);
  f("cross_speaker_topic", c.cross_speaker_topic);
  f("lambda", c.lambda);
  f("lr", c.lr);
  f("batch_size", c.batch_size);
  f("patience", c.patience);
  f("max_epochs", c.max_epochs);
  f("train_pairs", c.train_pairs);
  f("valid_pairs", c.valid_pairs);
  f("test_pairs", c.test_pairs);
  f("context_turns", c.context_turns);
  f("context_dim", c.context_dim);
  f("h0_hidden", c.h0_hidden);
  f("h0_dim", c.h0_dim);
  f("hidden", c.hidden);
  f("init_state", c.init_state);
  f("eta", c.eta);
  f("gen_batch_size", c.gen_batch_size);
  f("tau_st_final", c.tau_st_final);
  f("st_anneal_epochs", c.st_anneal_epochs);
  f("st_feedback", c.st_feedback);
  f("agg_iterations", c.agg_iterations);
  f("agg_lr", c.agg_lr);
}

[[noreturn]] void type_error(const std::string& key, const char* want) {
  throw std::invalid_argument("config key '" + key + "' expects " + want);
}

void assign(std::size_t& dst, const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) type_error(key, "a non-negative integer");
  dst = v.get<std::size_t>();
}
void assign(int& dst, const json& v, const std::string& key) {
  if (!v.is_number_integer()) type_error(key, "an integer");
  dst = v.get<int>();
}
void assign(double& dst, const json& v, const std::string& key) {
  if (!v.is_number()) type_error(key, "a number");
  dst = v.get<double>();
}
void assign(bool& dst, const json& v, const std::string& key) {
  if (!v.is_boolean()) type_error(key, "true or false");
  dst = v.get<bool>();
}
void assign(std::string& dst, const json& v, const std::string& key) {
  if (!v.is_string()) type_error(key, "a string");
  dst = v.get<std::string>();
}
void assign(std::array<double, 3>& dst, const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != 3) type_error(key, "an array of three numbers");
  for (std::size_t i = 0; i < 3; ++i) assign(dst[i], v[i], key);
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// --- config flags ---------------------------------------------------------------

struct ConfigFlags {
  std::string preset = "paper";
  std::string config_file;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;
};

void add_config_flags(CLI::App* sub, ConfigFlags& f) {
  sub->add_option("--preset", f.preset, "Default profile")->check(CLI::IsMember({"paper", "desk"}));
  sub->add_option("--config", f.config_file, "JSON config file (defaults < file < flags)");
  const RunConfig defaults;
  for_each_field(defaults, [&](const char* key, const auto&) {
    auto* opt = sub->add_option(dashed(key), f.values[key])->group("Config");
    f.options.emplace_back(key, opt);
  });
}

json flag_value(const std::string& key, const std::string& text) {
  if (key == "split" && text.find('[') == std::string::npos) return json::parse("[" + text + "]");
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

RunConfig resolve_config(const ConfigFlags& f) {
  RunConfig c = f.preset == "desk" ? desk_config() : RunConfig{};
  if (const char* env = std::getenv("COCON_SEED")) {
    try {
      c.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("COCON_SEED is not an integer: ") + env);
    }
  }
  if (!f.config_file.empty()) {
    json j = read_json_file(f.config_file);
    if (!j.is_object()) throw std::invalid_argument("config file must hold a JSON object");
    c = apply_config_json(j, c);
  }
  json flags = json::object();
  for (const auto& [key, opt] : f.options) {
    if (opt->count() > 0) flags[key] = flag_value(key, f.values.at(key));
  }
  return apply_config_json(flags, c);
}

// --- manifests ------------------------------------------------------------------

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::optional<json> config;
  json seeds = json::object();
  std::map<std::string, fs::path> inputs;
};

void write_manifest(const fs::path& out, const Manifest& m) {
  json j;
  j["cocon_version"] = kVersion;
  j["command"] = m.command;
  j["argv"] = m.argv;
  if (m.config) j["config"] = *m.config;
  j["seeds"] = m.seeds;
  json inputs = json::object();
  for (const auto& [name, path] : m.inputs) {
    inputs[name] = {{"path", path.string()}, {"sha256", hash_artifacts(path)}};
  }
  j["inputs"] = inputs;
  j["outputs"] = {{"path", out.string()}, {"sha256", hash_artifacts(out)}};
  write_text(manifest_path(out), j.dump(2) + "\n");
}

// --- model loading --------------------------------------------------------------

struct LoadedExtractors {
  std::optional<ExtractorModel> topic, persona;
  std::optional<Vocabulary> vocab;
  std::vector<fs::path> dirs;
};

LoadedExtractors load_extractors(const std::string& list) {
  LoadedExtractors out;
  for (const auto& d : split_list(list)) {
    fs::path dir(d);
    if (!fs::exists(dir / "config.json")) throw std::runtime_error("checkpoint not found: " + dir.string());
    ExtractorModel m = ExtractorModel::load(dir);
    Vocabulary v = Vocabulary::load(dir / "vocab.txt");
    if (out.vocab && out.vocab->hash() != v.hash()) {
      throw std::invalid_argument("extractors were trained with different vocabularies");
    }
    out.vocab = std::move(v);
    auto& slot = m.kind() == FeatureKind::kTopic ? out.topic : out.persona;
    if (slot) throw std::invalid_argument("two " + to_string(m.kind()) + " extractors given");
    slot.emplace(std::move(m));
    out.dirs.push_back(dir);
  }
  return out;
}

/// Extractor for analysis: a generator bundle (by kind) or a bare extractor
/// checkpoint.
struct AnalysisModel {
  std::optional<ModelBundle> bundle;
  std::optional<ExtractorModel> extractor;
  Vocabulary vocab;
  const ExtractorModel& get(FeatureKind kind) const {
    if (extractor) {
      if (extractor->kind() != kind) throw std::invalid_argument("checkpoint holds a " + to_string(extractor->kind()) + " extractor");
      return *extractor;
    }
    const auto& e = kind == FeatureKind::kTopic ? bundle->topic : bundle->persona;
    if (!e) throw std::invalid_argument("model has no " + to_string(kind) + " extractor");
    return *e;
  }
};

bool is_bundle(const fs::path& dir) { return fs::exists(dir / "agg.json"); }

// --- text inputs ----------------------------------------------------------------

/// Plain text (one utterance per line) or generate/session JSONL.
std::vector<Tokens> read_texts(const fs::path& path, bool hypothesis) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const bool jsonl = path.extension() == ".jsonl" || path.extension() == ".json";
  std::vector<Tokens> out;
  for (std::string line; std::getline(in, line);) {
    if (!jsonl) {
      out.push_back(tokenize(line));
      continue;
    }
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line);
    std::string text;
    if (!hypothesis && j.contains("reference")) {
      text = j["reference"].get<std::string>();
    } else {
      const auto& turns = j.at("turns");
      if (turns.empty()) throw std::invalid_argument("record without turns in " + path.string());
      text = turns.back().at("text").get<std::string>();
    }
    out.push_back(tokenize(text));
  }
  return out;
}

std::vector<FeatureOverride> parse_overrides(const std::vector<std::string>& toggles) {
  std::vector<FeatureOverride> out;
  for (const auto& t : toggles) out.push_back(parse_override(t));
  return out;
}

// --- commands -------------------------------------------------------------------

struct Context {
  std::vector<std::string> argv;
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

void log_config(const Context& ctx, const RunConfig& c) { ctx.err << "config: " << to_json(c).dump() << '\n'; }

struct SynthArgs {
  std::uint64_t seed = 1;
  std::string out, embeddings;
  SynthConfig config;
  std::size_t embed_dim = 16;
};

void cmd_synth(const Context& ctx, const SynthArgs& a, bool seed_given) {
  std::uint64_t seed = a.seed;
  if (!seed_given) {
    if (const char* env = std::getenv("COCON_SEED")) seed = std::stoull(env);
  }
  auto dialogues = synth_corpus(a.config, seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_dialogues(a.out, dialogues);
  Manifest m{"synth", ctx.argv, std::nullopt, {{"seed", seed}}, {}};
  m.config = json{{"n_dialogues", a.config.n_dialogues}, {"n_topics", a.config.n_topics},
                  {"n_personas", a.config.n_personas}, {"turns", a.config.turns},
                  {"topic_vocab", a.config.topic_vocab_size}, {"subtopics", a.config.subtopics}};
  write_manifest(a.out, m);
  if (!a.embeddings.empty()) {
    cooccurrence_embeddings(dialogues, a.embed_dim).save(a.embeddings);
    write_manifest(a.embeddings, Manifest{"synth", ctx.argv, m.config, {{"seed", seed}}, {{"data", a.out}}});
  }
  ctx.err << "wrote " << dialogues.size() << " dialogues to " << a.out << '\n';
}

void cmd_train_extractor(const Context& ctx, const RunConfig& c, const std::string& kind_s, const std::string& mode_s,
                         const std::string& data, const std::string& out) {
  log_config(ctx, c);
  const FeatureKind kind = parse_feature_kind(kind_s);
  const FeatureMode mode = parse_feature_mode(mode_s);
  PreparedData d = prepare_data(data, c);
  PairSplits pairs = make_pair_splits(d, c, kind);
  ExtractorModel model(make_extractor_config(c, kind, mode, d.vocab), c.seed);
  ExtractorHistory h = train_extractor(model, pairs.train, pairs.valid, make_extractor_train_config(c));

  std::vector<std::vector<int>> test_utts;
  for (const auto& dlg : d.split.test) {
    for (const auto& t : dlg.turns) test_utts.push_back(encode_utterance(t, d.vocab));
  }
  json report;
  report["kind"] = to_string(kind);
  report["mode"] = to_string(mode);
  report["best_epoch"] = h.best_epoch;
  report["test_accuracy"] = eval_matching_accuracy(model, pairs.test);
  report["test_mean_abs_offdiag_correlation"] = mean_abs_offdiag_correlation(extract_matrix(model, test_utts, true));
  report["pairs"] = {{"train", pairs.train.size()}, {"valid", pairs.valid.size()}, {"test", pairs.test.size()}};
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_xent", e.train_xent},
                      {"train_decorr", e.train_decorr}, {"valid_loss", e.valid_loss}, {"valid_xent", e.valid_xent},
                      {"valid_decorr", e.valid_decorr}, {"valid_accuracy", e.valid_accuracy}});
  }
  report["epochs"] = epochs;

  model.save(out);
  d.vocab.save(fs::path(out) / "vocab.txt");
  write_text(fs::path(out) / "report.json", report.dump(2) + "\n");
  write_manifest(out, Manifest{"train-extractor", ctx.argv, to_json(c),
                               {{"seed", c.seed}, {"split_seed", c.split_seed}}, {{"data", data}}});
  ctx.err << to_string(kind) << '/' << to_string(mode) << " extractor: best epoch " << h.best_epoch
          << ", test accuracy " << report["test_accuracy"].get<double>() << '\n';
}

void cmd_fit_agg(const Context& ctx, const RunConfig& c, const std::string& extractors, const std::string& data,
                 const std::string& out) {
  log_config(ctx, c);
  LoadedExtractors ex = load_extractors(extractors);
  if (!ex.vocab) throw std::invalid_argument("fit-agg needs at least one extractor");
  PreparedData d = prepare_data(data, c, *ex.vocab);
  auto windows = make_windows(d.split.train, d.vocab, c.context_turns);
  AggWeights agg = fit_agg(windows, {ex.topic ? &*ex.topic : nullptr, ex.persona ? &*ex.persona : nullptr}, c);
  write_text(out, to_json(agg).dump(2) + "\n");
  Manifest m{"fit-agg", ctx.argv, to_json(c), {{"split_seed", c.split_seed}}, {{"data", data}}};
  for (std::size_t i = 0; i < ex.dirs.size(); ++i) m.inputs["extractor" + std::to_string(i)] = ex.dirs[i];
  write_manifest(out, m);
}

void cmd_train_generator(const Context& ctx, const RunConfig& c, const std::string& variant_s,
                         const std::string& extractors, const std::string& data, const std::string& agg_path,
                         const std::string& out) {
  log_config(ctx, c);
  const GeneratorVariant variant = parse_variant(variant_s);
  LoadedExtractors ex = extractors.empty() ? LoadedExtractors{} : load_extractors(extractors);
  if (uses_topic(variant) && !ex.topic) throw std::invalid_argument("variant " + to_string(variant) + " needs a topic extractor");
  if (uses_persona(variant) && !ex.persona) throw std::invalid_argument("variant " + to_string(variant) + " needs a persona extractor");
  if (!uses_topic(variant)) ex.topic.reset();
  if (!uses_persona(variant)) ex.persona.reset();

  PreparedData d = ex.vocab ? prepare_data(data, c, *ex.vocab) : prepare_data(data, c);
  FeatureExtractors fx{ex.topic ? &*ex.topic : nullptr, ex.persona ? &*ex.persona : nullptr};
  auto train = make_windows(d.split.train, d.vocab, c.context_turns);
  auto valid = make_windows(d.split.valid, d.vocab, c.context_turns);
  auto test = make_windows(d.split.test, d.vocab, c.context_turns);

  AggWeights agg;
  agg.k = c.context_turns;
  if (!agg_path.empty()) {
    agg = agg_weights_from_json(read_json_file(agg_path));
  } else if (uses_topic(variant)) {
    agg = fit_agg(train, fx, c);
  }

  GeneratorModel gen(make_generator_config(c, variant, d.vocab, ex.topic ? ex.topic->feature_dim() : 0,
                                           ex.persona ? ex.persona->feature_dim() : 0),
                     c.seed);
  GeneratorHistory h = train_generator(gen, train, valid, fx, make_generator_train_config(c));
  GeneratorLoss test_loss = evaluate_generator(gen, test, fx, c.gen_batch_size);

  json report;
  report["variant"] = to_string(variant);
  report["best_epoch"] = h.best_epoch;
  report["test_mle"] = test_loss.mle;
  if (uses_topic(variant)) report["test_cycle"] = test_loss.cycle;
  report["extractor_hashes"] = {{"topic_before", h.topic_hash_before}, {"topic_after", h.topic_hash_after},
                                {"persona_before", h.persona_hash_before}, {"persona_after", h.persona_hash_after}};
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"tau", e.tau}, {"train_loss", e.train_loss}, {"train_mle", e.train_mle},
                      {"train_cycle", e.train_cycle}, {"valid_loss", e.valid_loss}, {"valid_mle", e.valid_mle},
                      {"valid_cycle", e.valid_cycle}});
  }
  report["epochs"] = epochs;

  ModelBundle bundle{std::move(gen), std::move(ex.topic), std::move(ex.persona), std::move(agg), d.vocab};
  save_bundle(out, bundle);
  write_text(fs::path(out) / "report.json", report.dump(2) + "\n");
  Manifest m{"train-generator", ctx.argv, to_json(c), {{"seed", c.seed}, {"split_seed", c.split_seed}}, {{"data", data}}};
  for (std::size_t i = 0; i < ex.dirs.size(); ++i) m.inputs["extractor" + std::to_string(i)] = ex.dirs[i];
  if (!agg_path.empty()) m.inputs["agg"] = agg_path;
  write_manifest(out, m);
  ctx.err << to_string(variant) << " generator: best epoch " << h.best_epoch << ", test MLE " << test_loss.mle << '\n';
}

void cmd_generate(const Context& ctx, const std::string& model, const std::string& context, const std::string& out,
                  const std::string& windows, const std::vector<std::string>& toggles) {
  InferenceEngine engine = InferenceEngine::load(model);
  const auto overrides = parse_overrides(toggles);
  const std::size_t k = engine.context_turns();
  LoadResult data = load_dialogues(context, k);
  std::ostringstream lines;
  std::size_t n = 0;
  for (const auto& d : data.dialogues) {
    std::vector<std::size_t> targets;  // 0-based index of the turn to produce
    if (windows == "last") {
      targets.push_back(d.turns.size());
    } else {
      for (std::size_t t = k; t < d.turns.size(); ++t) targets.push_back(t);
    }
    for (std::size_t t : targets) {
      std::span<const Turn> ctx_turns(d.turns.data() + t - k, k);
      Response r = engine.respond(engine.encode_context(ctx_turns), overrides);
      std::vector<SessionTurn> turns;
      for (const auto& turn : ctx_turns) turns.push_back({turn, false, std::nullopt});
      Turn gen;
      gen.speaker = static_cast<int>(t % 2);
      gen.text = r.text;
      turns.push_back({gen, true, r.diagnostics});
      json j = json::parse(session_to_json(d.id + "@" + std::to_string(t + 1), turns));
      if (t < d.turns.size()) j["reference"] = d.turns[t].text;
      lines << j.dump() << '\n';
      ++n;
    }
  }
  write_text(out, lines.str());
  write_manifest(out, Manifest{"generate", ctx.argv, std::nullopt, {}, {{"model", model}, {"context", context}}});
  ctx.err << "generated " << n << " responses\n";
}

void cmd_session(const Context& ctx, const std::string& model, const std::string& seed_turns, std::size_t n_future,
                 std::optional<std::size_t> seed_len, const std::vector<std::string>& toggles, const std::string& out) {
  InferenceEngine engine = InferenceEngine::load(model);
  const auto overrides = parse_overrides(toggles);
  const std::size_t len = seed_len.value_or(engine.context_turns());
  LoadResult data = load_dialogues(seed_turns, len);
  std::ostringstream lines;
  for (const auto& d : data.dialogues) {
    std::span<const Turn> seed(d.turns.data(), len);
    auto session = generate_session(engine, seed, n_future, overrides);
    lines << session_to_json(d.id, session) << '\n';
  }
  if (out.empty()) {
    ctx.out << lines.str();
    return;
  }
  write_text(out, lines.str());
  write_manifest(out, Manifest{"session", ctx.argv, std::nullopt, {}, {{"model", model}, {"seed_turns", seed_turns}}});
}

void cmd_evaluate(const Context& ctx, const std::string& hyp, const std::string& ref, const std::string& embeddings,
                  bool human, const std::string& out) {
  auto refs = read_texts(ref, false);
  MetricsReport report;
  Manifest m{"evaluate", ctx.argv, std::nullopt, {}, {{"ref", ref}}};
  if (human) {
    report = diversity_report(refs);
  } else {
    if (hyp.empty()) throw std::invalid_argument("--hyp is required unless --human is given");
    auto hyps = read_texts(hyp, true);
    std::optional<EmbeddingTable> table;
    if (!embeddings.empty()) {
      table = EmbeddingTable::load(embeddings);
      m.inputs["embeddings"] = embeddings;
    }
    report = evaluate_corpus(hyps, refs, table ? &*table : nullptr);
    m.inputs["hyp"] = hyp;
  }
  write_text(out, to_json(report).dump(2) + "\n");
  write_manifest(out, m);
}

struct AnalyzeArgs {
  std::string action, model, data, out, feature, kind = "topic";
  std::size_t min_occurrence = 20, top_k = 10, n_max = 4, permutations = 20;
  std::uint64_t seed = 1;
};

void cmd_analyze(const Context& ctx, const AnalyzeArgs& a) {
  const fs::path dir(a.model);
  if (!fs::exists(dir / "config.json")) throw std::runtime_error("checkpoint not found: " + dir.string());
  AnalysisModel am;
  if (is_bundle(dir)) {
    am.bundle.emplace(load_bundle(dir));
    am.vocab = am.bundle->vocab;
  } else {
    am.extractor.emplace(ExtractorModel::load(dir));
    am.vocab = Vocabulary::load(dir / "vocab.txt");
  }
  Manifest m{"analyze", ctx.argv, std::nullopt, {}, {{"model", a.model}, {"data", a.data}}};

  if (a.action == "toggle") {
    if (!am.bundle) throw std::invalid_argument("toggle needs a generator checkpoint");
    if (a.feature.empty()) throw std::invalid_argument("toggle needs --feature");
    InferenceEngine engine(std::move(*am.bundle));
    if (engine.variant() != GeneratorVariant::kTPBin) throw std::invalid_argument("toggle audit needs the tp-bin variant");
    const std::size_t k = engine.context_turns();
    LoadResult data = load_dialogues(a.data, k);
    std::vector<std::vector<std::vector<int>>> contexts;
    for (const auto& d : data.dialogues) {
      for (std::size_t t = 0; t + k <= d.turns.size(); ++t) {
        contexts.push_back(engine.encode_context(std::span<const Turn>(d.turns.data() + t, k)));
      }
    }
    FeatureOverride f = parse_override(a.feature + "=1");
    ToggleReport r = toggle_success_rate(engine, contexts, f.kind, f.index);
    json j = {{"feature", a.feature}, {"contexts", r.contexts}, {"eligible", r.eligible},
              {"successes", r.successes}, {"success_rate", r.success_rate}, {"base_active", r.base_active},
              {"base_rate", r.base_rate}};
    write_text(a.out, j.dump(2) + "\n");
    write_manifest(a.out, m);
    return;
  }

  const FeatureKind kind = parse_feature_kind(a.kind);
  const ExtractorModel& ex = am.get(kind);
  LoadResult data = load_dialogues(a.data, 1);
  auto sentences = collect_sentences(data.dialogues, am.vocab, kind);
  if (a.action == "ngrams") {
    NgramReport r = ngram_report(ex, sentences, {a.n_max, a.min_occurrence, a.top_k});
    json features = json::array();
    for (std::size_t j = 0; j < r.per_feature.size(); ++j) {
      json list = json::array();
      for (const auto& p : r.per_feature[j]) {
        list.push_back({{"ngram", p.ngram}, {"occurrences", p.occurrences}, {"mean_activation", p.mean_activation}});
      }
      features.push_back({{"index", j}, {"ngrams", list}});
    }
    json j = {{"kind", a.kind}, {"n_max", a.n_max}, {"min_occurrence", a.min_occurrence}, {"top_k", a.top_k},
              {"qualifying", r.qualifying}, {"features", features}};
    write_text(a.out, j.dump(2) + "\n");
  } else if (a.action == "alignment") {
    AlignmentReport r = alignment_score(ex, sentences, a.permutations, a.seed);
    json j = {{"kind", a.kind},
              {"label_values", r.label_values},
              {"best_feature", r.best_feature},
              {"best_mi", r.best_mi},
              {"baseline_mi", r.baseline_mi},
              {"mean_best_mi", r.mean_best_mi},
              {"mean_baseline_mi", r.mean_baseline_mi},
              {"permutations", r.permutations},
              {"mi", r.mi}};
    write_text(a.out, j.dump(2) + "\n");
  } else {
    export_features(a.out, ex, sentences);
  }
  write_manifest(a.out, m);
}

/// Reruns a manifest's command line and compares the outputs against the
/// recorded hashes. Returns the command's exit code, or 1 on a mismatch.
int cmd_replay(const Context& ctx, const std::string& manifest, const std::string& new_out) {
  json j = read_json_file(manifest);
  auto argv = j.at("argv").get<std::vector<std::string>>();
  fs::path out = j.at("outputs").at("path").get<std::string>();
  if (!new_out.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--out" && i + 1 < argv.size()) {
        argv[i + 1] = new_out;
        replaced = true;
      } else if (argv[i].rfind("--out=", 0) == 0) {
        argv[i] = "--out=" + new_out;
        replaced = true;
      }
    }
    if (!replaced) throw std::invalid_argument("manifest command has no --out to redirect");
    out = new_out;
  }
  const int rc = main_dispatch(argv, ctx.in, ctx.out, ctx.err);
  if (rc != 0) return rc;
  auto expected = j.at("outputs").at("sha256").get<std::map<std::string, std::string>>();
  auto actual = hash_artifacts(out);
  std::size_t mismatches = 0;
  for (const auto& [name, digest] : expected) {
    auto it = actual.find(name);
    if (it == actual.end() || it->second != digest) {
      ctx.err << "differs: " << name << '\n';
      ++mismatches;
    }
  }
  for (const auto& [name, digest] : actual) {
    if (!expected.count(name)) {
      ctx.err << "unexpected: " << name << '\n';
      ++mismatches;
    }
  }
  ctx.out << "replay: " << expected.size() << " artifacts, " << mismatches << " mismatches\n";
  return mismatches == 0 ? 0 : 1;
}

}  // namespace

// --- public helpers -------------------------------------------------------------

RunConfig desk_config() {
  RunConfig c;
  c.max_len = 16;
  c.embed_dim = 32;
  c.filters = 48;
  c.encoder_dim = 64;
  c.dropout = 0.3;
  c.hard_dropout = 0.1;
  c.feature_dim = 32;
  c.matcher_hidden = 64;
  c.lr = 3e-3;
  c.batch_size = 128;
  c.max_epochs = 30;
  c.train_pairs = 12000;
  c.valid_pairs = 1000;
  c.test_pairs = 1000;
  c.context_dim = 64;
  c.h0_hidden = 64;
  c.h0_dim = 64;
  c.hidden = 64;
  c.gen_batch_size = 64;
  c.eta = 0.01;
  return c;
}

json to_json(const RunConfig& c) {
  json j = json::object();
  for_each_field(c, [&](const char* key, const auto& v) { j[key] = v; });
  return j;
}

RunConfig apply_config_json(const json& j, RunConfig base) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    for_each_field(base, [&](const char* name, auto& field) {
      if (key == name) {
        assign(field, value, key);
        found = true;
      }
    });
    if (!found) throw std::invalid_argument("unknown config key '" + key + "'");
  }
  return base;
}

ExtractorConfig make_extractor_config(const RunConfig& c, FeatureKind kind, FeatureMode mode, const Vocabulary& vocab) {
  ExtractorConfig e;
  e.kind = kind;
  e.mode = mode;
  e.cnn.vocab_size = vocab.size();
  e.cnn.max_len = vocab.max_len();
  e.cnn.embed_dim = c.embed_dim;
  e.cnn.filters = c.filters;
  e.cnn.width = c.filter_width;
  e.cnn.stride = c.stride;
  e.cnn.out_dim = c.encoder_dim;
  e.cnn.dropout = mode == FeatureMode::kHard ? c.hard_dropout : c.dropout;
  e.feature_dim = c.feature_dim;
  e.tau_match = c.tau_match;
  e.matcher_hidden = c.matcher_hidden;
  return e;
}

ExtractorTrainConfig make_extractor_train_config(const RunConfig& c) {
  ExtractorTrainConfig t;
  t.lambda = c.lambda;
  t.batch_size = c.batch_size;
  t.lr = c.lr;
  t.patience = c.patience;
  t.max_epochs = c.max_epochs;
  t.seed = c.seed;
  return t;
}

GeneratorConfig make_generator_config(const RunConfig& c, GeneratorVariant variant, const Vocabulary& vocab,
                                      std::size_t topic_dim, std::size_t persona_dim) {
  GeneratorConfig g;
  g.variant = variant;
  g.context_turns = c.context_turns;
  g.cnn.vocab_size = vocab.size();
  g.cnn.max_len = vocab.max_len();
  g.cnn.embed_dim = c.embed_dim;
  g.cnn.filters = c.filters;
  g.cnn.width = c.filter_width;
  g.cnn.stride = c.stride;
  g.cnn.out_dim = c.encoder_dim;
  g.cnn.dropout = c.dropout;
  g.context_dim = c.context_dim;
  g.h0_hidden = c.h0_hidden;
  g.h0_dim = c.h0_dim;
  g.hidden = c.hidden;
  g.topic_dim = uses_topic(variant) ? topic_dim : 0;
  g.persona_dim = uses_persona(variant) ? persona_dim : 0;
  g.init_state = c.init_state;
  return g;
}

GeneratorTrainConfig make_generator_train_config(const RunConfig& c) {
  GeneratorTrainConfig t;
  t.eta = c.eta;
  t.lr = c.lr;
  t.batch_size = c.gen_batch_size;
  t.patience = c.patience;
  t.max_epochs = c.max_epochs;
  t.tau_final = c.tau_st_final;
  t.anneal_epochs = c.st_anneal_epochs;
  t.st_feedback = c.st_feedback;
  t.seed = c.seed;
  return t;
}

PairingOptions make_pairing_options(const RunConfig& c) {
  PairingOptions o;
  o.min_gap = c.min_gap;
  o.cross_speaker_topic_positives = c.cross_speaker_topic;
  return o;
}

PreparedData prepare_data(const fs::path& path, const RunConfig& c) {
  LoadResult r = load_dialogues(path, c.min_turns);
  PreparedData d;
  d.skipped_short = r.skipped_short;
  d.parse_errors = r.errors.size();
  for (const auto& e : r.errors) std::cerr << path.string() << ':' << e.line << ": " << e.message << '\n';
  d.split = split_corpus(std::move(r.dialogues), c.split, c.split_seed);
  d.vocab = build_vocab(d.split.train, c.min_count, c.max_vocab, c.max_len);
  return d;
}

PreparedData prepare_data(const fs::path& path, const RunConfig& c, const Vocabulary& vocab) {
  LoadResult r = load_dialogues(path, c.min_turns);
  PreparedData d;
  d.skipped_short = r.skipped_short;
  d.parse_errors = r.errors.size();
  d.split = split_corpus(std::move(r.dialogues), c.split, c.split_seed);
  d.vocab = vocab;
  return d;
}

PairSplits make_pair_splits(const PreparedData& d, const RunConfig& c, FeatureKind kind) {
  const auto opts = make_pairing_options(c);
  auto even = [](std::size_t n) { return n - n % 2; };
  PairSplits p;
  p.train = shuffle_and_order(make_pairs(kind, d.split.train, d.vocab, even(c.train_pairs), c.seed, opts).pairs, c.seed + 1);
  p.valid = shuffle_and_order(make_pairs(kind, d.split.valid, d.vocab, even(c.valid_pairs), c.seed + 2, opts).pairs, c.seed + 3);
  p.test = shuffle_and_order(make_pairs(kind, d.split.test, d.vocab, even(c.test_pairs), c.seed + 4, opts).pairs, c.seed + 5);
  return p;
}

AggWeights fit_agg(std::span<const GenWindow> windows, const FeatureExtractors& extractors, const RunConfig& c) {
  AggWeights agg;
  agg.k = c.context_turns;
  const AggFitConfig fit{c.agg_iterations, c.agg_lr};
  std::vector<ag::Matrix> wf;
  ag::Matrix targets;
  if (extractors.topic) {
    window_feature_data(*extractors.topic, windows, wf, targets);
    agg.topic = fit_agg_weights(wf, targets, agg.k, FeatureKind::kTopic, fit);
  }
  if (extractors.persona) {
    window_feature_data(*extractors.persona, windows, wf, targets);
    agg.persona = fit_agg_weights(wf, targets, agg.k, FeatureKind::kPersona, fit);
  }
  return agg;
}

std::map<std::string, std::string> hash_artifacts(const fs::path& root) {
  auto skip = [](const fs::path& p) {
    const std::string name = p.filename().string();
    return name == "manifest.json" || (name.size() > 14 && name.ends_with(".manifest.json"));
  };
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(root)) {
    out["."] = sha256_file(root);
    return out;
  }
  if (!fs::is_directory(root)) throw std::runtime_error("no such artifact: " + root.string());
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || skip(e.path())) continue;
    out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
  }
  return out;
}

fs::path manifest_path(const fs::path& out) {
  if (fs::is_directory(out)) return out / "manifest.json";
  return fs::path(out.string() + ".manifest.json");
}

// --- dispatch -------------------------------------------------------------------

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, INT_MAX / 2);
  mallopt(M_TRIM_THRESHOLD, INT_MAX / 2);
#endif
}

int main_dispatch(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised topic/persona features for consistent dialogue generation", "cocon"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic corpus with planted topics and personas");
  s_synth->add_option("--seed", synth.seed, "Generator seed (falls back to COCON_SEED)");
  s_synth->add_option("--out", synth.out, "Output JSONL")->required();
  s_synth->add_option("--n-dialogues", synth.config.n_dialogues)->capture_default_str();
  s_synth->add_option("--n-topics", synth.config.n_topics)->capture_default_str();
  s_synth->add_option("--n-personas", synth.config.n_personas)->capture_default_str();
  s_synth->add_option("--turns", synth.config.turns)->capture_default_str();
  s_synth->add_option("--topic-vocab", synth.config.topic_vocab_size)->capture_default_str();
  s_synth->add_option("--subtopics", synth.config.subtopics)->capture_default_str();
  s_synth->add_option("--embeddings", synth.embeddings, "Also write co-occurrence word vectors here");
  s_synth->add_option("--embed-dim", synth.embed_dim)->capture_default_str();

  ConfigFlags te_flags;
  std::string te_kind, te_mode = "soft", te_data, te_out;
  auto* s_te = app.add_subcommand("train-extractor", "Train a topic or persona feature extractor");
  s_te->add_option("--kind", te_kind)->required()->check(CLI::IsMember({"topic", "persona"}));
  s_te->add_option("--mode", te_mode)->check(CLI::IsMember({"soft", "hard"}))->capture_default_str();
  s_te->add_option("--data", te_data, "Dialogue JSONL")->required();
  s_te->add_option("--out", te_out, "Checkpoint directory")->required();
  add_config_flags(s_te, te_flags);

  ConfigFlags tg_flags;
  std::string tg_variant, tg_extractors, tg_data, tg_out, tg_agg;
  auto* s_tg = app.add_subcommand("train-generator", "Train a response generator");
  s_tg->add_option("--variant", tg_variant)->required()->check(CLI::IsMember({"s2s", "t", "tp", "tp-bin"}));
  s_tg->add_option("--extractors", tg_extractors, "Extractor checkpoint directories, comma separated");
  s_tg->add_option("--data", tg_data)->required();
  s_tg->add_option("--agg", tg_agg, "Aggregation weights from fit-agg (fitted here if omitted)");
  s_tg->add_option("--out", tg_out)->required();
  add_config_flags(s_tg, tg_flags);

  ConfigFlags fa_flags;
  std::string fa_extractors, fa_data, fa_out;
  auto* s_fa = app.add_subcommand("fit-agg", "Fit test-time feature aggregation weights");
  s_fa->add_option("--extractors", fa_extractors)->required();
  s_fa->add_option("--data", fa_data)->required();
  s_fa->add_option("--out", fa_out, "Output JSON")->required();
  add_config_flags(s_fa, fa_flags);

  std::string g_model, g_context, g_out, g_windows = "all";
  std::vector<std::string> g_toggles;
  auto* s_gen = app.add_subcommand("generate", "Generate responses for dialogue contexts");
  s_gen->add_option("--model", g_model)->required();
  s_gen->add_option("--context", g_context, "Dialogue JSONL")->required();
  s_gen->add_option("--out", g_out)->required();
  s_gen->add_option("--windows", g_windows, "all: every K-turn window with a reference; last: after the final turn")
      ->check(CLI::IsMember({"all", "last"}))
      ->capture_default_str();
  s_gen->add_option("--toggle", g_toggles, "Feature override, e.g. T-17=1");

  std::string se_model, se_seed, se_out;
  std::size_t se_future = 0;
  std::optional<std::size_t> se_seed_len;
  std::vector<std::string> se_toggles;
  auto* s_se = app.add_subcommand("session", "Roll out several generated turns from seed turns");
  s_se->add_option("--model", se_model)->required();
  s_se->add_option("--seed-turns", se_seed, "Dialogue JSONL")->required();
  s_se->add_option("--n-future", se_future)->required();
  s_se->add_option("--seed-len", se_seed_len, "Seed turns taken from each record (default K)");
  s_se->add_option("--toggle", se_toggles, "Feature override, e.g. T-17=1");
  s_se->add_option("--out", se_out, "Transcript JSONL (standard output if omitted)");

  std::string c_model;
  auto* s_chat = app.add_subcommand("chat", "Interactive session over standard input/output");
  s_chat->add_option("--model", c_model)->required();

  std::string e_hyp, e_ref, e_emb, e_out;
  bool e_human = false;
  auto* s_eval = app.add_subcommand("evaluate", "Relevance and diversity metrics");
  s_eval->add_option("--hyp", e_hyp, "Hypotheses: text lines or generate JSONL");
  s_eval->add_option("--ref", e_ref, "References: text lines or JSONL")->required();
  s_eval->add_option("--embeddings", e_emb, "Word vector text file");
  s_eval->add_flag("--human", e_human, "Diversity-only row for the references");
  s_eval->add_option("--out", e_out)->required();

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze", "Feature analysis");
  s_an->add_option("action", an.action)->required()->check(CLI::IsMember({"ngrams", "alignment", "toggle", "export"}));
  s_an->add_option("--model", an.model, "Extractor or generator checkpoint")->required();
  s_an->add_option("--data", an.data)->required();
  s_an->add_option("--out", an.out)->required();
  s_an->add_option("--feature", an.feature, "Feature to toggle, e.g. T-17");
  s_an->add_option("--kind", an.kind)->check(CLI::IsMember({"topic", "persona"}))->capture_default_str();
  s_an->add_option("--min-occurrence", an.min_occurrence)->capture_default_str();
  s_an->add_option("--top-k", an.top_k)->capture_default_str();
  s_an->add_option("--n-max", an.n_max)->capture_default_str();
  s_an->add_option("--permutations", an.permutations)->capture_default_str();
  s_an->add_option("--seed", an.seed)->capture_default_str();

  std::string r_manifest, r_out;
  auto* s_replay = app.add_subcommand("replay", "Rerun a manifest and compare output hashes");
  s_replay->add_option("manifest", r_manifest)->required();
  s_replay->add_option("--out", r_out, "Write to a different location");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  Context ctx{std::vector<std::string>(args.begin(), args.end()), in, out, err};
  try {
    if (s_synth->parsed()) {
      cmd_synth(ctx, synth, s_synth->get_option("--seed")->count() > 0);
    } else if (s_te->parsed()) {
      cmd_train_extractor(ctx, resolve_config(te_flags), te_kind, te_mode, te_data, te_out);
    } else if (s_tg->parsed()) {
      cmd_train_generator(ctx, resolve_config(tg_flags), tg_variant, tg_extractors, tg_data, tg_agg, tg_out);
    } else if (s_fa->parsed()) {
      cmd_fit_agg(ctx, resolve_config(fa_flags), fa_extractors, fa_data, fa_out);
    } else if (s_gen->parsed()) {
      cmd_generate(ctx, g_model, g_context, g_out, g_windows, g_toggles);
    } else if (s_se->parsed()) {
      cmd_session(ctx, se_model, se_seed, se_future, se_seed_len, se_toggles, se_out);
    } else if (s_chat->parsed()) {
      InferenceEngine engine = InferenceEngine::load(c_model);
      run_chat(engine, in, out);
    } else if (s_eval->parsed()) {
      cmd_evaluate(ctx, e_hyp, e_ref, e_emb, e_human, e_out);
    } else if (s_an->parsed()) {
      cmd_analyze(ctx, an);
    } else if (s_replay->parsed()) {
      return cmd_replay(ctx, r_manifest, r_out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace cocon
