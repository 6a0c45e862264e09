#include "cocon/inference.hpp"

#include "cocon/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace cocon {

using ag::Matrix;
using json = nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

FeatureKind parse_kind_prefix(std::string_view p) {
  const std::string s = lower(p);
  if (s == "t" || s == "topic") return FeatureKind::kTopic;
  if (s == "p" || s == "persona") return FeatureKind::kPersona;
  throw std::invalid_argument("unknown feature kind '" + std::string(p) + "'");
}

// "T-17" -> kind and index.
std::pair<FeatureKind, std::size_t> parse_feature_ref(std::string_view text) {
  auto dash = text.find('-');
  if (dash == std::string_view::npos || dash + 1 >= text.size()) {
    throw std::invalid_argument("expected <T|P>-<index>, got '" + std::string(text) + "'");
  }
  FeatureKind kind = parse_kind_prefix(text.substr(0, dash));
  auto digits = text.substr(dash + 1);
  std::size_t index = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) {
    throw std::invalid_argument("bad feature index in '" + std::string(text) + "'");
  }
  return {kind, index};
}

std::vector<int> body_to_utterance(const std::vector<int>& body, std::size_t max_len) {
  std::vector<int> ids(max_len, Vocabulary::kPad);
  std::copy_n(body.begin(), std::min(body.size(), max_len), ids.begin());
  return ids;
}

std::vector<double> row(const Matrix& m, Eigen::Index r) {
  return std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols());
}

Turn make_turn(int speaker, const std::vector<int>& ids, const Vocabulary& vocab) {
  Turn t;
  t.speaker = speaker;
  t.text = decode_ids(ids, vocab);
  for (int id : ids) t.tokens.push_back(vocab.token(id));
  return t;
}

json diagnostics_json(const ResponseDiagnostics& d) { return {{"f_in", d.f_in}, {"f_out", d.f_out}}; }

}  // namespace

FeatureOverride parse_override(std::string_view text) {
  auto eq = text.find('=');
  if (eq == std::string_view::npos) throw std::invalid_argument("expected <T|P>-<index>=0|1, got '" + std::string(text) + "'");
  auto [kind, index] = parse_feature_ref(text.substr(0, eq));
  auto v = text.substr(eq + 1);
  if (v != "0" && v != "1") throw std::invalid_argument("override value must be 0 or 1");
  return {kind, index, v == "1" ? 1 : 0};
}

std::string to_string(const FeatureOverride& o) {
  return std::string(o.kind == FeatureKind::kTopic ? "T-" : "P-") + std::to_string(o.index) + "=" +
         std::to_string(o.value);
}

// --- bundle -------------------------------------------------------------------

void save_bundle(const std::filesystem::path& dir, const ModelBundle& bundle) {
  bundle.generator.save(dir);
  bundle.vocab.save(dir / "vocab.txt");
  std::ofstream(dir / "agg.json") << to_json(bundle.agg).dump(2) << '\n';
  json hashes = json::object();
  if (bundle.topic) {
    bundle.topic->save(dir / "extractors" / "topic");
    hashes["topic"] = bundle.topic->params().hash();
  }
  if (bundle.persona) {
    bundle.persona->save(dir / "extractors" / "persona");
    hashes["persona"] = bundle.persona->params().hash();
  }
  hashes["vocab"] = bundle.vocab.hash();
  std::ofstream(dir / "extractors.json") << hashes.dump(2) << '\n';
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir) || !std::filesystem::exists(dir / "config.json")) {
    throw std::runtime_error("checkpoint not found: " + dir.string());
  }
  GeneratorModel gen = GeneratorModel::load(dir);
  Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
  std::ifstream agg_in(dir / "agg.json");
  if (!agg_in) throw std::runtime_error("checkpoint not found: " + (dir / "agg.json").string());
  AggWeights agg = agg_weights_from_json(json::parse(agg_in));
  std::ifstream hash_in(dir / "extractors.json");
  json hashes = hash_in ? json::parse(hash_in) : json::object();

  ModelBundle bundle{std::move(gen), std::nullopt, std::nullopt, std::move(agg), std::move(vocab)};
  auto load_kind = [&](const char* name, std::optional<ExtractorModel>& slot) {
    auto sub = dir / "extractors" / name;
    if (!std::filesystem::exists(sub / "config.json")) return;
    slot.emplace(ExtractorModel::load(sub));
    if (hashes.contains(name) && hashes[name].get<std::string>() != slot->params().hash()) {
      throw std::runtime_error(std::string("extractor hash mismatch for ") + name + " in " + dir.string());
    }
  };
  load_kind("topic", bundle.topic);
  load_kind("persona", bundle.persona);
  if (hashes.contains("vocab") && hashes["vocab"].get<std::string>() != bundle.vocab.hash()) {
    throw std::runtime_error("vocabulary hash mismatch in " + dir.string());
  }
  return bundle;
}

// --- engine -------------------------------------------------------------------

InferenceEngine::InferenceEngine(ModelBundle bundle) : bundle_(std::move(bundle)) {
  const auto& cfg = bundle_.generator.config();
  check_extractors(cfg, {bundle_.topic ? &*bundle_.topic : nullptr, bundle_.persona ? &*bundle_.persona : nullptr});
  if (cfg.cnn.vocab_size != bundle_.vocab.size()) throw std::invalid_argument("engine: vocabulary size mismatch");
  if (cfg.max_len() != bundle_.vocab.max_len()) throw std::invalid_argument("engine: max_len mismatch");
  if (uses_topic(variant())) {
    if (bundle_.agg.k != cfg.context_turns) throw std::invalid_argument("engine: aggregation K mismatch");
    bundle_.agg.get(FeatureKind::kTopic);
    if (uses_persona(variant())) bundle_.agg.get(FeatureKind::kPersona);
  }
}

const ExtractorModel& InferenceEngine::extractor(FeatureKind kind) const {
  const auto& e = kind == FeatureKind::kTopic ? bundle_.topic : bundle_.persona;
  if (!e) throw std::invalid_argument("no " + to_string(kind) + " extractor loaded");
  return *e;
}

std::vector<double> InferenceEngine::aggregate_features(std::span<const std::vector<int>> context,
                                                        FeatureKind kind) const {
  const ExtractorModel& ex = extractor(kind);
  const std::size_t k = context_turns();
  if (context.size() != k) throw std::invalid_argument("aggregate_features: expected K utterances");
  const auto w = bundle_.agg.get(kind).weights();
  Matrix f = extract_matrix(ex, context);
  std::vector<double> out(ex.feature_dim(), 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (w[i] == 0.0) continue;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += w[i] * f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  if (ex.mode() == FeatureMode::kHard) {
    for (auto& x : out) x = x >= 0.5 ? 1.0 : 0.0;
  }
  return out;
}

std::vector<double> InferenceEngine::context_features(std::span<const std::vector<int>> context) const {
  std::vector<double> out;
  if (uses_topic(variant())) out = aggregate_features(context, FeatureKind::kTopic);
  if (uses_persona(variant())) {
    auto p = aggregate_features(context, FeatureKind::kPersona);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::size_t InferenceEngine::feature_dim(FeatureKind kind) const {
  if (kind == FeatureKind::kTopic ? !uses_topic(variant()) : !uses_persona(variant())) {
    throw std::invalid_argument("variant has no " + to_string(kind) + " features");
  }
  return extractor(kind).feature_dim();
}

std::size_t InferenceEngine::feature_offset(FeatureKind kind) const {
  feature_dim(kind);
  return kind == FeatureKind::kTopic ? 0 : extractor(FeatureKind::kTopic).feature_dim();
}

void InferenceEngine::apply_overrides(std::vector<double>& features, std::span<const FeatureOverride> overrides) const {
  if (overrides.empty()) return;
  if (!uses_topic(variant())) throw std::invalid_argument("variant has no features");
  for (const auto& o : overrides) {
    if (o.value != 0 && o.value != 1) throw std::invalid_argument("override value must be 0 or 1");
    const std::size_t dim = feature_dim(o.kind);
    if (o.index >= dim) {
      throw std::invalid_argument("feature index " + std::to_string(o.index) + " out of range (L = " +
                                  std::to_string(dim) + ")");
    }
    features[feature_offset(o.kind) + o.index] = o.value;
  }
}

std::vector<double> InferenceEngine::extract_features(const std::vector<int>& utterance) const {
  std::vector<double> out;
  std::vector<std::vector<int>> one{utterance};
  if (uses_topic(variant())) {
    auto t = row(extract_matrix(extractor(FeatureKind::kTopic), one, true), 0);
    out.insert(out.end(), t.begin(), t.end());
  }
  if (uses_persona(variant())) {
    auto p = row(extract_matrix(extractor(FeatureKind::kPersona), one, true), 0);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Response InferenceEngine::respond(std::span<const std::vector<int>> context,
                                  std::span<const FeatureOverride> overrides) const {
  if (context.size() != context_turns()) throw std::invalid_argument("respond: expected K utterances");
  std::vector<double> f = context_features(context);
  apply_overrides(f, overrides);
  Matrix fm(1, static_cast<Eigen::Index>(f.size()));
  for (std::size_t j = 0; j < f.size(); ++j) fm(0, static_cast<Eigen::Index>(j)) = f[j];
  auto out = bundle_.generator.generate(context, 1, fm);

  Response r;
  r.ids = std::move(out.front());
  r.text = decode_ids(r.ids, bundle_.vocab);
  r.diagnostics.f_in = std::move(f);
  r.diagnostics.f_out = extract_features(body_to_utterance(r.ids, bundle_.vocab.max_len()));
  return r;
}

std::vector<std::vector<int>> InferenceEngine::encode_context(std::span<const Turn> turns) const {
  const std::size_t k = context_turns();
  std::vector<std::vector<int>> out;
  const std::size_t have = std::min(turns.size(), k);
  for (std::size_t i = have; i < k; ++i) out.emplace_back(bundle_.vocab.max_len(), Vocabulary::kPad);
  for (std::size_t i = turns.size() - have; i < turns.size(); ++i) out.push_back(encode_utterance(turns[i], bundle_.vocab));
  return out;
}

Response generate_response(const InferenceEngine& engine, std::span<const Turn> context,
                           std::span<const FeatureOverride> overrides) {
  if (context.size() != engine.context_turns()) {
    throw std::invalid_argument("generate_response: context must have exactly K = " +
                                std::to_string(engine.context_turns()) + " turns");
  }
  return engine.respond(engine.encode_context(context), overrides);
}

std::vector<SessionTurn> generate_session(const InferenceEngine& engine, std::span<const Turn> seed,
                                          std::size_t n_future, std::span<const FeatureOverride> overrides) {
  const std::size_t k = engine.context_turns();
  if (seed.size() < k) throw std::invalid_argument("generate_session: seed must have at least K turns");
  if (n_future < 1) throw std::invalid_argument("generate_session: n_future must be >= 1");
  std::vector<SessionTurn> out;
  std::vector<Turn> turns;
  for (std::size_t i = 0; i < seed.size(); ++i) {
    Turn t = seed[i];
    t.speaker = static_cast<int>(i % 2);
    if (t.tokens.empty()) t.tokens = tokenize(t.text);
    turns.push_back(t);
    out.push_back({t, false, std::nullopt});
  }
  for (std::size_t n = 0; n < n_future; ++n) {
    std::span<const Turn> window(turns.data() + turns.size() - k, k);
    Response r = engine.respond(engine.encode_context(window), overrides);
    Turn t = make_turn(static_cast<int>(turns.size() % 2), r.ids, engine.vocab());
    turns.push_back(t);
    out.push_back({std::move(t), true, std::move(r.diagnostics)});
  }
  return out;
}

std::string session_to_json(const std::string& id, std::span<const SessionTurn> turns) {
  json j;
  j["id"] = id;
  j["turns"] = json::array();
  for (const auto& t : turns) {
    json tj = {{"speaker", t.turn.speaker}, {"text", t.turn.text}};
    if (t.generated) {
      tj["generated"] = true;
      if (t.diagnostics) tj["diagnostics"] = diagnostics_json(*t.diagnostics);
    }
    j["turns"].push_back(std::move(tj));
  }
  return j.dump();
}

// --- chat ---------------------------------------------------------------------

std::string ChatSession::usage() {
  return "commands:\n"
         "  /toggle <T|P>-<index> on|off   force a feature in every following reply\n"
         "  /features                      show the aggregate features for the next reply\n"
         "  /reset                         clear history and toggles\n"
         "  /save <path>                   write the transcript as JSONL\n"
         "anything else is sent as your next turn";
}

std::vector<Turn> ChatSession::recent_turns() const {
  std::vector<Turn> out;
  for (const auto& t : history_) out.push_back(t.turn);
  return out;
}

ChatSession::Reply ChatSession::step(const std::string& input) {
  if (input.empty() || input.front() != '/') {
    Turn user;
    user.speaker = static_cast<int>(history_.size() % 2);
    user.text = input;
    user.tokens = tokenize(input);
    history_.push_back({user, false, std::nullopt});
    auto turns = recent_turns();
    Response r = engine_.respond(engine_.encode_context(turns), overrides_);
    Turn reply = make_turn(static_cast<int>(history_.size() % 2), r.ids, engine_.vocab());
    history_.push_back({reply, true, std::move(r.diagnostics)});
    return {reply.text, false, true};
  }

  std::istringstream ss(input);
  std::string cmd;
  ss >> cmd;
  std::vector<std::string> args;
  for (std::string a; ss >> a;) args.push_back(a);
  auto bad = [](const std::string& why) { return Reply{why + "\n" + usage(), true, false}; };

  if (cmd == "/toggle") {
    if (args.size() != 2 || (args[1] != "on" && args[1] != "off")) return bad("usage: /toggle <T|P>-<index> on|off");
    FeatureOverride o;
    try {
      auto [kind, index] = parse_feature_ref(args[0]);
      o = {kind, index, args[1] == "on" ? 1 : 0};
      auto probe = engine_.context_features(engine_.encode_context({}));
      FeatureOverride single[] = {o};
      engine_.apply_overrides(probe, single);
    } catch (const std::invalid_argument& e) {
      return bad(e.what());
    }
    std::erase_if(overrides_, [&](const FeatureOverride& x) { return x.kind == o.kind && x.index == o.index; });
    overrides_.push_back(o);
    return {"toggled " + to_string(o), true, true};
  }
  if (cmd == "/features") {
    if (!args.empty()) return bad("usage: /features");
    std::vector<double> f;
    try {
      f = engine_.context_features(engine_.encode_context(recent_turns()));
      engine_.apply_overrides(f, overrides_);
    } catch (const std::invalid_argument& e) {
      return bad(e.what());
    }
    std::ostringstream out;
    const bool has_t = uses_topic(engine_.variant()), has_p = uses_persona(engine_.variant());
    if (!has_t) return {"variant has no features", true, true};
    auto print = [&](const char* label, std::size_t off, std::size_t dim) {
      out << label << ':';
      for (std::size_t j = 0; j < dim; ++j) {
        if (f[off + j] >= 0.5) out << ' ' << j;
      }
      out << '\n';
    };
    print("T active", 0, engine_.feature_dim(FeatureKind::kTopic));
    if (has_p) print("P active", engine_.feature_offset(FeatureKind::kPersona), engine_.feature_dim(FeatureKind::kPersona));
    out << "toggles:";
    for (const auto& o : overrides_) out << ' ' << to_string(o);
    return {out.str(), true, true};
  }
  if (cmd == "/reset") {
    if (!args.empty()) return bad("usage: /reset");
    history_.clear();
    overrides_.clear();
    return {"session reset", true, true};
  }
  if (cmd == "/save") {
    if (args.size() != 1) return bad("usage: /save <path>");
    std::ofstream out(args[0]);
    if (!out) return {"cannot write " + args[0], true, false};
    out << session_to_json("chat", history_) << '\n';
    return {"saved " + args[0], true, true};
  }
  return bad("unknown command " + cmd);
}

void run_chat(const InferenceEngine& engine, std::istream& in, std::ostream& out) {
  ChatSession session(engine);
  out << "variant " << to_string(engine.variant()) << ", K = " << engine.context_turns() << ". /help for commands\n";
  for (std::string line; std::getline(in, line);) {
    if (line == "/help") {
      out << ChatSession::usage() << '\n';
      continue;
    }
    if (line == "/quit" || line == "/exit") break;
    try {
      auto r = session.step(line);
      out << (r.is_command ? "" : "> ") << r.text << '\n';
    } catch (const std::exception& e) {
      out << "error: " << e.what() << '\n';
    }
  }
}

}  // namespace cocon
