#include "cocon/generator.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace cocon {

using ag::Matrix;
using ag::Var;
using nlohmann::json;

std::string to_string(GeneratorVariant v) {
  switch (v) {
    case GeneratorVariant::kS2S: return "s2s";
    case GeneratorVariant::kT: return "t";
    case GeneratorVariant::kTP: return "tp";
    case GeneratorVariant::kTPBin: return "tp-bin";
  }
  return "?";
}

GeneratorVariant parse_variant(std::string_view text) {
  if (text == "s2s" || text == "S2S") return GeneratorVariant::kS2S;
  if (text == "t" || text == "cocon-t" || text == "CoCon-T") return GeneratorVariant::kT;
  if (text == "tp" || text == "cocon-tp" || text == "CoCon-TP") return GeneratorVariant::kTP;
  if (text == "tp-bin" || text == "cocon-tp-bin" || text == "CoCon-TP-bin") return GeneratorVariant::kTPBin;
  throw std::invalid_argument("unknown variant: " + std::string(text));
}

bool uses_topic(GeneratorVariant v) { return v != GeneratorVariant::kS2S; }
bool uses_persona(GeneratorVariant v) { return v == GeneratorVariant::kTP || v == GeneratorVariant::kTPBin; }
FeatureMode variant_mode(GeneratorVariant v) {
  return v == GeneratorVariant::kTPBin ? FeatureMode::kHard : FeatureMode::kSoft;
}

std::size_t GeneratorConfig::feature_dim() const { return topic_dim + persona_dim; }

json to_json(const GeneratorConfig& c) {
  return {{"variant", to_string(c.variant)}, {"context_turns", c.context_turns}, {"cnn", to_json(c.cnn)},
          {"context_dim", c.context_dim},    {"h0_hidden", c.h0_hidden},         {"h0_dim", c.h0_dim},
          {"hidden", c.hidden},              {"topic_dim", c.topic_dim},         {"persona_dim", c.persona_dim},
          {"init_state", c.init_state}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.context_turns = j.at("context_turns").get<std::size_t>();
  c.cnn = cnn_config_from_json(j.at("cnn"));
  c.context_dim = j.at("context_dim").get<std::size_t>();
  c.h0_hidden = j.at("h0_hidden").get<std::size_t>();
  c.h0_dim = j.at("h0_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.topic_dim = j.at("topic_dim").get<std::size_t>();
  c.persona_dim = j.at("persona_dim").get<std::size_t>();
  c.init_state = j.at("init_state").get<std::string>();
  return c;
}

void check_extractors(const GeneratorConfig& config, const FeatureExtractors& extractors) {
  auto check = [&](const ExtractorModel* e, FeatureKind kind, std::size_t dim) {
    const std::string name = to_string(kind);
    if (!e) throw std::invalid_argument("variant " + to_string(config.variant) + " needs a " + name + " extractor");
    if (e->kind() != kind) throw std::invalid_argument("extractor given for " + name + " has kind " + to_string(e->kind()));
    if (e->mode() != variant_mode(config.variant)) {
      throw std::invalid_argument("variant " + to_string(config.variant) + " needs " +
                                  to_string(variant_mode(config.variant)) + " extractors, got " + to_string(e->mode()));
    }
    if (e->feature_dim() != dim) throw std::invalid_argument(name + " extractor feature dimension mismatch");
    if (e->config().cnn.vocab_size != config.cnn.vocab_size) {
      throw std::invalid_argument(name + " extractor vocabulary size differs from the generator's");
    }
    if (e->config().cnn.max_len != config.cnn.max_len) {
      throw std::invalid_argument(name + " extractor max_len differs from the generator's");
    }
  };
  if (uses_topic(config.variant)) check(extractors.topic, FeatureKind::kTopic, config.topic_dim);
  if (uses_persona(config.variant)) check(extractors.persona, FeatureKind::kPersona, config.persona_dim);
}

Matrix features_for(GeneratorVariant variant, const FeatureExtractors& extractors,
                    std::span<const std::vector<int>> utterances) {
  const auto n = static_cast<Eigen::Index>(utterances.size());
  if (!uses_topic(variant)) return Matrix(n, 0);
  Matrix topic = extract_matrix(*extractors.topic, utterances);
  if (!uses_persona(variant)) return topic;
  Matrix persona = extract_matrix(*extractors.persona, utterances);
  Matrix out(n, topic.cols() + persona.cols());
  out << topic, persona;
  return out;
}

namespace {

Var make_embedding(ParameterSet& params, const CnnConfig& cnn, std::mt19937_64& rng) {
  if (cnn.vocab_size == 0) throw std::invalid_argument("generator: vocab_size must be set");
  Matrix table(static_cast<Eigen::Index>(cnn.vocab_size), static_cast<Eigen::Index>(cnn.embed_dim));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = dist(rng);
  return params.add("embedding", std::move(table));
}

void validate(const GeneratorConfig& c) {
  if (c.context_turns < 1) throw std::invalid_argument("generator: context_turns must be >= 1");
  const bool t = c.topic_dim > 0, p = c.persona_dim > 0;
  switch (c.variant) {
    case GeneratorVariant::kS2S:
      if (t || p) throw std::invalid_argument("s2s variant takes no features");
      break;
    case GeneratorVariant::kT:
      if (!t || p) throw std::invalid_argument("variant t needs topic_dim > 0 and persona_dim == 0");
      break;
    default:
      if (!t || !p) throw std::invalid_argument("variant " + to_string(c.variant) + " needs topic and persona dims");
  }
  if (c.init_state != "zeros" && c.init_state != "h0") {
    throw std::invalid_argument("init_state must be zeros or h0");
  }
  if (c.init_state == "h0" && c.h0_dim != c.hidden) {
    throw std::invalid_argument("init_state h0 needs h0_dim == hidden");
  }
}

const GeneratorConfig& validated(const GeneratorConfig& c) {
  validate(c);
  return c;
}

}  // namespace

GeneratorModel::GeneratorModel(GeneratorConfig config, std::uint64_t seed)
    : config_(validated(config)),
      init_rng_(seed),
      embedding_(make_embedding(params_, config_.cnn, init_rng_)),
      encoder_(params_, "enc.", config_.cnn, init_rng_, embedding_) {
  const auto k = static_cast<Eigen::Index>(config_.context_turns);
  const auto d = static_cast<Eigen::Index>(config_.cnn.out_dim);
  const auto c = static_cast<Eigen::Index>(config_.context_dim);
  const auto f = static_cast<Eigen::Index>(config_.feature_dim());
  const auto e = static_cast<Eigen::Index>(config_.cnn.embed_dim);
  const auto hh = static_cast<Eigen::Index>(config_.h0_hidden);
  const auto hd = static_cast<Eigen::Index>(config_.h0_dim);
  const auto h = static_cast<Eigen::Index>(config_.hidden);
  const auto v = static_cast<Eigen::Index>(config_.cnn.vocab_size);
  aggc_w_ = params_.add_glorot("aggc.w", k * d, c, init_rng_);
  aggc_b_ = params_.add_zeros("aggc.b", 1, c);
  h0_w1_ = params_.add_glorot("h0.w1", c + f, hh, init_rng_);
  h0_b1_ = params_.add_zeros("h0.b1", 1, hh);
  h0_w2_ = params_.add_glorot("h0.w2", hh, hd, init_rng_);
  h0_b2_ = params_.add_zeros("h0.b2", 1, hd);
  lstm_wx_ = params_.add_glorot("lstm.wx", e, 4 * h, init_rng_);
  lstm_wf_ = params_.add_glorot("lstm.wh0", hd, 4 * h, init_rng_);
  lstm_wh_ = params_.add_glorot("lstm.wh", h, 4 * h, init_rng_);
  Matrix b = Matrix::Zero(1, 4 * h);
  b.middleCols(h, h).setOnes();  // forget gate
  lstm_b_ = params_.add("lstm.b", std::move(b));
  out_w_ = params_.add_glorot("out.w", h, v, init_rng_);
  out_b_ = params_.add_zeros("out.b", 1, v);
}

Var GeneratorModel::encode_context(std::span<const std::vector<int>> utterances, std::size_t batch, bool train,
                                   std::mt19937_64* rng) const {
  if (batch == 0 || utterances.size() != batch * config_.context_turns) {
    throw std::invalid_argument("encode_context: expected exactly K=" + std::to_string(config_.context_turns) +
                                " utterances per example");
  }
  Var enc = encoder_.encode(utterances, train, rng);
  const auto b = static_cast<Eigen::Index>(batch);
  Var flat = ag::reshape(enc, b, enc.cols() * static_cast<Eigen::Index>(config_.context_turns));
  return ag::tanh(ag::add_row(ag::matmul(flat, aggc_w_), aggc_b_));
}

Var GeneratorModel::init_hidden(const Var& context, const Var& features) const {
  if (context.cols() != static_cast<Eigen::Index>(config_.context_dim)) {
    throw std::invalid_argument("init_hidden: context dimension mismatch");
  }
  Var input = context;
  if (config_.variant != GeneratorVariant::kS2S) {
    if (!features || features.cols() != static_cast<Eigen::Index>(config_.feature_dim()) ||
        features.rows() != context.rows()) {
      throw std::invalid_argument("init_hidden: feature dimension mismatch for variant " + to_string(config_.variant));
    }
    std::vector<Var> parts = {context, features};
    input = ag::concat_cols(parts);
  } else if (features && features.cols() != 0) {
    throw std::invalid_argument("init_hidden: s2s variant takes no features");
  }
  Var hidden = ag::tanh(ag::add_row(ag::matmul(input, h0_w1_), h0_b1_));
  return ag::add_row(ag::matmul(hidden, h0_w2_), h0_b2_);
}

Var GeneratorModel::fixed_projection(const Var& h0) const {
  return ag::add_row(ag::matmul(h0, lstm_wf_), lstm_b_);
}

GeneratorModel::State GeneratorModel::initial_state(const Var& h0) const {
  const auto b = h0.rows();
  const auto h = static_cast<Eigen::Index>(config_.hidden);
  State s;
  s.c = ag::constant(Matrix::Zero(b, h));
  s.h = config_.init_state == "h0" ? h0 : ag::constant(Matrix::Zero(b, h));
  return s;
}

GeneratorModel::State GeneratorModel::step(const Var& input_proj, const Var& fixed, const State& s) const {
  const auto h = static_cast<Eigen::Index>(config_.hidden);
  Var gates = ag::add(ag::add(input_proj, fixed), ag::matmul(s.h, lstm_wh_));
  Var i = ag::sigmoid(ag::slice_cols(gates, 0, h));
  Var f = ag::sigmoid(ag::slice_cols(gates, h, h));
  Var g = ag::tanh(ag::slice_cols(gates, 2 * h, h));
  Var o = ag::sigmoid(ag::slice_cols(gates, 3 * h, h));
  State next;
  next.c = ag::add(ag::mul(f, s.c), ag::mul(i, g));
  next.h = ag::mul(o, ag::tanh(next.c));
  return next;
}

Var GeneratorModel::teacher_forced_logits(const Var& h0, std::span<const std::vector<int>> targets) const {
  if (targets.empty()) throw std::invalid_argument("decode: empty batch");
  const std::size_t len = targets.front().size();
  if (len < 2) throw std::invalid_argument("decode: empty target (needs at least BOS and EOS)");
  for (const auto& t : targets) {
    if (t.size() != len) throw std::invalid_argument("decode: targets must share one length");
  }
  if (h0.rows() != static_cast<Eigen::Index>(targets.size())) throw std::invalid_argument("decode: batch mismatch");
  const std::size_t b = targets.size();
  const std::size_t steps = len - 1;
  std::vector<int> inputs(b * steps);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t t = 0; t < steps; ++t) inputs[e * steps + t] = targets[e][t];
  }
  Var proj = ag::matmul(ag::embedding(embedding_, inputs), lstm_wx_);
  Var fixed = fixed_projection(h0);
  State s = initial_state(h0);
  std::vector<Var> hs;
  hs.reserve(steps);
  std::vector<int> rows(b);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t e = 0; e < b; ++e) rows[e] = static_cast<int>(e * steps + t);
    s = step(ag::gather_rows(proj, rows), fixed, s);
    hs.push_back(s.h);
  }
  return ag::add_row(ag::matmul(ag::concat_rows(hs), out_w_), out_b_);
}

Var GeneratorModel::loss_mle(const Var& h0, std::span<const std::vector<int>> targets) const {
  Var logits = teacher_forced_logits(h0, targets);
  const std::size_t b = targets.size();
  const std::size_t steps = targets.front().size() - 1;
  std::vector<int> next(b * steps);
  std::vector<double> mask(b * steps);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t e = 0; e < b; ++e) {
      int id = targets[e][t + 1];
      next[t * b + e] = id;
      mask[t * b + e] = id == Vocabulary::kPad ? 0.0 : 1.0;
    }
  }
  return ag::masked_nll(logits, next, mask);
}

RolloutResult GeneratorModel::rollout_st(const Var& h0, std::size_t max_len, double tau,
                                         bool feedback_gradient) const {
  if (max_len < 1) throw std::invalid_argument("rollout_st: max_len must be >= 1");
  if (tau <= 0.0) throw std::invalid_argument("rollout_st: tau must be positive");
  const auto b = static_cast<std::size_t>(h0.rows());
  RolloutResult out;
  out.tokens.assign(b, {});
  std::vector<char> done(b, 0);
  std::vector<int> forced(b, -1);
  Var fixed = fixed_projection(h0);
  State s = initial_state(h0);
  std::vector<int> bos(b, Vocabulary::kBos);
  Var input = ag::matmul(ag::embedding(embedding_, bos), lstm_wx_);
  std::size_t remaining = b;
  for (std::size_t t = 0; t < max_len && remaining > 0; ++t) {
    s = step(input, fixed, s);
    Var probs = ag::softmax_rows(ag::add_row(ag::matmul(s.h, out_w_), out_b_));
    for (std::size_t e = 0; e < b; ++e) forced[e] = done[e] ? Vocabulary::kPad : -1;
    Var sel = ag::st_argmax(probs, tau, forced);
    out.selections.push_back(sel);
    for (std::size_t e = 0; e < b; ++e) {
      if (done[e]) continue;
      Eigen::Index id = 0;
      sel.value().row(static_cast<Eigen::Index>(e)).maxCoeff(&id);
      if (id == Vocabulary::kEos) {
        done[e] = 1;
        --remaining;
      } else {
        out.tokens[e].push_back(static_cast<int>(id));
      }
    }
    if (remaining > 0 && t + 1 < max_len) {
      Var next = feedback_gradient ? sel : ag::constant(sel.value());
      input = ag::matmul(ag::matmul(next, embedding_), lstm_wx_);
    }
  }
  // Extractor input: selections before EOS, a constant PAD row elsewhere.
  const auto steps = out.selections.size();
  std::vector<Var> rows = out.selections;
  Matrix pad = Matrix::Zero(1, static_cast<Eigen::Index>(config_.cnn.vocab_size));
  pad(0, Vocabulary::kPad) = 1.0;
  rows.push_back(ag::constant(std::move(pad)));
  Var stacked = ag::concat_rows(rows);
  const int pad_row = static_cast<int>(steps * b);
  std::vector<int> index(b * max_len, pad_row);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t t = 0; t < out.tokens[e].size(); ++t) index[e * max_len + t] = static_cast<int>(t * b + e);
  }
  out.utterance_onehots = ag::gather_rows(stacked, index);
  return out;
}

std::vector<std::vector<int>> GeneratorModel::greedy_decode(const Matrix& h0_value, std::size_t max_len) const {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  ag::NoGradGuard guard;
  const auto b = static_cast<std::size_t>(h0_value.rows());
  Var h0 = ag::constant(h0_value);
  std::vector<std::vector<int>> out(b);
  std::vector<char> done(b, 0);
  Var fixed = fixed_projection(h0);
  State s = initial_state(h0);
  std::vector<int> ids(b, Vocabulary::kBos);
  std::size_t remaining = b;
  for (std::size_t t = 0; t < max_len && remaining > 0; ++t) {
    s = step(ag::matmul(ag::embedding(embedding_, ids), lstm_wx_), fixed, s);
    Matrix probs = ag::softmax_rows(ag::add_row(ag::matmul(s.h, out_w_), out_b_)).value();
    for (std::size_t e = 0; e < b; ++e) {
      Eigen::Index id = 0;
      probs.row(static_cast<Eigen::Index>(e)).maxCoeff(&id);
      ids[e] = done[e] ? Vocabulary::kPad : static_cast<int>(id);
      if (done[e]) continue;
      if (id == Vocabulary::kEos) {
        done[e] = 1;
        --remaining;
      } else {
        out[e].push_back(static_cast<int>(id));
      }
    }
  }
  return out;
}

std::vector<std::vector<int>> GeneratorModel::generate(std::span<const std::vector<int>> contexts, std::size_t batch,
                                                       const Matrix& features) const {
  ag::NoGradGuard guard;
  Var c = encode_context(contexts, batch);
  Var h0 = init_hidden(c, ag::constant(features));
  return greedy_decode(h0.value(), config_.cnn.max_len);
}

void GeneratorModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(config_).dump(2) << '\n';
  params_.save(dir / "params.bin");
}

GeneratorModel GeneratorModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw std::runtime_error("checkpoint not found: " + (dir / "config.json").string());
  GeneratorModel model(generator_config_from_json(json::parse(in)), 0);
  model.params_.load(dir / "params.bin");
  return model;
}

Var loss_cycle(const Matrix& f_in, const RolloutResult& rollout, GeneratorVariant variant,
               const FeatureExtractors& extractors) {
  if (!uses_topic(variant)) throw std::invalid_argument("loss_cycle: variant has no features");
  const auto b = static_cast<std::size_t>(f_in.rows());
  std::vector<Var> parts;
  parts.push_back(extractors.topic->extract_onehot(rollout.utterance_onehots, b).probs);
  if (uses_persona(variant)) parts.push_back(extractors.persona->extract_onehot(rollout.utterance_onehots, b).probs);
  Var f_out = parts.size() == 1 ? parts.front() : ag::concat_cols(parts);
  if (f_out.cols() != f_in.cols()) throw std::invalid_argument("loss_cycle: feature dimension mismatch");
  return ag::mean(ag::rowwise_sqdist(ag::constant(f_in), f_out));
}

double loss_cycle(std::span<const double> f_in, std::span<const double> f_out) {
  if (f_in.size() != f_out.size()) throw std::invalid_argument("loss_cycle: dimension mismatch");
  double total = 0;
  for (std::size_t i = 0; i < f_in.size(); ++i) total += (f_in[i] - f_out[i]) * (f_in[i] - f_out[i]);
  return total;
}

double st_tau(std::size_t epoch, std::size_t epochs, double tau_final) {
  if (tau_final <= 0.0 || tau_final > 1.0) throw std::invalid_argument("st_tau: tau_final must be in (0, 1]");
  const double final_slope = 1.0 / tau_final;
  if (epochs <= 1) return tau_final;
  const double frac =
      static_cast<double>(std::min(std::max<std::size_t>(epoch, 1), epochs) - 1) / static_cast<double>(epochs - 1);
  return 1.0 / (1.0 + (final_slope - 1.0) * frac);
}

std::vector<GenWindow> make_windows(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t k) {
  if (k < 1) throw std::invalid_argument("make_windows: K must be >= 1");
  std::vector<GenWindow> out;
  for (const auto& d : dialogues) {
    for (std::size_t start = 0; start + k < d.turns.size(); ++start) {
      GenWindow w;
      for (std::size_t i = 0; i < k; ++i) w.context.push_back(encode_utterance(d.turns[start + i], vocab));
      w.target = encode_target(d.turns[start + k], vocab);
      w.target_utterance = encode_utterance(d.turns[start + k], vocab);
      w.dialogue_id = d.id;
      w.target_turn = static_cast<int>(start + k + 1);
      out.push_back(std::move(w));
    }
  }
  return out;
}

namespace {

struct Batch {
  std::vector<std::vector<int>> contexts, targets;
  Matrix features;
};

Batch gather(std::span<const GenWindow> windows, std::span<const std::size_t> idx, const Matrix& features) {
  Batch b;
  b.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& w = windows[idx[r]];
    b.contexts.insert(b.contexts.end(), w.context.begin(), w.context.end());
    b.targets.push_back(w.target);
    b.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(idx[r]));
  }
  return b;
}

Matrix target_features(GeneratorVariant variant, const FeatureExtractors& extractors,
                       std::span<const GenWindow> windows) {
  std::vector<std::vector<int>> utts;
  utts.reserve(windows.size());
  for (const auto& w : windows) utts.push_back(w.target_utterance);
  return features_for(variant, extractors, utts);
}

class FreezeGuard {
 public:
  explicit FreezeGuard(const ExtractorModel* e) {
    if (!e) return;
    for (const auto& v : e->params().vars()) {
      nodes_.push_back(v.node());
      flags_.push_back(v.node()->requires_grad);
      v.node()->requires_grad = false;
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) nodes_[i]->requires_grad = flags_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::shared_ptr<ag::Node>> nodes_;
  std::vector<bool> flags_;
};

GeneratorLoss evaluate_with(const GeneratorModel& model, std::span<const GenWindow> windows, const Matrix& features,
                            const FeatureExtractors& extractors, std::size_t batch_size) {
  ag::NoGradGuard guard;
  GeneratorLoss total;
  double weight = 0;
  const bool has_features = uses_topic(model.variant());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, windows.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    Batch b = gather(windows, idx, features);
    Var c = model.encode_context(b.contexts, n);
    Var h0 = model.init_hidden(c, ag::constant(b.features));
    const auto w = static_cast<double>(n);
    total.mle += model.loss_mle(h0, b.targets).scalar() * w;
    if (has_features) {
      auto roll = model.rollout_st(h0, model.config().max_len(), 1.0);
      total.cycle += loss_cycle(b.features, roll, model.variant(), extractors).scalar() * w;
    }
    weight += w;
  }
  total.mle /= weight;
  total.cycle /= weight;
  return total;
}

}  // namespace

GeneratorLoss evaluate_generator(const GeneratorModel& model, std::span<const GenWindow> windows,
                                 const FeatureExtractors& extractors, std::size_t batch_size) {
  if (windows.empty()) throw std::invalid_argument("evaluate_generator: no windows");
  check_extractors(model.config(), extractors);
  return evaluate_with(model, windows, target_features(model.variant(), extractors, windows), extractors,
                       batch_size);
}

GeneratorHistory train_generator(GeneratorModel& model, std::span<const GenWindow> train,
                                 std::span<const GenWindow> valid, const FeatureExtractors& extractors,
                                 const GeneratorTrainConfig& config) {
  if (train.empty() || valid.empty()) throw std::invalid_argument("train_generator: no windows");
  if (config.batch_size < 1) throw std::invalid_argument("train_generator: batch size must be >= 1");
  if (config.eta < 0.0) throw std::invalid_argument("train_generator: eta must be >= 0");
  check_extractors(model.config(), extractors);
  const GeneratorVariant variant = model.variant();
  const bool has_features = uses_topic(variant);
  const bool cycle = has_features && config.eta > 0.0;

  GeneratorHistory history;
  if (extractors.topic) history.topic_hash_before = extractors.topic->params().hash();
  if (extractors.persona) history.persona_hash_before = extractors.persona->params().hash();
  FreezeGuard freeze_topic(has_features ? extractors.topic : nullptr);
  FreezeGuard freeze_persona(uses_persona(variant) ? extractors.persona : nullptr);

  const Matrix train_f = target_features(variant, extractors, train);
  const Matrix valid_f = target_features(variant, extractors, valid);

  std::mt19937_64 rng(config.seed);
  Adam adam(model.params(), AdamConfig{.lr = config.lr});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_params = model.params().flatten();
  std::size_t since_best = 0;
  const std::size_t max_len = model.config().max_len();
  const std::size_t anneal = config.anneal_epochs ? config.anneal_epochs : config.max_epochs;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    GeneratorEpoch rec;
    rec.epoch = epoch;
    rec.tau = st_tau(epoch, anneal, config.tau_final);
    double seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      Batch b = gather(train, std::span(order).subspan(start, n), train_f);
      Var c = model.encode_context(b.contexts, n, true, &rng);
      Var h0 = model.init_hidden(c, ag::constant(b.features));
      Var mle = model.loss_mle(h0, b.targets);
      Var loss = mle;
      double cyc = 0;
      if (cycle) {
        auto roll = model.rollout_st(h0, max_len, rec.tau, config.st_feedback);
        Var lc = loss_cycle(b.features, roll, variant, extractors);
        cyc = lc.scalar();
        loss = ag::add(mle, ag::scale(lc, config.eta));
      }
      if (!std::isfinite(loss.scalar())) {
        std::ostringstream msg;
        msg << "generator training diverged at epoch " << epoch << ", batch starting " << start
            << " (mle=" << mle.scalar() << ", cycle=" << cyc << ")";
        throw TrainingDiverged(msg.str());
      }
      ag::backward(loss);
      adam.step();
      const auto w = static_cast<double>(n);
      rec.train_loss += loss.scalar() * w;
      rec.train_mle += mle.scalar() * w;
      rec.train_cycle += cyc * w;
      seen += w;
    }
    if (!model.params().all_finite()) {
      throw TrainingDiverged("generator parameters became non-finite at epoch " + std::to_string(epoch));
    }
    rec.train_loss /= seen;
    rec.train_mle /= seen;
    rec.train_cycle /= seen;
    auto vl = evaluate_with(model, valid, valid_f, extractors, config.batch_size);
    rec.valid_mle = vl.mle;
    rec.valid_cycle = vl.cycle;
    rec.valid_loss = vl.mle + (has_features ? config.eta * vl.cycle : 0.0);
    history.epochs.push_back(rec);
    if (rec.valid_loss < best) {
      best = rec.valid_loss;
      best_params = model.params().flatten();
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  model.params().unflatten(best_params);

  if (extractors.topic) history.topic_hash_after = extractors.topic->params().hash();
  if (extractors.persona) history.persona_hash_after = extractors.persona->params().hash();
  if (history.topic_hash_before != history.topic_hash_after ||
      history.persona_hash_before != history.persona_hash_after) {
    throw std::logic_error("extractor parameters changed during generator training");
  }
  return history;
}

// --- AGG_F ------------------------------------------------------------------

std::vector<double> AggKindWeights::weights() const {
  std::vector<double> w(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) mx = std::max(mx, logits[i]);
  }
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    w[i] = std::exp(logits[i] - mx);
    z += w[i];
  }
  for (auto& x : w) x /= z;
  return w;
}

const AggKindWeights& AggWeights::get(FeatureKind kind) const {
  const auto& w = kind == FeatureKind::kTopic ? topic : persona;
  if (!w) throw std::invalid_argument("no aggregation weights for " + to_string(kind));
  return *w;
}

json to_json(const AggWeights& w) {
  json j = {{"k", w.k}};
  auto put = [&](const char* name, const std::optional<AggKindWeights>& kw) {
    if (!kw) return;
    std::vector<int> mask(kw->mask.begin(), kw->mask.end());
    j[name] = {{"logits", kw->logits}, {"mask", mask}, {"weights", kw->weights()}};
  };
  put("topic", w.topic);
  put("persona", w.persona);
  return j;
}

AggWeights agg_weights_from_json(const json& j) {
  AggWeights w;
  w.k = j.at("k").get<std::size_t>();
  auto get = [&](const char* name) -> std::optional<AggKindWeights> {
    if (!j.contains(name)) return std::nullopt;
    AggKindWeights kw;
    kw.logits = j.at(name).at("logits").get<std::vector<double>>();
    auto mask = j.at(name).at("mask").get<std::vector<int>>();
    kw.mask.assign(mask.begin(), mask.end());
    if (kw.logits.size() != w.k || kw.mask.size() != w.k) throw std::invalid_argument("agg weights: length != k");
    return kw;
  };
  w.topic = get("topic");
  w.persona = get("persona");
  return w;
}

std::vector<char> agg_mask(FeatureKind kind, std::size_t k) {
  std::vector<char> mask(k, 1);
  if (kind == FeatureKind::kPersona) {
    for (std::size_t pos = 1; pos <= k; ++pos) {
      if (pos % 2 == k % 2) mask[pos - 1] = 0;
    }
  }
  return mask;
}

double agg_objective(std::span<const Matrix> window_features, const Matrix& targets, std::span<const double> weights) {
  if (window_features.empty()) throw std::invalid_argument("agg_objective: no windows");
  Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
  double total = 0;
  for (std::size_t n = 0; n < window_features.size(); ++n) {
    Eigen::VectorXd pred = window_features[n].transpose() * w;
    total += (targets.row(static_cast<Eigen::Index>(n)).transpose() - pred).squaredNorm();
  }
  return total / static_cast<double>(window_features.size());
}

AggKindWeights fit_agg_weights(std::span<const Matrix> window_features, const Matrix& targets, std::size_t k,
                               FeatureKind kind, const AggFitConfig& config) {
  if (k < 2) throw std::invalid_argument("fit_agg_weights: K must be >= 2");
  if (window_features.empty()) throw std::invalid_argument("fit_agg_weights: no windows");
  if (targets.rows() != static_cast<Eigen::Index>(window_features.size())) {
    throw std::invalid_argument("fit_agg_weights: one target per window expected");
  }
  const auto kk = static_cast<Eigen::Index>(k);
  // L_p = c - 2 w.a + w'Gw with G and a averaged over windows.
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(kk, kk);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(kk);
  for (std::size_t n = 0; n < window_features.size(); ++n) {
    const Matrix& f = window_features[n];
    if (f.rows() != kk || f.cols() != targets.cols()) throw std::invalid_argument("fit_agg_weights: window shape");
    g += f * f.transpose();
    a += f * targets.row(static_cast<Eigen::Index>(n)).transpose();
  }
  g /= static_cast<double>(window_features.size());
  a /= static_cast<double>(window_features.size());

  AggKindWeights out;
  out.logits.assign(k, 0.0);
  out.mask = agg_mask(kind, k);
  std::vector<double> m(k, 0.0), v(k, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    auto wv = out.weights();
    Eigen::Map<const Eigen::VectorXd> w(wv.data(), kk);
    Eigen::VectorXd dw = 2.0 * (g * w - a);
    const double mean_dw = w.dot(dw);
    for (std::size_t j = 0; j < k; ++j) {
      if (!out.mask[j]) continue;
      const double dz = wv[j] * (dw(static_cast<Eigen::Index>(j)) - mean_dw);
      m[j] = b1 * m[j] + (1 - b1) * dz;
      v[j] = b2 * v[j] + (1 - b2) * dz * dz;
      const double mh = m[j] / (1 - std::pow(b1, static_cast<double>(it)));
      const double vh = v[j] / (1 - std::pow(b2, static_cast<double>(it)));
      out.logits[j] -= config.lr * mh / (std::sqrt(vh) + eps);
    }
  }
  return out;
}

void window_feature_data(const ExtractorModel& extractor, std::span<const GenWindow> windows,
                         std::vector<Matrix>& window_features, Matrix& targets) {
  if (windows.empty()) throw std::invalid_argument("window_feature_data: no windows");
  const std::size_t k = windows.front().context.size();
  std::vector<std::vector<int>> utts;
  std::vector<std::vector<int>> tgts;
  for (const auto& w : windows) {
    if (w.context.size() != k) throw std::invalid_argument("window_feature_data: mixed K");
    utts.insert(utts.end(), w.context.begin(), w.context.end());
    tgts.push_back(w.target_utterance);
  }
  Matrix all = extract_matrix(extractor, utts);
  targets = extract_matrix(extractor, tgts);
  window_features.clear();
  for (std::size_t n = 0; n < windows.size(); ++n) {
    window_features.push_back(all.middleRows(static_cast<Eigen::Index>(n * k), static_cast<Eigen::Index>(k)));
  }
}

}  // namespace cocon
