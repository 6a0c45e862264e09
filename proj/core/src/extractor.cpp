#include "cocon/extractor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cocon {

using ag::Matrix;
using ag::Var;
using nlohmann::json;

std::string to_string(FeatureMode mode) { return mode == FeatureMode::kSoft ? "soft" : "hard"; }

FeatureMode parse_feature_mode(std::string_view text) {
  if (text == "soft") return FeatureMode::kSoft;
  if (text == "hard" || text == "bin") return FeatureMode::kHard;
  throw std::invalid_argument("unknown feature mode: " + std::string(text));
}

std::size_t CnnConfig::final_len() const {
  auto l1 = ag::conv_out_len(static_cast<Eigen::Index>(max_len), static_cast<Eigen::Index>(width),
                             static_cast<Eigen::Index>(stride));
  auto l2 = ag::conv_out_len(l1, static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(stride));
  if (l2 < 1) {
    throw std::invalid_argument("max_len " + std::to_string(max_len) + " too short for two convolutions of width " +
                                std::to_string(width) + " and stride " + std::to_string(stride));
  }
  return static_cast<std::size_t>(l2);
}

CnnEncoder::CnnEncoder(ParameterSet& params, const std::string& prefix, const CnnConfig& config,
                       std::mt19937_64& rng, std::optional<Var> shared_embedding)
    : config_(config) {
  if (config.vocab_size == 0) throw std::invalid_argument("CnnEncoder: vocab_size must be set");
  const auto e = static_cast<Eigen::Index>(config.embed_dim);
  const auto f = static_cast<Eigen::Index>(config.filters);
  const auto w = static_cast<Eigen::Index>(config.width);
  const auto len2 = static_cast<Eigen::Index>(config.final_len());
  if (shared_embedding) {
    embedding_ = *shared_embedding;
  } else {
    ag::Matrix table(static_cast<Eigen::Index>(config.vocab_size), e);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = dist(rng);
    embedding_ = params.add(prefix + "embedding", std::move(table));
  }
  conv1_w_ = params.add_glorot(prefix + "conv1.w", w * e, f, rng);
  conv1_b_ = params.add_zeros(prefix + "conv1.b", 1, f);
  conv2_w_ = params.add_glorot(prefix + "conv2.w", w * f, f, rng);
  conv2_b_ = params.add_zeros(prefix + "conv2.b", 1, f);
  fc_w_ = params.add_glorot(prefix + "fc.w", len2 * f, static_cast<Eigen::Index>(config.out_dim), rng);
  fc_b_ = params.add_zeros(prefix + "fc.b", 1, static_cast<Eigen::Index>(config.out_dim));
}

Var CnnEncoder::encode(std::span<const std::vector<int>> batch, bool train, std::mt19937_64* rng) const {
  std::vector<int> ids;
  ids.reserve(batch.size() * config_.max_len);
  for (const auto& seq : batch) {
    if (seq.size() != config_.max_len) throw std::invalid_argument("cnn_encode: input length != max_len");
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw std::out_of_range("cnn_encode: token id " + std::to_string(id) + " >= vocabulary size");
      }
      ids.push_back(id);
    }
  }
  return encode_embedded(ag::embedding(embedding_, ids), batch.size(), train, rng);
}

Var CnnEncoder::encode_embedded(const Var& embedded, std::size_t batch, bool train, std::mt19937_64* rng) const {
  const auto b = static_cast<Eigen::Index>(batch);
  const auto w = static_cast<Eigen::Index>(config_.width);
  const auto s = static_cast<Eigen::Index>(config_.stride);
  const auto len0 = static_cast<Eigen::Index>(config_.max_len);
  const auto len1 = ag::conv_out_len(len0, w, s);
  const auto len2 = ag::conv_out_len(len1, w, s);
  const bool drop = train && config_.dropout > 0.0 && rng != nullptr;

  Var h = ag::relu(ag::conv1d(embedded, b, len0, conv1_w_, conv1_b_, w, s));
  if (drop) h = ag::dropout(h, config_.dropout, *rng);
  h = ag::relu(ag::conv1d(h, b, len1, conv2_w_, conv2_b_, w, s));
  if (drop) h = ag::dropout(h, config_.dropout, *rng);
  h = ag::reshape(h, b, len2 * static_cast<Eigen::Index>(config_.filters));
  return ag::tanh(ag::add_row(ag::matmul(h, fc_w_), fc_b_));
}

Var match_soft(const Var& fs, const Var& ft, double tau, const Var* bias) {
  if (tau <= 0.0) throw std::invalid_argument("match_soft: temperature must be positive");
  Var z = ag::scale(ag::rowwise_dot(fs, ft), 1.0 / tau);
  if (bias) z = ag::add_row(z, *bias);
  return ag::sigmoid(z);
}

double match_soft(std::span<const double> fs, std::span<const double> ft, double tau, double bias) {
  if (tau <= 0.0) throw std::invalid_argument("match_soft: temperature must be positive");
  if (fs.size() != ft.size()) throw std::invalid_argument("match_soft: dimension mismatch");
  double dot = std::inner_product(fs.begin(), fs.end(), ft.begin(), 0.0);
  double z = dot / tau + bias;
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

Var loss_xent(const Var& predictions, std::span<const double> labels) {
  return ag::binary_xent(predictions, labels, 1e-7);
}

Var loss_decorr(const Var& features) { return ag::decorrelation(features, 1e-8); }

double mean_abs_offdiag_correlation(const Matrix& features) {
  Matrix m = ag::correlation_matrix(features);
  const auto l = m.rows();
  if (l < 2) return 0.0;
  double total = m.cwiseAbs().sum() - m.diagonal().cwiseAbs().sum();
  return total / static_cast<double>(l * (l - 1));
}

json to_json(const CnnConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"embed_dim", c.embed_dim},
          {"filters", c.filters},       {"width", c.width},     {"stride", c.stride},
          {"out_dim", c.out_dim},       {"dropout", c.dropout}};
}

CnnConfig cnn_config_from_json(const json& j) {
  CnnConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.filters = j.at("filters").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.stride = j.at("stride").get<std::size_t>();
  c.out_dim = j.at("out_dim").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

json to_json(const ExtractorConfig& c) {
  return {{"kind", to_string(c.kind)},        {"mode", to_string(c.mode)},
          {"cnn", to_json(c.cnn)},            {"feature_dim", c.feature_dim},
          {"tau_match", c.tau_match},         {"matcher_hidden", c.matcher_hidden}};
}

ExtractorConfig extractor_config_from_json(const json& j) {
  ExtractorConfig c;
  c.kind = parse_feature_kind(j.at("kind").get<std::string>());
  c.mode = parse_feature_mode(j.at("mode").get<std::string>());
  c.cnn = cnn_config_from_json(j.at("cnn"));
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.tau_match = j.at("tau_match").get<double>();
  c.matcher_hidden = j.at("matcher_hidden").get<std::size_t>();
  return c;
}

namespace {
std::mt19937_64 seeded(std::uint64_t seed) { return std::mt19937_64(seed); }
}  // namespace

ExtractorModel::ExtractorModel(ExtractorConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      init_rng_(seeded(seed)),
      encoder_(params_, "enc.", config_.cnn, init_rng_) {
  const auto d = static_cast<Eigen::Index>(config_.cnn.out_dim);
  const auto l = static_cast<Eigen::Index>(config_.feature_dim);
  if (l < 1) throw std::invalid_argument("feature_dim must be >= 1");
  if (config_.tau_match <= 0.0) throw std::invalid_argument("tau_match must be positive");
  head_w_ = params_.add_glorot("head.w", d, l, init_rng_);
  head_b_ = params_.add_zeros("head.b", 1, l);
  if (config_.mode == FeatureMode::kSoft) {
    // Features start near 0.5, so the dot product starts near L/4; the offset
    // centers the initial matching probability at 0.5.
    Matrix b(1, 1);
    b(0, 0) = -static_cast<double>(l) / (4.0 * config_.tau_match);
    soft_bias_ = params_.add("match.bias", b);
  } else {
    const auto h = static_cast<Eigen::Index>(config_.matcher_hidden);
    mlp_w1_ = params_.add_glorot("mlp.w1", 2 * l, h, init_rng_);
    mlp_b1_ = params_.add_zeros("mlp.b1", 1, h);
    // Hidden units alternate between reading the difference and the sum of
    // the two feature vectors.
    auto& w1 = mlp_w1_.node()->value;
    for (Eigen::Index j = 0; j < h; ++j) {
      for (Eigen::Index i = 0; i < l; ++i) w1(l + i, j) = (j % 2 == 0 ? -1.0 : 1.0) * w1(i, j);
    }
    mlp_w2_ = params_.add_glorot("mlp.w2", h, 1, init_rng_);
    mlp_b2_ = params_.add_zeros("mlp.b2", 1, 1);
  }
}

Var ExtractorModel::cnn_encode(std::span<const std::vector<int>> batch, bool train, std::mt19937_64* rng) const {
  return encoder_.encode(batch, train, rng);
}

ExtractedFeatures ExtractorModel::head(const Var& encoded) const {
  ExtractedFeatures out;
  out.probs = ag::sigmoid(ag::add_row(ag::matmul(encoded, head_w_), head_b_));
  out.features = config_.mode == FeatureMode::kSoft ? out.probs : ag::st_round(out.probs);
  return out;
}

ExtractedFeatures ExtractorModel::extract(std::span<const std::vector<int>> batch, bool train,
                                          std::mt19937_64* rng) const {
  return head(cnn_encode(batch, train, rng));
}

ExtractedFeatures ExtractorModel::extract_onehot(const Var& onehots, std::size_t batch) const {
  if (onehots.cols() != static_cast<Eigen::Index>(config_.cnn.vocab_size) ||
      onehots.rows() != static_cast<Eigen::Index>(batch * config_.cnn.max_len)) {
    throw std::invalid_argument("extract_onehot: expected (batch*max_len) x vocab input");
  }
  Var embedded = ag::matmul(onehots, encoder_.embedding());
  return head(encoder_.encode_embedded(embedded, batch, false, nullptr));
}

Var ExtractorModel::match(const Var& fs, const Var& ft) const {
  const auto l = static_cast<Eigen::Index>(config_.feature_dim);
  if (fs.cols() != l || ft.cols() != l || fs.rows() != ft.rows()) {
    throw std::invalid_argument("match: feature dimension mismatch");
  }
  if (config_.mode == FeatureMode::kSoft) return match_soft(fs, ft, config_.tau_match, &soft_bias_);
  std::vector<Var> parts = {fs, ft};
  // Inputs centered at 0.5 so both agreeing 0s and agreeing 1s register.
  Var shift = ag::constant(Matrix::Constant(1, l, -0.5));
  parts = {ag::add_row(fs, shift), ag::add_row(ft, shift)};
  Var pre = ag::add_row(ag::matmul(ag::concat_cols(parts), mlp_w1_), mlp_b1_);
  Var h = ag::relu(pre);
  return ag::sigmoid(ag::add_row(ag::matmul(h, mlp_w2_), mlp_b2_));
}

void ExtractorModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(config_).dump(2) << '\n';
  params_.save(dir / "params.bin");
}

ExtractorModel ExtractorModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw std::runtime_error("checkpoint not found: " + (dir / "config.json").string());
  json j = json::parse(in);
  ExtractorModel model(extractor_config_from_json(j), 0);
  model.params_.load(dir / "params.bin");
  return model;
}

Matrix extract_matrix(const ExtractorModel& model, std::span<const std::vector<int>> utterances, bool use_probs,
                      std::size_t batch_size) {
  ag::NoGradGuard guard;
  Matrix out(static_cast<Eigen::Index>(utterances.size()), static_cast<Eigen::Index>(model.feature_dim()));
  for (std::size_t start = 0; start < utterances.size(); start += batch_size) {
    std::size_t n = std::min(batch_size, utterances.size() - start);
    auto f = model.extract(utterances.subspan(start, n));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        use_probs ? f.probs.value() : f.features.value();
  }
  return out;
}

namespace {

struct BatchOutput {
  Var loss, xent, decorr;
  Var predictions;
};

BatchOutput pair_batch(const ExtractorModel& model, std::span<const PairExample> pairs, double lambda, bool train,
                       std::mt19937_64* rng) {
  std::vector<std::vector<int>> sentences;
  sentences.reserve(pairs.size() * 2);
  std::vector<double> labels;
  for (const auto& p : pairs) sentences.push_back(p.s);
  for (const auto& p : pairs) sentences.push_back(p.t);
  for (const auto& p : pairs) labels.push_back(static_cast<double>(p.y));
  auto feats = model.extract(sentences, train, rng);
  const auto n = static_cast<Eigen::Index>(pairs.size());
  // Rows [0, n) are s, [n, 2n) are t.
  std::vector<int> s_rows(static_cast<std::size_t>(n)), t_rows(static_cast<std::size_t>(n));
  std::iota(s_rows.begin(), s_rows.end(), 0);
  std::iota(t_rows.begin(), t_rows.end(), static_cast<int>(n));
  Var fs = ag::gather_rows(feats.features, s_rows);
  Var ft = ag::gather_rows(feats.features, t_rows);
  BatchOutput out;
  out.predictions = model.match(fs, ft);
  out.xent = loss_xent(out.predictions, labels);
  // Hard features go through the pre-rounding probabilities here; rounded
  // columns can be driven constant, which the zero-variance rule scores as 0.
  out.decorr = feats.probs.rows() >= 2 ? loss_decorr(feats.probs) : ag::constant(Matrix::Zero(1, 1));
  out.loss = lambda != 0.0 ? ag::add(out.xent, ag::scale(out.decorr, lambda)) : out.xent;
  return out;
}

}  // namespace

PairLoss evaluate_pair_loss(const ExtractorModel& model, std::span<const PairExample> pairs, double lambda,
                            std::size_t batch_size) {
  if (pairs.empty()) throw std::invalid_argument("evaluate_pair_loss: empty pair set");
  ag::NoGradGuard guard;
  PairLoss total;
  double weight = 0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    std::size_t n = std::min(batch_size, pairs.size() - start);
    auto out = pair_batch(model, pairs.subspan(start, n), lambda, false, nullptr);
    const auto w = static_cast<double>(n);
    total.xent += out.xent.scalar() * w;
    total.decorr += out.decorr.scalar() * w;
    weight += w;
  }
  total.xent /= weight;
  total.decorr /= weight;
  total.total = total.xent + lambda * total.decorr;
  return total;
}

ExtractorHistory train_extractor(ExtractorModel& model, std::span<const PairExample> train,
                                 std::span<const PairExample> valid, const ExtractorTrainConfig& config) {
  if (train.empty() || valid.empty()) throw std::invalid_argument("train_extractor: empty pair set");
  if (config.batch_size < 2) throw std::invalid_argument("train_extractor: batch size must be >= 2");
  ExtractorHistory history;
  std::mt19937_64 rng(config.seed);
  Adam adam(model.params(), AdamConfig{.lr = config.lr});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_params = model.params().flatten();
  std::size_t since_best = 0;
  std::vector<PairExample> batch;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    ExtractorEpoch rec;
    rec.epoch = epoch;
    double seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::size_t n = std::min(config.batch_size, order.size() - start);
      if (n < 2) continue;
      batch.clear();
      for (std::size_t k = 0; k < n; ++k) batch.push_back(train[order[start + k]]);
      auto out = pair_batch(model, batch, config.lambda, true, &rng);
      if (!std::isfinite(out.loss.scalar())) {
        std::ostringstream msg;
        msg << "extractor training diverged at epoch " << epoch << ", batch starting " << start
            << " (xent=" << out.xent.scalar() << ", decorr=" << out.decorr.scalar() << ")";
        throw TrainingDiverged(msg.str());
      }
      ag::backward(out.loss);
      adam.step();
      const auto w = static_cast<double>(n);
      rec.train_loss += out.loss.scalar() * w;
      rec.train_xent += out.xent.scalar() * w;
      rec.train_decorr += out.decorr.scalar() * w;
      seen += w;
    }
    if (!model.params().all_finite()) {
      throw TrainingDiverged("extractor parameters became non-finite at epoch " + std::to_string(epoch));
    }
    rec.train_loss /= seen;
    rec.train_xent /= seen;
    rec.train_decorr /= seen;
    auto vl = evaluate_pair_loss(model, valid, config.lambda, config.batch_size);
    rec.valid_xent = vl.xent;
    rec.valid_decorr = vl.decorr;
    rec.valid_loss = vl.total;
    rec.valid_accuracy = eval_matching_accuracy(model, valid);
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
  return history;
}

double accuracy_from_predictions(std::span<const double> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw std::invalid_argument("accuracy: empty set");
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    int predicted = predictions[i] > 0.5 ? 1 : 0;
    if (predicted == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double eval_matching_accuracy(const ExtractorModel& model, std::span<const PairExample> pairs,
                              std::size_t batch_size) {
  if (pairs.empty()) throw std::invalid_argument("eval_matching_accuracy: empty pair set");
  ag::NoGradGuard guard;
  std::vector<double> preds;
  std::vector<int> labels;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    std::size_t n = std::min(batch_size, pairs.size() - start);
    auto sub = pairs.subspan(start, n);
    std::vector<std::vector<int>> s, t;
    for (const auto& p : sub) {
      s.push_back(p.s);
      t.push_back(p.t);
      labels.push_back(p.y);
    }
    Var p = model.match(model.extract(s).features, model.extract(t).features);
    for (Eigen::Index i = 0; i < p.rows(); ++i) preds.push_back(p.value()(i, 0));
  }
  return accuracy_from_predictions(preds, labels);
}

}  // namespace cocon
