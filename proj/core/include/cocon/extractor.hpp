#pragma once

// Self-supervised topic/persona feature extractors: a strided CNN sentence
// encoder, a soft- or hard-binary feature head and a matching function,
// trained on balanced utterance pairs with cross-entropy plus a
// decorrelation penalty.

#include "cocon/autograd.hpp"
#include "cocon/corpus.hpp"
#include "cocon/pairing.hpp"
#include "cocon/params.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cocon {

enum class FeatureMode { kSoft, kHard };
std::string to_string(FeatureMode mode);
FeatureMode parse_feature_mode(std::string_view text);

struct CnnConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 30;
  std::size_t embed_dim = 300;
  std::size_t filters = 300;
  std::size_t width = 5;
  std::size_t stride = 2;
  std::size_t out_dim = 500;
  double dropout = 0.0;

  /// Length after the two strided convolutions; throws if it would be < 1.
  std::size_t final_len() const;
};

/// Two strided ReLU convolutions followed by a fully connected tanh layer.
class CnnEncoder {
 public:
  /// Registers parameters under `prefix`. If `shared_embedding` is set, it is
  /// used as the word table instead of registering a new one.
  CnnEncoder(ParameterSet& params, const std::string& prefix, const CnnConfig& config, std::mt19937_64& rng,
             std::optional<ag::Var> shared_embedding = std::nullopt);

  /// batch of id sequences (each of length max_len) -> B x out_dim.
  ag::Var encode(std::span<const std::vector<int>> batch, bool train, std::mt19937_64* rng) const;
  /// Pre-embedded input, (B*max_len) x embed_dim.
  ag::Var encode_embedded(const ag::Var& embedded, std::size_t batch, bool train, std::mt19937_64* rng) const;

  const ag::Var& embedding() const { return embedding_; }
  const CnnConfig& config() const { return config_; }

 private:
  CnnConfig config_;
  ag::Var embedding_, conv1_w_, conv1_b_, conv2_w_, conv2_b_, fc_w_, fc_b_;
};

/// sigma(dot(f_s, f_t) / tau + bias), row-wise. Throws if tau <= 0.
ag::Var match_soft(const ag::Var& fs, const ag::Var& ft, double tau, const ag::Var* bias = nullptr);
double match_soft(std::span<const double> fs, std::span<const double> ft, double tau, double bias = 0.0);

/// Mean binary cross-entropy with clipping at 1e-7.
ag::Var loss_xent(const ag::Var& predictions, std::span<const double> labels);
/// Off-diagonal mass of the batch correlation matrix. Throws for batch < 2.
ag::Var loss_decorr(const ag::Var& features);
/// Mean |off-diagonal| entry of the column correlation matrix.
double mean_abs_offdiag_correlation(const ag::Matrix& features);

struct ExtractorConfig {
  FeatureKind kind = FeatureKind::kTopic;
  FeatureMode mode = FeatureMode::kSoft;
  CnnConfig cnn;
  std::size_t feature_dim = 100;
  double tau_match = 1.0;
  std::size_t matcher_hidden = 256;
};

nlohmann::json to_json(const CnnConfig& c);
CnnConfig cnn_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExtractorConfig& c);
ExtractorConfig extractor_config_from_json(const nlohmann::json& j);

struct ExtractedFeatures {
  ag::Var probs;     // pre-rounding sigmoid outputs, B x L
  ag::Var features;  // equal to probs (soft) or rounded with ST gradient (hard)
};

class ExtractorModel {
 public:
  ExtractorModel(ExtractorConfig config, std::uint64_t seed);
  ExtractorModel(ExtractorModel&&) = default;
  ExtractorModel& operator=(ExtractorModel&&) = default;
  ExtractorModel(const ExtractorModel&) = delete;
  ExtractorModel& operator=(const ExtractorModel&) = delete;

  const ExtractorConfig& config() const { return config_; }
  FeatureKind kind() const { return config_.kind; }
  FeatureMode mode() const { return config_.mode; }
  std::size_t feature_dim() const { return config_.feature_dim; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const CnnEncoder& encoder() const { return encoder_; }

  /// Encoder output, B x out_dim. Throws std::out_of_range for ids >= vocab.
  ag::Var cnn_encode(std::span<const std::vector<int>> batch, bool train = false,
                     std::mt19937_64* rng = nullptr) const;
  ExtractedFeatures extract(std::span<const std::vector<int>> batch, bool train = false,
                            std::mt19937_64* rng = nullptr) const;
  /// Input given as one-hot rows over the vocabulary, (B*max_len) x V; the
  /// gradient flows back into the one-hot matrix.
  ExtractedFeatures extract_onehot(const ag::Var& onehots, std::size_t batch) const;
  /// Feature head applied to an encoder output.
  ExtractedFeatures head(const ag::Var& encoded) const;

  /// Matching probability per row, B x 1.
  ag::Var match(const ag::Var& fs, const ag::Var& ft) const;

  /// Soft-mode bias of the matcher (learned offset on the scaled dot product).
  const ag::Var& soft_bias() const { return soft_bias_; }
  /// Hard-mode MLP layers (empty Vars in soft mode).
  const ag::Var& mlp_out_weight() const { return mlp_w2_; }

  /// Writes config.json and params.bin into `dir`.
  void save(const std::filesystem::path& dir) const;
  static ExtractorModel load(const std::filesystem::path& dir);

 private:
  ExtractorConfig config_;
  ParameterSet params_;
  std::mt19937_64 init_rng_;
  CnnEncoder encoder_;
  ag::Var head_w_, head_b_;
  ag::Var soft_bias_;
  ag::Var mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

/// Convenience: evaluation-mode feature matrix for a list of encoded
/// utterances, processed in batches. `use_probs` selects pre-rounding output.
ag::Matrix extract_matrix(const ExtractorModel& model, std::span<const std::vector<int>> utterances,
                          bool use_probs = false, std::size_t batch_size = 256);

struct ExtractorTrainConfig {
  double lambda = 0.01;
  std::size_t batch_size = 128;
  double lr = 1e-4;
  std::size_t patience = 10;
  std::size_t max_epochs = 50;
  std::uint64_t seed = 1;
};

struct ExtractorEpoch {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_xent = 0;
  double train_decorr = 0;
  double valid_loss = 0;
  double valid_xent = 0;
  double valid_decorr = 0;
  double valid_accuracy = 0;
};

struct ExtractorHistory {
  std::vector<ExtractorEpoch> epochs;
  std::size_t best_epoch = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pair-level losses in evaluation mode.
struct PairLoss {
  double xent = 0;
  double decorr = 0;
  double total = 0;
};
PairLoss evaluate_pair_loss(const ExtractorModel& model, std::span<const PairExample> pairs, double lambda,
                            std::size_t batch_size);

/// Optimizes L_xent + lambda * L_decorr with Adam and early stopping on the
/// validation objective; the best-epoch parameters are restored at the end.
ExtractorHistory train_extractor(ExtractorModel& model, std::span<const PairExample> train,
                                 std::span<const PairExample> valid, const ExtractorTrainConfig& config);

/// Fraction of pairs where (prediction > 0.5) == y. Throws on empty input.
double eval_matching_accuracy(const ExtractorModel& model, std::span<const PairExample> pairs,
                              std::size_t batch_size = 256);
double accuracy_from_predictions(std::span<const double> predictions, std::span<const int> labels);

}  // namespace cocon
