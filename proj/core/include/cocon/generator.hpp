#pragma once

// Feature-conditioned response generator: CNN context encoder, AGG_C,
// H0 MLP, LSTM decoder with H0 as a per-step input, teacher-forced MLE,
// straight-through rollout for the cycle loss, and the test-time AGG_F
// weights.

#include "cocon/autograd.hpp"
#include "cocon/corpus.hpp"
#include "cocon/extractor.hpp"
#include "cocon/params.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cocon {

enum class GeneratorVariant { kS2S, kT, kTP, kTPBin };
std::string to_string(GeneratorVariant v);
/// Accepts s2s, t, tp, tp-bin (and cocon-t style aliases).
GeneratorVariant parse_variant(std::string_view text);
bool uses_topic(GeneratorVariant v);
bool uses_persona(GeneratorVariant v);
/// Extractor mode the variant expects.
FeatureMode variant_mode(GeneratorVariant v);

struct GeneratorConfig {
  GeneratorVariant variant = GeneratorVariant::kTP;
  std::size_t context_turns = 4;  // K
  CnnConfig cnn;                  // sentence encoder; embedding shared with the decoder
  std::size_t context_dim = 500;  // C
  std::size_t h0_hidden = 500;
  std::size_t h0_dim = 500;
  std::size_t hidden = 500;  // decoder state
  std::size_t topic_dim = 0;
  std::size_t persona_dim = 0;
  /// "zeros" (default) or "h0": H0 also initializes the decoder state
  /// (requires h0_dim == hidden).
  std::string init_state = "zeros";

  std::size_t feature_dim() const;
  std::size_t max_len() const { return cnn.max_len; }
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

/// Non-owning view of the frozen extractors a variant needs.
struct FeatureExtractors {
  const ExtractorModel* topic = nullptr;
  const ExtractorModel* persona = nullptr;
};

/// Throws std::invalid_argument if the extractors do not fit the variant
/// (missing kind, wrong mode, vocabulary size or max_len mismatch).
void check_extractors(const GeneratorConfig& config, const FeatureExtractors& extractors);

/// Input features for a batch of utterances: topic then persona columns.
/// Uses the extractor outputs (rounded for hard extractors). Empty matrix
/// (B x 0) for S2S.
ag::Matrix features_for(GeneratorVariant variant, const FeatureExtractors& extractors,
                        std::span<const std::vector<int>> utterances);

struct RolloutResult {
  /// Generated bodies, EOS excluded.
  std::vector<std::vector<int>> tokens;
  /// Per step, B x V one-hot selections carrying the ST gradient.
  std::vector<ag::Var> selections;
  /// (B*max_len) x V, example-major: selected rows before EOS, PAD after.
  ag::Var utterance_onehots;
};

class GeneratorModel {
 public:
  GeneratorModel(GeneratorConfig config, std::uint64_t seed);
  GeneratorModel(GeneratorModel&&) = default;
  GeneratorModel& operator=(GeneratorModel&&) = default;
  GeneratorModel(const GeneratorModel&) = delete;
  GeneratorModel& operator=(const GeneratorModel&) = delete;

  const GeneratorConfig& config() const { return config_; }
  GeneratorVariant variant() const { return config_.variant; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// `utterances` holds batch*K id sequences, example-major. -> B x C.
  ag::Var encode_context(std::span<const std::vector<int>> utterances, std::size_t batch, bool train = false,
                         std::mt19937_64* rng = nullptr) const;
  /// H0 from C (B x C) and F (B x feature_dim; ignored and may be empty for S2S).
  ag::Var init_hidden(const ag::Var& context, const ag::Var& features) const;

  /// Mean NLL over non-PAD target positions. Each target is BOS ... EOS PAD*,
  /// all of the same length >= 2.
  ag::Var loss_mle(const ag::Var& h0, std::span<const std::vector<int>> targets) const;
  /// Logits for a teacher-forced batch, step-major ((T-1)*B) x V.
  ag::Var teacher_forced_logits(const ag::Var& h0, std::span<const std::vector<int>> targets) const;

  /// Greedy rollout with straight-through token selection. Forward output
  /// equals greedy_decode() for every tau. With `feedback_gradient` false the
  /// selected token enters the next step as a constant, so the 1/tau factor
  /// applies once per token instead of compounding along the sequence.
  RolloutResult rollout_st(const ag::Var& h0, std::size_t max_len, double tau,
                           bool feedback_gradient = false) const;
  /// Plain greedy decoding, no graph recorded.
  std::vector<std::vector<int>> greedy_decode(const ag::Matrix& h0, std::size_t max_len) const;

  /// Full forward for a batch of contexts and features, greedy output.
  std::vector<std::vector<int>> generate(std::span<const std::vector<int>> contexts, std::size_t batch,
                                         const ag::Matrix& features) const;

  void save(const std::filesystem::path& dir) const;
  static GeneratorModel load(const std::filesystem::path& dir);

  const ag::Var& embedding() const { return embedding_; }

 private:
  struct State {
    ag::Var h, c;
  };
  State initial_state(const ag::Var& h0) const;
  /// One LSTM step; `fixed` is H0 * W_x[H0 rows] + b, precomputed per sequence.
  State step(const ag::Var& input_proj, const ag::Var& fixed, const State& s) const;
  ag::Var fixed_projection(const ag::Var& h0) const;

  GeneratorConfig config_;
  ParameterSet params_;
  std::mt19937_64 init_rng_;
  ag::Var embedding_;
  CnnEncoder encoder_;
  ag::Var aggc_w_, aggc_b_;
  ag::Var h0_w1_, h0_b1_, h0_w2_, h0_b2_;
  ag::Var lstm_wx_, lstm_wf_, lstm_wh_, lstm_b_;
  ag::Var out_w_, out_b_;
};

/// Mean over the batch of ||F_in - F(u)||^2, with F(u) the re-extracted
/// features of the rollout (pre-rounding probabilities for hard extractors).
ag::Var loss_cycle(const ag::Matrix& f_in, const RolloutResult& rollout, GeneratorVariant variant,
                   const FeatureExtractors& extractors);
/// Scalar form for fixed vectors.
double loss_cycle(std::span<const double> f_in, std::span<const double> f_out);

/// Linear slope annealing 1 -> 1/tau_final over `epochs`; returns tau.
double st_tau(std::size_t epoch, std::size_t epochs, double tau_final = 0.01);

/// One training example: K context turns and the following target turn.
struct GenWindow {
  std::vector<std::vector<int>> context;  // K x max_len
  std::vector<int> target;                // BOS ... EOS, max_len + 2
  std::vector<int> target_utterance;      // max_len, extractor input
  std::string dialogue_id;
  int target_turn = 0;  // 1-based
};

/// Sliding windows: turns k..k+K-1 predict turn k+K.
std::vector<GenWindow> make_windows(std::span<const Dialogue> dialogues, const Vocabulary& vocab, std::size_t k);

struct GeneratorTrainConfig {
  double eta = 0.1;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t patience = 10;
  std::size_t max_epochs = 50;
  double tau_final = 0.01;
  std::size_t anneal_epochs = 0;  // length of the tau schedule; 0 means max_epochs
  bool st_feedback = false;  // see GeneratorModel::rollout_st
  std::uint64_t seed = 1;
};

struct GeneratorEpoch {
  std::size_t epoch = 0;
  double tau = 1.0;
  double train_loss = 0;
  double train_mle = 0;
  double train_cycle = 0;  // 0 when eta == 0 (not computed)
  double valid_loss = 0;
  double valid_mle = 0;
  double valid_cycle = 0;  // greedy output, computed for every feature variant
};

struct GeneratorHistory {
  std::vector<GeneratorEpoch> epochs;
  std::size_t best_epoch = 0;
  std::string topic_hash_before, topic_hash_after;
  std::string persona_hash_before, persona_hash_after;
};

/// Evaluation-mode losses over a window set.
struct GeneratorLoss {
  double mle = 0;
  double cycle = 0;
};
GeneratorLoss evaluate_generator(const GeneratorModel& model, std::span<const GenWindow> windows,
                                 const FeatureExtractors& extractors, std::size_t batch_size = 64);

/// Optimizes L_MLE + eta * L_cycl with frozen extractors; early stopping on
/// the validation objective, best parameters restored. Throws
/// TrainingDiverged on non-finite losses and std::logic_error if an
/// extractor changed.
GeneratorHistory train_generator(GeneratorModel& model, std::span<const GenWindow> train,
                                 std::span<const GenWindow> valid, const FeatureExtractors& extractors,
                                 const GeneratorTrainConfig& config);

// --- AGG_F ------------------------------------------------------------------

struct AggKindWeights {
  std::vector<double> logits;
  std::vector<char> mask;  // 1 = free position
  /// Softmax over free positions; masked entries are exactly 0.
  std::vector<double> weights() const;
};

struct AggWeights {
  std::size_t k = 4;
  std::optional<AggKindWeights> topic, persona;

  const AggKindWeights& get(FeatureKind kind) const;
};

nlohmann::json to_json(const AggWeights& w);
AggWeights agg_weights_from_json(const nlohmann::json& j);

/// Positions 1..K with k mod 2 == K mod 2 are masked for persona.
std::vector<char> agg_mask(FeatureKind kind, std::size_t k);

struct AggFitConfig {
  std::size_t iterations = 500;
  double lr = 0.05;
};

/// Minimizes the mean of ||f_target - sum_k w_k f_k||^2 over windows by Adam
/// on the softmax logits. `window_features[n]` is K x L, `targets` N x L.
AggKindWeights fit_agg_weights(std::span<const ag::Matrix> window_features, const ag::Matrix& targets,
                               std::size_t k, FeatureKind kind, const AggFitConfig& config = {});
/// Mean L_p for given weights.
double agg_objective(std::span<const ag::Matrix> window_features, const ag::Matrix& targets,
                     std::span<const double> weights);

/// Extractor features for every window's context turns and target.
void window_feature_data(const ExtractorModel& extractor, std::span<const GenWindow> windows,
                         std::vector<ag::Matrix>& window_features, ag::Matrix& targets);

}  // namespace cocon
