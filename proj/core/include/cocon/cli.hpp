#pragma once

// Command line front end: resolved run configuration, shared pipeline
// helpers and the subcommand dispatcher.

#include "cocon/corpus.hpp"
#include "cocon/extractor.hpp"
#include "cocon/generator.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cocon {

/// Every tunable of the pipeline. Defaults follow the published
/// hyperparameters; `desk_config()` is the small single-core profile.
struct RunConfig {
  std::uint64_t seed = 1;
  std::uint64_t split_seed = 1;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::size_t min_turns = 8;
  std::size_t min_count = 1;
  std::size_t max_vocab = 50000;
  std::size_t max_len = 30;

  std::size_t embed_dim = 300;
  std::size_t filters = 300;
  std::size_t filter_width = 5;
  std::size_t stride = 2;
  std::size_t encoder_dim = 500;
  double dropout = 0.0;
  double hard_dropout = 0.0;
  std::size_t feature_dim = 100;
  double tau_match = 1.0;
  std::size_t matcher_hidden = 256;
  int min_gap = 4;
  bool cross_speaker_topic = false;

  double lambda = 0.01;
  double lr = 1e-4;
  std::size_t batch_size = 128;
  std::size_t patience = 10;
  std::size_t max_epochs = 50;
  std::size_t train_pairs = 20000;
  std::size_t valid_pairs = 2000;
  std::size_t test_pairs = 2000;

  std::size_t context_turns = 4;
  std::size_t context_dim = 500;
  std::size_t h0_hidden = 500;
  std::size_t h0_dim = 500;
  std::size_t hidden = 500;
  std::string init_state = "zeros";
  double eta = 0.1;
  std::size_t gen_batch_size = 128;
  double tau_st_final = 0.01;
  std::size_t st_anneal_epochs = 0;  // 0: anneal over max_epochs
  bool st_feedback = false;
  std::size_t agg_iterations = 500;
  double agg_lr = 0.05;
};

RunConfig desk_config();
nlohmann::json to_json(const RunConfig& c);
/// Applies the keys present in `j` on top of `base`. Unknown keys and type
/// mismatches throw std::invalid_argument.
RunConfig apply_config_json(const nlohmann::json& j, RunConfig base);

/// Vocabulary size and max_len come from `vocab`.
ExtractorConfig make_extractor_config(const RunConfig& c, FeatureKind kind, FeatureMode mode, const Vocabulary& vocab);
ExtractorTrainConfig make_extractor_train_config(const RunConfig& c);
GeneratorConfig make_generator_config(const RunConfig& c, GeneratorVariant variant, const Vocabulary& vocab,
                                      std::size_t topic_dim, std::size_t persona_dim);
GeneratorTrainConfig make_generator_train_config(const RunConfig& c);
PairingOptions make_pairing_options(const RunConfig& c);

/// Loaded, split and (optionally) vocabularized corpus.
struct PreparedData {
  CorpusSplit split;
  Vocabulary vocab;
  std::size_t skipped_short = 0;
  std::size_t parse_errors = 0;
};
PreparedData prepare_data(const std::filesystem::path& path, const RunConfig& c);
/// Uses the given vocabulary instead of building one.
PreparedData prepare_data(const std::filesystem::path& path, const RunConfig& c, const Vocabulary& vocab);

/// Train/valid/test pairs for one kind, shuffled and order-randomized.
struct PairSplits {
  std::vector<PairExample> train, valid, test;
};
PairSplits make_pair_splits(const PreparedData& data, const RunConfig& c, FeatureKind kind);

/// Fits AGG_F for every kind the extractors provide.
AggWeights fit_agg(std::span<const GenWindow> windows, const FeatureExtractors& extractors, const RunConfig& c);

/// Hex SHA-256 of every regular file below `root` (or of `root` itself),
/// keyed by relative path; manifest files are skipped.
std::map<std::string, std::string> hash_artifacts(const std::filesystem::path& root);

/// Manifest path written beside an output: DIR/manifest.json for
/// directories, FILE.manifest.json for files.
std::filesystem::path manifest_path(const std::filesystem::path& out);

/// Runs one command. `args` excludes the program name. Returns 0 on
/// success, 2 on usage errors, 1 on runtime failures.
int main_dispatch(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err);

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates and frees the same large matrices every step; under
/// glibc defaults that costs about a quarter of the runtime in page faults.
/// No-op on other C libraries.
void tune_allocator();

}  // namespace cocon
