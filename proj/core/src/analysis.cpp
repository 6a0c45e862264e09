#include "cocon/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cocon {

using ag::Matrix;

namespace {

std::vector<std::vector<int>> id_rows(std::span<const Sentence> sentences) {
  std::vector<std::vector<int>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(s.ids);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

std::vector<Sentence> collect_sentences(std::span<const Dialogue> dialogues, const Vocabulary& vocab,
                                        FeatureKind kind) {
  std::vector<Sentence> out;
  for (const auto& d : dialogues) {
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
      const Turn& t = d.turns[i];
      Sentence s;
      s.id = d.id + "#" + std::to_string(i + 1);
      s.tokens = t.tokens.empty() ? tokenize(t.text) : t.tokens;
      s.ids = encode_utterance(t, vocab);
      if (d.truth) {
        if (kind == FeatureKind::kTopic) {
          s.labels = d.truth->topic_ids;
        } else {
          s.labels = {d.truth->persona_ids[static_cast<std::size_t>(t.speaker)]};
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// --- n-grams ------------------------------------------------------------------

NgramReport ngram_report(const Matrix& features, std::span<const Sentence> sentences, const NgramConfig& config) {
  if (static_cast<std::size_t>(features.rows()) != sentences.size()) {
    throw std::invalid_argument("ngram_report: feature rows do not match sentences");
  }
  const auto l = features.cols();
  struct Acc {
    std::size_t count = 0;
    Eigen::VectorXd sum;
  };
  std::map<std::string, Acc> acc;  // ordered, so ties resolve lexicographically
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& toks = sentences[s].tokens;
    std::set<std::string> seen;
    for (std::size_t n = 1; n <= config.n_max; ++n) {
      for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string g = toks[i];
        for (std::size_t k = 1; k < n; ++k) g += " " + toks[i + k];
        seen.insert(std::move(g));
      }
    }
    for (const auto& g : seen) {
      auto& a = acc[g];
      if (a.count == 0) a.sum = Eigen::VectorXd::Zero(l);
      ++a.count;
      a.sum += features.row(static_cast<Eigen::Index>(s)).transpose();
    }
  }

  std::vector<std::pair<const std::string*, const Acc*>> kept;
  for (const auto& [g, a] : acc) {
    if (a.count >= config.min_occurrence) kept.emplace_back(&g, &a);
  }
  NgramReport report;
  report.qualifying = kept.size();
  report.per_feature.resize(static_cast<std::size_t>(l));
  if (kept.empty()) {
    std::cerr << "warning: no n-gram occurs in at least " << config.min_occurrence << " sentences\n";
    return report;
  }
  for (Eigen::Index j = 0; j < l; ++j) {
    std::vector<NgramFeatureProfile> list;
    list.reserve(kept.size());
    for (const auto& [g, a] : kept) list.push_back({*g, a->count, a->sum(j) / static_cast<double>(a->count)});
    auto cmp = [](const NgramFeatureProfile& x, const NgramFeatureProfile& y) {
      if (x.mean_activation != y.mean_activation) return x.mean_activation > y.mean_activation;
      return x.ngram < y.ngram;
    };
    const std::size_t k = std::min(config.top_k, list.size());
    std::partial_sort(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(k), list.end(), cmp);
    list.resize(k);
    report.per_feature[static_cast<std::size_t>(j)] = std::move(list);
  }
  return report;
}

NgramReport ngram_report(const ExtractorModel& extractor, std::span<const Sentence> sentences,
                         const NgramConfig& config) {
  return ngram_report(extract_matrix(extractor, id_rows(sentences)), sentences, config);
}

// --- alignment ----------------------------------------------------------------

double binary_mutual_information(std::span<const char> a, std::span<const char> b) {
  if (a.size() != b.size()) throw std::invalid_argument("mutual information: length mismatch");
  if (a.empty()) return 0.0;
  double joint[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < a.size(); ++i) joint[a[i] ? 1 : 0][b[i] ? 1 : 0] += 1;
  const double n = static_cast<double>(a.size());
  double mi = 0;
  for (int x = 0; x < 2; ++x) {
    for (int y = 0; y < 2; ++y) {
      if (joint[x][y] == 0) continue;
      const double pxy = joint[x][y] / n;
      const double px = (joint[x][0] + joint[x][1]) / n;
      const double py = (joint[0][y] + joint[1][y]) / n;
      mi += pxy * std::log(pxy / (px * py));
    }
  }
  return std::max(0.0, mi);
}

AlignmentReport alignment_score(const Matrix& features, std::span<const Sentence> sentences, std::size_t permutations,
                                std::uint64_t seed) {
  if (static_cast<std::size_t>(features.rows()) != sentences.size()) {
    throw std::invalid_argument("alignment_score: feature rows do not match sentences");
  }
  if (sentences.empty()) throw std::invalid_argument("alignment_score: no sentences");
  std::set<int> values;
  for (const auto& s : sentences) {
    if (s.labels.empty()) throw std::invalid_argument("alignment_score: sentence " + s.id + " has no planted labels");
    values.insert(s.labels.begin(), s.labels.end());
  }
  const std::size_t n = sentences.size();
  const auto l = static_cast<std::size_t>(features.cols());

  std::vector<std::vector<char>> fbin(l, std::vector<char>(n));
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t i = 0; i < n; ++i) fbin[j][i] = features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) >= 0.5;
  }
  AlignmentReport r;
  r.label_values.assign(values.begin(), values.end());
  r.permutations = permutations;
  const std::size_t nl = r.label_values.size();
  std::vector<std::vector<char>> ind(nl, std::vector<char>(n));
  for (std::size_t c = 0; c < nl; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ls = sentences[i].labels;
      ind[c][i] = std::find(ls.begin(), ls.end(), r.label_values[c]) != ls.end();
    }
  }

  r.mi.assign(l, std::vector<double>(nl, 0.0));
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t c = 0; c < nl; ++c) r.mi[j][c] = binary_mutual_information(fbin[j], ind[c]);
  }
  r.best_feature.assign(nl, 0);
  r.best_mi.assign(nl, 0.0);
  for (std::size_t c = 0; c < nl; ++c) {
    for (std::size_t j = 0; j < l; ++j) {
      if (r.mi[j][c] > r.best_mi[c]) {
        r.best_mi[c] = r.mi[j][c];
        r.best_feature[c] = j;
      }
    }
  }

  // Sentences are permuted, so each label keeps its marginal and the
  // multi-label structure of a sentence stays intact.
  r.baseline_mi.assign(nl, 0.0);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(n);
  std::vector<char> shuffled(n);
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t c = 0; c < nl; ++c) {
      for (std::size_t i = 0; i < n; ++i) shuffled[i] = ind[c][perm[i]];
      double best = 0;
      for (std::size_t j = 0; j < l; ++j) best = std::max(best, binary_mutual_information(fbin[j], shuffled));
      r.baseline_mi[c] += best / static_cast<double>(permutations);
    }
  }
  for (std::size_t c = 0; c < nl; ++c) {
    r.mean_best_mi += r.best_mi[c] / static_cast<double>(nl);
    r.mean_baseline_mi += r.baseline_mi[c] / static_cast<double>(nl);
  }
  return r;
}

AlignmentReport alignment_score(const ExtractorModel& extractor, std::span<const Sentence> sentences,
                                std::size_t permutations, std::uint64_t seed) {
  return alignment_score(extract_matrix(extractor, id_rows(sentences)), sentences, permutations, seed);
}

// --- toggling -----------------------------------------------------------------

ToggleReport toggle_success_rate(const FeatureResponder& responder,
                                 std::span<const std::vector<std::vector<int>>> contexts, FeatureKind kind,
                                 std::size_t index) {
  const std::size_t dim = responder.feature_dim(kind);
  if (index >= dim) throw std::invalid_argument("toggle_success_rate: feature index out of range");
  const std::size_t col = responder.feature_offset(kind) + index;
  const FeatureOverride on[] = {{kind, index, 1}};
  ToggleReport r;
  r.contexts = contexts.size();
  for (const auto& ctx : contexts) {
    Response base = responder.respond(ctx, {});
    if (base.diagnostics.f_in.at(col) >= 0.5) continue;
    ++r.eligible;
    if (base.diagnostics.f_out.at(col) >= 0.5) ++r.base_active;
    Response toggled = responder.respond(ctx, on);
    if (toggled.diagnostics.f_out.at(col) >= 0.5) ++r.successes;
  }
  if (r.eligible == 0) throw std::invalid_argument("toggle_success_rate: feature already active in every context");
  r.success_rate = static_cast<double>(r.successes) / static_cast<double>(r.eligible);
  r.base_rate = static_cast<double>(r.base_active) / static_cast<double>(r.eligible);
  return r;
}

std::size_t FeatureCopyStub::feature_dim(FeatureKind kind) const {
  return kind == FeatureKind::kTopic ? topic_dim_ : persona_dim_;
}

std::size_t FeatureCopyStub::feature_offset(FeatureKind kind) const {
  return kind == FeatureKind::kTopic ? 0 : topic_dim_;
}

Response FeatureCopyStub::respond(std::span<const std::vector<int>> context,
                                  std::span<const FeatureOverride> overrides) const {
  std::vector<double> f(topic_dim_ + persona_dim_, 0.0);
  for (const auto& utt : context) {
    for (int id : utt) {
      const int j = id - Vocabulary::kReserved;
      if (j >= 0 && static_cast<std::size_t>(j) < f.size()) f[static_cast<std::size_t>(j)] = 1.0;
    }
  }
  for (const auto& o : overrides) {
    if (o.index >= feature_dim(o.kind)) throw std::invalid_argument("stub: feature index out of range");
    f[feature_offset(o.kind) + o.index] = o.value;
  }
  Response r;
  r.diagnostics.f_in = f;
  r.diagnostics.f_out = f;
  return r;
}

// --- export -------------------------------------------------------------------

void export_features(const std::filesystem::path& path, const Matrix& features, std::span<const Sentence> sentences) {
  if (static_cast<std::size_t>(features.rows()) != sentences.size()) {
    throw std::invalid_argument("export_features: feature rows do not match sentences");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id\tlabel";
  for (Eigen::Index j = 0; j < features.cols(); ++j) out << "\tf" << j;
  out << '\n';
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    out << sentences[i].id << '\t';
    for (std::size_t k = 0; k < sentences[i].labels.size(); ++k) out << (k ? "," : "") << sentences[i].labels[k];
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      out << '\t' << format_double(features(static_cast<Eigen::Index>(i), j));
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void export_features(const std::filesystem::path& path, const ExtractorModel& extractor,
                     std::span<const Sentence> sentences) {
  Matrix f = sentences.empty() ? Matrix(0, static_cast<Eigen::Index>(extractor.feature_dim()))
                               : extract_matrix(extractor, id_rows(sentences));
  export_features(path, f, sentences);
}

FeatureTable read_feature_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty feature file " + path.string());
  const auto header = split_tabs(line);
  if (header.size() < 2 || header[0] != "id" || header[1] != "label") throw std::runtime_error("bad feature header");
  const std::size_t l = header.size() - 2;
  FeatureTable t;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    auto cells = split_tabs(line);
    if (cells.size() != l + 2) throw std::runtime_error("bad feature row in " + path.string());
    t.ids.push_back(cells[0]);
    t.labels.push_back(cells[1]);
    std::vector<double> r(l);
    for (std::size_t j = 0; j < l; ++j) {
      const auto& c = cells[j + 2];
      auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), r[j]);
      if (ec != std::errc() || ptr != c.data() + c.size()) throw std::runtime_error("bad number '" + c + "'");
    }
    rows.push_back(std::move(r));
  }
  t.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(l));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < l; ++j) t.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return t;
}

}  // namespace cocon
