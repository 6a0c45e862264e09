#include "cocon/metrics.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cocon {

using nlohmann::json;

namespace {

using NgramCounts = std::map<std::string, std::size_t>;

std::string ngram_key(const Tokens& t, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += t[start + i];
  }
  return key;
}

NgramCounts count_ngrams(const Tokens& t, std::size_t n) {
  NgramCounts c;
  if (t.size() < n || n == 0) return c;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[ngram_key(t, i, n)];
  return c;
}

std::size_t ngram_total(const Tokens& t, std::size_t n) { return t.size() >= n ? t.size() - n + 1 : 0; }

void require_nonempty(std::span<const EvalPair> pairs, const char* what) {
  if (pairs.empty()) throw std::invalid_argument(std::string(what) + ": empty corpus");
}

}  // namespace

BleuResult bleu(std::span<const EvalPair> pairs, std::size_t max_n) {
  require_nonempty(pairs, "bleu");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  BleuResult r;
  std::vector<double> matches(max_n, 0.0), totals(max_n, 0.0);
  for (const auto& p : pairs) {
    r.hyp_length += p.hypothesis.size();
    r.ref_length += p.reference.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      auto hyp = count_ngrams(p.hypothesis, n);
      auto ref = count_ngrams(p.reference, n);
      for (const auto& [g, c] : hyp) {
        auto it = ref.find(g);
        if (it != ref.end()) matches[n - 1] += static_cast<double>(std::min(c, it->second));
      }
      totals[n - 1] += static_cast<double>(ngram_total(p.hypothesis, n));
    }
  }
  double log_sum = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const double raw = totals[n - 1] > 0 ? matches[n - 1] / totals[n - 1] : 0.0;
    const double smoothed = n == 1 ? raw : (matches[n - 1] + 1.0) / (totals[n - 1] + 1.0);
    r.raw_precisions.push_back(raw);
    r.precisions.push_back(smoothed);
    if (raw == 0.0) r.raw_zero = true;
    log_sum += smoothed > 0 ? std::log(smoothed) : -std::numeric_limits<double>::infinity();
  }
  const auto c = static_cast<double>(r.hyp_length), ref = static_cast<double>(r.ref_length);
  r.brevity_penalty = c == 0 ? 0.0 : (c > ref ? 1.0 : std::exp(1.0 - ref / c));
  if (r.precisions.front() == 0.0 || r.brevity_penalty == 0.0) {
    r.score = 0.0;
  } else {
    r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  }
  return r;
}

double nist(std::span<const EvalPair> pairs, std::size_t max_n) {
  require_nonempty(pairs, "nist");
  if (max_n < 1) throw std::invalid_argument("nist: max_n must be >= 1");
  // Reference statistics for the information weights; order 0 is the word total.
  std::vector<NgramCounts> ref_counts(max_n + 1);
  double ref_words = 0, hyp_words = 0;
  for (const auto& p : pairs) {
    ref_words += static_cast<double>(p.reference.size());
    hyp_words += static_cast<double>(p.hypothesis.size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      for (const auto& [g, c] : count_ngrams(p.reference, n)) ref_counts[n][g] += c;
    }
  }
  auto info = [&](const std::string& g, std::size_t n) {
    const double count = static_cast<double>(ref_counts[n].at(g));
    double prefix = ref_words;
    if (n > 1) {
      const auto cut = g.rfind('\x1f');
      prefix = static_cast<double>(ref_counts[n - 1].at(g.substr(0, cut)));
    }
    return std::log2(prefix / count);
  };
  double score = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double gain = 0, total = 0;
    for (const auto& p : pairs) {
      auto ref = count_ngrams(p.reference, n);
      for (const auto& [g, c] : count_ngrams(p.hypothesis, n)) {
        auto it = ref.find(g);
        if (it != ref.end()) gain += static_cast<double>(std::min(c, it->second)) * info(g, n);
      }
      total += static_cast<double>(ngram_total(p.hypothesis, n));
    }
    if (total > 0) score += gain / total;
  }
  if (ref_words == 0) return 0.0;
  const double beta = std::log(0.5) / std::pow(std::log(1.5), 2);
  const double ratio = std::min(hyp_words / ref_words, 1.0);
  const double bp = ratio <= 0 ? 0.0 : std::exp(beta * std::pow(std::log(ratio), 2));
  return score * bp;
}

std::string simple_stem(const std::string& word) {
  auto ends = [&](std::string_view suf) {
    return word.size() >= suf.size() + 2 && word.compare(word.size() - suf.size(), suf.size(), suf) == 0;
  };
  auto is_vowel = [](char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; };
  auto undouble = [&](std::string s) {
    const auto n = s.size();
    if (n >= 3 && s[n - 1] == s[n - 2] && !is_vowel(s[n - 1]) && s[n - 1] != 's' && s[n - 1] != 'l') s.pop_back();
    return s;
  };
  if (ends("ing")) return undouble(word.substr(0, word.size() - 3));
  if (ends("ed")) return undouble(word.substr(0, word.size() - 2));
  if (ends("es")) return word.substr(0, word.size() - 2);
  if (ends("s") && !ends("ss")) return word.substr(0, word.size() - 1);
  return word;
}

MeteorStats meteor_sentence(const Tokens& hyp, const Tokens& ref) {
  MeteorStats st;
  if (hyp.empty() || ref.empty()) return st;
  std::vector<int> align(hyp.size(), -1);
  std::vector<char> used(ref.size(), 0);
  auto stage = [&](auto&& same) {
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      if (align[i] >= 0) continue;
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (!used[j] && same(hyp[i], ref[j])) {
          align[i] = static_cast<int>(j);
          used[j] = 1;
          break;
        }
      }
    }
  };
  stage([](const std::string& a, const std::string& b) { return a == b; });
  stage([](const std::string& a, const std::string& b) { return simple_stem(a) == simple_stem(b); });
  int prev_ref = -2;
  bool prev_matched = false;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    if (align[i] < 0) {
      prev_matched = false;
      continue;
    }
    ++st.matches;
    if (!prev_matched || align[i] != prev_ref + 1) ++st.chunks;
    prev_ref = align[i];
    prev_matched = true;
  }
  if (st.matches == 0) return st;
  const double m = static_cast<double>(st.matches);
  const double p = m / static_cast<double>(hyp.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(st.chunks) / m, 3);
  st.score = fmean * (1.0 - penalty);
  return st;
}

double meteor_simple(std::span<const EvalPair> pairs) {
  require_nonempty(pairs, "meteor");
  double total = 0;
  for (const auto& p : pairs) total += meteor_sentence(p.hypothesis, p.reference).score;
  return total / static_cast<double>(pairs.size());
}

// --- embeddings --------------------------------------------------------------

void EmbeddingTable::add(const std::string& token, std::vector<double> vec) {
  if (dim_ == 0 && order_.empty()) dim_ = vec.size();
  if (vec.size() != dim_) throw std::invalid_argument("embedding table: dimension mismatch for " + token);
  if (vectors_.emplace(token, std::move(vec)).second) order_.push_back(token);
}

const std::vector<double>* EmbeddingTable::find(const std::string& token) const {
  auto it = vectors_.find(token);
  return it == vectors_.end() ? nullptr : &it->second;
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embeddings " + path.string());
  EmbeddingTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token, field;
    ss >> token;
    std::vector<double> vec;
    while (ss >> field) {
      double v = 0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad number '" + field + "'");
      }
      vec.push_back(v);
    }
    if (vec.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": no vector");
    table.add(token, std::move(vec));
  }
  return table;
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  for (const auto& token : order_) {
    out << token;
    for (double v : vectors_.at(token)) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out << ' ' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
}

EmbeddingTable cooccurrence_embeddings(std::span<const Dialogue> dialogues, std::size_t dim, std::size_t window,
                                       std::size_t min_count) {
  if (dim == 0) throw std::invalid_argument("cooccurrence_embeddings: dim must be >= 1");
  Vocabulary vocab = build_vocab(dialogues, min_count, std::numeric_limits<std::size_t>::max());
  const auto v = static_cast<Eigen::Index>(vocab.size());
  Eigen::MatrixXd co = Eigen::MatrixXd::Zero(v, v);
  for (const auto& d : dialogues) {
    for (const auto& t : d.turns) {
      const auto& toks = t.tokens.empty() ? tokenize(t.text) : t.tokens;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        const int a = vocab.id(toks[i]);
        if (a < Vocabulary::kReserved) continue;
        for (std::size_t j = i + 1; j <= i + window && j < toks.size(); ++j) {
          const int b = vocab.id(toks[j]);
          if (b < Vocabulary::kReserved) continue;
          co(a, b) += 1.0;
          co(b, a) += 1.0;
        }
      }
    }
  }
  const double total = co.sum();
  Eigen::VectorXd rows = co.rowwise().sum();
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(v, v);
  for (Eigen::Index i = 0; i < v; ++i) {
    for (Eigen::Index j = 0; j < v; ++j) {
      if (co(i, j) > 0) ppmi(i, j) = std::max(0.0, std::log(co(i, j) * total / (rows(i) * rows(j))));
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ppmi);
  const Eigen::Index keep = std::min<Eigen::Index>(static_cast<Eigen::Index>(dim), v);
  EmbeddingTable table(dim);
  Eigen::MatrixXd vecs(v, static_cast<Eigen::Index>(dim));
  vecs.setZero();
  for (Eigen::Index k = 0; k < keep; ++k) {
    const Eigen::Index col = v - 1 - k;  // eigenvalues ascend
    Eigen::VectorXd u = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0) u = -u;
    vecs.col(k) = u * std::sqrt(std::max(0.0, eig.eigenvalues()(col)));
  }
  for (Eigen::Index i = Vocabulary::kReserved; i < v; ++i) {
    std::vector<double> row(dim);
    for (std::size_t k = 0; k < dim; ++k) row[k] = vecs(i, static_cast<Eigen::Index>(k));
    table.add(vocab.token(static_cast<int>(i)), std::move(row));
  }
  return table;
}

namespace {

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0.0;
  return a.dot(b) / (na * nb);
}

std::vector<Eigen::VectorXd> lookup(const Tokens& t, const EmbeddingTable& table, bool& any_known) {
  std::vector<Eigen::VectorXd> out;
  any_known = false;
  for (const auto& tok : t) {
    const auto* v = table.find(tok);
    if (v) {
      out.push_back(Eigen::Map<const Eigen::VectorXd>(v->data(), static_cast<Eigen::Index>(v->size())));
      any_known = true;
    } else {
      out.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.dim())));
    }
  }
  return out;
}

double greedy_direction(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  double total = 0;
  for (const auto& x : a) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& y : b) best = std::max(best, cosine(x, y));
    total += best;
  }
  return total / static_cast<double>(a.size());
}

Eigen::VectorXd extreme_pool(const std::vector<Eigen::VectorXd>& vs) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(vs.front().size());
  for (const auto& v : vs) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (std::abs(v(i)) > std::abs(out(i))) out(i) = v(i);
    }
  }
  return out;
}

}  // namespace

EmbeddingScores embedding_metrics(std::span<const EvalPair> pairs, const EmbeddingTable& table) {
  require_nonempty(pairs, "embedding_metrics");
  if (table.dim() == 0) throw std::invalid_argument("embedding_metrics: empty table");
  EmbeddingScores s;
  for (const auto& p : pairs) {
    bool hk = false, rk = false;
    auto h = lookup(p.hypothesis, table, hk);
    auto r = lookup(p.reference, table, rk);
    if (!hk || !rk) {
      ++s.oov_pairs;
      continue;
    }
    Eigen::VectorXd hs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.dim())), rs = hs;
    for (const auto& v : h) hs += v;
    for (const auto& v : r) rs += v;
    s.average += cosine(hs, rs);
    s.greedy += 0.5 * (greedy_direction(h, r) + greedy_direction(r, h));
    s.extreme += cosine(extreme_pool(h), extreme_pool(r));
  }
  const auto n = static_cast<double>(pairs.size());
  s.average /= n;
  s.greedy /= n;
  s.extreme /= n;
  return s;
}

double dist_n(std::span<const Tokens> hyps, std::size_t n) {
  NgramCounts all;
  std::size_t total = 0;
  for (const auto& h : hyps) {
    for (const auto& [g, c] : count_ngrams(h, n)) all[g] += c;
    total += ngram_total(h, n);
  }
  if (n == 0 || total == 0) throw std::invalid_argument("dist_n: no " + std::to_string(n) + "-grams in corpus");
  return static_cast<double>(all.size()) / static_cast<double>(total);
}

double ent_n(std::span<const Tokens> hyps, std::size_t n) {
  NgramCounts all;
  double total = 0;
  for (const auto& h : hyps) {
    for (const auto& [g, c] : count_ngrams(h, n)) all[g] += c;
    total += static_cast<double>(ngram_total(h, n));
  }
  if (n == 0 || total == 0) throw std::invalid_argument("ent_n: no " + std::to_string(n) + "-grams in corpus");
  double h = 0;
  for (const auto& [g, c] : all) {
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h == 0.0 ? 0.0 : h;  // no -0
}

namespace {

// Diversity metrics on corpora too short for an order report 0 rather than
// failing the whole report.
double safe(double (*f)(std::span<const Tokens>, std::size_t), std::span<const Tokens> t, std::size_t n) {
  try {
    return f(t, n);
  } catch (const std::invalid_argument&) {
    return 0.0;
  }
}

}  // namespace

MetricsReport diversity_report(std::span<const Tokens> texts) {
  if (texts.empty()) throw std::invalid_argument("diversity_report: empty corpus");
  MetricsReport r;
  r.n_pairs = texts.size();
  r.dist1 = safe(dist_n, texts, 1);
  r.dist2 = safe(dist_n, texts, 2);
  r.ent4 = safe(ent_n, texts, 4);
  return r;
}

MetricsReport evaluate_corpus(std::span<const Tokens> hyps, std::span<const Tokens> refs, const EmbeddingTable* table) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("evaluate_corpus: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " references");
  }
  MetricsReport r = diversity_report(hyps);
  std::vector<EvalPair> pairs;
  pairs.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) pairs.push_back({hyps[i], refs[i]});
  auto b = bleu(pairs);
  r.bleu = b.score;
  r.bleu_raw_zero = b.raw_zero;
  r.nist = nist(pairs);
  r.meteor = meteor_simple(pairs);
  if (table) {
    auto e = embedding_metrics(pairs, *table);
    r.greedy = e.greedy;
    r.average = e.average;
    r.extreme = e.extreme;
    r.oov_pairs = e.oov_pairs;
  }
  return r;
}

json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"BLEU", opt(r.bleu)},
          {"METEOR-s", opt(r.meteor)},
          {"NIST", opt(r.nist)},
          {"Greedy", opt(r.greedy)},
          {"Average", opt(r.average)},
          {"Extreme", opt(r.extreme)},
          {"Dist-1", r.dist1},
          {"Dist-2", r.dist2},
          {"Ent-4", r.ent4},
          {"meta",
           {{"n_pairs", r.n_pairs},
            {"oov_pairs", r.oov_pairs},
            {"bleu_raw_zero", r.bleu_raw_zero},
            {"bleu_smoothing", "add-one for n>=2, corpus level, max_n 4"},
            {"nist", "information weights from references, max_n 4"},
            {"meteor", "exact + suffix-stem matching, no synonyms"},
            {"entropy_log", "natural"}}}};
}

MetricsReport metrics_report_from_json(const json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  MetricsReport r;
  r.bleu = opt("BLEU");
  r.meteor = opt("METEOR-s");
  r.nist = opt("NIST");
  r.greedy = opt("Greedy");
  r.average = opt("Average");
  r.extreme = opt("Extreme");
  r.dist1 = j.at("Dist-1").get<double>();
  r.dist2 = j.at("Dist-2").get<double>();
  r.ent4 = j.at("Ent-4").get<double>();
  const auto& m = j.at("meta");
  r.n_pairs = m.at("n_pairs").get<std::size_t>();
  r.oov_pairs = m.at("oov_pairs").get<std::size_t>();
  r.bleu_raw_zero = m.at("bleu_raw_zero").get<bool>();
  return r;
}

}  // namespace cocon
