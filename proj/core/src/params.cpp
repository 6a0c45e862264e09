#include "cocon/params.hpp"

#include "cocon/hash.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace cocon {

ag::Var ParameterSet::add(std::string name, ag::Matrix init) {
  for (const auto& n : names_) {
    if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  names_.push_back(std::move(name));
  vars_.push_back(ag::leaf(std::move(init), true));
  return vars_.back();
}

ag::Var ParameterSet::add_glorot(std::string name, Eigen::Index rows, Eigen::Index cols,
                                 std::mt19937_64& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return add(std::move(name), std::move(m));
}

ag::Var ParameterSet::add_zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return add(std::move(name), ag::Matrix::Zero(rows, cols));
}

ag::Var ParameterSet::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return vars_[i];
  }
  throw std::out_of_range("no parameter named " + name);
}

void ParameterSet::zero_grad() {
  for (auto& v : vars_) v.node()->grad.resize(0, 0);
}

void ParameterSet::set_trainable(bool trainable) {
  for (auto& v : vars_) {
    v.node()->requires_grad = trainable;
    if (!trainable) v.node()->grad.resize(0, 0);
  }
}

bool ParameterSet::all_finite() const {
  for (const auto& v : vars_) {
    if (!v.value().allFinite()) return false;
  }
  return true;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(scalar_count());
  for (const auto& v : vars_) flat.insert(flat.end(), v.value().data(), v.value().data() + v.value().size());
  return flat;
}

void ParameterSet::unflatten(const std::vector<double>& flat) {
  if (flat.size() != scalar_count()) throw std::invalid_argument("unflatten: size mismatch");
  std::size_t off = 0;
  for (auto& v : vars_) {
    auto& m = v.node()->value;
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + m.size()), m.data());
    off += static_cast<std::size_t>(m.size());
  }
}

std::string ParameterSet::hash() const {
  Sha256 h;
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    const auto& m = vars_[i].value();
    h.update(names_[i]);
    std::int64_t shape[2] = {m.rows(), m.cols()};
    h.update(std::span(reinterpret_cast<const unsigned char*>(shape), sizeof(shape)));
    h.update(std::span(reinterpret_cast<const unsigned char*>(m.data()),
                       static_cast<std::size_t>(m.size()) * sizeof(double)));
  }
  return h.hex_digest();
}

namespace {
constexpr char kMagic[4] = {'C', 'C', 'P', 'R'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("parameter file truncated");
  return v;
}
}  // namespace

void ParameterSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, 4);
  write_pod(out, static_cast<std::uint32_t>(vars_.size()));
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    const auto& m = vars_[i].value();
    write_pod(out, static_cast<std::uint32_t>(names_[i].size()));
    out.write(names_[i].data(), static_cast<std::streamsize>(names_[i].size()));
    write_pod(out, static_cast<std::int64_t>(m.rows()));
    write_pod(out, static_cast<std::int64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void ParameterSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw std::runtime_error("not a parameter file: " + path.string());
  }
  auto count = read_pod<std::uint32_t>(in);
  if (count != vars_.size()) throw std::runtime_error("parameter count mismatch in " + path.string());
  for (std::size_t i = 0; i < count; ++i) {
    auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    auto rows = read_pod<std::int64_t>(in);
    auto cols = read_pod<std::int64_t>(in);
    auto& m = vars_[i].node()->value;
    if (name != names_[i] || rows != m.rows() || cols != m.cols()) {
      throw std::runtime_error("parameter layout mismatch at " + name);
    }
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("parameter file truncated");
  }
}

Adam::Adam(const ParameterSet& params, AdamConfig config) : params_(params), config_(config) {
  for (const auto& v : params_.vars()) {
    m_.push_back(ag::Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(ag::Matrix::Zero(v.rows(), v.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto& vars = params_.vars();
  for (std::size_t i = 0; i < vars.size(); ++i) {
    auto& node = *vars[i].node();
    if (!node.requires_grad || !node.has_grad()) continue;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * node.grad;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * node.grad.cwiseProduct(node.grad);
    node.value.array() -= config_.lr * (m_[i].array() / bc1) /
                          ((v_[i].array() / bc2).sqrt() + config_.eps);
    node.grad.resize(0, 0);
  }
}

}  // namespace cocon
