#include "zolab/lora.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace zolab {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void validate_mode(const ScalingMode& mode, double alpha, std::size_t r) {
  if (r == 0) {
    throw ConfigError("LoRA rank must be at least 1");
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ConfigError("LoRA alpha must be positive and finite");
  }
  if (mode.kind == ScalingMode::Kind::FixedGamma &&
      (!(mode.fixed_gamma > 0.0) || !std::isfinite(mode.fixed_gamma))) {
    throw ConfigError("fixed gamma must be positive and finite");
  }
  if (mode.kind == ScalingMode::Kind::BlockAware) {
    if (mode.block == 0 || mode.block > r || r % mode.block != 0) {
      std::ostringstream os;
      os << "block_aware:" << mode.block << " requires a block size dividing rank " << r;
      throw ConfigError(os.str());
    }
  }
}

}  // namespace

std::string to_string(const ScalingMode& mode) {
  switch (mode.kind) {
    case ScalingMode::Kind::Canonical:
      return "canonical";
    case ScalingMode::Kind::SqrtRank:
      return "sqrt_rank";
    case ScalingMode::Kind::TopologyAware:
      return "topology_aware";
    case ScalingMode::Kind::FixedGamma:
      return "fixed_gamma:" + format_double(mode.fixed_gamma);
    case ScalingMode::Kind::BlockAware:
      return "block_aware:" + std::to_string(mode.block);
  }
  return "unknown";
}

ScalingMode parse_scaling_mode(std::string_view text) {
  if (text == "canonical") return ScalingMode::canonical();
  if (text == "sqrt_rank") return ScalingMode::sqrt_rank();
  if (text == "topology_aware") return ScalingMode::topology_aware();

  const auto colon = text.find(':');
  if (colon != std::string_view::npos) {
    const auto head = text.substr(0, colon);
    const auto tail = text.substr(colon + 1);
    const char* first = tail.data();
    const char* last = tail.data() + tail.size();
    if (head == "fixed_gamma") {
      double g = 0.0;
      auto res = std::from_chars(first, last, g);
      if (res.ec == std::errc() && res.ptr == last) {
        return ScalingMode::fixed(g);
      }
    } else if (head == "block_aware") {
      std::size_t m = 0;
      auto res = std::from_chars(first, last, m);
      if (res.ec == std::errc() && res.ptr == last) {
        return ScalingMode::block_aware(m);
      }
    }
  }
  throw ConfigError("unknown scaling mode '" + std::string(text) + "'");
}

double effective_gamma(const ScalingMode& mode, double alpha, std::size_t r) {
  validate_mode(mode, alpha, r);
  const double rr = static_cast<double>(r);
  switch (mode.kind) {
    case ScalingMode::Kind::Canonical:
      return alpha;
    case ScalingMode::Kind::SqrtRank:
      return alpha * std::sqrt(rr);
    case ScalingMode::Kind::TopologyAware:
      return alpha * rr;
    case ScalingMode::Kind::FixedGamma:
      return mode.fixed_gamma;
    case ScalingMode::Kind::BlockAware:
      return alpha * rr / static_cast<double>(mode.block);
  }
  return alpha;
}

double active_coefficient(const ScalingMode& mode, double alpha, std::size_t r) {
  validate_mode(mode, alpha, r);
  switch (mode.kind) {
    case ScalingMode::Kind::TopologyAware:
      return alpha;
    case ScalingMode::Kind::BlockAware:
      return alpha / static_cast<double>(mode.block);
    default:
      return effective_gamma(mode, alpha, r) / static_cast<double>(r);
  }
}

Vector flatten_atom(const AtomView& view) {
  Vector v;
  v.reserve(view.dim());
  v.insert(v.end(), view.b.begin(), view.b.end());
  v.insert(v.end(), view.a.begin(), view.a.end());
  return v;
}

AtomView unflatten_atom(std::span<const double> v, std::size_t d_out, std::size_t d_in,
                        std::size_t k) {
  if (v.size() != d_out + d_in) {
    std::ostringstream os;
    os << "unflatten_atom: length " << v.size() << ", expected " << d_out + d_in;
    throw ShapeError(os.str());
  }
  AtomView view;
  view.k = k;
  view.b.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d_out));
  view.a.assign(v.begin() + static_cast<std::ptrdiff_t>(d_out), v.end());
  return view;
}

LoraLayer::LoraLayer(Matrix w0, Matrix b, Matrix a, double alpha, ScalingMode mode)
    : w0_(std::move(w0)), b_(std::move(b)), a_(std::move(a)), alpha_(alpha), mode_(mode) {
  if (b_.rows() != w0_.rows() || a_.cols() != w0_.cols() || b_.cols() != a_.rows()) {
    std::ostringstream os;
    os << "LoRA factor shapes inconsistent: W0 " << w0_.rows() << "x" << w0_.cols() << ", B "
       << b_.rows() << "x" << b_.cols() << ", A " << a_.rows() << "x" << a_.cols();
    throw ShapeError(os.str());
  }
  coefficient_ = active_coefficient(mode_, alpha_, a_.rows());
}

LoraLayer LoraLayer::initialized(Matrix w0, std::size_t rank, double alpha, ScalingMode mode,
                                 const Prng& rng, AtomInit init) {
  const std::size_t d_out = w0.rows();
  const std::size_t d_in = w0.cols();
  Matrix b(d_out, rank);
  Matrix a(rank, d_in);
  const double a_scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (std::size_t k = 0; k < rank; ++k) {
    Prng atom_rng = rng.fork(k);
    if (init == AtomInit::UnitAtoms) {
      const Vector bk = sample_unit(atom_rng, d_out);
      const Vector ak = sample_unit(atom_rng, d_in);
      for (std::size_t i = 0; i < d_out; ++i) b(i, k) = bk[i];
      for (std::size_t j = 0; j < d_in; ++j) a(k, j) = ak[j];
    } else {
      for (std::size_t j = 0; j < d_in; ++j) a(k, j) = a_scale * atom_rng.gaussian();
    }
  }
  return LoraLayer(std::move(w0), std::move(b), std::move(a), alpha, mode);
}

void LoraLayer::set_mode(const ScalingMode& mode) {
  coefficient_ = active_coefficient(mode, alpha_, rank());
  mode_ = mode;
}

void LoraLayer::check_atom_index(std::size_t k) const {
  if (k >= rank()) {
    std::ostringstream os;
    os << "atom index " << k << " out of range for rank " << rank();
    throw ShapeError(os.str());
  }
}

Vector LoraLayer::forward(std::span<const double> x) const {
  Vector h = matvec(w0_, x);
  const Vector ax = matvec(a_, x);
  const Vector bax = matvec(b_, ax);
  axpy(coefficient_, bax, h);
  return h;
}

ForwardParts LoraLayer::forward_decomposed(std::span<const double> x, std::size_t k) const {
  check_atom_index(k);
  ForwardParts parts;
  parts.base = matvec(w0_, x);
  parts.active.assign(d_out(), 0.0);
  parts.frozen.assign(d_out(), 0.0);
  for (std::size_t j = 0; j < rank(); ++j) {
    const double proj = coefficient_ * dot(a_.row(j), x);
    Vector& target = (j == k) ? parts.active : parts.frozen;
    for (std::size_t i = 0; i < d_out(); ++i) {
      target[i] += b_(i, j) * proj;
    }
  }
  return parts;
}

AtomView LoraLayer::atom(std::size_t k) const {
  check_atom_index(k);
  AtomView view;
  view.k = k;
  view.b = b_.col(k);
  view.a.assign(a_.row(k).begin(), a_.row(k).end());
  return view;
}

void LoraLayer::write_atom(const AtomView& view) {
  check_atom_index(view.k);
  if (view.b.size() != d_out() || view.a.size() != d_in()) {
    throw ShapeError("write_atom: atom vector lengths do not match layer dimensions");
  }
  for (std::size_t i = 0; i < d_out(); ++i) {
    b_(i, view.k) = view.b[i];
  }
  std::copy(view.a.begin(), view.a.end(), a_.row(view.k).begin());
}

void add_scaled_outer(Matrix& w, double coefficient, std::span<const double> b,
                      std::span<const double> a) {
  if (b.size() != w.rows() || a.size() != w.cols()) {
    throw ShapeError("add_scaled_outer: vector lengths do not match matrix");
  }
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double s = coefficient * b[i];
    if (s == 0.0) {
      continue;
    }
    auto row = w.row(i);
    for (std::size_t j = 0; j < w.cols(); ++j) {
      row[j] += s * a[j];
    }
  }
}

Matrix LoraLayer::delta() const {
  Matrix d(d_out(), d_in());
  for (std::size_t k = 0; k < rank(); ++k) {
    add_scaled_outer(d, coefficient_, b_.col(k), a_.row(k));
  }
  return d;
}

Matrix LoraLayer::dense_weight() const {
  Matrix w = w0_;
  for (std::size_t k = 0; k < rank(); ++k) {
    add_scaled_outer(w, coefficient_, b_.col(k), a_.row(k));
  }
  return w;
}

Matrix LoraLayer::dense_weight_without(std::size_t k) const {
  check_atom_index(k);
  Matrix w = w0_;
  for (std::size_t j = 0; j < rank(); ++j) {
    if (j != k) {
      add_scaled_outer(w, coefficient_, b_.col(j), a_.row(j));
    }
  }
  return w;
}

double adapter_norm(const LoraLayer& layer) { return std::sqrt(frobenius_sq(layer.delta())); }

nlohmann::json to_json(const LoraLayer& layer) {
  auto flat = [](const Matrix& m) {
    return std::vector<double>(m.data().begin(), m.data().end());
  };
  return nlohmann::json{{"d_out", layer.d_out()},
                        {"d_in", layer.d_in()},
                        {"r", layer.rank()},
                        {"alpha", layer.alpha()},
                        {"mode", to_string(layer.mode())},
                        {"w0", flat(layer.w0())},
                        {"b", flat(layer.b())},
                        {"a", flat(layer.a())}};
}

LoraLayer layer_from_json(const nlohmann::json& j) {
  try {
    const auto d_out = j.at("d_out").get<std::size_t>();
    const auto d_in = j.at("d_in").get<std::size_t>();
    const auto r = j.at("r").get<std::size_t>();
    Matrix w0(d_out, d_in, j.at("w0").get<std::vector<double>>());
    Matrix b(d_out, r, j.at("b").get<std::vector<double>>());
    Matrix a(r, d_in, j.at("a").get<std::vector<double>>());
    return LoraLayer(std::move(w0), std::move(b), std::move(a), j.at("alpha").get<double>(),
                     parse_scaling_mode(j.at("mode").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("layer JSON: ") + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("layer JSON: ") + e.what());
  }
}

}  // namespace zolab
