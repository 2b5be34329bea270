#include "zolab/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "zolab/diagnostics.hpp"
#include "zolab/errors.hpp"
#include "zolab/oracles.hpp"

namespace zolab::bench {

using nlohmann::json;

namespace {

struct KindName {
  ExperimentKind kind;
  const char* name;
  const char* cli;
};

constexpr KindName kKinds[] = {
    {ExperimentKind::RankSweep, "rank_sweep", "rank-sweep"},
    {ExperimentKind::ScalingSweep, "scaling_sweep", "scaling-sweep"},
    {ExperimentKind::LrControl, "lr_control", "lr-control"},
    {ExperimentKind::CoverageCheck, "coverage_check", "coverage"},
    {ExperimentKind::Race, "race", "race"},
    {ExperimentKind::MechanismTrace, "mechanism_trace", "mechanism"},
};

std::string probe_name(ProbeKind p) { return p == ProbeKind::UnitSphere ? "unit_sphere" : "gaussian"; }
std::string init_name(AtomInit i) { return i == AtomInit::UnitAtoms ? "unit_atoms" : "zero_b"; }

ProbeKind parse_probe(const std::string& s) {
  if (s == "gaussian") return ProbeKind::Gaussian;
  if (s == "unit_sphere") return ProbeKind::UnitSphere;
  throw ConfigError("unknown probe \"" + s + "\" (expected gaussian or unit_sphere)");
}

AtomInit parse_init(const std::string& s) {
  if (s == "zero_b") return AtomInit::ZeroB;
  if (s == "unit_atoms") return AtomInit::UnitAtoms;
  throw ConfigError("unknown init \"" + s + "\" (expected zero_b or unit_atoms)");
}

std::string num(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (const auto& k : kKinds) {
    if (k.kind == kind) return k.name;
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view text) {
  for (const auto& k : kKinds) {
    if (text == k.name || text == k.cli) return k.kind;
  }
  throw ConfigError("unknown experiment kind \"" + std::string(text) + "\"");
}

ExperimentConfig default_config(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  switch (kind) {
    case ExperimentKind::RankSweep:
      c.oracle.kind = "linear";
      c.modes = {ScalingMode::canonical(), ScalingMode::topology_aware()};
      c.init = AtomInit::UnitAtoms;
      c.replicates = 1;
      c.mc_samples = 10000;
      break;
    case ExperimentKind::ScalingSweep:
    case ExperimentKind::LrControl:
      c.oracle.kind = "quadratic";
      c.ranks = {64};
      c.modes = {ScalingMode::canonical(), ScalingMode::sqrt_rank(), ScalingMode::topology_aware()};
      c.oracle.curvature_max = 30.0;
      c.sigma_xi = {2e-4};
      c.eta = 5e-6;
      c.eta_per_arm = {{"canonical", 1e-3}, {"sqrt_rank", 3e-4}, {"topology_aware", 5e-6}};
      c.steps = 20000;
      c.replicates = 5;
      break;
    case ExperimentKind::CoverageCheck:
      c.oracle.kind = "quadratic";
      c.modes = {ScalingMode::topology_aware()};
      c.init = AtomInit::UnitAtoms;
      c.replicates = 1;
      c.mc_samples = 100000;
      break;
    case ExperimentKind::Race:
      c.oracle.kind = "quadratic";
      c.ranks = {16};
      c.modes = {ScalingMode::canonical(), ScalingMode::topology_aware()};
      c.sigma_xi = {1e-3};
      c.steps = 10000;
      c.block = 4;
      c.replicates = 5;
      break;
    case ExperimentKind::MechanismTrace:
      c.oracle.kind = "quadratic";
      c.ranks = {4};
      c.modes = {ScalingMode::topology_aware()};
      c.sigma_xi = {1e-4};
      c.steps = 400;
      c.replicates = 20;
      c.eta = 1e-3;
      break;
  }
  return c;
}

void validate(const ExperimentConfig& c) {
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  }
  if (c.d_out == 0 || c.d_in == 0) throw ConfigError("d_out and d_in must be positive");
  if (c.ranks.empty()) throw ConfigError("ranks must not be empty");
  for (std::size_t r : c.ranks) {
    if (r == 0) throw ConfigError("ranks must be positive");
  }
  if (c.modes.empty()) throw ConfigError("modes must not be empty");
  for (const auto& m : c.modes) {
    for (std::size_t r : c.ranks) {
      (void)active_coefficient(m, c.alpha, r);
    }
  }
  if (!(c.alpha > 0.0) || !std::isfinite(c.alpha)) throw ConfigError("alpha must be positive");
  if (!(c.mu > 0.0) || !std::isfinite(c.mu)) throw ConfigError("mu must be positive");
  if (c.sigma_xi.empty()) throw ConfigError("sigma_xi must not be empty");
  for (double s : c.sigma_xi) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("sigma_xi entries must be >= 0");
  }
  if (c.target_critical_rank && !(*c.target_critical_rank > 0.0)) {
    throw ConfigError("target_critical_rank must be positive");
  }
  if (!(c.eta > 0.0)) throw ConfigError("eta must be positive");
  for (const auto& [arm, e] : c.eta_per_arm) {
    if (!(e > 0.0)) throw ConfigError("eta_per_arm[" + arm + "] must be positive");
  }
  if (c.eta_multipliers.empty()) throw ConfigError("eta_multipliers must not be empty");
  for (double m : c.eta_multipliers) {
    if (!(m > 0.0)) throw ConfigError("eta_multipliers must be positive");
  }
  if (c.replicates == 0) throw ConfigError("replicates must be positive");
  if (c.trajectory_points == 0) throw ConfigError("trajectory_points must be positive");
  if (!(c.divergence_factor > 1.0)) throw ConfigError("divergence_factor must exceed 1");
  if (c.oracle.kind != "linear" && c.oracle.kind != "quadratic" && c.oracle.kind != "logistic") {
    throw ConfigError("unknown oracle kind \"" + c.oracle.kind + "\"");
  }
  if (c.oracle.kind == "quadratic") {
    const double lo = 1.0 / static_cast<double>(std::min(c.d_out, c.d_in));
    if (!(c.oracle.rho >= lo && c.oracle.rho <= 1.0)) {
      throw ConfigError("oracle.rho must lie in [1/min(d_out, d_in), 1]");
    }
    if (!(c.oracle.curvature_max >= 1.0)) throw ConfigError("oracle.curvature_max must be >= 1");
  }
  if (!(c.oracle.grad_norm > 0.0)) throw ConfigError("oracle.grad_norm must be positive");
  if (c.oracle.kind == "logistic" && c.oracle.samples == 0) {
    throw ConfigError("oracle.samples must be positive");
  }

  switch (c.kind) {
    case ExperimentKind::RankSweep:
      if (c.mc_samples < 100) throw ConfigError("rank_sweep needs mc_samples >= 100");
      if (!c.target_critical_rank) {
        for (double s : c.sigma_xi) {
          if (s == 0.0) throw ConfigError("rank_sweep needs sigma_xi > 0");
        }
      }
      break;
    case ExperimentKind::CoverageCheck:
      if (c.mc_samples == 0) throw ConfigError("coverage_check needs mc_samples >= 1");
      break;
    case ExperimentKind::ScalingSweep:
    case ExperimentKind::LrControl:
    case ExperimentKind::Race:
      if (c.steps == 0) throw ConfigError("steps must be positive");
      if (c.kind == ExperimentKind::Race && c.block > 1) {
        (void)active_coefficient(ScalingMode::block_aware(c.block), c.alpha, c.ranks.front());
      }
      break;
    case ExperimentKind::MechanismTrace:
      if (c.oracle.kind != "quadratic") throw ConfigError("mechanism_trace needs a quadratic oracle");
      if (c.steps < 2 * c.ranks.front()) {
        throw ConfigError("mechanism_trace needs at least two cycles of steps");
      }
      break;
  }
}

namespace {

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key \"" + key + "\": " + e.what());
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("config key \"" + key + "\" must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

void parse_oracle(const json& j, OracleSpec& o) {
  if (!j.is_object()) throw ConfigError("config key \"oracle\" must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") o.kind = get_as<std::string>(v, "oracle.kind");
    else if (key == "rho") o.rho = get_as<double>(v, "oracle.rho");
    else if (key == "grad_norm") o.grad_norm = get_as<double>(v, "oracle.grad_norm");
    else if (key == "curvature_max") o.curvature_max = get_as<double>(v, "oracle.curvature_max");
    else if (key == "samples") o.samples = get_count(v, "oracle.samples");
    else throw ConfigError("unknown config key \"oracle." + key + "\"");
  }
}

}  // namespace

ExperimentConfig parse_config(const json& j, ExperimentKind kind) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
  ExperimentConfig c = default_config(kind);
  for (const auto& [key, v] : j.items()) {
    if (key == "schema_version") {
      c.schema_version = get_as<int>(v, key);
    } else if (key == "experiment") {
      if (parse_experiment_kind(get_as<std::string>(v, key)) != kind) {
        throw ConfigError("config is for experiment \"" + v.get<std::string>() + "\", not " +
                          to_string(kind));
      }
    } else if (key == "oracle") {
      parse_oracle(v, c.oracle);
    } else if (key == "d_out") {
      c.d_out = get_count(v, key);
    } else if (key == "d_in") {
      c.d_in = get_count(v, key);
    } else if (key == "ranks") {
      c.ranks.clear();
      for (const auto& x : get_as<json::array_t>(v, key)) c.ranks.push_back(get_count(x, key));
    } else if (key == "modes") {
      c.modes.clear();
      for (const auto& s : get_as<std::vector<std::string>>(v, key)) {
        c.modes.push_back(parse_scaling_mode(s));
      }
    } else if (key == "alpha") {
      c.alpha = get_as<double>(v, key);
    } else if (key == "mu") {
      c.mu = get_as<double>(v, key);
    } else if (key == "sigma_xi") {
      c.sigma_xi = v.is_array() ? get_as<std::vector<double>>(v, key)
                                : std::vector<double>{get_as<double>(v, key)};
    } else if (key == "target_critical_rank") {
      if (v.is_null()) c.target_critical_rank.reset();
      else c.target_critical_rank = get_as<double>(v, key);
    } else if (key == "eta") {
      c.eta = get_as<double>(v, key);
    } else if (key == "eta_per_arm") {
      c.eta_per_arm = get_as<std::map<std::string, double>>(v, key);
    } else if (key == "eta_multipliers") {
      c.eta_multipliers = get_as<std::vector<double>>(v, key);
    } else if (key == "steps") {
      c.steps = get_count(v, key);
    } else if (key == "mc_samples") {
      c.mc_samples = get_count(v, key);
    } else if (key == "replicates") {
      c.replicates = get_count(v, key);
    } else if (key == "trajectory_points") {
      c.trajectory_points = get_count(v, key);
    } else if (key == "block") {
      c.block = get_count(v, key);
    } else if (key == "divergence_factor") {
      c.divergence_factor = get_as<double>(v, key);
    } else if (key == "seed") {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw ConfigError("config key \"seed\" must be a non-negative integer");
      }
      c.seed = v.get<std::uint64_t>();
    } else if (key == "output") {
      c.output = get_as<std::string>(v, key);
    } else if (key == "probe") {
      c.probe = parse_probe(get_as<std::string>(v, key));
    } else if (key == "init") {
      c.init = parse_init(get_as<std::string>(v, key));
    } else {
      throw ConfigError("unknown config key \"" + key + "\"");
    }
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentKind kind) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, kind);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["experiment"] = to_string(c.kind);
  j["oracle"] = {{"kind", c.oracle.kind},
                 {"rho", c.oracle.rho},
                 {"grad_norm", c.oracle.grad_norm},
                 {"curvature_max", c.oracle.curvature_max},
                 {"samples", c.oracle.samples}};
  j["d_out"] = c.d_out;
  j["d_in"] = c.d_in;
  j["ranks"] = c.ranks;
  std::vector<std::string> modes;
  for (const auto& m : c.modes) modes.push_back(to_string(m));
  j["modes"] = modes;
  j["alpha"] = c.alpha;
  j["mu"] = c.mu;
  j["sigma_xi"] = c.sigma_xi;
  j["target_critical_rank"] = c.target_critical_rank ? json(*c.target_critical_rank) : json(nullptr);
  j["eta"] = c.eta;
  j["eta_per_arm"] = c.eta_per_arm;
  j["eta_multipliers"] = c.eta_multipliers;
  j["steps"] = c.steps;
  j["mc_samples"] = c.mc_samples;
  j["replicates"] = c.replicates;
  j["trajectory_points"] = c.trajectory_points;
  j["block"] = c.block;
  j["divergence_factor"] = c.divergence_factor;
  j["seed"] = c.seed;
  j["output"] = c.output;
  j["probe"] = probe_name(c.probe);
  j["init"] = init_name(c.init);
  return j;
}

const SweepRow* SweepResult::find(std::string_view arm, std::size_t r, std::string_view metric,
                                  std::optional<double> sigma_xi,
                                  std::optional<std::uint64_t> seed) const {
  for (const auto& row : rows) {
    if (row.arm == arm && row.r == r && row.metric == metric &&
        (!sigma_xi || row.sigma_xi == *sigma_xi) && (!seed || row.seed == *seed)) {
      return &row;
    }
  }
  return nullptr;
}

double SweepResult::value(std::string_view arm, std::size_t r, std::string_view metric,
                          std::optional<double> sigma_xi, std::optional<std::uint64_t> seed) const {
  const SweepRow* row = find(arm, r, metric, sigma_xi, seed);
  if (row == nullptr) {
    throw DomainError("no row for arm " + std::string(arm) + ", r " + std::to_string(r) +
                      ", metric " + std::string(metric));
  }
  return row->value;
}

double sign_test_p(std::size_t wins, std::size_t n) {
  if (wins > n) throw DomainError("sign_test_p: wins exceed trials");
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                  static_cast<double>(n) * std::log(2.0));
  }
  return std::min(p, 1.0);
}

namespace {

// Seed fan-out: master -> "replicate" -> index -> purpose label. Arms never
// key a stream, so every arm of a replicate sees the same oracle, start point,
// directions and noise, and adding an arm leaves the others untouched.
Prng replicate_stream(const ExperimentConfig& c, std::size_t i) {
  return Prng(c.seed).fork("replicate").fork(static_cast<std::uint64_t>(i));
}

Matrix base_weight(const ExperimentConfig& c, const Prng& rep) {
  Prng rng = rep.fork("w0");
  Matrix w = sample_gaussian(rng, c.d_out, c.d_in);
  const double s = 1.0 / std::sqrt(static_cast<double>(c.d_in));
  for (double& x : w.data()) x *= s;
  return w;
}

std::unique_ptr<LossOracle> build_oracle(const ExperimentConfig& c, const Matrix& start,
                                         const Prng& rep) {
  Prng rng = rep.fork("oracle");
  if (c.oracle.kind == "linear") {
    return std::make_unique<LinearOracle>(make_linear(c.d_out, c.d_in, c.oracle.grad_norm, rng));
  }
  if (c.oracle.kind == "logistic") {
    return std::make_unique<LogisticOracle>(make_logistic(c.oracle.samples, c.d_out, c.d_in, rng));
  }
  SpectralSpec spec{c.oracle.rho, c.oracle.grad_norm, c.oracle.curvature_max};
  return std::make_unique<QuadraticOracle>(make_spectral_quadratic(spec, start, rng));
}

double arm_eta(const ExperimentConfig& c, const std::string& arm) {
  const auto it = c.eta_per_arm.find(arm);
  return it == c.eta_per_arm.end() ? c.eta : it->second;
}

std::vector<std::uint64_t> trajectory_steps(std::size_t steps, std::size_t points) {
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i <= points; ++i) {
    const auto t = static_cast<std::uint64_t>((static_cast<double>(i) * steps) / points);
    if (out.empty() || out.back() != t) out.push_back(t);
  }
  return out;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(std::span<const double> xs) {
  MeanSe m;
  if (xs.empty()) return m;
  const double n = static_cast<double>(xs.size());
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.se = std::sqrt(ss / (n - 1.0) / n);
  }
  return m;
}

class RowSink {
 public:
  explicit RowSink(SweepResult& out) : out_(out) {}
  void add(const std::string& arm, std::size_t r, const std::string& mode, double sigma,
           const std::string& metric, double value, double se, std::uint64_t seed) {
    out_.rows.push_back({out_.experiment, arm, r, mode, sigma, metric, value, se, seed});
  }

 private:
  SweepResult& out_;
};

// ---- optimization races ---------------------------------------------------

enum class StepKind { Atom, FullAdapter, Block };

struct ArmSpec {
  std::string id;
  ScalingMode mode;
  double eta;
  StepKind step = StepKind::Atom;
};

struct ArmOutcome {
  double initial = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
  std::uint64_t evaluations = 0;
  std::vector<std::pair<std::uint64_t, double>> trajectory;
};

// Fixed budget of c.steps steps. Divergence (loss above divergence_factor times the
// initial loss) is flagged and the run continues; a non-finite loss ends the run.
ArmOutcome run_arm(const ExperimentConfig& c, const LossOracle& oracle, const LoraLayer& start,
                   const ArmSpec& arm, double sigma, const Prng& rep) {
  LoraLayer layer = start;
  layer.set_mode(arm.mode);
  const std::size_t r = layer.rank();
  OptimizerState state(std::move(layer), AtomSchedule::cyclic(r), c.mu, arm.eta,
                       NoiseChannel(sigma, rep.fork("noise")), rep.fork("directions"), c.probe);
  ArmOutcome out;
  out.initial = clean_loss(oracle, state.layer);
  const auto marks = trajectory_steps(c.steps, c.trajectory_points);
  std::size_t next_mark = 0;
  auto mark = [&](std::uint64_t t, double loss) {
    while (next_mark < marks.size() && marks[next_mark] == t) {
      out.trajectory.emplace_back(t, loss);
      ++next_mark;
    }
  };
  mark(0, out.initial);
  double loss = out.initial;
  for (std::uint64_t t = 0; t < c.steps; ++t) {
    try {
      StepReport rep_t;
      switch (arm.step) {
        case StepKind::Atom: rep_t = step_atom(state, oracle); break;
        case StepKind::FullAdapter: rep_t = step_full_adapter(state, oracle); break;
        case StepKind::Block: rep_t = step_block(state, oracle, arm.mode.block); break;
      }
      loss = rep_t.loss_after;
    } catch (const NumericError&) {
      loss = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(loss)) {
      loss = std::numeric_limits<double>::infinity();
      out.diverged = true;
      break;
    }
    if (loss > c.divergence_factor * out.initial) out.diverged = true;
    mark(t + 1, loss);
  }
  out.final_loss = loss;
  out.evaluations = state.evaluations;
  return out;
}

struct ReplicateSetup {
  std::unique_ptr<LossOracle> oracle;
  LoraLayer start;
};

ReplicateSetup race_setup(const ExperimentConfig& c, std::size_t r, const Prng& rep) {
  const Matrix w0 = base_weight(c, rep);
  LoraLayer layer =
      LoraLayer::initialized(w0, r, c.alpha, ScalingMode::topology_aware(), rep.fork("layer"), c.init);
  auto oracle = build_oracle(c, layer.dense_weight(), rep);
  return {std::move(oracle), std::move(layer)};
}

// Runs every arm on every replicate for each (r, sigma) and emits per-replicate rows
// plus across-replicate summaries (seed column = master seed).
void run_races(const ExperimentConfig& c, const std::vector<std::size_t>& ranks,
               const std::function<std::vector<ArmSpec>(std::size_t)>& arms_for_rank,
               const std::string& reference_arm, SweepResult& result) {
  RowSink sink(result);
  for (std::size_t r : ranks) {
    const std::vector<ArmSpec> arms = arms_for_rank(r);
    for (double sigma : c.sigma_xi) {
      std::vector<std::vector<ArmOutcome>> outcomes(arms.size());
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < c.replicates; ++i) {
        const Prng rep = replicate_stream(c, i);
        seeds.push_back(rep.seed());
        const ReplicateSetup setup = race_setup(c, r, rep);
        for (std::size_t a = 0; a < arms.size(); ++a) {
          outcomes[a].push_back(run_arm(c, *setup.oracle, setup.start, arms[a], sigma, rep));
        }
      }
      for (std::size_t a = 0; a < arms.size(); ++a) {
        const ArmSpec& arm = arms[a];
        const std::string mode = to_string(arm.mode);
        std::vector<double> finals;
        std::vector<double> improvements;
        std::size_t diverged = 0;
        for (std::size_t i = 0; i < c.replicates; ++i) {
          const ArmOutcome& o = outcomes[a][i];
          const double improvement = (o.initial - o.final_loss) / o.initial;
          sink.add(arm.id, r, mode, sigma, "eta", arm.eta, 0.0, seeds[i]);
          sink.add(arm.id, r, mode, sigma, "initial_loss", o.initial, 0.0, seeds[i]);
          sink.add(arm.id, r, mode, sigma, "final_loss", o.final_loss, 0.0, seeds[i]);
          sink.add(arm.id, r, mode, sigma, "relative_improvement", improvement, 0.0, seeds[i]);
          sink.add(arm.id, r, mode, sigma, "diverged", o.diverged ? 1.0 : 0.0, 0.0, seeds[i]);
          sink.add(arm.id, r, mode, sigma, "evaluations", static_cast<double>(o.evaluations), 0.0,
                   seeds[i]);
          for (const auto& [t, loss] : o.trajectory) {
            sink.add(arm.id, r, mode, sigma, "loss@" + std::to_string(t), loss, 0.0, seeds[i]);
          }
          finals.push_back(o.final_loss);
          improvements.push_back(improvement);
          diverged += o.diverged ? 1 : 0;
        }
        const MeanSe f = mean_se(finals);
        const MeanSe imp = mean_se(improvements);
        sink.add(arm.id, r, mode, sigma, "final_loss_mean", f.mean, f.se, c.seed);
        sink.add(arm.id, r, mode, sigma, "relative_improvement_mean", imp.mean, imp.se, c.seed);
        sink.add(arm.id, r, mode, sigma, "diverged_count", static_cast<double>(diverged), 0.0, c.seed);
      }
      // Paired comparisons of the reference arm against each other arm.
      const auto ref = std::find_if(arms.begin(), arms.end(),
                                    [&](const ArmSpec& a) { return a.id == reference_arm; });
      if (ref != arms.end()) {
        const std::size_t ri = static_cast<std::size_t>(ref - arms.begin());
        for (std::size_t a = 0; a < arms.size(); ++a) {
          if (a == ri) continue;
          std::size_t wins = 0;
          for (std::size_t i = 0; i < c.replicates; ++i) {
            if (outcomes[ri][i].final_loss < outcomes[a][i].final_loss) ++wins;
          }
          const std::string mode = to_string(ref->mode);
          sink.add(ref->id, r, mode, sigma, "wins_vs_" + arms[a].id, static_cast<double>(wins), 0.0,
                   c.seed);
          sink.add(ref->id, r, mode, sigma, "sign_test_p_vs_" + arms[a].id,
                   sign_test_p(wins, c.replicates), 0.0, c.seed);
        }
      }
      bool parity = true;
      for (const auto& arm_out : outcomes) {
        for (std::size_t i = 0; i < c.replicates; ++i) {
          if (arm_out[i].evaluations != outcomes[0][i].evaluations) parity = false;
        }
      }
      sink.add("all", r, "-", sigma, "budget_parity", parity ? 1.0 : 0.0, 0.0, c.seed);
    }
  }
}

}  // namespace

// ---- rank sweep -----------------------------------------------------------

SweepResult run_rank_sweep(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::RankSweep) throw ConfigError("run_rank_sweep needs a rank_sweep config");
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  RowSink sink(result);
  const std::size_t k = 0;
  const std::size_t q = c.d_out + c.d_in;

  for (std::size_t i = 0; i < c.replicates; ++i) {
    const Prng rep = replicate_stream(c, i);
    const std::uint64_t seed = rep.seed();
    const Matrix w0 = base_weight(c, rep);
    const auto probe_layer = LoraLayer::initialized(w0, 1, c.alpha, ScalingMode::canonical(),
                                                    rep.fork("layer"), c.init);
    const auto oracle = build_oracle(c, probe_layer.dense_weight(), rep);

    // |g_k| of the shared active atom; with a non-linear oracle it is taken at the r = 1 point.
    const Matrix g1 = dense_gradient(*oracle, probe_layer);
    const double g_norm = norm(analytic_active_gradient(g1, probe_layer.atom(k), 1.0));

    std::vector<double> sigmas = c.sigma_xi;
    if (c.target_critical_rank) {
      sigmas = {std::sqrt(2.0) * c.alpha * c.mu * g_norm / *c.target_critical_rank};
    }
    Prng floor_rng = rep.fork("floor");
    const double floor = cosine_floor(q, std::max<std::size_t>(c.mc_samples, 1000), floor_rng);
    sink.add("isotropic_floor", 0, "-", 0.0, "cosine_floor", floor, 0.0, seed);
    sink.add("reference", 0, "-", 0.0, "active_grad_norm", g_norm, 0.0, seed);

    for (double sigma : sigmas) {
      const double rc = critical_rank(c.alpha, c.mu, g_norm, sigma);
      sink.add("reference", 0, "-", sigma, "critical_rank", rc, 0.0, seed);
      sink.add("reference", 0, "-", sigma, "snr_threshold", 1.0, 0.0, seed);
      for (const auto& mode : c.modes) {
        const std::string arm = to_string(mode);
        std::vector<double> rs, snrs;
        for (std::size_t r : c.ranks) {
          const auto layer =
              LoraLayer::initialized(w0, r, c.alpha, mode, rep.fork("layer"), c.init);
          const Prng probe = rep.fork("probe").fork(r);
          const SnrEstimate est =
              empirical_snr(*oracle, layer, k, c.mu, sigma, c.mc_samples, probe, c.probe);
          const Matrix g = dense_gradient(*oracle, layer);
          const double gk = norm(analytic_active_gradient(g, layer.atom(k), 1.0));
          SnrPrediction pred{mode, c.alpha, c.mu, sigma, r, gk, c.probe, q};
          const FidelityEstimate fid =
              directional_fidelity(*oracle, layer, k, c.mu, sigma, c.mc_samples, probe, c.probe);
          sink.add(arm, r, arm, sigma, "empirical_snr", est.value, est.std_error, seed);
          sink.add(arm, r, arm, sigma, "predicted_snr", predict_snr(pred), 0.0, seed);
          sink.add(arm, r, arm, sigma, "signal_power", est.signal_power, 0.0, seed);
          sink.add(arm, r, arm, sigma, "noise_power", est.noise_power, 0.0, seed);
          sink.add(arm, r, arm, sigma, "fidelity", fid.mean_cosine, fid.std_error, seed);
          sink.add(arm, r, arm, sigma, "fidelity_moment", fid.moment_cosine, 0.0, seed);
          if (c.probe == ProbeKind::Gaussian) {
            sink.add(arm, r, arm, sigma, "predicted_cosine",
                     predicted_cosine(layer.coefficient() * gk, q, c.mu, sigma), 0.0, seed);
          }
          rs.push_back(static_cast<double>(r));
          snrs.push_back(est.value);
        }
        const bool positive = std::all_of(snrs.begin(), snrs.end(), [](double s) { return s > 0.0; });
        if (rs.size() >= 2 && positive) {
          const auto [lo, hi] = std::minmax_element(snrs.begin(), snrs.end());
          sink.add(arm, 0, arm, sigma, "snr_loglog_slope", loglog_slope(rs, snrs), 0.0, seed);
          sink.add(arm, 0, arm, sigma, "snr_max_min_ratio", *hi / *lo, 0.0, seed);
          sink.add(arm, 0, arm, sigma, "snr_crossing_rank", crossing_point(rs, snrs, 1.0), 0.0, seed);
        }
      }
    }
  }
  return result;
}

// ---- scaling sweep, lr control, race ---------------------------------------

SweepResult run_scaling_sweep(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::ScalingSweep) {
    throw ConfigError("run_scaling_sweep needs a scaling_sweep config");
  }
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  auto arms = [&](std::size_t) {
    std::vector<ArmSpec> out;
    for (const auto& m : c.modes) {
      const std::string id = to_string(m);
      out.push_back({id, m, arm_eta(c, id)});
    }
    return out;
  };
  run_races(c, c.ranks, arms, "topology_aware", result);
  return result;
}

SweepResult run_lr_control(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::LrControl) throw ConfigError("run_lr_control needs an lr_control config");
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  auto arms = [&](std::size_t) {
    std::vector<ArmSpec> out;
    const double base = arm_eta(c, "canonical");
    for (double m : c.eta_multipliers) {
      out.push_back({"canonical_x" + num(m), ScalingMode::canonical(), base * m});
    }
    out.push_back({"topology_aware", ScalingMode::topology_aware(), arm_eta(c, "topology_aware")});
    return out;
  };
  run_races(c, c.ranks, arms, "topology_aware", result);
  return result;
}

SweepResult run_race(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::Race) throw ConfigError("run_race needs a race config");
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  auto arms = [&](std::size_t) {
    std::vector<ArmSpec> out;
    out.push_back({"full_adapter", ScalingMode::canonical(), arm_eta(c, "full_adapter"),
                   StepKind::FullAdapter});
    out.push_back({"alt_naive", ScalingMode::canonical(), arm_eta(c, "alt_naive")});
    out.push_back({"ar1zo", ScalingMode::topology_aware(), arm_eta(c, "ar1zo")});
    if (c.block > 1) {
      const std::string id = "block_aware:" + std::to_string(c.block);
      out.push_back({id, ScalingMode::block_aware(c.block), arm_eta(c, id), StepKind::Block});
    }
    return out;
  };
  run_races(c, {c.ranks.front()}, arms, "ar1zo", result);
  return result;
}

// ---- coverage ---------------------------------------------------------------

SweepResult run_coverage_check(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::CoverageCheck) {
    throw ConfigError("run_coverage_check needs a coverage_check config");
  }
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  RowSink sink(result);
  for (std::size_t i = 0; i < c.replicates; ++i) {
    const Prng rep = replicate_stream(c, i);
    const std::uint64_t seed = rep.seed();
    const Matrix w0 = base_weight(c, rep);
    const auto oracle = build_oracle(c, w0, rep);
    for (const auto& mode : c.modes) {
      const std::string arm = to_string(mode);
      for (std::size_t r : c.ranks) {
        const auto layer = LoraLayer::initialized(w0, r, c.alpha, mode, rep.fork("layer"), c.init);
        const double coef = layer.coefficient();
        const double avg = coverage_average(layer, *oracle, coef);

        // Per-atom norms with the gradient frozen at the cycle start.
        const Matrix g = dense_gradient(*oracle, layer);
        std::vector<double> per_atom(r);
        for (std::size_t k = 0; k < r; ++k) {
          per_atom[k] = norm_sq(analytic_active_gradient(g, layer.atom(k), coef));
        }
        AtomSchedule cyclic = AtomSchedule::cyclic(r);
        double cyc = 0.0;
        for (std::uint64_t t = 0; t < r; ++t) cyc += per_atom[cyclic.next(t)];
        cyc /= static_cast<double>(r);

        AtomSchedule uniform = AtomSchedule::uniform(r, rep.fork("schedule").fork(r));
        std::vector<double> draws(c.mc_samples);
        for (std::uint64_t t = 0; t < c.mc_samples; ++t) draws[t] = per_atom[uniform.next(t)];
        const MeanSe u = mean_se(draws);
        // r = 1 draws are all equal.
        const double z = u.se > 1e-12 * std::abs(avg) ? (u.mean - avg) / u.se : 0.0;

        sink.add(arm, r, arm, 0.0, "coverage_average", avg, 0.0, seed);
        sink.add(arm, r, arm, 0.0, "cyclic_cycle_mean", cyc, 0.0, seed);
        sink.add(arm, r, arm, 0.0, "cyclic_abs_diff", std::abs(cyc - avg), 0.0, seed);
        sink.add(arm, r, arm, 0.0, "uniform_mc_mean", u.mean, u.se, seed);
        sink.add(arm, r, arm, 0.0, "uniform_z_score", z, 0.0, seed);
      }
    }
  }
  return result;
}

// ---- mechanism trace ----------------------------------------------------------

SweepResult run_mechanism_trace(const ExperimentConfig& c) {
  if (c.kind != ExperimentKind::MechanismTrace) {
    throw ConfigError("run_mechanism_trace needs a mechanism_trace config");
  }
  validate(c);
  SweepResult result{to_string(c.kind), {}};
  RowSink sink(result);
  const std::size_t r = c.ranks.front();
  const std::uint64_t t0 = r - 1;
  const double null = alignment_random_null(c.d_out, c.d_in);
  const auto marks = trajectory_steps(c.steps - 1, c.trajectory_points);
  const std::string mode = to_string(ScalingMode::topology_aware());
  const double eta = arm_eta(c, "ar1zo");

  for (double sigma : c.sigma_xi) {
    std::vector<double> treat_final, control_final;
    for (std::size_t i = 0; i < c.replicates; ++i) {
      const Prng rep = replicate_stream(c, i);
      const std::uint64_t seed = rep.seed();
      ReplicateSetup setup = race_setup(c, r, rep);
      OptimizerState state(setup.start, AtomSchedule::cyclic(r), c.mu, eta,
                           NoiseChannel(sigma, rep.fork("noise")), rep.fork("directions"), c.probe);
      Prng svd_rng = rep.fork("svd");
      Prng control_rng = rep.fork("control");
      std::vector<AlignmentRecord> treat, control;
      treat.reserve(c.steps);
      control.reserve(c.steps);
      double rho0 = 0.0;
      for (std::uint64_t t = 0; t < c.steps; ++t) {
        const Matrix g = dense_gradient(*setup.oracle, state.layer);
        const TopSingularPair pair = top_singular_pair(g, svd_rng);
        const double rho = pair.sigma1 * pair.sigma1 / frobenius_sq(g);
        if (t == 0) rho0 = rho;
        const StepReport step = step_ar1zo(state, *setup.oracle);

        AlignmentRecord rec = atom_alignment(state.layer.atom(step.k), pair);
        rec.t = t;
        rec.rho = rho;
        treat.push_back(rec);

        AtomView fresh{step.k, sample_unit(control_rng, c.d_out), sample_unit(control_rng, c.d_in)};
        AlignmentRecord ctl = atom_alignment(fresh, pair);
        ctl.t = t;
        ctl.rho = rho;
        control.push_back(ctl);
      }
      const auto gain_t = cumulative_alignment_gain(treat, t0, null);
      const auto gain_c = cumulative_alignment_gain(control, t0, null);
      for (std::size_t j = 0; j < treat.size(); ++j) {
        if (treat[j].t >= t0) treat[j].beta_gain_cum = gain_t[j - t0];
        if (control[j].t >= t0) control[j].beta_gain_cum = gain_c[j - t0];
      }
      auto last_cycle_mean = [&](const std::vector<double>& gains) {
        const std::size_t n = std::min(r, gains.size());
        return std::accumulate(gains.end() - static_cast<std::ptrdiff_t>(n), gains.end(), 0.0) /
               static_cast<double>(n);
      };
      const double tf = last_cycle_mean(gain_t);
      const double cf = last_cycle_mean(gain_c);
      treat_final.push_back(tf);
      control_final.push_back(cf);

      sink.add("ar1zo", r, mode, sigma, "rho_initial", rho0, 0.0, seed);
      sink.add("ar1zo", r, mode, sigma, "final_loss", clean_loss(*setup.oracle, state.layer), 0.0, seed);
      sink.add("ar1zo", r, mode, sigma, "final_cum_gain", tf, 0.0, seed);
      sink.add("control", r, "memoryless", sigma, "final_cum_gain", cf, 0.0, seed);
      for (std::uint64_t t : marks) {
        const auto& a = treat[t];
        const auto& b = control[t];
        const std::string at = "@" + std::to_string(t);
        sink.add("ar1zo", r, mode, sigma, "rho" + at, a.rho, 0.0, seed);
        sink.add("ar1zo", r, mode, sigma, "beta" + at, a.beta, 0.0, seed);
        sink.add("ar1zo", r, mode, sigma, "cos2_b" + at, a.cos2_b, 0.0, seed);
        sink.add("ar1zo", r, mode, sigma, "cos2_a" + at, a.cos2_a, 0.0, seed);
        sink.add("control", r, "memoryless", sigma, "beta" + at, b.beta, 0.0, seed);
        if (t >= t0) {
          sink.add("ar1zo", r, mode, sigma, "beta_gain_cum" + at, a.beta_gain_cum, 0.0, seed);
          sink.add("control", r, "memoryless", sigma, "beta_gain_cum" + at, b.beta_gain_cum, 0.0, seed);
        }
      }
    }
    const MeanSe tm = mean_se(treat_final);
    const MeanSe cm = mean_se(control_final);
    sink.add("ar1zo", r, mode, sigma, "cum_gain_mean", tm.mean, tm.se, c.seed);
    sink.add("control", r, "memoryless", sigma, "cum_gain_mean", cm.mean, cm.se, c.seed);
    sink.add("control", r, "memoryless", sigma, "cum_gain_z", cm.se > 0.0 ? cm.mean / cm.se : 0.0,
             0.0, c.seed);
  }
  return result;
}

SweepResult run_experiment(const ExperimentConfig& c) {
  switch (c.kind) {
    case ExperimentKind::RankSweep: return run_rank_sweep(c);
    case ExperimentKind::ScalingSweep: return run_scaling_sweep(c);
    case ExperimentKind::LrControl: return run_lr_control(c);
    case ExperimentKind::CoverageCheck: return run_coverage_check(c);
    case ExperimentKind::Race: return run_race(c);
    case ExperimentKind::MechanismTrace: return run_mechanism_trace(c);
  }
  throw ConfigError("unknown experiment kind");
}

}  // namespace zolab::bench
