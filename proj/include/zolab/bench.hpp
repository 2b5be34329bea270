#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "zolab/lora.hpp"
#include "zolab/zo.hpp"

namespace zolab::bench {

enum class ExperimentKind { RankSweep, ScalingSweep, LrControl, CoverageCheck, Race, MechanismTrace };

/// "rank_sweep", "scaling_sweep", "lr_control", "coverage_check", "race", "mechanism_trace".
std::string to_string(ExperimentKind kind);
/// Accepts the names above and the CLI spellings ("rank-sweep", "coverage", "mechanism", ...).
ExperimentKind parse_experiment_kind(std::string_view text);

inline constexpr int kSchemaVersion = 1;

struct OracleSpec {
  std::string kind = "linear";  ///< "linear", "quadratic" or "logistic"
  double rho = 0.7;             ///< quadratic: spectral concentration at the start point
  double grad_norm = 1.0;       ///< linear and quadratic: |G|_F at the start point
  double curvature_max = 1.0;   ///< quadratic: weights in [1, curvature_max]
  std::size_t samples = 64;     ///< logistic: data points
};

/// Full description of a run. Same config (including seed) gives a byte-identical CSV.
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  ExperimentKind kind = ExperimentKind::RankSweep;
  OracleSpec oracle;
  std::size_t d_out = 16;
  std::size_t d_in = 16;
  std::vector<std::size_t> ranks{1, 4, 8, 16, 32, 64};
  std::vector<ScalingMode> modes;
  double alpha = 16.0;
  double mu = 1e-3;
  std::vector<double> sigma_xi{1e-4};
  /// rank_sweep: when set, sigma_xi is replaced by the value putting the naive
  /// critical rank of the probed atom at this rank.
  std::optional<double> target_critical_rank;
  double eta = 1e-4;
  /// Step size overrides keyed by arm id.
  std::map<std::string, double> eta_per_arm;
  std::vector<double> eta_multipliers{1.0, 10.0, 100.0};
  std::size_t steps = 1000;
  std::size_t mc_samples = 10000;
  std::size_t replicates = 5;
  std::size_t trajectory_points = 20;
  std::size_t block = 1;  ///< race: adds a block_aware arm when > 1
  double divergence_factor = 10.0;
  std::uint64_t seed = 42;
  std::string output = "out";
  ProbeKind probe = ProbeKind::Gaussian;
  AtomInit init = AtomInit::ZeroB;
};

/// Defaults for a kind: alpha = 16, mu = 1e-3, ranks {1,4,8,16,32,64}
/// for sweeps, plus per-kind oracle, modes, init and budgets.
ExperimentConfig default_config(ExperimentKind kind);

/// Parses a versioned JSON config on top of default_config(kind). Unknown keys,
/// a missing or unsupported schema_version, or an "experiment" field naming a
/// different kind raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j, ExperimentKind kind);
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentKind kind);
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Throws ConfigError on an inconsistent config.
void validate(const ExperimentConfig& cfg);

struct SweepRow {
  std::string experiment;
  std::string arm;
  std::size_t r = 0;  ///< 0 for rows summarizing across ranks
  std::string mode;
  double sigma_xi = 0.0;
  std::string metric;
  double value = 0.0;
  double std_error = 0.0;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::string experiment;
  std::vector<SweepRow> rows;

  /// First row matching (arm, r, metric), optionally also sigma_xi and seed.
  const SweepRow* find(std::string_view arm, std::size_t r, std::string_view metric,
                       std::optional<double> sigma_xi = std::nullopt,
                       std::optional<std::uint64_t> seed = std::nullopt) const;
  /// Value of find(); throws DomainError when absent.
  double value(std::string_view arm, std::size_t r, std::string_view metric,
               std::optional<double> sigma_xi = std::nullopt,
               std::optional<std::uint64_t> seed = std::nullopt) const;
};

SweepResult run_rank_sweep(const ExperimentConfig& cfg);
SweepResult run_scaling_sweep(const ExperimentConfig& cfg);
SweepResult run_lr_control(const ExperimentConfig& cfg);
SweepResult run_coverage_check(const ExperimentConfig& cfg);
SweepResult run_race(const ExperimentConfig& cfg);
SweepResult run_mechanism_trace(const ExperimentConfig& cfg);
SweepResult run_experiment(const ExperimentConfig& cfg);

/// One-sided sign-test p-value P(Binomial(n, 1/2) >= wins).
double sign_test_p(std::size_t wins, std::size_t n);

inline constexpr const char* kCsvHeader =
    "experiment,arm,r,mode,sigma_xi,metric,value,stderr,seed";

/// CSV text: fixed header, LF endings, shortest round-trip decimal floats.
std::string to_csv(const SweepResult& result);
/// Throws IoError naming the path on failure.
void emit_csv(const SweepResult& result, const std::filesystem::path& path);
/// One line chart per metric; metrics named "<base>@<step>" plot against step,
/// the rest against rank. SNR charts use log axes and a reference line at SNR = 1.
std::string to_svg(const SweepResult& result);
void emit_svg(const SweepResult& result, const std::filesystem::path& path);

}  // namespace zolab::bench
