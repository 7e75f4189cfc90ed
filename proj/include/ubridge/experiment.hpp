#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ubridge/diffusion.hpp"
#include "ubridge/grid.hpp"

namespace ubridge {

/// Thrown for unreadable or invalid configuration (exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when an emitted result violates one of the command's assertions
/// (exit code 4).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The reference two-lobe raised-cosine density on [0, 1]: a broad lobe on
/// [0, 2/3) and a narrow tall lobe on [2/3, 1]. Integrates to 1.
double two_lobe_density(double x);

struct FieldSpec {
    std::string type = "constant";  // "zero" | "constant" | "cosine"
    double value = 0.0;             // constant value
    double base = 0.0;              // cosine: base + amplitude*cos(2*pi*cycles*x)
    double amplitude = 0.0;
    double cycles = 1.0;

    static FieldSpec zero() { return FieldSpec{"zero", 0.0, 0.0, 0.0, 1.0}; }
    static FieldSpec constant(double v) { return FieldSpec{"constant", v, 0.0, 0.0, 1.0}; }
};

struct DensitySpec {
    std::string type = "two_lobe";  // "two_lobe" | "two_lobe_reflected" | "table"
    std::vector<double> values;     // for "table": samples at cell centers
};

struct McConfig {
    int n_particles = 100000;
    std::uint64_t seed = 0;
};

/// Parsed and validated run configuration (JSON on disk).
struct RunConfig {
    double domain_lo = 0.0;
    double domain_hi = 1.0;
    int n_cells = 256;
    int n_steps = 400;
    double sigma = 0.05;
    FieldSpec drift = FieldSpec::zero();
    FieldSpec killing = FieldSpec::constant(1.0);
    DensitySpec rho0{"two_lobe", {}};
    DensitySpec rho1{"two_lobe_reflected", {}};
    std::vector<double> s_list{1.0};
    double solver_tol = 1e-9;
    double tol_mass = 1e-6;
    int max_iter = 5000;
    std::optional<McConfig> mc;
    std::string output_dir = "out";

    std::string to_json_string() const;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& json_text);

/// Resolved problem data shared by all commands.
struct ExperimentSetup {
    SpaceGrid grid;
    TimeMesh tm;
    KilledDiffusionSpec spec;
    std::vector<double> rho0;                 // unit mass
    std::vector<double> rho1_unit;            // rho1 profile at unit mass
    std::vector<double> rho1_for(double s) const;
};

ExperimentSetup make_setup(const RunConfig& cfg);

/// FNV-1a 64-bit checksum of a file's bytes, as a hex string.
std::string file_checksum(const std::filesystem::path& path);

/// Experiment commands; each writes its files plus manifest.json under
/// out_dir and returns the process exit code (0 on success). On failure the
/// partially written files are removed and a machine-readable error record
/// is printed to stderr.
int cmd_solve(const RunConfig& cfg, const std::filesystem::path& out_dir,
              int n_threads = 1);
int cmd_compare(const RunConfig& cfg, const std::filesystem::path& out_dir,
                int n_threads = 1);
int cmd_simulate(const RunConfig& cfg, const std::filesystem::path& out_dir,
                 int n_threads = 1);
int cmd_oracle_check(const RunConfig& cfg, const std::filesystem::path& out_dir,
                     int n_threads = 1);

} // namespace ubridge
