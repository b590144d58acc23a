#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditlab/fast_attention.hpp"

namespace ditlab {

struct BenchRow {
  std::size_t seq_len = 0;
  std::size_t dim = 0;
  double exact_ns_median = 0.0;
  double fast_ns_median = 0.0;
  double max_err = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double exact_slope = 0.0;  // log-log fit over the top half of the L list
  double fast_slope = 0.0;
};

/// Random attention instance in the Gamma-bounded regime: A1/A2/A3/Y entries
/// uniform in [-Gamma/sqrt(d), Gamma/sqrt(d)], W and W_OV in [-1/d, 1/d], so
/// every norm hypothesis max(|W_OV A3|, |A1^T W|, |A2|) <= Gamma
/// holds and the softmax arguments stay within Gamma^2.
AttentionInstance make_bounded_instance(std::size_t dim, std::size_t seq_len,
                                        double gamma, std::uint64_t seed,
                                        bool self_mode = false,
                                        double value_scale = 1.0);

/// Scaling benchmark: exact vs fast inference over a sorted power-of-two L
/// list with d = ceil(log2 L) and Gamma = c sqrt(ln L). Timing uses the
/// monotonic clock, discards one warm-up run, auto-scales repetitions to at
/// least 50 ms per measured point and reports the median of `trials` points.
/// Verification (max_err) runs outside the timed region.
BenchResult bench_scaling(const std::vector<std::size_t>& l_list, double c_gamma,
                          std::size_t trials, double eps_target, std::uint64_t seed);

void write_bench_csv(const std::string& path, const BenchResult& result);

struct PhaseRow {
  double c = 0.0;
  double gamma = 0.0;       // c * sqrt(ln L)
  std::size_t degree = 0;   // polynomial degree g
  std::size_t rank_k1 = 0;  // C(d+g, g)
  bool feasible = false;    // k1 <= L
};

/// Rank/degree demands of the polynomial softmax factorization as the norm
/// budget grows. The per-entry feature budget fed to rank_for_accuracy is
/// c / sqrt(d), which bounds the softmax arguments by c^2 and places the
/// feasibility boundary at c = Theta(1), the normalized phase threshold.
std::vector<PhaseRow> phase_sweep(std::size_t seq_len, std::size_t dim,
                                  const std::vector<double>& c_list, double eps_target);

void write_phase_csv(const std::string& path, const std::vector<PhaseRow>& rows);

/// Config-file driven entry point behind the CLI. Reads a JSON config and
/// runs `command` (or the config's own "command" field when the argument is
/// empty), writing outputs plus manifest.json under out_dir. Returns 0 on
/// success, 2 on invalid config, 1 on runtime failure.
int run_command(const std::string& command, const std::string& config_path,
                const std::string& out_dir, std::uint64_t seed_override,
                bool has_seed_override);

}  // namespace ditlab
