#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flowrl::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// flow round trip: max |a - inverse(forward(a))| over n random chunks
CheckResult check_round_trip(int H, int A, int depth, int hidden, int n_chunks, double tol,
                             std::uint64_t seed);

// analytic log|det J| against a dense numerical Jacobian (needs H*A <= 6)
CheckResult check_jacobian(int H, int A, int depth, double tol, std::uint64_t seed);

// grid quadrature of the model density over the action cube, H = 1, A in {1,2}
CheckResult check_normalization(int A, double tol, std::uint64_t seed);

// central-difference gradient checks on models with <= 500 parameters
CheckResult check_gradient_il(double tol, std::uint64_t seed);
CheckResult check_gradient_critic(double tol, std::uint64_t seed);
CheckResult check_gradient_actor(double tol, std::uint64_t seed);

// categorical projection against Gaussian-CDF quadrature
CheckResult check_hl_gauss(double tol_bin, double tol_mean);

// critic TD training on the tabular MDP against the exact DP fixed point
CheckResult check_bellman_oracle(int H, double tol, int max_steps, std::uint64_t seed);

// empirical offline fraction of the mixed sampler within 3 sigma of rho
CheckResult check_mixing_ratio(int rows, double rho, std::uint64_t seed);

/// Run every suite whose name contains `filter` (empty = all).
std::vector<CheckResult> run_all(const std::string& filter);

}  // namespace flowrl::verify
