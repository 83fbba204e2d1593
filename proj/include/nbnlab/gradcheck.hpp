#pragma once

// Randomized gradient verification: central differences against the tape for
// every layer type, and the NBN direction/magnitude gradient identity.

#include <cstdint>
#include <string>
#include <vector>

namespace nbnlab {

struct GradcheckOptions {
  // Families to run (see gradcheck_families()); empty runs all of them.
  std::vector<std::string> families;
  std::size_t cases = 100;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double fd_tolerance = 1e-4;
  double identity_tolerance = 1e-9;
  // When set, every tape node recorded by this op gets a wrong backward rule
  // (its incoming gradient is doubled). Used to prove the checker can fail.
  std::string inject_fault_op;
};

struct GradcheckResult {
  std::string name;
  std::string family;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_error < tolerance; }
};

std::vector<std::string> gradcheck_families();

// Throws std::invalid_argument for an unknown family name.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options);

bool all_passed(const std::vector<GradcheckResult>& results);

}  // namespace nbnlab
