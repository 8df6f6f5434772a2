#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xmodal {

// Finite-difference gradient suite covering every loss (all AHNP strategies
// and weight scopes) and the composed tiny encoder+classifier model. Used by
// the check-grads command and the acceptance tests.

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

std::vector<GradCheckRow> run_gradient_suite(std::uint64_t base_seed, int num_seeds,
                                             bool include_model);

}  // namespace xmodal
