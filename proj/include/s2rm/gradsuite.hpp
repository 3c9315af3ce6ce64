#pragma once

#include <string>
#include <vector>

// Consolidated gradient validation: every differentiable primitive against
// central finite differences, plus one full model step + query + loss
// composition at reduced sizes. Backs both the CLI command and the
// acceptance run.

namespace s2rm {

struct GradSuiteEntry {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double worst_primitive = 0.0;
  double worst_composition = 0.0;
  bool pass = false;
};

GradSuiteReport run_gradient_suite();

}  // namespace s2rm
