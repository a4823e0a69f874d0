#pragma once

// Finite-difference sweep over every differentiable operation and the full
// training loss. Shared by the CLI `gradcheck` command and the tests.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ficnet/testkit.hpp"

namespace ficnet {

struct OpCheck {
  std::string name;
  testkit::GradcheckResult result;
  double tolerance = 0;
  double seconds = 0;

  bool passed() const { return result.worst <= tolerance; }
};

struct GradcheckSuiteOptions {
  std::uint64_t seed = 0;
  bool include_pipeline = true;
  std::string filter;  // run only checks whose name contains this
};

template <class T>
std::vector<OpCheck> run_gradcheck_suite(const GradcheckSuiteOptions& options,
                                         const std::function<void(const OpCheck&)>& on_result = {});

/// Names of the checks in sweep order.
std::vector<std::string> gradcheck_suite_names();

}  // namespace ficnet
