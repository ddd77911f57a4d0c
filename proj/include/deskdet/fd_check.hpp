#pragma once

#include <functional>
#include <string>
#include <vector>

#include "deskdet/tape.hpp"

namespace deskdet::ad {

/// A fragment rebuilds the same forward graph on a fresh tape, reading the
/// current values of the Parameters it closes over, and returns the scalar
/// loss node.
using Fragment = std::function<Var(Tape&)>;

struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double max_rel_err() const;
  bool pass(double rel_tol) const { return max_rel_err() <= rel_tol; }
  std::string summary() const;
};

/// Central-difference gradient check of a deterministic fragment. Per element:
/// rel err = |analytic - numeric| / max(|numeric|, 1e-8). The fragment is
/// evaluated twice up front; a bitwise mismatch means it is not deterministic
/// and the check aborts.
FdReport finite_difference_check(const Fragment& fragment, std::vector<Parameter*> params,
                                 double rel_tol, double step = 1e-5);

}  // namespace deskdet::ad
